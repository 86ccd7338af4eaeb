//! Population-weighted aggregates of sampled coverage fields.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::{compute_hazards, compute_survivor_and_cif, CircType, CoverageField};
use crate::inference::PosteriorSamples;
use crate::population::Population;
use crate::structure::{Grid, ModelStructure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Coverage,
    IncidentCount,
    UnmetNeed,
    MeanAgeAtEvent,
}

impl Statistic {
    pub fn label(self) -> &'static str {
        match self {
            Statistic::Coverage => "coverage",
            Statistic::IncidentCount => "incident_count",
            Statistic::UnmetNeed => "unmet_need",
            Statistic::MeanAgeAtEvent => "mean_age_at_event",
        }
    }
}

/// Type label used on unmet-need rows, which do not depend on a type.
pub const UNCIRCUMCISED_LABEL: &str = "uncircumcised";

/// Aggregation request as written in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub level: String,
    pub name: String,
    /// Region identifiers; all regions when absent.
    #[serde(default)]
    pub regions: Option<Vec<String>>,
    pub age_lo: usize,
    pub age_hi: usize,
    /// Reporting years; all when absent.
    #[serde(default)]
    pub years: Option<Vec<i32>>,
    pub types: Vec<String>,
    pub statistic: Statistic,
}

/// A query resolved against the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateQuery {
    pub level: String,
    pub region_set: String,
    pub regions: Vec<usize>,
    pub age_lo: usize,
    pub age_hi: usize,
    pub years: Vec<i32>,
    pub types: Vec<CircType>,
    pub statistic: Statistic,
}

impl QuerySpec {
    pub fn resolve(&self, grid: &Grid) -> Result<AggregateQuery> {
        let regions = match &self.regions {
            None => (0..grid.n_regions()).collect(),
            Some(names) => names
                .iter()
                .map(|n| grid.region_index(n).ok_or_else(|| Error::Config(format!("query `{}`: unknown region `{n}`", self.name))))
                .collect::<Result<Vec<_>>>()?,
        };
        let years = self.years.clone().unwrap_or_else(|| grid.reporting_years().collect());
        let types = self
            .types
            .iter()
            .map(|t| CircType::parse(t).ok_or_else(|| Error::Config(format!("query `{}`: unknown type `{t}`", self.name))))
            .collect::<Result<Vec<_>>>()?;
        let q = AggregateQuery {
            level: self.level.clone(),
            region_set: self.name.clone(),
            regions,
            age_lo: self.age_lo,
            age_hi: self.age_hi,
            years,
            types,
            statistic: self.statistic,
        };
        q.validate(grid)?;
        Ok(q)
    }
}

impl AggregateQuery {
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("query `{}`: {m}", self.region_set)));
        if self.regions.is_empty() || self.years.is_empty() {
            return bad("empty region or year set".into());
        }
        if self.types.is_empty() && self.statistic != Statistic::UnmetNeed {
            return bad("no circumcision types".into());
        }
        if self.age_lo > self.age_hi || self.age_hi > grid.max_age() {
            return bad(format!("age group [{}, {}] is not on the grid", self.age_lo, self.age_hi));
        }
        if let Some(&i) = self.regions.iter().find(|&&i| i >= grid.n_regions()) {
            return bad(format!("region index {i} is not on the grid"));
        }
        if let Some(y) = self.years.iter().find(|&&y| y < grid.t_min() || y > grid.t_max()) {
            return bad(format!("year {y} is outside the reporting years"));
        }
        Ok(())
    }

    /// `(year, type)` keys in output order.
    fn keys(&self) -> Vec<(i32, Option<CircType>)> {
        let types: Vec<Option<CircType>> = if self.statistic == Statistic::UnmetNeed {
            vec![None]
        } else {
            self.types.iter().copied().map(Some).collect()
        };
        self.years.iter().flat_map(|&y| types.iter().map(move |&k| (y, k))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub level: String,
    pub region_set: String,
    pub age_lo: usize,
    pub age_hi: usize,
    pub year: i32,
    #[serde(rename = "type")]
    pub kind: String,
    pub statistic: String,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub lower95: f64,
    pub upper95: f64,
}

/// Type-7 (linear interpolation) empirical quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, median, sd (n − 1 denominator), 2.5% and 97.5% quantiles.
pub fn summarize(values: &[f64]) -> Result<[f64; 5]> {
    if values.is_empty() {
        return Err(Error::domain("no samples to summarize"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical { block: "aggregate".into(), message: "non-finite sampled value".into() });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok([mean, quantile_sorted(&sorted, 0.5), sd, quantile_sorted(&sorted, 0.025), quantile_sorted(&sorted, 0.975)])
}

/// Value of one `(year, type)` key of a query for a single draw.
fn draw_value(
    cov: &CoverageField,
    pop: &Population,
    grid: &Grid,
    q: &AggregateQuery,
    year: i32,
    kind: Option<CircType>,
) -> Result<f64> {
    let d = cov.dims;
    let t = grid.model_year_index(year).ok_or_else(|| Error::domain(format!("year {year} is off the grid")))?;
    let cells = q.regions.iter().flat_map(|&i| (q.age_lo..=q.age_hi).map(move |a| (i, a)));
    match q.statistic {
        Statistic::Coverage => {
            let cif = cov.cif(kind.expect("typed statistic"));
            let (mut num, mut den) = (0.0, 0.0);
            for (i, a) in cells {
                let p = pop.get(i, a, t);
                num += p * cif[d.idx(i, a, t)];
                den += p;
            }
            if den <= 0.0 {
                return Err(Error::domain(format!("query `{}` has zero population in {year}", q.region_set)));
            }
            Ok(num / den)
        }
        Statistic::IncidentCount => {
            let inc = cov.incidence(kind.expect("typed statistic"));
            Ok(cells.map(|(i, a)| pop.get(i, a, t) * inc[d.idx(i, a, t)]).sum())
        }
        Statistic::UnmetNeed => Ok(cells.map(|(i, a)| pop.get(i, a, t) * cov.survivor_end[d.idx(i, a, t)]).sum()),
        Statistic::MeanAgeAtEvent => {
            let inc = cov.incidence(kind.expect("typed statistic"));
            let (mut num, mut den) = (0.0, 0.0);
            for (i, a) in cells {
                let m = pop.get(i, a, t) * inc[d.idx(i, a, t)];
                num += a as f64 * m;
                den += m;
            }
            if den <= 0.0 {
                return Err(Error::domain(format!("query `{}` has no incident mass in {year}", q.region_set)));
            }
            Ok(num / den)
        }
    }
}

/// Per-draw values of every key of every query: `out[query][key][draw]`.
pub fn query_draws(fields: &[CoverageField], pop: &Population, grid: &Grid, queries: &[AggregateQuery]) -> Result<Vec<Vec<Vec<f64>>>> {
    for q in queries {
        q.validate(grid)?;
    }
    let per_draw: Vec<Vec<Vec<f64>>> = fields
        .par_iter()
        .map(|cov| evaluate_draw(cov, pop, grid, queries))
        .collect::<Result<_>>()?;
    Ok(transpose(per_draw, queries))
}

fn evaluate_draw(cov: &CoverageField, pop: &Population, grid: &Grid, queries: &[AggregateQuery]) -> Result<Vec<Vec<f64>>> {
    queries
        .iter()
        .map(|q| q.keys().into_iter().map(|(y, k)| draw_value(cov, pop, grid, q, y, k)).collect())
        .collect()
}

fn transpose(per_draw: Vec<Vec<Vec<f64>>>, queries: &[AggregateQuery]) -> Vec<Vec<Vec<f64>>> {
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| (0..q.keys().len()).map(|ki| per_draw.iter().map(|d| d[qi][ki]).collect()).collect())
        .collect()
}

fn rows_from_draws(queries: &[AggregateQuery], draws: &[Vec<Vec<f64>>]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for (q, per_key) in queries.iter().zip(draws) {
        for ((year, kind), vals) in q.keys().into_iter().zip(per_key) {
            let [mean, median, sd, lower95, upper95] = summarize(vals)?;
            rows.push(SummaryRow {
                level: q.level.clone(),
                region_set: q.region_set.clone(),
                age_lo: q.age_lo,
                age_hi: q.age_hi,
                year,
                kind: kind.map_or(UNCIRCUMCISED_LABEL, CircType::label).to_string(),
                statistic: q.statistic.label().to_string(),
                mean,
                median,
                sd,
                lower95,
                upper95,
            });
        }
    }
    Ok(rows)
}

/// Summary rows of a query over already-computed coverage fields, one per
/// draw.
pub fn aggregate(fields: &[CoverageField], pop: &Population, grid: &Grid, query: &AggregateQuery) -> Result<Vec<SummaryRow>> {
    let draws = query_draws(fields, pop, grid, std::slice::from_ref(query))?;
    rows_from_draws(std::slice::from_ref(query), &draws)
}

fn with_statistic(q: &AggregateQuery, s: Statistic) -> AggregateQuery {
    AggregateQuery { statistic: s, ..q.clone() }
}

/// Per draw `Σ P·CIF / Σ P` over the query cells.
pub fn aggregate_coverage(fields: &[CoverageField], pop: &Population, grid: &Grid, q: &AggregateQuery) -> Result<Vec<SummaryRow>> {
    aggregate(fields, pop, grid, &with_statistic(q, Statistic::Coverage))
}

/// Per draw `Σ P·I`.
pub fn incident_counts(fields: &[CoverageField], pop: &Population, grid: &Grid, q: &AggregateQuery) -> Result<Vec<SummaryRow>> {
    aggregate(fields, pop, grid, &with_statistic(q, Statistic::IncidentCount))
}

/// Per draw `Σ a·P·I / Σ P·I`.
pub fn mean_age_at_event(fields: &[CoverageField], pop: &Population, grid: &Grid, q: &AggregateQuery) -> Result<Vec<SummaryRow>> {
    aggregate(fields, pop, grid, &with_statistic(q, Statistic::MeanAgeAtEvent))
}

/// Per draw `Σ P·S` with the end-of-year survivor.
pub fn unmet_need(fields: &[CoverageField], pop: &Population, grid: &Grid, q: &AggregateQuery) -> Result<Vec<SummaryRow>> {
    aggregate(fields, pop, grid, &with_statistic(q, Statistic::UnmetNeed))
}

/// Per-draw values of all queries straight from parameter draws. Each
/// draw's coverage field is built, used and dropped, so memory stays flat
/// in the number of draws.
pub fn sample_query_draws(
    samples: &PosteriorSamples,
    structure: &ModelStructure,
    pop: &Population,
    queries: &[AggregateQuery],
) -> Result<Vec<Vec<Vec<f64>>>> {
    if samples.layout_hash != structure.layout.hash() {
        return Err(Error::structural("samples were drawn under a different parameter layout"));
    }
    for q in queries {
        q.validate(&structure.grid)?;
    }
    let per_draw: Vec<Vec<Vec<f64>>> = samples
        .draws
        .par_iter()
        .map(|p| {
            let h = compute_hazards(p, structure)?;
            let cov = compute_survivor_and_cif(&h);
            evaluate_draw(&cov, pop, &structure.grid, queries)
        })
        .collect::<Result<_>>()?;
    Ok(transpose(per_draw, queries))
}

pub fn summarize_samples(
    samples: &PosteriorSamples,
    structure: &ModelStructure,
    pop: &Population,
    queries: &[AggregateQuery],
) -> Result<Vec<SummaryRow>> {
    let draws = sample_query_draws(samples, structure, pop, queries)?;
    rows_from_draws(queries, &draws)
}

pub const SUMMARY_HEADER: [&str; 12] =
    ["level", "region_set", "age_lo", "age_hi", "year", "type", "statistic", "mean", "median", "sd", "lower95", "upper95"];

fn sort_key(r: &SummaryRow) -> (&str, &str, usize, usize, i32, &str, &str) {
    (&r.level, &r.region_set, r.age_lo, r.age_hi, r.year, &r.kind, &r.statistic)
}

/// Writes rows sorted by the key columns. With `svg_dir`, also writes one
/// chart per `(region set, age group, type, statistic)` of mean and 95%
/// interval against year.
pub fn write_outputs(rows: &[SummaryRow], csv_path: &Path, svg_dir: Option<&Path>) -> Result<()> {
    let mut sorted: Vec<&SummaryRow> = rows.iter().collect();
    sorted.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
    let file = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(SUMMARY_HEADER).map_err(|e| Error::csv(csv_path, e))?;
    for r in &sorted {
        w.serialize(r).map_err(|e| Error::csv(csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    if let Some(dir) = svg_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_charts(&sorted, dir)?;
    }
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    rdr.deserialize().map(|r| r.map_err(|e| Error::csv(path, e))).collect()
}

fn chart_name(r: &SummaryRow) -> String {
    let raw = format!("{}_{}_{}-{}_{}_{}", r.level, r.region_set, r.age_lo, r.age_hi, r.kind, r.statistic);
    raw.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn write_charts(sorted: &[&SummaryRow], dir: &Path) -> Result<()> {
    use plotters::prelude::*;
    let mut groups: Vec<(String, Vec<&SummaryRow>)> = Vec::new();
    for r in sorted {
        let name = chart_name(r);
        match groups.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => v.push(r),
            None => groups.push((name, vec![r])),
        }
    }
    let plot_err = |e: String| Error::io(dir, std::io::Error::other(e));
    for (name, mut pts) in groups {
        pts.sort_by_key(|r| r.year);
        let path = dir.join(format!("{name}.svg"));
        let (y0, y1) = (pts[0].year, pts[pts.len() - 1].year);
        let lo = pts.iter().map(|r| r.lower95).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|r| r.upper95).fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.05).max(1e-9);
        let mut svg = String::new();
        {
            let root = SVGBackend::with_string(&mut svg, (640, 400)).into_drawing_area();
            root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
            let mut chart = ChartBuilder::on(&root)
                .margin(20)
                .x_label_area_size(30)
                .y_label_area_size(60)
                .caption(&name, ("sans-serif", 16))
                .build_cartesian_2d(y0 as f64..(y1 as f64).max(y0 as f64 + 1.0), (lo - pad)..(hi + pad))
                .map_err(|e| plot_err(e.to_string()))?;
            chart.configure_mesh().draw().map_err(|e| plot_err(e.to_string()))?;
            let band: Vec<(f64, f64)> = pts
                .iter()
                .map(|r| (r.year as f64, r.upper95))
                .chain(pts.iter().rev().map(|r| (r.year as f64, r.lower95)))
                .collect();
            chart.draw_series(std::iter::once(Polygon::new(band, BLUE.mix(0.2)))).map_err(|e| plot_err(e.to_string()))?;
            chart
                .draw_series(LineSeries::new(pts.iter().map(|r| (r.year as f64, r.mean)), &BLUE))
                .map_err(|e| plot_err(e.to_string()))?;
            root.present().map_err(|e| plot_err(e.to_string()))?;
        }
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(svg.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
