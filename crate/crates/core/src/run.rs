//! Pipeline commands behind the `mc-coverage` binary: configuration, input
//! loading, and the validate / simulate / fit / aggregate stages.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::aggregate::{summarize_samples, write_outputs, AggregateQuery, QuerySpec, SummaryRow};
use crate::error::{Error, Result};
use crate::inference::{laplace_samples, optimize, FitResult, InferenceSettings, PosteriorSamples};
use crate::likelihood::{Hyperpriors, PosteriorSpec};
use crate::params::{BlockEntry, ParameterVector};
use crate::population::Population;
use crate::programme::{load_programme_counts, reallocate, write_programme_csv, ReallocationMatrix};
use crate::shares::MmctShareConfig;
use crate::simulate::{simulate_individuals, simulate_programme, SimDesign, SurveyDesign, TruthSpec};
use crate::structure::{check_header, AdjacencyGraph, Grid, ModelStructure, SplineSettings};
use crate::survey::{expand_to_cube, read_survey_csv, write_survey_csv};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// One-column CSV (`region`) listing region identifiers in grid order.
    pub regions: PathBuf,
    pub adjacency: PathBuf,
    pub survey: PathBuf,
    pub population: PathBuf,
    #[serde(default)]
    pub programme: Option<PathBuf>,
    #[serde(default)]
    pub reallocation: Option<PathBuf>,
    /// JSON list of share rules; overrides the inline `shares` when given.
    #[serde(default)]
    pub shares: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub max_age: usize,
    pub t_min: i32,
    pub t_max: i32,
    pub paediatric_cutoff: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub seed: u64,
    pub surveys: Vec<SurveyDesign>,
    #[serde(default = "default_weight_sd")]
    pub weight_sd: f64,
    #[serde(default)]
    pub left_censored_fraction: f64,
    #[serde(default)]
    pub programme_bands: Vec<(usize, usize)>,
    #[serde(default)]
    pub programme_years: Vec<i32>,
    /// Population per (region, age, year) cell.
    pub population: f64,
    pub truth: TruthSpec,
}

fn default_weight_sd() -> f64 {
    0.3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub paths: PathsConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub splines: SplineSettings,
    #[serde(default)]
    pub shares: MmctShareConfig,
    #[serde(default)]
    pub inference: InferenceSettings,
    #[serde(default)]
    pub hyperpriors: Hyperpriors,
    #[serde(default)]
    pub queries: Vec<QuerySpec>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    /// Write one SVG chart per summary group next to `summary.csv`.
    #[serde(default)]
    pub charts: bool,
}

impl RunConfig {
    /// Parses a config and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.check()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        fix(&mut p.regions);
        fix(&mut p.adjacency);
        fix(&mut p.survey);
        fix(&mut p.population);
        for o in [&mut p.programme, &mut p.reallocation, &mut p.shares].into_iter().flatten() {
            fix(o);
        }
        fix(&mut self.output_dir);
    }

    fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let g = &self.grid;
        if g.t_min > g.t_max || g.paediatric_cutoff == 0 || g.paediatric_cutoff > g.max_age {
            return Err(Error::Config("inconsistent grid bounds".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.inference.validate()
    }

    /// Every input file that must exist before fitting, with its role.
    fn input_files(&self) -> Vec<(&'static str, &Path)> {
        let p = &self.paths;
        let mut v = vec![
            ("regions", p.regions.as_path()),
            ("adjacency", p.adjacency.as_path()),
            ("survey", p.survey.as_path()),
            ("population", p.population.as_path()),
        ];
        for (name, o) in [("programme", &p.programme), ("reallocation", &p.reallocation), ("shares", &p.shares)] {
            if let Some(path) = o {
                v.push((name, path.as_path()));
            }
        }
        v
    }

    pub fn check_files_exist(&self) -> Result<()> {
        let missing: Vec<String> = self
            .input_files()
            .into_iter()
            .filter(|(_, p)| !p.is_file())
            .map(|(name, p)| format!("{name} file `{}` does not exist", p.display()))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(missing.join("; ")))
        }
    }
}

pub fn read_regions(path: &Path) -> Result<Vec<String>> {
    #[derive(Deserialize)]
    struct Row {
        region: String,
    }
    let source = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    check_header(&mut rdr, &["region"], &source)?;
    rdr.deserialize::<Row>()
        .map(|r| r.map(|r| r.region).map_err(|e| Error::csv(path, e)))
        .collect()
}

fn load_shares(cfg: &RunConfig) -> Result<MmctShareConfig> {
    match &cfg.paths.shares {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(cfg.shares.clone()),
    }
}

pub fn build_structure(cfg: &RunConfig) -> Result<ModelStructure> {
    let g = cfg.grid;
    let grid = Grid::new(read_regions(&cfg.paths.regions)?, g.max_age, g.t_min, g.t_max, g.paediatric_cutoff)?;
    let graph = AdjacencyGraph::from_csv(&cfg.paths.adjacency, &grid)?;
    ModelStructure::new(grid, graph, cfg.splines, &load_shares(cfg)?)
}

/// Reads and cross-checks all inputs into a ready posterior.
pub fn load_inputs(cfg: &RunConfig) -> Result<PosteriorSpec> {
    cfg.check_files_exist()?;
    let structure = build_structure(cfg)?;
    let grid = &structure.grid;
    let records = read_survey_csv(&cfg.paths.survey)?;
    let cube = expand_to_cube(&records, grid).map_err(|e| match e {
        Error::Validation { issues, .. } => Error::Validation { source_name: cfg.paths.survey.display().to_string(), issues },
        e => e,
    })?;
    let population = Population::from_csv(&cfg.paths.population, grid)?;
    let mut programme = match &cfg.paths.programme {
        Some(p) => load_programme_counts(p, grid)?,
        None => Vec::new(),
    };
    if let Some(p) = &cfg.paths.reallocation {
        programme = reallocate(&programme, &ReallocationMatrix::from_csv(p, grid)?);
    }
    let mut spec = PosteriorSpec::new(Arc::new(structure), cube, programme, population)?;
    spec.hyper = cfg.hyperpriors;
    Ok(spec)
}

pub fn resolve_queries(cfg: &RunConfig, grid: &Grid) -> Result<Vec<AggregateQuery>> {
    cfg.queries.iter().map(|q| q.resolve(grid)).collect()
}

pub fn init_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        // a pool may already exist when called twice in one process
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already initialised: {e}");
        }
    }
    Ok(())
}

/// Machine-readable failure listing.
pub fn error_report(e: &Error) -> serde_json::Value {
    let issues: Vec<serde_json::Value> = match e {
        Error::Validation { source_name, issues } => issues
            .iter()
            .map(|i| json!({"source": source_name, "row": i.row, "message": i.message}))
            .collect(),
        _ => Vec::new(),
    };
    json!({"status": "error", "kind": e.kind(), "message": e.to_string(), "issues": issues})
}

pub fn cmd_validate(cfg: &RunConfig) -> Result<serde_json::Value> {
    let spec = load_inputs(cfg)?;
    let queries = resolve_queries(cfg, &spec.structure.grid)?;
    let grid = &spec.structure.grid;
    Ok(json!({
        "status": "ok",
        "regions": grid.n_regions(),
        "ages": grid.n_ages(),
        "model_years": grid.n_model_years(),
        "parameters": spec.layout().len(),
        "survey_weight_total": spec.cube.total(),
        "dropped_survey_records": spec.cube.dropped_records,
        "programme_rows": spec.programme.len(),
        "queries": queries.len(),
    }))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

/// Writes survey, programme and population files to the configured input
/// paths, plus `truth.json` in the output directory.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let sim = cfg.simulation.as_ref().ok_or_else(|| Error::Config("no `simulation` section".into()))?;
    let structure = build_structure(cfg)?;
    let truth = sim.truth.parameters(&structure)?;
    let population = Population::constant(&structure.grid, sim.population);
    let mut design = SimDesign::from_parameters(&structure, &truth, population, sim.surveys.clone(), sim.seed)?;
    design.weight_sd = sim.weight_sd;
    design.left_censored_fraction = sim.left_censored_fraction;
    design.programme_bands = sim.programme_bands.clone();
    design.programme_years = sim.programme_years.clone();
    let records = simulate_individuals(&design)?;
    let grid = &structure.grid;
    parent_dir(&cfg.paths.survey)?;
    write_survey_csv(&cfg.paths.survey, &records)?;
    parent_dir(&cfg.paths.population)?;
    design.population.write_csv(&cfg.paths.population, grid)?;
    if let Some(p) = &cfg.paths.programme {
        parent_dir(p)?;
        write_programme_csv(p, &simulate_programme(&design)?, grid)?;
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_json(
        &cfg.output_dir.join("truth.json"),
        &json!({"layout_hash": structure.layout.hash(), "values": truth.values}),
    )?;
    Ok(())
}

/// Description of `samples.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesSidecar {
    pub n_draws: usize,
    pub n_params: usize,
    pub layout_hash: String,
    pub blocks: Vec<BlockEntry>,
    pub seed: u64,
    /// Little-endian f64, one row per draw.
    pub format: String,
}

const SAMPLE_FORMAT: &str = "f64le-row-major";

pub fn write_samples(dir: &Path, samples: &PosteriorSamples, blocks: &[BlockEntry], seed: u64) -> Result<()> {
    let n_params = blocks.iter().map(|b| b.offset + b.len).max().unwrap_or(0);
    let bin = dir.join("samples.bin");
    let mut buf = Vec::with_capacity(samples.draws.len() * n_params * 8);
    for d in &samples.draws {
        if d.values.len() != n_params {
            return Err(Error::structural("sample length does not match the layout"));
        }
        for v in &d.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&bin, e))?;
    let sidecar = SamplesSidecar {
        n_draws: samples.draws.len(),
        n_params,
        layout_hash: samples.layout_hash.clone(),
        blocks: blocks.to_vec(),
        seed,
        format: SAMPLE_FORMAT.into(),
    };
    write_json(&dir.join("samples.json"), &sidecar)
}

/// Reads `samples.bin` using the sidecar next to it.
pub fn read_samples(bin: &Path) -> Result<PosteriorSamples> {
    let side_path = bin.with_extension("json");
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: SamplesSidecar = serde_json::from_str(&text)?;
    if side.format != SAMPLE_FORMAT {
        return Err(Error::Config(format!("unknown sample format `{}`", side.format)));
    }
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    if bytes.len() != side.n_draws * side.n_params * 8 {
        return Err(Error::structural(format!(
            "{} holds {} bytes, sidecar promises {} draws of {} parameters",
            bin.display(),
            bytes.len(),
            side.n_draws,
            side.n_params
        )));
    }
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let draws = vals.chunks(side.n_params.max(1)).take(side.n_draws).map(|c| ParameterVector { values: c.to_vec() }).collect();
    Ok(PosteriorSamples { layout_hash: side.layout_hash, draws })
}

fn write_convergence(path: &Path, fit: &FitResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for entry in &fit.log {
        w.serialize(entry).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
pub struct FitOutput {
    pub fit: FitResult,
    pub samples: PosteriorSamples,
    pub rows: Vec<SummaryRow>,
}

fn summarize_to(cfg: &RunConfig, spec_structure: &ModelStructure, pop: &Population, samples: &PosteriorSamples) -> Result<Vec<SummaryRow>> {
    let queries = resolve_queries(cfg, &spec_structure.grid)?;
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let rows = summarize_samples(samples, spec_structure, pop, &queries)?;
    let svg = cfg.charts.then(|| cfg.output_dir.join("charts"));
    write_outputs(&rows, &cfg.output_dir.join("summary.csv"), svg.as_deref())?;
    Ok(rows)
}

/// Fits the model and writes `mode.json`, `samples.bin` + `samples.json`,
/// `convergence.csv` and, when queries are configured, `summary.csv`.
pub fn cmd_fit(cfg: &RunConfig) -> Result<FitOutput> {
    let spec = load_inputs(cfg)?;
    let fit = optimize(&spec, &cfg.inference)?;
    if !fit.status.converged() {
        log::warn!("optimizer stopped without converging: {:?}", fit.status);
    }
    let layout = spec.layout();
    let samples = laplace_samples(&fit, layout, cfg.inference.n_samples, cfg.inference.seed)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        &dir.join("mode.json"),
        &json!({
            "layout_hash": layout.hash(),
            "objective": fit.objective,
            "gradient_max": fit.gradient_max,
            "iterations": fit.iterations,
            "status": format!("{:?}", fit.status),
            "blocks": layout.entries(),
            "values": fit.mode.values,
        }),
    )?;
    write_samples(dir, &samples, layout.entries(), cfg.inference.seed)?;
    write_convergence(&dir.join("convergence.csv"), &fit)?;
    let rows = summarize_to(cfg, &spec.structure, &spec.population, &samples)?;
    Ok(FitOutput { fit, samples, rows })
}

/// Summaries from previously written samples.
pub fn cmd_aggregate(cfg: &RunConfig, samples_path: &Path) -> Result<Vec<SummaryRow>> {
    cfg.check_files_exist()?;
    let structure = build_structure(cfg)?;
    let population = Population::from_csv(&cfg.paths.population, &structure.grid)?;
    let samples = read_samples(samples_path)?;
    if samples.layout_hash != structure.layout.hash() {
        return Err(Error::structural(format!(
            "{} was written for a different parameter layout",
            samples_path.display()
        )));
    }
    if cfg.queries.is_empty() {
        return Err(Error::Config("no queries configured".into()));
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    summarize_to(cfg, &structure, &population, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_and_versions_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let base = json!({
            "schema_version": 1,
            "paths": {"regions": "r.csv", "adjacency": "a.csv", "survey": "s.csv", "population": "p.csv"},
            "grid": {"max_age": 10, "t_min": 2000, "t_max": 2003, "paediatric_cutoff": 4},
            "output_dir": "out"
        });
        fs::write(&p, base.to_string()).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.paths.survey, dir.path().join("s.csv"));
        let err = cfg.check_files_exist().unwrap_err().to_string();
        for name in ["r.csv", "a.csv", "s.csv", "p.csv"] {
            assert!(err.contains(name), "{err}");
        }

        let mut extra = base.clone();
        extra["bogus"] = json!(1);
        fs::write(&p, extra.to_string()).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));

        let mut v2 = base;
        v2["schema_version"] = json!(2);
        fs::write(&p, v2.to_string()).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
    }

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let blocks = vec![BlockEntry { block: crate::params::Block::AlphaTmic, offset: 0, len: 3 }];
        let s = PosteriorSamples {
            layout_hash: "h".into(),
            draws: vec![ParameterVector { values: vec![1.0, -2.5, 1e-300] }, ParameterVector { values: vec![0.0, f64::MAX, 3.0] }],
        };
        write_samples(dir.path(), &s, &blocks, 7).unwrap();
        let back = read_samples(&dir.path().join("samples.bin")).unwrap();
        assert_eq!(back.draws, s.draws);
        assert_eq!(back.layout_hash, "h");
    }
}
