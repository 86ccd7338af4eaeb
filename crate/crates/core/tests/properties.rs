//! Property tests for structural invariants across the pipeline.

use mc_coverage::aggregate::{query_draws, summarize, AggregateQuery, Statistic};
use mc_coverage::hazard::{compute_survivor_and_cif, CircType, CoverageField, HazardField};
use mc_coverage::population::Population;
use mc_coverage::programme::{reallocate, ProgrammeCount, ReallocationMatrix, ReallocationRule};
use mc_coverage::structure::{build_icar_precision, build_spline_basis, AdjacencyGraph, Grid, LexisDims};
use mc_coverage::survey::{expand_to_cube, normalize_weights, Outcome, SurveyRecord};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_hazards(dims: LexisDims, rng: &mut ChaCha8Rng) -> HazardField {
    let n = dims.len();
    let tmic = (0..n).map(|_| rng.random_range(0.0..0.3)).collect();
    let tilde = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
    let share = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    HazardField::from_components(dims, tmic, tilde, share).unwrap()
}

fn small_grid() -> Grid {
    Grid::new(vec!["a".into(), "b".into(), "c".into()], 6, 2000, 2002, 3).unwrap()
}

fn random_records(grid: &Grid, n: usize, rng: &mut ChaCha8Rng) -> Vec<SurveyRecord> {
    let max_age = grid.max_age() as i32;
    (0..n)
        .map(|k| {
            let year = rng.random_range(grid.t_min()..=grid.t_max());
            let age = rng.random_range(0..=max_age);
            let outcome = Outcome::ALL[rng.random_range(0..4)];
            let event_age = if outcome.is_event() { rng.random_range(0..=age) } else { age };
            SurveyRecord {
                survey_id: format!("s{}", k % 2),
                region: grid.regions()[rng.random_range(0..grid.n_regions())].clone(),
                birth_year: year - age,
                outcome,
                event_age: event_age as i64,
                weight: rng.random_range(0.2..3.0),
            }
        })
        .collect()
}

fn query(regions: Vec<usize>, name: &str, grid: &Grid, statistic: Statistic) -> AggregateQuery {
    AggregateQuery {
        level: "test".into(),
        region_set: name.into(),
        regions,
        age_lo: 1,
        age_hi: grid.max_age() - 1,
        years: grid.reporting_years().collect(),
        types: CircType::ALL.to_vec(),
        statistic,
    }
}

fn coverage_fields(grid: &Grid, draws: usize, rng: &mut ChaCha8Rng) -> Vec<CoverageField> {
    (0..draws).map(|_| compute_survivor_and_cif(&random_hazards(grid.dims(), rng))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn icar_quadratic_form_is_nonnegative(
        n in 2usize..9,
        edges in prop::collection::vec((0usize..9, 0usize..9), 0..20),
        seed in any::<u64>(),
    ) {
        let pairs: Vec<(usize, usize)> = edges.into_iter().map(|(a, b)| (a % n, b % n)).filter(|(a, b)| a != b).collect();
        let g = AdjacencyGraph::new(n, pairs).unwrap();
        let q = build_icar_precision(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        prop_assert!(q.quadratic_form(&x) >= -1e-10);
        // constant shifts within a component are free
        for comp in g.components().into_iter().filter(|c| c.len() > 1) {
            let mut y = x.clone();
            for &i in &comp {
                y[i] += 2.5;
            }
            prop_assert!((q.quadratic_form(&y) - q.quadratic_form(&x)).abs() < 1e-9);
        }
    }

    #[test]
    fn spline_rows_partition_unity(lo in 0usize..10, span in 8usize..50, spacing in 1.0f64..6.0, degree in 1usize..4) {
        prop_assume!(span as f64 >= spacing);
        let b = build_spline_basis(lo..=lo + span, spacing, degree).unwrap();
        for a in lo..=lo + span {
            let s: f64 = b.row(a).sum();
            prop_assert!((s - 1.0).abs() < 1e-10, "age {a}: {s}");
        }
    }

    #[test]
    fn hazard_identities_hold(seed in any::<u64>(), ni in 1usize..4, na in 1usize..8, nt in 1usize..6) {
        let dims = LexisDims { n_regions: ni, n_ages: na, n_years: nt };
        let h = random_hazards(dims, &mut ChaCha8Rng::seed_from_u64(seed));
        for c in 0..dims.len() {
            prop_assert!((h.tmic[c] + h.mmcnt[c] + h.uc[c] - 1.0).abs() < 1e-12);
            prop_assert!((h.mmct[c] + h.tmc[c] - h.tmic[c]).abs() < 1e-12);
            prop_assert!((h.uc[c] - (1.0 - h.tmic[c]) * (1.0 - h.mmcnt_tilde[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn cif_is_monotone_and_conserves_mass(seed in any::<u64>(), ni in 1usize..3, na in 2usize..10, nt in 2usize..8) {
        let dims = LexisDims { n_regions: ni, n_ages: na, n_years: nt };
        let cov = compute_survivor_and_cif(&random_hazards(dims, &mut ChaCha8Rng::seed_from_u64(seed)));
        let elementary = [CircType::MmcNt, CircType::MmcT, CircType::Tmc];
        for i in 0..ni {
            for a in 0..na {
                for t in 0..nt {
                    let c = dims.idx(i, a, t);
                    let total: f64 = elementary.iter().map(|&k| cov.cif(k)[c]).sum();
                    prop_assert!((cov.survivor_end[c] + total - 1.0).abs() < 1e-10);
                    for k in CircType::ALL {
                        prop_assert!((0.0..=1.0).contains(&cov.cif(k)[c]));
                        if a > 0 && t > 0 {
                            prop_assert!(cov.cif(k)[c] >= cov.cif(k)[dims.idx(i, a - 1, t - 1)] - 1e-15);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn cube_mass_matches_normalized_weights(seed in any::<u64>(), n in 1usize..80) {
        let grid = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = random_records(&grid, n, &mut rng);
        let cube = expand_to_cube(&records, &grid).unwrap();
        let w: f64 = normalize_weights(&records).unwrap().iter().sum();
        prop_assert_eq!(cube.dropped_records, 0);
        prop_assert!((cube.total() - w).abs() < 1e-8);
    }

    #[test]
    fn cube_ignores_record_order_and_weight_scale(seed in any::<u64>(), n in 1usize..60, scale in 0.01f64..100.0) {
        let grid = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = random_records(&grid, n, &mut rng);
        let cube = expand_to_cube(&records, &grid).unwrap();
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(&expand_to_cube(&shuffled, &grid).unwrap(), &cube);
        let scaled: Vec<SurveyRecord> = records.iter().map(|r| SurveyRecord { weight: r.weight * scale, ..r.clone() }).collect();
        let a = normalize_weights(&records).unwrap();
        let b = normalize_weights(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn reallocation_conserves_counts(seed in any::<u64>(), n_dest in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..n_dest).map(|_| rng.random_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let shares = raw.iter().enumerate().map(|(k, v)| (k + 1, v / sum)).collect();
        let m = ReallocationMatrix::new(vec![ReallocationRule { source: 0, year_from: 2000, year_to: 2001, shares }]).unwrap();
        let counts: Vec<ProgrammeCount> = (0..6)
            .map(|k| ProgrammeCount { region: k % 3, year: 2000 + (k as i32 % 3), age_lo: 0, age_hi: 4, count: rng.random_range(0.0..500.0) })
            .collect();
        let out = reallocate(&counts, &m);
        let before: f64 = counts.iter().map(|c| c.count).sum();
        let after: f64 = out.iter().map(|c| c.count).sum();
        prop_assert!((before - after).abs() < 1e-9 * before.max(1.0));
        prop_assert!(out.iter().all(|c| c.count >= 0.0));
    }

    #[test]
    fn incident_counts_add_over_disjoint_regions(seed in any::<u64>()) {
        let grid = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fields = coverage_fields(&grid, 3, &mut rng);
        let mut pop = Population::zeros(&grid);
        let d = grid.dims();
        for (i, a, t) in (0..d.n_regions).flat_map(|i| (0..d.n_ages).flat_map(move |a| (0..d.n_years).map(move |t| (i, a, t)))) {
            pop.set(i, a, t, rng.random_range(10.0..1000.0));
        }
        let qs = [
            query(vec![0], "a", &grid, Statistic::IncidentCount),
            query(vec![1, 2], "bc", &grid, Statistic::IncidentCount),
            query(vec![0, 1, 2], "abc", &grid, Statistic::IncidentCount),
        ];
        let d = query_draws(&fields, &pop, &grid, &qs).unwrap();
        for key in 0..d[0].len() {
            for draw in 0..fields.len() {
                let (x, y, z) = (d[0][key][draw], d[1][key][draw], d[2][key][draw]);
                prop_assert!((x + y - z).abs() <= 1e-9 * z.abs().max(1.0));
            }
        }
    }

    #[test]
    fn coverage_types_are_additive(seed in any::<u64>()) {
        let grid = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fields = coverage_fields(&grid, 2, &mut rng);
        let mut pop = Population::zeros(&grid);
        let d = grid.dims();
        for (i, a, t) in (0..d.n_regions).flat_map(|i| (0..d.n_ages).flat_map(move |a| (0..d.n_years).map(move |t| (i, a, t)))) {
            pop.set(i, a, t, rng.random_range(10.0..1000.0));
        }
        let q = query(vec![0, 2], "ac", &grid, Statistic::Coverage);
        let d = &query_draws(&fields, &pop, &grid, std::slice::from_ref(&q)).unwrap()[0];
        let n_types = CircType::ALL.len();
        let pos = |k: CircType| CircType::ALL.iter().position(|&t| t == k).unwrap();
        for year in 0..q.years.len() {
            let v = |k: CircType, draw: usize| d[year * n_types + pos(k)][draw];
            for draw in 0..fields.len() {
                prop_assert!((v(CircType::MmcNt, draw) + v(CircType::MmcT, draw) - v(CircType::Mmc, draw)).abs() < 1e-12);
                prop_assert!((v(CircType::MmcT, draw) + v(CircType::Tmc, draw) - v(CircType::Tmic, draw)).abs() < 1e-12);
                prop_assert!((v(CircType::Mmc, draw) + v(CircType::Tmc, draw) - v(CircType::Mc, draw)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn summary_quantiles_are_ordered(values in prop::collection::vec(-1e6f64..1e6, 1..200)) {
        let [mean, median, sd, lo, hi] = summarize(&values).unwrap();
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= lo && lo <= median && median <= hi && hi <= max);
        prop_assert!(min - 1e-6 <= mean && mean <= max + 1e-6);
        prop_assert!(sd >= 0.0);
    }
}
