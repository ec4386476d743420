use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use vaelab::diagnostics::{self, count_nonzero_decoder_rows, count_zero_encoder_vars, singular_tail, spectrum_error};
use vaelab::experiment::csv::{matrix_to_csv, Table};
use vaelab::experiment::runner::{aggregate, SeedReport};
use vaelab::experiment::ExperimentConfig;
use vaelab::datasets::DatasetKind;
use vaelab::dynamics::RunStatus;
use vaelab::linear_vae::{self, LinearVaeParams};
use vaelab::{linalg, rng};

fn instance(seed: u64, d: usize, r: usize, rs: usize) -> (DMatrix<f64>, LinearVaeParams) {
    let mut g = rng::seeded(seed);
    let a = rng::normal_matrix(&mut g, d, rs);
    let p = LinearVaeParams::new(
        rng::normal_matrix(&mut g, d, r) * 0.8,
        rng::normal_matrix(&mut g, r, d) * 0.8,
        rng::normal_vector(&mut g, r).map(|v| (0.7 * v).exp()),
        (0.5 * rng::normal(&mut g)).exp(),
    )
    .unwrap();
    (a, p)
}

fn dims() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..7, 1usize..6).prop_flat_map(|(s, d, r)| (Just(s), Just(d), Just(r), 1..=d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_leaves_losses_unchanged((s, d, r, rs) in dims()) {
        let (a, p) = instance(s, d, r, rs);
        let res = diagnostics::rotation_invariance_check(&a, &p, s ^ 0x55).unwrap();
        let scale = linear_vae::loss_l(&a, &p).unwrap().abs().max(1.0);
        prop_assert!(res.loss_l < 1e-10 * scale);
        prop_assert!(res.loss_l1 < 1e-10 * scale);
        prop_assert!(res.gd_step < 1e-9);
    }

    #[test]
    fn optimal_d_dominates((s, d, r, rs) in dims()) {
        let (a, p) = instance(s, d, r, rs);
        let star = LinearVaeParams { d_tilde: linear_vae::optimal_d(&p.a_tilde, p.eps).unwrap(), ..p.clone() };
        let l = linear_vae::loss_l(&a, &p).unwrap();
        let ls = linear_vae::loss_l(&a, &star).unwrap();
        let l1 = linear_vae::loss_l1(&a, &p.a_tilde, &p.b_tilde, p.eps).unwrap();
        prop_assert!(ls <= l + 1e-12 * l.abs().max(1.0));
        prop_assert!((ls - l1).abs() <= 1e-10 * l1.abs().max(1.0));
    }

    #[test]
    fn zero_row_correlation_inequality((s, d, r, rs) in dims(), row in 0usize..7) {
        let (mut a, p) = instance(s, d, r, rs);
        let row = row % d;
        a.row_mut(row).fill(0.0);
        let c = diagnostics::gradient_correlation_check(&a, &p, row).unwrap();
        prop_assert!(c.slack() >= -1e-10);
    }

    #[test]
    fn tail_below_complement_projection(seed in any::<u64>(), d in 2usize..8, r in 1usize..7, k in 0usize..7) {
        let mut g = rng::seeded(seed);
        let k = k % d;
        let w = rng::normal_matrix(&mut g, d, k.max(1)).columns(0, k).into_owned();
        let at = rng::normal_matrix(&mut g, d, r);
        let p = if k == 0 { DMatrix::identity(d, d) } else { linalg::complement_projector(&w) };
        let tail = singular_tail(&at, k.min(r)).unwrap();
        prop_assert!(tail <= (&p * &at).norm_squared() * (1.0 + 1e-10) + 1e-12);
    }

    #[test]
    fn spectrum_error_is_permutation_stable(v in proptest::collection::vec(0.0f64..10.0, 1..8), seed in any::<u64>()) {
        let mut h: Vec<f64> = v.iter().map(|x| x * 1.3 + 0.1).collect();
        let e = spectrum_error(&v, &h);
        let u = linalg::haar_orthogonal(2, seed);
        if u[(0, 0)] > 0.0 { h.reverse(); } else { h.rotate_left(1); }
        prop_assert_eq!(e, spectrum_error(&v, &h));
    }

    #[test]
    fn counters_are_monotone_in_threshold(v in proptest::collection::vec(0.0f64..2.0, 1..10), t in 0.01f64..1.0) {
        let lo = count_zero_encoder_vars(&v, t).unwrap();
        let hi = count_zero_encoder_vars(&v, t * 2.0).unwrap();
        prop_assert!(lo <= hi);
        let m = DMatrix::from_fn(v.len(), 2, |i, j| v[i] * (j + 1) as f64);
        let rows_lo = count_nonzero_decoder_rows(&m, t.min(0.99)).unwrap();
        let rows_hi = count_nonzero_decoder_rows(&m, (t * 0.5).min(0.99)).unwrap();
        prop_assert!(rows_lo <= rows_hi);
    }

    #[test]
    fn aggregate_means_are_arithmetic(vals in proptest::collection::vec(-1e3f64..1e3, 1..6)) {
        let per: Vec<SeedReport> = vals.iter().enumerate().map(|(i, &v)| SeedReport {
            seed: i as u64,
            status: RunStatus::Completed,
            steps_completed: 1,
            metrics: [("loss".to_string(), Some(v))].into_iter().collect(),
            d_tilde: vec![],
            trajectory: String::new(),
            wall_clock_s: 0.0,
        }).collect();
        let m = aggregate(&per)["loss"].unwrap();
        let expect = vals.iter().sum::<f64>() / vals.len() as f64;
        prop_assert!((m - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn sample_csv_roundtrips(rows in 1usize..6, cols in 1usize..5, seed in any::<u64>()) {
        let m = rng::normal_matrix(&mut rng::seeded(seed), rows, cols) * 1e3;
        let t = Table::parse(&matrix_to_csv(&m)).unwrap();
        prop_assert_eq!(t.matrix("x").unwrap(), m);
    }

    #[test]
    fn config_toml_roundtrips(rs in 1usize..5, extra in 2usize..6, r in 1usize..8, step in 1e-5f64..1e-1, seeds in proptest::collection::vec(0..=i64::MAX as u64, 1..4)) {
        let mut c = ExperimentConfig::preset(DatasetKind::Sphere, rs, rs + extra, r);
        c.step_size = step;
        c.seeds = seeds;
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }
}

#[test]
fn optimal_d_matches_formula() {
    let (_, p) = instance(3, 4, 3, 2);
    let d = linear_vae::optimal_d(&p.a_tilde, p.eps).unwrap();
    let c = linalg::column_sq_norms(&p.a_tilde);
    let e2 = p.eps * p.eps;
    let expect = DVector::from_iterator(3, c.iter().map(|ci| e2 / (ci + e2)));
    assert!((d - expect).amax() < 1e-15);
}
