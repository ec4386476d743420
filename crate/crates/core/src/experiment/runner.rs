//! One training run per seed, final metrics, and the on-disk run layout:
//!
//! ```text
//! <run dir>/manifest.json
//! <run dir>/report.json
//! <run dir>/seed_<s>/trajectory.csv
//! <run dir>/seed_<s>/generated.csv      preview of generated samples
//! <run dir>/seed_<s>/ground_truth.json
//! <run dir>/seed_<s>/decay.csv          gradient-flow runs only
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelKind};
use crate::datasets::{GroundTruth, LinearGroundTruth};
use crate::diagnostics::{self, DecayBoundReport};
use crate::dynamics::{self, LinearObjective, Mode, NonlinearObjective, RunStatus, Trajectory};
use crate::error::{Error, Result};
use crate::linear_vae::{self, LinearVaeParams};
use crate::nonlinear_vae::{MlpNet, Network, SigmoidNet, Vae};
use crate::rng;

/// Generated rows kept on disk for plotting.
pub const PREVIEW_ROWS: usize = 2_000;

/// Slack on the decay bound for RK4 runs.
pub const DECAY_TOL: f64 = 0.05;

// Salts separating the random streams of one seed.
const SALT_DATA: u64 = 1;
const SALT_INIT: u64 = 2;
const SALT_GENERATE: u64 = 3;
const SALT_TRAIN: u64 = 4;
const SALT_TRAIN_SET: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    #[serde(flatten)]
    pub status: RunStatus,
    pub steps_completed: usize,
    /// `None` where the final state does not define the metric.
    pub metrics: BTreeMap<String, Option<f64>>,
    pub d_tilde: Vec<f64>,
    pub trajectory: String,
    pub wall_clock_s: f64,
}

impl SeedReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub per_seed: Vec<SeedReport>,
    /// Arithmetic mean over seeds; `None` if any seed lacks the metric.
    pub means: BTreeMap<String, Option<f64>>,
    pub wall_clock_s: f64,
}

impl ExperimentReport {
    pub fn mean(&self, name: &str) -> Option<f64> {
        self.means.get(name).copied().flatten()
    }

    pub fn all_completed(&self) -> bool {
        self.per_seed.iter().all(|s| s.status.is_completed())
    }

    pub fn any_non_finite(&self) -> bool {
        self.per_seed.iter().any(|s| matches!(s.status, RunStatus::NonFinite { .. }))
    }
}

/// Everything a seed produced, including what only goes to disk.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub report: SeedReport,
    pub trajectory: Trajectory,
    pub ground_truth: GroundTruth,
    pub preview: DMatrix<f64>,
    pub decay: Option<DecayBoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub run_id: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let hash = cfg.hash();
        Self {
            tool: "vaelab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            run_id: run_id(cfg),
            config_hash: hash,
            seeds: cfg.seeds.clone(),
            config: cfg.clone(),
        }
    }
}

/// `<dataset>-rs<r*>-d<d>-r<r>-<first 12 hex of the config hash>`.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!("{}-rs{}-d{}-r{}-{}", cfg.dataset.as_str(), cfg.r_star, cfg.d, cfg.r, &cfg.hash()[..12])
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn seed_dir(seed: u64) -> String {
    format!("seed_{seed}")
}

/// Train one seed and compute its metrics.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let gt = GroundTruth::build(cfg.dataset, cfg.r_star, cfg.d, rng::derive_seed(seed, SALT_DATA))?;
    let mut out = match (&gt, cfg.model) {
        (GroundTruth::Linear(lin), ModelKind::Linear) => run_linear(cfg, seed, lin)?,
        (_, ModelKind::Sigmoid) => {
            let mut net = SigmoidNet::init(cfg.d, cfg.r, rng::derive_seed(seed, SALT_INIT));
            net.learn_bias = cfg.learn_bias;
            run_nonlinear(cfg, seed, &gt, net)?
        }
        (_, ModelKind::Mlp) => {
            let net = MlpNet::init(cfg.d, cfg.r, cfg.hidden, cfg.activation, rng::derive_seed(seed, SALT_INIT));
            run_nonlinear(cfg, seed, &gt, net)?
        }
        _ => return Err(Error::Config("model does not fit the dataset".into())),
    };
    out.report.metrics.retain(|k, _| cfg.metrics.iter().any(|m| m == k));
    out.report.wall_clock_s = start.elapsed().as_secs_f64();
    out.ground_truth = gt;
    Ok(out)
}

/// Random start: Gaussian weights scaled by `1/√fan_in`, unit encoder
/// variances, decoder std `eps_init`.
pub fn linear_init(d: usize, r: usize, eps: f64, seed: u64) -> LinearVaeParams {
    let mut g = rng::seeded(seed);
    let a_tilde = rng::normal_matrix(&mut g, d, r) / (r as f64).sqrt();
    let b_tilde = rng::normal_matrix(&mut g, r, d) / (d as f64).sqrt();
    LinearVaeParams {
        a_tilde,
        b_tilde,
        d_tilde: DVector::from_element(r, 1.0),
        eps,
    }
}

fn run_linear(cfg: &ExperimentConfig, seed: u64, gt: &LinearGroundTruth) -> Result<SeedOutcome> {
    // The flow is integrated in the raw parameters; discrete steps act on
    // log-variances.
    let log = cfg.mode != Mode::GradientFlow;
    let mut obj = LinearObjective::new(gt.a.clone(), cfg.r, cfg.loss_kind, log)?;
    let p0 = linear_init(cfg.d, cfg.r, cfg.eps_init, rng::derive_seed(seed, SALT_INIT));
    let theta0 = obj.pack(&p0)?;
    let traj = dynamics::run(&mut obj, &theta0, &cfg.optimizer(seed))?;
    let p = obj.unpack(&traj.final_theta);

    let n = cfg.n_eval;
    let z = rng::normal_matrix(&mut rng::seeded(rng::derive_seed(seed, SALT_GENERATE)), n, cfg.r);
    let generated = z * p.a_tilde.transpose();

    let mut metrics = BTreeMap::new();
    metrics.insert("loss".into(), traj.loss.last().copied().and_then(finite));
    metrics.insert("eps".into(), finite(p.eps));
    metrics.insert("recon_mse".into(), finite(linear_vae::reconstruction_residual(&gt.a, &p.a_tilde, &p.b_tilde)));
    let d_tilde: Vec<f64> = p.d_tilde.iter().copied().collect();
    metrics.insert(
        "encoder_zeros".into(),
        diagnostics::count_zero_encoder_vars(&d_tilde, cfg.encoder_zero_threshold).ok().map(|c| c as f64),
    );
    metrics.insert(
        "decoder_rows_nonzero".into(),
        diagnostics::count_nonzero_decoder_rows(&p.a_tilde, cfg.decoder_row_threshold).ok().map(|c| c as f64),
    );
    let finite_model = p.a_tilde.iter().all(|v| v.is_finite());
    metrics.insert(
        "eigenvalue_error".into(),
        if finite_model { diagnostics::eigenvalue_error(&gt.a, &generated).ok().and_then(finite) } else { None },
    );
    let decay = if cfg.mode == Mode::GradientFlow && !traj.is_empty() {
        diagnostics::decay_bound_check(&traj, &gt.a, DECAY_TOL).ok()
    } else {
        None
    };
    let preview = generated.rows(0, PREVIEW_ROWS.min(n)).into_owned();
    Ok(SeedOutcome {
        report: SeedReport {
            seed,
            status: traj.status,
            steps_completed: traj.steps_completed,
            metrics,
            d_tilde,
            trajectory: format!("{}/trajectory.csv", seed_dir(seed)),
            wall_clock_s: 0.0,
        },
        trajectory: traj,
        ground_truth: GroundTruth::Linear(gt.clone()),
        preview,
        decay,
    })
}

fn run_nonlinear<N: Network>(cfg: &ExperimentConfig, seed: u64, gt: &GroundTruth, net: N) -> Result<SeedOutcome> {
    let vae = Vae::new(net, DVector::from_element(cfg.r, 1.0), cfg.eps_init)?;
    let train = match cfg.n_train {
        Some(n) => Some(gt.sample(n, rng::derive_seed(seed, SALT_TRAIN_SET))?),
        None => None,
    };
    let theta0 = vae.theta();
    let mut obj = NonlinearObjective::new(vae, gt.clone(), train, cfg.batch, cfg.n_noise, rng::derive_seed(seed, SALT_TRAIN))?;
    let traj = dynamics::run(&mut obj, &theta0, &cfg.optimizer(seed))?;
    let model = obj.model(&traj.final_theta)?;
    let generated = model.generate(cfg.n_eval, rng::derive_seed(seed, SALT_GENERATE));
    let finite_model = generated.iter().all(|v| v.is_finite());
    let rs = cfg.r_star;

    let mut metrics = BTreeMap::new();
    metrics.insert("loss".into(), traj.loss_avg.last().copied().and_then(finite));
    metrics.insert("eps".into(), finite(model.eps));
    metrics.insert("recon_mse".into(), traj.recon_mse.last().copied().and_then(finite));
    let d_tilde: Vec<f64> = model.d_tilde.iter().copied().collect();
    metrics.insert(
        "encoder_zeros".into(),
        diagnostics::count_zero_encoder_vars(&d_tilde, cfg.encoder_zero_threshold).ok().map(|c| c as f64),
    );
    if let Some(a1) = model.net.linear_decoder() {
        metrics.insert(
            "decoder_rows_nonzero".into(),
            diagnostics::count_nonzero_decoder_rows(a1, cfg.decoder_row_threshold).ok().map(|c| c as f64),
        );
    }
    let manifold = match gt {
        GroundTruth::Sphere(_) => diagnostics::manifold_error_sphere(&generated, rs),
        GroundTruth::Sigmoid(s) => diagnostics::manifold_error_sigmoid(&generated, &s.a_star, rs),
        GroundTruth::Linear(_) => Err(Error::Config("linear data has no manifold error".into())),
    };
    metrics.insert("manifold_error".into(), if finite_model { manifold.ok().and_then(finite) } else { None });
    metrics.insert(
        "padding_error".into(),
        if finite_model { diagnostics::padding_error(&generated, rs).ok().and_then(finite) } else { None },
    );
    let preview = generated.rows(0, PREVIEW_ROWS.min(cfg.n_eval)).into_owned();
    Ok(SeedOutcome {
        report: SeedReport {
            seed,
            status: traj.status,
            steps_completed: traj.steps_completed,
            metrics,
            d_tilde,
            trajectory: format!("{}/trajectory.csv", seed_dir(seed)),
            wall_clock_s: 0.0,
        },
        trajectory: traj,
        ground_truth: gt.clone(),
        preview,
        decay: None,
    })
}

/// Per-metric arithmetic means; `None` when some seed lacks the value.
pub fn aggregate(per_seed: &[SeedReport]) -> BTreeMap<String, Option<f64>> {
    let mut names: Vec<&String> = per_seed.iter().flat_map(|s| s.metrics.keys()).collect();
    names.sort();
    names.dedup();
    names
        .into_iter()
        .map(|name| {
            let vals: Option<Vec<f64>> = per_seed.iter().map(|s| s.metric(name)).collect();
            let mean = vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64);
            (name.clone(), mean)
        })
        .collect()
}

/// All seeds of `cfg`, in order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentReport, Vec<SeedOutcome>)> {
    cfg.validate()?;
    let start = Instant::now();
    let outcomes = cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
    let per_seed: Vec<SeedReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let report = ExperimentReport {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        means: aggregate(&per_seed),
        per_seed,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((report, outcomes))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Write every artifact of a finished experiment under `dir`.
pub fn write_run_dir(dir: &Path, report: &ExperimentReport, outcomes: &[SeedOutcome]) -> Result<()> {
    write_json(&dir.join("manifest.json"), &Manifest::new(&report.config))?;
    for o in outcomes {
        let sd = dir.join(seed_dir(o.report.seed));
        write_file(&sd.join("trajectory.csv"), o.trajectory.to_csv_string().as_bytes())?;
        write_file(&sd.join("generated.csv"), super::csv::matrix_to_csv(&o.preview).as_bytes())?;
        write_json(&sd.join("ground_truth.json"), &o.ground_truth)?;
        if let Some(decay) = &o.decay {
            let mut buf = Vec::new();
            decay.write_csv(&mut buf).map_err(|e| Error::io(&sd.join("decay.csv"), e))?;
            write_file(&sd.join("decay.csv"), &buf)?;
        }
    }
    write_json(&dir.join("report.json"), report)
}

/// Run `cfg` and write it to `<root>/<run id>`. Returns the directory.
pub fn train(cfg: &ExperimentConfig, root: &Path) -> Result<(PathBuf, ExperimentReport)> {
    let (report, outcomes) = run_experiment(cfg)?;
    let dir = root.join(run_id(cfg));
    write_run_dir(&dir, &report, &outcomes)?;
    Ok((dir, report))
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::DatasetKind;

    fn small_linear() -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(DatasetKind::Linear, 2, 4, 3);
        c.seeds = vec![0, 1];
        c.n_steps = 200;
        c.snapshot_every = 50;
        c.n_eval = 500;
        c
    }

    #[test]
    fn means_are_arithmetic() {
        let (report, _) = run_experiment(&small_linear()).unwrap();
        for (name, mean) in &report.means {
            let vals: Vec<f64> = report.per_seed.iter().map(|s| s.metric(name).unwrap()).collect();
            assert!((mean.unwrap() - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn seeds_are_reproducible() {
        let cfg = small_linear();
        let a = run_seed(&cfg, 3).unwrap();
        let b = run_seed(&cfg, 3).unwrap();
        assert_eq!(a.report.metrics, b.report.metrics);
        assert_eq!(a.trajectory.to_csv_string(), b.trajectory.to_csv_string());
    }

    #[test]
    fn missing_values_poison_the_mean() {
        let mk = |v: Option<f64>| SeedReport {
            seed: 0,
            status: RunStatus::Completed,
            steps_completed: 0,
            metrics: [("eps".to_string(), v)].into_iter().collect(),
            d_tilde: vec![],
            trajectory: String::new(),
            wall_clock_s: 0.0,
        };
        assert_eq!(aggregate(&[mk(Some(1.0)), mk(Some(2.0))])["eps"], Some(1.5));
        assert_eq!(aggregate(&[mk(Some(1.0)), mk(None)])["eps"], None);
    }

    #[test]
    fn run_dir_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small_linear();
        cfg.seeds = vec![5];
        let (dir, report) = train(&cfg, tmp.path()).unwrap();
        for f in ["manifest.json", "report.json", "seed_5/trajectory.csv", "seed_5/generated.csv", "seed_5/ground_truth.json"] {
            assert!(dir.join(f).is_file(), "{f}");
        }
        assert_eq!(read_report(&dir.join("report.json")).unwrap(), report);
        assert_eq!(read_manifest(&dir.join("manifest.json")).unwrap().config, cfg);
    }
}
