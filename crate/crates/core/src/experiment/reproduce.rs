//! Column sweeps for the published tables and their qualitative checks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::{self, ExperimentReport, SeedOutcome};
use super::verify::Check;
use crate::datasets::DatasetKind;
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PaperTable {
    Linear,
    Sigmoid,
    Sphere,
    SigmoidClip,
    SphereClip,
}

impl PaperTable {
    pub const ALL: [PaperTable; 5] = [
        PaperTable::Linear,
        PaperTable::Sigmoid,
        PaperTable::Sphere,
        PaperTable::SigmoidClip,
        PaperTable::SphereClip,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PaperTable::Linear => "linear",
            PaperTable::Sigmoid => "sigmoid",
            PaperTable::Sphere => "sphere",
            PaperTable::SigmoidClip => "sigmoid-clip",
            PaperTable::SphereClip => "sphere-clip",
        }
    }

    pub fn dataset(&self) -> DatasetKind {
        match self {
            PaperTable::Linear => DatasetKind::Linear,
            PaperTable::Sigmoid | PaperTable::SigmoidClip => DatasetKind::Sigmoid,
            PaperTable::Sphere | PaperTable::SphereClip => DatasetKind::Sphere,
        }
    }

    pub fn clipped(&self) -> bool {
        matches!(self, PaperTable::SigmoidClip | PaperTable::SphereClip)
    }
}

impl std::str::FromStr for PaperTable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PaperTable::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown table `{s}`")))
    }
}

/// Published column: dimensions and the reported means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaperColumn {
    pub r_star: usize,
    pub d: usize,
    pub r: usize,
    pub encoder_zeros: f64,
    pub decoder_rows_nonzero: Option<f64>,
    pub eigenvalue_error: Option<f64>,
    pub manifold_error: Option<f64>,
}

const fn linear(r_star: usize, d: usize, zeros: f64, eig: f64) -> PaperColumn {
    PaperColumn {
        r_star,
        d,
        r: 20,
        encoder_zeros: zeros,
        decoder_rows_nonzero: Some(r_star as f64),
        eigenvalue_error: Some(eig),
        manifold_error: None,
    }
}

const fn nonlinear(r_star: usize, d: usize, r: usize, manifold: f64, zeros: f64) -> PaperColumn {
    PaperColumn {
        r_star,
        d,
        r,
        encoder_zeros: zeros,
        decoder_rows_nonzero: None,
        eigenvalue_error: None,
        manifold_error: Some(manifold),
    }
}

pub fn paper_columns(table: PaperTable) -> Vec<PaperColumn> {
    match table {
        PaperTable::Linear => vec![
            linear(3, 12, 3.3, 0.44),
            linear(3, 20, 3.7, 0.71),
            linear(6, 12, 6.0, 0.49),
            linear(6, 20, 6.0, 0.47),
            linear(9, 12, 9.3, 0.30),
            linear(9, 20, 9.0, 0.45),
            linear(12, 20, 12.0, 0.42),
        ],
        PaperTable::Sigmoid => vec![
            nonlinear(3, 7, 6, 0.09, 3.0),
            nonlinear(3, 17, 8, 0.13, 3.6),
            nonlinear(5, 11, 10, 0.23, 6.0),
            nonlinear(5, 22, 16, 0.24, 6.3),
            nonlinear(7, 15, 13, 0.18, 7.3),
            nonlinear(7, 28, 24, 0.28, 8.0),
        ],
        PaperTable::Sphere => vec![
            nonlinear(2, 6, 6, 0.02, 3.0),
            nonlinear(2, 16, 8, 0.14, 5.0),
            nonlinear(4, 10, 10, 0.04, 5.0),
            nonlinear(4, 21, 16, 0.06, 6.0),
            nonlinear(6, 14, 13, 0.03, 7.0),
        ],
        PaperTable::SigmoidClip => vec![
            nonlinear(3, 7, 6, 0.15, 3.0),
            nonlinear(3, 17, 8, 0.15, 3.0),
            nonlinear(5, 11, 10, 0.23, 5.0),
            nonlinear(5, 22, 16, 0.23, 5.0),
            nonlinear(7, 15, 13, 0.24, 7.0),
            nonlinear(7, 28, 24, 0.24, 7.0),
        ],
        PaperTable::SphereClip => vec![
            nonlinear(2, 6, 6, 0.03, 3.0),
            nonlinear(2, 16, 8, 0.03, 3.0),
            nonlinear(4, 10, 10, 0.03, 5.0),
            nonlinear(4, 21, 16, 0.02, 5.0),
            nonlinear(6, 14, 13, 0.02, 7.0),
        ],
    }
}

/// Lower bound on the decoder std in the clipped runs, `e^{-4}`.
pub fn clip_threshold() -> f64 {
    (-4.0f64).exp()
}

/// Initial decoder std of the clipped runs, `e^{-3}`.
pub fn clip_eps_init() -> f64 {
    (-3.0f64).exp()
}

/// The floor is reached early, so clipped sphere runs stop sooner.
pub const CLIPPED_SPHERE_STEPS: usize = 6_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

/// Run config for one column.
pub fn column_config(table: PaperTable, col: &PaperColumn, scale: Scale, seeds: &[u64]) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(table.dataset(), col.r_star, col.d, col.r);
    c.seeds = seeds.to_vec();
    if table.clipped() {
        c.clip_threshold = Some(clip_threshold());
        c.eps_init = clip_eps_init();
        if table == PaperTable::SphereClip {
            c.n_steps = CLIPPED_SPHERE_STEPS;
        }
    }
    match scale {
        Scale::Desk => c,
        Scale::Paper => c.paper_scaled(),
    }
}

/// Smoothed loss never goes up between snapshots after the first
/// `burn_in` fraction of the run.
pub fn smoothed_loss_decreasing(traj: &Trajectory, burn_in: f64) -> bool {
    let start = ((traj.len() as f64) * burn_in).ceil() as usize;
    let s = &traj.loss_avg[start.min(traj.len())..];
    s.len() >= 2 && s.windows(2).all(|w| w[1] < w[0])
}

/// Fraction of snapshots treated as burn-in by the monotonicity check.
pub const BURN_IN: f64 = 0.2;

fn per_seed<F: Fn(&SeedOutcome) -> Option<f64>>(outs: &[SeedOutcome], f: F) -> Vec<Option<f64>> {
    outs.iter().map(f).collect()
}

fn fmt_vals(v: &[Option<f64>]) -> String {
    let s: Vec<String> = v.iter().map(|x| x.map_or("n/a".into(), |x| if x != 0.0 && x.abs() < 1e-3 { format!("{x:.2e}") } else { format!("{x:.4}") })).collect();
    format!("[{}]", s.join(", "))
}

fn all(v: &[Option<f64>], pred: impl Fn(f64) -> bool) -> bool {
    !v.is_empty() && v.iter().all(|x| x.is_some_and(&pred))
}

/// The qualitative checks for one column, evaluated per seed.
pub fn column_checks(table: PaperTable, col: &PaperColumn, outs: &[SeedOutcome]) -> Vec<Check> {
    let rs = col.r_star as f64;
    let metric = |name: &'static str| per_seed(outs, move |o| o.report.metric(name));
    let zeros = metric("encoder_zeros");
    let mut checks = Vec::new();
    let completed = outs.iter().all(|o| o.report.status.is_completed());
    checks.push(Check::new("runs completed", completed, format!("{} seeds", outs.len())));
    match table {
        PaperTable::Linear => {
            let rows = metric("decoder_rows_nonzero");
            let eig = metric("eigenvalue_error");
            checks.push(Check::new("decoder rows nonzero = r*", all(&rows, |v| v == rs), fmt_vals(&rows)));
            checks.push(Check::new("encoder zeros >= r*", all(&zeros, |v| v >= rs), fmt_vals(&zeros)));
            checks.push(Check::new("eigenvalue error > 0.1", all(&eig, |v| v > 0.1), fmt_vals(&eig)));
        }
        PaperTable::Sigmoid | PaperTable::Sphere => {
            let eps = metric("eps");
            let manifold = metric("manifold_error");
            let mono: Vec<bool> = outs.iter().map(|o| smoothed_loss_decreasing(&o.trajectory, BURN_IN)).collect();
            checks.push(Check::new("decoder std < 1e-2", all(&eps, |v| v < 1e-2), fmt_vals(&eps)));
            checks.push(Check::new("smoothed loss decreasing", !mono.is_empty() && mono.iter().all(|&b| b), format!("{mono:?}")));
            checks.push(Check::new("manifold error > 0.02", all(&manifold, |v| v > 0.02), fmt_vals(&manifold)));
            checks.push(Check::new("manifold error < 0.5", all(&manifold, |v| v < 0.5), fmt_vals(&manifold)));
            if table == PaperTable::Sphere {
                checks.push(Check::new("encoder zeros >= r*+1", all(&zeros, |v| v > rs), fmt_vals(&zeros)));
            } else {
                checks.push(Check::new("encoder zeros >= r*", all(&zeros, |v| v >= rs), fmt_vals(&zeros)));
            }
        }
        PaperTable::SigmoidClip => {
            checks.push(Check::new("encoder zeros = r*", all(&zeros, |v| v == rs), fmt_vals(&zeros)));
        }
        PaperTable::SphereClip => {
            checks.push(Check::new("encoder zeros >= r*+1", all(&zeros, |v| v > rs), fmt_vals(&zeros)));
        }
    }
    checks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnComparison {
    pub paper: PaperColumn,
    pub report: ExperimentReport,
    pub checks: Vec<Check>,
}

impl ColumnComparison {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub table: PaperTable,
    pub scale: Scale,
    pub columns: Vec<ColumnComparison>,
}

impl Comparison {
    pub fn passed(&self) -> bool {
        self.columns.iter().all(|c| c.passed())
    }

    /// Side-by-side text: artifact mean against the published mean, then
    /// one line per check.
    pub fn to_text(&self) -> String {
        let mut out = format!("table {} ({:?} scale)\n", self.table.as_str(), self.scale);
        let rows: [(&str, fn(&PaperColumn) -> Option<f64>); 4] = [
            ("encoder_zeros", |p| Some(p.encoder_zeros)),
            ("decoder_rows_nonzero", |p| p.decoder_rows_nonzero),
            ("eigenvalue_error", |p| p.eigenvalue_error),
            ("manifold_error", |p| p.manifold_error),
        ];
        for c in &self.columns {
            let p = &c.paper;
            out.push_str(&format!("  r*={} d={} r={}\n", p.r_star, p.d, p.r));
            for (name, get) in rows {
                if let Some(pv) = get(p) {
                    let ours = c.report.mean(name).map_or("n/a".to_string(), |v| format!("{v:.3}"));
                    out.push_str(&format!("    {name:<22} ours {ours:>9}   paper {pv:>6.2}\n"));
                }
            }
            if let Some(eps) = c.report.mean("eps") {
                out.push_str(&format!("    {:<22} ours {eps:>9.2e}\n", "eps"));
            }
            for ch in &c.checks {
                out.push_str(&format!("    [{}] {} {}\n", if ch.pass { "pass" } else { "FAIL" }, ch.name, ch.detail));
            }
        }
        out.push_str(if self.passed() { "overall: pass\n" } else { "overall: FAIL\n" });
        out
    }
}

/// Run the selected columns (all when `columns` is `None`). With `out`, each
/// column's run directory goes under it along with `comparison.json` and
/// `comparison.txt`.
pub fn reproduce(
    table: PaperTable,
    scale: Scale,
    seeds: &[u64],
    columns: Option<&[usize]>,
    out: Option<&Path>,
) -> Result<Comparison> {
    let all_cols = paper_columns(table);
    let picked: Vec<usize> = match columns {
        Some(c) => c.to_vec(),
        None => (0..all_cols.len()).collect(),
    };
    let mut result = Vec::new();
    for i in picked {
        let col = *all_cols
            .get(i)
            .ok_or_else(|| Error::Config(format!("table {} has {} columns", table.as_str(), all_cols.len())))?;
        let cfg = column_config(table, &col, scale, seeds);
        let (report, outcomes) = runner::run_experiment(&cfg)?;
        if let Some(root) = out {
            runner::write_run_dir(&root.join(runner::run_id(&cfg)), &report, &outcomes)?;
        }
        let checks = column_checks(table, &col, &outcomes);
        result.push(ColumnComparison {
            paper: col,
            report,
            checks,
        });
    }
    let cmp = Comparison {
        table,
        scale,
        columns: result,
    };
    if let Some(root) = out {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let json = serde_json::to_string_pretty(&cmp)?;
        std::fs::write(root.join("comparison.json"), json + "\n").map_err(|e| Error::io(root.join("comparison.json"), e))?;
        std::fs::write(root.join("comparison.txt"), cmp.to_text()).map_err(|e| Error::io(root.join("comparison.txt"), e))?;
    }
    Ok(cmp)
}
