use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::Objective;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    #[default]
    Completed,
    /// Loss, gradient, or state stopped being finite at this step.
    NonFinite { step: usize },
    /// The loss increased between flow steps; the step is too large for the
    /// local stiffness.
    StiffnessHalt { step: usize },
}

impl RunStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunStatus::Completed)
    }
}

/// Decoder and encoder matrices of a linear model at one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearState {
    pub a_tilde: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Snapshot {
    pub singular_values: Vec<f64>,
    pub d_tilde: Vec<f64>,
    pub linear: Option<LinearState>,
}

/// Snapshot series of a run. `loss_avg` is the mean per-step loss since the
/// previous snapshot, which smooths stochastic objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub loss: Vec<f64>,
    pub loss_avg: Vec<f64>,
    pub eps: Vec<f64>,
    pub recon_mse: Vec<f64>,
    pub running_k: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    pub status: RunStatus,
    pub steps_completed: usize,
    #[serde(skip)]
    pub final_theta: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub(super) fn record<O: Objective + ?Sized>(
        &mut self,
        time: f64,
        loss: f64,
        loss_avg: f64,
        theta: &[f64],
        obj: &mut O,
        running_k: f64,
    ) -> Result<()> {
        let diag = obj.diagnostics(theta)?;
        self.times.push(time);
        self.loss.push(loss);
        self.loss_avg.push(loss_avg);
        self.eps.push(obj.eps(theta));
        self.recon_mse.push(diag.recon_mse);
        self.running_k.push(running_k);
        self.snapshots.push(Snapshot {
            singular_values: diag.singular_values,
            d_tilde: diag.d_tilde,
            linear: diag.linear,
        });
        Ok(())
    }

    /// Stop with `status`, keeping the failing state as the final snapshot
    /// when it can still be described.
    pub(super) fn abort<O: Objective + ?Sized>(
        &mut self,
        status: RunStatus,
        time: f64,
        theta: &[f64],
        loss: f64,
        obj: &mut O,
        running_k: f64,
    ) -> Result<()> {
        let step = match status {
            RunStatus::NonFinite { step } | RunStatus::StiffnessHalt { step } => step,
            RunStatus::Completed => 0,
        };
        let later = self.times.last().is_none_or(|&t| time > t);
        if later && matches!(status, RunStatus::NonFinite { .. }) {
            let diag = obj.diagnostics(theta).unwrap_or_default();
            self.times.push(time);
            self.loss.push(loss);
            self.loss_avg.push(loss);
            self.eps.push(obj.eps(theta));
            self.recon_mse.push(diag.recon_mse);
            self.running_k.push(running_k);
            self.snapshots.push(Snapshot {
                singular_values: diag.singular_values,
                d_tilde: diag.d_tilde,
                linear: diag.linear,
            });
        }
        self.status = status;
        self.steps_completed = step;
        self.final_theta = theta.to_vec();
        Ok(())
    }

    /// Number of singular-value and encoder-variance columns in the CSV.
    fn widths(&self) -> (usize, usize) {
        let sv = self.snapshots.iter().map(|s| s.singular_values.len()).max().unwrap_or(0);
        let d = self.snapshots.iter().map(|s| s.d_tilde.len()).max().unwrap_or(0);
        (sv, d)
    }

    pub fn csv_header(&self) -> Vec<String> {
        let (nsv, nd) = self.widths();
        let mut h: Vec<String> = ["time", "loss", "loss_avg", "eps", "recon_mse"].iter().map(|s| s.to_string()).collect();
        h.extend((1..=nsv).map(|i| format!("sv_{i}")));
        h.extend((1..=nd).map(|i| format!("D_{i}")));
        h.push("running_K".into());
        h
    }

    /// One row per snapshot. Missing entries are written as empty fields.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let (nsv, nd) = self.widths();
        writeln!(w, "{}", self.csv_header().join(","))?;
        for k in 0..self.len() {
            let mut row = vec![
                fmt(self.times[k]),
                fmt(self.loss[k]),
                fmt(self.loss_avg[k]),
                fmt(self.eps[k]),
                fmt(self.recon_mse[k]),
            ];
            let s = &self.snapshots[k];
            row.extend((0..nsv).map(|i| s.singular_values.get(i).map_or(String::new(), |v| fmt(*v))));
            row.extend((0..nd).map(|i| s.d_tilde.get(i).map_or(String::new(), |v| fmt(*v))));
            row.push(fmt(self.running_k[k]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is ascii")
    }

    /// Snapshot series back from a CSV written by [`Trajectory::write_csv`].
    /// Parameter matrices are not stored in CSV and come back empty.
    pub fn from_csv(text: &str) -> Result<Self> {
        let table = crate::experiment::csv::Table::parse(text)?;
        if table.rows.is_empty() {
            return Err(Error::Schema("trajectory has no rows".into()));
        }
        let col = |name: &str| table.column(name);
        let mut t = Trajectory {
            times: col("time")?,
            loss: col("loss")?,
            eps: col("eps")?,
            recon_mse: col("recon_mse")?,
            running_k: col("running_K")?,
            ..Default::default()
        };
        t.loss_avg = table.column("loss_avg").unwrap_or_else(|_| t.loss.clone());
        let sv_cols: Vec<usize> = table.prefixed("sv_");
        let d_cols: Vec<usize> = table.prefixed("D_");
        for row in &table.rows {
            let pick = |cols: &[usize]| cols.iter().filter_map(|&c| row[c]).collect::<Vec<f64>>();
            t.snapshots.push(Snapshot {
                singular_values: pick(&sv_cols),
                d_tilde: pick(&d_cols),
                linear: None,
            });
        }
        t.steps_completed = t.len();
        Ok(t)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:?}")
    }
}
