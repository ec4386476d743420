//! Flat TOML run configs. Keys not given in the file fall back to the
//! dataset's preset, so a config can be as short as the dimensions.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::DatasetKind;
use crate::dynamics::{LossKind, Mode, OptimizerConfig};
use crate::error::{Error, Result};
use crate::nonlinear_vae::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Sigmoid,
    Mlp,
}

/// Metrics a report can carry.
pub const METRICS: &[&str] = &[
    "loss",
    "eps",
    "recon_mse",
    "encoder_zeros",
    "decoder_rows_nonzero",
    "eigenvalue_error",
    "manifold_error",
    "padding_error",
];

/// Multiplier applied to step counts by `--paper-scale`.
pub const PAPER_SCALE_FACTOR: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub r_star: usize,
    pub d: usize,
    pub r: usize,
    pub seeds: Vec<u64>,
    pub model: ModelKind,

    pub mode: Mode,
    pub loss_kind: LossKind,
    pub step_size: f64,
    pub n_steps: usize,
    pub snapshot_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_threshold: Option<f64>,
    /// Initial decoder std.
    pub eps_init: f64,

    /// Minibatch rows per step (nonlinear models).
    pub batch: usize,
    /// Encoder noise draws per row and step.
    pub n_noise: usize,
    /// Fixed training-set size; without it every step sees fresh samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    /// Generated samples used by the final metrics.
    pub n_eval: usize,
    pub hidden: usize,
    pub activation: Activation,
    /// Trainable output offset of the sigmoid decoder.
    pub learn_bias: bool,

    pub encoder_zero_threshold: f64,
    pub decoder_row_threshold: f64,
    pub metrics: Vec<String>,
}

impl ExperimentConfig {
    /// Defaults for a dataset and its dimensions.
    pub fn preset(dataset: DatasetKind, r_star: usize, d: usize, r: usize) -> Self {
        let base = Self {
            dataset,
            r_star,
            d,
            r,
            seeds: vec![0, 1, 2],
            model: ModelKind::Linear,
            mode: Mode::Adam,
            loss_kind: LossKind::L,
            step_size: 1e-4,
            n_steps: 200_000,
            snapshot_every: 5_000,
            clip_threshold: None,
            eps_init: 1.0,
            batch: 128,
            n_noise: 1,
            n_train: None,
            n_eval: 100_000,
            hidden: 200,
            activation: Activation::Logistic,
            learn_bias: true,
            encoder_zero_threshold: crate::diagnostics::ZERO_VARIANCE_THRESHOLD,
            decoder_row_threshold: crate::diagnostics::NONZERO_ROW_THRESHOLD,
            metrics: Vec::new(),
        };
        let mut c = match dataset {
            DatasetKind::Linear => base,
            DatasetKind::Sigmoid => Self {
                model: ModelKind::Sigmoid,
                mode: Mode::Adam,
                loss_kind: LossKind::Mc,
                step_size: 1e-3,
                n_steps: 30_000,
                snapshot_every: 1_000,
                n_eval: 10_000,
                ..base
            },
            DatasetKind::Sphere => Self {
                model: ModelKind::Mlp,
                mode: Mode::Adam,
                loss_kind: LossKind::Mc,
                step_size: 1e-3,
                n_steps: 10_000,
                snapshot_every: 500,
                batch: 64,
                n_eval: 10_000,
                ..base
            },
        };
        c.metrics = c.default_metrics();
        c
    }

    pub fn default_metrics(&self) -> Vec<String> {
        let m: &[&str] = match self.dataset {
            DatasetKind::Linear => &["loss", "eps", "recon_mse", "encoder_zeros", "decoder_rows_nonzero", "eigenvalue_error"],
            DatasetKind::Sphere | DatasetKind::Sigmoid => {
                &["loss", "eps", "recon_mse", "encoder_zeros", "manifold_error", "padding_error"]
            }
        };
        m.iter().map(|s| s.to_string()).collect()
    }

    /// Parse a flat TOML config. `dataset`, `r_star`, `d`, and `r` are
    /// required; everything else defaults to [`ExperimentConfig::preset`].
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let get_usize = |k: &str| -> Result<usize> {
            user.get(k)
                .and_then(|v| v.as_integer())
                .and_then(|v| usize::try_from(v).ok())
                .ok_or_else(|| Error::Config(format!("`{k}` must be a non-negative integer")))
        };
        let dataset: DatasetKind = user
            .get("dataset")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Config("`dataset` is required".into()))?
            .parse()?;
        let preset = Self::preset(dataset, get_usize("r_star")?, get_usize("d")?, get_usize("r")?);
        let mut merged = toml::Table::try_from(&preset).map_err(|e| Error::Config(e.to_string()))?;
        let metrics_given = user.contains_key("metrics");
        for (k, v) in user {
            merged.insert(k, v);
        }
        let mut cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if !metrics_given {
            cfg.metrics = cfg.default_metrics();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let (rs, d, r) = (self.r_star, self.d, self.r);
        if rs == 0 || r == 0 {
            return Err(Error::Config("r_star and r must be at least 1".into()));
        }
        match self.dataset {
            DatasetKind::Linear if rs > d => return Err(Error::Config(format!("linear data needs r_star <= d (got {rs} > {d})"))),
            DatasetKind::Sphere | DatasetKind::Sigmoid if d <= rs + 1 => {
                return Err(Error::Config(format!("{} data needs d > r_star + 1 (got d = {d}, r_star = {rs})", self.dataset.as_str())))
            }
            _ => {}
        }
        let model_ok = match self.dataset {
            DatasetKind::Linear => self.model == ModelKind::Linear,
            _ => self.model != ModelKind::Linear,
        };
        if !model_ok {
            return Err(Error::Config(format!("model {:?} does not fit {} data", self.model, self.dataset.as_str())));
        }
        if self.dataset == DatasetKind::Linear && self.loss_kind == LossKind::Mc {
            return Err(Error::Config("linear runs use the closed-form losses L or L1".into()));
        }
        if self.dataset != DatasetKind::Linear && self.loss_kind != LossKind::Mc {
            return Err(Error::Config("nonlinear runs use loss_kind = \"MC\"".into()));
        }
        if self.mode == Mode::GradientFlow && self.loss_kind != LossKind::L1 && self.loss_kind != LossKind::L {
            return Err(Error::Config("gradient flow needs a closed-form loss".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        // TOML integers are signed 64-bit
        if let Some(s) = self.seeds.iter().find(|&&s| s > i64::MAX as u64) {
            return Err(Error::Config(format!("seed {s} exceeds {}", i64::MAX)));
        }
        if !(self.eps_init > 0.0 && self.eps_init.is_finite()) {
            return Err(Error::Config(format!("eps_init must be positive, got {}", self.eps_init)));
        }
        if self.n_eval < d {
            return Err(Error::Config(format!("n_eval must be at least d = {d}")));
        }
        if self.batch < 2 || self.n_noise == 0 || self.hidden == 0 {
            return Err(Error::Config("batch >= 2, n_noise >= 1 and hidden >= 1 are required".into()));
        }
        if self.n_train == Some(0) {
            return Err(Error::Config("n_train must be positive when set".into()));
        }
        if !(self.encoder_zero_threshold > 0.0) || !(self.decoder_row_threshold > 0.0 && self.decoder_row_threshold < 1.0) {
            return Err(Error::Config("thresholds out of range".into()));
        }
        for m in &self.metrics {
            if !METRICS.contains(&m.as_str()) {
                return Err(Error::Config(format!("unknown metric `{m}`")));
            }
            let fits = match m.as_str() {
                "eigenvalue_error" => self.dataset == DatasetKind::Linear,
                "manifold_error" | "padding_error" => self.dataset != DatasetKind::Linear,
                "decoder_rows_nonzero" => self.model != ModelKind::Mlp,
                _ => true,
            };
            if !fits {
                return Err(Error::Config(format!("metric `{m}` does not apply to this run")));
            }
        }
        self.optimizer(0).validate()
    }

    pub fn optimizer(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            mode: self.mode,
            step_size: self.step_size,
            n_steps: self.n_steps,
            snapshot_every: self.snapshot_every,
            eps_clip_threshold: self.clip_threshold,
            loss_kind: self.loss_kind,
            seed,
        }
    }

    /// Canonical JSON echo.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON echo, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_json()).expect("json");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn paper_scaled(mut self) -> Self {
        self.n_steps *= PAPER_SCALE_FACTOR;
        self.snapshot_every *= PAPER_SCALE_FACTOR;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_uses_preset() {
        let c = ExperimentConfig::from_toml_str("dataset = \"sigmoid\"\nr_star = 3\nd = 7\nr = 6\n").unwrap();
        assert_eq!(c, ExperimentConfig::preset(DatasetKind::Sigmoid, 3, 7, 6));
    }

    #[test]
    fn overrides_and_roundtrip() {
        let text = "dataset = \"linear\"\nr_star = 3\nd = 12\nr = 20\nseeds = [4]\nstep_size = 0.001\nmode = \"gradient_flow\"\nloss_kind = \"L1\"\n";
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(c.seeds, vec![4]);
        assert_eq!(c.mode, Mode::GradientFlow);
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "dataset = \"sphere\"\nr_star = 2\nd = 3\nr = 4\n",
            "dataset = \"linear\"\nr_star = 5\nd = 3\nr = 4\n",
            "dataset = \"linear\"\nr_star = 2\nd = 3\nr = 4\nbogus = 1\n",
            "dataset = \"linear\"\nr_star = 2\nd = 3\nr = 4\nmetrics = [\"manifold_error\"]\n",
            "dataset = \"sigmoid\"\nr_star = 2\nd = 5\nr = 4\nloss_kind = \"L\"\n",
            "r_star = 2\nd = 3\nr = 4\n",
            "dataset = \"cube\"\nr_star = 2\nd = 3\nr = 4\n",
        ] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn seeds_must_fit_toml_integers() {
        let mut c = ExperimentConfig::preset(DatasetKind::Linear, 3, 12, 20);
        c.seeds = vec![u64::MAX];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::preset(DatasetKind::Linear, 3, 12, 20);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seeds = vec![9];
        assert_ne!(a.hash(), b.hash());
    }
}
