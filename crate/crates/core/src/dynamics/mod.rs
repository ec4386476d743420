//! Optimizers over a flat parameter vector: gradient descent, Adam, and RK4
//! integration of the gradient flow. Every run records a [`Trajectory`].

mod objective;
mod trajectory;

pub use objective::{LinearObjective, LinearStateLayout, NonlinearObjective};
pub use trajectory::{fmt as fmt_f64, LinearState, RunStatus, Snapshot, Trajectory};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear_vae::LinearVaeParams;
use crate::nonlinear_vae::{Network, Vae};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Gd,
    Adam,
    GradientFlow,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(Mode::Gd),
            "adam" => Ok(Mode::Adam),
            "gradient_flow" => Ok(Mode::GradientFlow),
            other => Err(Error::Config(format!("unknown optimizer mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    L,
    L1,
    #[serde(rename = "MC")]
    Mc,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(LossKind::L),
            "L1" => Ok(LossKind::L1),
            "MC" => Ok(LossKind::Mc),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub mode: Mode,
    pub step_size: f64,
    pub n_steps: usize,
    pub snapshot_every: usize,
    pub eps_clip_threshold: Option<f64>,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.snapshot_every == 0 {
            return Err(Error::Config("snapshot interval must be at least 1".into()));
        }
        if let Some(t) = self.eps_clip_threshold {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("clip threshold must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Per-snapshot quantities an objective reports besides the loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub recon_mse: f64,
    pub singular_values: Vec<f64>,
    pub d_tilde: Vec<f64>,
    pub linear: Option<LinearState>,
}

/// A differentiable loss over a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Loss at `theta`, writing the gradient into `grad`. Stochastic
    /// objectives draw their noise from `step`.
    fn loss_grad(&mut self, theta: &[f64], step: u64, grad: &mut [f64]) -> Result<f64>;

    /// Index of the decoder-std coordinate and whether it stores `log ε`.
    fn eps_coord(&self) -> Option<(usize, bool)> {
        None
    }

    fn eps(&self, theta: &[f64]) -> f64 {
        match self.eps_coord() {
            Some((i, true)) => theta[i].exp(),
            Some((i, false)) => theta[i],
            None => f64::NAN,
        }
    }

    /// `max_j (‖Ã_j‖² + ε²)` at `theta`, or 0 when there is no linear decoder.
    fn k_value(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn diagnostics(&mut self, _theta: &[f64]) -> Result<Diagnostics> {
        Ok(Diagnostics::default())
    }
}

/// Raise the decoder-std coordinate so that `ε ≥ τ` holds exactly.
fn clip_coord(theta: &mut [f64], coord: Option<(usize, bool)>, tau: f64) {
    match coord {
        Some((i, true)) => {
            let lt = tau.ln();
            if theta[i] < lt {
                theta[i] = lt;
            }
            while theta[i].exp() < tau {
                theta[i] = theta[i].next_up();
            }
        }
        Some((i, false)) => {
            if theta[i] < tau {
                theta[i] = tau;
            }
        }
        None => {}
    }
}

/// Models whose decoder std can be read and replaced.
pub trait DecoderVariance {
    fn decoder_std(&self) -> f64;
    fn set_decoder_std(&mut self, eps: f64);
}

impl DecoderVariance for LinearVaeParams {
    fn decoder_std(&self) -> f64 {
        self.eps
    }

    fn set_decoder_std(&mut self, eps: f64) {
        self.eps = eps;
    }
}

impl<N: Network> DecoderVariance for Vae<N> {
    fn decoder_std(&self) -> f64 {
        self.eps
    }

    fn set_decoder_std(&mut self, eps: f64) {
        self.eps = eps;
    }
}

/// `ε ← max(ε, τ)`; nothing else changes.
pub fn apply_clipping<P: DecoderVariance + Clone>(params: &P, tau: f64) -> Result<P> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("clip threshold must be positive, got {tau}")));
    }
    let mut p = params.clone();
    if p.decoder_std() < tau {
        p.set_decoder_std(tau);
    }
    Ok(p)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn check_theta<O: Objective>(obj: &O, theta: &[f64]) -> Result<()> {
    if theta.len() != obj.dim() {
        return Err(Error::Dimension(format!("expected {} parameters, got {}", obj.dim(), theta.len())));
    }
    Ok(())
}

/// Recoverable evaluation failures end a run with a flagged status; shape
/// and config errors propagate.
fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::Numerical(_) | Error::Domain(_))
}

/// Discrete descent: plain gradient steps or Adam, selected by `cfg.mode`.
pub fn run_gd<O: Objective>(obj: &mut O, theta0: &[f64], cfg: &OptimizerConfig) -> Result<Trajectory> {
    cfg.validate()?;
    check_theta(obj, theta0)?;
    if cfg.mode == Mode::GradientFlow {
        return Err(Error::Config("gradient flow runs through run_gradient_flow".into()));
    }
    let n = obj.dim();
    let coord = obj.eps_coord();
    let mut theta = theta0.to_vec();
    if let Some(tau) = cfg.eps_clip_threshold {
        clip_coord(&mut theta, coord, tau);
    }
    let mut grad = vec![0.0; n];
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut traj = Trajectory::default();
    let mut running_k = obj.k_value(&theta);
    let mut window_sum = 0.0;
    let mut window_len = 0usize;

    for step in 0..=cfg.n_steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = match obj.loss_grad(&theta, step as u64, &mut grad) {
            Ok(l) if l.is_finite() && grad.iter().all(|g| g.is_finite()) => l,
            Ok(l) => {
                traj.abort(RunStatus::NonFinite { step }, step as f64, &theta, l, obj, running_k)?;
                return Ok(traj);
            }
            Err(e) if is_numerical(&e) => {
                traj.abort(RunStatus::NonFinite { step }, step as f64, &theta, f64::NAN, obj, running_k)?;
                return Ok(traj);
            }
            Err(e) => return Err(e),
        };
        window_sum += loss;
        window_len += 1;
        if step % cfg.snapshot_every == 0 || step == cfg.n_steps {
            let avg = window_sum / window_len as f64;
            traj.record(step as f64, loss, avg, &theta, obj, running_k)?;
            window_sum = 0.0;
            window_len = 0;
        }
        if step == cfg.n_steps {
            break;
        }
        match cfg.mode {
            Mode::Gd => {
                for (t, g) in theta.iter_mut().zip(&grad) {
                    *t -= cfg.step_size * g;
                }
            }
            Mode::Adam => {
                let k = (step + 1) as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(k);
                let c2 = 1.0 - ADAM_BETA2.powi(k);
                for i in 0..n {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                    theta[i] -= cfg.step_size * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
            Mode::GradientFlow => unreachable!(),
        }
        if let Some(tau) = cfg.eps_clip_threshold {
            clip_coord(&mut theta, coord, tau);
        }
        running_k = running_k.max(obj.k_value(&theta));
    }
    traj.steps_completed = cfg.n_steps;
    traj.final_theta = theta;
    Ok(traj)
}

/// Classical RK4 on `dθ/dt = −∇loss` with fixed step `cfg.step_size`.
/// Halts with [`RunStatus::StiffnessHalt`] when the loss goes up between
/// steps, and with [`RunStatus::NonFinite`] on a non-finite state.
pub fn run_gradient_flow<O: Objective>(obj: &mut O, theta0: &[f64], cfg: &OptimizerConfig) -> Result<Trajectory> {
    cfg.validate()?;
    check_theta(obj, theta0)?;
    let n = obj.dim();
    let h = cfg.step_size;
    let coord = obj.eps_coord();
    let mut theta = theta0.to_vec();
    let mut traj = Trajectory::default();
    let mut running_k = obj.k_value(&theta);
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut prev_loss = f64::INFINITY;

    // The velocity at a state is the negative gradient.
    fn eval<O: Objective>(obj: &mut O, x: &[f64], out: &mut [f64]) -> Result<f64> {
        out.iter_mut().for_each(|g| *g = 0.0);
        let l = obj.loss_grad(x, 0, out)?;
        if !l.is_finite() || out.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite loss or gradient".into()));
        }
        out.iter_mut().for_each(|g| *g = -*g);
        Ok(l)
    }

    for step in 0..=cfg.n_steps {
        let loss = match eval(obj, &theta, &mut k1) {
            Ok(l) => l,
            Err(e) if is_numerical(&e) => {
                traj.abort(RunStatus::NonFinite { step }, step as f64 * h, &theta, f64::NAN, obj, running_k)?;
                return Ok(traj);
            }
            Err(e) => return Err(e),
        };
        if loss > prev_loss + 1e-12 * prev_loss.abs().max(1.0) {
            traj.abort(RunStatus::StiffnessHalt { step }, step as f64 * h, &theta, loss, obj, running_k)?;
            return Ok(traj);
        }
        prev_loss = loss;
        if step % cfg.snapshot_every == 0 || step == cfg.n_steps {
            traj.record(step as f64 * h, loss, loss, &theta, obj, running_k)?;
        }
        if step == cfg.n_steps {
            break;
        }
        let mut stages = || -> Result<()> {
            for i in 0..n {
                stage[i] = theta[i] + 0.5 * h * k1[i];
            }
            running_k = running_k.max(obj.k_value(&stage));
            eval(obj, &stage, &mut k2)?;
            for i in 0..n {
                stage[i] = theta[i] + 0.5 * h * k2[i];
            }
            running_k = running_k.max(obj.k_value(&stage));
            eval(obj, &stage, &mut k3)?;
            for i in 0..n {
                stage[i] = theta[i] + h * k3[i];
            }
            running_k = running_k.max(obj.k_value(&stage));
            eval(obj, &stage, &mut k4)?;
            Ok(())
        };
        match stages() {
            Ok(()) => {}
            Err(e) if is_numerical(&e) => {
                traj.abort(RunStatus::NonFinite { step }, step as f64 * h, &theta, loss, obj, running_k)?;
                return Ok(traj);
            }
            Err(e) => return Err(e),
        }
        for i in 0..n {
            theta[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if let Some(tau) = cfg.eps_clip_threshold {
            clip_coord(&mut theta, coord, tau);
        }
        running_k = running_k.max(obj.k_value(&theta));
    }
    traj.steps_completed = cfg.n_steps;
    traj.final_theta = theta;
    Ok(traj)
}

/// Dispatch on `cfg.mode`.
pub fn run<O: Objective>(obj: &mut O, theta0: &[f64], cfg: &OptimizerConfig) -> Result<Trajectory> {
    match cfg.mode {
        Mode::GradientFlow => run_gradient_flow(obj, theta0, cfg),
        _ => run_gd(obj, theta0, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `‖x‖² / 2` with the last coordinate treated as `log ε`.
    struct Quadratic(usize);

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.0
        }

        fn loss_grad(&mut self, theta: &[f64], _step: u64, grad: &mut [f64]) -> Result<f64> {
            grad.copy_from_slice(theta);
            Ok(0.5 * theta.iter().map(|v| v * v).sum::<f64>())
        }

        fn eps_coord(&self) -> Option<(usize, bool)> {
            Some((self.0 - 1, true))
        }
    }

    fn cfg(mode: Mode, h: f64, n: usize) -> OptimizerConfig {
        OptimizerConfig {
            mode,
            step_size: h,
            n_steps: n,
            snapshot_every: 1,
            eps_clip_threshold: None,
            loss_kind: LossKind::L1,
            seed: 0,
        }
    }

    #[test]
    fn rk4_on_linear_ode() {
        let x0 = [1.0, -2.0, 0.5];
        let t = run_gradient_flow(&mut Quadratic(3), &x0, &cfg(Mode::GradientFlow, 0.1, 20)).unwrap();
        assert_eq!(t.status, RunStatus::Completed);
        for (x, x0) in t.final_theta.iter().zip(x0) {
            let exact = x0 * (-2.0f64).exp();
            // global error of RK4 is about h⁴ t / 120 relative here
            assert!((x - exact).abs() < 1e-5 * x0.abs());
        }
    }

    #[test]
    fn rk4_richardson_ratio() {
        let x0 = [1.0];
        let end = |h: f64, n: usize| run_gradient_flow(&mut Quadratic(1), &x0, &cfg(Mode::GradientFlow, h, n)).unwrap().final_theta[0];
        let a = end(0.2, 10);
        let b = end(0.1, 20);
        let c = end(0.05, 40);
        let ratio = (a - b) / (b - c);
        assert!((ratio - 16.0).abs() < 0.3 * 16.0, "ratio {ratio}");
    }

    #[test]
    fn zero_gradient_keeps_state() {
        let t = run_gd(&mut Quadratic(3), &[0.0; 3], &cfg(Mode::Gd, 0.1, 10)).unwrap();
        assert!(t.final_theta.iter().all(|v| *v == 0.0));
        assert!(t.loss.iter().all(|v| *v == 0.0));
        assert_eq!(t.len(), 11);
    }

    #[test]
    fn clipping_holds_exactly() {
        let tau = (-4.0f64).exp();
        let mut c = cfg(Mode::Adam, 0.05, 400);
        c.eps_clip_threshold = Some(tau);
        let t = run_gd(&mut Quadratic(2), &[1.0, 0.0], &c).unwrap();
        assert!(t.eps.iter().skip(1).all(|&e| e >= tau));
        assert!(t.final_theta[1].exp() >= tau);
    }

    #[test]
    fn clip_examples() {
        let p = LinearVaeParams {
            a_tilde: nalgebra::DMatrix::zeros(2, 1),
            b_tilde: nalgebra::DMatrix::zeros(1, 2),
            d_tilde: nalgebra::DVector::from_element(1, 1.0),
            eps: 1e-6,
        };
        let tau = (-4.0f64).exp();
        assert_eq!(apply_clipping(&p, tau).unwrap().eps, tau);
        let q = LinearVaeParams { eps: 0.5, ..p };
        assert_eq!(apply_clipping(&q, tau).unwrap(), q);
        assert!(apply_clipping(&q, 0.0).is_err());
    }

    #[test]
    fn stiffness_guard_trips() {
        // step far beyond the stability limit of h < 2.8 for this ODE
        let t = run_gradient_flow(&mut Quadratic(1), &[1.0], &cfg(Mode::GradientFlow, 3.5, 10)).unwrap();
        assert!(matches!(t.status, RunStatus::StiffnessHalt { .. }));
    }

    #[test]
    fn bad_config_rejected() {
        let mut c = cfg(Mode::Gd, -1.0, 3);
        assert!(matches!(run_gd(&mut Quadratic(1), &[1.0], &c), Err(Error::Config(_))));
        c.step_size = 0.1;
        c.eps_clip_threshold = Some(0.0);
        assert!(matches!(run_gd(&mut Quadratic(1), &[1.0], &c), Err(Error::Config(_))));
    }
}
