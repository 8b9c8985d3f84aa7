//! Slow-timescale calibration of the risk gains `(α, κ)`.
//!
//! Every `K` control steps the mean meta-gradient of the recorded window is
//! norm-clipped, scaled, subtracted from the raw parameters and projected
//! onto the admissible box. The controller uses the applied parameters,
//! which follow the raw ones through exponential smoothing.
//!
//! The safety terms are evaluated on the realized next-step barrier value
//! `h⁺`, with `∂h⁺/∂θ ≈ Δt · L_G h · ∂u*/∂θ`:
//!
//! ```text
//! L = ‖u*−u_ref‖² + λ_h Ψ(h⁺) + λ_s max(0, −h⁺/Δt),   Ψ(h) = −log max(h, floor)
//! ```

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("{name}: min {min} exceeds max {max}")]
    Bounds { name: &'static str, min: f64, max: f64 },
    #[error("{0} must lie in (0, 1], got {1}")]
    Smoothing(&'static str, f64),
    #[error("meta config: {0}")]
    Config(String),
    #[error("initial {name} = {value} outside [{min}, {max}]")]
    Initial { name: &'static str, value: f64, min: f64, max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskBounds {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
}

impl Default for RiskBounds {
    fn default() -> Self {
        Self { alpha_min: 0.1, alpha_max: 10.0, kappa_min: 0.0, kappa_max: 5.0 }
    }
}

impl RiskBounds {
    pub fn validate(&self) -> Result<(), RiskError> {
        if !(self.alpha_min <= self.alpha_max) || !(self.alpha_min > 0.0) {
            return Err(RiskError::Bounds { name: "alpha", min: self.alpha_min, max: self.alpha_max });
        }
        if !(self.kappa_min <= self.kappa_max) || !(self.kappa_min >= 0.0) {
            return Err(RiskError::Bounds { name: "kappa", min: self.kappa_min, max: self.kappa_max });
        }
        Ok(())
    }

    pub fn clamp(&self, alpha: f64, kappa: f64) -> (f64, f64) {
        (alpha.clamp(self.alpha_min, self.alpha_max), kappa.clamp(self.kappa_min, self.kappa_max))
    }
}

/// Smoothing gains. `rise` applies when a parameter moves toward
/// conservatism (κ up, α down), `fall` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Smoothing {
    pub rise: f64,
    pub fall: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self { rise: 0.5, fall: 0.05 }
    }
}

impl Smoothing {
    pub fn symmetric(gamma: f64) -> Self {
        Self { rise: gamma, fall: gamma }
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        for (name, g) in [("rise", self.rise), ("fall", self.fall)] {
            if !(g > 0.0 && g <= 1.0) {
                return Err(RiskError::Smoothing(name, g));
            }
        }
        Ok(())
    }

    pub fn max_gamma(&self) -> f64 {
        self.rise.max(self.fall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskParams {
    pub alpha: f64,
    pub kappa: f64,
    pub applied_alpha: f64,
    pub applied_kappa: f64,
    pub bounds: RiskBounds,
    pub smoothing: Smoothing,
}

impl RiskParams {
    pub fn new(alpha: f64, kappa: f64, bounds: RiskBounds, smoothing: Smoothing) -> Result<Self, RiskError> {
        bounds.validate()?;
        smoothing.validate()?;
        if !(bounds.alpha_min..=bounds.alpha_max).contains(&alpha) {
            return Err(RiskError::Initial { name: "alpha", value: alpha, min: bounds.alpha_min, max: bounds.alpha_max });
        }
        if !(bounds.kappa_min..=bounds.kappa_max).contains(&kappa) {
            return Err(RiskError::Initial { name: "kappa", value: kappa, min: bounds.kappa_min, max: bounds.kappa_max });
        }
        Ok(Self { alpha, kappa, applied_alpha: alpha, applied_kappa: kappa, bounds, smoothing })
    }

    pub fn applied(&self) -> (f64, f64) {
        (self.applied_alpha, self.applied_kappa)
    }
}

fn default_lambda_h() -> f64 {
    0.1
}
fn default_lambda_s() -> f64 {
    10.0
}
fn default_lr() -> f64 {
    0.05
}
fn default_clip() -> f64 {
    1.0
}
fn default_period() -> usize {
    10
}
fn default_floor() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    #[serde(default = "default_lambda_h")]
    pub lambda_h: f64,
    #[serde(default = "default_lambda_s")]
    pub lambda_s: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default = "default_floor")]
    pub psi_floor: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            lambda_h: default_lambda_h(),
            lambda_s: default_lambda_s(),
            learning_rate: default_lr(),
            clip: default_clip(),
            period: default_period(),
            psi_floor: default_floor(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), RiskError> {
        if self.period == 0 {
            return Err(RiskError::Config("period K must be at least 1".into()));
        }
        if !(self.lambda_h >= 0.0 && self.lambda_s >= 0.0) {
            return Err(RiskError::Config("loss weights must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0 && self.clip > 0.0 && self.psi_floor > 0.0) {
            return Err(RiskError::Config("learning_rate, clip and psi_floor must be positive".into()));
        }
        Ok(())
    }
}

/// `max(0, −margin)`.
pub fn safe_hinge(margin: f64) -> f64 {
    (-margin).max(0.0)
}

/// `Ψ(h) = −log max(h, floor)`.
pub fn barrier_penalty(h: f64, floor: f64) -> f64 {
    -h.max(floor).ln()
}

/// One control step as seen by the meta-learner.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaSample {
    /// `u* − u_ref`.
    pub tracking: DVector<f64>,
    /// `(∂u*/∂α, ∂u*/∂κ)`; `None` when the QP was slack-active or degenerate.
    pub du_dtheta: Option<(DVector<f64>, DVector<f64>)>,
    /// Hard composite value at the step.
    pub h: f64,
    /// Realized hard composite value after the step.
    pub h_next: f64,
    /// `L_G h_c`.
    pub input_row: DVector<f64>,
    pub sigma_h: f64,
    pub dt: f64,
}

impl MetaSample {
    pub fn violating(&self) -> bool {
        self.h_next < 0.0
    }
}

/// Mean of `‖u*−u_ref‖² + λ_h Ψ(h⁺) + λ_s max(0, −h⁺/Δt)` over the window.
pub fn meta_loss(window: &[MetaSample], cfg: &MetaConfig) -> f64 {
    if window.is_empty() {
        return 0.0;
    }
    let total: f64 = window
        .iter()
        .map(|s| {
            s.tracking.norm_squared()
                + cfg.lambda_h * barrier_penalty(s.h_next, cfg.psi_floor)
                + cfg.lambda_s * safe_hinge(s.h_next / s.dt)
        })
        .sum();
    total / window.len() as f64
}

/// `∂L/∂(α, κ)` of one sample.
pub fn sample_gradient(s: &MetaSample, cfg: &MetaConfig) -> [f64; 2] {
    let Some((da, dk)) = &s.du_dtheta else {
        // Slack-active steps: closed-form hinge subgradients through b.
        return if s.violating() { [cfg.lambda_s * s.h, -cfg.lambda_s * s.sigma_h] } else { [0.0, 0.0] };
    };
    let mut g = [0.0; 2];
    for (k, du) in [da, dk].into_iter().enumerate() {
        let dh_next = s.dt * s.input_row.dot(du);
        let mut v = 2.0 * s.tracking.dot(du);
        if s.h_next > cfg.psi_floor {
            v -= cfg.lambda_h * dh_next / s.h_next;
        }
        if s.violating() {
            v -= cfg.lambda_s * dh_next / s.dt;
        }
        g[k] = v;
    }
    g
}

/// Rescale `grad` onto the ball of radius `c` when it lies outside.
pub fn clip_norm(grad: [f64; 2], c: f64) -> [f64; 2] {
    let n = grad[0].hypot(grad[1]);
    if n > c {
        [grad[0] * c / n, grad[1] * c / n]
    } else {
        grad
    }
}

/// `θ ← Π(θ − β clip(∇L, c))` on the raw parameters.
pub fn meta_update(params: &RiskParams, grad: [f64; 2], cfg: &MetaConfig) -> RiskParams {
    let g = clip_norm(grad, cfg.clip);
    let (alpha, kappa) = params.bounds.clamp(params.alpha - cfg.learning_rate * g[0], params.kappa - cfg.learning_rate * g[1]);
    RiskParams { alpha, kappa, ..*params }
}

fn smooth(prev: f64, raw: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * prev + gamma * raw
}

/// Move the applied parameters one smoothing step toward the raw ones.
pub fn smooth_apply(params: &mut RiskParams) -> (f64, f64) {
    let s = params.smoothing;
    let ga = if params.alpha < params.applied_alpha { s.rise } else { s.fall };
    let gk = if params.kappa > params.applied_kappa { s.rise } else { s.fall };
    let (a, k) = params.bounds.clamp(smooth(params.applied_alpha, params.alpha, ga), smooth(params.applied_kappa, params.kappa, gk));
    params.applied_alpha = a;
    params.applied_kappa = k;
    (a, k)
}

/// Windowed meta-learner owned by one controller.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaAdapter {
    pub params: RiskParams,
    pub cfg: MetaConfig,
    pub enabled: bool,
    window: Vec<MetaSample>,
    steps: usize,
    /// Loss of the most recent update window.
    pub last_loss: Option<f64>,
}

impl MetaAdapter {
    pub fn new(params: RiskParams, cfg: MetaConfig, enabled: bool) -> Result<Self, RiskError> {
        cfg.validate()?;
        Ok(Self { params, cfg, enabled, window: Vec::with_capacity(cfg.period), steps: 0, last_loss: None })
    }

    pub fn applied(&self) -> (f64, f64) {
        self.params.applied()
    }

    /// Replace the raw targets, e.g. from the semantic encoder.
    pub fn set_targets(&mut self, alpha: f64, kappa: f64) {
        let (a, k) = self.params.bounds.clamp(alpha, kappa);
        self.params.alpha = a;
        self.params.kappa = k;
    }

    /// Close one control step: record, update every `K` steps, then smooth.
    pub fn step(&mut self, sample: Option<MetaSample>) -> (f64, f64) {
        if self.enabled {
            if let Some(s) = sample {
                self.window.push(s);
            }
            self.steps += 1;
            if self.steps.is_multiple_of(self.cfg.period) && !self.window.is_empty() {
                let n = self.window.len() as f64;
                let mut g = [0.0; 2];
                for s in &self.window {
                    let gs = sample_gradient(s, &self.cfg);
                    g[0] += gs[0] / n;
                    g[1] += gs[1] / n;
                }
                self.last_loss = Some(meta_loss(&self.window, &self.cfg));
                self.params = meta_update(&self.params, g, &self.cfg);
                self.window.clear();
            }
        }
        smooth_apply(&mut self.params)
    }
}
