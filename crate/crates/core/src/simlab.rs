//! Scenarios, episode execution, disturbances, metrics and sweeps.
//!
//! An episode runs the loop
//! context → statistics → rows → QP → meta/smoothing → Euler–Maruyama step
//! for `horizon` steps. The controller sees a nominal plant (drift scale 1)
//! and the covariance reported by the true plant's schedule, while the true
//! plant additionally experiences mode-segment drift changes and
//! disturbance events.

use std::io::Write;
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::barriers::{Barrier, BarrierError, CompositeBarrier};
use crate::diffgrad::{kkt_differentiate, Theta};
use crate::riskadapt::{MetaAdapter, MetaConfig, MetaSample, RiskBounds, RiskError, RiskParams, Smoothing};
use crate::safety_qp::{FilterConfig, QPSolution, QpError, QpSolver, QpStatus, RiskPair, SlackPolicy};
use crate::semantic::{arbitrate, encode_context, ArbitrationConfig, ContextDescriptor, Directive, EncoderWeights, SemanticError};
use crate::statespace::{fuse_covariance, step_em, Covariance, CovarianceSchedule, ModeSegment, ModelError, PlantModel, PlantSpec, RngStream, State};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("override `{key}`: {reason}")]
    Override { key: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error("scenario parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SimError {
    /// Whether the error stems from user configuration rather than execution.
    pub fn is_config(&self) -> bool {
        matches!(self, SimError::Config { .. } | SimError::Override { .. } | SimError::Json(_) | SimError::Semantic(_) | SimError::Risk(_) | SimError::Barrier(_))
            || matches!(self, SimError::Model(ModelError::Config(_)))
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> SimError {
    SimError::Config { field: field.into(), reason: reason.into() }
}

/// Controller variant under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Itô and variance terms, meta-adaptation and context targets.
    #[default]
    Full,
    /// Classical CBF: `κ = 0`, no Itô term, no adaptation.
    DetCbf,
    /// Deterministic rows inflated by a fixed margin.
    RobustMargin,
    /// Parameters frozen at their initial values.
    NoMeta,
    /// Adaptation kept, Itô and `σ_h` dropped.
    NoStochastic,
    /// Configured `(α, κ)` only, ignoring context and adaptation.
    FixedParams,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Full, Variant::DetCbf, Variant::RobustMargin, Variant::NoMeta, Variant::NoStochastic, Variant::FixedParams];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DetCbf => "det_cbf",
            Variant::RobustMargin => "robust_margin",
            Variant::NoMeta => "no_meta",
            Variant::NoStochastic => "no_stochastic",
            Variant::FixedParams => "fixed_params",
        }
    }

    fn adapts(self) -> bool {
        matches!(self, Variant::Full | Variant::NoStochastic)
    }

    fn stochastic(self) -> bool {
        matches!(self, Variant::Full | Variant::NoMeta | Variant::FixedParams)
    }

    fn uses_context(self) -> bool {
        !matches!(self, Variant::FixedParams | Variant::DetCbf)
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected one of {})", Variant::ALL.map(Variant::name).join(", ")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseStep {
    pub t: f64,
    pub scale: f64,
}

/// Piecewise-constant noise scale `s(t)` multiplying `Σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub steps: Vec<NoiseStep>,
    /// Extra factor on the epistemic part only.
    #[serde(default = "one")]
    pub epistemic_factor: f64,
    /// Extra factor on the aleatoric part only.
    #[serde(default = "one")]
    pub aleatoric_factor: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { scale: 1.0, steps: Vec::new(), epistemic_factor: 1.0, aleatoric_factor: 1.0 }
    }
}

impl NoiseSchedule {
    pub fn scale_at(&self, t: f64) -> f64 {
        self.steps.iter().rfind(|s| s.t <= t).map_or(self.scale, |s| s.scale)
    }

    /// `(s_epi, s_ale)` at `t`.
    pub fn at(&self, t: f64) -> (f64, f64) {
        let s = self.scale_at(t);
        (s * self.epistemic_factor, s * self.aleatoric_factor)
    }
}

/// Scheduled disturbance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Disturbance {
    /// Adds `impulse / mass` to the velocity states, or to the positions of
    /// plants without velocity states.
    Push {
        t: f64,
        impulse: Vec<f64>,
        #[serde(default = "one")]
        mass: f64,
        #[serde(default)]
        indices: Option<Vec<usize>>,
    },
    /// Scales the true drift and inflates `Σ` over `[t, t + duration)`.
    FrictionCollapse { t: f64, duration: f64, drift_scale: f64, sigma_scale: f64 },
    /// Freezes the controller's state estimate over `[t, t + duration)`.
    SensorDropout { t: f64, duration: f64 },
}

impl Disturbance {
    pub fn start(&self) -> f64 {
        match self {
            Disturbance::Push { t, .. } | Disturbance::FrictionCollapse { t, .. } | Disturbance::SensorDropout { t, .. } => *t,
        }
    }

    /// Time at which recovery is measured from.
    pub fn end(&self) -> f64 {
        match self {
            Disturbance::Push { t, .. } => *t,
            Disturbance::FrictionCollapse { t, duration, .. } | Disturbance::SensorDropout { t, duration } => t + duration,
        }
    }
}

/// Apply every push scheduled for step `k` to the true state.
pub fn inject_disturbance(events: &[Disturbance], plant: &PlantModel, k: usize, dt: f64, xi: &mut State) {
    for ev in events {
        if let Disturbance::Push { t, impulse, mass, indices } = ev {
            if step_index(*t, dt) != k {
                continue;
            }
            let idx: Vec<usize> = match indices {
                Some(i) => i.clone(),
                None if !plant.velocity_indices().is_empty() => plant.velocity_indices().to_vec(),
                None => plant.position_indices().to_vec(),
            };
            for (&i, &j) in idx.iter().zip(impulse) {
                xi[i] += j / mass;
            }
        }
    }
}

/// Whether a sensor dropout covers step `k`.
pub fn dropout_active(events: &[Disturbance], k: usize, dt: f64) -> bool {
    events.iter().any(|ev| match ev {
        Disturbance::SensorDropout { t, duration } => {
            let s = step_index(*t, dt);
            k >= s && k < s + step_index(*duration, dt).max(1)
        }
        _ => false,
    })
}

fn step_index(t: f64, dt: f64) -> usize {
    (t / dt).round().max(0.0) as usize
}

/// Position reference `r(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    Constant { value: Vec<f64> },
    Step { before: Vec<f64>, after: Vec<f64>, t: f64 },
    Sinusoid { offset: Vec<f64>, amplitude: Vec<f64>, period: f64 },
}

impl Trajectory {
    fn dim(&self) -> usize {
        match self {
            Trajectory::Constant { value } => value.len(),
            Trajectory::Step { before, .. } => before.len(),
            Trajectory::Sinusoid { offset, .. } => offset.len(),
        }
    }

    /// `(r(t), ṙ(t))`.
    pub fn at(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        match self {
            Trajectory::Constant { value } => (value.clone(), vec![0.0; value.len()]),
            Trajectory::Step { before, after, t: ts } => (if t < *ts { before.clone() } else { after.clone() }, vec![0.0; before.len()]),
            Trajectory::Sinusoid { offset, amplitude, period } => {
                let w = std::f64::consts::TAU / period;
                let r = offset.iter().zip(amplitude).map(|(o, a)| o + a * (w * t).sin()).collect();
                let v = amplitude.iter().map(|a| a * w * (w * t).cos()).collect();
                (r, v)
            }
        }
    }
}

/// Nominal tracking controller `u_ref = k_p (r − p) + k_d (ṙ − v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub trajectory: Trajectory,
    #[serde(default = "one")]
    pub kp: f64,
    #[serde(default)]
    pub kd: f64,
    /// Add `ṙ` and cancel the nominal drift on directly actuated positions.
    #[serde(default)]
    pub feedforward: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextPhase {
    pub t_start: f64,
    pub context: ContextDescriptor,
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub kappa: f64,
    #[serde(default)]
    pub bounds: RiskBounds,
    #[serde(default)]
    pub smoothing: Smoothing,
    /// Take `(α, κ)` targets from the context encoder at each phase.
    #[serde(default)]
    pub from_context: bool,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self { alpha: 1.0, kappa: 1.0, bounds: RiskBounds::default(), smoothing: Smoothing::default(), from_context: false }
    }
}

fn default_epsilon() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Targets {
    /// Tolerated per-episode violation probability.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for Targets {
    fn default() -> Self {
        Self { epsilon: default_epsilon() }
    }
}

fn default_window() -> usize {
    50
}
fn default_tracking_floor() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Settling window `W` in steps.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Lower bound on the settling tracking threshold.
    #[serde(default = "default_tracking_floor")]
    pub tracking_floor: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { window: default_window(), tracking_floor: default_tracking_floor() }
    }
}

fn default_beta() -> f64 {
    10.0
}
fn default_dt() -> f64 {
    0.01
}
fn default_robust_margin() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub plant: PlantSpec,
    #[serde(default)]
    pub covariance: CovarianceSchedule,
    #[serde(default)]
    pub segments: Vec<ModeSegment>,
    pub barriers: Vec<Barrier>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub context: Vec<ContextPhase>,
    #[serde(default)]
    pub encoder: EncoderWeights,
    #[serde(default)]
    pub arbitration: ArbitrationConfig,
    #[serde(default)]
    pub noise: NoiseSchedule,
    #[serde(default)]
    pub disturbances: Vec<Disturbance>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub horizon: usize,
    pub initial: Vec<f64>,
    #[serde(default)]
    pub variant: Variant,
    /// Row inflation used by the `robust_margin` variant.
    #[serde(default = "default_robust_margin")]
    pub robust_margin: f64,
    #[serde(default)]
    pub targets: Targets,
    #[serde(default)]
    pub risk: RiskConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    pub reference: Reference,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let scn: Scenario = serde_json::from_str(text)?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err("schema_version", format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(config_err("dt", format!("must be positive, got {}", self.dt)));
        }
        if self.horizon == 0 {
            return Err(config_err("horizon", "must be at least one step"));
        }
        let plant = PlantModel::from_spec(&self.plant)?;
        plant.clone().with_covariance(self.covariance.clone())?;
        let n = plant.state_dim();
        if self.initial.len() != n {
            return Err(config_err("initial", format!("has {} entries, plant state dimension is {n}", self.initial.len())));
        }
        if self.barriers.is_empty() || !self.barriers.iter().any(Barrier::is_hard) {
            return Err(config_err("barriers", "at least one hard_physical barrier is required"));
        }
        for (i, b) in self.barriers.iter().enumerate() {
            b.validate(n).map_err(|e| config_err(&format!("barriers[{i}]"), e.to_string()))?;
        }
        if !(self.beta > 0.0) {
            return Err(config_err("beta", format!("must be positive, got {}", self.beta)));
        }
        let t_end = self.horizon as f64 * self.dt;
        for (i, seg) in self.segments.iter().enumerate() {
            if !(0.0..=t_end).contains(&seg.t_start) {
                return Err(config_err(&format!("segments[{i}].t_start"), format!("must lie in [0, {t_end}]")));
            }
        }
        if !(self.noise.scale >= 0.0) || self.noise.steps.iter().any(|s| !(s.scale >= 0.0) || !(0.0..=t_end).contains(&s.t)) {
            return Err(config_err("noise", format!("scales must be non-negative and step times within [0, {t_end}]")));
        }
        if !(self.noise.epistemic_factor >= 0.0 && self.noise.aleatoric_factor >= 0.0) {
            return Err(config_err("noise", "factors must be non-negative"));
        }
        for (i, ev) in self.disturbances.iter().enumerate() {
            let field = format!("disturbances[{i}]");
            if !(0.0..=t_end).contains(&ev.start()) {
                return Err(config_err(&field, format!("start time must lie in [0, {t_end}]")));
            }
            match ev {
                Disturbance::Push { impulse, mass, indices, .. } => {
                    if !(*mass > 0.0) {
                        return Err(config_err(&field, "mass must be positive"));
                    }
                    if let Some(idx) = indices {
                        if idx.iter().any(|&i| i >= n) || idx.len() != impulse.len() {
                            return Err(config_err(&field, "indices must be in range and match the impulse length"));
                        }
                    }
                }
                Disturbance::FrictionCollapse { duration, drift_scale, sigma_scale, .. } => {
                    if !(*duration > 0.0 && *drift_scale >= 0.0 && *sigma_scale >= 0.0) {
                        return Err(config_err(&field, "duration must be positive and scales non-negative"));
                    }
                }
                Disturbance::SensorDropout { duration, .. } => {
                    if !(*duration > 0.0) {
                        return Err(config_err(&field, "duration must be positive"));
                    }
                }
            }
        }
        if self.context.windows(2).any(|w| w[1].t_start < w[0].t_start) {
            return Err(config_err("context", "phases must be ordered by t_start"));
        }
        for (i, ph) in self.context.iter().enumerate() {
            ph.context.validate().map_err(|e| config_err(&format!("context[{i}]"), e.to_string()))?;
        }
        if self.reference.trajectory.dim() != plant.position_indices().len() {
            return Err(config_err("reference.trajectory", format!("needs {} entries per point", plant.position_indices().len())));
        }
        RiskParams::new(self.risk.alpha, self.risk.kappa, self.risk.bounds, self.risk.smoothing)?;
        self.meta.validate()?;
        if !(self.targets.epsilon > 0.0 && self.targets.epsilon < 1.0) {
            return Err(config_err("targets.epsilon", "must lie in (0, 1)"));
        }
        if self.metrics.window == 0 {
            return Err(config_err("metrics.window", "must be at least one step"));
        }
        let m = plant.control_dim();
        for (name, v) in [("filter.u_min", &self.filter.u_min), ("filter.u_max", &self.filter.u_max), ("filter.r_weights", &self.filter.r_weights)] {
            if v.as_ref().is_some_and(|v| v.len() != m) {
                return Err(config_err(name, format!("needs {m} entries")));
            }
        }
        if self.filter.q_weights.as_ref().is_some_and(|v| v.len() != n) {
            return Err(config_err("filter.q_weights", format!("needs {n} entries")));
        }
        Ok(())
    }

    /// Times of scheduled regime changes after `t = 0`.
    pub fn transitions(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self
            .segments
            .iter()
            .map(|s| s.t_start)
            .chain(self.noise.steps.iter().map(|s| s.t))
            .chain(self.context.iter().map(|c| c.t_start))
            .filter(|&t| t > 0.0)
            .collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    fn nominal_plant(&self) -> Result<PlantModel, SimError> {
        let segs = self.segments.iter().map(|s| ModeSegment { drift_scale: 1.0, ..s.clone() }).collect();
        Ok(PlantModel::from_spec(&self.plant)?.with_covariance(self.covariance.clone())?.with_segments(segs)?)
    }

    /// True plant: scenario segments with friction-collapse windows folded in.
    fn true_plant(&self) -> Result<PlantModel, SimError> {
        let windows: Vec<(f64, f64, f64, f64)> = self
            .disturbances
            .iter()
            .filter_map(|d| match d {
                Disturbance::FrictionCollapse { t, duration, drift_scale, sigma_scale } => Some((*t, t + duration, *drift_scale, *sigma_scale)),
                _ => None,
            })
            .collect();
        let base = PlantModel::from_spec(&self.plant)?.with_covariance(self.covariance.clone())?.with_segments(self.segments.clone())?;
        if windows.is_empty() {
            return Ok(base);
        }
        let mut cuts: Vec<f64> = std::iter::once(0.0)
            .chain(self.segments.iter().map(|s| s.t_start))
            .chain(windows.iter().flat_map(|w| [w.0, w.1]))
            .collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let segs = cuts
            .into_iter()
            .map(|tc| {
                let mut s = ModeSegment { t_start: tc, ..base.segment_at(tc).clone() };
                for &(a, b, ds, ss) in &windows {
                    if tc >= a && tc < b {
                        s.drift_scale *= ds;
                        s.epistemic_scale *= ss;
                        s.aleatoric_scale *= ss;
                    }
                }
                s
            })
            .collect();
        Ok(base.with_segments(segs)?)
    }

    fn filter_config(&self) -> FilterConfig {
        let mut cfg = self.filter.clone();
        if !self.variant.stochastic() {
            cfg.ito = false;
            cfg.variance = false;
        }
        if self.variant == Variant::RobustMargin {
            cfg.margin += self.robust_margin;
        }
        cfg
    }
}

/// Parse a scenario document and apply dotted-path `key=value` overrides.
///
/// The document is normalised through the typed schema first so that
/// defaulted fields can be overridden too. A key that is not a full path
/// may name a unique path suffix, e.g. `kappa_max` for `risk.bounds.kappa_max`.
pub fn load_scenario(text: &str, overrides: &[(String, String)]) -> Result<Scenario, SimError> {
    let scn: Scenario = serde_json::from_str(text)?;
    if overrides.is_empty() {
        scn.validate()?;
        return Ok(scn);
    }
    let mut doc = serde_json::to_value(&scn)?;
    for (k, v) in overrides {
        apply_override(&mut doc, k, v)?;
    }
    let scn: Scenario = serde_json::from_value(doc)?;
    scn.validate()?;
    Ok(scn)
}

/// Split `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), SimError> {
    let (k, v) = s.split_once('=').ok_or_else(|| SimError::Override { key: s.into(), reason: "expected key=value".into() })?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn leaf_paths(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    match v {
        Value::Object(m) => {
            for (k, c) in m {
                prefix.push(k.clone());
                out.push(prefix.clone());
                leaf_paths(c, prefix, out);
                prefix.pop();
            }
        }
        Value::Array(a) => {
            for (i, c) in a.iter().enumerate() {
                prefix.push(i.to_string());
                out.push(prefix.clone());
                leaf_paths(c, prefix, out);
                prefix.pop();
            }
        }
        _ => {}
    }
}

fn lookup<'a>(doc: &'a mut Value, path: &[String]) -> Option<&'a mut Value> {
    path.iter().try_fold(doc, |cur, seg| match cur {
        Value::Object(m) => m.get_mut(seg),
        Value::Array(a) => seg.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
        _ => None,
    })
}

/// Set one dotted path in a JSON document; the value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<(), SimError> {
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if let Some(slot) = lookup(doc, &path) {
        *slot = value;
        return Ok(());
    }
    let mut all = Vec::new();
    leaf_paths(doc, &mut Vec::new(), &mut all);
    let hits: Vec<&Vec<String>> = all.iter().filter(|p| p.ends_with(&path)).collect();
    match hits.as_slice() {
        [one] => {
            let full = (*one).clone();
            *lookup(doc, &full).expect("path collected from document") = value;
            Ok(())
        }
        [] => Err(SimError::Override { key: key.into(), reason: "no such field in the scenario".into() }),
        many => Err(SimError::Override {
            key: key.into(),
            reason: format!("ambiguous, matches {}", many.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")),
        }),
    }
}

/// One control step of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    /// True state at `t`.
    pub state: Vec<f64>,
    pub reference: Vec<f64>,
    pub u_ref: Vec<f64>,
    pub u_star: Vec<f64>,
    /// Hard composite at the true state.
    pub h_c: f64,
    /// Every arbitrated member at the true state.
    pub h_members: Vec<f64>,
    pub sigma_h: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub raw_alpha: f64,
    pub raw_kappa: f64,
    pub slack: f64,
    pub iters: usize,
    pub status: QpStatus,
    pub violation: bool,
    /// Any soft semantic member negative.
    pub soft_violation: bool,
    pub tracking_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub dt: f64,
    pub variant: Variant,
    pub records: Vec<StepRecord>,
}

struct Controller {
    composite: CompositeBarrier,
    hard: CompositeBarrier,
    policies: Vec<SlackPolicy>,
    dynamic: bool,
}

fn build_controller(scn: &Scenario, phase: Option<&ContextPhase>, plant: &PlantModel, est: &State) -> Result<(Controller, Option<(f64, f64)>), SimError> {
    let (hard_in, soft_in): (Vec<Barrier>, Vec<Barrier>) = scn.barriers.iter().cloned().partition(Barrier::is_hard);
    let mut soft = soft_in;
    let mut gains = None;
    let mut dynamic = false;
    if let Some(ph) = phase {
        let out = encode_context(&ph.context, &scn.encoder, plant.position_indices(), plant.velocity_indices(), Some(est.as_slice()))?;
        soft.extend(out.region_barriers);
        gains = Some((out.alpha, out.kappa));
        dynamic = ph.context.directives.iter().any(|d| matches!(d, Directive::SlowZone { .. }));
    }
    let arb = arbitrate(&hard_in, &soft, scn.beta, &scn.arbitration)?;
    let hard_members: Vec<Barrier> = arb.composite.members().iter().zip(&arb.policies).filter(|(_, p)| matches!(p, SlackPolicy::Hard)).map(|(b, _)| b.clone()).collect();
    let hard = CompositeBarrier::new(hard_members, scn.beta)?;
    Ok((Controller { composite: arb.composite, hard, policies: arb.policies, dynamic }, gains))
}

fn reference_control(scn: &Scenario, plant: &PlantModel, xi: &State, t: f64) -> Result<(Vec<f64>, DVector<f64>), SimError> {
    let (r, rdot) = scn.reference.trajectory.at(t);
    let pos = plant.position_indices();
    let vel = plant.velocity_indices();
    let m = plant.control_dim();
    let mut u = DVector::zeros(m);
    for c in 0..m.min(pos.len()) {
        let mut v = scn.reference.kp * (r[c] - xi[pos[c]]);
        if let Some(&vi) = vel.get(c) {
            v += scn.reference.kd * (rdot[c] - xi[vi]);
        }
        u[c] = v;
    }
    if scn.reference.feedforward && vel.is_empty() {
        let (f, g) = crate::statespace::eval_dynamics(plant, xi, t)?;
        for c in 0..m.min(pos.len()) {
            if g[(pos[c], c)] != 0.0 {
                u[c] += (rdot[c] - f[pos[c]]) / g[(pos[c], c)];
            }
        }
    }
    Ok((r, u))
}

fn fused(plant: &PlantModel, xi: &State, t: f64, scales: (f64, f64)) -> Result<Covariance, SimError> {
    let (epi, ale) = plant.covariance_at(xi, t);
    let sch = plant.covariance_schedule();
    Ok(fuse_covariance(&epi.scaled(scales.0), &ale.scaled(scales.1), sch.floor, sch.ceiling)?)
}

/// Run one seeded episode. Max-iteration QP exits are logged in the trace
/// and the returned iterate is applied.
pub fn run_episode(scn: &Scenario, seed: u64) -> Result<EpisodeTrace, SimError> {
    let nominal = scn.nominal_plant()?;
    let truth = scn.true_plant()?;
    let cfg = scn.filter_config();
    let dt = scn.dt;
    let mut rng = RngStream::new(seed, 0);
    let mut solver = QpSolver::new();
    let mut xi = DVector::from_column_slice(&scn.initial);
    let mut held: Option<State> = None;
    let mut warm: Option<QPSolution> = None;

    let phase_at = |t: f64| scn.context.iter().rposition(|c| c.t_start <= t);
    let mut phase_idx = phase_at(0.0);
    let (mut ctl, gains) = build_controller(scn, phase_idx.map(|i| &scn.context[i]), &nominal, &xi)?;

    let (mut a0, mut k0) = (scn.risk.alpha, scn.risk.kappa);
    if scn.risk.from_context && scn.variant.uses_context() {
        if let Some((a, k)) = gains {
            (a0, k0) = scn.risk.bounds.clamp(a, k);
        }
    }
    let params = RiskParams::new(a0, k0, scn.risk.bounds, scn.risk.smoothing)?;
    let mut adapter = MetaAdapter::new(params, scn.meta, scn.variant.adapts())?;

    let mut records = Vec::with_capacity(scn.horizon);
    for k in 0..scn.horizon {
        let t = k as f64 * dt;
        inject_disturbance(&scn.disturbances, &truth, k, dt, &mut xi);
        let est = if dropout_active(&scn.disturbances, k, dt) {
            held.get_or_insert_with(|| xi.clone()).clone()
        } else {
            held = None;
            xi.clone()
        };

        let cur = phase_at(t);
        if cur != phase_idx || ctl.dynamic {
            let (c, g) = build_controller(scn, cur.map(|i| &scn.context[i]), &nominal, &est)?;
            ctl = c;
            if cur != phase_idx && scn.risk.from_context && scn.variant == Variant::Full {
                if let Some((a, kk)) = g {
                    adapter.set_targets(a, kk);
                }
            }
            phase_idx = cur;
            warm = None;
        }

        let scales = scn.noise.at(t);
        let sigma_ctl = fused(&truth, &est, t, scales)?;
        let (r, u_ref) = reference_control(scn, &nominal, &est, t)?;
        let (alpha, kappa) = adapter.applied();
        let kappa_used = if scn.variant == Variant::DetCbf { 0.0 } else { kappa };
        let step = crate::safety_qp::solve_filter_step(
            &nominal,
            &ctl.composite,
            &ctl.policies,
            &est,
            t,
            &sigma_ctl,
            RiskPair { alpha, kappa: kappa_used },
            &u_ref,
            &cfg,
            warm.as_ref(),
            &mut solver,
        )?;
        let sol = &step.solution;

        let h_true = ctl.hard.eval(&xi).h;
        let members: Vec<f64> = ctl.composite.members().iter().map(|b| crate::barriers::eval_barrier(b, &xi).h).collect();
        let soft_violation = members.iter().zip(&ctl.policies).any(|(h, p)| !matches!(p, SlackPolicy::Hard) && *h < 0.0);
        let pos = nominal.position_indices();
        let tracking_error = pos.iter().zip(&r).map(|(&i, ri)| (ri - xi[i]).powi(2)).sum::<f64>().sqrt();
        records.push(StepRecord {
            t,
            state: xi.iter().copied().collect(),
            reference: r,
            u_ref: u_ref.iter().copied().collect(),
            u_star: sol.u_star.iter().copied().collect(),
            h_c: h_true,
            h_members: members,
            sigma_h: step.hard.sigma_h,
            alpha,
            kappa: kappa_used,
            raw_alpha: adapter.params.alpha,
            raw_kappa: adapter.params.kappa,
            slack: sol.max_slack(),
            iters: sol.iterations,
            status: sol.status,
            violation: h_true < 0.0,
            soft_violation,
            tracking_error,
        });

        let sigma_true = fused(&truth, &xi, t, scales)?;
        let next = step_em(&truth, &xi, &sol.u_star, &sigma_true, t, dt, &mut rng)?;

        let sample = if adapter.enabled {
            let du = kkt_differentiate(&step.qp, sol, &[Theta::Alpha, Theta::Kappa])
                .ok()
                .map(|s| (s.du_dtheta.column(0).into_owned(), s.du_dtheta.column(1).into_owned()));
            Some(MetaSample {
                tracking: &sol.u_star - &u_ref,
                du_dtheta: du,
                h: step.hard.h,
                h_next: ctl.hard.eval(&next).h,
                input_row: step.hard.input_row.clone(),
                sigma_h: step.hard.sigma_h,
                dt,
            })
        } else {
            None
        };
        adapter.step(sample);
        warm = Some(step.solution);
        xi = next;
    }
    Ok(EpisodeTrace { seed, dt, variant: scn.variant, records })
}

/// Wilson score interval for `k` successes in `n` trials, clamped to `[0, 1]`.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    assert!(n >= 1 && k <= n, "wilson_interval needs 0 <= k <= n and n >= 1");
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

pub const Z95: f64 = 1.959963984540054;

/// Per-episode metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub steps: usize,
    pub violations: usize,
    pub svr: f64,
    pub svr_ci: (f64, f64),
    pub first_violation: Option<usize>,
    pub rmse: f64,
    /// Time average of `‖u*‖²`.
    pub energy: f64,
    /// Mean `‖u*_k − u*_{k−1}‖²` per step.
    pub jerk: f64,
    /// Longest settling time after a scheduled transition.
    pub adaptation_time: Option<f64>,
    /// Longest settling time after a disturbance.
    pub recovery_time: Option<f64>,
    pub quarter_violations: [usize; 4],
    pub quarter_steps: [usize; 4],
    pub slack_steps: usize,
    pub max_iter_steps: usize,
    pub soft_violations: usize,
    pub mean_kappa: f64,
}

fn quarter_of(k: usize, n: usize) -> usize {
    (4 * k / n).min(3)
}

fn settle_time(rec: &[StepRecord], from: usize, threshold: f64, w: usize, dt: f64) -> Option<f64> {
    let mut run = 0;
    for (k, r) in rec.iter().enumerate().skip(from) {
        if !r.violation && r.tracking_error < threshold {
            run += 1;
            if run == w {
                return Some((k + 1 - w - from) as f64 * dt);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// Longest settling time over `starts`; `None` if any start never settles
/// or there are no starts.
fn worst_settle(rec: &[StepRecord], starts: &[f64], threshold: f64, w: usize, dt: f64) -> Option<f64> {
    if starts.is_empty() {
        return None;
    }
    starts.iter().map(|&t| settle_time(rec, step_index(t, dt).min(rec.len()), threshold, w, dt)).try_fold(0.0f64, |acc, v| v.map(|v| acc.max(v)))
}

pub fn compute_metrics(trace: &EpisodeTrace, scn: &Scenario) -> Metrics {
    let rec = &trace.records;
    let n = rec.len();
    let dt = trace.dt;
    let violations = rec.iter().filter(|r| r.violation).count();
    let mut qv = [0; 4];
    let mut qs = [0; 4];
    for (k, r) in rec.iter().enumerate() {
        let q = quarter_of(k, n);
        qs[q] += 1;
        qv[q] += usize::from(r.violation);
    }
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let energy = rec.iter().map(|r| sq(&r.u_star)).sum::<f64>() / n as f64;
    let jerk = if n > 1 {
        rec.windows(2).map(|p| p[1].u_star.iter().zip(&p[0].u_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let rmse_of = |r: &[StepRecord]| (r.iter().map(|x| x.tracking_error.powi(2)).sum::<f64>() / r.len().max(1) as f64).sqrt();
    let rmse = rmse_of(rec);

    let w = scn.metrics.window;
    let transitions = scn.transitions();
    let events: Vec<f64> = scn.disturbances.iter().map(Disturbance::end).collect();
    let first_change = transitions.iter().copied().chain(scn.disturbances.iter().map(Disturbance::start)).fold(f64::INFINITY, f64::min);
    let first_step = if first_change.is_finite() { step_index(first_change, dt).min(n) } else { n };
    let nominal = if first_step > 0 { rmse_of(&rec[first_step.saturating_sub(w)..first_step]) } else { rmse };
    let threshold = (2.0 * nominal).max(scn.metrics.tracking_floor);

    Metrics {
        steps: n,
        violations,
        svr: violations as f64 / n as f64,
        svr_ci: wilson_interval(violations, n, Z95),
        first_violation: rec.iter().position(|r| r.violation),
        rmse,
        energy,
        jerk,
        adaptation_time: worst_settle(rec, &transitions, threshold, w, dt),
        recovery_time: worst_settle(rec, &events, threshold, w, dt),
        quarter_violations: qv,
        quarter_steps: qs,
        slack_steps: rec.iter().filter(|r| r.slack > 0.0).count(),
        max_iter_steps: rec.iter().filter(|r| r.status == QpStatus::MaxIter).count(),
        soft_violations: rec.iter().filter(|r| r.soft_violation).count(),
        mean_kappa: rec.iter().map(|r| r.kappa).sum::<f64>() / n as f64,
    }
}

/// Aggregate over a batch of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub variant: Variant,
    pub episodes: usize,
    pub seed0: u64,
    pub steps: usize,
    pub violations: usize,
    pub svr: f64,
    pub svr_ci: (f64, f64),
    /// Fraction of episodes with at least one violating step.
    pub episode_violation_rate: f64,
    pub episode_violation_ci: (f64, f64),
    pub epsilon: f64,
    pub rmse: f64,
    pub energy: f64,
    pub jerk: f64,
    pub adaptation_time: Option<f64>,
    pub recovery_time: Option<f64>,
    pub unsettled_episodes: usize,
    pub quarter_rates: [f64; 4],
    /// Fraction of episodes violated by the end of each quarter.
    pub accumulated_violation: [f64; 4],
    pub slack_steps: usize,
    pub max_iter_steps: usize,
    pub mean_kappa: f64,
}

pub fn aggregate(scn: &Scenario, seed0: u64, metrics: &[Metrics]) -> Report {
    let e = metrics.len().max(1);
    let ef = e as f64;
    let steps: usize = metrics.iter().map(|m| m.steps).sum();
    let violations: usize = metrics.iter().map(|m| m.violations).sum();
    let violated = metrics.iter().filter(|m| m.violations > 0).count();
    let mean = |f: &dyn Fn(&Metrics) -> f64| metrics.iter().map(f).sum::<f64>() / ef;
    let mean_opt = |f: &dyn Fn(&Metrics) -> Option<f64>| {
        let v: Vec<f64> = metrics.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut qv = [0usize; 4];
    let mut qs = [0usize; 4];
    let mut acc = [0.0; 4];
    for m in metrics {
        for q in 0..4 {
            qv[q] += m.quarter_violations[q];
            qs[q] += m.quarter_steps[q];
        }
        if let Some(f) = m.first_violation {
            for a in acc.iter_mut().skip(quarter_of(f, m.steps)) {
                *a += 1.0 / ef;
            }
        }
    }
    let has_changes = !scn.transitions().is_empty() || !scn.disturbances.is_empty();
    Report {
        scenario: scn.name.clone(),
        variant: scn.variant,
        episodes: metrics.len(),
        seed0,
        steps,
        violations,
        svr: violations as f64 / steps.max(1) as f64,
        svr_ci: wilson_interval(violations, steps.max(1), Z95),
        episode_violation_rate: violated as f64 / ef,
        episode_violation_ci: wilson_interval(violated, e, Z95),
        epsilon: scn.targets.epsilon,
        rmse: mean(&|m| m.rmse),
        energy: mean(&|m| m.energy),
        jerk: mean(&|m| m.jerk),
        adaptation_time: mean_opt(&|m| m.adaptation_time),
        recovery_time: mean_opt(&|m| m.recovery_time),
        unsettled_episodes: if has_changes { metrics.iter().filter(|m| m.adaptation_time.is_none() && m.recovery_time.is_none()).count() } else { 0 },
        quarter_rates: std::array::from_fn(|q| qv[q] as f64 / qs[q].max(1) as f64),
        accumulated_violation: acc,
        slack_steps: metrics.iter().map(|m| m.slack_steps).sum(),
        max_iter_steps: metrics.iter().map(|m| m.max_iter_steps).sum(),
        mean_kappa: mean(&|m| m.mean_kappa),
    }
}

/// Metrics of episodes with seeds `seed0, seed0 + 1, …`, in seed order.
pub fn run_metrics(scn: &Scenario, episodes: usize, seed0: u64) -> Result<Vec<Metrics>, SimError> {
    scn.validate()?;
    (0..episodes).into_par_iter().map(|i| run_episode(scn, seed0 + i as u64).map(|t| compute_metrics(&t, scn))).collect()
}

pub fn run_batch(scn: &Scenario, episodes: usize, seed0: u64) -> Result<Report, SimError> {
    Ok(aggregate(scn, seed0, &run_metrics(scn, episodes, seed0)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum SweepAxis {
    Kappa(Vec<f64>),
    Noise(Vec<f64>),
    Variant(Vec<Variant>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Kappa(_) => "kappa",
            SweepAxis::Noise(_) => "noise",
            SweepAxis::Variant(_) => "variant",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Kappa(v) | SweepAxis::Noise(v) => v.len(),
            SweepAxis::Variant(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The base scenario specialised to cell `i`, with its label.
    pub fn cell(&self, base: &Scenario, i: usize) -> (String, Scenario) {
        let mut s = base.clone();
        let label = match self {
            SweepAxis::Kappa(v) => {
                s.risk.kappa = v[i];
                s.risk.from_context = false;
                format!("kappa={}", v[i])
            }
            SweepAxis::Noise(v) => {
                s.noise.scale = v[i];
                format!("noise={}", v[i])
            }
            SweepAxis::Variant(v) => {
                s.variant = v[i];
                v[i].name().to_string()
            }
        };
        (label, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub report: Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub axis: String,
    pub episodes_per_cell: usize,
    pub seed0: u64,
    pub cells: Vec<SweepCell>,
}

/// Cell `c` uses seeds `seed0 + c·episodes + i`.
pub fn sweep(base: &Scenario, axis: &SweepAxis, episodes: usize, seed0: u64) -> Result<ReportTable, SimError> {
    if axis.is_empty() {
        return Err(config_err("sweep", "grid must not be empty"));
    }
    let cells = (0..axis.len())
        .map(|c| {
            let (label, scn) = axis.cell(base, c);
            let s0 = seed0 + (c * episodes) as u64;
            Ok(SweepCell { label, report: run_batch(&scn, episodes, s0)? })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(ReportTable { axis: axis.name().into(), episodes_per_cell: episodes, seed0, cells })
}

/// Per-step applied `κ` averaged over episodes with seeds `seed0 + i`.
pub fn mean_kappa_series(scn: &Scenario, episodes: usize, seed0: u64) -> Result<Vec<f64>, SimError> {
    let traces: Vec<Vec<f64>> = (0..episodes)
        .into_par_iter()
        .map(|i| run_episode(scn, seed0 + i as u64).map(|t| t.records.iter().map(|r| r.kappa).collect()))
        .collect::<Result<_, SimError>>()?;
    Ok((0..scn.horizon).map(|k| traces.iter().map(|t| t[k]).sum::<f64>() / episodes.max(1) as f64).collect())
}

/// Rise and fall times of a step response.
///
/// With `κ_0` the value at `t_up` and `κ_1` the value at `t_down`, the rise
/// time is the delay after `t_up` until the series reaches
/// `κ_0 + 0.9 (κ_1 − κ_0)`, and the fall time is the delay after `t_down`
/// until it drops to `κ_0 + 0.1 (κ_1 − κ_0)`. `None` means never reached.
pub fn rise_fall_times(series: &[f64], dt: f64, t_up: f64, t_down: f64) -> (Option<f64>, Option<f64>) {
    let (ku, kd) = (step_index(t_up, dt).min(series.len() - 1), step_index(t_down, dt).min(series.len() - 1));
    let (k0, k1) = (series[ku], series[kd]);
    let hi = k0 + 0.9 * (k1 - k0);
    let lo = k0 + 0.1 * (k1 - k0);
    let rise = series[ku..=kd].iter().position(|&v| v >= hi).map(|i| i as f64 * dt);
    let fall = series[kd..].iter().position(|&v| v <= lo).map(|i| i as f64 * dt);
    (rise, fall)
}

/// CSV with columns `t, x…, u_ref…, u_star…, h_c, sigma_h, alpha, kappa, slack, iters, violation`.
pub fn write_trace_csv<W: Write>(trace: &EpisodeTrace, out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = trace.records.first() else {
        w.flush()?;
        return Ok(());
    };
    let mut header = vec!["t".to_string()];
    header.extend((0..first.state.len()).map(|i| format!("x{i}")));
    header.extend((0..first.u_ref.len()).map(|i| format!("u_ref{i}")));
    header.extend((0..first.u_star.len()).map(|i| format!("u_star{i}")));
    header.extend(["h_c", "sigma_h", "alpha", "kappa", "slack", "iters", "violation"].map(String::from));
    w.write_record(&header)?;
    for r in &trace.records {
        let mut row = vec![r.t.to_string()];
        row.extend(r.state.iter().chain(&r.u_ref).chain(&r.u_star).map(f64::to_string));
        row.extend([r.h_c, r.sigma_h, r.alpha, r.kappa, r.slack].map(|v| v.to_string()));
        row.push(r.iters.to_string());
        row.push(u8::from(r.violation).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
