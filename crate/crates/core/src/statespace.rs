//! Plant models, covariance fusion and Euler–Maruyama stepping.
//!
//! Every plant shipped here is control-affine with a constant input matrix,
//! `dξ = (F(ξ) + G u) dt + Σ^{1/2} dW`, so [`PlantModel`] stores the drift as an
//! affine map `F(ξ) = A ξ + c`. Mode switching is represented by piecewise
//! [`ModeSegment`]s that rescale drift and covariance from a switch time on.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type State = DVector<f64>;
pub type Control = DVector<f64>;

/// Symmetry tolerance applied to covariance inputs.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("state dimension {got} does not match plant dimension {expected}")]
    StateDim { expected: usize, got: usize },
    #[error("control dimension {got} does not match plant input dimension {expected}")]
    ControlDim { expected: usize, got: usize },
    #[error("covariance dimension mismatch: {0} vs {1}")]
    CovarianceDim(usize, usize),
    #[error("covariance is not symmetric (asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("covariance square root failed: matrix is not positive semidefinite")]
    NotPsd,
    #[error("time step must be positive, got {0}")]
    TimeStep(f64),
    #[error("invalid plant configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Epistemic,
    Aleatoric,
    Fused,
}

/// Symmetric covariance matrix tagged with its uncertainty source.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    matrix: DMatrix<f64>,
    kind: CovarianceKind,
}

impl Covariance {
    pub fn new(matrix: DMatrix<f64>, kind: CovarianceKind) -> Result<Self, ModelError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(ModelError::CovarianceDim(matrix.nrows(), matrix.ncols()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("covariance"));
        }
        let asym = (&matrix - matrix.transpose()).amax();
        let scale = matrix.amax().max(1.0);
        if asym > SYMMETRY_TOL * scale {
            return Err(ModelError::Asymmetric(asym));
        }
        // Remove sub-tolerance asymmetry so downstream factorizations see an exact symmetric matrix.
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        Ok(Self { matrix, kind })
    }

    pub fn zeros(dim: usize, kind: CovarianceKind) -> Self {
        Self { matrix: DMatrix::zeros(dim, dim), kind }
    }

    pub fn diagonal(diag: &[f64], kind: CovarianceKind) -> Self {
        Self { matrix: DMatrix::from_diagonal(&DVector::from_column_slice(diag)), kind }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { matrix: &self.matrix * s, kind: self.kind }
    }

    pub fn is_zero(&self) -> bool {
        self.matrix.iter().all(|&v| v == 0.0)
    }

    fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| i == j || self.matrix[(i, j)] == 0.0))
    }

    /// Lower factor `L` with `L Lᵀ = Σ`.
    ///
    /// Diagonal matrices take an exact square-root path. Otherwise Cholesky is
    /// attempted, retrying with a small diagonal jitter when the matrix is
    /// PSD but singular.
    pub fn sqrt_factor(&self) -> Result<DMatrix<f64>, ModelError> {
        let n = self.dim();
        if self.is_diagonal() {
            let mut l = DMatrix::zeros(n, n);
            for i in 0..n {
                let v = self.matrix[(i, i)];
                if v < 0.0 {
                    return Err(ModelError::NotPsd);
                }
                l[(i, i)] = v.sqrt();
            }
            return Ok(l);
        }
        if let Some(ch) = self.matrix.clone().cholesky() {
            return Ok(ch.l());
        }
        let jitter = (1e-12 * self.matrix.trace().abs()).max(1e-14);
        let shifted = &self.matrix + DMatrix::identity(n, n) * jitter;
        shifted.cholesky().map(|c| c.l()).ok_or(ModelError::NotPsd)
    }
}

/// Fuse epistemic and aleatoric covariance and clip the spectrum to
/// `[floor, ceiling]`.
pub fn fuse_covariance(
    epi: &Covariance,
    ale: &Covariance,
    floor: f64,
    ceiling: f64,
) -> Result<Covariance, ModelError> {
    if epi.dim() != ale.dim() {
        return Err(ModelError::CovarianceDim(epi.dim(), ale.dim()));
    }
    let sum = &epi.matrix + &ale.matrix;
    let n = sum.nrows();
    let is_diag = (0..n).all(|i| (0..n).all(|j| i == j || sum[(i, j)] == 0.0));
    let fused = if is_diag {
        // Eigenvectors of a diagonal matrix are the axes; clamp in place and keep exact zeros.
        let mut m = sum;
        for i in 0..n {
            m[(i, i)] = m[(i, i)].clamp(floor, ceiling);
        }
        m
    } else {
        let eig = SymmetricEigen::new((&sum + sum.transpose()) * 0.5);
        let clamped = eig.eigenvalues.map(|l| l.clamp(floor, ceiling));
        let v = &eig.eigenvectors;
        let m = v * DMatrix::from_diagonal(&clamped) * v.transpose();
        (&m + m.transpose()) * 0.5
    };
    Ok(Covariance { matrix: fused, kind: CovarianceKind::Fused })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantId {
    ScalarIntegrator,
    PlanarDoubleIntegrator,
    Synthetic12,
}

/// Plant description as it appears in a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    /// `ẋ = gain·x + bias + u`.
    ScalarIntegrator {
        #[serde(default)]
        drift_gain: f64,
        #[serde(default)]
        drift_bias: f64,
    },
    /// State `(px, py, vx, vy)`, control accelerations, optional viscous damping.
    PlanarDoubleIntegrator {
        #[serde(default)]
        damping: f64,
    },
    /// 12 generalized coordinates with stiffness/damping, 24 states, 12 inputs.
    Synthetic12 {
        #[serde(default = "default_synthetic_seed")]
        seed: u64,
    },
}

fn default_synthetic_seed() -> u64 {
    0x5EED_0012
}

/// Piecewise-constant contact-mode segment starting at `t_start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSegment {
    pub t_start: f64,
    #[serde(default = "one")]
    pub epistemic_scale: f64,
    #[serde(default = "one")]
    pub aleatoric_scale: f64,
    #[serde(default = "one")]
    pub drift_scale: f64,
}

fn one() -> f64 {
    1.0
}

/// Diagonal covariance model: `Σ_ii = base_i + state_gain_i · ξ_i²`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagonalModel {
    #[serde(default)]
    pub base: Vec<f64>,
    #[serde(default)]
    pub state_gain: Vec<f64>,
}

impl DiagonalModel {
    fn evaluate(&self, xi: &State, kind: CovarianceKind) -> Covariance {
        let n = xi.len();
        let diag: Vec<f64> = (0..n)
            .map(|i| {
                let b = self.base.get(i).copied().unwrap_or(0.0);
                let g = self.state_gain.get(i).copied().unwrap_or(0.0);
                b + g * xi[i] * xi[i]
            })
            .collect();
        Covariance::diagonal(&diag, kind)
    }
}

/// Deterministic, state- and time-dependent source of `(Σ_epi, Σ_ale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSchedule {
    #[serde(default)]
    pub epistemic: DiagonalModel,
    #[serde(default)]
    pub aleatoric: DiagonalModel,
    #[serde(default)]
    pub floor: f64,
    #[serde(default = "default_ceiling")]
    pub ceiling: f64,
}

fn default_ceiling() -> f64 {
    1e3
}

impl Default for CovarianceSchedule {
    fn default() -> Self {
        Self { epistemic: DiagonalModel::default(), aleatoric: DiagonalModel::default(), floor: 0.0, ceiling: default_ceiling() }
    }
}

impl CovarianceSchedule {
    pub fn evaluate(&self, xi: &State, segment: &ModeSegment) -> (Covariance, Covariance) {
        let epi = self.epistemic.evaluate(xi, CovarianceKind::Epistemic).scaled(segment.epistemic_scale);
        let ale = self.aleatoric.evaluate(xi, CovarianceKind::Aleatoric).scaled(segment.aleatoric_scale);
        (epi, ale)
    }

    fn validate(&self, n: usize) -> Result<(), ModelError> {
        for (name, v) in [
            ("epistemic.base", &self.epistemic.base),
            ("epistemic.state_gain", &self.epistemic.state_gain),
            ("aleatoric.base", &self.aleatoric.base),
            ("aleatoric.state_gain", &self.aleatoric.state_gain),
        ] {
            if v.len() > n {
                return Err(ModelError::Config(format!("{name} has {} entries for a {n}-dim state", v.len())));
            }
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(ModelError::Config(format!("{name} entries must be finite and non-negative")));
            }
        }
        if !(self.floor >= 0.0 && self.ceiling >= self.floor) {
            return Err(ModelError::Config("covariance floor/ceiling must satisfy 0 <= floor <= ceiling".into()));
        }
        Ok(())
    }
}

/// A control-affine plant with affine drift `F(ξ) = A ξ + c` and constant `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    id: PlantId,
    drift_matrix: DMatrix<f64>,
    drift_offset: DVector<f64>,
    input_matrix: DMatrix<f64>,
    covariance: CovarianceSchedule,
    segments: Vec<ModeSegment>,
    position: Vec<usize>,
    velocity: Vec<usize>,
}

const NOMINAL_SEGMENT: ModeSegment = ModeSegment {
    t_start: f64::NEG_INFINITY,
    epistemic_scale: 1.0,
    aleatoric_scale: 1.0,
    drift_scale: 1.0,
};

impl PlantModel {
    pub fn from_spec(spec: &PlantSpec) -> Result<Self, ModelError> {
        let model = match *spec {
            PlantSpec::ScalarIntegrator { drift_gain, drift_bias } => Self {
                id: PlantId::ScalarIntegrator,
                drift_matrix: DMatrix::from_element(1, 1, drift_gain),
                drift_offset: DVector::from_element(1, drift_bias),
                input_matrix: DMatrix::from_element(1, 1, 1.0),
                covariance: CovarianceSchedule::default(),
                segments: Vec::new(),
                position: vec![0],
                velocity: Vec::new(),
            },
            PlantSpec::PlanarDoubleIntegrator { damping } => {
                let mut a = DMatrix::zeros(4, 4);
                a[(0, 2)] = 1.0;
                a[(1, 3)] = 1.0;
                a[(2, 2)] = -damping;
                a[(3, 3)] = -damping;
                let mut g = DMatrix::zeros(4, 2);
                g[(2, 0)] = 1.0;
                g[(3, 1)] = 1.0;
                Self {
                    id: PlantId::PlanarDoubleIntegrator,
                    drift_matrix: a,
                    drift_offset: DVector::zeros(4),
                    input_matrix: g,
                    covariance: CovarianceSchedule::default(),
                    segments: Vec::new(),
                    position: vec![0, 1],
                    velocity: vec![2, 3],
                }
            }
            PlantSpec::Synthetic12 { seed } => synthetic12(seed),
        };
        if model.drift_matrix.iter().chain(model.drift_offset.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("plant drift"));
        }
        Ok(model)
    }

    pub fn with_covariance(mut self, schedule: CovarianceSchedule) -> Result<Self, ModelError> {
        schedule.validate(self.state_dim())?;
        self.covariance = schedule;
        Ok(self)
    }

    pub fn with_segments(mut self, mut segments: Vec<ModeSegment>) -> Result<Self, ModelError> {
        if segments.iter().any(|s| !s.t_start.is_finite() || s.epistemic_scale < 0.0 || s.aleatoric_scale < 0.0) {
            return Err(ModelError::Config("mode segments need finite start times and non-negative scales".into()));
        }
        segments.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
        self.segments = segments;
        Ok(self)
    }

    pub fn id(&self) -> PlantId {
        self.id
    }

    pub fn state_dim(&self) -> usize {
        self.drift_matrix.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.input_matrix.ncols()
    }

    pub fn drift_matrix(&self) -> &DMatrix<f64> {
        &self.drift_matrix
    }

    pub fn input_matrix(&self) -> &DMatrix<f64> {
        &self.input_matrix
    }

    /// Indices of the planar position projection used by region barriers.
    pub fn position_indices(&self) -> &[usize] {
        &self.position
    }

    pub fn velocity_indices(&self) -> &[usize] {
        &self.velocity
    }

    pub fn segments(&self) -> &[ModeSegment] {
        &self.segments
    }

    /// The mode segment in force at time `t`.
    pub fn segment_at(&self, t: f64) -> &ModeSegment {
        self.segments.iter().rev().find(|s| s.t_start <= t).unwrap_or(&NOMINAL_SEGMENT)
    }

    /// Switch times at which the active mode is refreshed.
    pub fn switch_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.segments.iter().map(|s| s.t_start)
    }

    pub fn covariance_schedule(&self) -> &CovarianceSchedule {
        &self.covariance
    }

    /// Raw `(Σ_epi, Σ_ale)` at `(ξ, t)` before fusion.
    pub fn covariance_at(&self, xi: &State, t: f64) -> (Covariance, Covariance) {
        self.covariance.evaluate(xi, self.segment_at(t))
    }

    fn check_state(&self, xi: &State) -> Result<(), ModelError> {
        if xi.len() != self.state_dim() {
            return Err(ModelError::StateDim { expected: self.state_dim(), got: xi.len() });
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("state"));
        }
        Ok(())
    }
}

/// Evaluate `(F(ξ), G(ξ))` under the mode segment active at `t`.
pub fn eval_dynamics(model: &PlantModel, xi: &State, t: f64) -> Result<(DVector<f64>, DMatrix<f64>), ModelError> {
    model.check_state(xi)?;
    let scale = model.segment_at(t).drift_scale;
    let mut f = &model.drift_matrix * xi + &model.drift_offset;
    if scale != 1.0 {
        f *= scale;
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("drift"));
    }
    Ok((f, model.input_matrix.clone()))
}

/// One Euler–Maruyama step: `ξ' = ξ + Δt (F + G u) + √Δt · L z`.
///
/// Always consumes `state_dim` standard normal draws so that streams stay
/// aligned regardless of `Σ`.
pub fn step_em(
    model: &PlantModel,
    xi: &State,
    u: &Control,
    sigma: &Covariance,
    t: f64,
    dt: f64,
    rng: &mut RngStream,
) -> Result<State, ModelError> {
    if !(dt > 0.0) {
        return Err(ModelError::TimeStep(dt));
    }
    if u.len() != model.control_dim() {
        return Err(ModelError::ControlDim { expected: model.control_dim(), got: u.len() });
    }
    if sigma.dim() != model.state_dim() {
        return Err(ModelError::CovarianceDim(sigma.dim(), model.state_dim()));
    }
    let (f, g) = eval_dynamics(model, xi, t)?;
    let z = rng.standard_normal_vec(model.state_dim());
    let mut next = xi + (f + g * u) * dt;
    if !sigma.is_zero() {
        let l = sigma.sqrt_factor()?;
        next += (l * z) * dt.sqrt();
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("next state"));
    }
    Ok(next)
}

/// Seeded normal-variate stream; `(seed, stream)` fully determines the draws.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn standard_normal_vec(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.standard_normal())
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

fn synthetic12(seed: u64) -> PlantModel {
    use rand::Rng;
    const N: usize = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |scale: f64| -> DMatrix<f64> { DMatrix::from_fn(N, N, |_, _| scale * (rng.random::<f64>() * 2.0 - 1.0)) };
    // Stiffness and damping are SPD so that the second-order drift is Hurwitz.
    let ms = sample(0.3);
    let md = sample(0.3);
    let mb = sample(0.2);
    let eye = DMatrix::<f64>::identity(N, N);
    let stiffness = &eye + &ms * ms.transpose();
    let damping = &eye * 1.5 + &md * md.transpose();
    let input = &eye + mb;
    let mut a = DMatrix::zeros(2 * N, 2 * N);
    a.view_mut((0, N), (N, N)).copy_from(&eye);
    a.view_mut((N, 0), (N, N)).copy_from(&(-stiffness));
    a.view_mut((N, N), (N, N)).copy_from(&(-damping));
    let mut g = DMatrix::zeros(2 * N, N);
    g.view_mut((N, 0), (N, N)).copy_from(&input);
    PlantModel {
        id: PlantId::Synthetic12,
        drift_matrix: a,
        drift_offset: DVector::zeros(2 * N),
        input_matrix: g,
        covariance: CovarianceSchedule::default(),
        segments: Vec::new(),
        position: vec![0, 1],
        velocity: (N..2 * N).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar() -> PlantModel {
        PlantModel::from_spec(&PlantSpec::ScalarIntegrator { drift_gain: 0.0, drift_bias: 0.0 }).unwrap()
    }

    #[test]
    fn scalar_integrator_at_origin() {
        let (f, g) = eval_dynamics(&scalar(), &DVector::zeros(1), 0.0).unwrap();
        assert_eq!(f[0], 0.0);
        assert_eq!(g[(0, 0)], 1.0);
    }

    #[test]
    fn planar_double_integrator_structure() {
        let m = PlantModel::from_spec(&PlantSpec::PlanarDoubleIntegrator { damping: 0.0 }).unwrap();
        let xi = DVector::from_vec(vec![1.0, 2.0, 0.5, -0.5]);
        let (f, g) = eval_dynamics(&m, &xi, 0.0).unwrap();
        assert_eq!(f.as_slice(), &[0.5, -0.5, 0.0, 0.0]);
        let acc = g * DVector::from_vec(vec![3.0, -4.0]);
        assert_eq!(acc.as_slice(), &[0.0, 0.0, 3.0, -4.0]);
    }

    #[test]
    fn synthetic12_matches_explicit_multiply() {
        let m = PlantModel::from_spec(&PlantSpec::Synthetic12 { seed: default_synthetic_seed() }).unwrap();
        assert_eq!(m.state_dim(), 24);
        assert_eq!(m.control_dim(), 12);
        let mut rng = RngStream::new(3, 0);
        let xi = rng.standard_normal_vec(24);
        let (f, g) = eval_dynamics(&m, &xi, 0.0).unwrap();
        let a = m.drift_matrix();
        for i in 0..24 {
            let mut acc = 0.0;
            for j in 0..24 {
                acc += a[(i, j)] * xi[j];
            }
            assert!((f[i] - acc).abs() < 1e-12);
        }
        assert_eq!(g.shape(), (24, 12));
        // Hurwitz drift and full-column-rank input.
        let eig = a.clone().complex_eigenvalues();
        assert!(eig.iter().all(|l| l.re < 0.0));
        assert_eq!(g.rank(1e-9), 12);
    }

    #[test]
    fn state_dimension_is_checked() {
        let err = eval_dynamics(&scalar(), &DVector::zeros(2), 0.0).unwrap_err();
        assert_eq!(err, ModelError::StateDim { expected: 1, got: 2 });
        let err = eval_dynamics(&scalar(), &DVector::from_element(1, f64::NAN), 0.0).unwrap_err();
        assert_eq!(err, ModelError::NonFinite("state"));
    }

    #[test]
    fn fuse_zero_and_disjoint_diagonals() {
        let z = Covariance::zeros(2, CovarianceKind::Epistemic);
        let f = fuse_covariance(&z, &Covariance::zeros(2, CovarianceKind::Aleatoric), 0.0, 1e3).unwrap();
        assert!(f.is_zero());
        assert_eq!(f.kind(), CovarianceKind::Fused);
        let a = Covariance::diagonal(&[4.0, 0.0], CovarianceKind::Epistemic);
        let b = Covariance::diagonal(&[0.0, 1.0], CovarianceKind::Aleatoric);
        let f = fuse_covariance(&a, &b, 0.0, 1e3).unwrap();
        assert_eq!(f.matrix(), &DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])));
    }

    #[test]
    fn fuse_clips_negative_eigenvalue() {
        // Eigenvalues 1 and -0.01 along the rotated axes (1,1)/√2 and (1,-1)/√2.
        let (l1, l2) = (1.0, -0.01);
        let m = DMatrix::from_row_slice(2, 2, &[(l1 + l2) / 2.0, (l1 - l2) / 2.0, (l1 - l2) / 2.0, (l1 + l2) / 2.0]);
        let epi = Covariance::new(m, CovarianceKind::Epistemic).unwrap();
        let ale = Covariance::zeros(2, CovarianceKind::Aleatoric);
        let f = fuse_covariance(&epi, &ale, 0.0, 1e3).unwrap();
        // Oracle: clamp -0.01 to zero and recompose by hand.
        let expect = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        assert!((f.matrix() - expect).amax() < 1e-12);
        let eig = SymmetricEigen::new(f.matrix().clone());
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10));
    }

    #[test]
    fn fuse_rejects_dimension_mismatch() {
        let a = Covariance::zeros(2, CovarianceKind::Epistemic);
        let b = Covariance::zeros(3, CovarianceKind::Aleatoric);
        assert_eq!(fuse_covariance(&a, &b, 0.0, 1.0).unwrap_err(), ModelError::CovarianceDim(2, 3));
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(Covariance::new(m, CovarianceKind::Fused), Err(ModelError::Asymmetric(_))));
    }

    #[test]
    fn deterministic_euler_limit() {
        let m = scalar();
        let sigma = Covariance::zeros(1, CovarianceKind::Fused);
        let mut rng = RngStream::new(1, 0);
        let next = step_em(&m, &DVector::zeros(1), &DVector::from_element(1, 1.0), &sigma, 0.0, 0.1, &mut rng).unwrap();
        assert_eq!(next[0], 0.1);
    }

    #[test]
    fn zero_noise_trajectory_is_bitwise_euler() {
        let m = PlantModel::from_spec(&PlantSpec::PlanarDoubleIntegrator { damping: 0.3 }).unwrap();
        let sigma = Covariance::zeros(4, CovarianceKind::Fused);
        let mut rng = RngStream::new(9, 2);
        let u = DVector::from_vec(vec![0.7, -0.2]);
        let mut xi = DVector::from_vec(vec![0.0, 1.0, 0.5, 0.0]);
        let mut euler = xi.clone();
        for k in 0..200 {
            let t = k as f64 * 0.01;
            xi = step_em(&m, &xi, &u, &sigma, t, 0.01, &mut rng).unwrap();
            let (f, g) = eval_dynamics(&m, &euler, t).unwrap();
            euler = &euler + (f + g * &u) * 0.01;
        }
        assert_eq!(xi, euler);
    }

    #[test]
    fn rejects_bad_time_step() {
        let m = scalar();
        let sigma = Covariance::zeros(1, CovarianceKind::Fused);
        let mut rng = RngStream::new(1, 0);
        let r = step_em(&m, &DVector::zeros(1), &DVector::zeros(1), &sigma, 0.0, 0.0, &mut rng);
        assert_eq!(r.unwrap_err(), ModelError::TimeStep(0.0));
    }

    #[test]
    fn increment_moments_match_monte_carlo_oracle() {
        let m = scalar();
        let sigma = Covariance::diagonal(&[1.0], CovarianceKind::Fused);
        let dt = 0.01;
        let n = 100_000;
        let mut rng = RngStream::new(2024, 0);
        let xi = DVector::zeros(1);
        let u = DVector::zeros(1);
        let incs: Vec<f64> = (0..n).map(|_| step_em(&m, &xi, &u, &sigma, 0.0, dt, &mut rng).unwrap()[0]).collect();
        let mean = incs.iter().sum::<f64>() / n as f64;
        let var = incs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - dt).abs() <= 0.05 * dt, "variance {var}");
        let se = (dt / n as f64).sqrt();
        assert!(mean.abs() <= 4.0 * se, "mean {mean}");
    }

    #[test]
    fn identical_streams_reproduce_draws() {
        let mut a = RngStream::new(77, 5);
        let mut b = RngStream::new(77, 5);
        let mut c = RngStream::new(77, 6);
        let va = a.standard_normal_vec(16);
        assert_eq!(va, b.standard_normal_vec(16));
        assert_ne!(va, c.standard_normal_vec(16));
    }

    #[test]
    fn segments_rescale_drift_and_noise() {
        let m = PlantModel::from_spec(&PlantSpec::ScalarIntegrator { drift_gain: -1.0, drift_bias: 0.0 })
            .unwrap()
            .with_covariance(CovarianceSchedule {
                aleatoric: DiagonalModel { base: vec![0.5], state_gain: vec![1.0] },
                ..Default::default()
            })
            .unwrap()
            .with_segments(vec![ModeSegment { t_start: 1.0, epistemic_scale: 1.0, aleatoric_scale: 4.0, drift_scale: 0.5 }])
            .unwrap();
        let xi = DVector::from_element(1, 2.0);
        assert_eq!(eval_dynamics(&m, &xi, 0.5).unwrap().0[0], -2.0);
        assert_eq!(eval_dynamics(&m, &xi, 1.5).unwrap().0[0], -1.0);
        let (_, ale) = m.covariance_at(&xi, 0.0);
        assert_eq!(ale.matrix()[(0, 0)], 4.5);
        let (_, ale) = m.covariance_at(&xi, 2.0);
        assert_eq!(ale.matrix()[(0, 0)], 18.0);
    }
}
