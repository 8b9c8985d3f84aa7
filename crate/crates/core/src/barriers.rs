//! Atomic barrier functions, the log-sum-exp composite and the stochastic
//! barrier statistics that feed the safety QP.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::semantic::{signed_distance, RegionShape};
use crate::statespace::{Covariance, State};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("barrier `{id}`: {reason}")]
    Invalid { id: String, reason: String },
    #[error("composite barrier needs at least one member")]
    Empty,
    #[error("sharpness must be positive, got {0}")]
    Sharpness(f64),
    #[error("dimension mismatch: {0}")]
    Dim(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierRole {
    HardPhysical,
    SoftSemantic,
}

/// Closed-form barrier families. Every family evaluates its exact gradient and Hessian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum BarrierShape {
    /// `h = nᵀξ − c`.
    Halfspace { normal: Vec<f64>, offset: f64 },
    /// `h = Σ_k w_k (ξ_{i_k} − o_k)² − r²`; circles use unit weights.
    Clearance { indices: Vec<usize>, center: Vec<f64>, #[serde(default)] weights: Vec<f64>, radius: f64 },
    /// `h = b² − ξ_i²`.
    BoxLimit { index: usize, bound: f64 },
    /// `h = v_max² − Σ_k ξ_{i_k}²`.
    SpeedLimit { indices: Vec<usize>, max: f64 },
    /// `h = d(p, region) − r` with `p` the position projection at `indices`.
    Region { indices: Vec<usize>, region: RegionShape, margin: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Barrier {
    pub id: String,
    pub role: BarrierRole,
    /// Context confidence in `[0, 1]`; only meaningful for soft barriers.
    #[serde(default = "full_confidence")]
    pub confidence: f64,
    #[serde(flatten)]
    pub shape: BarrierShape,
}

fn full_confidence() -> f64 {
    1.0
}

/// Value, gradient and Hessian of a barrier at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierEval {
    pub h: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl Barrier {
    pub fn hard(id: impl Into<String>, shape: BarrierShape) -> Self {
        Self { id: id.into(), role: BarrierRole::HardPhysical, confidence: 1.0, shape }
    }

    pub fn soft(id: impl Into<String>, confidence: f64, shape: BarrierShape) -> Self {
        Self { id: id.into(), role: BarrierRole::SoftSemantic, confidence, shape }
    }

    pub fn is_hard(&self) -> bool {
        self.role == BarrierRole::HardPhysical
    }

    /// Check indices and parameters against a state dimension.
    pub fn validate(&self, n: usize) -> Result<(), BarrierError> {
        let bad = |reason: String| Err(BarrierError::Invalid { id: self.id.clone(), reason });
        if !(0.0..=1.0).contains(&self.confidence) {
            return bad(format!("confidence {} outside [0, 1]", self.confidence));
        }
        match &self.shape {
            BarrierShape::Halfspace { normal, offset } => {
                if normal.len() != n {
                    return bad(format!("normal has {} entries for a {n}-dim state", normal.len()));
                }
                if !offset.is_finite() || normal.iter().any(|v| !v.is_finite()) {
                    return bad("non-finite halfspace".into());
                }
            }
            BarrierShape::Clearance { indices, center, weights, radius } => {
                if indices.is_empty() || indices.len() != center.len() {
                    return bad("clearance needs matching non-empty indices and center".into());
                }
                if !weights.is_empty() && (weights.len() != indices.len() || weights.iter().any(|w| !(*w > 0.0))) {
                    return bad("clearance weights must be positive, one per index".into());
                }
                if !(*radius >= 0.0) {
                    return bad("clearance radius must be non-negative".into());
                }
                if indices.iter().any(|&i| i >= n) {
                    return bad("clearance index out of range".into());
                }
            }
            BarrierShape::BoxLimit { index, bound } => {
                if *index >= n || !(*bound > 0.0) {
                    return bad("box limit needs an in-range index and positive bound".into());
                }
            }
            BarrierShape::SpeedLimit { indices, max } => {
                if indices.is_empty() || indices.iter().any(|&i| i >= n) || !(*max > 0.0) {
                    return bad("speed limit needs in-range indices and a positive maximum".into());
                }
            }
            BarrierShape::Region { indices, region, margin } => {
                if indices.is_empty() || indices.len() > 2 || indices.iter().any(|&i| i >= n) {
                    return bad("region barrier needs one or two in-range position indices".into());
                }
                if !(*margin >= 0.0) {
                    return bad("region margin must be non-negative".into());
                }
                region.validate().map_err(|e| BarrierError::Invalid { id: self.id.clone(), reason: e.to_string() })?;
            }
        }
        Ok(())
    }
}

/// Evaluate `(h, ∇h, ∇²h)` of an atomic barrier.
pub fn eval_barrier(b: &Barrier, xi: &State) -> BarrierEval {
    let n = xi.len();
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    let h = match &b.shape {
        BarrierShape::Halfspace { normal, offset } => {
            grad.copy_from_slice(normal);
            normal.iter().zip(xi.iter()).map(|(a, x)| a * x).sum::<f64>() - offset
        }
        BarrierShape::Clearance { indices, center, weights, radius } => {
            let mut h = -radius * radius;
            for (k, (&i, &o)) in indices.iter().zip(center).enumerate() {
                let w = weights.get(k).copied().unwrap_or(1.0);
                let d = xi[i] - o;
                h += w * d * d;
                grad[i] += 2.0 * w * d;
                hess[(i, i)] += 2.0 * w;
            }
            h
        }
        BarrierShape::BoxLimit { index, bound } => {
            let x = xi[*index];
            grad[*index] = -2.0 * x;
            hess[(*index, *index)] = -2.0;
            bound * bound - x * x
        }
        BarrierShape::SpeedLimit { indices, max } => {
            let mut h = max * max;
            for &i in indices {
                h -= xi[i] * xi[i];
                grad[i] -= 2.0 * xi[i];
                hess[(i, i)] -= 2.0;
            }
            h
        }
        BarrierShape::Region { indices, region, margin } => {
            let p = [xi[indices[0]], indices.get(1).map_or(0.0, |&j| xi[j])];
            let sd = signed_distance(region, p);
            for (a, &i) in indices.iter().enumerate() {
                grad[i] = sd.grad[a];
                for (c, &j) in indices.iter().enumerate() {
                    hess[(i, j)] = sd.hess[a][c];
                }
            }
            sd.distance - margin
        }
    };
    BarrierEval { h, grad, hess }
}

/// Smooth minimum `φ = −(1/β) log Σ e^{−β h_i}` and its softmin weights.
///
/// Evaluated with a max-shift about `min h`, so the sum is at least 1.
pub fn compose_lse(values: &[f64], beta: f64) -> (f64, Vec<f64>) {
    assert!(!values.is_empty(), "compose_lse needs at least one value");
    assert!(beta > 0.0, "compose_lse needs beta > 0");
    if values.len() == 1 {
        return (values[0], vec![1.0]);
    }
    let hmin = values.iter().copied().fold(f64::INFINITY, f64::min);
    let expo: Vec<f64> = values.iter().map(|&h| (-beta * (h - hmin)).exp()).collect();
    let sum: f64 = expo.iter().sum();
    let phi = hmin - sum.ln() / beta;
    let rho = expo.iter().map(|e| e / sum).collect();
    (phi, rho)
}

/// Ordered barrier set aggregated with sharpness `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeBarrier {
    members: Vec<Barrier>,
    beta: f64,
}

/// Composite value with the exact LSE gradient and Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeEval {
    pub h: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    pub rho: Vec<f64>,
    pub members: Vec<BarrierEval>,
}

impl CompositeBarrier {
    pub fn new(members: Vec<Barrier>, beta: f64) -> Result<Self, BarrierError> {
        if members.is_empty() {
            return Err(BarrierError::Empty);
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(BarrierError::Sharpness(beta));
        }
        Ok(Self { members, beta })
    }

    pub fn members(&self) -> &[Barrier] {
        &self.members
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn eval(&self, xi: &State) -> CompositeEval {
        let members: Vec<BarrierEval> = self.members.iter().map(|b| eval_barrier(b, xi)).collect();
        compose_evals(members, self.beta)
    }
}

/// Aggregate already-evaluated members: `∇h_c = Σρ_i∇h_i` and
/// `∇²h_c = Σρ_i∇²h_i − β(Σρ_i∇h_i∇h_iᵀ − ∇h_c∇h_cᵀ)`.
pub fn compose_evals(members: Vec<BarrierEval>, beta: f64) -> CompositeEval {
    let values: Vec<f64> = members.iter().map(|m| m.h).collect();
    let (h, rho) = compose_lse(&values, beta);
    let n = members[0].grad.len();
    if members.len() == 1 {
        let m = &members[0];
        return CompositeEval { h, grad: m.grad.clone(), hess: m.hess.clone(), rho, members };
    }
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    let mut outer = DMatrix::zeros(n, n);
    for (m, &r) in members.iter().zip(&rho) {
        grad.axpy(r, &m.grad, 1.0);
        hess += &m.hess * r;
        outer.ger(r, &m.grad, &m.grad, 1.0);
    }
    outer.ger(-1.0, &grad, &grad, 1.0);
    hess -= outer * beta;
    CompositeEval { h, grad, hess, rho, members }
}

/// Itô drift statistics of one (composite or atomic) barrier.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierStats {
    pub h: f64,
    pub grad: DVector<f64>,
    pub rho: Vec<f64>,
    /// `L_F h = ∇hᵀF`.
    pub drift: f64,
    /// `L_G h = ∇hᵀG`.
    pub input_row: DVector<f64>,
    /// `½ Tr(∇²h Σ)`.
    pub ito: f64,
    /// `√(∇hᵀ Σ ∇h)`.
    pub sigma_h: f64,
}

impl BarrierStats {
    /// Drop the Itô and variance terms (deterministic CBF statistics).
    pub fn deterministic(mut self) -> Self {
        self.ito = 0.0;
        self.sigma_h = 0.0;
        self
    }
}

fn stats_from(h: f64, grad: DVector<f64>, hess: &DMatrix<f64>, rho: Vec<f64>, f: &DVector<f64>, g: &DMatrix<f64>, sigma: &Covariance) -> BarrierStats {
    let drift = grad.dot(f);
    let input_row = g.tr_mul(&grad);
    let s = sigma.matrix();
    let ito = 0.5 * hess.component_mul(s).sum();
    let quad = (s * &grad).dot(&grad);
    let sigma_h = quad.max(0.0).sqrt();
    BarrierStats { h, grad, rho, drift, input_row, ito, sigma_h }
}

/// Statistics of a single atomic barrier (`ρ = [1]`).
pub fn barrier_stats(eval: &BarrierEval, f: &DVector<f64>, g: &DMatrix<f64>, sigma: &Covariance) -> BarrierStats {
    stats_from(eval.h, eval.grad.clone(), &eval.hess, vec![1.0], f, g, sigma)
}

pub fn composite_stats(cb: &CompositeBarrier, xi: &State, f: &DVector<f64>, g: &DMatrix<f64>, sigma: &Covariance) -> BarrierStats {
    let ev = cb.eval(xi);
    composite_eval_stats(&ev, f, g, sigma)
}

pub fn composite_eval_stats(ev: &CompositeEval, f: &DVector<f64>, g: &DMatrix<f64>, sigma: &Covariance) -> BarrierStats {
    stats_from(ev.h, ev.grad.clone(), &ev.hess, ev.rho.clone(), f, g, sigma)
}

/// One affine row `A u ≥ b` of the safety QP together with the partial
/// derivatives of `b` with respect to the risk parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub a: DVector<f64>,
    pub b: f64,
    /// `∂b/∂α = −h`.
    pub db_dalpha: f64,
    /// `∂b/∂κ = σ_h`.
    pub db_dkappa: f64,
}

impl ConstraintRow {
    pub fn plain(a: DVector<f64>, b: f64) -> Self {
        Self { a, b, db_dalpha: 0.0, db_dkappa: 0.0 }
    }
}

/// `A = L_G h`, `b = −L_F h − ½Tr(∇²hΣ) − α h + κ σ_h`.
pub fn constraint_row(stats: &BarrierStats, alpha: f64, kappa: f64) -> ConstraintRow {
    let b = -stats.drift - stats.ito - alpha * stats.h + kappa * stats.sigma_h;
    ConstraintRow { a: stats.input_row.clone(), b, db_dalpha: -stats.h, db_dkappa: stats.sigma_h }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::CovarianceKind;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn halfspace_eval() {
        let b = Barrier::hard("x", BarrierShape::Halfspace { normal: vec![1.0, 0.0], offset: 0.0 });
        let e = eval_barrier(&b, &v(&[2.0, 7.0]));
        assert_eq!(e.h, 2.0);
        assert_eq!(e.grad.as_slice(), &[1.0, 0.0]);
        assert!(e.hess.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn circle_clearance_eval() {
        let b = Barrier::hard(
            "c",
            BarrierShape::Clearance { indices: vec![0, 1], center: vec![0.0, 0.0], weights: vec![], radius: 1.0 },
        );
        let e = eval_barrier(&b, &v(&[3.0, 4.0]));
        assert_eq!(e.h, 24.0);
        assert_eq!(e.grad.as_slice(), &[6.0, 8.0]);
        assert_eq!(e.hess, DMatrix::identity(2, 2) * 2.0);
    }

    #[test]
    fn box_limit_eval() {
        let b = Barrier::hard("q", BarrierShape::BoxLimit { index: 0, bound: 1.0 });
        let e = eval_barrier(&b, &v(&[0.0, 0.3]));
        assert_eq!(e.h, 1.0);
        assert_eq!(e.grad.as_slice(), &[0.0, 0.0]);
        assert_eq!(e.hess[(0, 0)], -2.0);
        assert_eq!(e.hess[(1, 1)], 0.0);
    }

    #[test]
    fn lse_examples() {
        assert_eq!(compose_lse(&[0.7], 3.0), (0.7, vec![1.0]));
        let (phi, rho) = compose_lse(&[1.0, 1.0], 1.0);
        assert!((phi - (1.0 - 2f64.ln())).abs() < 1e-15);
        assert!((phi - 0.306853).abs() < 1e-6);
        assert_eq!(rho, vec![0.5, 0.5]);
        let (phi, rho) = compose_lse(&[0.0, 100.0], 10.0);
        // e^{-1000} underflows, so the shifted sum is exactly one.
        assert_eq!(phi, 0.0);
        assert_eq!(rho, vec![1.0, 0.0]);
    }

    #[test]
    fn lse_survives_extreme_values() {
        let (phi, rho) = compose_lse(&[-1e6, 1e6, 3.0], 50.0);
        assert!(phi.is_finite());
        assert_eq!(phi, -1e6);
        assert!((rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stats_without_noise_reduce_to_deterministic() {
        let b = Barrier::hard(
            "c",
            BarrierShape::Clearance { indices: vec![0], center: vec![0.0], weights: vec![], radius: 0.5 },
        );
        let xi = v(&[1.0]);
        let cb = CompositeBarrier::new(vec![b], 10.0).unwrap();
        let s = composite_stats(&cb, &xi, &v(&[0.3]), &DMatrix::from_element(1, 1, 1.0), &Covariance::zeros(1, CovarianceKind::Fused));
        assert_eq!(s.ito, 0.0);
        assert_eq!(s.sigma_h, 0.0);
        assert_eq!(s.drift, 0.6);
    }

    #[test]
    fn sigma_h_quadratic_form() {
        let b = Barrier::hard("l", BarrierShape::Halfspace { normal: vec![1.0, 2.0], offset: 0.0 });
        let cb = CompositeBarrier::new(vec![b], 10.0).unwrap();
        let sigma = Covariance::diagonal(&[4.0, 1.0], CovarianceKind::Fused);
        let s = composite_stats(&cb, &v(&[0.0, 0.0]), &v(&[0.0, 0.0]), &DMatrix::identity(2, 2), &sigma);
        assert!((s.sigma_h - 8f64.sqrt()).abs() < 1e-15);
        assert!((s.sigma_h - 2.828427).abs() < 1e-6);
    }

    #[test]
    fn ito_trace_term() {
        let sigma = Covariance::diagonal(&[1.0, 3.0], CovarianceKind::Fused);
        let f = v(&[0.0, 0.0]);
        let g = DMatrix::identity(2, 2);
        // ∇²h = diag(2, 0).
        let b = Barrier::hard(
            "p",
            BarrierShape::Clearance { indices: vec![0], center: vec![0.0], weights: vec![], radius: 0.0 },
        );
        let s = composite_stats(&CompositeBarrier::new(vec![b], 1.0).unwrap(), &v(&[1.0, 1.0]), &f, &g, &sigma);
        assert!((s.ito - 1.0).abs() < 1e-15);
        let c = Barrier::hard(
            "c",
            BarrierShape::Clearance { indices: vec![0, 1], center: vec![0.0, 0.0], weights: vec![], radius: 1.0 },
        );
        let s = composite_stats(&CompositeBarrier::new(vec![c], 1.0).unwrap(), &v(&[1.0, 1.0]), &f, &g, &sigma);
        assert!((s.ito - 4.0).abs() < 1e-15);
    }

    #[test]
    fn constraint_row_examples() {
        let stats = BarrierStats {
            h: 1.0,
            grad: v(&[1.0]),
            rho: vec![1.0],
            drift: 0.0,
            input_row: v(&[1.0]),
            ito: 0.0,
            sigma_h: 0.5,
        };
        let row = constraint_row(&stats, 1.0, 2.0);
        assert_eq!(row.a.as_slice(), &[1.0]);
        assert_eq!(row.b, 0.0);
        assert_eq!(constraint_row(&stats, 1.0, 0.0).b, -1.0);
        let boundary = BarrierStats { h: 0.0, sigma_h: 0.0, ..stats };
        assert_eq!(constraint_row(&boundary, 3.7, 0.0).b, 0.0);
    }

    #[test]
    fn validation_catches_bad_parameters() {
        let b = Barrier::hard("q", BarrierShape::BoxLimit { index: 3, bound: 1.0 });
        assert!(b.validate(2).is_err());
        let b = Barrier::soft("s", 1.5, BarrierShape::Halfspace { normal: vec![1.0], offset: 0.0 });
        assert!(b.validate(1).is_err());
        assert!(CompositeBarrier::new(vec![], 1.0).is_err());
        let ok = Barrier::hard("q", BarrierShape::BoxLimit { index: 0, bound: 1.0 });
        assert_eq!(CompositeBarrier::new(vec![ok], 0.0).unwrap_err(), BarrierError::Sharpness(0.0));
    }

    proptest! {
        #[test]
        fn lse_sandwich_and_weights(values in proptest::collection::vec(-50.0f64..50.0, 1..12), beta in 0.05f64..100.0) {
            let (phi, rho) = compose_lse(&values, beta);
            let m = values.len() as f64;
            let hmin = values.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(phi <= hmin + 1e-12);
            prop_assert!(phi >= hmin - m.ln() / beta - 1e-12);
            prop_assert!((rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(rho.iter().all(|&r| (0.0..=1.0).contains(&r)));
        }

        #[test]
        fn rho_shift_invariant(values in proptest::collection::vec(-10.0f64..10.0, 2..8), shift in -100.0f64..100.0, beta in 0.1f64..20.0) {
            let (_, r1) = compose_lse(&values, beta);
            let shifted: Vec<f64> = values.iter().map(|h| h + shift).collect();
            let (_, r2) = compose_lse(&shifted, beta);
            for (a, b) in r1.iter().zip(&r2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn sigma_h_positively_homogeneous(g0 in -3.0f64..3.0, g1 in -3.0f64..3.0, d0 in 0.0f64..2.0, d1 in 0.0f64..2.0, s in 0.0f64..10.0) {
            let b = Barrier::hard("l", BarrierShape::Halfspace { normal: vec![g0, g1], offset: 0.0 });
            let cb = CompositeBarrier::new(vec![b], 1.0).unwrap();
            let z = v(&[0.0, 0.0]);
            let g = DMatrix::identity(2, 2);
            let base = composite_stats(&cb, &z, &z, &g, &Covariance::diagonal(&[d0, d1], CovarianceKind::Fused));
            let scaled = composite_stats(&cb, &z, &z, &g, &Covariance::diagonal(&[d0 * s * s, d1 * s * s], CovarianceKind::Fused));
            prop_assert!((scaled.sigma_h - s * base.sigma_h).abs() <= 1e-9 * (1.0 + scaled.sigma_h));
        }

        #[test]
        fn row_monotone_in_risk_parameters(h in 0.0f64..5.0, sig in 0.0f64..3.0, k1 in 0.0f64..5.0, dk in 0.0f64..5.0, a1 in 0.1f64..10.0, da in 0.0f64..5.0, drift in -3.0f64..3.0) {
            let stats = BarrierStats { h, grad: v(&[1.0]), rho: vec![1.0], drift, input_row: v(&[1.0]), ito: 0.0, sigma_h: sig };
            let base = constraint_row(&stats, a1, k1).b;
            prop_assert!(constraint_row(&stats, a1, k1 + dk).b >= base);
            prop_assert!(constraint_row(&stats, a1 + da, k1).b <= base);
            let higher = BarrierStats { h: h + da, ..stats.clone() };
            prop_assert!(constraint_row(&higher, a1, k1).b <= base);
        }
    }
}
