//! Implicit differentiation of the safety QP through its KKT conditions.
//!
//! At a strictly complementary solution the active constraints `N`
//! (rows and box bounds with positive multipliers) satisfy
//!
//! ```text
//! [ H   N ] [ du ]   [ H du_ref + Σ λ_i dn_i ]
//! [ Nᵀ  0 ] [ y  ] = [ dd − dNᵀ u*           ],   dλ = −y.
//! ```
//!
//! The system is factored with `H + εI` and refined against the exact `H`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barriers::ConstraintRow;
use crate::safety_qp::{solve_qp, ControlBounds, QPSolution, QpStatus, SafetyQP};

/// Multiplier threshold below which a tight constraint counts as weakly active.
pub const ACTIVE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("sensitivity undefined: slack is active")]
    SlackActive,
    #[error("sensitivity undefined: solver stopped at the iteration cap")]
    NotConverged,
    #[error("sensitivity undefined: active set is rank deficient")]
    Degenerate,
    #[error("parameter {0:?} does not exist in this QP")]
    UnknownParameter(Theta),
}

/// One differentiable input of the QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Theta {
    URef(usize),
    B(usize),
    A(usize, usize),
    /// Enters every row through `∂b/∂α`.
    Alpha,
    /// Enters every row through `∂b/∂κ`.
    Kappa,
}

impl std::fmt::Display for Theta {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Theta::URef(j) => write!(f, "u_ref[{j}]"),
            Theta::B(i) => write!(f, "b[{i}]"),
            Theta::A(i, j) => write!(f, "A[{i},{j}]"),
            Theta::Alpha => write!(f, "alpha"),
            Theta::Kappa => write!(f, "kappa"),
        }
    }
}

/// Every parameter of `qp`, in a fixed order.
pub fn full_theta(qp: &SafetyQP) -> Vec<Theta> {
    let n = qp.n_u();
    let m = qp.rows().len();
    let mut t: Vec<Theta> = (0..n).map(Theta::URef).collect();
    t.extend((0..m).map(Theta::B));
    for i in 0..m {
        t.extend((0..n).map(|j| Theta::A(i, j)));
    }
    t.push(Theta::Alpha);
    t.push(Theta::Kappa);
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct KKTSensitivity {
    /// `n_u × n_θ`.
    pub du_dtheta: DMatrix<f64>,
    /// `rows × n_θ`; inactive rows are exactly zero.
    pub dlambda_dtheta: DMatrix<f64>,
    pub theta: Vec<Theta>,
    pub active_rows: Vec<usize>,
    /// `‖M x − rhs‖∞` of the exact bordered system.
    pub residual: f64,
}

impl KKTSensitivity {
    pub fn column(&self, theta: Theta) -> Option<DVector<f64>> {
        self.theta.iter().position(|&t| t == theta).map(|k| self.du_dtheta.column(k).into_owned())
    }
}

enum Active {
    Row(usize),
    Lower(usize),
    Upper(usize),
}

pub fn kkt_differentiate(qp: &SafetyQP, sol: &QPSolution, theta: &[Theta]) -> Result<KKTSensitivity, DiffError> {
    match sol.status {
        QpStatus::SlackActive => return Err(DiffError::SlackActive),
        QpStatus::MaxIter => return Err(DiffError::NotConverged),
        QpStatus::Optimal => {}
    }
    let n = qp.n_u();
    let m = qp.rows().len();
    for &t in theta {
        let ok = match t {
            Theta::URef(j) => j < n,
            Theta::B(i) => i < m,
            Theta::A(i, j) => i < m && j < n,
            Theta::Alpha | Theta::Kappa => true,
        };
        if !ok {
            return Err(DiffError::UnknownParameter(t));
        }
    }
    let mut active = Vec::new();
    for i in 0..m {
        if sol.lambda[i] > ACTIVE_TOL {
            active.push(Active::Row(i));
        }
    }
    for j in 0..n {
        if sol.lambda_lower[j] > ACTIVE_TOL {
            active.push(Active::Lower(j));
        }
        if sol.lambda_upper[j] > ACTIVE_TOL {
            active.push(Active::Upper(j));
        }
    }
    let q = active.len();
    let mut nmat = DMatrix::zeros(n, q);
    for (k, a) in active.iter().enumerate() {
        match *a {
            Active::Row(i) => nmat.set_column(k, &qp.rows()[i].a),
            Active::Lower(j) => nmat[(j, k)] = 1.0,
            Active::Upper(j) => nmat[(j, k)] = -1.0,
        }
    }
    let p = theta.len();
    let h = qp.hessian();
    let u = &sol.u_star;
    let mut r1 = DMatrix::zeros(n, p);
    let mut r2 = DMatrix::zeros(q, p);
    let pos_of_row = |i: usize| active.iter().position(|a| matches!(a, Active::Row(r) if *r == i));
    for (c, &t) in theta.iter().enumerate() {
        match t {
            Theta::URef(j) => r1.set_column(c, &h.column(j)),
            Theta::B(i) => {
                if let Some(k) = pos_of_row(i) {
                    r2[(k, c)] = 1.0;
                }
            }
            Theta::A(i, j) => {
                if let Some(k) = pos_of_row(i) {
                    r1[(j, c)] = sol.lambda[i];
                    r2[(k, c)] = -u[j];
                }
            }
            Theta::Alpha | Theta::Kappa => {
                for (k, a) in active.iter().enumerate() {
                    if let Active::Row(i) = *a {
                        let row: &ConstraintRow = &qp.rows()[i];
                        r2[(k, c)] = if t == Theta::Alpha { row.db_dalpha } else { row.db_dkappa };
                    }
                }
            }
        }
    }

    let h_reg = h + DMatrix::identity(n, n) * qp.reg_eps();
    let chol_h = h_reg.clone().cholesky().ok_or(DiffError::Degenerate)?;
    let hinv_n = chol_h.solve(&nmat);
    let schur = nmat.tr_mul(&hinv_n);
    let chol_s = if q > 0 {
        let d = schur.diagonal();
        let scale = d.max().max(1e-300);
        let c = schur.clone().cholesky().ok_or(DiffError::Degenerate)?;
        let l = c.l();
        let min_pivot = (0..q).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot < 1e-12 * scale {
            return Err(DiffError::Degenerate);
        }
        Some(c)
    } else {
        None
    };
    let solve_reg = |b1: &DMatrix<f64>, b2: &DMatrix<f64>| -> (DMatrix<f64>, DMatrix<f64>) {
        let hb1 = chol_h.solve(b1);
        let y = match &chol_s {
            Some(cs) => cs.solve(&(nmat.tr_mul(&hb1) - b2)),
            None => DMatrix::zeros(0, b1.ncols()),
        };
        let du = &hb1 - &hinv_n * &y;
        (du, y)
    };
    let apply_exact = |du: &DMatrix<f64>, y: &DMatrix<f64>| (h * du + &nmat * y, nmat.tr_mul(du));
    let (mut du, mut y) = solve_reg(&r1, &r2);
    let scale = 1.0 + r1.amax().max(r2.amax());
    let mut residual = f64::INFINITY;
    for _ in 0..30 {
        let (a1, a2) = apply_exact(&du, &y);
        let e1 = &r1 - a1;
        let e2 = &r2 - a2;
        residual = e1.amax().max(if q > 0 { e2.amax() } else { 0.0 });
        if residual <= 1e-14 * scale {
            break;
        }
        let (c1, c2) = solve_reg(&e1, &e2);
        du += c1;
        y += c2;
    }
    let mut dlambda = DMatrix::zeros(m, p);
    let mut active_rows = Vec::new();
    for (k, a) in active.iter().enumerate() {
        if let Active::Row(i) = *a {
            active_rows.push(i);
            dlambda.set_row(i, &(-y.row(k)));
        }
    }
    Ok(KKTSensitivity { du_dtheta: du, dlambda_dtheta: dlambda, theta: theta.to_vec(), active_rows, residual })
}

/// Central differences `(f(θ+h e_j) − f(θ−h e_j)) / 2h`, one column per coordinate.
pub fn finite_diff<F>(mut f: F, theta: &[f64], h: f64) -> DMatrix<f64>
where
    F: FnMut(&[f64]) -> DVector<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut x = theta.to_vec();
    let mut cols = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        x[j] = theta[j] + h;
        let fp = f(&x);
        x[j] = theta[j] - h;
        let fm = f(&x);
        x[j] = theta[j];
        cols.push((fp - fm) / (2.0 * h));
    }
    if cols.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    DMatrix::from_columns(&cols)
}

/// Copy of `qp` with each parameter shifted by the matching `delta`.
pub fn perturbed(qp: &SafetyQP, theta: &[Theta], delta: &[f64]) -> SafetyQP {
    let mut u_ref = qp.u_ref().clone();
    let mut rows = qp.rows().to_vec();
    for (&t, &d) in theta.iter().zip(delta) {
        match t {
            Theta::URef(j) => u_ref[j] += d,
            Theta::B(i) => rows[i].b += d,
            Theta::A(i, j) => rows[i].a[j] += d,
            Theta::Alpha => rows.iter_mut().for_each(|r| r.b += r.db_dalpha * d),
            Theta::Kappa => rows.iter_mut().for_each(|r| r.b += r.db_dkappa * d),
        }
    }
    qp.with_rows(rows).with_u_ref(u_ref)
}

/// Smallest gap between strict activity and inactivity over rows and bounds.
/// Values near zero mean weakly active constraints.
pub fn complementarity_margin(qp: &SafetyQP, sol: &QPSolution) -> f64 {
    let u = &sol.u_star;
    let mut margin = f64::INFINITY;
    for (i, row) in qp.rows().iter().enumerate() {
        margin = margin.min(sol.lambda[i].max(row.a.dot(u) - row.b));
    }
    for j in 0..qp.n_u() {
        if qp.lower()[j].is_finite() {
            margin = margin.min(sol.lambda_lower[j].max(u[j] - qp.lower()[j]));
        }
        if qp.upper()[j].is_finite() {
            margin = margin.min(sol.lambda_upper[j].max(qp.upper()[j] - u[j]));
        }
    }
    margin
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    /// Absolute floor of the acceptance band.
    pub tol: f64,
    pub rel_tol: f64,
    pub fd_step: f64,
    /// Extra deliberately degenerate instances appended to the batch.
    pub forced_degenerate: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { instances: 100, seed: 0, tol: 1e-5, rel_tol: 1e-4, fd_step: 1e-6, forced_degenerate: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub param: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub skipped_degenerate: usize,
    pub failures: usize,
    pub max_abs_error: f64,
    /// `|kkt − fd| / max(1, |fd|)`.
    pub max_rel_error: f64,
    pub by_param: Vec<ParamError>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random strictly convex QP with 1–4 controls, 1–3 rows and optional box.
pub fn random_qp(rng: &mut ChaCha8Rng) -> SafetyQP {
    let n = rng.random_range(1..=4usize);
    let m = rng.random_range(1..=3usize);
    let mut h = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    h = &h * h.transpose() + DMatrix::identity(n, n) * 0.5;
    let u_ref = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let rows = (0..m)
        .map(|_| {
            let a = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let b = a.dot(&x0) - rng.random_range(0.0..0.5);
            ConstraintRow { a, b, db_dalpha: -rng.random_range(0.1..2.0), db_dkappa: rng.random_range(0.0..1.0) }
        })
        .collect();
    let bounds = if rng.random_bool(0.5) {
        ControlBounds { lower: Some(vec![-1.0; n]), upper: Some(vec![1.0; n]) }
    } else {
        ControlBounds::default()
    };
    SafetyQP::new(h, u_ref, rows, vec![], &bounds, 1e4, 1e-4).expect("random QP is valid")
}

/// Duplicate active row: the copy is tight with a zero multiplier.
pub fn degenerate_qp() -> SafetyQP {
    let a = DVector::from_vec(vec![1.0, 0.0]);
    let rows = vec![ConstraintRow::plain(a.clone(), 1.0), ConstraintRow::plain(a, 1.0)];
    SafetyQP::new(DMatrix::identity(2, 2), DVector::zeros(2), rows, vec![], &ControlBounds::default(), 1e4, 1e-4).expect("valid")
}

/// Outcome of checking one instance.
pub enum InstanceCheck {
    Checked { abs: Vec<f64>, rel: Vec<f64>, failed: bool, theta: Vec<Theta> },
    Degenerate,
}

pub fn check_instance(qp: &SafetyQP, cfg: &GradcheckConfig) -> InstanceCheck {
    let Ok(sol) = solve_qp(qp, None) else { return InstanceCheck::Degenerate };
    if sol.status != QpStatus::Optimal || complementarity_margin(qp, &sol) < 1e-3 {
        return InstanceCheck::Degenerate;
    }
    let theta = full_theta(qp);
    let Ok(sens) = kkt_differentiate(qp, &sol, &theta) else { return InstanceCheck::Degenerate };
    let fd = finite_diff(
        |d| solve_qp(&perturbed(qp, &theta, d), None).map(|s| s.u_star).unwrap_or_else(|_| DVector::from_element(qp.n_u(), f64::NAN)),
        &vec![0.0; theta.len()],
        cfg.fd_step,
    );
    let mut abs = vec![0.0f64; theta.len()];
    let mut rel = vec![0.0f64; theta.len()];
    let mut failed = false;
    for c in 0..theta.len() {
        for r in 0..qp.n_u() {
            let (k, f) = (sens.du_dtheta[(r, c)], fd[(r, c)]);
            let e = (k - f).abs();
            if !(e <= cfg.tol.max(cfg.rel_tol * f.abs())) {
                failed = true;
            }
            abs[c] = abs[c].max(e);
            rel[c] = rel[c].max(e / f.abs().max(1.0));
        }
    }
    InstanceCheck::Checked { abs, rel, failed, theta }
}

fn theta_kind(t: &Theta) -> &'static str {
    match t {
        Theta::URef(_) => "u_ref",
        Theta::B(_) => "b",
        Theta::A(..) => "A",
        Theta::Alpha => "alpha",
        Theta::Kappa => "kappa",
    }
}

/// Compare implicit gradients with central differences on random instances.
///
/// Random instances that are not strictly complementary are redrawn; the
/// forced degenerate ones are counted as skipped, never as failures.
pub fn gradcheck(cfg: &GradcheckConfig) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kinds = ["u_ref", "b", "A", "alpha", "kappa"];
    let mut by_kind = [(0.0f64, 0.0f64); 5];
    let mut report = GradcheckReport { checked: 0, skipped_degenerate: 0, failures: 0, max_abs_error: 0.0, max_rel_error: 0.0, by_param: vec![] };
    let mut record = |report: &mut GradcheckReport, abs: &[f64], rel: &[f64], failed: bool, theta: &[Theta]| {
        report.checked += 1;
        report.failures += usize::from(failed);
        for (k, t) in theta.iter().enumerate() {
            let slot = kinds.iter().position(|&n| n == theta_kind(t)).expect("known kind");
            by_kind[slot].0 = by_kind[slot].0.max(abs[k]);
            by_kind[slot].1 = by_kind[slot].1.max(rel[k]);
            report.max_abs_error = report.max_abs_error.max(abs[k]);
            report.max_rel_error = report.max_rel_error.max(rel[k]);
        }
    };
    let mut attempts = 0;
    while report.checked < cfg.instances && attempts < cfg.instances * 50 {
        attempts += 1;
        let qp = random_qp(&mut rng);
        if let InstanceCheck::Checked { abs, rel, failed, theta } = check_instance(&qp, cfg) {
            record(&mut report, &abs, &rel, failed, &theta);
        }
    }
    for _ in 0..cfg.forced_degenerate {
        match check_instance(&degenerate_qp(), cfg) {
            InstanceCheck::Degenerate => report.skipped_degenerate += 1,
            InstanceCheck::Checked { abs, rel, failed, theta } => record(&mut report, &abs, &rel, failed, &theta),
        }
    }
    report.by_param = kinds
        .iter()
        .zip(by_kind)
        .map(|(n, (a, r))| ParamError { param: n.to_string(), max_abs_error: a, max_rel_error: r })
        .collect();
    report
}
