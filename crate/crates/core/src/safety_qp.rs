//! Strictly convex safety-filter QP and its dense dual active-set solver.
//!
//! The problem is
//!
//! ```text
//! min ½(u−u_ref)ᵀH(u−u_ref) + Σ w_i s_i + ½ε Σ s_i²
//! s.t. A_i u + s_i ≥ b_i,  s_i ≥ 0,  lo ≤ u ≤ hi
//! ```
//!
//! where only slack-eligible rows carry an `s_i`. The solver is a
//! Goldfarb–Idnani dual method started from `u = u_ref, s = 0` with every
//! slack bound active, so a slack leaves zero only when its row multiplier
//! would exceed the row's penalty weight. Hard rows and box bounds never get
//! slack; if they are jointly infeasible the hard rows are relaxed at an
//! emergency weight and the solution is flagged `SlackActive`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barriers::{compose_evals, composite_eval_stats, constraint_row, BarrierEval, BarrierStats, CompositeBarrier, ConstraintRow};
use crate::statespace::{eval_dynamics, Control, Covariance, ModelError, PlantModel, State};

pub const DEFAULT_SLACK_WEIGHT: f64 = 1e4;
pub const DEFAULT_REG_EPS: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 20;
/// Slack threshold separating `Optimal` from `SlackActive`.
pub const SLACK_TOL: f64 = 1e-10;
/// Penalty multiplier applied to hard rows once they must be relaxed.
pub const EMERGENCY_FACTOR: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("H is not positive definite even after regularization")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid bounds at entry {index}: lo = {lo} > hi = {hi}")]
    Bounds { index: usize, lo: f64, hi: f64 },
    #[error("invalid weight: {0}")]
    Weight(String),
    #[error("non-finite QP data: {0}")]
    NonFinite(&'static str),
    #[error("box bounds and constraints admit no solution")]
    Infeasible,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How a QP row may be relaxed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SlackPolicy {
    /// Never slackened except in the emergency re-solve.
    Hard,
    /// Slack-eligible with penalty `slack_weight · weight_scale`.
    Soft { weight_scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    SlackActive,
    MaxIter,
}

/// Identity of an inequality in the working set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintRef {
    Row(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyQP {
    pub(crate) h: DMatrix<f64>,
    pub(crate) chol_l: DMatrix<f64>,
    pub(crate) l_inv_t: DMatrix<f64>,
    pub(crate) u_ref: DVector<f64>,
    pub(crate) rows: Vec<ConstraintRow>,
    pub(crate) policies: Vec<SlackPolicy>,
    pub(crate) lower: DVector<f64>,
    pub(crate) upper: DVector<f64>,
    pub(crate) slack_weight: f64,
    pub(crate) reg_eps: f64,
    pub(crate) max_iter: usize,
}

/// Optional per-entry control bounds; `None` means unbounded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControlBounds {
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl SafetyQP {
    /// Build from an explicit Hessian. Rows without a policy default to hard.
    pub fn new(
        h: DMatrix<f64>,
        u_ref: DVector<f64>,
        rows: Vec<ConstraintRow>,
        policies: Vec<SlackPolicy>,
        bounds: &ControlBounds,
        slack_weight: f64,
        reg_eps: f64,
    ) -> Result<Self, QpError> {
        let n = u_ref.len();
        if h.nrows() != n || h.ncols() != n {
            return Err(QpError::Dim(format!("H is {}×{}, u_ref has {n} entries", h.nrows(), h.ncols())));
        }
        if h.iter().chain(u_ref.iter()).any(|x| !x.is_finite()) {
            return Err(QpError::NonFinite("H or u_ref"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.a.len() != n {
                return Err(QpError::Dim(format!("row {i} has {} entries, expected {n}", r.a.len())));
            }
            if !r.b.is_finite() || r.a.iter().any(|x| !x.is_finite()) {
                return Err(QpError::NonFinite("constraint row"));
            }
        }
        if !(slack_weight > 0.0) || !slack_weight.is_finite() {
            return Err(QpError::Weight(format!("slack weight must be positive, got {slack_weight}")));
        }
        if !(reg_eps > 0.0) {
            return Err(QpError::Weight(format!("reg_eps must be positive, got {reg_eps}")));
        }
        let mut policies = policies;
        if policies.len() > rows.len() {
            return Err(QpError::Dim(format!("{} policies for {} rows", policies.len(), rows.len())));
        }
        policies.resize(rows.len(), SlackPolicy::Hard);
        for p in &policies {
            if let SlackPolicy::Soft { weight_scale } = p {
                if !(*weight_scale > 0.0) || !weight_scale.is_finite() {
                    return Err(QpError::Weight(format!("slack weight scale must be positive, got {weight_scale}")));
                }
            }
        }
        let lower = bound_vec(bounds.lower.as_deref(), n, f64::NEG_INFINITY)?;
        let upper = bound_vec(bounds.upper.as_deref(), n, f64::INFINITY)?;
        for i in 0..n {
            if lower[i] > upper[i] || lower[i].is_nan() || upper[i].is_nan() {
                return Err(QpError::Bounds { index: i, lo: lower[i], hi: upper[i] });
            }
        }
        let h = (&h + h.transpose()) * 0.5;
        let (h, chol) = match h.clone().cholesky() {
            Some(c) => (h, c),
            None => {
                let hr = &h + DMatrix::identity(n, n) * reg_eps;
                let c = hr.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
                (hr, c)
            }
        };
        let chol_l = chol.l();
        let l_inv_t = chol_l
            .transpose()
            .solve_upper_triangular(&DMatrix::identity(n, n))
            .ok_or(QpError::NotPositiveDefinite)?;
        Ok(Self { h, chol_l, l_inv_t, u_ref, rows, policies, lower, upper, slack_weight, reg_eps, max_iter: DEFAULT_MAX_ITER })
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn u_ref(&self) -> &DVector<f64> {
        &self.u_ref
    }

    pub fn rows(&self) -> &[ConstraintRow] {
        &self.rows
    }

    pub fn policies(&self) -> &[SlackPolicy] {
        &self.policies
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn slack_weight(&self) -> f64 {
        self.slack_weight
    }

    pub fn reg_eps(&self) -> f64 {
        self.reg_eps
    }

    pub fn n_u(&self) -> usize {
        self.u_ref.len()
    }

    /// Copy with a different reference, reusing the factorization of `H`.
    pub fn with_u_ref(&self, u_ref: DVector<f64>) -> Self {
        Self { u_ref, ..self.clone() }
    }

    /// Copy with different rows, reusing the factorization of `H`.
    pub fn with_rows(&self, rows: Vec<ConstraintRow>) -> Self {
        let mut policies = self.policies.clone();
        policies.resize(rows.len(), SlackPolicy::Hard);
        Self { rows, policies, ..self.clone() }
    }

    /// Objective value at `(u, s)`.
    pub fn objective(&self, u: &DVector<f64>, slack: &[f64]) -> f64 {
        let du = u - &self.u_ref;
        let mut v = 0.5 * (&self.h * &du).dot(&du);
        for (i, s) in slack.iter().enumerate() {
            let w = match self.policies[i] {
                SlackPolicy::Hard => self.slack_weight * EMERGENCY_FACTOR,
                SlackPolicy::Soft { weight_scale } => self.slack_weight * weight_scale,
            };
            v += w * s + 0.5 * self.reg_eps * s * s;
        }
        v
    }
}

fn bound_vec(v: Option<&[f64]>, n: usize, fill: f64) -> Result<DVector<f64>, QpError> {
    match v {
        None => Ok(DVector::from_element(n, fill)),
        Some(b) if b.len() == n => Ok(DVector::from_column_slice(b)),
        Some(b) => Err(QpError::Dim(format!("bounds have {} entries, expected {n}", b.len()))),
    }
}

/// `H = R + GᵀQG` with diagonal `R ≻ 0` and `Q ⪰ 0`.
#[allow(clippy::too_many_arguments)]
pub fn build_qp(
    u_ref: DVector<f64>,
    g: &DMatrix<f64>,
    r_diag: &[f64],
    q_diag: &[f64],
    rows: Vec<ConstraintRow>,
    policies: Vec<SlackPolicy>,
    bounds: &ControlBounds,
    slack_weight: f64,
    reg_eps: f64,
) -> Result<SafetyQP, QpError> {
    let n_u = u_ref.len();
    if r_diag.len() != n_u || g.ncols() != n_u || q_diag.len() != g.nrows() {
        return Err(QpError::Dim(format!(
            "R has {} entries, G is {}×{}, Q has {} entries for n_u = {n_u}",
            r_diag.len(),
            g.nrows(),
            g.ncols(),
            q_diag.len()
        )));
    }
    if r_diag.iter().any(|&r| !(r > 0.0)) {
        return Err(QpError::Weight("R diagonal entries must be positive".into()));
    }
    if q_diag.iter().any(|&q| !(q >= 0.0)) {
        return Err(QpError::Weight("Q diagonal entries must be non-negative".into()));
    }
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(q_diag));
    let h = DMatrix::from_diagonal(&DVector::from_column_slice(r_diag)) + g.transpose() * q * g;
    SafetyQP::new(h, u_ref, rows, policies, bounds, slack_weight, reg_eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QPSolution {
    pub u_star: DVector<f64>,
    /// Row multipliers, zero for inactive rows.
    pub lambda: Vec<f64>,
    /// Row slacks, zero for hard rows unless the emergency re-solve ran.
    pub slack: Vec<f64>,
    /// Multipliers of `u ≥ lo` and `u ≤ hi`.
    pub lambda_lower: Vec<f64>,
    pub lambda_upper: Vec<f64>,
    pub iterations: usize,
    pub status: QpStatus,
    /// Rows in the final working set.
    pub active_set: Vec<usize>,
    /// Rows and bounds in the final working set, used for warm starts.
    pub working_set: Vec<ConstraintRef>,
    /// Whether hard rows had to be relaxed.
    pub emergency: bool,
}

impl QPSolution {
    pub fn max_slack(&self) -> f64 {
        self.slack.iter().copied().fold(0.0, f64::max)
    }
}

enum GiOutcome {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Per-thread scratch state of the dual active-set method.
#[derive(Debug, Default, Clone)]
pub struct QpSolver {
    normals: DMatrix<f64>,
    rhs: Vec<f64>,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    z: DVector<f64>,
    active: Vec<usize>,
    lam: Vec<f64>,
    is_active: Vec<bool>,
    kinds: Vec<CKind>,
    slot_of_row: Vec<Option<usize>>,
    n_u: usize,
    n_s: usize,
    iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CKind {
    Row(usize),
    SlackBound(usize),
    Lower(usize),
    Upper(usize),
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let r = a.hypot(b);
    if r == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / r, b / r, r)
    }
}

fn rotate_cols(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (x, y) = (m[(i, a)], m[(i, b)]);
        m[(i, a)] = c * x + s * y;
        m[(i, b)] = -s * x + c * y;
    }
}

impl QpSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Solve `qp`, optionally warm-starting from a previous solution.
    pub fn solve(&mut self, qp: &SafetyQP, warm: Option<&QPSolution>) -> Result<QPSolution, QpError> {
        let warm = warm.filter(|w| !w.emergency && w.status != QpStatus::SlackActive && !w.working_set.is_empty());
        let outcome = self.run(qp, false, warm)?;
        let mut iterations = self.iterations;
        let (outcome, emergency) = match outcome {
            GiOutcome::Infeasible => {
                let o = self.run(qp, true, None)?;
                iterations += self.iterations;
                if matches!(o, GiOutcome::Infeasible) {
                    return Err(QpError::Infeasible);
                }
                (o, true)
            }
            o => (o, false),
        };
        Ok(self.extract(qp, outcome, iterations, emergency))
    }

    fn setup(&mut self, qp: &SafetyQP, emergency: bool) {
        let n_u = qp.n_u();
        let m = qp.rows.len();
        self.slot_of_row.clear();
        let mut n_s = 0;
        for p in &qp.policies {
            let slackened = emergency || matches!(p, SlackPolicy::Soft { .. });
            self.slot_of_row.push(if slackened {
                n_s += 1;
                Some(n_s - 1)
            } else {
                None
            });
        }
        let nz = n_u + n_s;
        let mut cons: Vec<CKind> = (0..m).map(CKind::Row).collect();
        cons.extend((0..n_s).map(CKind::SlackBound));
        for j in 0..n_u {
            if qp.lower[j].is_finite() {
                cons.push(CKind::Lower(j));
            }
            if qp.upper[j].is_finite() {
                cons.push(CKind::Upper(j));
            }
        }
        let nc = cons.len();
        self.normals = DMatrix::zeros(nz, nc);
        self.rhs.clear();
        self.kinds.clear();
        for (c, kind) in cons.iter().enumerate() {
            match *kind {
                CKind::Row(i) => {
                    self.normals.view_mut((0, c), (n_u, 1)).copy_from(&qp.rows[i].a);
                    if let Some(k) = self.slot_of_row[i] {
                        self.normals[(n_u + k, c)] = 1.0;
                    }
                    self.rhs.push(qp.rows[i].b);
                }
                CKind::SlackBound(k) => {
                    self.normals[(n_u + k, c)] = 1.0;
                    self.rhs.push(0.0);
                }
                CKind::Lower(j) => {
                    self.normals[(j, c)] = 1.0;
                    self.rhs.push(qp.lower[j]);
                }
                CKind::Upper(j) => {
                    self.normals[(j, c)] = -1.0;
                    self.rhs.push(-qp.upper[j]);
                }
            }
            self.kinds.push(*kind);
        }
        self.n_u = n_u;
        self.n_s = n_s;
        // Start at (u_ref, 0) with every slack bound active. With
        // P = blockdiag(H, εI) the slack-bound normals are P-orthogonal to the
        // control block, so J and R are known in closed form.
        let inv_sqrt = 1.0 / qp.reg_eps.sqrt();
        self.j = DMatrix::zeros(nz, nz);
        self.r = DMatrix::zeros(nz, nz);
        for k in 0..n_s {
            self.j[(n_u + k, k)] = inv_sqrt;
            self.r[(k, k)] = inv_sqrt;
        }
        self.j.view_mut((0, n_s), (n_u, n_u)).copy_from(&qp.l_inv_t);
        self.z = DVector::zeros(nz);
        self.z.rows_mut(0, n_u).copy_from(&qp.u_ref);
        self.is_active = vec![false; nc];
        self.active.clear();
        self.lam.clear();
        for k in 0..n_s {
            self.active.push(m + k);
            self.is_active[m + k] = true;
            self.lam.push(self.slack_penalty(qp, k));
        }
        self.iterations = 0;
    }

    fn slack_penalty(&self, qp: &SafetyQP, slot: usize) -> f64 {
        let row = self.slot_of_row.iter().position(|s| *s == Some(slot)).expect("slot has a row");
        match qp.policies[row] {
            SlackPolicy::Hard => qp.slack_weight * EMERGENCY_FACTOR,
            SlackPolicy::Soft { weight_scale } => qp.slack_weight * weight_scale,
        }
    }

    /// Gradient of the objective at `(u_ref, 0)`: zero on controls, penalties on slacks.
    fn base_gradient(&self, qp: &SafetyQP) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_u + self.n_s);
        for k in 0..self.n_s {
            g[self.n_u + k] = self.slack_penalty(qp, k);
        }
        g
    }

    fn q(&self) -> usize {
        self.active.len()
    }

    /// Append constraint `c` to the factorization. Returns false when its
    /// normal is dependent on the working set.
    fn add_to_factor(&mut self, c: usize, mut d: DVector<f64>) -> bool {
        let q = self.q();
        let nz = d.len();
        let tail: f64 = d.rows(q, nz - q).norm_squared();
        if tail <= 1e-20 * d.norm_squared().max(1e-300) {
            return false;
        }
        for jj in ((q + 1)..nz).rev() {
            if d[jj] == 0.0 {
                continue;
            }
            let (cg, sg, r) = givens(d[jj - 1], d[jj]);
            d[jj - 1] = r;
            d[jj] = 0.0;
            rotate_cols(&mut self.j, jj - 1, jj, cg, sg);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.active.push(c);
        self.is_active[c] = true;
        true
    }

    fn drop_from_factor(&mut self, k: usize) {
        let q = self.q();
        for col in k..q - 1 {
            for i in 0..q {
                self.r[(i, col)] = self.r[(i, col + 1)];
            }
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
        for jj in k..q - 1 {
            let (cg, sg, rr) = givens(self.r[(jj, jj)], self.r[(jj + 1, jj)]);
            self.r[(jj, jj)] = rr;
            self.r[(jj + 1, jj)] = 0.0;
            for col in (jj + 1)..(q - 1) {
                let (x, y) = (self.r[(jj, col)], self.r[(jj + 1, col)]);
                self.r[(jj, col)] = cg * x + sg * y;
                self.r[(jj + 1, col)] = -sg * x + cg * y;
            }
            rotate_cols(&mut self.j, jj, jj + 1, cg, sg);
        }
        let c = self.active.remove(k);
        self.is_active[c] = false;
        self.lam.remove(k);
    }

    fn solve_r(&self, rhs: &[f64]) -> Vec<f64> {
        let q = rhs.len();
        let mut x = rhs.to_vec();
        for i in (0..q).rev() {
            let mut s = x[i];
            for jj in (i + 1)..q {
                s -= self.r[(i, jj)] * x[jj];
            }
            x[i] = s / self.r[(i, i)];
        }
        x
    }

    fn solve_rt(&self, rhs: &[f64]) -> Vec<f64> {
        let q = rhs.len();
        let mut x = rhs.to_vec();
        for i in 0..q {
            let mut s = x[i];
            for jj in 0..i {
                s -= self.r[(jj, i)] * x[jj];
            }
            x[i] = s / self.r[(i, i)];
        }
        x
    }

    fn slack_of(&self, c: usize) -> f64 {
        self.normals.column(c).dot(&self.z) - self.rhs[c]
    }

    /// Equality-constrained minimizer on the current working set, measured
    /// from the base point `(u_ref, 0)`.
    fn equality_solve(&mut self, qp: &SafetyQP, base_grad: &DVector<f64>) {
        let q = self.q();
        let nz = self.z.len();
        let mut base = DVector::zeros(nz);
        base.rows_mut(0, self.n_u).copy_from(&qp.u_ref);
        let e: Vec<f64> = self.active.iter().map(|&c| self.rhs[c] - self.normals.column(c).dot(&base)).collect();
        let w = self.solve_rt(&e);
        let mut z = base;
        for (i, wi) in w.iter().enumerate() {
            z.axpy(*wi, &self.j.column(i), 1.0);
        }
        let j2 = self.j.columns(q, nz - q);
        let proj = j2.tr_mul(base_grad);
        z -= j2 * proj;
        let j1g: Vec<f64> = (0..q).map(|i| self.j.column(i).dot(base_grad) + w[i]).collect();
        self.lam = self.solve_r(&j1g);
        self.z = z;
    }

    fn warm_start(&mut self, qp: &SafetyQP, warm: &QPSolution, base_grad: &DVector<f64>) -> bool {
        let mut added = false;
        for wref in &warm.working_set {
            let c = self.kinds.iter().position(|k| match (*k, *wref) {
                (CKind::Row(i), ConstraintRef::Row(r)) => i == r,
                (CKind::Lower(i), ConstraintRef::Lower(r)) => i == r,
                (CKind::Upper(i), ConstraintRef::Upper(r)) => i == r,
                _ => false,
            });
            let Some(c) = c else { continue };
            if self.is_active[c] {
                continue;
            }
            let d = self.j.tr_mul(&self.normals.column(c));
            if self.add_to_factor(c, d) {
                added = true;
                self.lam.push(0.0);
            }
        }
        if !added {
            return true;
        }
        self.iterations += 1;
        loop {
            self.equality_solve(qp, base_grad);
            let mut worst: Option<(usize, f64)> = None;
            for (k, &l) in self.lam.iter().enumerate() {
                if l < 0.0 && worst.is_none_or(|(_, v)| l < v) {
                    worst = Some((k, l));
                }
            }
            let Some((k, _)) = worst else { return true };
            if matches!(self.kinds[self.active[k]], CKind::SlackBound(_)) {
                return false;
            }
            self.drop_from_factor(k);
            self.iterations += 1;
        }
    }

    fn run(&mut self, qp: &SafetyQP, emergency: bool, warm: Option<&QPSolution>) -> Result<GiOutcome, QpError> {
        self.setup(qp, emergency);
        if let Some(w) = warm {
            let base_grad = self.base_gradient(qp);
            if !self.warm_start(qp, w, &base_grad) {
                self.setup(qp, emergency);
            }
        }
        let nc = self.kinds.len();
        let nz = self.z.len();
        loop {
            let mut p = None;
            let mut worst = 0.0;
            for c in 0..nc {
                if self.is_active[c] {
                    continue;
                }
                let s = self.slack_of(c);
                let tol = 1e-12 * (1.0 + self.rhs[c].abs());
                if s < -tol && (p.is_none() || s < worst) {
                    worst = s;
                    p = Some(c);
                }
            }
            let Some(p) = p else { return Ok(GiOutcome::Optimal) };
            let np = self.normals.column(p).into_owned();
            let mut lam_p = 0.0;
            loop {
                if self.iterations >= qp.max_iter {
                    return Ok(GiOutcome::MaxIter);
                }
                let q = self.q();
                let d = self.j.tr_mul(&np);
                let mut zdir = DVector::zeros(nz);
                for i in q..nz {
                    zdir.axpy(d[i], &self.j.column(i), 1.0);
                }
                let r = self.solve_r(&d.as_slice()[..q]);
                let mut t1 = f64::INFINITY;
                let mut k_block = None;
                for (k, &rk) in r.iter().enumerate() {
                    if rk > 1e-14 {
                        let v = self.lam[k] / rk;
                        if v < t1 {
                            t1 = v;
                            k_block = Some(k);
                        }
                    }
                }
                let zn: f64 = d.rows(q, nz - q).norm_squared();
                let t2 = if zn > 1e-20 * d.norm_squared().max(1e-300) {
                    -(np.dot(&self.z) - self.rhs[p]) / zn
                } else {
                    f64::INFINITY
                };
                if t1.is_infinite() && t2.is_infinite() {
                    return Ok(GiOutcome::Infeasible);
                }
                let t = t1.min(t2);
                for (k, rk) in r.iter().enumerate() {
                    self.lam[k] -= t * rk;
                }
                lam_p += t;
                self.iterations += 1;
                if t2.is_finite() {
                    self.z.axpy(t, &zdir, 1.0);
                }
                if t2 <= t1 {
                    self.add_to_factor(p, d);
                    self.lam.push(lam_p);
                    break;
                }
                let k = k_block.expect("partial step has a blocking constraint");
                self.lam[k] = 0.0;
                self.drop_from_factor(k);
            }
        }
    }

    fn extract(&self, qp: &SafetyQP, outcome: GiOutcome, iterations: usize, emergency: bool) -> QPSolution {
        let n_u = qp.n_u();
        let m = qp.rows.len();
        let u_star = self.z.rows(0, n_u).into_owned();
        let mut lambda = vec![0.0; m];
        let mut lambda_lower = vec![0.0; n_u];
        let mut lambda_upper = vec![0.0; n_u];
        let mut active_set = Vec::new();
        let mut working_set = Vec::new();
        for (k, &c) in self.active.iter().enumerate() {
            let l = self.lam[k].max(0.0);
            match self.kinds[c] {
                CKind::Row(i) => {
                    lambda[i] = l;
                    active_set.push(i);
                    working_set.push(ConstraintRef::Row(i));
                }
                CKind::Lower(j) => {
                    lambda_lower[j] = l;
                    working_set.push(ConstraintRef::Lower(j));
                }
                CKind::Upper(j) => {
                    lambda_upper[j] = l;
                    working_set.push(ConstraintRef::Upper(j));
                }
                CKind::SlackBound(_) => {}
            }
        }
        active_set.sort_unstable();
        let slack: Vec<f64> = (0..m)
            .map(|i| self.slot_of_row[i].map_or(0.0, |k| {
                let s = self.z[n_u + k];
                if s > SLACK_TOL { s } else { 0.0 }
            }))
            .collect();
        let status = match outcome {
            GiOutcome::MaxIter => QpStatus::MaxIter,
            _ if emergency || slack.iter().any(|&s| s > SLACK_TOL) => QpStatus::SlackActive,
            _ => QpStatus::Optimal,
        };
        QPSolution { u_star, lambda, slack, lambda_lower, lambda_upper, iterations, status, active_set, working_set, emergency }
    }
}

/// One-shot solve with a fresh solver context.
pub fn solve_qp(qp: &SafetyQP, warm: Option<&QPSolution>) -> Result<QPSolution, QpError> {
    QpSolver::new().solve(qp, warm)
}

/// Stationarity residual `‖H(u−u_ref) − Σλ_i A_iᵀ − λ_lo + λ_hi‖∞`.
pub fn kkt_residual(qp: &SafetyQP, sol: &QPSolution) -> f64 {
    let mut g = &qp.h * (&sol.u_star - &qp.u_ref);
    for (row, &l) in qp.rows.iter().zip(&sol.lambda) {
        g.axpy(-l, &row.a, 1.0);
    }
    for j in 0..qp.n_u() {
        g[j] -= sol.lambda_lower[j] - sol.lambda_upper[j];
    }
    g.amax()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowMode {
    /// One log-sum-exp row over hard members, one row per soft member.
    #[default]
    Composite,
    /// One row per member.
    PerConstraint,
}

fn default_true() -> bool {
    true
}

fn default_slack_weight() -> f64 {
    DEFAULT_SLACK_WEIGHT
}

fn default_reg_eps() -> f64 {
    DEFAULT_REG_EPS
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

/// Assembly options of the per-step safety filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default)]
    pub mode: RowMode,
    /// Include `½Tr(∇²hΣ)` in the rows.
    #[serde(default = "default_true")]
    pub ito: bool,
    /// Include `κσ_h` in the rows.
    #[serde(default = "default_true")]
    pub variance: bool,
    /// Constant inflation added to every row's right-hand side.
    #[serde(default)]
    pub margin: f64,
    /// Diagonal of `R`; defaults to ones.
    #[serde(default)]
    pub r_weights: Option<Vec<f64>>,
    /// Diagonal of `Q`; defaults to zeros.
    #[serde(default)]
    pub q_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub u_min: Option<Vec<f64>>,
    #[serde(default)]
    pub u_max: Option<Vec<f64>>,
    #[serde(default = "default_slack_weight")]
    pub slack_weight: f64,
    #[serde(default = "default_reg_eps")]
    pub reg_eps: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mode: RowMode::Composite,
            ito: true,
            variance: true,
            margin: 0.0,
            r_weights: None,
            q_weights: None,
            u_min: None,
            u_max: None,
            slack_weight: DEFAULT_SLACK_WEIGHT,
            reg_eps: DEFAULT_REG_EPS,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// Statistics behind one QP row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowInfo {
    pub members: Vec<usize>,
    pub policy: SlackPolicy,
    pub stats: BarrierStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub solution: QPSolution,
    pub qp: SafetyQP,
    pub rows: Vec<RowInfo>,
    /// Composite statistics over the hard members only.
    pub hard: BarrierStats,
    /// Atomic evaluations of every member, in member order.
    pub member_evals: Vec<BarrierEval>,
}

/// Risk parameters applied at one control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPair {
    pub alpha: f64,
    pub kappa: f64,
}

fn apply_flags(mut s: BarrierStats, cfg: &FilterConfig) -> BarrierStats {
    if !cfg.ito {
        s.ito = 0.0;
    }
    if !cfg.variance {
        s.sigma_h = 0.0;
    }
    s
}

/// Statistics → rows → QP → solution for one control step.
///
/// `policies` align with `barriers.members()`; an empty slice marks every
/// member hard.
#[allow(clippy::too_many_arguments)]
pub fn solve_filter_step(
    plant: &PlantModel,
    barriers: &CompositeBarrier,
    policies: &[SlackPolicy],
    xi: &State,
    t: f64,
    sigma: &Covariance,
    params: RiskPair,
    u_ref: &Control,
    cfg: &FilterConfig,
    warm: Option<&QPSolution>,
    solver: &mut QpSolver,
) -> Result<FilterStep, QpError> {
    let (f, g) = eval_dynamics(plant, xi, t)?;
    let members: Vec<BarrierEval> = barriers.members().iter().map(|b| crate::barriers::eval_barrier(b, xi)).collect();
    let policy = |i: usize| policies.get(i).copied().unwrap_or(SlackPolicy::Hard);
    let hard_idx: Vec<usize> = (0..members.len()).filter(|&i| matches!(policy(i), SlackPolicy::Hard)).collect();
    let soft_idx: Vec<usize> = (0..members.len()).filter(|&i| !matches!(policy(i), SlackPolicy::Hard)).collect();
    let beta = barriers.beta();
    let stats_of = |idx: &[usize]| {
        let ev = compose_evals(idx.iter().map(|&i| members[i].clone()).collect(), beta);
        apply_flags(composite_eval_stats(&ev, &f, &g, sigma), cfg)
    };
    let hard = if hard_idx.is_empty() { stats_of(&(0..members.len()).collect::<Vec<_>>()) } else { stats_of(&hard_idx) };

    let mut infos = Vec::new();
    match cfg.mode {
        RowMode::Composite => {
            if !hard_idx.is_empty() {
                infos.push(RowInfo { members: hard_idx.clone(), policy: SlackPolicy::Hard, stats: hard.clone() });
            }
            for &i in &soft_idx {
                infos.push(RowInfo { members: vec![i], policy: policy(i), stats: stats_of(&[i]) });
            }
        }
        RowMode::PerConstraint => {
            for i in 0..members.len() {
                infos.push(RowInfo { members: vec![i], policy: policy(i), stats: stats_of(&[i]) });
            }
        }
    }
    let rows: Vec<ConstraintRow> = infos
        .iter()
        .map(|info| {
            let mut row = constraint_row(&info.stats, params.alpha, params.kappa);
            row.b += cfg.margin;
            row
        })
        .collect();
    let n_u = plant.control_dim();
    let r = cfg.r_weights.clone().unwrap_or_else(|| vec![1.0; n_u]);
    let q = cfg.q_weights.clone().unwrap_or_else(|| vec![0.0; plant.state_dim()]);
    let bounds = ControlBounds { lower: cfg.u_min.clone(), upper: cfg.u_max.clone() };
    let qp = build_qp(u_ref.clone(), &g, &r, &q, rows, infos.iter().map(|i| i.policy).collect(), &bounds, cfg.slack_weight, cfg.reg_eps)?
        .with_max_iter(cfg.max_iter);
    let solution = solver.solve(&qp, warm)?;
    Ok(FilterStep { solution, qp, rows: infos, hard, member_evals: members })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barriers::{Barrier, BarrierShape};
    use crate::statespace::{CovarianceKind, PlantSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    fn qp(h: DMatrix<f64>, u_ref: &[f64], rows: Vec<(Vec<f64>, f64)>) -> SafetyQP {
        let rows = rows.into_iter().map(|(a, b)| ConstraintRow::plain(v(&a), b)).collect();
        SafetyQP::new(h, v(u_ref), rows, vec![], &ControlBounds::default(), DEFAULT_SLACK_WEIGHT, DEFAULT_REG_EPS).unwrap()
    }

    /// Dual coordinate ascent on `max_λ≥0` of the Lagrange dual, run to a
    /// fixed point. Handles rows plus finite box bounds, no slack.
    pub(crate) fn dual_oracle(q: &SafetyQP) -> DVector<f64> {
        let n = q.n_u();
        let mut normals: Vec<(DVector<f64>, f64)> = q.rows.iter().map(|r| (r.a.clone(), r.b)).collect();
        for j in 0..n {
            if q.lower[j].is_finite() {
                let mut e = DVector::zeros(n);
                e[j] = 1.0;
                normals.push((e, q.lower[j]));
            }
            if q.upper[j].is_finite() {
                let mut e = DVector::zeros(n);
                e[j] = -1.0;
                normals.push((e, -q.upper[j]));
            }
        }
        let hinv = q.h.clone().try_inverse().unwrap();
        let hn: Vec<DVector<f64>> = normals.iter().map(|(a, _)| &hinv * a).collect();
        let mut lam = vec![0.0; normals.len()];
        let mut u = q.u_ref.clone();
        for _ in 0..200_000 {
            let mut change = 0.0f64;
            for (i, (a, b)) in normals.iter().enumerate() {
                let denom = a.dot(&hn[i]);
                if denom <= 0.0 {
                    continue;
                }
                let new = (lam[i] + (b - a.dot(&u)) / denom).max(0.0);
                let dl = new - lam[i];
                if dl != 0.0 {
                    u.axpy(dl, &hn[i], 1.0);
                    lam[i] = new;
                    change = change.max(dl.abs());
                }
            }
            if change < 1e-15 {
                break;
            }
        }
        u
    }

    #[test]
    fn inactive_filter_returns_reference() {
        let q = qp(eye(2), &[1.0, 2.0], vec![(vec![1.0, 0.0], -5.0)]);
        let s = solve_qp(&q, None).unwrap();
        assert_eq!(s.u_star.as_slice(), &[1.0, 2.0]);
        assert_eq!(s.lambda, vec![0.0]);
        assert_eq!(s.slack, vec![0.0]);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn scalar_projection() {
        let s = solve_qp(&qp(eye(1), &[-3.0], vec![(vec![1.0], 0.0)]), None).unwrap();
        assert!(s.u_star[0].abs() < 1e-14);
        assert!((s.lambda[0] - 3.0).abs() < 1e-12);
        assert_eq!(s.active_set, vec![0]);
    }

    #[test]
    fn halfspace_projection_2d() {
        let s = solve_qp(&qp(eye(2), &[0.0, 0.0], vec![(vec![1.0, 0.0], 1.0)]), None).unwrap();
        assert!((s.u_star[0] - 1.0).abs() < 1e-14 && s.u_star[1].abs() < 1e-14);
        assert!((s.lambda[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn build_qp_examples() {
        let g = eye(2);
        let q0 = build_qp(v(&[0.0, 0.0]), &g, &[1.0, 1.0], &[0.0, 0.0], vec![], vec![], &ControlBounds::default(), 1e4, 1e-4).unwrap();
        assert_eq!(q0.hessian(), &eye(2));
        let q1 = build_qp(v(&[0.0, 0.0]), &g, &[1.0, 1.0], &[1.0, 1.0], vec![], vec![], &ControlBounds::default(), 1e4, 1e-4).unwrap();
        assert!((q1.hessian() - eye(2) * 2.0).amax() < 1e-15);
        let g = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let q2 = build_qp(v(&[0.0, 0.0]), &g, &[1.0, 2.0], &[3.0], vec![], vec![], &ControlBounds::default(), 1e4, 1e-4).unwrap();
        let oracle = DMatrix::from_row_slice(2, 2, &[4.0, 3.0, 3.0, 5.0]);
        assert!((q2.hessian() - oracle).amax() < 1e-14);
        assert!(build_qp(v(&[0.0]), &eye(1), &[0.0], &[0.0], vec![], vec![], &ControlBounds::default(), 1e4, 1e-4).is_err());
    }

    #[test]
    fn invalid_bounds_rejected() {
        let b = ControlBounds { lower: Some(vec![1.0]), upper: Some(vec![0.0]) };
        let e = SafetyQP::new(eye(1), v(&[0.0]), vec![], vec![], &b, 1e4, 1e-4).unwrap_err();
        assert!(matches!(e, QpError::Bounds { index: 0, .. }));
    }

    #[test]
    fn box_bounds_clip_reference() {
        let b = ControlBounds { lower: Some(vec![-1.0, -1.0]), upper: Some(vec![1.0, 1.0]) };
        let q = SafetyQP::new(eye(2), v(&[3.0, -0.5]), vec![], vec![], &b, 1e4, 1e-4).unwrap();
        let s = solve_qp(&q, None).unwrap();
        assert_eq!(s.u_star.as_slice(), &[1.0, -0.5]);
        assert!((s.lambda_upper[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn soft_conflict_slackens_soft_row_only() {
        // Hard: u ≥ 0. Soft: −u ≥ 1 (u ≤ −1). Box: u ≤ 2.
        let rows = vec![ConstraintRow::plain(v(&[1.0]), 0.0), ConstraintRow::plain(v(&[-1.0]), 1.0)];
        let pol = vec![SlackPolicy::Hard, SlackPolicy::Soft { weight_scale: 1.0 }];
        let b = ControlBounds { lower: None, upper: Some(vec![2.0]) };
        let q = SafetyQP::new(eye(1), v(&[0.5]), rows, pol, &b, 1e4, 1e-4).unwrap();
        let s = solve_qp(&q, None).unwrap();
        assert_eq!(s.status, QpStatus::SlackActive);
        assert_eq!(s.slack[0], 0.0);
        assert!(s.slack[1] > 0.99);
        assert!(s.u_star[0].abs() < 1e-9);
        assert!(!s.emergency);
    }

    #[test]
    fn hard_infeasible_triggers_emergency() {
        let rows = vec![ConstraintRow::plain(v(&[1.0]), 3.0)];
        let b = ControlBounds { lower: Some(vec![-1.0]), upper: Some(vec![1.0]) };
        let q = SafetyQP::new(eye(1), v(&[0.0]), rows, vec![], &b, 1e4, 1e-4).unwrap();
        let s = solve_qp(&q, None).unwrap();
        assert!(s.emergency);
        assert_eq!(s.status, QpStatus::SlackActive);
        assert!((s.u_star[0] - 1.0).abs() < 1e-9);
        assert!((s.slack[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn max_iter_reported() {
        let rows: Vec<(Vec<f64>, f64)> = (0..4).map(|k| {
            let th = k as f64 * 0.3;
            (vec![th.cos(), th.sin()], 1.0)
        }).collect();
        let q = qp(eye(2), &[-5.0, -5.0], rows).with_max_iter(1);
        let s = solve_qp(&q, None).unwrap();
        assert_eq!(s.status, QpStatus::MaxIter);
        assert_eq!(s.iterations, 1);
    }

    fn random_qp(rng: &mut ChaCha8Rng, bounded: bool) -> SafetyQP {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=3);
        let mut h = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        h = &h * h.transpose() + eye(n) * 0.5;
        let u_ref = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        // Rows pass through a common interior point so the problem is feasible.
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
        let rows = (0..m)
            .map(|_| {
                let a = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                let b = a.dot(&x0) - rng.random_range(0.0..0.5);
                ConstraintRow::plain(a, b)
            })
            .collect();
        let bounds = if bounded {
            ControlBounds { lower: Some(vec![-1.0; n]), upper: Some(vec![1.0; n]) }
        } else {
            ControlBounds::default()
        };
        SafetyQP::new(h, u_ref, rows, vec![], &bounds, 1e4, 1e-4).unwrap()
    }

    #[test]
    fn matches_dual_oracle_and_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..500 {
            let q = random_qp(&mut rng, trial % 2 == 0);
            let s = solve_qp(&q, None).unwrap();
            assert_eq!(s.status, QpStatus::Optimal, "trial {trial}");
            assert!(s.max_slack() <= 1e-10);
            let u = dual_oracle(&q);
            assert!((&s.u_star - u).amax() < 1e-8, "trial {trial}");
            assert!(kkt_residual(&q, &s) < 1e-8);
            for (i, row) in q.rows.iter().enumerate() {
                let gap = row.a.dot(&s.u_star) - row.b;
                assert!(gap >= -1e-9);
                assert!((s.lambda[i] * gap).abs() < 1e-8);
                assert!(s.lambda[i] >= 0.0);
            }
        }
    }

    #[test]
    fn single_active_row_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..=4);
            let mut h = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            h = &h * h.transpose() + eye(n);
            let a = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let u_ref = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let b = a.dot(&u_ref) + rng.random_range(0.1..1.0);
            let q = SafetyQP::new(h.clone(), u_ref.clone(), vec![ConstraintRow::plain(a.clone(), b)], vec![], &ControlBounds::default(), 1e4, 1e-4).unwrap();
            let s = solve_qp(&q, None).unwrap();
            let hinv_a = h.clone().lu().solve(&a).unwrap();
            let u = &u_ref + &hinv_a * ((b - a.dot(&u_ref)) / a.dot(&hinv_a));
            assert!((&s.u_star - u).amax() < 1e-10);
        }
    }

    #[test]
    fn warm_start_never_costs_more_along_trajectory() {
        let n = 4;
        let h = eye(n) * 2.0;
        let mut solver = QpSolver::new();
        let mut prev: Option<QPSolution> = None;
        let (mut warm_it, mut cold_it) = (0usize, 0usize);
        for k in 0..1000 {
            let t = k as f64 * 0.01;
            let u_ref = DVector::from_fn(n, |i, _| (t + i as f64).sin() * 2.0);
            let rows = (0..3)
                .map(|r| {
                    let a = DVector::from_fn(n, |i, _| ((r * n + i) as f64 + 0.3 * t).cos());
                    ConstraintRow::plain(a, 0.5)
                })
                .collect();
            let b = ControlBounds { lower: Some(vec![-1.5; n]), upper: Some(vec![1.5; n]) };
            let q = SafetyQP::new(h.clone(), u_ref, rows, vec![], &b, 1e4, 1e-4).unwrap();
            let cold = solver.solve(&q, None).unwrap();
            let warm = solver.solve(&q, prev.as_ref()).unwrap();
            assert!((&cold.u_star - &warm.u_star).amax() < 1e-9, "step {k}");
            cold_it += cold.iterations;
            warm_it += warm.iterations;
            prev = Some(warm);
        }
        assert!(warm_it <= cold_it, "warm {warm_it} cold {cold_it}");
    }

    #[test]
    fn increasing_kappa_tightens() {
        let mut prev = f64::NEG_INFINITY;
        for kappa in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let q = qp(eye(1), &[-3.0], vec![(vec![1.0], -1.0 + kappa * 0.5)]);
            let u = solve_qp(&q, None).unwrap().u_star[0];
            assert!(u >= prev);
            prev = u;
        }
    }

    fn scalar_plant() -> PlantModel {
        PlantModel::from_spec(&PlantSpec::ScalarIntegrator { drift_gain: 0.0, drift_bias: 0.0 }).unwrap()
    }

    fn scalar_step(u_ref: f64, sigma: f64) -> f64 {
        // h = x − 0 with x = 1 gives L_G h = 1, h = 1; Σ = σ² so σ_h = σ.
        let plant = scalar_plant();
        let cb = CompositeBarrier::new(vec![Barrier::hard("x", BarrierShape::Halfspace { normal: vec![1.0], offset: 0.0 })], 10.0).unwrap();
        let cov = Covariance::diagonal(&[sigma * sigma], CovarianceKind::Fused);
        let step = solve_filter_step(
            &plant,
            &cb,
            &[],
            &v(&[1.0]),
            0.0,
            &cov,
            RiskPair { alpha: 1.0, kappa: 2.0 },
            &v(&[u_ref]),
            &FilterConfig::default(),
            None,
            &mut QpSolver::new(),
        )
        .unwrap();
        step.solution.u_star[0]
    }

    #[test]
    fn scalar_filter_examples() {
        assert!(scalar_step(-3.0, 0.5).abs() < 1e-14);
        assert_eq!(scalar_step(5.0, 0.5), 5.0);
        assert!((scalar_step(-3.0, 0.0) + 1.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn lipschitz_in_reference(seed in 0u64..500, dx in -1e-3f64..1e-3, dy in -1e-3f64..1e-3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_qp(&mut rng, false);
            let n = q.n_u();
            let s0 = solve_qp(&q, None).unwrap();
            let mut delta = DVector::zeros(n);
            delta[0] = dx;
            if n > 1 { delta[1] = dy; }
            let s1 = solve_qp(&q.with_u_ref(&q.u_ref + &delta), None).unwrap();
            let eig = q.h.clone().symmetric_eigen().eigenvalues;
            let l = 10.0 * eig.max() / eig.min();
            prop_assert!((&s1.u_star - &s0.u_star).norm() <= l * delta.norm() + 1e-12);
        }

        #[test]
        fn feasible_problems_never_use_slack(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_qp(&mut rng, true);
            let pol = vec![SlackPolicy::Soft { weight_scale: 1.0 }; q.rows.len()];
            let soft = SafetyQP { policies: pol, ..q.clone() };
            let s = solve_qp(&soft, None).unwrap();
            let hard = solve_qp(&q, None).unwrap();
            if !hard.emergency {
                prop_assert!(s.max_slack() <= 1e-10);
                prop_assert!((&s.u_star - &hard.u_star).amax() < 1e-9);
            }
        }
    }
}
