//! Solver timing on slowly varying QP trajectories.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barriers::ConstraintRow;
use crate::safety_qp::{ControlBounds, QPSolution, QpError, QpSolver, SafetyQP, DEFAULT_REG_EPS, DEFAULT_SLACK_WEIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_u: usize,
    pub rows: usize,
    pub solves: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { n_u: 12, rows: 8, solves: 100_000, seed: 7 }
    }
}

/// Timing and iteration statistics in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub median_us: f64,
    pub p95_us: f64,
    pub mean_us: f64,
    pub mean_iterations: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub warm: SolveStats,
    pub cold: SolveStats,
    /// Largest `|u_warm − u_cold|` seen along the trajectory.
    pub max_solution_gap: f64,
}

/// A seeded trajectory of QPs with fixed `H` and rows, drifting `u_ref` and
/// right-hand sides, so that the active set changes only occasionally.
pub struct Trajectory {
    base: SafetyQP,
    b0: Vec<f64>,
    phase: Vec<f64>,
    u_dir: DVector<f64>,
    bounds: ControlBounds,
}

impl Trajectory {
    pub fn new(n_u: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n_u, n_u, |_, _| rng.random_range(-1.0..1.0));
        let h = &x * x.transpose() / n_u as f64 + DMatrix::identity(n_u, n_u);
        let rows: Vec<ConstraintRow> = (0..m)
            .map(|_| ConstraintRow::plain(DVector::from_fn(n_u, |_, _| rng.random_range(-1.0..1.0)), 0.0))
            .collect();
        let b0 = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
        let phase = (0..m).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let u_dir = DVector::from_fn(n_u, |_, _| rng.random_range(-1.0..1.0));
        let bounds = ControlBounds { lower: Some(vec![-3.0; n_u]), upper: Some(vec![3.0; n_u]) };
        let base = SafetyQP::new(h, DVector::zeros(n_u), rows, vec![], &bounds, DEFAULT_SLACK_WEIGHT, DEFAULT_REG_EPS).expect("well-posed bench QP");
        Self { base, b0, phase, u_dir, bounds }
    }

    /// QP at step `k`.
    pub fn at(&self, k: usize) -> Result<SafetyQP, QpError> {
        let t = k as f64 * 0.01;
        let u_ref = &self.u_dir * (2.0 * (0.3 * t).sin());
        let rows = self
            .base
            .rows()
            .iter()
            .zip(self.b0.iter().zip(&self.phase))
            .map(|(r, (b0, ph))| ConstraintRow::plain(r.a.clone(), b0 + 0.5 * (0.7 * t + ph).sin()))
            .collect();
        SafetyQP::new(self.base.hessian().clone(), u_ref, rows, vec![], &self.bounds, DEFAULT_SLACK_WEIGHT, DEFAULT_REG_EPS)
    }
}

fn stats(mut times: Vec<f64>, iters: &[usize]) -> SolveStats {
    times.sort_by(f64::total_cmp);
    let q = |p: f64| times[((times.len() - 1) as f64 * p).round() as usize];
    SolveStats {
        median_us: q(0.5),
        p95_us: q(0.95),
        mean_us: times.iter().sum::<f64>() / times.len() as f64,
        mean_iterations: iters.iter().sum::<usize>() as f64 / iters.len() as f64,
        max_iterations: iters.iter().copied().max().unwrap_or(0),
    }
}

/// Time warm-started and cold solves along one trajectory.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, QpError> {
    let traj = Trajectory::new(cfg.n_u, cfg.rows, cfg.seed);
    let mut warm_solver = QpSolver::new();
    let mut cold_solver = QpSolver::new();
    let mut prev: Option<QPSolution> = None;
    let (mut wt, mut ct) = (Vec::with_capacity(cfg.solves), Vec::with_capacity(cfg.solves));
    let (mut wi, mut ci) = (Vec::with_capacity(cfg.solves), Vec::with_capacity(cfg.solves));
    let mut gap = 0.0f64;
    for k in 0..cfg.solves {
        let qp = traj.at(k)?;
        let t0 = Instant::now();
        let w = warm_solver.solve(&qp, prev.as_ref())?;
        wt.push(t0.elapsed().as_secs_f64() * 1e6);
        let t1 = Instant::now();
        let c = cold_solver.solve(&qp, None)?;
        ct.push(t1.elapsed().as_secs_f64() * 1e6);
        wi.push(w.iterations);
        ci.push(c.iterations);
        gap = gap.max((&w.u_star - &c.u_star).amax());
        prev = Some(w);
    }
    Ok(BenchReport { config: *cfg, warm: stats(wt, &wi), cold: stats(ct, &ci), max_solution_gap: gap })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_runs_and_agrees() {
        let r = run_bench(&BenchConfig { n_u: 12, rows: 8, solves: 300, seed: 1 }).unwrap();
        assert!(r.max_solution_gap < 1e-8, "{}", r.max_solution_gap);
        assert!(r.warm.mean_iterations <= r.cold.mean_iterations);
        assert!(r.warm.median_us > 0.0);
    }

    #[test]
    fn trajectory_changes_active_set() {
        let traj = Trajectory::new(12, 8, 3);
        let mut solver = QpSolver::new();
        let sets: std::collections::BTreeSet<Vec<_>> = (0..2000).step_by(50).map(|k| solver.solve(&traj.at(k).unwrap(), None).unwrap().active_set).collect();
        assert!(sets.len() > 1);
    }
}
