//! Multi-agent extension: pairwise separation barriers aggregated by
//! log-sum-exp and enforced by one local QP per agent.
//!
//! With stacked state `X`, the team barrier is
//! `h_team = −(1/β) log Σ_{i<j} exp(−β h_ij)` with
//! `h_ij = ‖p_i − p_j‖² − d_min²`. Agent `i` controls only its own input
//! channels and takes an equal share of the team requirement:
//!
//! ```text
//! L_{G_i} h · u_i ≥ −(L_F h + ito + α h − κ σ_h) / N − ρ_i
//! ```
//!
//! The Itô and variance terms are off unless `stochastic` is set. Summing the
//! local rows recovers the centralized row when every `ρ_i = 0`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barriers::{compose_evals, composite_eval_stats, BarrierEval, CompositeEval, ConstraintRow};
use crate::safety_qp::{ControlBounds, FilterConfig, QPSolution, QpError, QpSolver, SafetyQP};
use crate::simlab::wilson_interval;
use crate::statespace::{eval_dynamics, fuse_covariance, step_em, Covariance, CovarianceKind, CovarianceSchedule, ModelError, PlantModel, PlantSpec, RngStream, State};

#[derive(Debug, Error)]
pub enum TeamError {
    #[error("team needs at least two agents, got {0}")]
    TooFewAgents(usize),
    #[error("agent {agent}: {reason}")]
    Agent { agent: usize, reason: String },
    #[error("team config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

fn default_beta() -> f64 {
    10.0
}
fn default_alpha() -> f64 {
    1.0
}
fn default_kappa() -> f64 {
    3.0
}
fn default_dt() -> f64 {
    0.01
}
fn default_horizon() -> usize {
    500
}
fn default_gain() -> f64 {
    1.0
}
fn default_ref_max() -> f64 {
    1.0
}
fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub plant: PlantSpec,
    #[serde(default)]
    pub covariance: CovarianceSchedule,
    pub initial: Vec<f64>,
    /// Position goal tracked by the nominal controller.
    pub goal: Vec<f64>,
    /// Estimation-error relaxation of this agent's row.
    #[serde(default)]
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeamScenario {
    #[serde(default)]
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub agents: Vec<AgentSpec>,
    pub d_min: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Re-enable the Itô and `κσ_h` terms in the local rows.
    #[serde(default)]
    pub stochastic: bool,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_gain")]
    pub tracking_gain: f64,
    #[serde(default = "default_ref_max")]
    pub reference_max: f64,
    /// Std of the Gaussian noise on exchanged neighbor states.
    #[serde(default)]
    pub estimation_noise: f64,
    #[serde(default = "default_scale")]
    pub noise_scale: f64,
    #[serde(default)]
    pub filter: FilterConfig,
}

/// Stacked multi-agent model.
#[derive(Debug, Clone)]
pub struct TeamModel {
    pub plants: Vec<PlantModel>,
    state_offsets: Vec<usize>,
    control_offsets: Vec<usize>,
    /// Stacked indices of each agent's position.
    positions: Vec<Vec<usize>>,
    pairs: Vec<(usize, usize)>,
    d_min: f64,
    beta: f64,
}

impl TeamModel {
    pub fn new(plants: Vec<PlantModel>, d_min: f64, beta: f64) -> Result<Self, TeamError> {
        if plants.len() < 2 {
            return Err(TeamError::TooFewAgents(plants.len()));
        }
        if !(d_min > 0.0) || !(beta > 0.0) {
            return Err(TeamError::Config(format!("d_min and beta must be positive, got {d_min} and {beta}")));
        }
        let k = plants[0].position_indices().len();
        let (mut so, mut co) = (0, 0);
        let mut state_offsets = Vec::new();
        let mut control_offsets = Vec::new();
        let mut positions = Vec::new();
        for (a, p) in plants.iter().enumerate() {
            let pos = p.position_indices();
            if pos.len() != k {
                return Err(TeamError::Agent { agent: a, reason: "all agents need the same position dimension".into() });
            }
            let g = p.input_matrix();
            let directly_actuated = p.control_dim() == k
                && pos.iter().enumerate().all(|(r, &pi)| (0..k).all(|c| g[(pi, c)] == if r == c { 1.0 } else { 0.0 }));
            if !directly_actuated {
                return Err(TeamError::Agent { agent: a, reason: "positions must be directly actuated (G restricted to positions = I)".into() });
            }
            state_offsets.push(so);
            control_offsets.push(co);
            positions.push(pos.iter().map(|&i| i + so).collect());
            so += p.state_dim();
            co += p.control_dim();
        }
        state_offsets.push(so);
        control_offsets.push(co);
        let n = plants.len();
        let pairs = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
        Ok(Self { plants, state_offsets, control_offsets, positions, pairs, d_min, beta })
    }

    pub fn agents(&self) -> usize {
        self.plants.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn stack(&self, states: &[State]) -> DVector<f64> {
        let mut x = DVector::zeros(self.state_offsets[self.agents()]);
        for (a, s) in states.iter().enumerate() {
            x.rows_mut(self.state_offsets[a], s.len()).copy_from(s);
        }
        x
    }

    pub fn stacked_dynamics(&self, states: &[State], t: f64) -> Result<(DVector<f64>, DMatrix<f64>), TeamError> {
        let n = self.state_offsets[self.agents()];
        let m = self.control_offsets[self.agents()];
        let mut f = DVector::zeros(n);
        let mut g = DMatrix::zeros(n, m);
        for (a, p) in self.plants.iter().enumerate() {
            let (fa, ga) = eval_dynamics(p, &states[a], t)?;
            f.rows_mut(self.state_offsets[a], fa.len()).copy_from(&fa);
            g.view_mut((self.state_offsets[a], self.control_offsets[a]), (ga.nrows(), ga.ncols())).copy_from(&ga);
        }
        Ok((f, g))
    }

    /// Fused per-agent covariances, scaled and stacked block-diagonally.
    pub fn agent_sigmas(&self, states: &[State], t: f64, scale: f64) -> Result<Vec<Covariance>, TeamError> {
        self.plants
            .iter()
            .zip(states)
            .map(|(p, s)| {
                let (epi, ale) = p.covariance_at(s, t);
                let sch = p.covariance_schedule();
                Ok(fuse_covariance(&epi.scaled(scale), &ale.scaled(scale), sch.floor, sch.ceiling)?)
            })
            .collect()
    }

    pub fn stacked_sigma(&self, sigmas: &[Covariance]) -> Covariance {
        let n = self.state_offsets[self.agents()];
        let mut m = DMatrix::zeros(n, n);
        for (a, s) in sigmas.iter().enumerate() {
            let o = self.state_offsets[a];
            m.view_mut((o, o), (s.dim(), s.dim())).copy_from(s.matrix());
        }
        Covariance::new(m, CovarianceKind::Fused).expect("block-diagonal of PSD blocks")
    }

    fn pair_eval(&self, x: &DVector<f64>, i: usize, j: usize) -> BarrierEval {
        let n = x.len();
        let (pi, pj) = (&self.positions[i], &self.positions[j]);
        let mut h = -self.d_min * self.d_min;
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        for c in 0..pi.len() {
            let d = x[pi[c]] - x[pj[c]];
            h += d * d;
            grad[pi[c]] = 2.0 * d;
            grad[pj[c]] = -2.0 * d;
            hess[(pi[c], pi[c])] = 2.0;
            hess[(pj[c], pj[c])] = 2.0;
            hess[(pi[c], pj[c])] = -2.0;
            hess[(pj[c], pi[c])] = -2.0;
        }
        BarrierEval { h, grad, hess }
    }

    pub fn team_eval(&self, states: &[State]) -> CompositeEval {
        let x = self.stack(states);
        compose_evals(self.pairs.iter().map(|&(i, j)| self.pair_eval(&x, i, j)).collect(), self.beta)
    }

    /// Closest pairwise distance.
    pub fn min_distance(&self, states: &[State]) -> f64 {
        let x = self.stack(states);
        self.pairs
            .iter()
            .map(|&(i, j)| {
                let (pi, pj) = (&self.positions[i], &self.positions[j]);
                (0..pi.len()).map(|c| (x[pi[c]] - x[pj[c]]).powi(2)).sum::<f64>().sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Team row for agent `Some(i)` (share `1/N`, relaxed by `rho`) or the
    /// centralized row over all controls (`None`).
    #[allow(clippy::too_many_arguments)]
    pub fn team_row(
        &self,
        states: &[State],
        sigma: &Covariance,
        t: f64,
        agent: Option<usize>,
        alpha: f64,
        kappa: f64,
        stochastic: bool,
        rho: f64,
    ) -> Result<ConstraintRow, TeamError> {
        let (f, g) = self.stacked_dynamics(states, t)?;
        let ev = self.team_eval(states);
        let mut st = composite_eval_stats(&ev, &f, &g, sigma);
        if !stochastic {
            st = st.deterministic();
        }
        let rhs = -st.drift - st.ito - alpha * st.h + kappa * st.sigma_h;
        Ok(match agent {
            None => ConstraintRow { a: st.input_row, b: rhs, db_dalpha: -st.h, db_dkappa: st.sigma_h },
            Some(i) => {
                let n = self.agents() as f64;
                let (o, m) = (self.control_offsets[i], self.plants[i].control_dim());
                ConstraintRow { a: st.input_row.rows(o, m).into_owned(), b: rhs / n - rho, db_dalpha: -st.h / n, db_dkappa: st.sigma_h / n }
            }
        })
    }

    /// `L_F h + Σ_i L_{G_i} h · u_i` for stacked controls.
    pub fn barrier_drift(&self, states: &[State], controls: &DVector<f64>, t: f64) -> Result<f64, TeamError> {
        let (f, g) = self.stacked_dynamics(states, t)?;
        let ev = self.team_eval(states);
        Ok(ev.grad.dot(&f) + (g.tr_mul(&ev.grad)).dot(controls))
    }

    pub fn control_range(&self, agent: usize) -> (usize, usize) {
        (self.control_offsets[agent], self.plants[agent].control_dim())
    }
}

fn agent_bounds(cfg: &FilterConfig) -> ControlBounds {
    ControlBounds { lower: cfg.u_min.clone(), upper: cfg.u_max.clone() }
}

/// Agent `i`'s local QP from its own state and neighbor estimates.
#[allow(clippy::too_many_arguments)]
pub fn decentralized_step(
    model: &TeamModel,
    agent: usize,
    estimates: &[State],
    sigma: &Covariance,
    t: f64,
    rho: f64,
    u_ref: &DVector<f64>,
    alpha: f64,
    kappa: f64,
    stochastic: bool,
    cfg: &FilterConfig,
    solver: &mut QpSolver,
) -> Result<QPSolution, TeamError> {
    let row = model.team_row(estimates, sigma, t, Some(agent), alpha, kappa, stochastic, rho)?;
    let m = model.plants[agent].control_dim();
    let h = DMatrix::from_diagonal(&DVector::from_vec(cfg.r_weights.clone().unwrap_or_else(|| vec![1.0; m])));
    let qp = SafetyQP::new(h, u_ref.clone(), vec![row], vec![], &agent_bounds(cfg), cfg.slack_weight, cfg.reg_eps)?.with_max_iter(cfg.max_iter);
    Ok(solver.solve(&qp, None)?)
}

/// Single QP over all stacked controls; oracle for the decentralized split.
#[allow(clippy::too_many_arguments)]
pub fn centralized_step(
    model: &TeamModel,
    states: &[State],
    sigma: &Covariance,
    t: f64,
    u_ref: &DVector<f64>,
    alpha: f64,
    kappa: f64,
    stochastic: bool,
    cfg: &FilterConfig,
) -> Result<QPSolution, TeamError> {
    let row = model.team_row(states, sigma, t, None, alpha, kappa, stochastic, 0.0)?;
    let m = u_ref.len();
    let h = DMatrix::identity(m, m);
    let qp = SafetyQP::new(h, u_ref.clone(), vec![row], vec![], &ControlBounds::default(), cfg.slack_weight, cfg.reg_eps)?;
    Ok(QpSolver::new().solve(&qp, None)?)
}

impl TeamScenario {
    pub fn build(&self) -> Result<(TeamModel, Vec<State>), TeamError> {
        let mut plants = Vec::new();
        let mut initial = Vec::new();
        for (a, spec) in self.agents.iter().enumerate() {
            let p = PlantModel::from_spec(&spec.plant)?.with_covariance(spec.covariance.clone())?;
            if spec.initial.len() != p.state_dim() {
                return Err(TeamError::Agent { agent: a, reason: format!("initial state has {} entries, expected {}", spec.initial.len(), p.state_dim()) });
            }
            if spec.goal.len() != p.position_indices().len() {
                return Err(TeamError::Agent { agent: a, reason: "goal must match the position dimension".into() });
            }
            if !(spec.rho >= 0.0) {
                return Err(TeamError::Agent { agent: a, reason: format!("rho must be non-negative, got {}", spec.rho) });
            }
            initial.push(DVector::from_column_slice(&spec.initial));
            plants.push(p);
        }
        if !(self.dt > 0.0) || self.horizon == 0 {
            return Err(TeamError::Config("dt must be positive and horizon at least one step".into()));
        }
        if !(self.estimation_noise >= 0.0 && self.noise_scale >= 0.0) {
            return Err(TeamError::Config("noise levels must be non-negative".into()));
        }
        Ok((TeamModel::new(plants, self.d_min, self.beta)?, initial))
    }

    fn reference(&self, model: &TeamModel, agent: usize, state: &State) -> DVector<f64> {
        let pos = model.plants[agent].position_indices();
        let goal = &self.agents[agent].goal;
        DVector::from_fn(pos.len(), |c, _| (self.tracking_gain * (goal[c] - state[pos[c]])).clamp(-self.reference_max, self.reference_max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamEpisode {
    pub seed: u64,
    pub min_distance: f64,
    pub separated: bool,
    pub slack_steps: usize,
    pub final_positions: Vec<Vec<f64>>,
}

/// One seeded team episode; agents read tick-start estimates and act together.
pub fn run_team_episode(scn: &TeamScenario, seed: u64) -> Result<TeamEpisode, TeamError> {
    let (model, mut states) = scn.build()?;
    let n = model.agents();
    let mut plant_rng: Vec<RngStream> = (0..n).map(|a| RngStream::new(seed, 2 * a as u64)).collect();
    let mut est_rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xE57_1A7E);
    let normal = rand_distr::Normal::new(0.0, scn.estimation_noise.max(0.0)).map_err(|e| TeamError::Config(e.to_string()))?;
    let mut solvers: Vec<QpSolver> = (0..n).map(|_| QpSolver::new()).collect();
    let mut min_distance = model.min_distance(&states);
    let mut slack_steps = 0;
    for k in 0..scn.horizon {
        let t = k as f64 * scn.dt;
        let sigmas = model.agent_sigmas(&states, t, scn.noise_scale)?;
        let sigma = model.stacked_sigma(&sigmas);
        let mut controls = Vec::with_capacity(n);
        for a in 0..n {
            let estimates: Vec<State> = states
                .iter()
                .enumerate()
                .map(|(b, s)| {
                    if b == a || scn.estimation_noise == 0.0 {
                        s.clone()
                    } else {
                        s.map(|v| v + rand_distr::Distribution::sample(&normal, &mut est_rng))
                    }
                })
                .collect();
            let u_ref = scn.reference(&model, a, &states[a]);
            let sol = decentralized_step(&model, a, &estimates, &sigma, t, scn.agents[a].rho, &u_ref, scn.alpha, scn.kappa, scn.stochastic, &scn.filter, &mut solvers[a])?;
            slack_steps += usize::from(sol.max_slack() > 0.0);
            controls.push(sol.u_star);
        }
        for a in 0..n {
            states[a] = step_em(&model.plants[a], &states[a], &controls[a], &sigmas[a], t, scn.dt, &mut plant_rng[a])?;
        }
        min_distance = min_distance.min(model.min_distance(&states));
    }
    let final_positions = (0..n)
        .map(|a| model.plants[a].position_indices().iter().map(|&i| states[a][i]).collect())
        .collect();
    Ok(TeamEpisode { seed, min_distance, separated: min_distance >= scn.d_min, slack_steps, final_positions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamSummary {
    pub episodes: usize,
    pub separated: usize,
    pub separation_rate: f64,
    pub separation_ci: (f64, f64),
    pub worst_min_distance: f64,
    pub mean_min_distance: f64,
}

/// Seeded Monte-Carlo batch, episode `k` using seed `seed0 + k`.
pub fn team_monte_carlo(scn: &TeamScenario, episodes: usize, seed0: u64) -> Result<TeamSummary, TeamError> {
    let eps: Result<Vec<TeamEpisode>, TeamError> = (0..episodes).into_par_iter().map(|k| run_team_episode(scn, seed0 + k as u64)).collect();
    let eps = eps?;
    let separated = eps.iter().filter(|e| e.separated).count();
    let worst = eps.iter().map(|e| e.min_distance).fold(f64::INFINITY, f64::min);
    let mean = eps.iter().map(|e| e.min_distance).sum::<f64>() / episodes.max(1) as f64;
    Ok(TeamSummary {
        episodes,
        separated,
        separation_rate: separated as f64 / episodes.max(1) as f64,
        separation_ci: wilson_interval(separated, episodes.max(1), 1.96),
        worst_min_distance: worst,
        mean_min_distance: mean,
    })
}
