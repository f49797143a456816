//! Closed-loop experiment harness: agents that estimate, predict and plan
//! online, episode execution against the true system, batch runs and
//! metric export.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvironmentSpec, EpisodeTrace, StepRecord, TRACE_SCHEMA};
use crate::estimation::{
    compute_features, consistency_test, ellipsoid_to_box, ellipsoid_to_polytope_tight,
    noise_output_bounds, observe, rls_solve, rls_update, ConfidenceEllipsoid, OmegaBounds,
    RegressionState, StructuredModel, DEFAULT_D_MAX,
};
use crate::planning::{plan, SimModel};
use crate::prediction::{
    is_metzler, metzler_transform, IntervalMatrix, PolytopicDynamics, PredictorConfig,
    PredictorDynamics, PredictorMode, SimpleDynamics, StateInterval,
};
use crate::{Error, Result};

/// Agent families compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    /// Plans against the interval enclosure of every model in the
    /// confidence set.
    Robust,
    /// Plans against the point estimate, ignoring uncertainty and noise.
    Nominal,
    /// Plans against the true dynamics without noise: the performance
    /// reference.
    Oracle,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Robust => "robust",
            AgentKind::Nominal => "nominal",
            AgentKind::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for AgentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "robust" => Ok(AgentKind::Robust),
            "nominal" => Ok(AgentKind::Nominal),
            "oracle" => Ok(AgentKind::Oracle),
            other => Err(Error::config(format!("unknown agent '{other}'"))),
        }
    }
}

/// Which vertex enclosure of the confidence ellipsoid to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolytopeMode {
    Box,
    Tight,
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub delta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub budget: usize,
    pub predictor: PredictorMode,
    pub polytope: PolytopeMode,
    pub delta_prime: f64,
    pub substeps: usize,
}

impl AgentConfig {
    pub fn new(kind: AgentKind) -> Self {
        AgentConfig {
            kind,
            delta: 0.9,
            lambda: 1.0,
            gamma: 0.9,
            budget: 100,
            predictor: PredictorMode::Auto,
            polytope: PolytopeMode::Tight,
            delta_prime: 0.05,
            substeps: 4,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta must lie in (0, 1)"));
        }
        if !(self.delta_prime > 0.0 && self.delta_prime < 1.0) {
            return Err(Error::config("delta_prime must lie in (0, 1)"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma must lie in (0, 1)"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::config("lambda must be positive"));
        }
        if self.budget == 0 || self.substeps == 0 {
            return Err(Error::config("budget and substeps must be at least 1"));
        }
        Ok(())
    }
}

/// Deterministic planner simulator: advances a state interval one sensing
/// step under a fixed-action controller and scores the pessimistic reward
/// of the reached box.
pub struct IntervalSim<'a> {
    pub env: &'a EnvironmentSpec,
    pub dynamics: PredictorDynamics,
    pub omega: OmegaBounds,
    pub cfg: PredictorConfig,
}

impl<'a> SimModel for IntervalSim<'a> {
    type State = StateInterval;

    fn step(&self, state: &StateInterval, action: usize) -> Result<(StateInterval, f64)> {
        let (gain, offset) = &self.env.action_space.controllers[action];
        let center = state.center();
        let u = offset - gain * &center;
        let extra = if gain.iter().any(|v| *v != 0.0) {
            let bk = match &self.dynamics {
                PredictorDynamics::Simple(d) => (&d.b * gain).abs(),
                PredictorDynamics::Enhanced(d) => (&d.b * gain).abs(),
            };
            let e = bk * (state.width() * 0.5);
            Some((-e.clone(), e))
        } else {
            None
        };
        let next = match &self.dynamics {
            PredictorDynamics::Simple(d) => crate::prediction::step_simple_with_extra(
                state,
                d,
                &u,
                &self.omega,
                &self.cfg,
                extra.as_ref(),
            )?,
            PredictorDynamics::Enhanced(d) => crate::prediction::step_enhanced_with_extra(
                state,
                d,
                &u,
                &self.omega,
                &self.cfg,
                extra.as_ref(),
            )?,
        };
        let reward = self.env.reward_lower(&next);
        Ok((next, reward))
    }
}

/// Build the interval dynamics a robust agent plans with, from the current
/// confidence polytope of one candidate structure.
fn robust_dynamics(
    model: &StructuredModel,
    reg: &RegressionState,
    cfg: &AgentConfig,
) -> Result<PredictorDynamics> {
    let ell = ConfidenceEllipsoid::from_state(reg, cfg.delta, model.s_bound)?;
    let poly = match cfg.polytope {
        PolytopeMode::Box => ellipsoid_to_box(&ell, model, DEFAULT_D_MAX)?,
        PolytopeMode::Tight => ellipsoid_to_polytope_tight(&ell, model, DEFAULT_D_MAX)?,
    };
    let simple = || -> Result<PredictorDynamics> {
        Ok(PredictorDynamics::Simple(SimpleDynamics {
            a_bounds: IntervalMatrix::from_polytope(&poly),
            b: model.b.clone(),
            d: model.d.clone(),
        }))
    };
    let enhanced = || -> Result<PredictorDynamics> {
        let transform = if is_metzler(&poly.a_center, 0.0) {
            None
        } else {
            Some(metzler_transform(&poly.a_center).ok_or_else(|| {
                Error::config("center matrix admits no Metzler transform")
            })?)
        };
        Ok(PredictorDynamics::Enhanced(PolytopicDynamics::new(
            &poly, &model.b, &model.d, transform,
        )?))
    };
    match cfg.predictor {
        PredictorMode::Simple => simple(),
        PredictorMode::Enhanced => enhanced(),
        PredictorMode::Auto => enhanced().or_else(|_| simple()),
    }
}

/// Point dynamics (zero-width intervals, no disturbance) at a parameter
/// value: what the nominal and oracle agents plan with.
fn point_dynamics(model: &StructuredModel, theta: &DVector<f64>) -> PredictorDynamics {
    PredictorDynamics::Simple(SimpleDynamics {
        a_bounds: IntervalMatrix::point(model.a_of(theta)),
        b: model.b.clone(),
        d: model.d.clone(),
    })
}

/// One candidate structure tracked online.
struct Candidate {
    model: StructuredModel,
    reg: RegressionState,
    index: usize,
}

/// Everything recorded about one episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub trace: EpisodeTrace,
    pub discounted_return: f64,
    pub collisions: usize,
    pub rejected_models: Vec<usize>,
    pub theta_hat: Option<Vec<f64>>,
}

pub fn run_episode(
    env: &EnvironmentSpec,
    cfg: &AgentConfig,
    seed: u64,
) -> Result<EpisodeOutcome> {
    run_episode_warm(env, cfg, seed, 0)
}

/// Run one episode; `warmup` extra transitions under uniformly random
/// actions are fed to the estimator first, then the state is reset to the
/// canonical start.
pub fn run_episode_warm(
    env: &EnvironmentSpec,
    cfg: &AgentConfig,
    seed: u64,
    warmup: usize,
) -> Result<EpisodeOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models: Vec<StructuredModel> = if env.candidates.is_empty() {
        vec![env.model.clone()]
    } else {
        env.candidates.clone()
    };
    let mut candidates: Vec<Candidate> = models
        .into_iter()
        .enumerate()
        .map(|(index, model)| {
            Ok(Candidate {
                reg: RegressionState::new(model.param_dim, cfg.lambda)?,
                model,
                index,
            })
        })
        .collect::<Result<_>>()?;
    let mut rejected = Vec::new();
    let pred_cfg = PredictorConfig::new(PredictorMode::Auto, env.dt, cfg.substeps)?;
    let n_actions = env.action_space.len();

    if warmup > 0 && cfg.kind != AgentKind::Oracle {
        let mut x = env.start.clone();
        for n in 0..warmup {
            let a = rng.gen_range(0..n_actions);
            let u = env.action_space.control(a, &x);
            let t = n as f64 * env.dt;
            let (next, y) = env.true_step(&x, &u, t, cfg.substeps, &mut rng)?;
            for c in &mut candidates {
                let target = observe(&c.model, &x, &u, &y)?;
                let features = compute_features(&c.model, &x)?;
                rls_update(&mut c.reg, &features, &target, &env.noise)?;
            }
            x = next;
        }
    }

    let mut x = env.start.clone();
    let mut steps = Vec::with_capacity(env.horizon);
    let mut discounted_return = 0.0;
    let mut collisions = 0usize;

    for n in 0..env.horizon {
        let t = n as f64 * env.dt;
        let started = Instant::now();

        // Plan with whatever the agent believes.
        let (action, predicted) = match cfg.kind {
            AgentKind::Oracle => {
                let sim = IntervalSim {
                    env,
                    dynamics: point_dynamics(&env.model, &env.theta_true),
                    omega: OmegaBounds::zero(env.model.disturbance_dim),
                    cfg: pred_cfg.clone(),
                };
                let root = StateInterval::degenerate(&x, 0.0);
                let result = plan(vec![root.clone()], &[sim], n_actions, cfg.gamma, cfg.budget)?;
                let sim = IntervalSim {
                    env,
                    dynamics: point_dynamics(&env.model, &env.theta_true),
                    omega: OmegaBounds::zero(env.model.disturbance_dim),
                    cfg: pred_cfg.clone(),
                };
                let (pred, _) = sim.step(&root, result.recommended_action)?;
                (result.recommended_action, pred)
            }
            AgentKind::Nominal => {
                let c = &candidates[0];
                let theta = rls_solve(&c.reg)?;
                let sim = IntervalSim {
                    env,
                    dynamics: point_dynamics(&c.model, &theta),
                    omega: OmegaBounds::zero(c.model.disturbance_dim),
                    cfg: pred_cfg.clone(),
                };
                let root = StateInterval::degenerate(&x, 0.0);
                let result = plan(vec![root.clone()], &[sim], n_actions, cfg.gamma, cfg.budget)?;
                let sim = IntervalSim {
                    env,
                    dynamics: point_dynamics(&c.model, &theta),
                    omega: OmegaBounds::zero(c.model.disturbance_dim),
                    cfg: pred_cfg.clone(),
                };
                let (pred, _) = sim.step(&root, result.recommended_action)?;
                (result.recommended_action, pred)
            }
            AgentKind::Robust => {
                let sims: Vec<IntervalSim> = candidates
                    .iter()
                    .map(|c| {
                        Ok(IntervalSim {
                            env,
                            dynamics: robust_dynamics(&c.model, &c.reg, cfg)?,
                            omega: env.noise.omega.clone(),
                            cfg: pred_cfg.clone(),
                        })
                    })
                    .collect::<Result<_>>()?;
                let roots = vec![StateInterval::degenerate(&x, 0.0); sims.len()];
                let result = plan(roots, &sims, n_actions, cfg.gamma, cfg.budget)?;
                let (pred, _) =
                    sims[0].step(&StateInterval::degenerate(&x, 0.0), result.recommended_action)?;
                (result.recommended_action, pred)
            }
        };

        // Execute against the true system.
        let u = env.action_space.control(action, &x);
        let (next, y) = env.true_step(&x, &u, t, cfg.substeps, &mut rng)?;
        let reward = env.reward(&next);
        discounted_return += cfg.gamma.powi(n as i32) * reward;
        let collision = env.collides(&next);
        if collision {
            collisions += 1;
        }

        // Reject candidates that cannot explain the observation, then
        // update the survivors.
        if cfg.kind != AgentKind::Oracle {
            if candidates.len() > 1 {
                let mut keep = Vec::with_capacity(candidates.len());
                for c in candidates.drain(..) {
                    let ell = ConfidenceEllipsoid::from_state(&c.reg, cfg.delta, c.model.s_bound)?;
                    let poly = match cfg.polytope {
                        PolytopeMode::Box => ellipsoid_to_box(&ell, &c.model, DEFAULT_D_MAX)?,
                        PolytopeMode::Tight => {
                            ellipsoid_to_polytope_tight(&ell, &c.model, DEFAULT_D_MAX)?
                        }
                    };
                    let (eta_lo, eta_hi) = noise_output_bounds(
                        &c.model,
                        &env.noise,
                        t,
                        env.horizon + warmup,
                        cfg.delta_prime,
                    )?;
                    if consistency_test(&poly, &c.model, &x, &u, &y, &eta_lo, &eta_hi, 1e-7)? {
                        keep.push(c);
                    } else {
                        rejected.push(c.index);
                    }
                }
                if keep.is_empty() {
                    return Err(Error::Contract(
                        "every candidate model was rejected by the data".into(),
                    ));
                }
                candidates = keep;
            }
            for c in &mut candidates {
                let target = observe(&c.model, &x, &u, &y)?;
                let features = compute_features(&c.model, &x)?;
                rls_update(&mut c.reg, &features, &target, &env.noise)?;
            }
        }

        steps.push(StepRecord {
            t,
            x: x.iter().copied().collect(),
            u: u.iter().copied().collect(),
            y: y.iter().copied().collect(),
            reward,
            interval_lower: predicted.lower.iter().copied().collect(),
            interval_upper: predicted.upper.iter().copied().collect(),
            collision,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        x = next;
        // Hitting an obstacle is terminal: the episode ends and all later
        // reward is forfeited.
        if collision {
            break;
        }
    }

    let theta_hat = if cfg.kind == AgentKind::Oracle {
        None
    } else {
        Some(rls_solve(&candidates[0].reg)?.iter().copied().collect())
    };
    Ok(EpisodeOutcome {
        trace: EpisodeTrace {
            schema: TRACE_SCHEMA.to_string(),
            seed,
            agent: cfg.kind.name().to_string(),
            steps,
        },
        discounted_return,
        collisions,
        rejected_models: rejected,
        theta_hat,
    })
}

/// Reference value of a state: the best discounted return an oracle
/// planner finds with a large budget on the noise-free true system.
pub fn oracle_value(
    env: &EnvironmentSpec,
    x: &DVector<f64>,
    gamma: f64,
    budget: usize,
) -> Result<f64> {
    let pred_cfg = PredictorConfig::new(PredictorMode::Auto, env.dt, 4)?;
    let sim = IntervalSim {
        env,
        dynamics: point_dynamics(&env.model, &env.theta_true),
        omega: OmegaBounds::zero(env.model.disturbance_dim),
        cfg: pred_cfg,
    };
    let root = StateInterval::degenerate(x, 0.0);
    let result = plan(
        vec![root],
        &[sim],
        env.action_space.len(),
        gamma,
        budget,
    )?;
    // Lower value of the tree: the return of the best fully simulated
    // branch plus nothing for the tail, a guaranteed achievable amount.
    Ok(result.root_u_value)
}

/// One row of the batch metrics table.
///
/// `suboptimality = oracle_value - discounted_return`, against the oracle
/// value of the episode start state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub agent: String,
    pub steps: usize,
    pub discounted_return: f64,
    pub oracle_value: f64,
    pub suboptimality: f64,
    pub collisions: usize,
    pub wall_ms: f64,
    pub error: Option<String>,
}

/// Run `seeds` independent episodes in parallel; rows come back sorted by
/// seed, with failures captured per row instead of aborting the batch.
pub fn run_batch(env: &EnvironmentSpec, cfg: &AgentConfig, seeds: &[u64]) -> Vec<MetricsRow> {
    let reference = oracle_value(
        env,
        &env.start,
        cfg.gamma,
        cfg.budget.max(10 * env.horizon),
    )
    .unwrap_or(f64::NAN);
    let mut rows: Vec<MetricsRow> = seeds
        .par_iter()
        .map(|&seed| {
            let started = Instant::now();
            match run_episode(env, cfg, seed) {
                Ok(out) => MetricsRow {
                    seed,
                    agent: cfg.kind.name().to_string(),
                    steps: out.trace.steps.len(),
                    discounted_return: out.discounted_return,
                    oracle_value: reference,
                    suboptimality: reference - out.discounted_return,
                    collisions: out.collisions,
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                    error: None,
                },
                Err(e) => MetricsRow {
                    seed,
                    agent: cfg.kind.name().to_string(),
                    steps: 0,
                    discounted_return: 0.0,
                    oracle_value: reference,
                    suboptimality: f64::NAN,
                    collisions: 0,
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    rows.sort_by_key(|r| r.seed);
    rows
}

/// Mean regret against the oracle value for one warmup bucket.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuboptimalityPoint {
    pub warmup: usize,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

pub const DEFAULT_WARMUP_BUCKETS: [usize; 5] = [5, 10, 20, 40, 80];

/// For each warmup bucket, run `n_seeds` episodes whose estimator has seen
/// that many extra transitions, and report the mean shortfall of the
/// realized return against the oracle value of the start state.
pub fn suboptimality_series(
    env: &EnvironmentSpec,
    cfg: &AgentConfig,
    buckets: &[usize],
    n_seeds: usize,
    base_seed: u64,
) -> Result<Vec<SuboptimalityPoint>> {
    if buckets.is_empty() || n_seeds == 0 {
        return Err(Error::config("need at least one bucket and one seed"));
    }
    let reference = oracle_value(
        env,
        &env.start,
        cfg.gamma,
        cfg.budget.max(10 * env.horizon),
    )?;
    let mut series = Vec::with_capacity(buckets.len());
    for (bi, &warmup) in buckets.iter().enumerate() {
        let gaps: Vec<f64> = (0..n_seeds)
            .into_par_iter()
            .map(|i| {
                let seed = base_seed + (bi * n_seeds + i) as u64;
                run_episode_warm(env, cfg, seed, warmup).map(|out| reference - out.discounted_return)
            })
            .collect::<Result<_>>()?;
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>()
            / gaps.len() as f64;
        series.push(SuboptimalityPoint {
            warmup,
            mean,
            std: var.sqrt(),
            seeds: n_seeds,
        });
    }
    Ok(series)
}

fn fmt_f(v: f64) -> String {
    // 17 significant digits: round-trippable f64.
    format!("{:.16e}", v)
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(
        "seed,agent,steps,discounted_return,oracle_value,suboptimality,collisions,wall_ms,error\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.seed,
            r.agent,
            r.steps,
            fmt_f(r.discounted_return),
            fmt_f(r.oracle_value),
            fmt_f(r.suboptimality),
            r.collisions,
            fmt_f(r.wall_ms),
            csv_escape(r.error.as_deref().unwrap_or("")),
        ));
    }
    out
}

pub fn series_to_csv(series: &[SuboptimalityPoint]) -> String {
    let mut out = String::from("warmup,mean_suboptimality,std,seeds\n");
    for p in series {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.warmup,
            fmt_f(p.mean),
            fmt_f(p.std),
            p.seeds
        ));
    }
    out
}

pub fn intervals_to_csv(intervals: &[StateInterval]) -> String {
    let dim = intervals.first().map_or(0, |i| i.dim());
    let mut out = String::from("time");
    for i in 0..dim {
        out.push_str(&format!(",lower_{i}"));
    }
    for i in 0..dim {
        out.push_str(&format!(",upper_{i}"));
    }
    out.push('\n');
    for iv in intervals {
        out.push_str(&fmt_f(iv.time));
        for v in iv.lower.iter() {
            out.push(',');
            out.push_str(&fmt_f(*v));
        }
        for v in iv.upper.iter() {
            out.push(',');
            out.push_str(&fmt_f(*v));
        }
        out.push('\n');
    }
    out
}

pub fn trace_to_json(trace: &EpisodeTrace) -> Result<String> {
    serde_json::to_string_pretty(trace)
        .map_err(|e| Error::Internal(format!("trace serialisation failed: {e}")))
}

/// Interval forecast of the environment under a fixed action sequence,
/// from the untrained (prior-only) confidence set.
pub fn predict_envelope(
    env: &EnvironmentSpec,
    cfg: &AgentConfig,
    actions: &[usize],
) -> Result<Vec<StateInterval>> {
    cfg.validate()?;
    let reg = RegressionState::new(env.model.param_dim, cfg.lambda)?;
    let dynamics = robust_dynamics(&env.model, &reg, cfg)?;
    let controls = action_controls(env, actions)?;
    let pred_cfg = PredictorConfig::new(PredictorMode::Auto, env.dt, cfg.substeps)?;
    crate::prediction::predict_trajectory(
        &env.start,
        &controls,
        &dynamics,
        &env.noise.omega,
        &pred_cfg,
    )
}

fn action_controls(
    env: &EnvironmentSpec,
    actions: &[usize],
) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
    actions
        .iter()
        .map(|&a| {
            if a >= env.action_space.len() {
                return Err(Error::config(format!("action index {a} out of range")));
            }
            Ok(env.action_space.controllers[a].clone())
        })
        .collect()
}

/// Run both predictors side by side on the same action sequence; the
/// enhanced column is absent when no Metzler form exists.
pub fn predict_comparison(
    env: &EnvironmentSpec,
    cfg: &AgentConfig,
    actions: &[usize],
) -> Result<(Vec<StateInterval>, Option<Vec<StateInterval>>)> {
    cfg.validate()?;
    let controls = action_controls(env, actions)?;
    let pred_cfg = PredictorConfig::new(PredictorMode::Auto, env.dt, cfg.substeps)?;
    let reg = RegressionState::new(env.model.param_dim, cfg.lambda)?;
    let mut mode_cfg = cfg.clone();
    mode_cfg.predictor = PredictorMode::Simple;
    let simple_dyn = robust_dynamics(&env.model, &reg, &mode_cfg)?;
    let simple = crate::prediction::predict_trajectory(
        &env.start,
        &controls,
        &simple_dyn,
        &env.noise.omega,
        &pred_cfg,
    )?;
    mode_cfg.predictor = PredictorMode::Enhanced;
    let enhanced = match robust_dynamics(&env.model, &reg, &mode_cfg) {
        Ok(dyn_) => Some(crate::prediction::predict_trajectory(
            &env.start,
            &controls,
            &dyn_,
            &env.noise.omega,
            &pred_cfg,
        )?),
        Err(Error::Config(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((simple, enhanced))
}

/// CSV of a predictor comparison: per-step simple bounds, then enhanced
/// bounds when available.
pub fn comparison_to_csv(
    simple: &[StateInterval],
    enhanced: Option<&[StateInterval]>,
) -> String {
    let dim = simple.first().map_or(0, |i| i.dim());
    let mut out = String::from("time");
    for i in 0..dim {
        out.push_str(&format!(",simple_lower_{i}"));
    }
    for i in 0..dim {
        out.push_str(&format!(",simple_upper_{i}"));
    }
    if enhanced.is_some() {
        for i in 0..dim {
            out.push_str(&format!(",enhanced_lower_{i}"));
        }
        for i in 0..dim {
            out.push_str(&format!(",enhanced_upper_{i}"));
        }
    }
    out.push('\n');
    for (n, iv) in simple.iter().enumerate() {
        out.push_str(&fmt_f(iv.time));
        for v in iv.lower.iter().chain(iv.upper.iter()) {
            out.push(',');
            out.push_str(&fmt_f(*v));
        }
        if let Some(enh) = enhanced {
            for v in enh[n].lower.iter().chain(enh[n].upper.iter()) {
                out.push(',');
                out.push_str(&fmt_f(*v));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{obstacle_env, scalar_env, two_model_env};

    #[test]
    fn oracle_episode_on_the_scalar_system_is_recorded() {
        let env = scalar_env();
        let cfg = AgentConfig::new(AgentKind::Oracle);
        let out = run_episode(&env, &cfg, 0).unwrap();
        assert_eq!(out.trace.schema, TRACE_SCHEMA);
        assert_eq!(out.trace.steps.len(), env.horizon);
        assert!(out.discounted_return > 0.0);
        assert!(out.theta_hat.is_none());
    }

    #[test]
    fn robust_episode_learns_the_scalar_parameter() {
        let env = scalar_env();
        let mut cfg = AgentConfig::new(AgentKind::Robust);
        cfg.budget = 5;
        let out = run_episode(&env, &cfg, 3).unwrap();
        let theta = out.theta_hat.unwrap();
        assert!((theta[0] - 1.5).abs() < 0.5, "theta_hat = {}", theta[0]);
    }

    #[test]
    fn episodes_are_reproducible_per_seed() {
        let env = scalar_env();
        let mut cfg = AgentConfig::new(AgentKind::Robust);
        cfg.budget = 3;
        let a = run_episode(&env, &cfg, 11).unwrap();
        let b = run_episode(&env, &cfg, 11).unwrap();
        assert_eq!(a.discounted_return, b.discounted_return);
        assert_eq!(a.trace.steps.len(), b.trace.steps.len());
        for (sa, sb) in a.trace.steps.iter().zip(&b.trace.steps) {
            assert_eq!(sa.x, sb.x);
            assert_eq!(sa.u, sb.u);
        }
    }

    #[test]
    fn wrong_candidate_is_rejected_quickly() {
        let env = two_model_env();
        let mut cfg = AgentConfig::new(AgentKind::Robust);
        cfg.budget = 10;
        cfg.delta_prime = 1e-6;
        let out = run_episode(&env, &cfg, 0).unwrap();
        assert_eq!(out.rejected_models, vec![1]);
    }

    #[test]
    fn batch_rows_come_back_sorted_with_no_errors() {
        let env = scalar_env();
        let mut cfg = AgentConfig::new(AgentKind::Nominal);
        cfg.budget = 3;
        let rows = run_batch(&env, &cfg, &[4, 1, 3]);
        let seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        assert_eq!(seeds, vec![1, 3, 4]);
        assert!(rows.iter().all(|r| r.error.is_none()));
    }

    #[test]
    fn metrics_csv_uses_round_trippable_floats() {
        let rows = vec![MetricsRow {
            seed: 0,
            agent: "robust".into(),
            steps: 2,
            discounted_return: 0.1 + 0.2,
            oracle_value: 1.0,
            suboptimality: 1.0 - (0.1 + 0.2),
            collisions: 0,
            wall_ms: 1.5,
            error: None,
        }];
        let csv = metrics_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "seed,agent,steps,discounted_return,oracle_value,suboptimality,collisions,wall_ms,error"
        );
        let row = lines.next().unwrap();
        let value: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(value, 0.1 + 0.2);
    }

    #[test]
    fn trace_json_carries_the_schema_tag() {
        let env = scalar_env();
        let cfg = AgentConfig::new(AgentKind::Oracle);
        let out = run_episode(&env, &cfg, 0).unwrap();
        let json = trace_to_json(&out.trace).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["schema"], "rh-trace/1");
        assert_eq!(value["steps"].as_array().unwrap().len(), env.horizon);
    }

    #[test]
    fn predict_envelope_contains_a_noiseless_rollout() {
        let env = obstacle_env();
        let cfg = AgentConfig::new(AgentKind::Robust);
        let actions = vec![3usize; 5];
        let intervals = predict_envelope(&env, &cfg, &actions).unwrap();
        assert_eq!(intervals.len(), 5);
        // The true system with zero disturbance, same Euler scheme.
        let a = env.model.a_of(&env.theta_true);
        let mut x = env.start.clone();
        let h = env.dt / cfg.substeps as f64;
        for iv in &intervals {
            let u = env.action_space.control(3, &x);
            for _ in 0..cfg.substeps {
                let xdot = &a * &x + &env.model.b * &u;
                x += xdot * h;
            }
            assert!(iv.contains(&x, 1e-6), "rollout escaped the envelope");
        }
    }

    #[test]
    fn invalid_agent_configuration_is_rejected() {
        let env = scalar_env();
        let mut cfg = AgentConfig::new(AgentKind::Robust);
        cfg.delta = 1.5;
        assert!(run_episode(&env, &cfg, 0).is_err());
        let mut cfg = AgentConfig::new(AgentKind::Robust);
        cfg.budget = 0;
        assert!(run_episode(&env, &cfg, 0).is_err());
    }
}
