//! The training loop: snapshot, roll out, assign hindsight credit, compute
//! advantages, ascend the clipped surrogate, report.

use alloc::format;
use alloc::vec::Vec;

use crate::advantage::{compute_advantages, AdvantageConfig, AdvantageTensor};
use crate::env::{rollout_group, EnvSpec, GroupBatch, StateId};
use crate::error::{bail, Error, Result};
use crate::hindsight::{build_hindsight_table, redundant_flag, HindsightConfig, HindsightTable};
use crate::optimizer::{gradient_step, surrogate_gradient, OptimizerConfig, SurrogateReport, UpdateData};
use crate::oracle::exact_policy_eval;
use crate::policy::{Context, PolicyParams};
use crate::rng;

/// Where the hindsight context rows used for scoring come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HindsightSource {
    /// The policy's own hindsight rows, as stored. Training never updates
    /// them, so they keep whatever they were initialized to.
    PolicyRows,
    /// Before each iteration the snapshot's hindsight rows are replaced by
    /// the exact posterior `h(a | s, f)` of the snapshot's prior.
    #[default]
    OraclePosterior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvSpec,
    pub group_size: usize,
    pub groups_per_iter: usize,
    pub iterations: usize,
    pub hindsight: HindsightConfig,
    pub advantage: AdvantageConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub hindsight_source: HindsightSource,
    /// Prior mass on inadmissible actions in the initial policy.
    pub invalid_mass: f64,
}

impl TrainConfig {
    pub fn new(env: EnvSpec) -> Self {
        Self {
            env,
            group_size: 8,
            groups_per_iter: 4,
            iterations: 200,
            hindsight: HindsightConfig::default(),
            advantage: AdvantageConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            hindsight_source: HindsightSource::default(),
            invalid_mass: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.group_size < 2 {
            bail!(Config, "group_size must be at least 2, got {}", self.group_size);
        }
        if self.groups_per_iter == 0 {
            bail!(Config, "groups_per_iter must be at least 1");
        }
        if self.iterations == 0 {
            bail!(Config, "iterations must be at least 1");
        }
        if !(0.0..1.0).contains(&self.invalid_mass) {
            bail!(Config, "invalid_mass must be in [0, 1)");
        }
        self.hindsight.validate()?;
        self.advantage.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub policy: PolicyParams,
    /// Frozen KL anchor.
    pub reference: PolicyParams,
    /// Number of completed iterations.
    pub iteration: usize,
}

impl TrainerState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let policy = PolicyParams::admissible_prior(&cfg.env, cfg.invalid_mass)?;
        Ok(Self { reference: policy.clone(), policy, iteration: 0 })
    }

    pub fn from_policy(cfg: &TrainConfig, policy: PolicyParams) -> Result<Self> {
        cfg.validate()?;
        policy.check_compatible(&cfg.env)?;
        Ok(Self { reference: policy.clone(), policy, iteration: 0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IterationMetrics {
    /// 1-based.
    pub iteration: usize,
    pub success_rate: f64,
    pub mean_traj_length: f64,
    pub redundant_fraction: f64,
    pub mean_composite_advantage: f64,
    pub surrogate: SurrogateReport,
    /// Groups in which every trajectory failed.
    pub degenerate_groups: usize,
}

/// Seed of group `k` in the 0-based `iteration`.
pub fn group_seed(seed: u64, iteration: usize, k: usize) -> u64 {
    rng::derive_seed(seed, &[iteration as u64, k as u64])
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    trajectories: usize,
    successes: usize,
    steps: usize,
    redundant: usize,
}

impl Tally {
    fn add(&mut self, batch: &GroupBatch, table: &HindsightTable, policy: &PolicyParams) -> Result<()> {
        if table.trajectory_count() != batch.len() || table.len() != batch.total_steps() {
            bail!(Domain, "hindsight table does not match the batch");
        }
        for traj in &batch.trajectories {
            self.trajectories += 1;
            self.successes += usize::from(traj.is_success());
            self.steps += traj.horizon();
            for tr in &traj.transitions {
                self.redundant += usize::from(redundant_flag(policy, tr.state, &tr.action, traj.final_state)?);
            }
        }
        Ok(())
    }

    fn finish(&self, metrics: &mut IterationMetrics) {
        let n = self.trajectories.max(1) as f64;
        metrics.success_rate = self.successes as f64 / n;
        metrics.mean_traj_length = self.steps as f64 / n;
        metrics.redundant_fraction = if self.steps == 0 { 0.0 } else { self.redundant as f64 / self.steps as f64 };
    }
}

/// Batch-level metrics. `policy` supplies the hindsight rows; the redundant
/// test always scores at unit temperature. Iteration, advantage and
/// surrogate fields are left at their defaults.
pub fn compute_metrics(batch: &GroupBatch, table: &HindsightTable, policy: &PolicyParams) -> Result<IterationMetrics> {
    let mut tally = Tally::default();
    tally.add(batch, table, policy)?;
    let mut metrics = IterationMetrics::default();
    tally.finish(&mut metrics);
    Ok(metrics)
}

/// Copy of `policy` whose hindsight rows hold the exact posterior of its
/// prior. Pairs `(s, f)` with an unreachable `f` keep the prior.
pub fn with_oracle_hindsight(env: &EnvSpec, policy: &PolicyParams) -> Result<PolicyParams> {
    let values = exact_policy_eval(env, policy, 1.0)?;
    let mut out = policy.clone();
    for s in 0..env.state_count() {
        let state = StateId(s);
        if env.is_terminal(state) {
            continue;
        }
        for f in 0..env.state_count() {
            let ctx = Context::Hindsight(StateId(f));
            if values.final_state_prob(state, StateId(f))? > 0.0 {
                out.set_sequence_distribution(state, ctx, &values.hindsight(state, StateId(f))?)?;
            } else {
                out.copy_context(state, Context::Prior, ctx)?;
            }
        }
    }
    Ok(out)
}

fn in_iteration(iteration: usize, err: Error) -> Error {
    match err {
        Error::Numerical(msg) => Error::Numerical(format!("iteration {iteration}: {msg}")),
        other => other,
    }
}

/// One iteration. Deterministic given the state, the config and the
/// iteration index stored in the state.
pub fn train_iteration(state: &TrainerState, cfg: &TrainConfig) -> Result<(TrainerState, IterationMetrics)> {
    cfg.validate()?;
    let it = state.iteration;
    let theta_old = state.policy.clone();
    let scorer = match cfg.hindsight_source {
        HindsightSource::PolicyRows => theta_old.clone(),
        HindsightSource::OraclePosterior => with_oracle_hindsight(&cfg.env, &theta_old)?,
    };

    let mut groups: Vec<(GroupBatch, AdvantageTensor)> = Vec::with_capacity(cfg.groups_per_iter);
    let mut tally = Tally::default();
    let mut degenerate_groups = 0;
    for k in 0..cfg.groups_per_iter {
        let batch = rollout_group(&cfg.env, &theta_old, cfg.group_size, group_seed(cfg.seed, it, k))?;
        let table = build_hindsight_table(&batch, &scorer, &cfg.hindsight)?;
        let adv = compute_advantages(&batch, &table, &cfg.advantage)?;
        tally.add(&batch, &table, &scorer)?;
        if batch.trajectories.iter().all(|t| !t.is_success()) {
            degenerate_groups += 1;
        }
        groups.push((batch, adv));
    }

    let refs: Vec<(&GroupBatch, &AdvantageTensor)> = groups.iter().map(|(b, a)| (b, a)).collect();
    let data = UpdateData::from_groups(&refs, &theta_old)?;
    let mut theta = theta_old;
    let mut report = SurrogateReport::default();
    for _ in 0..cfg.optimizer.epochs_per_batch {
        let (r, grad) = surrogate_gradient(&data, &theta, &state.reference, &cfg.optimizer).map_err(|e| in_iteration(it + 1, e))?;
        theta = gradient_step(&theta, &grad, cfg.optimizer.learning_rate).map_err(|e| in_iteration(it + 1, e))?;
        report = r;
    }

    let rows = groups.iter().map(|(_, a)| a.len()).sum::<usize>();
    let composite: f64 = groups.iter().flat_map(|(_, a)| a.rows()).map(|r| r.composite).sum();
    let mut metrics = IterationMetrics {
        iteration: it + 1,
        mean_composite_advantage: composite / rows.max(1) as f64,
        surrogate: report,
        degenerate_groups,
        ..Default::default()
    };
    tally.finish(&mut metrics);
    let next = TrainerState { policy: theta, reference: state.reference.clone(), iteration: it + 1 };
    Ok((next, metrics))
}

/// Runs `cfg.iterations` iterations from a fresh state, handing each
/// metrics record to `sink` as it is produced.
pub fn run<F>(cfg: &TrainConfig, sink: F) -> Result<TrainerState>
where
    F: FnMut(&IterationMetrics) -> Result<()>,
{
    run_from(TrainerState::new(cfg)?, cfg, sink)
}

pub fn run_from<F>(mut state: TrainerState, cfg: &TrainConfig, mut sink: F) -> Result<TrainerState>
where
    F: FnMut(&IterationMetrics) -> Result<()>,
{
    for _ in 0..cfg.iterations {
        let (next, metrics) = train_iteration(&state, cfg)?;
        sink(&metrics)?;
        state = next;
    }
    Ok(state)
}

/// Runs `cfg.iterations` iterations and keeps every metrics record.
pub fn run_collect(cfg: &TrainConfig) -> Result<(TrainerState, Vec<IterationMetrics>)> {
    let mut out = Vec::with_capacity(cfg.iterations);
    let state = run(cfg, |m| {
        out.push(*m);
        Ok(())
    })?;
    Ok((state, out))
}

#[derive(Debug, Clone)]
pub struct SweepSeries {
    pub omega: f64,
    pub metrics: Vec<IterationMetrics>,
    pub final_state: TrainerState,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub series: Vec<SweepSeries>,
    /// Values dropped because they repeated an earlier entry.
    pub duplicates: Vec<f64>,
}

/// One independent run per distinct ω, all with the base seed.
pub fn run_sweep(base: &TrainConfig, omegas: &[f64]) -> Result<SweepResult> {
    if omegas.is_empty() {
        bail!(Config, "omega list is empty");
    }
    let mut distinct: Vec<f64> = Vec::new();
    let mut duplicates = Vec::new();
    for &w in omegas {
        if distinct.contains(&w) {
            duplicates.push(w);
        } else {
            distinct.push(w);
        }
    }
    let mut series = Vec::with_capacity(distinct.len());
    for omega in distinct {
        let mut cfg = base.clone();
        cfg.advantage.omega = omega;
        let (final_state, metrics) = run_collect(&cfg)?;
        series.push(SweepSeries { omega, metrics, final_state });
    }
    Ok(SweepResult { series, duplicates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_bottleneck_env, make_chain_env, TokenAction, Trajectory, Transition};
    use crate::policy::PolicyLayout;
    use alloc::vec;

    fn small_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::new(make_bottleneck_env(1, 1, 2).unwrap());
        cfg.iterations = 3;
        cfg.group_size = 4;
        cfg.groups_per_iter = 2;
        cfg
    }

    fn traj(len: usize, reward: f64) -> Trajectory {
        let transitions = (0..len)
            .map(|_| Transition {
                state: StateId(0),
                action: TokenAction::word(1),
                next_state: StateId(0),
                observation: vec![],
                invalid: false,
            })
            .collect();
        Trajectory { transitions, terminal_reward: reward, final_state: StateId(1) }
    }

    fn certain_policy(spec: &EnvSpec) -> PolicyParams {
        let mut p = PolicyParams::zeros(PolicyLayout::for_env(spec).unwrap());
        // Hindsight rows of state 0 given final state 1 put all mass on [1, END].
        let space = crate::policy::ActionSpace::new(p.layout());
        let mut dist = vec![0.0; space.len()];
        dist[space.index_of(&TokenAction::word(1)).unwrap()] = 1.0;
        p.set_sequence_distribution(StateId(0), Context::Hindsight(StateId(1)), &dist).unwrap();
        p
    }

    #[test]
    fn metrics_arithmetic() {
        let spec = make_chain_env(2).unwrap();
        let p = certain_policy(&spec);
        let batch = GroupBatch { trajectories: vec![traj(3, 0.0), traj(5, 10.0)] };
        let table = build_hindsight_table(&batch, &p, &HindsightConfig::default()).unwrap();
        let m = compute_metrics(&batch, &table, &p).unwrap();
        assert_eq!(m.mean_traj_length, 4.0);
        assert_eq!(m.success_rate, 0.5);
        assert_eq!(m.redundant_fraction, 0.0);
        let fails = GroupBatch { trajectories: vec![traj(2, 0.0), traj(2, 0.0)] };
        let table = build_hindsight_table(&fails, &p, &HindsightConfig::default()).unwrap();
        assert_eq!(compute_metrics(&fails, &table, &p).unwrap().success_rate, 0.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small_cfg();
        cfg.group_size = 1;
        assert!(matches!(TrainerState::new(&cfg), Err(Error::Config(_))));
        let mut cfg = small_cfg();
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn one_record_per_iteration_and_reproducible() {
        let cfg = small_cfg();
        let (a, ma) = run_collect(&cfg).unwrap();
        let (b, mb) = run_collect(&cfg).unwrap();
        assert_eq!(ma.len(), 3);
        assert_eq!(ma, mb);
        assert_eq!(a, b);
        assert_eq!(ma.iter().map(|m| m.iteration).collect::<Vec<_>>(), vec![1, 2, 3]);
        for m in &ma {
            assert!((0.0..=1.0).contains(&m.success_rate));
            assert!((0.0..=1.0).contains(&m.redundant_fraction));
        }
    }

    #[test]
    fn failed_only_groups_leave_the_policy_alone() {
        // With one step of budget the goal is unreachable.
        let spec = make_bottleneck_env(1, 1, 2).unwrap().with_max_steps(1);
        let mut cfg = TrainConfig::new(spec);
        cfg.iterations = 1;
        cfg.optimizer.kl_coeff = 0.0;
        let state = TrainerState::new(&cfg).unwrap();
        let (next, m) = train_iteration(&state, &cfg).unwrap();
        assert_eq!(next.policy, state.policy);
        assert_eq!(m.degenerate_groups, cfg.groups_per_iter);
        assert_eq!(m.mean_composite_advantage, 0.0);
    }

    #[test]
    fn sweep_dedups() {
        let cfg = small_cfg();
        let sweep = run_sweep(&cfg, &[0.0, 0.5, 0.0]).unwrap();
        assert_eq!(sweep.series.len(), 2);
        assert_eq!(sweep.duplicates, vec![0.0]);
        assert!(run_sweep(&cfg, &[]).is_err());
    }

    #[test]
    fn oracle_rows_leave_the_prior_untouched() {
        let cfg = small_cfg();
        let p = PolicyParams::admissible_prior(&cfg.env, 0.2).unwrap();
        let q = with_oracle_hindsight(&cfg.env, &p).unwrap();
        for s in 0..cfg.env.state_count() {
            if cfg.env.is_terminal(StateId(s)) {
                continue;
            }
            assert_eq!(
                p.sequence_probs(StateId(s), Context::Prior).unwrap(),
                q.sequence_probs(StateId(s), Context::Prior).unwrap()
            );
        }
    }
}
