//! Clipped surrogate objective with a KL penalty toward a frozen reference.
//!
//! ```text
//! J(θ) = Σ_i 1/(N T_i) Σ_t [ min(r A, clip(r, 1-ε, 1+ε) A) - β KL(π_θ(·|s) || π_ref(·|s)) ]
//! ```
//!
//! with `r = π_θ(a|s) / π_old(a|s)`. The KL term is evaluated exactly over
//! the finite action space at every visited state and weighted like the
//! surrogate terms.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::advantage::AdvantageTensor;
use crate::env::{GroupBatch, StateId, TokenAction};
use crate::error::{bail, Result};
use crate::math;
use crate::policy::{Context, PolicyParams};

/// Denominator floor of the relative error in [`gradient_check`].
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Central-difference step used by [`finite_difference_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub learning_rate: f64,
    pub epochs_per_batch: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { clip_eps: 0.2, kl_coeff: 0.01, learning_rate: 0.5, epochs_per_batch: 1 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            bail!(Config, "clip_eps must be in (0, 1)");
        }
        if !(self.kl_coeff >= 0.0) || !self.kl_coeff.is_finite() {
            bail!(Config, "kl_coeff must be finite and non-negative");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            bail!(Config, "learning_rate must be positive");
        }
        if self.epochs_per_batch == 0 {
            bail!(Config, "epochs_per_batch must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SurrogateReport {
    pub objective: f64,
    pub clipped_fraction: f64,
    pub kl_term: f64,
    pub grad_norm: f64,
}

/// `π_θ(a|s) / π_old(a|s)` in the prior context.
pub fn policy_ratio(theta: &PolicyParams, theta_old: &PolicyParams, state: StateId, action: &TokenAction) -> Result<f64> {
    if theta.layout() != theta_old.layout() {
        bail!(Domain, "policy shapes differ");
    }
    let new = theta.log_prob(state, action, Context::Prior)?.total;
    let old = theta_old.log_prob(state, action, Context::Prior)?.total;
    Ok(math::exp(new - old))
}

/// One surrogate term.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStep {
    pub state: StateId,
    pub action: TokenAction,
    pub advantage: f64,
    /// `1 / (N T_i)`.
    pub weight: f64,
    pub old_log_prob: f64,
}

/// Flattened surrogate terms for one update, with `θ_old` log-probs cached.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateData {
    steps: Vec<UpdateStep>,
    trajectory_count: usize,
}

impl UpdateData {
    /// Collects every step of every group. Trajectories are weighted
    /// equally regardless of group.
    pub fn from_groups(groups: &[(&GroupBatch, &AdvantageTensor)], theta_old: &PolicyParams) -> Result<Self> {
        let n: usize = groups.iter().map(|(b, _)| b.len()).sum();
        if n == 0 {
            bail!(Domain, "no trajectories to update on");
        }
        let mut steps = Vec::new();
        for (batch, adv) in groups {
            if adv.trajectory_count() != batch.len() || adv.len() != batch.total_steps() {
                bail!(Domain, "advantages are not aligned with the batch");
            }
            for (i, traj) in batch.trajectories.iter().enumerate() {
                let rows = adv.trajectory_rows(i);
                let weight = 1.0 / (n as f64 * traj.horizon() as f64);
                for (tr, row) in traj.transitions.iter().zip(rows) {
                    let old_log_prob = theta_old.log_prob(tr.state, &tr.action, Context::Prior)?.total;
                    steps.push(UpdateStep {
                        state: tr.state,
                        action: tr.action.clone(),
                        advantage: row.composite,
                        weight,
                        old_log_prob,
                    });
                }
            }
        }
        Ok(Self { steps, trajectory_count: n })
    }

    pub fn single(batch: &GroupBatch, advantages: &AdvantageTensor, theta_old: &PolicyParams) -> Result<Self> {
        Self::from_groups(&[(batch, advantages)], theta_old)
    }

    pub fn steps(&self) -> &[UpdateStep] {
        &self.steps
    }

    pub fn trajectory_count(&self) -> usize {
        self.trajectory_count
    }

    /// Prior-context weight indices that the objective depends on.
    pub fn touched_coordinates(&self, theta: &PolicyParams) -> Vec<usize> {
        let layout = theta.layout();
        let block = layout.prefix_count() * layout.vocab_size();
        let mut states: Vec<usize> = self.steps.iter().map(|s| s.state.0).collect();
        states.sort_unstable();
        states.dedup();
        states
            .into_iter()
            .flat_map(|s| {
                let start = s * layout.context_count() * block;
                start..start + block
            })
            .collect()
    }
}

struct Evaluation {
    report: SurrogateReport,
    clipped: Vec<bool>,
}

fn evaluate(
    data: &UpdateData,
    theta: &PolicyParams,
    theta_ref: &PolicyParams,
    cfg: &OptimizerConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<Evaluation> {
    if theta.layout() != theta_ref.layout() {
        bail!(Domain, "policy shapes differ");
    }
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let mut surrogate = 0.0;
    let mut kl_term = 0.0;
    let mut clipped = Vec::with_capacity(data.steps.len());
    for step in &data.steps {
        let new = theta.log_prob(step.state, &step.action, Context::Prior)?.total;
        let r = math::exp(new - step.old_log_prob);
        let a = step.advantage;
        let unclipped = r * a;
        let bounded = r.clamp(lo, hi) * a;
        let is_clipped = bounded < unclipped;
        surrogate += step.weight * if is_clipped { bounded } else { unclipped };
        clipped.push(is_clipped);
        let kl = if cfg.kl_coeff > 0.0 { theta.kl_divergence(theta_ref, step.state)? } else { 0.0 };
        kl_term += step.weight * kl;
        if let Some(g) = grad.as_deref_mut() {
            if !is_clipped {
                theta.accumulate_grad_log_prob(step.state, &step.action, Context::Prior, step.weight * a * r, g)?;
            }
            if cfg.kl_coeff > 0.0 {
                theta.accumulate_grad_kl(theta_ref, step.state, -cfg.kl_coeff * step.weight, g)?;
            }
        }
    }
    let objective = surrogate - cfg.kl_coeff * kl_term;
    if !objective.is_finite() {
        bail!(Numerical, "surrogate objective is {objective} (surrogate {surrogate}, kl {kl_term})");
    }
    let count = clipped.iter().filter(|&&c| c).count();
    let clipped_fraction = if clipped.is_empty() { 0.0 } else { count as f64 / clipped.len() as f64 };
    let grad_norm = grad.map(|g| math::sqrt(g.iter().map(|x| x * x).sum())).unwrap_or(0.0);
    Ok(Evaluation { report: SurrogateReport { objective, clipped_fraction, kl_term, grad_norm }, clipped })
}

/// Objective value only; `grad_norm` is left at 0.
pub fn objective_value(data: &UpdateData, theta: &PolicyParams, theta_ref: &PolicyParams, cfg: &OptimizerConfig) -> Result<f64> {
    Ok(evaluate(data, theta, theta_ref, cfg, None)?.report.objective)
}

/// Objective report and exact gradient `∇_θ J`.
pub fn surrogate_gradient(
    data: &UpdateData,
    theta: &PolicyParams,
    theta_ref: &PolicyParams,
    cfg: &OptimizerConfig,
) -> Result<(SurrogateReport, Vec<f64>)> {
    let mut grad = vec![0.0; theta.weights().len()];
    let eval = evaluate(data, theta, theta_ref, cfg, Some(&mut grad))?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        bail!(Numerical, "gradient coordinate {i} is {}", grad[i]);
    }
    Ok((eval.report, grad))
}

/// Surrogate report for one group. `θ_old` supplies the ratio denominators.
pub fn surrogate_objective(
    batch: &GroupBatch,
    advantages: &AdvantageTensor,
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    theta_ref: &PolicyParams,
    cfg: &OptimizerConfig,
) -> Result<SurrogateReport> {
    let data = UpdateData::single(batch, advantages, theta_old)?;
    Ok(surrogate_gradient(&data, theta, theta_ref, cfg)?.0)
}

/// Gradient ascent: `θ + lr * grad`.
pub fn gradient_step(theta: &PolicyParams, grad: &[f64], learning_rate: f64) -> Result<PolicyParams> {
    if grad.len() != theta.weights().len() {
        bail!(Domain, "gradient has {} entries, policy has {}", grad.len(), theta.weights().len());
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        bail!(Numerical, "non-finite gradient at coordinate {i}: {}", grad[i]);
    }
    let mut next = theta.clone();
    for (w, g) in next.weights_mut().iter_mut().zip(grad) {
        *w += learning_rate * g;
    }
    Ok(next)
}

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Largest relative error between `analytic` and central differences of
/// `objective` over the given coordinates.
pub fn gradient_check<F>(objective: F, analytic: &[f64], theta: &PolicyParams, coords: &[usize], step: f64) -> Result<f64>
where
    F: Fn(&PolicyParams) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for &i in coords {
        let w = theta.weights()[i];
        probe.weights_mut()[i] = w + step;
        let up = objective(&probe)?;
        probe.weights_mut()[i] = w - step;
        let down = objective(&probe)?;
        probe.weights_mut()[i] = w;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * step)));
    }
    Ok(worst)
}

/// Probes `probe_count` random objective-relevant coordinates. Probes whose
/// ±step perturbation flips a clip branch are redrawn, since the objective
/// is not differentiable there.
pub fn finite_difference_check<R: RngCore>(
    data: &UpdateData,
    theta: &PolicyParams,
    theta_ref: &PolicyParams,
    cfg: &OptimizerConfig,
    probe_count: usize,
    rng: &mut R,
) -> Result<f64> {
    if probe_count == 0 {
        bail!(Domain, "probe_count must be at least 1");
    }
    let (_, analytic) = surrogate_gradient(data, theta, theta_ref, cfg)?;
    let candidates = data.touched_coordinates(theta);
    let centre = evaluate(data, theta, theta_ref, cfg, None)?.clipped;
    let mut coords = Vec::with_capacity(probe_count);
    let mut probe = theta.clone();
    let mut attempts = 0;
    while coords.len() < probe_count {
        attempts += 1;
        if attempts > 100 * probe_count {
            bail!(Numerical, "could not find {probe_count} differentiable probe coordinates");
        }
        let i = candidates[rng.gen_range(0..candidates.len())];
        let w = theta.weights()[i];
        let mut smooth = true;
        for delta in [FD_STEP, -FD_STEP] {
            probe.weights_mut()[i] = w + delta;
            smooth &= evaluate(data, &probe, theta_ref, cfg, None)?.clipped == centre;
        }
        probe.weights_mut()[i] = w;
        if smooth {
            coords.push(i);
        }
    }
    gradient_check(|p| objective_value(data, p, theta_ref, cfg), &analytic, theta, &coords, FD_STEP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Trajectory, Transition};
    use crate::policy::PolicyLayout;

    fn bandit() -> PolicyParams {
        PolicyParams::zeros(PolicyLayout::new(1, 3, 1).unwrap())
    }

    fn single_step_batch(token: u32, reward: f64) -> GroupBatch {
        let tr = Transition {
            state: StateId(0),
            action: TokenAction::new(vec![token]).unwrap(),
            next_state: StateId(0),
            observation: vec![],
            invalid: false,
        };
        GroupBatch { trajectories: vec![Trajectory { transitions: vec![tr], terminal_reward: reward, final_state: StateId(0) }] }
    }

    fn cfg(kl: f64) -> OptimizerConfig {
        OptimizerConfig { kl_coeff: kl, ..Default::default() }
    }

    #[test]
    fn ratio_identities() {
        let p = bandit();
        let a = TokenAction::new(vec![1]).unwrap();
        assert_eq!(policy_ratio(&p, &p, StateId(0), &a).unwrap(), 1.0);
        // Doubling π(a) from 1/3 to 2/3: logits (0, ln 4, 0) give 4/6.
        let mut q = p.clone();
        q.weights_mut()[1] = 4f64.ln();
        assert!((policy_ratio(&q, &p, StateId(0), &a).unwrap() - 2.0).abs() < 1e-12);
        let other = PolicyParams::zeros(PolicyLayout::new(1, 4, 1).unwrap());
        assert!(policy_ratio(&other, &p, StateId(0), &a).is_err());
    }

    #[test]
    fn objective_at_the_old_policy() {
        let p = bandit();
        let batch = single_step_batch(1, 1.0);
        let adv = AdvantageTensor::broadcast(&batch, &[1.0]).unwrap();
        let r = surrogate_objective(&batch, &adv, &p, &p, &p, &cfg(0.0)).unwrap();
        assert_eq!(r.objective, 1.0);
        assert_eq!(r.clipped_fraction, 0.0);
        assert_eq!(r.kl_term, 0.0);
    }

    fn ratio_one_point_five() -> (PolicyParams, PolicyParams) {
        // π_old(1) = 1/3, π(1) = 1/2: logits (0, ln 2, 0) give 2/4.
        let old = bandit();
        let mut new = old.clone();
        new.weights_mut()[1] = 2f64.ln();
        (new, old)
    }

    #[test]
    fn clip_takes_the_pessimistic_branch() {
        let (new, old) = ratio_one_point_five();
        let batch = single_step_batch(1, 1.0);
        let pos = AdvantageTensor::broadcast(&batch, &[1.0]).unwrap();
        let r = surrogate_objective(&batch, &pos, &new, &old, &old, &cfg(0.0)).unwrap();
        assert!((r.objective - 1.2).abs() < 1e-12);
        assert_eq!(r.clipped_fraction, 1.0);
        let neg = AdvantageTensor::broadcast(&batch, &[-1.0]).unwrap();
        let r = surrogate_objective(&batch, &neg, &new, &old, &old, &cfg(0.0)).unwrap();
        assert!((r.objective + 1.5).abs() < 1e-12);
        assert_eq!(r.clipped_fraction, 0.0);
    }

    #[test]
    fn kl_penalty_lowers_the_objective() {
        let (new, old) = ratio_one_point_five();
        let batch = single_step_batch(1, 1.0);
        let adv = AdvantageTensor::broadcast(&batch, &[-1.0]).unwrap();
        let data = UpdateData::single(&batch, &adv, &old).unwrap();
        let mut prev = f64::INFINITY;
        for beta in [0.0, 0.01, 0.1, 1.0] {
            let j = objective_value(&data, &new, &old, &cfg(beta)).unwrap();
            assert!(j < prev);
            prev = j;
        }
    }

    #[test]
    fn gradient_step_arithmetic() {
        let p = bandit();
        let zero = vec![0.0; 6];
        assert_eq!(gradient_step(&p, &zero, 0.1).unwrap(), p);
        let e1 = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let q = gradient_step(&p, &e1, 0.1).unwrap();
        assert_eq!(q.weights()[1], 0.1);
        let g = vec![0.25, -0.5, 0.125, 0.0, 1.0, -2.0];
        let twice = gradient_step(&gradient_step(&p, &g, 0.5).unwrap(), &g, 0.5).unwrap();
        let once = gradient_step(&p, &g, 1.0).unwrap();
        assert_eq!(twice, once);
        assert!(gradient_step(&p, &[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0], 0.1).is_err());
    }

    #[test]
    fn positive_advantage_raises_the_action_probability() {
        let p = bandit();
        let batch = single_step_batch(2, 1.0);
        let adv = AdvantageTensor::broadcast(&batch, &[1.0]).unwrap();
        let data = UpdateData::single(&batch, &adv, &p).unwrap();
        let (_, g) = surrogate_gradient(&data, &p, &p, &cfg(0.01)).unwrap();
        let q = gradient_step(&p, &g, 0.01).unwrap();
        let a = TokenAction::new(vec![2]).unwrap();
        let before = p.log_prob(StateId(0), &a, Context::Prior).unwrap().total;
        let after = q.log_prob(StateId(0), &a, Context::Prior).unwrap().total;
        assert!(after > before);
    }

    #[test]
    fn finite_difference_on_the_bandit() {
        let (new, old) = ratio_one_point_five();
        let batch = single_step_batch(2, 1.0);
        let adv = AdvantageTensor::broadcast(&batch, &[0.7]).unwrap();
        let data = UpdateData::single(&batch, &adv, &old).unwrap();
        let mut rng = crate::rng::stream(1, &[]);
        let err = finite_difference_check(&data, &new, &old, &cfg(0.05), 3, &mut rng).unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
