//! Hindsight credit: verification scores, self-normalized ratios and refined
//! step-level Q-values.
//!
//! For a step `(s_t, a_t)` of a trajectory that ended in `s_final`, the score
//! is the geometric-mean token probability of `a_t` under the hindsight
//! context, sharpened by a temperature:
//!
//! ```text
//! score = exp( mean_j log π(y_j | y_<j, s_t, s_final) / T_temp )
//! ```
//!
//! The ratio divides the score by the trajectory's mean score and clips it
//! to `[C_min, C_max]`. The refined Q-value scales the discounted terminal
//! return `γ^(T-t) R` by that ratio.

use alloc::vec::Vec;

use crate::env::{GroupBatch, StateId, TokenAction};
use crate::error::{bail, Result};
use crate::math;
use crate::policy::{Context, PolicyParams};

/// Confidence at or below which a step counts as redundant (unit temperature).
pub const REDUNDANT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HindsightConfig {
    pub sharpen_temp: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    pub discount: f64,
    pub smooth_alpha: f64,
    pub smoothing_enabled: bool,
}

impl Default for HindsightConfig {
    fn default() -> Self {
        Self {
            sharpen_temp: 5.0,
            clip_min: 0.8,
            clip_max: 1.2,
            discount: 0.95,
            smooth_alpha: 0.5,
            smoothing_enabled: false,
        }
    }
}

impl HindsightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sharpen_temp > 0.0) || !self.sharpen_temp.is_finite() {
            bail!(Config, "sharpen_temp must be positive and finite");
        }
        if !(self.clip_min <= 1.0 && 1.0 <= self.clip_max) || !(self.clip_min > 0.0) {
            bail!(Config, "clip bounds must satisfy 0 < clip_min <= 1 <= clip_max");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            bail!(Config, "discount must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.smooth_alpha) {
            bail!(Config, "smooth_alpha must be in [0, 1]");
        }
        Ok(())
    }
}

/// Score from per-token log-probabilities, exponentiated once at the end.
pub fn score_from_log_probs(per_token: &[f64], sharpen_temp: f64) -> Result<f64> {
    if per_token.is_empty() {
        bail!(Domain, "cannot score an empty action");
    }
    let mean = per_token.iter().sum::<f64>() / per_token.len() as f64;
    Ok(math::exp(mean / sharpen_temp))
}

/// Hindsight confidence of `action` at `state` given the episode ended in
/// `final_state`.
pub fn score_action(
    policy: &PolicyParams,
    state: StateId,
    action: &TokenAction,
    final_state: StateId,
    cfg: &HindsightConfig,
) -> Result<f64> {
    let lp = policy.log_prob(state, action, Context::Hindsight(final_state))?;
    score_from_log_probs(&lp.per_token, cfg.sharpen_temp)
}

pub fn trajectory_mean(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        bail!(Domain, "mean of an empty score list");
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// `clip(score / traj_mean, C_min, C_max)`.
pub fn importance_ratio(score: f64, traj_mean: f64, cfg: &HindsightConfig) -> Result<f64> {
    if !(traj_mean > 0.0) {
        bail!(Domain, "trajectory mean score must be positive, got {traj_mean}");
    }
    Ok((score / traj_mean).clamp(cfg.clip_min, cfg.clip_max))
}

/// `ratio * γ^(T - t) * R` for the 1-based step `t` of a horizon-`T` episode.
pub fn refined_q(ratio: f64, horizon: usize, step: usize, terminal_reward: f64, cfg: &HindsightConfig) -> Result<f64> {
    if step == 0 || step > horizon {
        bail!(Domain, "step {step} outside 1..={horizon}");
    }
    Ok(ratio * math::powu(cfg.discount, horizon - step) * terminal_reward)
}

/// `q̃[t] = α q[t] + (1 - α) q[t + 1]`, keeping the last value unchanged.
pub fn temporal_smooth(q_values: &[f64], alpha: f64) -> Vec<f64> {
    let n = q_values.len();
    (0..n)
        .map(|t| if t + 1 < n { alpha * q_values[t] + (1.0 - alpha) * q_values[t + 1] } else { q_values[t] })
        .collect()
}

/// Whether a unit-temperature score marks the step redundant.
pub fn is_redundant_score(score: f64) -> bool {
    score <= REDUNDANT_THRESHOLD
}

/// The redundant-action test: confidence at `T_temp = 1` is at most 0.9.
pub fn redundant_flag(policy: &PolicyParams, state: StateId, action: &TokenAction, final_state: StateId) -> Result<bool> {
    let lp = policy.log_prob(state, action, Context::Hindsight(final_state))?;
    Ok(is_redundant_score(score_from_log_probs(&lp.per_token, 1.0)?))
}

/// One `(trajectory, step)` entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HindsightRow {
    pub trajectory: usize,
    /// 1-based.
    pub step: usize,
    pub score: f64,
    pub ratio: f64,
    pub refined_q: f64,
    pub smoothed_q: f64,
}

/// Hindsight quantities for every step of a group, trajectory-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HindsightTable {
    rows: Vec<HindsightRow>,
    offsets: Vec<usize>,
    traj_mean_scores: Vec<f64>,
}

impl HindsightTable {
    /// Assembles a table from per-trajectory scores and unclipped ratios.
    /// Ratios are clipped here, then refined and (optionally) smoothed.
    pub fn from_parts(
        batch: &GroupBatch,
        scores: Vec<Vec<f64>>,
        raw_ratios: Vec<Vec<f64>>,
        cfg: &HindsightConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if scores.len() != batch.len() || raw_ratios.len() != batch.len() {
            bail!(Domain, "scores and ratios must cover every trajectory");
        }
        let mut rows = Vec::with_capacity(batch.total_steps());
        let mut offsets = Vec::with_capacity(batch.len() + 1);
        let mut traj_mean_scores = Vec::with_capacity(batch.len());
        for (i, traj) in batch.trajectories.iter().enumerate() {
            let horizon = traj.horizon();
            if horizon == 0 {
                bail!(Domain, "trajectory {i} is empty");
            }
            if scores[i].len() != horizon || raw_ratios[i].len() != horizon {
                bail!(Domain, "trajectory {i}: expected {horizon} scores and ratios");
            }
            traj_mean_scores.push(trajectory_mean(&scores[i])?);
            let ratios: Vec<f64> = raw_ratios[i].iter().map(|r| r.clamp(cfg.clip_min, cfg.clip_max)).collect();
            let q = ratios
                .iter()
                .enumerate()
                .map(|(t, &ratio)| refined_q(ratio, horizon, t + 1, traj.terminal_reward, cfg))
                .collect::<Result<Vec<_>>>()?;
            let smoothed = if cfg.smoothing_enabled { temporal_smooth(&q, cfg.smooth_alpha) } else { q.clone() };
            offsets.push(rows.len());
            for t in 0..horizon {
                rows.push(HindsightRow {
                    trajectory: i,
                    step: t + 1,
                    score: scores[i][t],
                    ratio: ratios[t],
                    refined_q: q[t],
                    smoothed_q: smoothed[t],
                });
            }
        }
        offsets.push(rows.len());
        Ok(Self { rows, offsets, traj_mean_scores })
    }

    pub fn rows(&self) -> &[HindsightRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn trajectory_count(&self) -> usize {
        self.traj_mean_scores.len()
    }

    /// Rows of trajectory `i`, in step order.
    pub fn trajectory_rows(&self, i: usize) -> &[HindsightRow] {
        &self.rows[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn traj_mean_score(&self, i: usize) -> f64 {
        self.traj_mean_scores[i]
    }
}

/// Scores every step with the hindsight context of its own final state and
/// builds the table with self-normalized ratios.
pub fn build_hindsight_table(batch: &GroupBatch, policy: &PolicyParams, cfg: &HindsightConfig) -> Result<HindsightTable> {
    cfg.validate()?;
    let mut scores = Vec::with_capacity(batch.len());
    let mut ratios = Vec::with_capacity(batch.len());
    for traj in &batch.trajectories {
        let s: Vec<f64> = traj
            .transitions
            .iter()
            .map(|tr| score_action(policy, tr.state, &tr.action, traj.final_state, cfg))
            .collect::<Result<_>>()?;
        let mean = trajectory_mean(&s)?;
        if !(mean > 0.0) {
            bail!(Numerical, "trajectory mean score underflowed to {mean}");
        }
        ratios.push(s.iter().map(|&x| x / mean).collect());
        scores.push(s);
    }
    HindsightTable::from_parts(batch, scores, ratios, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Trajectory, Transition};
    use crate::policy::PolicyLayout;

    fn cfg() -> HindsightConfig {
        HindsightConfig::default()
    }

    #[test]
    fn score_arithmetic() {
        let s = score_from_log_probs(&[-0.2, -0.4], 5.0).unwrap();
        assert!((s - (-0.06f64).exp()).abs() < 1e-15);
        assert!((s - 0.94176).abs() < 1e-5);
        assert_eq!(score_from_log_probs(&[0.0, 0.0, 0.0], 0.3).unwrap(), 1.0);
        assert!(score_from_log_probs(&[], 1.0).is_err());
    }

    #[test]
    fn score_rises_toward_one_with_temperature() {
        let lps = [-0.7, -0.1, -1.3];
        let mut prev = 0.0;
        for temp in [0.5, 1.0, 2.0, 5.0, 50.0, 1e6] {
            let s = score_from_log_probs(&lps, temp).unwrap();
            assert!(s > prev && s < 1.0);
            prev = s;
        }
        assert!(1.0 - prev < 1e-6);
    }

    #[test]
    fn mean_of_scores() {
        assert!((trajectory_mean(&[0.9, 0.3, 0.6]).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(trajectory_mean(&[0.42; 3]).unwrap(), 0.42);
        assert!(trajectory_mean(&[]).is_err());
    }

    #[test]
    fn ratio_clipping() {
        let c = cfg();
        assert_eq!(importance_ratio(0.9, 0.6, &c).unwrap(), 1.2);
        assert_eq!(importance_ratio(0.3, 0.6, &c).unwrap(), 0.8);
        assert_eq!(importance_ratio(0.37, 0.37, &c).unwrap(), 1.0);
        assert!(importance_ratio(0.5, 0.0, &c).is_err());
    }

    #[test]
    fn refined_q_values() {
        let c = cfg();
        assert!((refined_q(1.2, 5, 3, 10.0, &c).unwrap() - 10.83).abs() < 1e-12);
        assert_eq!(refined_q(1.2, 5, 3, 0.0, &c).unwrap(), 0.0);
        assert_eq!(refined_q(0.8, 4, 4, 10.0, &c).unwrap(), 8.0);
        assert!(refined_q(1.0, 4, 0, 10.0, &c).is_err());
        assert!(refined_q(1.0, 4, 5, 10.0, &c).is_err());
    }

    #[test]
    fn smoothing_rules() {
        assert_eq!(temporal_smooth(&[2.0, 4.0], 0.5), [3.0, 4.0]);
        assert_eq!(temporal_smooth(&[1.0, 2.0, 3.0], 0.5), [1.5, 2.5, 3.0]);
        let q = [0.3, -1.0, 7.5, 2.0];
        assert_eq!(temporal_smooth(&q, 1.0), q);
        assert_eq!(temporal_smooth(&[5.0], 0.2), [5.0]);
    }

    #[test]
    fn redundant_threshold_is_inclusive() {
        assert!(is_redundant_score(0.9));
        assert!(!is_redundant_score(0.900_000_1));
        assert!(is_redundant_score((-0.2f64).exp()));
        assert!(!is_redundant_score(1.0));
    }

    #[test]
    fn certain_actions_are_not_redundant() {
        let mut p = PolicyParams::zeros(PolicyLayout::new(2, 2, 1).unwrap());
        // Hindsight context for final state 1 at state 0 puts all mass on token 1.
        let a = TokenAction::new(alloc::vec![1]).unwrap();
        p.set_sequence_distribution(StateId(0), Context::Hindsight(StateId(1)), &[0.0, 1.0]).unwrap();
        assert!(!redundant_flag(&p, StateId(0), &a, StateId(1)).unwrap());
        // Uniform over two tokens: score 0.5.
        assert!(redundant_flag(&p, StateId(0), &a, StateId(0)).unwrap());
    }

    fn trajectory(len: usize, reward: f64) -> Trajectory {
        let transitions = (0..len)
            .map(|t| Transition {
                state: StateId(t % 2),
                action: TokenAction::new(alloc::vec![1]).unwrap(),
                next_state: StateId((t + 1) % 2),
                observation: alloc::vec![],
                invalid: false,
            })
            .collect();
        Trajectory { transitions, terminal_reward: reward, final_state: StateId(len % 2) }
    }

    #[test]
    fn uniform_policy_table_degenerates_to_discounted_return() {
        let batch = GroupBatch { trajectories: alloc::vec![trajectory(3, 10.0), trajectory(5, 0.0)] };
        let p = PolicyParams::zeros(PolicyLayout::new(2, 2, 1).unwrap());
        let c = cfg();
        let table = build_hindsight_table(&batch, &p, &c).unwrap();
        assert_eq!(table.len(), 8);
        for row in table.rows() {
            assert_eq!(row.ratio, 1.0);
            let traj = &batch.trajectories[row.trajectory];
            let expected = c.discount.powi((traj.horizon() - row.step) as i32) * traj.terminal_reward;
            assert!((row.refined_q - expected).abs() < 1e-12);
            assert_eq!(row.smoothed_q, row.refined_q);
        }
        assert!(table.trajectory_rows(1).iter().all(|r| r.refined_q == 0.0));
    }

    #[test]
    fn table_rows_match_manual_recomputation() {
        let batch = GroupBatch { trajectories: alloc::vec![trajectory(4, 10.0), trajectory(2, 10.0)] };
        let mut p = PolicyParams::zeros(PolicyLayout::new(2, 2, 1).unwrap());
        for (i, w) in p.weights_mut().iter_mut().enumerate() {
            *w = (i as f64 * 0.37).sin();
        }
        let c = HindsightConfig { smoothing_enabled: true, ..cfg() };
        let table = build_hindsight_table(&batch, &p, &c).unwrap();
        // Row (trajectory 0, step 2) by hand.
        let traj = &batch.trajectories[0];
        let scores: std::vec::Vec<f64> = traj
            .transitions
            .iter()
            .map(|tr| {
                let lp = p.log_prob(tr.state, &tr.action, Context::Hindsight(traj.final_state)).unwrap();
                (lp.mean / 5.0).exp()
            })
            .collect();
        let mean = scores.iter().sum::<f64>() / 4.0;
        let rho = |t: usize| (scores[t] / mean).clamp(0.8, 1.2);
        let q = |t: usize| rho(t) * 0.95f64.powi(4 - (t as i32 + 1)) * 10.0;
        let row = table.trajectory_rows(0)[1];
        assert_eq!(row.step, 2);
        assert!((row.score - scores[1]).abs() < 1e-12);
        assert!((row.ratio - rho(1)).abs() < 1e-12);
        assert!((row.refined_q - q(1)).abs() < 1e-12);
        assert!((row.smoothed_q - (0.5 * q(1) + 0.5 * q(2))).abs() < 1e-12);
        assert!((table.traj_mean_score(0) - mean).abs() < 1e-12);
        let last = table.trajectory_rows(0)[3];
        assert_eq!(last.smoothed_q, last.refined_q);
    }
}
