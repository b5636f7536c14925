//! Composite advantage: group-relative outcome signal plus a standardized
//! step-level hindsight correction.
//!
//! `A_{i,t} = (R_i - μ_R) / σ_R + ω (Q̃_{i,t} - μ_H) / σ_H`, where the second
//! term is dropped for negative corrections inside successful trajectories.

use alloc::vec;
use alloc::vec::Vec;

use crate::env::GroupBatch;
use crate::error::{bail, Result};
use crate::hindsight::HindsightTable;
use crate::stats;

/// Which rows share the `(μ_H, σ_H)` of the micro advantage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormScope {
    /// One pair over every step of every trajectory in the group.
    #[default]
    GlobalCrossState,
    /// One pair per step index, over the trajectories that reach it.
    PerTimestep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageConfig {
    pub omega: f64,
    pub norm_scope: NormScope,
    pub std_floor: f64,
    pub mask_enabled: bool,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self { omega: 1.0, norm_scope: NormScope::GlobalCrossState, std_floor: 1e-8, mask_enabled: true }
    }
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.omega.is_finite() || self.omega < 0.0 {
            bail!(Config, "omega must be finite and non-negative");
        }
        if !(self.std_floor > 0.0) {
            bail!(Config, "std_floor must be positive");
        }
        Ok(())
    }
}

/// `(R_i - μ_R) / max(σ_R, std_floor)` with the population deviation.
pub fn macro_advantage(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        bail!(Domain, "group needs at least two rewards, got {}", rewards.len());
    }
    let (mu, sigma) = stats::mean_std(rewards);
    let sigma = sigma.max(std_floor);
    Ok(rewards.iter().map(|&r| (r - mu) / sigma).collect())
}

/// Raw (unfloored) location and scale of the smoothed hindsight Q-values.
#[derive(Debug, Clone, PartialEq)]
pub enum MicroStats {
    Global { mu: f64, sigma: f64 },
    /// Entry `t - 1` holds the statistics of step `t`.
    PerTimestep(Vec<(f64, f64)>),
}

pub fn micro_statistics(table: &HindsightTable, scope: NormScope) -> Result<MicroStats> {
    if table.is_empty() {
        bail!(Domain, "hindsight table is empty");
    }
    match scope {
        NormScope::GlobalCrossState => {
            let q: Vec<f64> = table.rows().iter().map(|r| r.smoothed_q).collect();
            let (mu, sigma) = stats::mean_std(&q);
            Ok(MicroStats::Global { mu, sigma })
        }
        NormScope::PerTimestep => {
            let max_step = table.rows().iter().map(|r| r.step).max().unwrap_or(0);
            let mut columns: Vec<Vec<f64>> = vec![Vec::new(); max_step];
            for i in 0..table.trajectory_count() {
                for row in table.trajectory_rows(i) {
                    columns[row.step - 1].push(row.smoothed_q);
                }
            }
            Ok(MicroStats::PerTimestep(columns.iter().map(|c| stats::mean_std(c)).collect()))
        }
    }
}

/// Standardized smoothed Q-value of every row, in table order.
pub fn micro_advantage(table: &HindsightTable, stats: &MicroStats, std_floor: f64) -> Result<Vec<f64>> {
    match stats {
        MicroStats::Global { mu, sigma } => {
            let sigma = sigma.max(std_floor);
            Ok(table.rows().iter().map(|r| (r.smoothed_q - mu) / sigma).collect())
        }
        MicroStats::PerTimestep(per_step) => table
            .rows()
            .iter()
            .map(|r| match per_step.get(r.step - 1) {
                Some(&(mu, sigma)) => Ok((r.smoothed_q - mu) / sigma.max(std_floor)),
                None => bail!(Domain, "per-step statistics do not cover step {}", r.step),
            })
            .collect(),
    }
}

/// True where the micro term is dropped: successful trajectory and a
/// negative micro advantage.
pub fn do_no_harm_mask(table: &HindsightTable, micro: &[f64], rewards: &[f64]) -> Result<Vec<bool>> {
    if micro.len() != table.len() || rewards.len() != table.trajectory_count() {
        bail!(Domain, "mask inputs are not aligned with the table");
    }
    Ok(table
        .rows()
        .iter()
        .zip(micro)
        .map(|(row, &m)| rewards[row.trajectory] > 0.0 && m < 0.0)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageRow {
    pub trajectory: usize,
    pub step: usize,
    pub macro_adv: f64,
    pub micro: f64,
    pub composite: f64,
    pub masked: bool,
}

/// Advantages for every step of a group, aligned with its hindsight table.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTensor {
    rows: Vec<AdvantageRow>,
    offsets: Vec<usize>,
}

impl AdvantageTensor {
    pub fn rows(&self) -> &[AdvantageRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn trajectory_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn trajectory_rows(&self, i: usize) -> &[AdvantageRow] {
        &self.rows[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Composite advantages of trajectory `i` in step order.
    pub fn composite(&self, i: usize) -> Vec<f64> {
        self.trajectory_rows(i).iter().map(|r| r.composite).collect()
    }

    /// A tensor whose every step carries its trajectory-level advantage.
    /// Used for plain group-relative updates.
    pub fn broadcast(batch: &GroupBatch, per_trajectory: &[f64]) -> Result<Self> {
        if per_trajectory.len() != batch.len() {
            bail!(Domain, "one advantage per trajectory required");
        }
        let mut rows = Vec::with_capacity(batch.total_steps());
        let mut offsets = vec![0];
        for (i, traj) in batch.trajectories.iter().enumerate() {
            for t in 0..traj.horizon() {
                let a = per_trajectory[i];
                rows.push(AdvantageRow { trajectory: i, step: t + 1, macro_adv: a, micro: 0.0, composite: a, masked: false });
            }
            offsets.push(rows.len());
        }
        Ok(Self { rows, offsets })
    }
}

/// `macro_i + ω micro_{i,t}` where unmasked, `macro_i` where masked.
pub fn composite_advantage(
    macro_adv: &[f64],
    table: &HindsightTable,
    micro: &[f64],
    mask: &[bool],
    cfg: &AdvantageConfig,
) -> Result<AdvantageTensor> {
    if macro_adv.len() != table.trajectory_count() || micro.len() != table.len() || mask.len() != table.len() {
        bail!(Domain, "advantage inputs are not aligned with the table");
    }
    let mut offsets = vec![0];
    let mut rows = Vec::with_capacity(table.len());
    for i in 0..table.trajectory_count() {
        for row in table.trajectory_rows(i) {
            let k = rows.len();
            let masked = cfg.mask_enabled && mask[k];
            let m = macro_adv[i];
            let composite = if masked { m } else { m + cfg.omega * micro[k] };
            rows.push(AdvantageRow { trajectory: i, step: row.step, macro_adv: m, micro: micro[k], composite, masked });
        }
        offsets.push(rows.len());
    }
    Ok(AdvantageTensor { rows, offsets })
}

/// Macro, micro, mask and composite for one group.
pub fn compute_advantages(batch: &GroupBatch, table: &HindsightTable, cfg: &AdvantageConfig) -> Result<AdvantageTensor> {
    cfg.validate()?;
    if table.trajectory_count() != batch.len() || table.len() != batch.total_steps() {
        bail!(Domain, "hindsight table does not match the batch");
    }
    let rewards = batch.rewards();
    let macro_adv = macro_advantage(&rewards, cfg.std_floor)?;
    let stats = micro_statistics(table, cfg.norm_scope)?;
    let micro = micro_advantage(table, &stats, cfg.std_floor)?;
    let mask = do_no_harm_mask(table, &micro, &rewards)?;
    composite_advantage(&macro_adv, table, &micro, &mask, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{StateId, TokenAction, Trajectory, Transition};
    use crate::hindsight::HindsightConfig;

    fn traj(len: usize, reward: f64) -> Trajectory {
        let transitions = (0..len)
            .map(|_| Transition {
                state: StateId(0),
                action: TokenAction::new(vec![1]).unwrap(),
                next_state: StateId(0),
                observation: vec![],
                invalid: false,
            })
            .collect();
        Trajectory { transitions, terminal_reward: reward, final_state: StateId(0) }
    }

    /// A table whose smoothed Q-values are exactly `qs` (ratio 1, γ = 1).
    fn table_with(qs: &[&[f64]]) -> (GroupBatch, HindsightTable) {
        let batch = GroupBatch { trajectories: qs.iter().map(|q| traj(q.len(), 1.0)).collect() };
        let cfg = HindsightConfig { discount: 1.0, clip_min: 0.01, clip_max: 100.0, ..Default::default() };
        let scores = qs.iter().map(|q| vec![1.0; q.len()]).collect();
        let ratios = qs.iter().map(|q| q.to_vec()).collect();
        let table = HindsightTable::from_parts(&batch, scores, ratios, &cfg).unwrap();
        (batch, table)
    }

    #[test]
    fn macro_examples() {
        let a = macro_advantage(&[10.0, 0.0, 0.0, 0.0], 1e-8).unwrap();
        let s = 18.75f64.sqrt();
        let expected = [7.5 / s, -2.5 / s, -2.5 / s, -2.5 / s];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 1e-12);
        }
        assert!((a[0] - 1.7321).abs() < 1e-4 && (a[1] + 0.5774).abs() < 1e-4);
        assert_eq!(macro_advantage(&[10.0, 0.0], 1e-8).unwrap(), [1.0, -1.0]);
        assert_eq!(macro_advantage(&[3.0; 5], 1e-8).unwrap(), [0.0; 5]);
        assert!(macro_advantage(&[1.0], 1e-8).is_err());
    }

    #[test]
    fn global_statistics() {
        let (_, table) = table_with(&[&[2.0], &[4.0]]);
        assert_eq!(micro_statistics(&table, NormScope::GlobalCrossState).unwrap(), MicroStats::Global { mu: 3.0, sigma: 1.0 });
    }

    #[test]
    fn degenerate_statistics_give_zero_micro() {
        let (_, table) = table_with(&[&[2.5, 2.5], &[2.5]]);
        let stats = micro_statistics(&table, NormScope::GlobalCrossState).unwrap();
        assert_eq!(micro_advantage(&table, &stats, 1e-8).unwrap(), [0.0; 3]);
    }

    #[test]
    fn per_timestep_excludes_short_trajectories() {
        let (_, table) = table_with(&[&[1.0, 2.0], &[3.0, 6.0, 9.0]]);
        let stats = micro_statistics(&table, NormScope::PerTimestep).unwrap();
        let MicroStats::PerTimestep(cols) = &stats else { panic!() };
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0], (2.0, 1.0));
        assert_eq!(cols[1], (4.0, 2.0));
        assert_eq!(cols[2], (9.0, 0.0));
        let micro = micro_advantage(&table, &stats, 1e-8).unwrap();
        assert_eq!(micro, [-1.0, -1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn per_timestep_stats_must_cover_the_table() {
        let (_, table) = table_with(&[&[1.0, 2.0, 3.0]]);
        let short = MicroStats::PerTimestep(vec![(0.0, 1.0)]);
        assert!(matches!(micro_advantage(&table, &short, 1e-8), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn micro_signs_follow_the_mean() {
        let (_, table) = table_with(&[&[1.0, 5.0, 3.0]]);
        let stats = micro_statistics(&table, NormScope::GlobalCrossState).unwrap();
        let micro = micro_advantage(&table, &stats, 1e-8).unwrap();
        assert!(micro[0] < 0.0 && micro[1] > 0.0 && micro[2] == 0.0);
    }

    #[test]
    fn mask_only_in_successful_trajectories() {
        let (_, table) = table_with(&[&[1.0, 1.0], &[1.0]]);
        let micro = [-0.4, 0.4, -0.4];
        let mask = do_no_harm_mask(&table, &micro, &[10.0, 0.0]).unwrap();
        assert_eq!(mask, [true, false, false]);
    }

    #[test]
    fn composite_examples() {
        let (batch, table) = table_with(&[&[1.0, 1.0]]);
        let _ = batch;
        let on = AdvantageConfig::default();
        let t = composite_advantage(&[1.0], &table, &[0.5, -0.5], &[false, true], &on).unwrap();
        assert_eq!(t.composite(0), [1.5, 1.0]);
        let off = AdvantageConfig { mask_enabled: false, ..on };
        let t = composite_advantage(&[1.0], &table, &[0.5, -0.5], &[false, true], &off).unwrap();
        assert_eq!(t.composite(0), [1.5, 0.5]);
        let grpo = AdvantageConfig { omega: 0.0, ..on };
        let t = composite_advantage(&[1.0], &table, &[0.5, -0.5], &[false, false], &grpo).unwrap();
        assert_eq!(t.composite(0), [1.0, 1.0]);
        assert!(composite_advantage(&[1.0, 2.0], &table, &[0.5, -0.5], &[false, true], &on).is_err());
    }
}
