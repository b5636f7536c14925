//! Delimited record streams: per-iteration metrics, per-step credit rows
//! and exact oracle tables. Every stream starts with a header row.

use std::io::Write;

use hcapo_core::advantage::AdvantageTensor;
use hcapo_core::env::{EnvSpec, StateId};
use hcapo_core::hindsight::HindsightTable;
use hcapo_core::oracle::ExactValues;
use hcapo_core::trainer::IterationMetrics;
use serde::{Deserialize, Serialize};

use crate::IoError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub success_rate: f64,
    pub mean_traj_length: f64,
    pub redundant_fraction: f64,
    pub mean_composite_advantage: f64,
    pub objective: f64,
    pub clipped_fraction: f64,
    pub kl_term: f64,
    pub grad_norm: f64,
    pub degenerate_groups: usize,
}

impl From<&IterationMetrics> for MetricsRecord {
    fn from(m: &IterationMetrics) -> Self {
        Self {
            iteration: m.iteration,
            success_rate: m.success_rate,
            mean_traj_length: m.mean_traj_length,
            redundant_fraction: m.redundant_fraction,
            mean_composite_advantage: m.mean_composite_advantage,
            objective: m.surrogate.objective,
            clipped_fraction: m.surrogate.clipped_fraction,
            kl_term: m.surrogate.kl_term,
            grad_norm: m.surrogate.grad_norm,
            degenerate_groups: m.degenerate_groups,
        }
    }
}

/// Append-only metrics writer. Each record is flushed as it is written.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { inner: csv::Writer::from_writer(out) }
    }

    pub fn write(&mut self, m: &IterationMetrics) -> Result<(), IoError> {
        self.inner.serialize(MetricsRecord::from(m))?;
        self.inner.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn read_metrics<R: std::io::Read>(input: R) -> Result<Vec<MetricsRecord>, IoError> {
    let mut reader = csv::Reader::from_reader(input);
    Ok(reader.deserialize().collect::<Result<Vec<_>, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreditRecord {
    pub trajectory_id: usize,
    pub step: usize,
    pub state: usize,
    pub score: f64,
    pub ratio: f64,
    pub refined_q: f64,
    pub smoothed_q: f64,
    pub macro_adv: f64,
    pub micro_adv: f64,
    pub composite: f64,
    pub masked: bool,
}

/// One record per `(trajectory, step)`.
pub fn credit_records(
    batch: &hcapo_core::env::GroupBatch,
    table: &HindsightTable,
    adv: &AdvantageTensor,
) -> Result<Vec<CreditRecord>, IoError> {
    if table.len() != adv.len() || table.len() != batch.total_steps() {
        return Err(hcapo_core::Error::Domain("credit rows are not aligned".into()).into());
    }
    let states = batch.trajectories.iter().flat_map(|t| t.transitions.iter().map(|tr| tr.state.0));
    Ok(table
        .rows()
        .iter()
        .zip(adv.rows())
        .zip(states)
        .map(|((h, a), state)| CreditRecord {
            trajectory_id: h.trajectory,
            step: h.step,
            state,
            score: h.score,
            ratio: h.ratio,
            refined_q: h.refined_q,
            smoothed_q: h.smoothed_q,
            macro_adv: a.macro_adv,
            micro_adv: a.micro,
            composite: a.composite,
            masked: a.masked,
        })
        .collect())
}

pub fn write_records<W: Write, T: Serialize>(out: W, records: &[T]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub state: usize,
    /// Tokens joined by `-`.
    pub action: String,
    pub policy_prob: f64,
    pub q: f64,
    pub v: f64,
    pub visitation: f64,
}

/// Step-1 `Q` and `V` with `d^π`, for every non-terminal state and every
/// action with nonzero policy probability or a table entry.
pub fn oracle_records(spec: &EnvSpec, values: &ExactValues) -> Result<Vec<OracleRecord>, IoError> {
    let mut out = Vec::new();
    for s in 0..spec.state_count() {
        let state = StateId(s);
        if spec.is_terminal(state) {
            continue;
        }
        let v = values.v(state)?;
        let visitation = values.visitation(state)?;
        for action in values.actions().actions() {
            let p = values.policy_prob(state, action)?;
            if p < 1e-9 && spec.lookup(state, action).is_none() {
                continue;
            }
            out.push(OracleRecord {
                state: s,
                action: action.tokens().iter().map(u32::to_string).collect::<Vec<_>>().join("-"),
                policy_prob: p,
                q: values.q(state, action)?,
                v,
                visitation,
            });
        }
    }
    Ok(out)
}
