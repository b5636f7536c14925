//! Property suite run by `oracle-check`.

use std::time::Instant;

use hcapo_core::env::{rollout_from, EnvSpec, StateId};
use hcapo_core::oracle::{exact_policy_eval, hca_q_estimate, ExactValues};
use hcapo_core::policy::{PolicyLayout, PolicyParams};
use hcapo_core::rng;

use crate::IoError;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn acting_states(spec: &EnvSpec) -> impl Iterator<Item = StateId> + '_ {
    (0..spec.state_count()).map(StateId).filter(|&s| !spec.is_terminal(s))
}

/// Largest `|V_t(s) - Σ_a π(a|s) Q_t(s,a)|` over every step and state.
pub fn bellman_residual(spec: &EnvSpec, values: &ExactValues) -> Result<f64, IoError> {
    let mut worst: f64 = 0.0;
    for s in acting_states(spec) {
        let probs = values.policy_probs(s)?;
        for step in 1..=values.horizon() {
            let mut v = 0.0;
            for (a, p) in values.actions().actions().iter().zip(probs) {
                v += p * values.q_at(step, s, a)?;
            }
            worst = worst.max((v - values.v_at(step, s)?).abs());
        }
    }
    Ok(worst)
}

/// Largest deviation of `Σ_f P(f|s,a)` from 1.
pub fn reach_residual(spec: &EnvSpec, values: &ExactValues) -> Result<f64, IoError> {
    let mut worst: f64 = 0.0;
    for s in acting_states(spec) {
        for a in values.actions().actions() {
            let mut total = 0.0;
            for f in 0..spec.state_count() {
                total += values.reach(s, a, StateId(f))?;
            }
            worst = worst.max((total - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Largest posterior normalization error and largest
/// `|Σ_f P(f|s) h(a|s,f) - π(a|s)|`.
pub fn bayes_residuals(spec: &EnvSpec, values: &ExactValues) -> Result<(f64, f64), IoError> {
    let (mut norm, mut marg): (f64, f64) = (0.0, 0.0);
    for s in acting_states(spec) {
        let mut acc = vec![0.0; values.actions().len()];
        for f in 0..spec.state_count() {
            let pf = values.final_state_prob(s, StateId(f))?;
            if pf <= 0.0 {
                continue;
            }
            let h = values.hindsight(s, StateId(f))?;
            norm = norm.max((h.iter().sum::<f64>() - 1.0).abs());
            for (x, hi) in acc.iter_mut().zip(&h) {
                *x += pf * hi;
            }
        }
        for (x, p) in acc.iter().zip(values.policy_probs(s)?) {
            marg = marg.max((x - p).abs());
        }
    }
    Ok((norm, marg))
}

/// Result of the sampled HCA check at one action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HcaComparison {
    pub estimate: f64,
    pub std_error: f64,
    pub exact: f64,
    pub z: f64,
}

/// Hindsight estimates of `Q(s0, a)` for every admissible action at the
/// initial state, all from one shared set of `samples` episodes.
pub fn hca_comparisons(
    spec: &EnvSpec,
    policy: &PolicyParams,
    values: &ExactValues,
    samples: usize,
    seed: u64,
) -> Result<Vec<HcaComparison>, IoError> {
    let s0 = spec.initial_state();
    let trajectories = (0..samples)
        .map(|i| rollout_from(spec, policy, s0, 1, &mut rng::stream(seed, &[i as u64])))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for (action, _) in spec.admissible_actions(s0) {
        let est = hca_q_estimate(values, s0, action, 1, &trajectories)?;
        let exact = values.q(s0, action)?;
        out.push(HcaComparison { estimate: est.mean, std_error: est.std_error, exact, z: est.z_score(exact) });
    }
    Ok(out)
}

/// Under the uniform policy, every state indexed below the bottleneck has a
/// lower value than every non-terminal state indexed above it. `None` when
/// there is no bottleneck or one side is empty.
pub fn bottleneck_ordering(spec: &EnvSpec, discount: f64) -> Result<Option<(f64, f64)>, IoError> {
    let Some(b) = spec.bottleneck_state() else { return Ok(None) };
    let uniform = PolicyParams::zeros(PolicyLayout::for_env(spec)?);
    let values = exact_policy_eval(spec, &uniform, discount)?;
    let mut below = f64::NEG_INFINITY;
    let mut above = f64::INFINITY;
    for s in acting_states(spec) {
        let v = values.v(s)?;
        if s.0 < b.0 {
            below = below.max(v);
        } else if s.0 > b.0 {
            above = above.min(v);
        }
    }
    Ok((below.is_finite() && above.is_finite()).then_some((below, above)))
}

/// Runs every oracle property on `spec` under `policy`.
pub fn oracle_suite(
    spec: &EnvSpec,
    policy: &PolicyParams,
    discount: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<Check>, IoError> {
    let start = Instant::now();
    let values = exact_policy_eval(spec, policy, discount)?;
    let mut checks = Vec::new();

    let r = bellman_residual(spec, &values)?;
    checks.push(Check::new("bellman", r <= 1e-9, format!("max residual {r:.3e}")));
    let visits: f64 = (0..spec.state_count()).map(|s| values.visitation(StateId(s))).sum::<Result<f64, _>>()?;
    let e = (visits - 1.0).abs();
    checks.push(Check::new("visitation", e <= 1e-9, format!("sum deviates by {e:.3e}")));
    let r = reach_residual(spec, &values)?;
    checks.push(Check::new("reach", r <= 1e-9, format!("max deviation {r:.3e}")));
    let (norm, marg) = bayes_residuals(spec, &values)?;
    checks.push(Check::new("posterior-normalization", norm <= 1e-12, format!("max deviation {norm:.3e}")));
    checks.push(Check::new("bayes-marginalization", marg <= 1e-9, format!("max deviation {marg:.3e}")));

    let cmp = hca_comparisons(spec, policy, &values, samples, seed)?;
    let worst = cmp.iter().map(|c| c.z).fold(0.0, f64::max);
    checks.push(Check::new(
        "hca-unbiased",
        worst <= 3.0,
        format!("{} actions, {samples} episodes, max |z| {worst:.2}, {:.1}s", cmp.len(), start.elapsed().as_secs_f64()),
    ));

    if let Some((below, above)) = bottleneck_ordering(spec, discount)? {
        checks.push(Check::new(
            "bottleneck-ordering",
            below < above,
            format!("max V before {below:.4} vs min V after {above:.4}"),
        ));
    }
    Ok(checks)
}
