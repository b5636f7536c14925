//! Exact ground truth on small tabular environments.
//!
//! Episodes are truncated at `max_steps`, so values depend on the step
//! index. Every table is indexed by the 1-based step `t` at which the action
//! is taken. Step-free accessors (`q`, `v`, `reach`, `hindsight`) average
//! over steps weighted by how often the policy is at `s` at step `t`, and
//! fall back to step 1 for states the policy never visits.
//!
//! The final state of an episode is its terminal state, or the state it was
//! in when the step budget ran out.

use alloc::vec;
use alloc::vec::Vec;

use crate::env::{EnvSpec, StateId, TokenAction, Trajectory};
use crate::error::{bail, Result};
use crate::math;
use crate::policy::{ActionSpace, Context, PolicyParams};

/// Default cap on `horizon × states × actions × states`.
pub const MAX_TABLE_ENTRIES: usize = 10_000_000;

/// Default cap on `states × actions`.
pub const MAX_STATE_ACTIONS: usize = 100_000;

/// Exact values of a policy, all time-indexed.
#[derive(Debug, Clone)]
pub struct ExactValues {
    states: usize,
    horizon: usize,
    discount: f64,
    initial: StateId,
    terminal_reward: Vec<Option<f64>>,
    actions: ActionSpace,
    /// `π(a|s)`, `S × A`.
    pi: Vec<f64>,
    /// `Q_t(s,a)`, `H × S × A`.
    q: Vec<f64>,
    /// `V_t(s)`, `H × S`.
    v: Vec<f64>,
    /// `P(s_t = s)` for non-terminal `s`, `H × S`.
    occupancy: Vec<f64>,
    /// `P(final = f | s_t = s, a_t = a)`, `H × S × A × S`.
    reach: Vec<f64>,
    /// `E[γ^(T-t) 1{final = f} | s_t = s, a_t = a]`, same shape.
    discounted_reach: Vec<f64>,
    /// `r̂(s,a)`: the penalty for inadmissible actions, `S × A`.
    immediate: Vec<f64>,
}

/// Builds [`ExactValues`] under the default capacity limits.
pub fn exact_policy_eval(spec: &EnvSpec, policy: &PolicyParams, discount: f64) -> Result<ExactValues> {
    exact_policy_eval_with_limit(spec, policy, discount, MAX_TABLE_ENTRIES)
}

pub fn exact_policy_eval_with_limit(
    spec: &EnvSpec,
    policy: &PolicyParams,
    discount: f64,
    max_table_entries: usize,
) -> Result<ExactValues> {
    spec.validate()?;
    policy.check_compatible(spec)?;
    if !(discount > 0.0 && discount <= 1.0) {
        bail!(Config, "discount must be in (0, 1], got {discount}");
    }
    let actions = ActionSpace::new(policy.layout());
    let (ns, na, nh) = (spec.state_count(), actions.len(), spec.max_steps());
    if ns.saturating_mul(na) > MAX_STATE_ACTIONS {
        bail!(Capacity, "{ns} states x {na} actions exceeds {MAX_STATE_ACTIONS}");
    }
    let entries = nh.saturating_mul(ns).saturating_mul(na).saturating_mul(ns);
    if entries > max_table_entries {
        bail!(Capacity, "reach table needs {entries} entries, limit is {max_table_entries}");
    }

    let terminal_reward: Vec<Option<f64>> =
        (0..ns).map(|s| spec.rewards().get(&StateId(s)).copied()).collect();
    let mut pi = vec![0.0; ns * na];
    let mut next = vec![0usize; ns * na];
    let mut immediate = vec![0.0; ns * na];
    for s in 0..ns {
        if terminal_reward[s].is_some() {
            continue;
        }
        let probs = policy.sequence_probs(StateId(s), Context::Prior)?;
        pi[s * na..(s + 1) * na].copy_from_slice(&probs);
        for (a, action) in actions.actions().iter().enumerate() {
            let (n, invalid) = spec.next_state(StateId(s), action);
            next[s * na + a] = n.0;
            if invalid {
                immediate[s * na + a] = spec.invalid_penalty();
            }
        }
    }

    let mut q = vec![0.0; nh * ns * na];
    let mut v = vec![0.0; nh * ns];
    let mut reach = vec![0.0; entries];
    let mut discounted_reach = vec![0.0; entries];
    // Policy-averaged reach of the following step, `S × S`.
    let mut next_reach = vec![0.0; ns * ns];
    let mut next_disc = vec![0.0; ns * ns];
    for t in (0..nh).rev() {
        let last = t + 1 == nh;
        let mut cur_reach = vec![0.0; ns * ns];
        let mut cur_disc = vec![0.0; ns * ns];
        for s in 0..ns {
            if terminal_reward[s].is_some() {
                continue;
            }
            let mut vs = 0.0;
            for a in 0..na {
                let sa = s * na + a;
                let n = next[sa];
                let base = (t * ns * na + sa) * ns;
                let row = &mut reach[base..base + ns];
                let drow = &mut discounted_reach[base..base + ns];
                let future = if let Some(r) = terminal_reward[n] {
                    row[n] = 1.0;
                    drow[n] = 1.0;
                    r
                } else if last {
                    row[n] = 1.0;
                    drow[n] = 1.0;
                    0.0
                } else {
                    row.copy_from_slice(&next_reach[n * ns..(n + 1) * ns]);
                    for (d, &x) in drow.iter_mut().zip(&next_disc[n * ns..(n + 1) * ns]) {
                        *d = discount * x;
                    }
                    discount * v[(t + 1) * ns + n]
                };
                let qv = immediate[sa] + future;
                q[t * ns * na + sa] = qv;
                let p = pi[sa];
                vs += p * qv;
                if p > 0.0 {
                    for f in 0..ns {
                        cur_reach[s * ns + f] += p * reach[base + f];
                        cur_disc[s * ns + f] += p * discounted_reach[base + f];
                    }
                }
            }
            v[t * ns + s] = vs;
        }
        next_reach = cur_reach;
        next_disc = cur_disc;
    }

    let mut occupancy = vec![0.0; nh * ns];
    occupancy[spec.initial_state().0] = 1.0;
    for t in 0..nh.saturating_sub(1) {
        for s in 0..ns {
            let p = occupancy[t * ns + s];
            if p == 0.0 {
                continue;
            }
            for a in 0..na {
                let n = next[s * na + a];
                if terminal_reward[n].is_none() {
                    occupancy[(t + 1) * ns + n] += p * pi[s * na + a];
                }
            }
        }
    }

    let values = ExactValues {
        states: ns,
        horizon: nh,
        discount,
        initial: spec.initial_state(),
        terminal_reward,
        actions,
        pi,
        q,
        v,
        occupancy,
        reach,
        discounted_reach,
        immediate,
    };
    if values.q.iter().chain(&values.v).any(|x| !x.is_finite()) {
        bail!(Numerical, "non-finite value in policy evaluation");
    }
    Ok(values)
}

impl ExactValues {
    pub fn state_count(&self) -> usize {
        self.states
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn actions(&self) -> &ActionSpace {
        &self.actions
    }

    pub fn is_terminal(&self, state: StateId) -> bool {
        self.terminal_reward.get(state.0).is_some_and(Option::is_some)
    }

    fn na(&self) -> usize {
        self.actions.len()
    }

    fn check_state(&self, state: StateId) -> Result<()> {
        if state.0 >= self.states {
            bail!(Domain, "state {} out of range", state.0);
        }
        Ok(())
    }

    fn check_step(&self, step: usize) -> Result<usize> {
        if step == 0 || step > self.horizon {
            bail!(Domain, "step {step} outside 1..={}", self.horizon);
        }
        Ok(step - 1)
    }

    fn action_index(&self, action: &TokenAction) -> Result<usize> {
        match self.actions.index_of(action) {
            Some(a) => Ok(a),
            None => bail!(Domain, "action {:?} cannot be emitted by the policy", action.tokens()),
        }
    }

    fn check_acting_state(&self, state: StateId) -> Result<()> {
        self.check_state(state)?;
        if self.is_terminal(state) {
            bail!(Domain, "no action is taken in terminal state {}", state.0);
        }
        Ok(())
    }

    /// Step weights `P(s_t = s) / Σ_t P(s_t = s)`, or step 1 if unvisited.
    fn step_weights(&self, s: usize) -> Vec<f64> {
        let ns = self.states;
        let mut w: Vec<f64> = (0..self.horizon).map(|t| self.occupancy[t * ns + s]).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|x| *x /= total);
        } else {
            w.iter_mut().for_each(|x| *x = 0.0);
            w[0] = 1.0;
        }
        w
    }

    pub fn policy_prob(&self, state: StateId, action: &TokenAction) -> Result<f64> {
        self.check_state(state)?;
        Ok(self.pi[state.0 * self.na() + self.action_index(action)?])
    }

    /// `π(·|s)` aligned with [`Self::actions`].
    pub fn policy_probs(&self, state: StateId) -> Result<&[f64]> {
        self.check_state(state)?;
        let na = self.na();
        Ok(&self.pi[state.0 * na..(state.0 + 1) * na])
    }

    /// `r̂(s, a)`: the invalid-action penalty or 0.
    pub fn immediate_reward(&self, state: StateId, action: &TokenAction) -> Result<f64> {
        self.check_state(state)?;
        Ok(self.immediate[state.0 * self.na() + self.action_index(action)?])
    }

    pub fn q_at(&self, step: usize, state: StateId, action: &TokenAction) -> Result<f64> {
        let t = self.check_step(step)?;
        self.check_state(state)?;
        let a = self.action_index(action)?;
        Ok(self.q[(t * self.states + state.0) * self.na() + a])
    }

    pub fn v_at(&self, step: usize, state: StateId) -> Result<f64> {
        let t = self.check_step(step)?;
        self.check_state(state)?;
        Ok(self.v[t * self.states + state.0])
    }

    /// `Q(s, a)` with the full step budget remaining.
    pub fn q(&self, state: StateId, action: &TokenAction) -> Result<f64> {
        self.q_at(1, state, action)
    }

    /// `V(s)` with the full step budget remaining.
    pub fn v(&self, state: StateId) -> Result<f64> {
        self.v_at(1, state)
    }

    /// `P(s_t = s)` for the 1-based step `t`.
    pub fn occupancy(&self, step: usize, state: StateId) -> Result<f64> {
        let t = self.check_step(step)?;
        self.check_state(state)?;
        Ok(self.occupancy[t * self.states + state.0])
    }

    pub fn expected_length(&self) -> f64 {
        self.occupancy.iter().sum()
    }

    /// `d^π(s)`: expected visits to `s` over expected episode length.
    pub fn visitation(&self, state: StateId) -> Result<f64> {
        self.check_state(state)?;
        let ns = self.states;
        let visits: f64 = (0..self.horizon).map(|t| self.occupancy[t * ns + state.0]).sum();
        Ok(visits / self.expected_length())
    }

    pub fn reach_at(&self, step: usize, state: StateId, action: &TokenAction, final_state: StateId) -> Result<f64> {
        let t = self.check_step(step)?;
        self.check_acting_state(state)?;
        self.check_state(final_state)?;
        let a = self.action_index(action)?;
        Ok(self.reach[self.reach_index(t, state.0, a) + final_state.0])
    }

    fn reach_index(&self, t: usize, s: usize, a: usize) -> usize {
        ((t * self.states + s) * self.na() + a) * self.states
    }

    /// Step-averaged `P(final | s, a)` over all final states, `A × S`.
    fn reach_matrix(&self, s: usize) -> Vec<f64> {
        let (ns, na) = (self.states, self.na());
        let w = self.step_weights(s);
        let mut out = vec![0.0; na * ns];
        for (t, &wt) in w.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let base = self.reach_index(t, s, 0);
            for (o, r) in out.iter_mut().zip(&self.reach[base..base + na * ns]) {
                *o += wt * r;
            }
        }
        out
    }

    /// Step-averaged `P(final = f | s, a)`.
    pub fn reach(&self, state: StateId, action: &TokenAction, final_state: StateId) -> Result<f64> {
        self.check_acting_state(state)?;
        self.check_state(final_state)?;
        let a = self.action_index(action)?;
        Ok(self.reach_matrix(state.0)[a * self.states + final_state.0])
    }

    /// `P(final = f | s) = Σ_a π(a|s) P(final = f | s, a)`, step-averaged.
    pub fn final_state_prob(&self, state: StateId, final_state: StateId) -> Result<f64> {
        self.check_acting_state(state)?;
        self.check_state(final_state)?;
        let m = self.reach_matrix(state.0);
        Ok(self.marginal(state.0, &m, final_state.0))
    }

    fn marginal(&self, s: usize, matrix: &[f64], f: usize) -> f64 {
        let (ns, na) = (self.states, self.na());
        (0..na).map(|a| self.pi[s * na + a] * matrix[a * ns + f]).sum()
    }

    fn posterior(&self, s: usize, matrix: &[f64], f: usize) -> Result<Vec<f64>> {
        let (ns, na) = (self.states, self.na());
        let z = self.marginal(s, matrix, f);
        if !(z > 0.0) {
            bail!(Domain, "final state {f} is unreachable from state {s}");
        }
        Ok((0..na).map(|a| self.pi[s * na + a] * matrix[a * ns + f] / z).collect())
    }

    /// `h(a | s, f)` over [`Self::actions`], step-averaged.
    pub fn hindsight(&self, state: StateId, final_state: StateId) -> Result<Vec<f64>> {
        self.check_acting_state(state)?;
        self.check_state(final_state)?;
        self.posterior(state.0, &self.reach_matrix(state.0), final_state.0)
    }

    /// `h(a | s_t = s, f)` at one step.
    pub fn hindsight_at(&self, step: usize, state: StateId, final_state: StateId) -> Result<Vec<f64>> {
        let t = self.check_step(step)?;
        self.check_acting_state(state)?;
        self.check_state(final_state)?;
        let base = self.reach_index(t, state.0, 0);
        let m = &self.reach[base..base + self.na() * self.states];
        self.posterior(state.0, m, final_state.0)
    }

    /// Posterior under the discounted outcome likelihood
    /// `E[γ^(T-t) 1{final = f} | s_t = s, a_t = a]`. Equals
    /// [`Self::hindsight_at`] when the discount is 1.
    pub fn discounted_hindsight_at(&self, step: usize, state: StateId, final_state: StateId) -> Result<Vec<f64>> {
        let t = self.check_step(step)?;
        self.check_acting_state(state)?;
        self.check_state(final_state)?;
        let base = self.reach_index(t, state.0, 0);
        let m = &self.discounted_reach[base..base + self.na() * self.states];
        self.posterior(state.0, m, final_state.0)
    }

    /// Probability that an episode from the initial state ends with a
    /// positive reward.
    pub fn success_probability(&self) -> f64 {
        let (ns, na) = (self.states, self.na());
        let s = self.initial.0;
        (0..ns)
            .filter(|&f| self.terminal_reward[f].is_some_and(|r| r > 0.0))
            .map(|f| (0..na).map(|a| self.pi[s * na + a] * self.reach[self.reach_index(0, s, a) + f]).sum::<f64>())
            .sum()
    }
}

/// `h(a | s, f)` paired with each action, for a fresh undiscounted
/// evaluation of `policy`.
pub fn exact_hindsight_distribution(
    spec: &EnvSpec,
    policy: &PolicyParams,
    state: StateId,
    final_state: StateId,
) -> Result<Vec<(TokenAction, f64)>> {
    let values = exact_policy_eval(spec, policy, 1.0)?;
    let h = values.hindsight(state, final_state)?;
    Ok(values.actions.actions().iter().cloned().zip(h).collect())
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            bail!(Domain, "no samples");
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std_error = if xs.len() < 2 {
            0.0
        } else {
            let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
            math::sqrt(ss / (n - 1.0) / n)
        };
        Ok(Self { mean, std_error, samples: xs.len() })
    }

    /// `|mean - target|` in standard errors. Infinite if the error is
    /// nonzero and the standard error is 0.
    pub fn z_score(&self, target: f64) -> f64 {
        let err = (self.mean - target).abs();
        if err == 0.0 {
            0.0
        } else if self.std_error == 0.0 {
            f64::INFINITY
        } else {
            err / self.std_error
        }
    }
}

fn check_sample(values: &ExactValues, state: StateId, traj: &Trajectory, start_step: usize) -> Result<()> {
    match traj.transitions.first() {
        Some(first) if first.state == state => {}
        _ => bail!(Domain, "trajectory does not start at state {}", state.0),
    }
    if start_step - 1 + traj.horizon() > values.horizon {
        bail!(Domain, "trajectory exceeds the step budget");
    }
    Ok(())
}

/// Plain Monte-Carlo estimate of `E[γ^(T-t) R]` from trajectories that start
/// at the same state.
pub fn monte_carlo_return(trajectories: &[Trajectory], discount: f64) -> Result<McEstimate> {
    let xs: Vec<f64> = trajectories
        .iter()
        .map(|tr| math::powu(discount, tr.horizon().saturating_sub(1)) * tr.terminal_reward)
        .collect();
    McEstimate::from_samples(&xs)
}

/// Hindsight estimate of `Q_t(s, a)` from trajectories sampled by the policy
/// from `s` at step `t`, whatever their first action:
///
/// ```text
/// r̂(s,a) + (h(a | s, f) / π(a|s)) γ^(T-t) R(f)
/// ```
///
/// The ratio uses the discounted outcome likelihood so the estimate stays
/// unbiased when `γ < 1` and episode lengths vary. Penalties of later steps
/// are not credited, so the estimate is exact in expectation only when the
/// invalid-action penalty is 0.
pub fn hca_q_estimate(
    values: &ExactValues,
    state: StateId,
    action: &TokenAction,
    start_step: usize,
    trajectories: &[Trajectory],
) -> Result<McEstimate> {
    let t = values.check_step(start_step)?;
    values.check_acting_state(state)?;
    let a = values.action_index(action)?;
    if trajectories.is_empty() {
        bail!(Domain, "no trajectories");
    }
    let (ns, na) = (values.states, values.na());
    let base = values.reach_index(t, state.0, 0);
    let likelihood = &values.discounted_reach[base..base + na * ns];
    let immediate = values.immediate[state.0 * na + a];
    let mut xs = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        check_sample(values, state, traj, start_step)?;
        let f = traj.final_state.0;
        let reward = values.terminal_reward[f].unwrap_or(0.0);
        let marginal = values.marginal(state.0, likelihood, f);
        if !(marginal > 0.0) {
            bail!(Domain, "sampled final state {f} has zero probability under the policy");
        }
        let ratio = likelihood[a * ns + f] / marginal;
        let discount = math::powu(values.discount, traj.horizon() - 1);
        xs.push(immediate + ratio * discount * reward);
    }
    McEstimate::from_samples(&xs)
}

/// Exact hindsight values for a given ratio rule.
#[derive(Debug, Clone)]
pub struct HindsightValues {
    states: usize,
    actions: usize,
    /// Step-averaged `Q^H(s,a)`, `S × A`.
    q: Vec<f64>,
    /// Step-averaged `V^H(s)`.
    v: Vec<f64>,
    mu: f64,
}

impl HindsightValues {
    pub fn q(&self, state: StateId, action_index: usize) -> f64 {
        self.q[state.0 * self.actions + action_index]
    }

    pub fn v(&self, state: StateId) -> f64 {
        self.v[state.0]
    }

    pub fn values(&self) -> &[f64] {
        &self.v
    }

    pub fn state_count(&self) -> usize {
        self.states
    }

    /// `Σ_s d^π(s) V^H(s)`, the limit of the pooled mean of `Q^H` over all
    /// steps of many episodes.
    pub fn mu(&self) -> f64 {
        self.mu
    }
}

/// `Q^H_t(s,a) = E[ρ(s,a,f) γ^(T-t) R(f)]` with `ρ = transform(h(a|s,f)/π(a|s))`
/// for the step-averaged posterior `h`, and `V^H = E_π[Q^H]`.
///
/// Outcomes whose posterior is undefined use the ratio 1. Penalties are
/// ignored.
pub fn exact_hindsight_state_value<F>(values: &ExactValues, transform: F) -> Result<HindsightValues>
where
    F: Fn(f64) -> f64,
{
    let (ns, na, nh) = (values.states, values.na(), values.horizon);
    let rewarding: Vec<(usize, f64)> = values
        .terminal_reward
        .iter()
        .enumerate()
        .filter_map(|(f, r)| r.filter(|&r| r != 0.0).map(|r| (f, r)))
        .collect();
    let mut q = vec![0.0; ns * na];
    let mut v = vec![0.0; ns];
    let mut mu = 0.0;
    for s in 0..ns {
        if values.terminal_reward[s].is_some() {
            continue;
        }
        let matrix = values.reach_matrix(s);
        let mut rho = vec![1.0; na * rewarding.len()];
        for (k, &(f, _)) in rewarding.iter().enumerate() {
            let z: f64 = (0..na).map(|a| values.pi[s * na + a] * matrix[a * ns + f]).sum();
            for a in 0..na {
                let raw = if z > 0.0 { matrix[a * ns + f] / z } else { 1.0 };
                rho[a * rewarding.len() + k] = transform(raw);
            }
        }
        let weights = values.step_weights(s);
        for t in 0..nh {
            let mut vt = 0.0;
            for a in 0..na {
                let base = values.reach_index(t, s, a);
                let qt: f64 = rewarding
                    .iter()
                    .enumerate()
                    .map(|(k, &(f, r))| values.discounted_reach[base + f] * rho[a * rewarding.len() + k] * r)
                    .sum();
                q[s * na + a] += weights[t] * qt;
                vt += values.pi[s * na + a] * qt;
            }
            v[s] += weights[t] * vt;
            mu += values.occupancy[t * ns + s] * vt;
        }
    }
    let mu = mu / values.expected_length();
    if !mu.is_finite() || q.iter().any(|x| !x.is_finite()) {
        bail!(Numerical, "non-finite hindsight value");
    }
    Ok(HindsightValues { states: ns, actions: na, q, v, mu })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_bottleneck_env, make_chain_env, rollout_from, END_TOKEN};
    use crate::policy::PolicyLayout;
    use crate::rng;

    fn deterministic(spec: &EnvSpec, choose: impl Fn(StateId) -> TokenAction) -> PolicyParams {
        let layout = PolicyLayout::for_env(spec).unwrap();
        let space = ActionSpace::new(&layout);
        let mut p = PolicyParams::zeros(layout);
        for s in 0..spec.state_count() {
            let mut dist = vec![0.0; space.len()];
            dist[space.index_of(&choose(StateId(s))).unwrap()] = 1.0;
            p.set_sequence_distribution(StateId(s), Context::Prior, &dist).unwrap();
        }
        p
    }

    fn asymmetric() -> (EnvSpec, PolicyParams) {
        // s0 --[0]--> s1, s0 --[1]--> s2; from s1 and s2 token 0 reaches
        // the goal and token 1 the dead end.
        let a0 = TokenAction::new(vec![END_TOKEN]).unwrap();
        let a1 = TokenAction::new(vec![1]).unwrap();
        let (goal, dead) = (StateId(3), StateId(4));
        let spec = EnvSpec::new(5, 2, 1, 4)
            .with_terminal(goal, 10.0)
            .with_terminal(dead, 0.0)
            .with_transition(StateId(0), a0.clone(), StateId(1))
            .with_transition(StateId(0), a1.clone(), StateId(2))
            .with_transition(StateId(1), a0.clone(), goal)
            .with_transition(StateId(1), a1.clone(), dead)
            .with_transition(StateId(2), a0, goal)
            .with_transition(StateId(2), a1, dead);
        let mut p = PolicyParams::zeros(PolicyLayout::for_env(&spec).unwrap());
        p.set_sequence_distribution(StateId(1), Context::Prior, &[0.8, 0.2]).unwrap();
        p.set_sequence_distribution(StateId(2), Context::Prior, &[0.2, 0.8]).unwrap();
        (spec, p)
    }

    #[test]
    fn deterministic_chain_value() {
        let spec = make_chain_env(3).unwrap();
        let p = deterministic(&spec, |_| TokenAction::word(1));
        let values = exact_policy_eval(&spec, &p, 0.95).unwrap();
        assert!((values.v(StateId(0)).unwrap() - 9.025).abs() < 1e-9);
        assert!((values.expected_length() - 3.0).abs() < 1e-9);
        assert!((values.success_probability() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bellman_consistency_and_normalization() {
        let spec = make_bottleneck_env(2, 2, 3).unwrap();
        let p = PolicyParams::admissible_prior(&spec, 0.2).unwrap();
        let values = exact_policy_eval(&spec, &p, 0.95).unwrap();
        let space = values.actions().clone();
        let mut total_visitation = 0.0;
        for s in 0..spec.state_count() {
            let state = StateId(s);
            total_visitation += values.visitation(state).unwrap();
            if spec.is_terminal(state) {
                assert_eq!(values.v(state).unwrap(), 0.0);
                continue;
            }
            for step in [1, 5, spec.max_steps()] {
                let v: f64 = space
                    .actions()
                    .iter()
                    .map(|a| values.policy_prob(state, a).unwrap() * values.q_at(step, state, a).unwrap())
                    .sum();
                assert!((v - values.v_at(step, state).unwrap()).abs() < 1e-9);
            }
            for a in space.actions() {
                let total: f64 = (0..spec.state_count()).map(|f| values.reach(state, a, StateId(f)).unwrap()).sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
        assert!((total_visitation - 1.0).abs() < 1e-9);
    }

    #[test]
    fn asymmetric_posterior() {
        let (spec, p) = asymmetric();
        let h = exact_hindsight_distribution(&spec, &p, StateId(0), StateId(3)).unwrap();
        assert!((h[0].1 - 0.8).abs() < 1e-9);
        assert!((h[1].1 - 0.2).abs() < 1e-9);
        let values = exact_policy_eval(&spec, &p, 1.0).unwrap();
        assert!(matches!(values.hindsight(StateId(1), StateId(2)), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn zero_one_likelihoods() {
        let (spec, mut p) = asymmetric();
        p.set_sequence_distribution(StateId(1), Context::Prior, &[1.0, 0.0]).unwrap();
        p.set_sequence_distribution(StateId(2), Context::Prior, &[0.0, 1.0]).unwrap();
        let values = exact_policy_eval(&spec, &p, 1.0).unwrap();
        let h = values.hindsight(StateId(0), StateId(3)).unwrap();
        assert!((h[0] - 1.0).abs() < 1e-9 && h[1] < 1e-9);
    }

    #[test]
    fn equal_likelihoods_leave_the_prior() {
        let (spec, mut p) = asymmetric();
        p.set_sequence_distribution(StateId(0), Context::Prior, &[0.3, 0.7]).unwrap();
        p.set_sequence_distribution(StateId(2), Context::Prior, &[0.8, 0.2]).unwrap();
        let values = exact_policy_eval(&spec, &p, 1.0).unwrap();
        let h = values.hindsight(StateId(0), StateId(3)).unwrap();
        assert!((h[0] - 0.3).abs() < 1e-9 && (h[1] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn bayes_marginalization() {
        let spec = make_bottleneck_env(2, 2, 3).unwrap();
        let p = PolicyParams::admissible_prior(&spec, 0.2).unwrap();
        let values = exact_policy_eval(&spec, &p, 0.95).unwrap();
        for s in 0..spec.state_count() {
            let state = StateId(s);
            if spec.is_terminal(state) {
                continue;
            }
            let mut acc = vec![0.0; values.actions().len()];
            for f in 0..spec.state_count() {
                let pf = values.final_state_prob(state, StateId(f)).unwrap();
                if pf == 0.0 {
                    continue;
                }
                let h = values.hindsight(state, StateId(f)).unwrap();
                assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (x, hi) in acc.iter_mut().zip(h) {
                    *x += pf * hi;
                }
            }
            for (x, pi) in acc.iter().zip(values.policy_probs(state).unwrap()) {
                assert!((x - pi).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hca_is_exact_on_a_deterministic_path() {
        let spec = make_chain_env(3).unwrap();
        let p = deterministic(&spec, |_| TokenAction::word(1));
        let values = exact_policy_eval(&spec, &p, 0.95).unwrap();
        let traj = rollout_from(&spec, &p, StateId(0), 1, &mut rng::stream(3, &[])).unwrap();
        let a = TokenAction::word(1);
        let est = hca_q_estimate(&values, StateId(0), &a, 1, &[traj]).unwrap();
        assert!((est.mean - values.q(StateId(0), &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn uninformative_hindsight_is_plain_monte_carlo() {
        // Every action moves 0 -> 1 -> 2 (goal) or 1 -> 3 (dead end).
        let mut spec = EnvSpec::new(4, 3, 1, 3).with_terminal(StateId(2), 10.0).with_terminal(StateId(3), 0.0);
        for t in 0..3 {
            let a = TokenAction::new(vec![t]).unwrap();
            spec = spec
                .with_transition(StateId(0), a.clone(), StateId(1))
                .with_transition(StateId(1), a, if t == 1 { StateId(2) } else { StateId(3) });
        }
        let p = PolicyParams::zeros(PolicyLayout::for_env(&spec).unwrap());
        let values = exact_policy_eval(&spec, &p, 0.9).unwrap();
        let trajs: Vec<_> = (0..50)
            .map(|i| rollout_from(&spec, &p, StateId(0), 1, &mut rng::stream(9, &[i])).unwrap())
            .collect();
        let mc = monte_carlo_return(&trajs, 0.9).unwrap();
        let a = TokenAction::new(vec![2]).unwrap();
        let est = hca_q_estimate(&values, StateId(0), &a, 1, &trajs).unwrap();
        assert!((est.mean - mc.mean).abs() < 1e-12);
        assert!(hca_q_estimate(&values, StateId(0), &a, 1, &[]).is_err());
    }

    #[test]
    fn unit_ratio_recovers_the_value() {
        let spec = make_bottleneck_env(2, 2, 3).unwrap();
        let p = PolicyParams::admissible_prior(&spec, 0.2).unwrap();
        let values = exact_policy_eval(&spec, &p, 0.95).unwrap();
        let vh = exact_hindsight_state_value(&values, |_| 1.0).unwrap();
        for s in 0..spec.state_count() {
            let state = StateId(s);
            if spec.is_terminal(state) {
                continue;
            }
            let steps = 1..=spec.max_steps();
            let visits: f64 = steps.clone().map(|t| values.occupancy(t, state).unwrap()).sum();
            let v: f64 =
                steps.map(|t| values.occupancy(t, state).unwrap() * values.v_at(t, state).unwrap()).sum::<f64>() / visits;
            assert!((vh.v(state) - v).abs() < 1e-9);
        }
    }

    #[test]
    fn hindsight_value_jumps_across_the_bottleneck() {
        let spec = make_bottleneck_env(3, 3, 4).unwrap();
        let layout = crate::env::BottleneckLayout { pre_chain_len: 3, post_chain_len: 3, distractor_count: 4 };
        let p = PolicyParams::admissible_prior(&spec, 0.2).unwrap();
        let values = exact_policy_eval(&spec, &p, 0.95).unwrap();
        let vh = exact_hindsight_state_value(&values, |r| r.clamp(0.8, 1.2)).unwrap();
        assert!(vh.v(layout.pre_state(2)) < vh.v(layout.bottleneck()));
        assert!(vh.v(layout.bottleneck()) < vh.v(layout.post_state(0)));
    }

    #[test]
    fn capacity_limit() {
        let spec = make_chain_env(3).unwrap();
        let p = PolicyParams::zeros(PolicyLayout::for_env(&spec).unwrap());
        assert!(matches!(exact_policy_eval_with_limit(&spec, &p, 0.9, 10), Err(crate::Error::Capacity(_))));
        assert!(matches!(exact_policy_eval(&spec, &p, 0.0), Err(crate::Error::Config(_))));
    }
}
