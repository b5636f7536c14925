//! Tabular autoregressive softmax policy over token-sequence actions.
//!
//! Logits are indexed by `(state, context, prefix, token)`. The prefix is the
//! sequence of non-END tokens already emitted within the current action, so
//! `log π(y_j | y_<j, context)` is an exact table lookup. Context 0 is the
//! prior `π(a | s)`; context `1 + f` is the hindsight-conditioned
//! `π(a | s, s_final = f)`. Both live in the same weight vector in disjoint
//! rows.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::env::{EnvSpec, StateId, TokenAction, END_TOKEN, MAX_ACTION_LEN};
use crate::error::{bail, Result};
use crate::math;

/// Smallest probability written by [`PolicyParams::set_sequence_distribution`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Which conditioning a log-probability is evaluated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Context {
    Prior,
    Hindsight(StateId),
}

/// Shape of a [`PolicyParams`] weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyLayout {
    state_count: usize,
    vocab_size: usize,
    max_action_len: usize,
    prefix_count: usize,
}

impl PolicyLayout {
    pub fn new(state_count: usize, vocab_size: usize, max_action_len: usize) -> Result<Self> {
        if state_count == 0 {
            bail!(Config, "policy needs at least one state");
        }
        if vocab_size < 2 {
            bail!(Config, "policy vocabulary must hold at least two tokens");
        }
        if max_action_len == 0 || max_action_len > MAX_ACTION_LEN {
            bail!(Config, "max_action_len must be in 1..={MAX_ACTION_LEN}");
        }
        let base = vocab_size - 1;
        let prefix_count = (0..max_action_len).map(|l| base.pow(l as u32)).sum();
        Ok(Self { state_count, vocab_size, max_action_len, prefix_count })
    }

    pub fn for_env(spec: &EnvSpec) -> Result<Self> {
        Self::new(spec.state_count(), spec.vocabulary_size(), spec.max_action_len())
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_action_len(&self) -> usize {
        self.max_action_len
    }

    pub fn prefix_count(&self) -> usize {
        self.prefix_count
    }

    /// Prior plus one hindsight context per state.
    pub fn context_count(&self) -> usize {
        1 + self.state_count
    }

    pub fn weight_count(&self) -> usize {
        self.state_count * self.context_count() * self.prefix_count * self.vocab_size
    }

    fn context_index(&self, ctx: Context) -> Result<usize> {
        match ctx {
            Context::Prior => Ok(0),
            Context::Hindsight(f) if f.0 < self.state_count => Ok(1 + f.0),
            Context::Hindsight(f) => bail!(Domain, "hindsight state {} out of range", f.0),
        }
    }

    fn prefix_index(&self, prefix: &[u32]) -> usize {
        let base = self.vocab_size - 1;
        let offset: usize = (0..prefix.len()).map(|l| base.pow(l as u32)).sum();
        offset + prefix.iter().fold(0, |acc, &t| acc * base + (t as usize - 1))
    }

    /// Offset of the logit row for `(state, ctx, prefix)`.
    fn row_offset(&self, state: usize, ctx: usize, prefix: usize) -> usize {
        ((state * self.context_count() + ctx) * self.prefix_count + prefix) * self.vocab_size
    }

    /// Every action the sampler can emit, in depth-first token order.
    pub fn enumerate_actions(&self) -> Vec<TokenAction> {
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(self.max_action_len);
        self.enumerate_into(&mut prefix, &mut out);
        out
    }

    fn enumerate_into(&self, prefix: &mut Vec<u32>, out: &mut Vec<TokenAction>) {
        for y in 0..self.vocab_size as u32 {
            prefix.push(y);
            if y == END_TOKEN || prefix.len() == self.max_action_len {
                out.push(TokenAction::new(prefix.clone()).expect("non-empty"));
            } else {
                self.enumerate_into(prefix, out);
            }
            prefix.pop();
        }
    }

    fn check_state(&self, state: StateId) -> Result<()> {
        if state.0 >= self.state_count {
            bail!(Domain, "state {} out of range for policy with {} states", state.0, self.state_count);
        }
        Ok(())
    }

    fn check_action(&self, action: &TokenAction) -> Result<()> {
        let toks = action.tokens();
        if toks.is_empty() {
            bail!(Domain, "empty action");
        }
        if toks.len() > self.max_action_len {
            bail!(Domain, "action of {} tokens exceeds max_action_len {}", toks.len(), self.max_action_len);
        }
        if let Some(&t) = toks.iter().find(|&&t| t as usize >= self.vocab_size) {
            bail!(Domain, "token {t} outside vocabulary of {}", self.vocab_size);
        }
        if toks[..toks.len() - 1].contains(&END_TOKEN) {
            bail!(Domain, "END token before the last position in {toks:?}");
        }
        Ok(())
    }
}

/// All sampler-reachable actions with a reverse index.
#[derive(Debug, Clone)]
pub struct ActionSpace {
    actions: Vec<TokenAction>,
    index: BTreeMap<TokenAction, usize>,
}

impl ActionSpace {
    pub fn new(layout: &PolicyLayout) -> Self {
        let actions = layout.enumerate_actions();
        let index = actions.iter().cloned().enumerate().map(|(i, a)| (a, i)).collect();
        Self { actions, index }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn actions(&self) -> &[TokenAction] {
        &self.actions
    }

    pub fn index_of(&self, action: &TokenAction) -> Option<usize> {
        self.index.get(action).copied()
    }
}

/// Per-token log-probabilities of one action.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbBreakdown {
    pub per_token: Vec<f64>,
    pub total: f64,
    pub mean: f64,
}

/// Dense policy weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    layout: PolicyLayout,
    weights: Vec<f64>,
}

impl PolicyParams {
    /// All-zero weights: uniform over the vocabulary at every row.
    pub fn zeros(layout: PolicyLayout) -> Self {
        Self { weights: vec![0.0; layout.weight_count()], layout }
    }

    pub fn from_weights(layout: PolicyLayout, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != layout.weight_count() {
            bail!(Config, "expected {} weights, got {}", layout.weight_count(), weights.len());
        }
        if weights.iter().any(|w| !w.is_finite()) {
            bail!(Numerical, "policy weights must be finite");
        }
        Ok(Self { layout, weights })
    }

    /// Initial policy that spreads `1 - invalid_mass` uniformly over the
    /// admissible actions of each non-terminal state and `invalid_mass`
    /// uniformly over everything else. Hindsight rows start equal to the
    /// prior rows.
    pub fn admissible_prior(spec: &EnvSpec, invalid_mass: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&invalid_mass) {
            bail!(Config, "invalid_mass must be in [0, 1), got {invalid_mass}");
        }
        let layout = PolicyLayout::for_env(spec)?;
        let space = ActionSpace::new(&layout);
        let mut params = Self::zeros(layout);
        for s in 0..spec.state_count() {
            let state = StateId(s);
            let mut admissible = vec![false; space.len()];
            for (action, _) in spec.admissible_actions(state) {
                if let Some(i) = space.index_of(action) {
                    admissible[i] = true;
                }
            }
            let n = admissible.iter().filter(|&&a| a).count();
            if n == 0 {
                continue;
            }
            let rest = space.len() - n;
            let (p_in, p_out) = if rest == 0 {
                (1.0 / n as f64, 0.0)
            } else {
                ((1.0 - invalid_mass) / n as f64, invalid_mass / rest as f64)
            };
            let dist: Vec<f64> = admissible.iter().map(|&a| if a { p_in } else { p_out }).collect();
            params.set_sequence_distribution(state, Context::Prior, &dist)?;
            for f in 0..spec.state_count() {
                params.copy_context(state, Context::Prior, Context::Hindsight(StateId(f)))?;
            }
        }
        Ok(params)
    }

    pub fn layout(&self) -> &PolicyLayout {
        &self.layout
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn check_compatible(&self, spec: &EnvSpec) -> Result<()> {
        if self.layout != PolicyLayout::for_env(spec)? {
            bail!(Config, "policy layout does not match the environment");
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.layout != other.layout {
            bail!(Domain, "policy shapes differ");
        }
        Ok(())
    }

    fn row(&self, offset: usize) -> &[f64] {
        &self.weights[offset..offset + self.layout.vocab_size]
    }

    fn log_softmax_at(&self, offset: usize) -> Vec<f64> {
        let row = self.row(offset);
        let lse = math::log_sum_exp(row);
        row.iter().map(|&z| z - lse).collect()
    }

    fn softmax_at(&self, offset: usize) -> Vec<f64> {
        self.log_softmax_at(offset).into_iter().map(math::exp).collect()
    }

    /// Row offsets visited while emitting `action`, one per token.
    fn action_rows(&self, state: StateId, action: &TokenAction, ctx: Context) -> Result<Vec<usize>> {
        self.layout.check_state(state)?;
        self.layout.check_action(action)?;
        let c = self.layout.context_index(ctx)?;
        let toks = action.tokens();
        Ok((0..toks.len())
            .map(|j| self.layout.row_offset(state.0, c, self.layout.prefix_index(&toks[..j])))
            .collect())
    }

    /// `log π(y_j | y_<j, state, ctx)` for every token of `action`.
    pub fn log_prob(&self, state: StateId, action: &TokenAction, ctx: Context) -> Result<LogProbBreakdown> {
        let rows = self.action_rows(state, action, ctx)?;
        let per_token: Vec<f64> = rows
            .iter()
            .zip(action.tokens())
            .map(|(&off, &y)| {
                let row = self.row(off);
                row[y as usize] - math::log_sum_exp(row)
            })
            .collect();
        let total: f64 = per_token.iter().sum();
        let mean = total / per_token.len() as f64;
        Ok(LogProbBreakdown { per_token, total, mean })
    }

    /// Adds `scale * ∇ log π(action | state, ctx)` into `out`.
    pub fn accumulate_grad_log_prob(
        &self,
        state: StateId,
        action: &TokenAction,
        ctx: Context,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        if out.len() != self.weights.len() {
            bail!(Domain, "gradient buffer has the wrong length");
        }
        let rows = self.action_rows(state, action, ctx)?;
        for (&off, &y) in rows.iter().zip(action.tokens()) {
            let probs = self.softmax_at(off);
            for (k, p) in probs.iter().enumerate() {
                let indicator = if k == y as usize { 1.0 } else { 0.0 };
                out[off + k] += scale * (indicator - p);
            }
        }
        Ok(())
    }

    /// Gradient of the total log-probability with respect to every weight.
    pub fn grad_log_prob(&self, state: StateId, action: &TokenAction, ctx: Context) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.weights.len()];
        self.accumulate_grad_log_prob(state, action, ctx, 1.0, &mut out)?;
        Ok(out)
    }

    /// Draws an action from the prior context.
    pub fn sample_action<R: RngCore>(&self, state: StateId, rng: &mut R) -> Result<TokenAction> {
        self.sample_action_in(state, Context::Prior, rng)
    }

    /// Draws tokens until END or `max_action_len`.
    pub fn sample_action_in<R: RngCore>(&self, state: StateId, ctx: Context, rng: &mut R) -> Result<TokenAction> {
        self.layout.check_state(state)?;
        let c = self.layout.context_index(ctx)?;
        let mut tokens = Vec::with_capacity(self.layout.max_action_len);
        loop {
            let off = self.layout.row_offset(state.0, c, self.layout.prefix_index(&tokens));
            let probs = self.softmax_at(off);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            tokens.push(pick as u32);
            if pick as u32 == END_TOKEN || tokens.len() == self.layout.max_action_len {
                break;
            }
        }
        TokenAction::new(tokens)
    }

    /// Probability of every enumerated action, aligned with
    /// [`PolicyLayout::enumerate_actions`].
    pub fn sequence_probs(&self, state: StateId, ctx: Context) -> Result<Vec<f64>> {
        self.layout.check_state(state)?;
        let c = self.layout.context_index(ctx)?;
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(self.layout.max_action_len);
        self.sequence_probs_into(state.0, c, &mut prefix, 0.0, &mut out);
        Ok(out)
    }

    fn sequence_probs_into(&self, s: usize, c: usize, prefix: &mut Vec<u32>, logp: f64, out: &mut Vec<f64>) {
        let off = self.layout.row_offset(s, c, self.layout.prefix_index(prefix));
        let lsm = self.log_softmax_at(off);
        for (y, &lp) in lsm.iter().enumerate() {
            prefix.push(y as u32);
            if y as u32 == END_TOKEN || prefix.len() == self.layout.max_action_len {
                out.push(math::exp(logp + lp));
            } else {
                self.sequence_probs_into(s, c, prefix, logp + lp, out);
            }
            prefix.pop();
        }
    }

    /// Overwrites the `(state, ctx)` rows so the policy emits each enumerated
    /// action with the given probability. Probabilities below
    /// [`PROB_FLOOR`] are floored; rows under a prefix with zero mass are
    /// left untouched.
    pub fn set_sequence_distribution(&mut self, state: StateId, ctx: Context, probs: &[f64]) -> Result<()> {
        self.layout.check_state(state)?;
        let c = self.layout.context_index(ctx)?;
        let actions = self.layout.enumerate_actions();
        if probs.len() != actions.len() {
            bail!(Domain, "expected {} action probabilities, got {}", actions.len(), probs.len());
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            bail!(Domain, "action probabilities must be finite and non-negative");
        }
        // Mass of every (prefix, next token) pair.
        let mut mass: BTreeMap<Vec<u32>, Vec<f64>> = BTreeMap::new();
        let v = self.layout.vocab_size;
        for (action, &p) in actions.iter().zip(probs) {
            let toks = action.tokens();
            for j in 0..toks.len() {
                mass.entry(toks[..j].to_vec()).or_insert_with(|| vec![0.0; v])[toks[j] as usize] += p;
            }
        }
        for (prefix, next) in mass {
            let total: f64 = next.iter().sum();
            if total <= 0.0 {
                continue;
            }
            let off = self.layout.row_offset(state.0, c, self.layout.prefix_index(&prefix));
            for (k, m) in next.iter().enumerate() {
                self.weights[off + k] = math::ln((m / total).max(PROB_FLOOR));
            }
        }
        Ok(())
    }

    /// Copies every prefix row of `(state, from)` into `(state, to)`.
    pub fn copy_context(&mut self, state: StateId, from: Context, to: Context) -> Result<()> {
        self.layout.check_state(state)?;
        let src = self.layout.row_offset(state.0, self.layout.context_index(from)?, 0);
        let dst = self.layout.row_offset(state.0, self.layout.context_index(to)?, 0);
        let len = self.layout.prefix_count * self.layout.vocab_size;
        self.weights.copy_within(src..src + len, dst);
        Ok(())
    }

    /// `KL(π_self(· | state) || π_reference(· | state))` over whole actions
    /// in the prior context, computed exactly.
    pub fn kl_divergence(&self, reference: &Self, state: StateId) -> Result<f64> {
        self.check_same_shape(reference)?;
        self.layout.check_state(state)?;
        let mut prefix = Vec::new();
        Ok(self.kl_subtree(reference, state.0, &mut prefix, 1.0, None))
    }

    /// Adds `scale * ∇ KL(π_self || π_reference)` at `state` into `out`.
    pub fn accumulate_grad_kl(&self, reference: &Self, state: StateId, scale: f64, out: &mut [f64]) -> Result<()> {
        self.check_same_shape(reference)?;
        self.layout.check_state(state)?;
        if out.len() != self.weights.len() {
            bail!(Domain, "gradient buffer has the wrong length");
        }
        let mut prefix = Vec::new();
        self.kl_subtree(reference, state.0, &mut prefix, scale, Some(out));
        Ok(())
    }

    /// KL of the action subtree below `prefix`. When `grad` is given, adds
    /// `weight * ∂D(prefix)/∂θ`, where `weight` already includes the
    /// probability of reaching `prefix`.
    fn kl_subtree(
        &self,
        reference: &Self,
        s: usize,
        prefix: &mut Vec<u32>,
        weight: f64,
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        let off = self.layout.row_offset(s, 0, self.layout.prefix_index(prefix));
        let lp = self.log_softmax_at(off);
        let lq = reference.log_softmax_at(off);
        let v = self.layout.vocab_size;
        // g_y = ln(p_y / q_y) + D(prefix · y) for continuing tokens.
        let mut g = vec![0.0; v];
        for y in 0..v {
            g[y] = lp[y] - lq[y];
            let continues = y as u32 != END_TOKEN && prefix.len() + 1 < self.layout.max_action_len;
            if continues {
                prefix.push(y as u32);
                let w = weight * math::exp(lp[y]);
                g[y] += self.kl_subtree(reference, s, prefix, w, grad.as_deref_mut());
                prefix.pop();
            }
        }
        let d: f64 = (0..v).map(|y| math::exp(lp[y]) * g[y]).sum();
        if let Some(out) = grad {
            for y in 0..v {
                out[off + y] += weight * math::exp(lp[y]) * (g[y] - d);
            }
        }
        d
    }
}
