//! Enumerable episodic environments with token-sequence actions and a single
//! sparse reward delivered at the end of each episode.
//!
//! Actions are sequences of vocabulary indices. Token [`END_TOKEN`] closes an
//! action; an action that reaches `max_action_len` tokens closes without it.
//! Dynamics are deterministic and keyed by the full token sequence. Any
//! sequence that has no entry in the transition table is inadmissible: the
//! agent stays where it is and the step is flagged invalid.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use crate::error::{bail, Result};
use crate::policy::{Context, PolicyParams};
use crate::rng;

/// Token that terminates an action.
pub const END_TOKEN: u32 = 0;

/// Longest action the policy parameterization supports.
pub const MAX_ACTION_LEN: usize = 4;

/// Index of a discrete environment state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateId(pub usize);

impl StateId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

/// A non-empty ordered sequence of vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenAction(Vec<u32>);

impl TokenAction {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            bail!(Domain, "an action needs at least one token");
        }
        Ok(Self(tokens))
    }

    /// A one-word action: `[word, END]`.
    pub fn word(word: u32) -> Self {
        Self(vec![word, END_TOKEN])
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whether a sampler bounded by `max_len` over `vocab` tokens can emit
    /// exactly this sequence.
    pub fn is_complete(&self, vocab: usize, max_len: usize) -> bool {
        let toks = &self.0;
        if toks.is_empty() || toks.len() > max_len {
            return false;
        }
        if toks.iter().any(|&t| t as usize >= vocab) {
            return false;
        }
        let (last, body) = toks.split_last().expect("non-empty");
        if body.contains(&END_TOKEN) {
            return false;
        }
        *last == END_TOKEN || toks.len() == max_len
    }
}

/// One environment step as recorded in a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: StateId,
    pub action: TokenAction,
    pub next_state: StateId,
    pub observation: Vec<u32>,
    pub invalid: bool,
}

/// A complete episode. Only `terminal_reward` carries reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub terminal_reward: f64,
    pub final_state: StateId,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn horizon(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_success(&self) -> bool {
        self.terminal_reward > 0.0
    }
}

/// `G` trajectories sampled for the same task instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub trajectories: Vec<Trajectory>,
}

impl GroupBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.terminal_reward).collect()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::horizon).sum()
    }
}

/// Result of a single [`EnvSpec::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: StateId,
    pub observation: Vec<u32>,
    pub done: bool,
    /// Terminal reward when `done`, otherwise 0.
    pub reward: f64,
    pub invalid: bool,
    /// Penalty owed for an inadmissible action. Rollouts fold it into the
    /// trajectory's terminal reward.
    pub penalty: f64,
}

/// A tabular episodic environment.
///
/// A state is terminal iff it has an entry in the reward rule; that entry is
/// the reward paid on arrival. Episodes that exhaust `max_steps` end with
/// reward 0 (plus any penalties).
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    state_count: usize,
    vocabulary_size: usize,
    max_action_len: usize,
    max_steps: usize,
    initial_state: StateId,
    transitions: BTreeMap<(StateId, TokenAction), StateId>,
    rewards: BTreeMap<StateId, f64>,
    bottleneck_state: Option<StateId>,
    invalid_penalty: f64,
}

impl EnvSpec {
    /// Starts an empty spec. Add dynamics with [`with_transition`] and
    /// [`with_terminal`], then call [`validate`].
    ///
    /// [`with_transition`]: Self::with_transition
    /// [`with_terminal`]: Self::with_terminal
    /// [`validate`]: Self::validate
    pub fn new(
        state_count: usize,
        vocabulary_size: usize,
        max_action_len: usize,
        max_steps: usize,
    ) -> Self {
        Self {
            state_count,
            vocabulary_size,
            max_action_len,
            max_steps,
            initial_state: StateId(0),
            transitions: BTreeMap::new(),
            rewards: BTreeMap::new(),
            bottleneck_state: None,
            invalid_penalty: 0.0,
        }
    }

    pub fn with_initial_state(mut self, state: StateId) -> Self {
        self.initial_state = state;
        self
    }

    pub fn with_transition(mut self, from: StateId, action: TokenAction, to: StateId) -> Self {
        self.transitions.insert((from, action), to);
        self
    }

    pub fn with_terminal(mut self, state: StateId, reward: f64) -> Self {
        self.rewards.insert(state, reward);
        self
    }

    pub fn with_bottleneck(mut self, state: StateId) -> Self {
        self.bottleneck_state = Some(state);
        self
    }

    /// Penalty added to the terminal reward for each inadmissible action.
    /// Typically negative (e.g. `-0.1`).
    pub fn with_invalid_penalty(mut self, penalty: f64) -> Self {
        self.invalid_penalty = penalty;
        self
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vocabulary_size
    }

    pub fn max_action_len(&self) -> usize {
        self.max_action_len
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn initial_state(&self) -> StateId {
        self.initial_state
    }

    pub fn bottleneck_state(&self) -> Option<StateId> {
        self.bottleneck_state
    }

    pub fn invalid_penalty(&self) -> f64 {
        self.invalid_penalty
    }

    pub fn transitions(&self) -> &BTreeMap<(StateId, TokenAction), StateId> {
        &self.transitions
    }

    pub fn rewards(&self) -> &BTreeMap<StateId, f64> {
        &self.rewards
    }

    pub fn is_terminal(&self, state: StateId) -> bool {
        self.rewards.contains_key(&state)
    }

    /// Reward for an episode that ends in `state` (0 for non-terminal states).
    pub fn final_reward(&self, state: StateId) -> f64 {
        self.rewards.get(&state).copied().unwrap_or(0.0)
    }

    /// Admissible actions at `state`, in table order.
    pub fn admissible_actions(&self, state: StateId) -> impl Iterator<Item = (&TokenAction, StateId)> {
        self.transitions
            .range((state, TokenAction(Vec::new()))..)
            .take_while(move |((s, _), _)| *s == state)
            .map(|((_, a), to)| (a, *to))
    }

    /// Successor under the table, `None` when the action is inadmissible.
    pub fn lookup(&self, state: StateId, action: &TokenAction) -> Option<StateId> {
        // BTreeMap<(K1, K2), V> cannot be queried by borrowed parts.
        self.transitions.get(&(state, action.clone())).copied()
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_count == 0 {
            bail!(Config, "state_count must be positive");
        }
        if self.vocabulary_size < 2 {
            bail!(Config, "vocabulary must hold at least two tokens");
        }
        if self.max_action_len == 0 || self.max_action_len > MAX_ACTION_LEN {
            bail!(Config, "max_action_len must be in 1..={MAX_ACTION_LEN}");
        }
        if self.max_steps == 0 {
            bail!(Config, "max_steps must be positive");
        }
        if self.transitions.is_empty() {
            bail!(Config, "transition table is empty");
        }
        if self.initial_state.0 >= self.state_count {
            bail!(Config, "initial state {} out of range", self.initial_state.0);
        }
        if self.is_terminal(self.initial_state) {
            bail!(Config, "initial state is terminal");
        }
        if !self.invalid_penalty.is_finite() {
            bail!(Config, "invalid-action penalty must be finite");
        }
        for ((from, action), to) in &self.transitions {
            if from.0 >= self.state_count || to.0 >= self.state_count {
                bail!(Config, "transition {} -> {} out of range", from.0, to.0);
            }
            if self.is_terminal(*from) {
                bail!(Config, "terminal state {} has outgoing transitions", from.0);
            }
            if !action.is_complete(self.vocabulary_size, self.max_action_len) {
                bail!(Config, "action {:?} at state {} can never be emitted", action.tokens(), from.0);
            }
        }
        let mut any_positive = false;
        for (state, &reward) in &self.rewards {
            if state.0 >= self.state_count {
                bail!(Config, "reward for out-of-range state {}", state.0);
            }
            if !reward.is_finite() {
                bail!(Config, "reward for state {} is not finite", state.0);
            }
            any_positive |= reward > 0.0;
        }
        if !any_positive {
            bail!(Config, "no terminal state pays a positive reward");
        }
        if let Some(b) = self.bottleneck_state {
            if b.0 >= self.state_count {
                bail!(Config, "bottleneck state {} out of range", b.0);
            }
        }
        Ok(())
    }

    /// Successor and validity flag, self-looping on inadmissible actions.
    pub fn next_state(&self, state: StateId, action: &TokenAction) -> (StateId, bool) {
        match self.lookup(state, action) {
            Some(next) => (next, false),
            None => (state, true),
        }
    }

    /// Applies `action` at `state`. The step budget is the caller's concern.
    pub fn step(&self, state: StateId, action: &TokenAction) -> Result<StepOutcome> {
        if state.0 >= self.state_count {
            bail!(Domain, "state {} out of range", state.0);
        }
        if self.is_terminal(state) {
            bail!(Domain, "cannot act in terminal state {}", state.0);
        }
        let (next, invalid) = self.next_state(state, action);
        let done = self.is_terminal(next);
        Ok(StepOutcome {
            next_state: next,
            observation: observe(next),
            done,
            reward: if done { self.final_reward(next) } else { 0.0 },
            invalid,
            penalty: if invalid { self.invalid_penalty } else { 0.0 },
        })
    }
}

fn observe(state: StateId) -> Vec<u32> {
    vec![state.0 as u32]
}

/// Initial state of an episode. Every shipped environment has a single
/// initial state, so the seed does not influence the result.
pub fn reset(spec: &EnvSpec, _seed: u64) -> Result<StateId> {
    spec.validate()?;
    Ok(spec.initial_state)
}

/// Samples one episode from `start`, where `start_step` (1-based) is the
/// index of the first action taken. Actions are drawn from the prior context.
pub fn rollout_from<R: RngCore>(
    spec: &EnvSpec,
    policy: &PolicyParams,
    start: StateId,
    start_step: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if start_step == 0 || start_step > spec.max_steps {
        bail!(Domain, "start step {start_step} outside 1..={}", spec.max_steps);
    }
    let mut state = start;
    let mut transitions = Vec::new();
    let mut penalty = 0.0;
    let mut reward = 0.0;
    for _ in start_step..=spec.max_steps {
        let action = policy.sample_action_in(state, Context::Prior, rng)?;
        let out = spec.step(state, &action)?;
        penalty += out.penalty;
        transitions.push(Transition {
            state,
            action,
            next_state: out.next_state,
            observation: out.observation,
            invalid: out.invalid,
        });
        state = out.next_state;
        if out.done {
            reward = out.reward;
            break;
        }
    }
    Ok(Trajectory { transitions, terminal_reward: reward + penalty, final_state: state })
}

/// Samples one full episode from the initial state.
pub fn rollout<R: RngCore>(spec: &EnvSpec, policy: &PolicyParams, rng: &mut R) -> Result<Trajectory> {
    rollout_from(spec, policy, spec.initial_state, 1, rng)
}

/// Samples `group_size` independent episodes on the same task instance.
/// Trajectory `i` draws from its own stream keyed by `(seed, i)`.
pub fn rollout_group(
    spec: &EnvSpec,
    policy: &PolicyParams,
    group_size: usize,
    seed: u64,
) -> Result<GroupBatch> {
    if group_size < 2 {
        bail!(Config, "group size must be at least 2, got {group_size}");
    }
    spec.validate()?;
    policy.check_compatible(spec)?;
    let trajectories = (0..group_size)
        .map(|i| rollout(spec, policy, &mut rng::stream(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupBatch { trajectories })
}

/// A chain `0 -> 1 -> ... -> length` paying `10` at the end.
///
/// Words: `1` advances, `2` stays, `3` steps back (never below 0). All
/// actions are `[word, END]`.
pub fn make_chain_env(length: usize) -> Result<EnvSpec> {
    if length == 0 {
        bail!(Config, "chain length must be at least 1");
    }
    let goal = StateId(length);
    let mut spec = EnvSpec::new(length + 1, 4, 2, 4 * length + 4).with_terminal(goal, 10.0);
    for s in 0..length {
        spec = spec
            .with_transition(StateId(s), TokenAction::word(1), StateId(s + 1))
            .with_transition(StateId(s), TokenAction::word(2), StateId(s))
            .with_transition(StateId(s), TokenAction::word(3), StateId(s.saturating_sub(1)));
    }
    spec.validate()?;
    Ok(spec)
}

/// Builtin layout of [`make_bottleneck_env`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckLayout {
    pub pre_chain_len: usize,
    pub post_chain_len: usize,
    pub distractor_count: usize,
}

impl BottleneckLayout {
    pub fn pre_state(&self, i: usize) -> StateId {
        StateId(i)
    }

    pub fn bottleneck(&self) -> StateId {
        StateId(self.pre_chain_len)
    }

    pub fn post_state(&self, i: usize) -> StateId {
        StateId(self.pre_chain_len + 1 + i)
    }

    pub fn goal(&self) -> StateId {
        StateId(self.pre_chain_len + self.post_chain_len + 1)
    }

    /// The progress word everywhere except at the bottleneck.
    pub fn progress_word(&self) -> u32 {
        1
    }

    /// The only word that crosses the bottleneck.
    pub fn breakthrough_word(&self) -> u32 {
        self.distractor_count as u32 + 1
    }

    pub fn breakthrough_action(&self) -> TokenAction {
        TokenAction::word(self.breakthrough_word())
    }
}

/// An environment with a single pivotal state `s*` between a low-value
/// region and a high-value region.
///
/// States: `pre_chain_len` pre-bottleneck states, then `s*`, then
/// `post_chain_len` post-bottleneck states, then the goal (reward 10). Each
/// non-terminal state admits `distractor_count + 1` one-word actions. One
/// of them moves forward; the distractors either stay put (odd index) or
/// step back within the region (even index). At `s*` only the breakthrough
/// word enters the post region and every distractor falls back to the start.
pub fn make_bottleneck_env(
    pre_chain_len: usize,
    post_chain_len: usize,
    distractor_count: usize,
) -> Result<EnvSpec> {
    if pre_chain_len == 0 || post_chain_len == 0 {
        bail!(Config, "bottleneck chains need at least one state on each side");
    }
    if distractor_count == 0 {
        bail!(Config, "bottleneck env needs at least one distractor");
    }
    let layout = BottleneckLayout { pre_chain_len, post_chain_len, distractor_count };
    let words = distractor_count as u32 + 1;
    let vocab = words as usize + 1;
    let states = pre_chain_len + post_chain_len + 2;
    let path = pre_chain_len + post_chain_len + 1;
    let mut spec = EnvSpec::new(states, vocab, 2, 4 * path)
        .with_terminal(layout.goal(), 10.0)
        .with_bottleneck(layout.bottleneck());

    // Words other than `forward`, numbered 1.. in order; odd ones stay,
    // even ones go to `back`.
    let add_state = |spec: EnvSpec, s: StateId, forward_word: u32, forward: StateId, back: StateId, cliff: bool| {
        let mut spec = spec.with_transition(s, TokenAction::word(forward_word), forward);
        let mut k = 0;
        for w in 1..=words {
            if w == forward_word {
                continue;
            }
            k += 1;
            let to = if k % 2 == 1 && !cliff { s } else { back };
            spec = spec.with_transition(s, TokenAction::word(w), to);
        }
        spec
    };

    for i in 0..pre_chain_len {
        let s = layout.pre_state(i);
        let fwd = if i + 1 < pre_chain_len { layout.pre_state(i + 1) } else { layout.bottleneck() };
        spec = add_state(spec, s, layout.progress_word(), fwd, layout.pre_state(i.saturating_sub(1)), false);
    }
    spec = add_state(
        spec,
        layout.bottleneck(),
        layout.breakthrough_word(),
        layout.post_state(0),
        layout.pre_state(0),
        true,
    );
    for i in 0..post_chain_len {
        let s = layout.post_state(i);
        let fwd = if i + 1 < post_chain_len { layout.post_state(i + 1) } else { layout.goal() };
        spec = add_state(spec, s, layout.progress_word(), fwd, layout.post_state(i.saturating_sub(1)), false);
    }
    spec.validate()?;
    Ok(spec)
}

/// A rigid causal chain of `stages` steps with two-word commands.
///
/// Actions are `[verb, object, END]` over verbs and objects `1..=3`. Each
/// stage has one correct command, which advances; a "cancel" command steps
/// back one stage and every other command is a no-op. The goal pays 10.
pub fn make_multistage_env(stages: usize) -> Result<EnvSpec> {
    if stages == 0 {
        bail!(Config, "multistage env needs at least one stage");
    }
    let goal = StateId(stages);
    let mut spec = EnvSpec::new(stages + 1, 4, 3, 5 * stages).with_terminal(goal, 10.0);
    for s in 0..stages {
        let correct = stage_command(s);
        let cancel = stage_command(s + 4);
        for verb in 1..=3u32 {
            for object in 1..=3u32 {
                let cmd = (verb, object);
                let to = if cmd == correct {
                    StateId(s + 1)
                } else if cmd == cancel {
                    StateId(s.saturating_sub(1))
                } else {
                    StateId(s)
                };
                let action = TokenAction(vec![verb, object, END_TOKEN]);
                spec = spec.with_transition(StateId(s), action, to);
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn stage_command(stage: usize) -> (u32, u32) {
    let k = (stage * 5 + 1) % 9;
    (k as u32 / 3 + 1, k as u32 % 3 + 1)
}
