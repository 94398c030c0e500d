//! The rewrite environment: e-graph construction as a sequential decision
//! problem.
//!
//! An action is a rule index; taking it applies that rule everywhere it
//! matches and rebuilds. Reward is sparse: zero until the episode ends,
//! then the extraction improvement over the initial term, clamped at zero.
//! Episodes end when the node budget is hit, the history reaches the
//! episode cap, or every action is known to do nothing at the current
//! graph. States replay deterministically from (config, action sequence);
//! that is the only state identity the planner ever ships across threads.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::egraph::{EClassId, EGraph};
use crate::extract::{extract_greedy, tree_cost, CostFunction, ExtractionResult};
use crate::lang::Term;
use crate::rewrite::RuleSet;
use crate::Error;

pub const DEFAULT_NODE_LIMIT: usize = 10_000;
pub const DEFAULT_MAX_EPISODE_LEN: usize = 500;

/// Why an episode ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NodeLimit,
    Saturated,
    EpisodeCap,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::NodeLimit => f.write_str("node_limit"),
            StopReason::Saturated => f.write_str("saturated"),
            StopReason::EpisodeCap => f.write_str("episode_cap"),
        }
    }
}

/// A replayable action history. Actions are rule indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionSequence(pub Vec<u32>);

impl ActionSequence {
    pub fn new() -> ActionSequence {
        ActionSequence(Vec::new())
    }

    pub fn push(&mut self, action: u32) {
        self.0.push(action);
    }

    pub fn child(&self, action: u32) -> ActionSequence {
        let mut s = self.clone();
        s.push(action);
        s
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn starts_with(&self, prefix: &ActionSequence) -> bool {
        self.0.starts_with(&prefix.0)
    }
}

impl fmt::Display for ActionSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, "]")
    }
}

/// Reward override hook: (initial cost, extracted cost) -> reward.
pub type RewardFn = dyn Fn(f64, f64) -> f64 + Send + Sync;

/// Everything that defines an episode. Cheap to share; workers hold an Arc.
#[derive(Clone)]
pub struct EnvConfig {
    pub initial_term: Term,
    pub rules: RuleSet,
    pub node_limit: usize,
    pub cost_fn: CostFunction,
    pub max_episode_len: usize,
    reward_fn: Option<Arc<RewardFn>>,
}

impl EnvConfig {
    pub fn new(initial_term: Term, rules: RuleSet) -> EnvConfig {
        EnvConfig {
            initial_term,
            rules,
            node_limit: DEFAULT_NODE_LIMIT,
            cost_fn: CostFunction::unit(),
            max_episode_len: DEFAULT_MAX_EPISODE_LEN,
            reward_fn: None,
        }
    }

    pub fn with_node_limit(mut self, limit: usize) -> EnvConfig {
        self.node_limit = limit;
        self
    }

    pub fn with_cost_fn(mut self, cf: CostFunction) -> EnvConfig {
        self.cost_fn = cf;
        self
    }

    pub fn with_max_episode_len(mut self, len: usize) -> EnvConfig {
        self.max_episode_len = len;
        self
    }

    /// Replace the sparse default reward. Shipped engines never set this.
    pub fn with_reward_fn(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> EnvConfig {
        self.reward_fn = Some(Arc::new(f));
        self
    }

    fn reward(&self, init_cost: f64, cost: f64) -> f64 {
        match &self.reward_fn {
            Some(f) => f(init_cost, cost),
            None => (init_cost - cost).max(0.0),
        }
    }
}

impl fmt::Debug for EnvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnvConfig")
            .field("initial_term", &self.initial_term.to_string())
            .field("rules", &self.rules.len())
            .field("node_limit", &self.node_limit)
            .field("max_episode_len", &self.max_episode_len)
            .field(
                "reward_fn",
                &if self.reward_fn.is_some() { "custom" } else { "sparse" },
            )
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub nodes_added: usize,
    /// No nodes added. A saturated application can still merge classes.
    pub saturated: bool,
    /// False only when the application neither added nodes nor merged
    /// classes; the planner prunes root actions on this, not on
    /// `saturated`, so union-only rewrites stay available.
    pub changed: bool,
    pub enode_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One line of an episode log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub action: u32,
    pub rule: String,
    pub nodes_added: usize,
    pub enode_count: usize,
    pub saturated: bool,
    pub reward: f64,
    pub done: bool,
}

/// Live episode state. Identity is (config, history); everything else is
/// derived and replays bit-identically.
#[derive(Clone)]
pub struct EnvState {
    config: Arc<EnvConfig>,
    egraph: EGraph,
    history: ActionSequence,
    root: EClassId,
    init_cost: f64,
    done: bool,
    stop_reason: Option<StopReason>,
    /// Actions observed to leave the current graph unchanged. Any change
    /// invalidates the whole set; when it covers every action the episode
    /// is saturated.
    inert: BTreeSet<u32>,
}

impl EnvState {
    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn config_arc(&self) -> Arc<EnvConfig> {
        Arc::clone(&self.config)
    }

    pub fn egraph(&self) -> &EGraph {
        &self.egraph
    }

    pub fn history(&self) -> &ActionSequence {
        &self.history
    }

    pub fn root(&self) -> EClassId {
        self.root
    }

    pub fn init_cost(&self) -> f64 {
        self.init_cost
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.stop_reason
    }

    pub fn enode_count(&self) -> usize {
        self.egraph.num_enodes()
    }

    pub fn num_actions(&self) -> u32 {
        self.config.rules.len() as u32
    }

    /// Actions not currently known to be inert, ascending. The rollout
    /// policy samples uniformly from these.
    pub fn viable_actions(&self) -> Vec<u32> {
        (0..self.num_actions())
            .filter(|a| !self.inert.contains(a))
            .collect()
    }

    pub fn inert_actions(&self) -> &BTreeSet<u32> {
        &self.inert
    }

    /// Greedy extraction at the current graph.
    pub fn extract(&self) -> ExtractionResult {
        extract_greedy(&self.egraph, self.root, &self.config.cost_fn)
            .expect("the initial term keeps the root class extractable")
    }
}

/// Start an episode. Errors when the node budget cannot even hold the
/// initial term; a budget exactly equal to it yields an episode that is
/// done before the first step.
pub fn reset(config: Arc<EnvConfig>) -> Result<EnvState, Error> {
    if config.rules.is_empty() {
        return Err(Error::Config("environment has no rules".into()));
    }
    let mut egraph = EGraph::new();
    let root = egraph.add_term(&config.initial_term);
    if config.node_limit < egraph.num_enodes() {
        return Err(Error::Config(format!(
            "node_limit {} is smaller than the initial graph ({} e-nodes)",
            config.node_limit,
            egraph.num_enodes()
        )));
    }
    let init_cost = tree_cost(&config.cost_fn, &config.initial_term);
    let done = egraph.num_enodes() >= config.node_limit || config.max_episode_len == 0;
    let stop_reason = if egraph.num_enodes() >= config.node_limit {
        Some(StopReason::NodeLimit)
    } else if config.max_episode_len == 0 {
        Some(StopReason::EpisodeCap)
    } else {
        None
    };
    Ok(EnvState {
        config,
        egraph,
        history: ActionSequence::new(),
        root,
        init_cost,
        done,
        stop_reason,
        inert: BTreeSet::new(),
    })
}

/// Apply one action. The rule is applied at every match and the graph
/// rebuilt before the terminal check runs, so the final action may
/// overshoot the node budget by its own additions.
pub fn step(state: &mut EnvState, action: u32) -> Result<StepResult, Error> {
    if state.done {
        return Err(Error::EpisodeDone);
    }
    let Some(rule) = state.config.rules.get(action) else {
        return Err(Error::InvalidAction {
            action,
            count: state.config.rules.len(),
        });
    };
    let rule = rule.clone();
    let report = state.egraph.apply_rule(&rule);
    state.history.push(action);

    if report.changed {
        state.inert.clear();
    } else {
        state.inert.insert(action);
    }

    let enode_count = state.egraph.num_enodes();
    if enode_count >= state.config.node_limit {
        state.done = true;
        state.stop_reason = Some(StopReason::NodeLimit);
    } else if state.history.len() >= state.config.max_episode_len {
        state.done = true;
        state.stop_reason = Some(StopReason::EpisodeCap);
    } else if state.inert.len() as u32 >= state.num_actions() {
        state.done = true;
        state.stop_reason = Some(StopReason::Saturated);
    }

    let reward = if state.done { terminal_reward(state) } else { 0.0 };
    Ok(StepResult {
        reward,
        done: state.done,
        info: StepInfo {
            nodes_added: report.nodes_added,
            saturated: report.saturated,
            changed: report.changed,
            enode_count,
        },
    })
}

/// Extraction improvement over the initial term, clamped at zero (or the
/// configured override). Callable on any state; the planner also uses it
/// to bootstrap truncated rollouts.
pub fn terminal_reward(state: &EnvState) -> f64 {
    let extraction = state.extract();
    state.config.reward(state.init_cost, extraction.cost)
}

/// Reset and apply a whole sequence. Errors if the sequence runs past the
/// episode's end. Equivalent to reset + steps, and compositional over
/// prefixes; this is the worker-side state constructor.
pub fn replay(config: Arc<EnvConfig>, seq: &ActionSequence) -> Result<EnvState, Error> {
    let mut state = reset(config)?;
    for &action in seq.as_slice() {
        step(&mut state, action)?;
    }
    Ok(state)
}
