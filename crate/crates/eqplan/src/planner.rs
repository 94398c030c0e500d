//! Planning rule applications with parallel Monte Carlo tree search.
//!
//! One maintainer thread owns the search tree and runs selection and
//! backup. Stateless worker pools execute the two slow phases: expansion
//! (apply one rule on a replayed state and report what happened) and
//! simulation (random rollout from a replayed state). Tasks carry only
//! action sequences; every worker rebuilds state by deterministic replay,
//! so nothing shares an e-graph. Selection scores children by
//! Q + c·sqrt(ln(Np + Op) / (Nc + Oc)) where O counts dispatched but
//! unfinished visits, which keeps the tree exploring while results are in
//! flight. Results are consumed in dispatch order, making a run with a
//! fixed seed bit-reproducible regardless of worker timing; with one
//! worker per pool the whole machine degenerates to textbook serial UCT.
//!
//! An episode is planned stage by stage: search, commit the best root
//! action to the real environment, discard the tree, repeat. Root actions
//! whose application leaves the graph completely unchanged are pruned for
//! the stage.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::env::{self, ActionSequence, EnvConfig, EnvState, StepRecord, StopReason};
use crate::extract::ExtractionResult;
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Completed search iterations per planning stage; also an upper bound
    /// on the stage's tree size.
    pub budget: usize,
    pub sim_workers: usize,
    pub exp_workers: usize,
    pub gamma: f64,
    pub c_explore: f64,
    /// Rollout step cap; truncated rollouts bootstrap with the greedy
    /// extraction reward at the cut, discounted the same as a real
    /// terminal would be.
    pub max_sim_step: usize,
    pub straggler_timeout_ms: u64,
    pub seed: u64,
    /// Fault injection: artificial delay at the start of every simulation
    /// task. Zero in any real run; tests use it to force stragglers.
    pub sim_latency_ms: u64,
}

impl Default for PlannerConfig {
    fn default() -> PlannerConfig {
        PlannerConfig {
            budget: 512,
            sim_workers: 22,
            exp_workers: 1,
            gamma: 0.99,
            c_explore: std::f64::consts::SQRT_2,
            max_sim_step: 20,
            straggler_timeout_ms: 5000,
            seed: 0,
            sim_latency_ms: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.budget < 1 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.sim_workers < 1 || self.exp_workers < 1 {
            return Err(Error::Config("worker counts must be at least 1".into()));
        }
        if self.max_sim_step < 1 {
            return Err(Error::Config("max_sim_step must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !self.c_explore.is_finite() || self.c_explore < 0.0 {
            return Err(Error::Config(format!(
                "c_explore {} must be finite and non-negative",
                self.c_explore
            )));
        }
        Ok(())
    }

    pub fn from_json_str(src: &str) -> Result<PlannerConfig, Error> {
        let cfg: PlannerConfig = serde_json::from_str(src)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<PlannerConfig, Error> {
        PlannerConfig::from_json_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Expand,
    Simulate,
}

/// What the maintainer ships to a worker: the action sequence is the
/// entire state description.
#[derive(Clone, Debug)]
pub struct TaskDescriptor {
    pub kind: TaskKind,
    pub sequence: ActionSequence,
    pub is_root_child: bool,
    pub task_id: u64,
}

/// Simulation outcome.
#[derive(Clone, Copy, Debug)]
pub struct TaskResult {
    pub task_id: u64,
    pub discounted_return: f64,
    pub steps_taken: usize,
    pub saturated: bool,
    pub terminal_reached: bool,
}

/// Expansion outcome: what applying the new action did to the graph.
#[derive(Clone, Copy, Debug)]
pub struct ExpandResult {
    pub task_id: u64,
    pub nodes_added: usize,
    pub saturated: bool,
    /// False when the application neither added nodes nor merged classes;
    /// the root-pruning trigger.
    pub changed: bool,
    pub done: bool,
    pub reward: f64,
    pub enode_count: usize,
}

struct TaskEnvelope {
    desc: TaskDescriptor,
    /// Length of the episode prefix shared by every task in the stage;
    /// workers cache the replayed prefix state under this key.
    prefix_len: usize,
    seed: u64,
    cancel: Arc<AtomicBool>,
}

enum WorkerReply {
    Expand(ExpandResult),
    Sim(TaskResult),
    Cancelled { task_id: u64 },
    Fault { task_id: u64, message: String },
}

/// Random rollout from `state`: uniform over actions not yet known to be
/// no-ops, at most `max_sim_step` steps or until the episode ends. The
/// return is γ^steps times the terminal reward, with the greedy
/// extraction reward standing in for it at a truncation. None when the
/// cancel flag was raised mid-rollout.
fn rollout(
    state: &mut EnvState,
    seed: u64,
    max_sim_step: usize,
    gamma: f64,
    cancel: &AtomicBool,
) -> Option<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = 0usize;
    loop {
        if state.done() {
            return Some((gamma.powi(steps as i32) * env::terminal_reward(state), steps));
        }
        if steps >= max_sim_step {
            return Some((gamma.powi(steps as i32) * env::terminal_reward(state), steps));
        }
        if cancel.load(Ordering::Relaxed) {
            return None;
        }
        let viable = state.viable_actions();
        let action = viable[rng.gen_range(0..viable.len())];
        let r = match env::step(state, action) {
            Ok(r) => r,
            Err(_) => return None,
        };
        steps += 1;
        if r.done {
            return Some((gamma.powi(steps as i32) * r.reward, steps));
        }
    }
}

fn worker_loop(
    env_cfg: Arc<EnvConfig>,
    tasks: Receiver<TaskEnvelope>,
    replies: Sender<WorkerReply>,
    max_sim_step: usize,
    gamma: f64,
    sim_latency_ms: u64,
) {
    let mut cache: Option<(Vec<u32>, EnvState)> = None;
    while let Ok(task) = tasks.recv() {
        let reply = run_task(&env_cfg, &task, &mut cache, max_sim_step, gamma, sim_latency_ms);
        if replies.send(reply).is_err() {
            break;
        }
    }
}

fn run_task(
    env_cfg: &Arc<EnvConfig>,
    task: &TaskEnvelope,
    cache: &mut Option<(Vec<u32>, EnvState)>,
    max_sim_step: usize,
    gamma: f64,
    sim_latency_ms: u64,
) -> WorkerReply {
    let task_id = task.desc.task_id;
    let fault = |message: String| WorkerReply::Fault { task_id, message };
    if task.cancel.load(Ordering::Relaxed) {
        return WorkerReply::Cancelled { task_id };
    }

    let seq = task.desc.sequence.as_slice();
    let prefix = &seq[..task.prefix_len];
    let mut state = match cache {
        Some((cached, s)) if cached == prefix => s.clone(),
        _ => {
            let prefix_seq = ActionSequence(prefix.to_vec());
            match env::replay(Arc::clone(env_cfg), &prefix_seq) {
                Ok(s) => {
                    *cache = Some((prefix.to_vec(), s.clone()));
                    s
                }
                Err(e) => return fault(format!("prefix replay failed: {e}")),
            }
        }
    };

    let mut last = None;
    for &action in &seq[task.prefix_len..] {
        if task.cancel.load(Ordering::Relaxed) {
            return WorkerReply::Cancelled { task_id };
        }
        match env::step(&mut state, action) {
            Ok(r) => last = Some(r),
            Err(e) => return fault(format!("step {action} failed: {e}")),
        }
    }

    match task.desc.kind {
        TaskKind::Expand => {
            let Some(r) = last else {
                return fault("expand task carried no action beyond the prefix".into());
            };
            WorkerReply::Expand(ExpandResult {
                task_id,
                nodes_added: r.info.nodes_added,
                saturated: r.info.saturated,
                changed: r.info.changed,
                done: r.done,
                reward: r.reward,
                enode_count: r.info.enode_count,
            })
        }
        TaskKind::Simulate => {
            if sim_latency_ms > 0 {
                let deadline = Instant::now() + Duration::from_millis(sim_latency_ms);
                while Instant::now() < deadline {
                    if task.cancel.load(Ordering::Relaxed) {
                        return WorkerReply::Cancelled { task_id };
                    }
                    thread::sleep(Duration::from_millis(2));
                }
            }
            match rollout(&mut state, task.seed, max_sim_step, gamma, &task.cancel) {
                Some((discounted_return, steps_taken)) => WorkerReply::Sim(TaskResult {
                    task_id,
                    discounted_return,
                    steps_taken,
                    saturated: state.stop_reason() == Some(StopReason::Saturated),
                    terminal_reached: state.done(),
                }),
                None => WorkerReply::Cancelled { task_id },
            }
        }
    }
}

struct Pools {
    exp_tx: Option<Sender<TaskEnvelope>>,
    exp_rx: Receiver<WorkerReply>,
    sim_tx: Option<Sender<TaskEnvelope>>,
    sim_rx: Receiver<WorkerReply>,
    handles: Vec<thread::JoinHandle<()>>,
}

impl Pools {
    fn spawn(env_cfg: &Arc<EnvConfig>, cfg: &PlannerConfig) -> Pools {
        let (exp_tx, exp_task_rx) = unbounded::<TaskEnvelope>();
        let (exp_reply_tx, exp_rx) = unbounded::<WorkerReply>();
        let (sim_tx, sim_task_rx) = unbounded::<TaskEnvelope>();
        let (sim_reply_tx, sim_rx) = unbounded::<WorkerReply>();
        let mut handles = Vec::new();
        for (count, label, task_rx, reply_tx) in [
            (cfg.exp_workers, "exp", exp_task_rx, exp_reply_tx),
            (cfg.sim_workers, "sim", sim_task_rx, sim_reply_tx),
        ] {
            for i in 0..count {
                let env_cfg = Arc::clone(env_cfg);
                let task_rx = task_rx.clone();
                let reply_tx = reply_tx.clone();
                let (max_sim_step, gamma, latency) =
                    (cfg.max_sim_step, cfg.gamma, cfg.sim_latency_ms);
                let handle = thread::Builder::new()
                    .name(format!("{label}-{i}"))
                    .spawn(move || {
                        worker_loop(env_cfg, task_rx, reply_tx, max_sim_step, gamma, latency)
                    })
                    .expect("worker thread spawn");
                handles.push(handle);
            }
        }
        Pools {
            exp_tx: Some(exp_tx),
            exp_rx,
            sim_tx: Some(sim_tx),
            sim_rx,
            handles,
        }
    }

    fn send_exp(&self, envelope: TaskEnvelope) -> Result<(), Error> {
        self.exp_tx
            .as_ref()
            .expect("pool is live")
            .send(envelope)
            .map_err(|_| Error::Worker("expansion pool disconnected".into()))
    }

    fn send_sim(&self, envelope: TaskEnvelope) -> Result<(), Error> {
        self.sim_tx
            .as_ref()
            .expect("pool is live")
            .send(envelope)
            .map_err(|_| Error::Worker("simulation pool disconnected".into()))
    }
}

impl Drop for Pools {
    fn drop(&mut self) {
        // closing the task channels lets every worker's recv fail and exit
        self.exp_tx.take();
        self.sim_tx.take();
        for handle in self.handles.drain(..) {
            handle.join().ok();
        }
    }
}

/// Search tree node. Pure data plus WU-UCT statistics; all tree logic
/// lives on Tree so it can be tested without any worker machinery.
struct Node {
    seq: ActionSequence,
    depth: usize,
    n: u64,
    o: u64,
    w: f64,
    children: BTreeMap<u32, usize>,
    untried: BTreeSet<u32>,
    pruned: BTreeSet<u32>,
    terminal: bool,
    terminal_value: f64,
}

struct Tree {
    nodes: Vec<Node>,
    gamma: f64,
    c_explore: f64,
    num_actions: u32,
}

const ROOT: usize = 0;

impl Tree {
    fn new(prefix: &ActionSequence, gamma: f64, c_explore: f64, num_actions: u32) -> Tree {
        let root = Node {
            seq: prefix.clone(),
            depth: 0,
            n: 0,
            o: 0,
            w: 0.0,
            children: BTreeMap::new(),
            untried: (0..num_actions).collect(),
            pruned: BTreeSet::new(),
            terminal: false,
            terminal_value: 0.0,
        };
        Tree {
            nodes: vec![root],
            gamma,
            c_explore,
            num_actions,
        }
    }

    /// Descend by the in-flight-aware UCT score until reaching a node with
    /// untried actions or a terminal node. Children never simulated
    /// inherit the running ancestor value estimate; ties break toward the
    /// smallest action.
    fn select(&self) -> Vec<usize> {
        let mut path = vec![ROOT];
        let mut cur = ROOT;
        let mut q_here = 0.0;
        loop {
            let node = &self.nodes[cur];
            if node.n > 0 {
                q_here = node.w / node.n as f64;
            }
            if node.terminal || !node.untried.is_empty() {
                return path;
            }
            debug_assert!(!node.children.is_empty(), "selection hit a bare node");
            let parent_visits = ((node.n + node.o) as f64).max(1.0);
            let mut best: Option<(f64, usize)> = None;
            for (_, &child_id) in &node.children {
                let child = &self.nodes[child_id];
                let visits = (child.n + child.o) as f64;
                let score = if visits == 0.0 {
                    f64::INFINITY
                } else {
                    let q = if child.n > 0 { child.w / child.n as f64 } else { q_here };
                    q + self.c_explore * (parent_visits.ln() / visits).sqrt()
                };
                if best.map_or(true, |(bs, _)| score > bs) {
                    best = Some((score, child_id));
                }
            }
            cur = best.expect("non-empty children").1;
            path.push(cur);
        }
    }

    fn add_child(&mut self, parent: usize, action: u32, terminal: bool, terminal_value: f64) -> usize {
        let id = self.nodes.len();
        let seq = self.nodes[parent].seq.child(action);
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(Node {
            seq,
            depth,
            n: 0,
            o: 0,
            w: 0.0,
            children: BTreeMap::new(),
            untried: if terminal { BTreeSet::new() } else { (0..self.num_actions).collect() },
            pruned: BTreeSet::new(),
            terminal,
            terminal_value,
        });
        self.nodes[parent].children.insert(action, id);
        id
    }

    /// Credit a completed visit: every node on the chain gains one visit
    /// and the leaf value discounted by its distance above the leaf.
    fn backup(&mut self, chain: &[usize], leaf_value: f64) {
        let leaf_depth = chain.len() - 1;
        for (i, &id) in chain.iter().enumerate() {
            let node = &mut self.nodes[id];
            node.n += 1;
            node.w += self.gamma.powi((leaf_depth - i) as i32) * leaf_value;
        }
    }

    fn add_o(&mut self, chain: &[usize]) {
        for &id in chain {
            self.nodes[id].o += 1;
        }
    }

    fn remove_o(&mut self, chain: &[usize]) {
        for &id in chain {
            debug_assert!(self.nodes[id].o > 0, "unbalanced in-flight count");
            self.nodes[id].o -= 1;
        }
    }

    fn total_o(&self) -> u64 {
        self.nodes.iter().map(|n| n.o).sum()
    }

    fn root_stats(&self) -> Vec<RootStat> {
        self.nodes[ROOT]
            .children
            .iter()
            .map(|(&action, &id)| {
                let child = &self.nodes[id];
                RootStat {
                    action,
                    n: child.n,
                    q: if child.n > 0 { child.w / child.n as f64 } else { 0.0 },
                }
            })
            .collect()
    }

    /// Highest mean return among visited root children, ties to the
    /// smallest action; an unvisited child only wins when nothing was
    /// visited at all (possible only after cancellations).
    fn best_root_action(&self) -> Result<u32, Error> {
        let root = &self.nodes[ROOT];
        let mut best: Option<(f64, u32)> = None;
        for (&action, &id) in &root.children {
            let child = &self.nodes[id];
            if child.n == 0 {
                continue;
            }
            let q = child.w / child.n as f64;
            if best.map_or(true, |(bq, _)| q > bq) {
                best = Some((q, action));
            }
        }
        if let Some((_, action)) = best {
            return Ok(action);
        }
        if let Some((&action, _)) = root.children.iter().next() {
            return Ok(action);
        }
        Err(Error::Saturated)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootStat {
    pub action: u32,
    pub n: u64,
    pub q: f64,
}

/// Bookkeeping counters for one planning stage, exposed so tests can
/// assert conservation: every dispatched iteration is completed, pruned,
/// or cancelled, and no in-flight count survives the drain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub dispatched: u64,
    pub completed: u64,
    pub pruned: u64,
    pub cancelled: u64,
    pub root_n: u64,
    pub sum_root_child_n: u64,
    pub residual_o: u64,
}

/// Everything a planning stage decides and measured while doing it.
#[derive(Clone, Debug)]
pub struct StagePlan {
    pub action: u32,
    pub root_stats: Vec<RootStat>,
    pub pruned: Vec<u32>,
    pub accounting: Accounting,
    pub tree_size: usize,
}

/// One line of the stage trace log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    pub chosen_action: u32,
    pub root_stats: Vec<RootStat>,
    pub pruned: Vec<u32>,
    pub stage_wall_time_s: f64,
}

struct PendingExpand {
    path: Vec<usize>,
    action: u32,
    parent: usize,
    is_root_child: bool,
    seed: u64,
}

struct PendingSim {
    chain: Vec<usize>,
}

struct Stage<'a> {
    tree: Tree,
    pools: &'a Pools,
    cfg: &'a PlannerConfig,
    prefix_len: usize,
    stage_seed: u64,
    next_task_id: &'a mut u64,
    exp_order: VecDeque<u64>,
    sim_order: VecDeque<u64>,
    exp_ctx: BTreeMap<u64, PendingExpand>,
    sim_ctx: BTreeMap<u64, PendingSim>,
    exp_ready: BTreeMap<u64, ExpandResult>,
    sim_ready: BTreeMap<u64, TaskResult>,
    ignored: BTreeSet<u64>,
    cancel_flags: BTreeMap<u64, Arc<AtomicBool>>,
    expand_counter: u64,
    dispatched: u64,
    completed: u64,
    pruned_count: u64,
    cancelled_count: u64,
    cancel_refunds: u64,
}

impl<'a> Stage<'a> {
    fn run(mut self) -> Result<StagePlan, Error> {
        let budget = self.cfg.budget as u64;
        loop {
            self.pump(budget)?;
            self.drain()?;
            if self.dispatched >= budget {
                break;
            }
            let root = &self.tree.nodes[ROOT];
            if root.untried.is_empty() && root.children.is_empty() {
                return Err(Error::Saturated);
            }
            // budget was refunded by prunes or cancellations; keep searching
        }
        let residual_o = self.tree.total_o();
        let accounting = Accounting {
            dispatched: self.dispatched,
            completed: self.completed,
            pruned: self.pruned_count,
            cancelled: self.cancelled_count,
            root_n: self.tree.nodes[ROOT].n,
            sum_root_child_n: self
                .tree.nodes[ROOT]
                .children
                .values()
                .map(|&id| self.tree.nodes[id].n)
                .sum(),
            residual_o,
        };
        assert_eq!(residual_o, 0, "in-flight counts must drain to zero");
        let unrefunded = self.cancelled_count - self.cancel_refunds;
        assert_eq!(
            accounting.completed + unrefunded,
            accounting.dispatched,
            "every charged iteration completes unless its cancellation outran the refund valve"
        );
        assert_eq!(accounting.root_n, accounting.completed, "root sees every completion");
        assert_eq!(
            accounting.sum_root_child_n, accounting.completed,
            "every completion passes through exactly one root child"
        );
        let action = self.tree.best_root_action()?;
        Ok(StagePlan {
            action,
            root_stats: self.tree.root_stats(),
            pruned: self.tree.nodes[ROOT].pruned.iter().copied().collect(),
            accounting,
            tree_size: self.tree.nodes.len(),
        })
    }

    /// Dispatch iterations until the budget is charged, blocking on the
    /// oldest outstanding result whenever a pool is saturated. Consuming
    /// strictly in dispatch order is what makes the stage deterministic.
    fn pump(&mut self, budget: u64) -> Result<(), Error> {
        while self.dispatched < budget {
            while self.exp_order.len() >= self.cfg.exp_workers {
                self.consume_exp()?;
            }
            while self.sim_order.len() >= self.cfg.sim_workers {
                self.consume_sim()?;
            }
            let root = &self.tree.nodes[ROOT];
            if root.untried.is_empty() && root.children.is_empty() {
                // every tried root action pruned so far; results still in
                // flight may create the first child
                if !self.exp_order.is_empty() {
                    self.consume_exp()?;
                    continue;
                }
                if !self.sim_order.is_empty() {
                    self.consume_sim()?;
                    continue;
                }
                return Ok(()); // run() decides between retry and Saturated
            }
            let path = self.tree.select();
            let leaf = *path.last().expect("path holds the root at least");
            if self.tree.nodes[leaf].terminal {
                let value = self.tree.nodes[leaf].terminal_value;
                self.tree.backup(&path, value);
                self.dispatched += 1;
                self.completed += 1;
                continue;
            }
            let action = *self.tree.nodes[leaf].untried.iter().next().expect("leaf has untried");
            self.tree.nodes[leaf].untried.remove(&action);
            self.tree.add_o(&path);
            let seed = derive_seed(self.stage_seed, self.expand_counter);
            self.expand_counter += 1;
            let task_id = self.fresh_task_id();
            let cancel = Arc::new(AtomicBool::new(false));
            self.cancel_flags.insert(task_id, Arc::clone(&cancel));
            let is_root_child = leaf == ROOT;
            self.exp_ctx.insert(
                task_id,
                PendingExpand { path: path.clone(), action, parent: leaf, is_root_child, seed },
            );
            self.exp_order.push_back(task_id);
            self.pools.send_exp(TaskEnvelope {
                desc: TaskDescriptor {
                    kind: TaskKind::Expand,
                    sequence: self.tree.nodes[leaf].seq.child(action),
                    is_root_child,
                    task_id,
                },
                prefix_len: self.prefix_len,
                seed,
                cancel,
            })?;
            self.dispatched += 1;
        }
        Ok(())
    }

    fn drain(&mut self) -> Result<(), Error> {
        while !self.exp_order.is_empty() {
            self.consume_exp()?;
        }
        while !self.sim_order.is_empty() {
            self.consume_sim()?;
        }
        Ok(())
    }

    fn fresh_task_id(&mut self) -> u64 {
        let id = *self.next_task_id;
        *self.next_task_id += 1;
        id
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.cfg.straggler_timeout_ms)
    }

    /// A cancelled iteration hands its budget slot back so the search can
    /// respawn the work, up to one full budget of refunds as a safety
    /// valve against a pool that never answers.
    fn refund(&mut self) {
        self.cancelled_count += 1;
        if self.cancel_refunds < self.cfg.budget as u64 {
            self.cancel_refunds += 1;
            self.dispatched -= 1;
        }
        // past the valve the slot stays charged but uncompleted, which
        // guarantees the stage still terminates when a pool goes dark
    }

    fn consume_exp(&mut self) -> Result<(), Error> {
        let head = *self.exp_order.front().expect("caller checked non-empty");
        let result = loop {
            if let Some(r) = self.exp_ready.remove(&head) {
                break r;
            }
            match self.pools.exp_rx.recv_timeout(self.timeout()) {
                Ok(WorkerReply::Expand(r)) => {
                    if self.ignored.remove(&r.task_id) {
                        continue;
                    }
                    self.exp_ready.insert(r.task_id, r);
                }
                Ok(WorkerReply::Cancelled { task_id }) => {
                    self.ignored.remove(&task_id);
                }
                Ok(WorkerReply::Sim(_)) => {
                    unreachable!("simulation replies never arrive on the expansion channel")
                }
                Ok(WorkerReply::Fault { task_id, message }) => {
                    if self.ignored.remove(&task_id) {
                        continue;
                    }
                    return Err(Error::Worker(format!("expansion task {task_id}: {message}")));
                }
                Err(RecvTimeoutError::Timeout) => {
                    self.cancel_expand(head);
                    return Ok(());
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Worker("expansion pool disconnected".into()));
                }
            }
        };
        self.exp_order.pop_front();
        self.cancel_flags.remove(&head);
        let ctx = self.exp_ctx.remove(&head).expect("context recorded at dispatch");

        if ctx.is_root_child && !result.changed {
            // rule did nothing at the root state: prune the action for
            // this stage and hand the budget slot back
            assert_eq!(result.nodes_added, 0, "pruned action must not have added nodes");
            self.tree.remove_o(&ctx.path);
            self.tree.nodes[ctx.parent].pruned.insert(ctx.action);
            self.pruned_count += 1;
            self.dispatched -= 1;
            return Ok(());
        }

        let child = self.tree.add_child(ctx.parent, ctx.action, result.done, result.reward);
        let mut chain = ctx.path.clone();
        chain.push(child);
        if result.done {
            // terminal child: its value is exact, no rollout needed
            self.tree.remove_o(&ctx.path);
            self.tree.backup(&chain, result.reward);
            self.completed += 1;
            return Ok(());
        }
        self.tree.nodes[child].o = 1;
        let task_id = self.fresh_task_id();
        let cancel = Arc::new(AtomicBool::new(false));
        self.cancel_flags.insert(task_id, Arc::clone(&cancel));
        self.sim_ctx.insert(task_id, PendingSim { chain });
        self.sim_order.push_back(task_id);
        self.pools.send_sim(TaskEnvelope {
            desc: TaskDescriptor {
                kind: TaskKind::Simulate,
                sequence: self.tree.nodes[child].seq.clone(),
                is_root_child: ctx.is_root_child,
                task_id,
            },
            prefix_len: self.prefix_len,
            seed: ctx.seed,
            cancel,
        })?;
        Ok(())
    }

    fn consume_sim(&mut self) -> Result<(), Error> {
        let head = *self.sim_order.front().expect("caller checked non-empty");
        let result = loop {
            if let Some(r) = self.sim_ready.remove(&head) {
                break r;
            }
            match self.pools.sim_rx.recv_timeout(self.timeout()) {
                Ok(WorkerReply::Sim(r)) => {
                    if self.ignored.remove(&r.task_id) {
                        continue;
                    }
                    self.sim_ready.insert(r.task_id, r);
                }
                Ok(WorkerReply::Cancelled { task_id }) => {
                    self.ignored.remove(&task_id);
                }
                Ok(WorkerReply::Expand(_)) => {
                    unreachable!("expansion replies never arrive on the simulation channel")
                }
                Ok(WorkerReply::Fault { task_id, message }) => {
                    if self.ignored.remove(&task_id) {
                        continue;
                    }
                    return Err(Error::Worker(format!("simulation task {task_id}: {message}")));
                }
                Err(RecvTimeoutError::Timeout) => {
                    self.cancel_sim(head);
                    return Ok(());
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Worker("simulation pool disconnected".into()));
                }
            }
        };
        self.sim_order.pop_front();
        self.cancel_flags.remove(&head);
        let ctx = self.sim_ctx.remove(&head).expect("context recorded at dispatch");
        self.tree.remove_o(&ctx.chain);
        self.tree.backup(&ctx.chain, result.discounted_return);
        self.completed += 1;
        Ok(())
    }

    /// The oldest expansion is overdue: flag it, roll the books back, and
    /// return its action to the untried pool so a later iteration can
    /// retry it.
    fn cancel_expand(&mut self, task_id: u64) {
        if let Some(flag) = self.cancel_flags.remove(&task_id) {
            flag.store(true, Ordering::Relaxed);
        }
        self.ignored.insert(task_id);
        self.exp_order.pop_front();
        let ctx = self.exp_ctx.remove(&task_id).expect("context recorded at dispatch");
        self.tree.remove_o(&ctx.path);
        self.tree.nodes[ctx.parent].untried.insert(ctx.action);
        self.refund();
    }

    /// The oldest simulation is overdue. The child keeps its place in the
    /// tree with zero visits; only the rollout's information is lost.
    fn cancel_sim(&mut self, task_id: u64) {
        if let Some(flag) = self.cancel_flags.remove(&task_id) {
            flag.store(true, Ordering::Relaxed);
        }
        self.ignored.insert(task_id);
        self.sim_order.pop_front();
        let ctx = self.sim_ctx.remove(&task_id).expect("context recorded at dispatch");
        self.tree.remove_o(&ctx.chain);
        self.refund();
    }
}

fn run_stage(
    pools: &Pools,
    env_cfg: &Arc<EnvConfig>,
    prefix: &ActionSequence,
    cfg: &PlannerConfig,
    next_task_id: &mut u64,
) -> Result<StagePlan, Error> {
    let num_actions = env_cfg.rules.len() as u32;
    let stage_seed = derive_seed(cfg.seed, prefix.len() as u64);
    let stage = Stage {
        tree: Tree::new(prefix, cfg.gamma, cfg.c_explore, num_actions),
        pools,
        cfg,
        prefix_len: prefix.len(),
        stage_seed,
        next_task_id,
        exp_order: VecDeque::new(),
        sim_order: VecDeque::new(),
        exp_ctx: BTreeMap::new(),
        sim_ctx: BTreeMap::new(),
        exp_ready: BTreeMap::new(),
        sim_ready: BTreeMap::new(),
        ignored: BTreeSet::new(),
        cancel_flags: BTreeMap::new(),
        expand_counter: 0,
        dispatched: 0,
        completed: 0,
        pruned_count: 0,
        cancelled_count: 0,
        cancel_refunds: 0,
    };
    stage.run()
}

/// Plan one action from the state reached by `prefix`. Fails with
/// Saturated when every rule is a no-op there, which ends the episode.
pub fn plan(
    prefix: &ActionSequence,
    env_cfg: &Arc<EnvConfig>,
    cfg: &PlannerConfig,
) -> Result<u32, Error> {
    plan_trace(prefix, env_cfg, cfg).map(|p| p.action)
}

/// plan() plus the full stage evidence: root statistics, pruned actions,
/// and the accounting counters.
pub fn plan_trace(
    prefix: &ActionSequence,
    env_cfg: &Arc<EnvConfig>,
    cfg: &PlannerConfig,
) -> Result<StagePlan, Error> {
    cfg.validate()?;
    let state = env::replay(Arc::clone(env_cfg), prefix)?;
    if state.done() {
        return Err(Error::EpisodeDone);
    }
    let pools = Pools::spawn(env_cfg, cfg);
    let mut next_task_id = 0;
    run_stage(&pools, env_cfg, prefix, cfg, &mut next_task_id)
}

/// Full planned episode: the final action sequence, what it extracts to,
/// and per-stage evidence for reporting.
#[derive(Clone, Debug)]
pub struct EpisodeReport {
    pub final_sequence: ActionSequence,
    pub extraction: ExtractionResult,
    pub init_cost: f64,
    pub rule_counts: BTreeMap<u32, u64>,
    pub stop_reason: StopReason,
    pub final_enodes: usize,
    pub wall_time_s: f64,
    pub per_stage_times: Vec<f64>,
    pub stages: Vec<StageTrace>,
    /// One record per committed action, the episode log.
    pub steps: Vec<StepRecord>,
}

/// Alternate search, commit, rebuild: plan a stage from the live state,
/// step the chosen action for real, discard the tree, continue until the
/// episode ends. A Saturated verdict from planning ends the episode too,
/// since it means no rule can change the graph any more.
pub fn run_episode(env_cfg: &Arc<EnvConfig>, cfg: &PlannerConfig) -> Result<EpisodeReport, Error> {
    cfg.validate()?;
    let episode_start = Instant::now();
    let pools = Pools::spawn(env_cfg, cfg);
    let mut state = env::reset(Arc::clone(env_cfg))?;
    let mut rule_counts: BTreeMap<u32, u64> = BTreeMap::new();
    let mut stages = Vec::new();
    let mut per_stage_times = Vec::new();
    let mut steps = Vec::new();
    let mut next_task_id = 0;
    let stop_reason = loop {
        if state.done() {
            break state.stop_reason().expect("done states carry a reason");
        }
        let stage_start = Instant::now();
        match run_stage(&pools, env_cfg, state.history(), cfg, &mut next_task_id) {
            Ok(plan) => {
                let stage_wall_time_s = stage_start.elapsed().as_secs_f64();
                let result = env::step(&mut state, plan.action)?;
                steps.push(StepRecord {
                    step: steps.len(),
                    action: plan.action,
                    rule: env_cfg.rules.get(plan.action).expect("planned action exists").name().to_string(),
                    nodes_added: result.info.nodes_added,
                    enode_count: result.info.enode_count,
                    saturated: result.info.saturated,
                    reward: result.reward,
                    done: result.done,
                });
                *rule_counts.entry(plan.action).or_insert(0) += 1;
                stages.push(StageTrace {
                    stage: stages.len(),
                    chosen_action: plan.action,
                    root_stats: plan.root_stats,
                    pruned: plan.pruned,
                    stage_wall_time_s,
                });
                per_stage_times.push(stage_wall_time_s);
            }
            Err(Error::Saturated) => break StopReason::Saturated,
            Err(e) => return Err(e),
        }
    };
    let extraction = state.extract();
    Ok(EpisodeReport {
        final_sequence: state.history().clone(),
        extraction,
        init_cost: state.init_cost(),
        rule_counts,
        stop_reason,
        final_enodes: state.enode_count(),
        wall_time_s: episode_start.elapsed().as_secs_f64(),
        per_stage_times,
        stages,
        steps,
    })
}
