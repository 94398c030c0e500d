//! Helpers shared by the integration suites: a serial UCT reference the
//! parallel planner must match at one worker per pool, a naive congruence
//! oracle, random graph builders, and wall-time masking for byte-level
//! output comparison.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eqplan::derive_seed;
use eqplan::egraph::{EClassId, EGraph};
use eqplan::env::{self, EnvConfig, EnvState};
use eqplan::lang::{parse_term, random_term, LanguageDef, Term};
use eqplan::planner::{PlannerConfig, RootStat};
use eqplan::rewrite::RuleSet;

pub const WORKED_EXAMPLE: &str = "(/ (* a 2) 2)";

/// Four rules, horizon three: the smallest environment where greedy rule
/// choice loses. Optimal play is div-assoc, div-same, mul-one for a
/// reward of 4; only div-assoc starts an optimal line.
pub fn toy_env() -> Arc<EnvConfig> {
    let lang = LanguageDef::math();
    let term = parse_term(&lang, WORKED_EXAMPLE).unwrap();
    let rules = RuleSet::from_str(
        &lang,
        "div-assoc: (/ (* ?x ?y) ?z) => (* ?x (/ ?y ?z))\n\
         div-same: (/ ?x ?x) => 1\n\
         mul-one: (* ?x 1) => ?x\n\
         comm-mul: (* ?a ?b) => (* ?b ?a)\n",
    )
    .unwrap();
    Arc::new(EnvConfig::new(term, rules).with_max_episode_len(3))
}

pub struct RefPlan {
    pub action: u32,
    pub root_stats: Vec<RootStat>,
    pub pruned: Vec<u32>,
}

struct RefNode {
    state: EnvState,
    n: u64,
    w: f64,
    children: BTreeMap<u32, usize>,
    untried: BTreeSet<u32>,
    terminal: bool,
    terminal_value: f64,
}

/// Serial UCT from the initial state: one iteration fully finishes before
/// the next begins, tree nodes hold live environment states instead of
/// replaying action sequences, and in-flight counts never exist. Seeds,
/// selection arithmetic, root pruning, and backup discounting follow the
/// same conventions as the parallel planner, so with one worker per pool
/// the planner must reproduce these root statistics exactly.
pub fn reference_plan(env_cfg: &Arc<EnvConfig>, cfg: &PlannerConfig) -> Result<RefPlan, String> {
    let root_state = env::reset(Arc::clone(env_cfg)).map_err(|e| e.to_string())?;
    if root_state.done() {
        return Err("episode over before planning".into());
    }
    let num_actions = env_cfg.rules.len() as u32;
    let stage_seed = derive_seed(cfg.seed, 0);
    let mut nodes = vec![RefNode {
        state: root_state,
        n: 0,
        w: 0.0,
        children: BTreeMap::new(),
        untried: (0..num_actions).collect(),
        terminal: false,
        terminal_value: 0.0,
    }];
    let mut pruned: BTreeSet<u32> = BTreeSet::new();
    let mut expand_counter = 0u64;
    let mut charged = 0u64;

    while charged < cfg.budget as u64 {
        if nodes[0].untried.is_empty() && nodes[0].children.is_empty() {
            return Err("saturated: every root action is a no-op".into());
        }

        // One worker per pool keeps in-flight counts at zero during
        // selection, so unvisited children always score infinity and the
        // planner's inherited-Q fallback can never be read here.
        let mut path = vec![0usize];
        loop {
            let cur = *path.last().unwrap();
            let node = &nodes[cur];
            if node.terminal || !node.untried.is_empty() {
                break;
            }
            let parent_visits = (node.n as f64).max(1.0);
            let mut best: Option<(f64, usize)> = None;
            for &child_id in node.children.values() {
                let child = &nodes[child_id];
                let score = if child.n == 0 {
                    f64::INFINITY
                } else {
                    child.w / child.n as f64
                        + cfg.c_explore * (parent_visits.ln() / child.n as f64).sqrt()
                };
                if best.map_or(true, |(bs, _)| score > bs) {
                    best = Some((score, child_id));
                }
            }
            path.push(best.expect("non-terminal interior node has children").1);
        }

        let leaf = *path.last().unwrap();
        if nodes[leaf].terminal {
            let value = nodes[leaf].terminal_value;
            backup(&mut nodes, &path, value, cfg.gamma);
            charged += 1;
            continue;
        }

        let action = *nodes[leaf].untried.iter().next().unwrap();
        nodes[leaf].untried.remove(&action);
        let rollout_seed = derive_seed(stage_seed, expand_counter);
        expand_counter += 1;

        let mut child_state = nodes[leaf].state.clone();
        let step = env::step(&mut child_state, action).map_err(|e| e.to_string())?;
        if leaf == 0 && !step.info.changed {
            // no-op at the root: drop the action without charging the budget
            pruned.insert(action);
            continue;
        }

        let child_id = nodes.len();
        nodes.push(RefNode {
            state: child_state.clone(),
            n: 0,
            w: 0.0,
            children: BTreeMap::new(),
            untried: if step.done { BTreeSet::new() } else { (0..num_actions).collect() },
            terminal: step.done,
            terminal_value: step.reward,
        });
        nodes[leaf].children.insert(action, child_id);
        let mut chain = path;
        chain.push(child_id);

        let value = if step.done {
            step.reward
        } else {
            ref_rollout(&mut child_state, rollout_seed, cfg.max_sim_step, cfg.gamma)
        };
        backup(&mut nodes, &chain, value, cfg.gamma);
        charged += 1;
    }

    let root_stats: Vec<RootStat> = nodes[0]
        .children
        .iter()
        .map(|(&action, &id)| RootStat {
            action,
            n: nodes[id].n,
            q: if nodes[id].n > 0 { nodes[id].w / nodes[id].n as f64 } else { 0.0 },
        })
        .collect();
    let mut best: Option<(f64, u32)> = None;
    for (&action, &id) in &nodes[0].children {
        if nodes[id].n == 0 {
            continue;
        }
        let q = nodes[id].w / nodes[id].n as f64;
        if best.map_or(true, |(bq, _)| q > bq) {
            best = Some((q, action));
        }
    }
    let action = best
        .map(|(_, a)| a)
        .or_else(|| nodes[0].children.keys().next().copied())
        .ok_or("no root child survived")?;
    Ok(RefPlan { action, root_stats, pruned: pruned.into_iter().collect() })
}

fn backup(nodes: &mut [RefNode], chain: &[usize], leaf_value: f64, gamma: f64) {
    let leaf_depth = chain.len() - 1;
    for (i, &id) in chain.iter().enumerate() {
        nodes[id].n += 1;
        nodes[id].w += gamma.powi((leaf_depth - i) as i32) * leaf_value;
    }
}

fn ref_rollout(state: &mut EnvState, seed: u64, max_sim_step: usize, gamma: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = 0usize;
    loop {
        if state.done() || steps >= max_sim_step {
            return gamma.powi(steps as i32) * env::terminal_reward(state);
        }
        let viable = state.viable_actions();
        let action = viable[rng.gen_range(0..viable.len())];
        let result = env::step(state, action).expect("viable actions step cleanly");
        steps += 1;
        if result.done {
            return gamma.powi(steps as i32) * result.reward;
        }
    }
}

/// Equivalence oracle built by replaying the graph's add/union log into a
/// plain union-find and closing congruence by quadratic scanning.
pub struct NaiveEquiv {
    parent: Vec<usize>,
    nodes: Vec<(String, Vec<usize>, usize)>,
}

impl NaiveEquiv {
    pub fn from_graph(g: &EGraph) -> NaiveEquiv {
        let (adds, unions) = g.history();
        let mut naive = NaiveEquiv { parent: (0..g.id_count()).collect(), nodes: Vec::new() };
        for (node, id) in &adds {
            naive.nodes.push((
                node.op.name().to_string(),
                node.children.iter().map(|c| c.raw() as usize).collect(),
                id.raw() as usize,
            ));
        }
        for &(a, b) in &unions {
            naive.union(a as usize, b as usize);
        }
        naive.close();
        naive
    }

    fn find(&self, mut x: usize) -> usize {
        while self.parent[x] != x {
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }

    fn close(&mut self) {
        loop {
            let mut grew = false;
            for i in 0..self.nodes.len() {
                for j in (i + 1)..self.nodes.len() {
                    if self.nodes[i].0 != self.nodes[j].0
                        || self.nodes[i].1.len() != self.nodes[j].1.len()
                        || self.find(self.nodes[i].2) == self.find(self.nodes[j].2)
                    {
                        continue;
                    }
                    let congruent = self.nodes[i]
                        .1
                        .iter()
                        .zip(&self.nodes[j].1)
                        .all(|(&x, &y)| self.find(x) == self.find(y));
                    if congruent {
                        let (a, b) = (self.nodes[i].2, self.nodes[j].2);
                        self.union(a, b);
                        grew = true;
                    }
                }
            }
            if !grew {
                return;
            }
        }
    }

    pub fn same(&self, a: EClassId, b: EClassId) -> bool {
        self.find(a.raw() as usize) == self.find(b.raw() as usize)
    }
}

/// Random already-rebuilt graph: a few random terms plus random unions.
pub fn random_graph(seed: u64, max_nodes: usize) -> EGraph {
    let lang = LanguageDef::math();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = EGraph::new();
    while g.num_enodes() < max_nodes / 2 {
        let term = random_term(&lang, 3, rng.gen());
        g.add_term(&term);
    }
    let ids: Vec<EClassId> = g.classes().map(|c| c.id).collect();
    for _ in 0..rng.gen_range(1..=4) {
        let a = ids[rng.gen_range(0..ids.len())];
        let b = ids[rng.gen_range(0..ids.len())];
        g.union(a, b);
    }
    g.rebuild();
    g
}

fn add_with_depths(g: &mut EGraph, t: &Term, out: &mut Vec<(EClassId, usize)>) -> (EClassId, usize) {
    let mut child_ids = Vec::new();
    let mut depth = 0;
    for c in &t.children {
        let (id, d) = add_with_depths(g, c, out);
        child_ids.push(id);
        depth = depth.max(d);
    }
    let id = g.add(t.op.clone(), child_ids);
    out.push((id, depth + 1));
    (id, depth + 1)
}

/// Random graph guaranteed acyclic: unions only join classes holding
/// terms of equal depth, so every edge still strictly decreases depth
/// after closure.
pub fn random_acyclic_graph(seed: u64) -> (EGraph, EClassId) {
    let lang = LanguageDef::math();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = EGraph::new();
    let mut depths: Vec<(EClassId, usize)> = Vec::new();
    let (root, _) = add_with_depths(&mut g, &random_term(&lang, 4, rng.gen()), &mut depths);
    add_with_depths(&mut g, &random_term(&lang, 4, rng.gen()), &mut depths);
    for _ in 0..rng.gen_range(0..=3) {
        let (a, da) = depths[rng.gen_range(0..depths.len())];
        if let Some(&(b, _)) = depths.iter().filter(|(_, d)| *d == da).nth(rng.gen_range(0..4)) {
            g.union(a, b);
        }
    }
    g.rebuild();
    (g, root)
}

/// Depth-first cycle check over canonical classes.
pub fn is_acyclic(g: &EGraph) -> bool {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let mut marks: BTreeMap<u32, Mark> = g.classes().map(|c| (c.id.raw(), Mark::New)).collect();
    fn visit(g: &EGraph, id: EClassId, marks: &mut BTreeMap<u32, Mark>) -> bool {
        let key = g.find(id).raw();
        match marks.get(&key) {
            Some(Mark::Done) => return true,
            Some(Mark::Open) => return false,
            _ => {}
        }
        marks.insert(key, Mark::Open);
        for node in &g.class(id).nodes {
            for &child in &node.children {
                if !visit(g, child, marks) {
                    return false;
                }
            }
        }
        marks.insert(key, Mark::Done);
        true
    }
    let ids: Vec<EClassId> = g.classes().map(|c| c.id).collect();
    ids.into_iter().all(|id| visit(g, id, &mut marks))
}

/// Strips every object key containing "wall_time" so reruns compare
/// byte for byte.
pub fn mask_times(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !k.contains("wall_time"));
            for v in map.values_mut() {
                mask_times(v);
            }
        }
        serde_json::Value::Array(items) => {
            for v in items {
                mask_times(v);
            }
        }
        _ => {}
    }
}

/// File content with time fields removed; jsonl is masked line by line.
pub fn masked_file(path: &Path) -> String {
    let src = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "jsonl") {
        src.lines()
            .map(|line| {
                let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
                mask_times(&mut v);
                v.to_string()
            })
            .collect::<Vec<_>>()
            .join("\n")
    } else {
        let mut v: serde_json::Value = serde_json::from_str(&src).unwrap();
        mask_times(&mut v);
        v.to_string()
    }
}
