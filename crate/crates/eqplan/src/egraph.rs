//! E-graphs: a union-find over e-class ids, a hashcons from e-nodes to
//! their classes, and deferred congruence repair.
//!
//! Invariant discipline follows the usual worklist design: `add` and `union`
//! are cheap and may leave the congruence invariant broken; `rebuild`
//! restores it by reprocessing the parents of every class touched since the
//! last rebuild. Rule application batches all matches first, applies them,
//! then rebuilds exactly once.
//!
//! All iteration that can influence results runs in sorted id order, so two
//! graphs built by the same operation sequence are identical down to their
//! debug dumps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::mem;

use serde::{Deserialize, Serialize};

use crate::lang::{Symbol, Term};
use crate::rewrite::{instantiate, match_pattern, RewriteRule};

/// Id of an e-class. Plain index into the union-find; canonical ids are
/// the ones `find` maps to themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EClassId(u32);

impl EClassId {
    pub fn raw(self) -> u32 {
        self.0
    }
}

impl fmt::Display for EClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An operator applied to e-class ids. Two e-nodes are congruent when their
/// ops match and their children are equivalent classes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ENode {
    pub op: Symbol,
    pub children: Vec<EClassId>,
}

impl ENode {
    pub fn leaf(op: Symbol) -> ENode {
        ENode {
            op,
            children: Vec::new(),
        }
    }

    fn canonicalize(&mut self, uf: &UnionFind) {
        for c in &mut self.children {
            *c = uf.find(*c);
        }
    }

    fn canonical(&self, uf: &UnionFind) -> ENode {
        let mut n = self.clone();
        n.canonicalize(uf);
        n
    }
}

impl fmt::Display for ENode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.children.is_empty() {
            return f.write_str(self.op.name());
        }
        write!(f, "({}", self.op.name())?;
        for c in &self.children {
            write!(f, " {c}")?;
        }
        f.write_str(")")
    }
}

/// One equivalence class: the e-nodes it contains plus the parent e-nodes
/// that reference it (with the class each parent lives in).
#[derive(Clone, Debug)]
pub struct EClass {
    pub id: EClassId,
    pub nodes: Vec<ENode>,
    parents: Vec<(ENode, EClassId)>,
}

#[derive(Clone, Debug, Default)]
struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn make(&mut self) -> EClassId {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        EClassId(id)
    }

    fn find(&self, id: EClassId) -> EClassId {
        let mut cur = id.0;
        loop {
            let p = self.parent[cur as usize];
            if p == cur {
                return EClassId(cur);
            }
            cur = p;
        }
    }

    /// Same as `find` but compresses the walked path.
    fn find_mut(&mut self, id: EClassId) -> EClassId {
        let root = self.find(id);
        let mut cur = id.0;
        while cur != root.0 {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root.0;
            cur = next;
        }
        root
    }

    fn len(&self) -> usize {
        self.parent.len()
    }
}

/// Result of one rule application: how many matches were instantiated, how
/// many genuinely new e-nodes that created, whether the rule is saturated
/// at this state (added nothing), and whether the graph changed at all
/// (a union with no new nodes still changes it).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub matches: usize,
    pub nodes_added: usize,
    pub saturated: bool,
    pub changed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct EGraph {
    uf: UnionFind,
    hashcons: HashMap<ENode, EClassId>,
    classes: BTreeMap<EClassId, EClass>,
    /// Count of distinct e-nodes ever materialized. Monotone: congruence
    /// repair can fuse live nodes but never decrements this, matching the
    /// budget semantics of "each rewrite only adds".
    nodes_created: usize,
    dirty: Vec<EClassId>,
    /// Effective merges in call order, as passed in. Replayed graphs have
    /// identical logs; this is part of the debug dump.
    union_log: Vec<(u32, u32)>,
    /// Every e-node as first added, with the class it was assigned. Input
    /// for the naive congruence oracle in tests.
    add_log: Vec<(ENode, EClassId)>,
}

impl EGraph {
    pub fn new() -> EGraph {
        EGraph::default()
    }

    /// Number of distinct e-nodes ever created. Non-decreasing across any
    /// operation sequence; this is the quantity node budgets limit.
    pub fn num_enodes(&self) -> usize {
        self.nodes_created
    }

    /// Live canonical classes.
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Distinct canonical e-nodes currently live. Only meaningful on a
    /// rebuilt graph; unlike `num_enodes` this can shrink when congruence
    /// fuses nodes.
    pub fn live_enodes(&self) -> usize {
        self.classes.values().map(|c| c.nodes.len()).sum()
    }

    pub fn is_clean(&self) -> bool {
        self.dirty.is_empty()
    }

    pub fn contains_id(&self, id: EClassId) -> bool {
        (id.0 as usize) < self.uf.len()
    }

    pub fn find(&self, id: EClassId) -> EClassId {
        assert!(self.contains_id(id), "no e-class with id {id}");
        self.uf.find(id)
    }

    /// Canonical classes in ascending id order.
    pub fn classes(&self) -> impl Iterator<Item = &EClass> {
        self.classes.values()
    }

    pub fn class(&self, id: EClassId) -> &EClass {
        let root = self.find(id);
        &self.classes[&root]
    }

    /// Add an e-node over existing classes. Hashconsed: re-adding an
    /// equivalent node returns the existing class and creates nothing.
    pub fn add(&mut self, op: Symbol, children: Vec<EClassId>) -> EClassId {
        for c in &children {
            assert!(self.contains_id(*c), "no e-class with id {c}");
        }
        let mut node = ENode { op, children };
        node.canonicalize(&self.uf);
        if let Some(&hit) = self.hashcons.get(&node) {
            return self.uf.find_mut(hit);
        }
        let id = self.uf.make();
        self.hashcons.insert(node.clone(), id);
        self.nodes_created += 1;
        self.add_log.push((node.clone(), id));
        for c in &node.children {
            let parent_list = &mut self
                .classes
                .get_mut(c)
                .expect("canonical child has a class")
                .parents;
            parent_list.push((node.clone(), id));
        }
        self.classes.insert(
            id,
            EClass {
                id,
                nodes: vec![node],
                parents: Vec::new(),
            },
        );
        id
    }

    /// Load a term, sharing equal subterms. Idempotent.
    pub fn add_term(&mut self, t: &Term) -> EClassId {
        let children = t.children.iter().map(|c| self.add_term(c)).collect();
        self.add(t.op.clone(), children)
    }

    /// Merge two classes. Returns the canonical id and whether anything
    /// actually merged. Leader is the smaller canonical id. Leaves the
    /// graph dirty until `rebuild`.
    pub fn union(&mut self, a: EClassId, b: EClassId) -> (EClassId, bool) {
        let ra = self.uf.find_mut(a);
        let rb = self.uf.find_mut(b);
        if ra == rb {
            return (ra, false);
        }
        let (leader, loser) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.union_log.push((a.0, b.0));
        self.uf.parent[loser.0 as usize] = leader.0;
        let dead = self.classes.remove(&loser).expect("loser class exists");
        let keep = self.classes.get_mut(&leader).expect("leader class exists");
        keep.nodes.extend(dead.nodes);
        keep.parents.extend(dead.parents);
        self.dirty.push(leader);
        (leader, true)
    }

    /// Restore congruence: reprocess parents of merged classes until no
    /// new merges appear, then canonicalize every class's node list.
    /// Returns the number of worklist passes (0 when already clean).
    pub fn rebuild(&mut self) -> usize {
        let mut passes = 0;
        while !self.dirty.is_empty() {
            passes += 1;
            let todo: BTreeSet<EClassId> = mem::take(&mut self.dirty)
                .into_iter()
                .map(|id| self.uf.find(id))
                .collect();
            for id in todo {
                self.repair(id);
            }
        }
        if passes > 0 {
            let ids: Vec<EClassId> = self.classes.keys().copied().collect();
            for id in ids {
                let mut nodes = mem::take(&mut self.classes.get_mut(&id).expect("live").nodes);
                for n in &mut nodes {
                    n.canonicalize(&self.uf);
                }
                nodes.sort();
                nodes.dedup();
                self.classes.get_mut(&id).expect("live").nodes = nodes;
            }
            // hashcons values may lag behind unions performed during repair
            for v in self.hashcons.values_mut() {
                *v = self.uf.find(*v);
            }
        }
        passes
    }

    fn repair(&mut self, id: EClassId) {
        let id = self.uf.find(id);
        let parents = mem::take(
            &mut self
                .classes
                .get_mut(&id)
                .expect("repair target is canonical")
                .parents,
        );
        // pass 1: re-key the hashcons under canonical children
        for (pnode, pclass) in &parents {
            self.hashcons.remove(pnode);
            let fixed = pnode.canonical(&self.uf);
            let canon_class = self.uf.find(*pclass);
            self.hashcons.insert(fixed, canon_class);
        }
        // pass 2: congruent parents collide here; union their classes
        let mut dedup: BTreeMap<ENode, EClassId> = BTreeMap::new();
        for (pnode, pclass) in parents {
            let fixed = pnode.canonical(&self.uf);
            let pclass = self.uf.find(pclass);
            if let Some(&prev) = dedup.get(&fixed) {
                let (merged, _) = self.union(prev, pclass);
                dedup.insert(fixed, merged);
            } else {
                dedup.insert(fixed, pclass);
            }
        }
        let home = self.uf.find(id);
        let parent_list = &mut self
            .classes
            .get_mut(&home)
            .expect("canonical class exists")
            .parents;
        for (n, c) in dedup {
            parent_list.push((n, c));
        }
    }

    /// Apply one rewrite rule everywhere it matches: collect all matches
    /// first (read phase), then instantiate and union each (write phase),
    /// then rebuild once. The match list is a snapshot; matches created by
    /// this very application wait for the next one.
    pub fn apply_rule(&mut self, rule: &RewriteRule) -> ApplyReport {
        let before = self.nodes_created;
        let mut matches = match_pattern(self, rule.lhs());
        if let Some(cond) = rule.condition() {
            matches.retain(|(class, subst)| cond(self, *class, subst));
        }
        let mut any_merge = false;
        for (class, subst) in &matches {
            let rhs = instantiate(self, rule.rhs(), subst)
                .expect("rule validated: every rhs var is bound by the lhs");
            let (_, merged) = self.union(*class, rhs);
            any_merge |= merged;
        }
        self.rebuild();
        let nodes_added = self.nodes_created - before;
        ApplyReport {
            matches: matches.len(),
            nodes_added,
            saturated: nodes_added == 0,
            changed: nodes_added > 0 || any_merge,
        }
    }

    /// Deterministic JSON dump: classes ascending, node lists canonicalized
    /// and sorted, plus the effective union log. Does not mutate.
    pub fn dump(&self) -> serde_json::Value {
        let classes: Vec<serde_json::Value> = self
            .classes
            .values()
            .map(|c| {
                let mut nodes: Vec<ENode> =
                    c.nodes.iter().map(|n| n.canonical(&self.uf)).collect();
                nodes.sort();
                nodes.dedup();
                let nodes: Vec<serde_json::Value> = nodes
                    .iter()
                    .map(|n| {
                        serde_json::json!({
                            "op": n.op.name(),
                            "children": n.children.iter().map(|c| c.raw()).collect::<Vec<u32>>(),
                        })
                    })
                    .collect();
                serde_json::json!({ "id": c.id.raw(), "nodes": nodes })
            })
            .collect();
        let unions: Vec<[u32; 2]> = self.union_log.iter().map(|&(a, b)| [a, b]).collect();
        serde_json::json!({ "classes": classes, "unions": unions })
    }

    /// Raw (node, assigned class) add events plus effective unions, for
    /// checking the congruence closure against a naive oracle.
    pub fn history(&self) -> (Vec<(ENode, EClassId)>, Vec<(u32, u32)>) {
        (self.add_log.clone(), self.union_log.clone())
    }

    /// All ids ever allocated (canonical or not).
    pub fn id_count(&self) -> usize {
        self.uf.len()
    }

    /// Reverse every class's node list. Extraction results must not care.
    #[cfg(test)]
    pub(crate) fn permute_node_order_for_tests(&mut self) {
        for class in self.classes.values_mut() {
            class.nodes.reverse();
        }
    }
}
