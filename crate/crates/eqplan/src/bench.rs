//! Benchmark harness: a sweep-to-the-limit baseline engine, the planned
//! engine, deterministic suite generation (random and adversarial), and
//! the report emitters (heatmap CSV, timing tables).
//!
//! The baseline models the classic saturation loop: apply every rule in
//! index order, sweep after sweep, until the node budget is spent, a full
//! sweep changes nothing, or a sweep cap trips. Its weakness is the point
//! of the adversarial suite: a big expression that early-indexed rules
//! blow up sits next to a late-indexed rule that would collapse the whole
//! thing, so the sweep spends its budget before ever reaching the one
//! rule that matters while the planner finds it in a stage or two.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::derive_seed;
use crate::egraph::EGraph;
use crate::env::{EnvConfig, StopReason};
use crate::extract::{extract_greedy, tree_cost, CostFunction};
use crate::lang::{parse_term, print_term, LanguageDef, Term};
use crate::planner::{run_episode, EpisodeReport, PlannerConfig};
use crate::rewrite::RuleSet;
use crate::Error;

pub const BASELINE_SWEEP_CAP: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Math,
    Prop,
}

impl Domain {
    pub fn lang(self) -> LanguageDef {
        match self {
            Domain::Math => LanguageDef::math(),
            Domain::Prop => LanguageDef::prop(),
        }
    }

    pub fn rules(self) -> RuleSet {
        match self {
            Domain::Math => RuleSet::math(),
            Domain::Prop => RuleSet::prop(),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Domain::Math => "MATH",
            Domain::Prop => "PROP",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Math => "math",
            Domain::Prop => "prop",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Domain, Error> {
        match s {
            "math" => Ok(Domain::Math),
            "prop" => Ok(Domain::Prop),
            other => Err(Error::Config(format!("unknown domain '{other}' (math | prop)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchCase {
    /// Encodes domain, depth, and index: "MATH-5-0".
    pub name: String,
    pub domain: Domain,
    pub term: Term,
    pub seed: u64,
    pub max_depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Baseline,
    Mcts,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Baseline => "baseline",
            Engine::Mcts => "mcts",
        })
    }
}

/// One engine run over one case. rule_counts covers every rule in index
/// order, zeros included, so heatmap columns line up across records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub case_name: String,
    pub engine: Engine,
    pub final_cost: f64,
    pub init_cost: f64,
    pub final_expr: String,
    pub final_enodes: usize,
    pub wall_time_s: f64,
    pub rule_counts: Vec<(String, u64)>,
    pub stop_reason: StopReason,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sim_workers: Option<usize>,
}

/// Sweep every rule in index order until the node budget is spent
/// mid-sweep, a full sweep changes nothing, or the sweep cap trips.
/// rule_counts counts calls: one per rule per (possibly partial) sweep.
pub fn run_baseline(case: &BenchCase, rules: &RuleSet, node_limit: usize) -> Result<RunRecord, Error> {
    let start = Instant::now();
    let mut g = EGraph::new();
    let root = g.add_term(&case.term);
    if node_limit < g.num_enodes() {
        return Err(Error::Config(format!(
            "node_limit {node_limit} is smaller than the initial graph ({} e-nodes)",
            g.num_enodes()
        )));
    }
    let cf = CostFunction::unit();
    let init_cost = tree_cost(&cf, &case.term);
    let mut counts = vec![0u64; rules.len()];
    let mut stop_reason = None;
    let mut sweeps = 0;
    'sweeping: while sweeps < BASELINE_SWEEP_CAP {
        let mut sweep_changed = false;
        for (i, rule) in rules.iter().enumerate() {
            let report = g.apply_rule(rule);
            counts[i] += 1;
            sweep_changed |= report.changed;
            if g.num_enodes() >= node_limit {
                stop_reason = Some(StopReason::NodeLimit);
                break 'sweeping;
            }
        }
        sweeps += 1;
        if !sweep_changed {
            stop_reason = Some(StopReason::Saturated);
            break;
        }
    }
    let extraction = extract_greedy(&g, root, &cf)?;
    Ok(RunRecord {
        case_name: case.name.clone(),
        engine: Engine::Baseline,
        final_cost: extraction.cost,
        init_cost,
        final_expr: print_term(&extraction.term),
        final_enodes: g.num_enodes(),
        wall_time_s: start.elapsed().as_secs_f64(),
        rule_counts: rules.names().iter().cloned().zip(counts).collect(),
        stop_reason: stop_reason.unwrap_or(StopReason::EpisodeCap),
        sim_workers: None,
    })
}

/// Planned run plus the full episode evidence for trace files.
pub fn run_mcts_full(
    case: &BenchCase,
    rules: &RuleSet,
    node_limit: usize,
    planner_cfg: &PlannerConfig,
    max_episode_len: usize,
) -> Result<(RunRecord, EpisodeReport), Error> {
    let env_cfg = Arc::new(
        EnvConfig::new(case.term.clone(), rules.clone())
            .with_node_limit(node_limit)
            .with_max_episode_len(max_episode_len),
    );
    let report = run_episode(&env_cfg, planner_cfg)?;
    let counts: Vec<(String, u64)> = rules
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| (name.clone(), report.rule_counts.get(&(i as u32)).copied().unwrap_or(0)))
        .collect();
    let record = RunRecord {
        case_name: case.name.clone(),
        engine: Engine::Mcts,
        final_cost: report.extraction.cost,
        init_cost: report.init_cost,
        final_expr: print_term(&report.extraction.term),
        final_enodes: report.final_enodes,
        wall_time_s: report.wall_time_s,
        rule_counts: counts,
        stop_reason: report.stop_reason,
        sim_workers: Some(planner_cfg.sim_workers),
    };
    Ok((record, report))
}

pub fn run_mcts(
    case: &BenchCase,
    rules: &RuleSet,
    node_limit: usize,
    planner_cfg: &PlannerConfig,
    max_episode_len: usize,
) -> Result<RunRecord, Error> {
    run_mcts_full(case, rules, node_limit, planner_cfg, max_episode_len).map(|(record, _)| record)
}

/// Deterministic random suite: case i gets a seed derived from
/// (base_seed, i) and a name like "MATH-5-3".
pub fn generate_suite(domain: Domain, count: usize, max_depth: usize, base_seed: u64) -> Vec<BenchCase> {
    let lang = domain.lang();
    (0..count)
        .map(|i| {
            let seed = derive_seed(base_seed, i as u64);
            BenchCase {
                name: format!("{}-{}-{}", domain.tag(), max_depth, i),
                domain,
                term: crate::lang::random_term(&lang, max_depth, seed),
                seed,
                max_depth,
            }
        })
        .collect()
}

/// A full binary tree over the domain's explosive operators, wrapped by
/// an absorbing operator whose collapse rule sits last in the rule file:
/// Math gets (* S 0) with mul-zero last, Prop gets (| S true) with
/// or-true last. Sweeping in index order floods the node budget on the
/// expansive rules before the final index is ever reached; one planned
/// application of the last rule collapses the whole term to a leaf.
fn adversarial_case(domain: Domain, depth: usize, seed: u64, name: String) -> BenchCase {
    let lang = domain.lang();
    let (ops, leaves, wrap_op, absorber) = match domain {
        Domain::Math => (["+", "*"].as_slice(), ["a", "b", "c", "x", "y"].as_slice(), "*", "0"),
        Domain::Prop => (["&", "|"].as_slice(), ["p", "q", "r"].as_slice(), "|", "true"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fn full_tree(
        lang: &LanguageDef,
        ops: &[&str],
        leaves: &[&str],
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Term {
        if depth == 0 {
            return Term::leaf(lang.lookup(leaves[rng.gen_range(0..leaves.len())]).unwrap().clone());
        }
        let op = lang.lookup(ops[rng.gen_range(0..ops.len())]).unwrap().clone();
        let left = full_tree(lang, ops, leaves, depth - 1, rng);
        let right = full_tree(lang, ops, leaves, depth - 1, rng);
        Term::new(op, vec![left, right])
    }
    let body = full_tree(&lang, ops, leaves, depth, &mut rng);
    let absorber = Term::leaf(lang.lookup(absorber).unwrap().clone());
    let term = Term::new(lang.lookup(wrap_op).unwrap().clone(), vec![body, absorber]);
    BenchCase { name, domain, term, seed, max_depth: depth + 1 }
}

pub const ADVERSARIAL_DEPTH: usize = 8;

pub fn make_adversarial_case(domain: Domain) -> BenchCase {
    adversarial_case(
        domain,
        ADVERSARIAL_DEPTH,
        derive_seed(0, 0x5eed),
        format!("ADV-{}-0", domain.tag()),
    )
}

pub fn adversarial_suite(domain: Domain, count: usize, base_seed: u64) -> Vec<BenchCase> {
    (0..count)
        .map(|i| {
            adversarial_case(
                domain,
                ADVERSARIAL_DEPTH,
                derive_seed(base_seed, 0x5eed + i as u64),
                format!("ADV-{}-{}", domain.tag(), i),
            )
        })
        .collect()
}

/// Case-by-rule application matrix. All records must carry the same rule
/// names in the same order; the companion JSON carries per-rule totals.
pub fn emit_heatmap(records: &[RunRecord]) -> Result<(String, serde_json::Value), Error> {
    let Some(first) = records.first() else {
        return Ok(("case\n".to_string(), json!({"rules": [], "totals": [], "cases": 0})));
    };
    let rule_names: Vec<&str> = first.rule_counts.iter().map(|(n, _)| n.as_str()).collect();
    let mut csv = String::from("case");
    for name in &rule_names {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    let mut totals = vec![0u64; rule_names.len()];
    for record in records {
        let names: Vec<&str> = record.rule_counts.iter().map(|(n, _)| n.as_str()).collect();
        if names != rule_names {
            return Err(Error::Config(format!(
                "record '{}' was produced with a different rule set",
                record.case_name
            )));
        }
        csv.push_str(&record.case_name);
        for (i, (_, count)) in record.rule_counts.iter().enumerate() {
            csv.push(',');
            csv.push_str(&count.to_string());
            totals[i] += count;
        }
        csv.push('\n');
    }
    let totals_json = json!({
        "rules": rule_names,
        "totals": totals,
        "cases": records.len(),
    });
    Ok((csv, totals_json))
}

/// Shannon entropy in bits of a count distribution; 0 for empty or
/// single-spike distributions. Lower entropy means the engine leaned on
/// fewer rules.
pub fn shannon_entropy(counts: impl IntoIterator<Item = u64>) -> f64 {
    let counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    -counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Wall-time aggregation grouped by (engine, sim worker count), with a
/// serial-vs-parallel speedup ratio per parallel group when a 1-worker
/// group exists to compare against.
pub fn timing_report(records: &[RunRecord]) -> (String, serde_json::Value) {
    if records.is_empty() {
        return (
            "timing: no records\n".to_string(),
            json!({"groups": [], "speedup": {}, "empty": true}),
        );
    }
    let mut groups: Vec<(Engine, Option<usize>, Vec<f64>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(e, w, _)| *e == r.engine && *w == r.sim_workers) {
            Some((_, _, times)) => times.push(r.wall_time_s),
            None => groups.push((r.engine, r.sim_workers, vec![r.wall_time_s])),
        }
    }
    let mut lines = vec![format!(
        "{:<10} {:>11} {:>6} {:>12} {:>12}",
        "engine", "sim_workers", "runs", "mean_s", "total_s"
    )];
    let mut group_json = Vec::new();
    for (engine, workers, times) in &groups {
        let total: f64 = times.iter().sum();
        let mean = total / times.len() as f64;
        let workers_str = workers.map_or("-".to_string(), |w| w.to_string());
        lines.push(format!(
            "{:<10} {:>11} {:>6} {:>12.4} {:>12.4}",
            engine.to_string(),
            workers_str,
            times.len(),
            mean,
            total
        ));
        group_json.push(json!({
            "engine": engine,
            "sim_workers": workers,
            "runs": times.len(),
            "mean_wall_time_s": mean,
            "total_wall_time_s": total,
        }));
    }
    let serial_mean = groups
        .iter()
        .find(|(e, w, _)| *e == Engine::Mcts && *w == Some(1))
        .map(|(_, _, t)| t.iter().sum::<f64>() / t.len() as f64);
    let mut speedup = serde_json::Map::new();
    if let Some(serial) = serial_mean {
        for (engine, workers, times) in &groups {
            if *engine == Engine::Mcts {
                if let Some(w) = workers {
                    if *w > 1 {
                        let mean = times.iter().sum::<f64>() / times.len() as f64;
                        let ratio = serial / mean;
                        speedup.insert(w.to_string(), json!(ratio));
                        lines.push(format!("speedup with {w} sim workers over 1: {ratio:.2}x"));
                    }
                }
            }
        }
    }
    let text = lines.join("\n") + "\n";
    (text, json!({"groups": group_json, "speedup": speedup}))
}

/// Suite manifests store terms as expression strings so they stay
/// readable and re-parseable against the shipped grammars.
pub fn suite_to_json(cases: &[BenchCase]) -> serde_json::Value {
    json!(cases
        .iter()
        .map(|c| {
            json!({
                "name": c.name,
                "domain": c.domain,
                "expr": print_term(&c.term),
                "seed": c.seed,
                "max_depth": c.max_depth,
            })
        })
        .collect::<Vec<_>>())
}

pub fn suite_from_json(v: &serde_json::Value) -> Result<Vec<BenchCase>, Error> {
    let entries = v
        .as_array()
        .ok_or_else(|| Error::Config("suite manifest must be a JSON array".into()))?;
    let mut cases = Vec::new();
    for entry in entries {
        let field = |key: &str| {
            entry
                .get(key)
                .ok_or_else(|| Error::Config(format!("suite entry missing '{key}'")))
        };
        let domain: Domain = serde_json::from_value(field("domain")?.clone())?;
        let expr = field("expr")?
            .as_str()
            .ok_or_else(|| Error::Config("suite entry 'expr' must be a string".into()))?;
        cases.push(BenchCase {
            name: field("name")?
                .as_str()
                .ok_or_else(|| Error::Config("suite entry 'name' must be a string".into()))?
                .to_string(),
            domain,
            term: parse_term(&domain.lang(), expr)?,
            seed: field("seed")?.as_u64().unwrap_or(0),
            max_depth: field("max_depth")?.as_u64().unwrap_or(0) as usize,
        });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::DEFAULT_MAX_EPISODE_LEN;

    #[test]
    fn suite_generation_is_deterministic_and_named() {
        let a = generate_suite(Domain::Math, 3, 4, 0);
        let b = generate_suite(Domain::Math, 3, 4, 0);
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].name, "MATH-4-0");
        assert_eq!(a[2].name, "MATH-4-2");
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(print_term(&x.term), print_term(&y.term));
            assert!(x.term.depth() <= 4);
        }
        let c = generate_suite(Domain::Prop, 2, 3, 7);
        assert_eq!(c[1].name, "PROP-3-1");
        assert_ne!(print_term(&c[0].term), print_term(&c[1].term));
    }

    #[test]
    fn suite_manifest_round_trips() {
        let cases = generate_suite(Domain::Prop, 3, 4, 5);
        let manifest = suite_to_json(&cases);
        let loaded = suite_from_json(&manifest).unwrap();
        assert_eq!(loaded.len(), cases.len());
        for (a, b) in cases.iter().zip(&loaded) {
            assert_eq!(a.name, b.name);
            assert_eq!(print_term(&a.term), print_term(&b.term));
            assert_eq!(a.seed, b.seed);
        }
        assert!(suite_from_json(&json!({"not": "a list"})).is_err());
        assert!(suite_from_json(&json!([{"name": "X"}])).is_err());
    }

    #[test]
    fn baseline_saturates_small_case_and_matches_mcts() {
        let lang = LanguageDef::math();
        let case = BenchCase {
            name: "tiny".into(),
            domain: Domain::Math,
            term: parse_term(&lang, "(+ a 0)").unwrap(),
            seed: 0,
            max_depth: 2,
        };
        let rules = RuleSet::math();
        let baseline = run_baseline(&case, &rules, 10_000).unwrap();
        assert_eq!(baseline.stop_reason, StopReason::Saturated);
        assert_eq!(baseline.final_cost, 1.0);
        assert_eq!(baseline.final_expr, "a");
        // call counting: every rule is invoked once per sweep
        let counts: Vec<u64> = baseline.rule_counts.iter().map(|(_, c)| *c).collect();
        assert!(counts.iter().all(|&c| c == counts[0]));

        let pcfg = PlannerConfig { budget: 32, sim_workers: 2, seed: 4, ..PlannerConfig::default() };
        let mcts = run_mcts(&case, &rules, 10_000, &pcfg, 6).unwrap();
        assert_eq!(mcts.final_cost, baseline.final_cost);
        assert_eq!(mcts.init_cost, baseline.init_cost);
        assert_eq!(mcts.sim_workers, Some(2));
        let applied: u64 = mcts.rule_counts.iter().map(|(_, c)| *c).sum();
        assert!(applied > 0);
    }

    #[test]
    fn adversarial_math_case_defeats_the_sweep() {
        let case = make_adversarial_case(Domain::Math);
        let rules = RuleSet::math();
        let baseline = run_baseline(&case, &rules, 2000).unwrap();
        assert_eq!(baseline.stop_reason, StopReason::NodeLimit);
        let mul_zero = baseline
            .rule_counts
            .iter()
            .find(|(n, _)| n == "mul-zero")
            .map(|(_, c)| *c)
            .unwrap();
        assert_eq!(mul_zero, 0, "the sweep must exhaust its budget before the last rule");
        assert!(baseline.final_cost > 1.0);

        let pcfg = PlannerConfig {
            budget: 64,
            sim_workers: 2,
            max_sim_step: 10,
            seed: 1,
            ..PlannerConfig::default()
        };
        let mcts = run_mcts(&case, &rules, 2000, &pcfg, DEFAULT_MAX_EPISODE_LEN).unwrap();
        assert_eq!(mcts.final_cost, 1.0, "one planned application of mul-zero collapses it");
        assert!(mcts.final_cost < baseline.final_cost);
        assert!(mcts.final_cost <= mcts.init_cost);
    }

    #[test]
    fn heatmap_shape_and_total_conservation() {
        let record = |name: &str, counts: Vec<(&str, u64)>| RunRecord {
            case_name: name.into(),
            engine: Engine::Mcts,
            final_cost: 1.0,
            init_cost: 2.0,
            final_expr: "a".into(),
            final_enodes: 4,
            wall_time_s: 0.1,
            rule_counts: counts.into_iter().map(|(n, c)| (n.to_string(), c)).collect(),
            stop_reason: StopReason::Saturated,
            sim_workers: Some(1),
        };
        let records = vec![
            record("case-a", vec![("r1", 3), ("r2", 0)]),
            record("case-b", vec![("r1", 1), ("r2", 2)]),
        ];
        let (csv, totals) = emit_heatmap(&records).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, vec!["case,r1,r2", "case-a,3,0", "case-b,1,2"]);
        assert_eq!(totals["totals"], json!([4, 2]));
        assert_eq!(totals["cases"], json!(2));

        let mismatched = vec![
            record("case-a", vec![("r1", 3), ("r2", 0)]),
            record("case-c", vec![("other", 1)]),
        ];
        assert!(emit_heatmap(&mismatched).is_err());
        let (empty_csv, empty_totals) = emit_heatmap(&[]).unwrap();
        assert_eq!(empty_csv, "case\n");
        assert_eq!(empty_totals["cases"], json!(0));
    }

    #[test]
    fn timing_report_groups_and_ratio() {
        let mk = |engine, workers, t| RunRecord {
            case_name: "c".into(),
            engine,
            final_cost: 1.0,
            init_cost: 1.0,
            final_expr: "a".into(),
            final_enodes: 1,
            wall_time_s: t,
            rule_counts: vec![],
            stop_reason: StopReason::Saturated,
            sim_workers: workers,
        };
        let records = vec![
            mk(Engine::Mcts, Some(1), 4.0),
            mk(Engine::Mcts, Some(1), 4.0),
            mk(Engine::Mcts, Some(8), 1.0),
            mk(Engine::Baseline, None, 0.5),
        ];
        let (text, j) = timing_report(&records);
        assert!(text.contains("speedup with 8 sim workers over 1: 4.00x"));
        assert_eq!(j["speedup"]["8"], json!(4.0));
        assert_eq!(j["groups"].as_array().unwrap().len(), 3);

        let (same_text, same_json) = timing_report(&[mk(Engine::Mcts, Some(1), 2.0), mk(Engine::Mcts, Some(2), 2.0)]);
        assert!(same_text.contains("1.00x"));
        assert_eq!(same_json["speedup"]["2"], json!(1.0));

        let (empty_text, empty_json) = timing_report(&[]);
        assert!(empty_text.contains("no records"));
        assert_eq!(empty_json["empty"], json!(true));
    }

    #[test]
    fn entropy_orders_concentration() {
        let uniform = shannon_entropy([5, 5, 5, 5]);
        let spike = shannon_entropy([20, 0, 0, 0]);
        let skew = shannon_entropy([17, 1, 1, 1]);
        assert!((uniform - 2.0).abs() < 1e-12);
        assert_eq!(spike, 0.0);
        assert!(skew < uniform);
        assert_eq!(shannon_entropy([]), 0.0);
    }

    #[test]
    fn run_record_serde_round_trip() {
        let record = RunRecord {
            case_name: "MATH-5-0".into(),
            engine: Engine::Baseline,
            final_cost: 3.0,
            init_cost: 9.0,
            final_expr: "(+ a b)".into(),
            final_enodes: 123,
            wall_time_s: 0.25,
            rule_counts: vec![("comm-add".into(), 2)],
            stop_reason: StopReason::NodeLimit,
            sim_workers: None,
        };
        let s = serde_json::to_string(&record).unwrap();
        assert!(s.contains("\"wall_time_s\""), "time fields keep a maskable name");
        assert!(!s.contains("sim_workers"), "baseline records omit worker counts");
        let back: RunRecord = serde_json::from_str(&s).unwrap();
        assert_eq!(back, record);
    }
}
