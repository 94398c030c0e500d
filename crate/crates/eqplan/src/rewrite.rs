//! Rewrite rules: patterns with variables, rule files, e-matching, and
//! instantiation into an e-graph.
//!
//! A rule set's file order is its action numbering; everything downstream
//! (the environment, the planner, the heatmaps) refers to rules by that
//! index. Bidirectional identities are written as two lines.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::egraph::{EClassId, EGraph};
use crate::lang::{tokenize, LanguageDef, Symbol, Term, Tok};
use crate::Error;

/// A term with holes. `?x` in the surface syntax.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Pattern {
    Var(String),
    Node { op: Symbol, children: Vec<Pattern> },
}

impl Pattern {
    /// Variable names, in first-occurrence order.
    pub fn vars(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut Vec<String>) {
        match self {
            Pattern::Var(v) => {
                if !out.iter().any(|x| x == v) {
                    out.push(v.clone());
                }
            }
            Pattern::Node { children, .. } => {
                for c in children {
                    c.collect_vars(out);
                }
            }
        }
    }

    pub fn from_term(t: &Term) -> Pattern {
        Pattern::Node {
            op: t.op.clone(),
            children: t.children.iter().map(Pattern::from_term).collect(),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Var(v) => write!(f, "?{v}"),
            Pattern::Node { op, children } => {
                if children.is_empty() {
                    return f.write_str(op.name());
                }
                write!(f, "({}", op.name())?;
                for c in children {
                    write!(f, " {c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Parse a pattern: the term syntax plus `?name` variables.
pub fn parse_pattern(lang: &LanguageDef, src: &str) -> Result<Pattern, Error> {
    let tokens = tokenize(src)?;
    let mut pos = 0usize;
    let p = parse_pat_at(lang, &tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::Parse {
            pos: tokens[pos].1,
            msg: format!("trailing input '{}'", tokens[pos].0),
        });
    }
    Ok(p)
}

fn parse_pat_at(
    lang: &LanguageDef,
    tokens: &[(Tok<'_>, usize)],
    pos: &mut usize,
) -> Result<Pattern, Error> {
    let Some((tok, at)) = tokens.get(*pos) else {
        return Err(Error::Parse {
            pos: tokens.last().map(|t| t.1 + 1).unwrap_or(0),
            msg: "unexpected end of pattern".into(),
        });
    };
    match tok {
        Tok::Atom(name) if name.starts_with('?') => {
            *pos += 1;
            let var = &name[1..];
            if var.is_empty() {
                return Err(Error::Parse {
                    pos: *at,
                    msg: "'?' needs a variable name".into(),
                });
            }
            Ok(Pattern::Var(var.to_string()))
        }
        Tok::Atom(name) => {
            *pos += 1;
            let sym = lookup_arity(lang, name, 0)?;
            Ok(Pattern::Node {
                op: sym,
                children: Vec::new(),
            })
        }
        Tok::Open => {
            *pos += 1;
            let Some((Tok::Atom(name), _)) = tokens.get(*pos) else {
                return Err(Error::Parse {
                    pos: *at,
                    msg: "expected an operator after '('".into(),
                });
            };
            if name.starts_with('?') {
                return Err(Error::Parse {
                    pos: *at,
                    msg: "a variable cannot head an application".into(),
                });
            }
            let name = *name;
            *pos += 1;
            let mut children = Vec::new();
            loop {
                match tokens.get(*pos) {
                    Some((Tok::Close, _)) => {
                        *pos += 1;
                        break;
                    }
                    Some(_) => children.push(parse_pat_at(lang, tokens, pos)?),
                    None => {
                        return Err(Error::Parse {
                            pos: *at,
                            msg: "unclosed '('".into(),
                        })
                    }
                }
            }
            let sym = lookup_arity(lang, name, children.len())?;
            Ok(Pattern::Node { op: sym, children })
        }
        Tok::Close => Err(Error::Parse {
            pos: *at,
            msg: "unexpected ')'".into(),
        }),
    }
}

fn lookup_arity(lang: &LanguageDef, name: &str, arity: usize) -> Result<Symbol, Error> {
    let Some(sym) = lang.lookup(name) else {
        return Err(Error::UnknownSymbol(name.to_string()));
    };
    if sym.arity() != arity {
        return Err(Error::ArityMismatch {
            op: name.to_string(),
            expected: sym.arity(),
            got: arity,
        });
    }
    Ok(sym.clone())
}

/// Variable bindings produced by matching: name to e-class id, ordered by
/// name so substitutions compare and print deterministically.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Substitution(BTreeMap<String, EClassId>);

impl Substitution {
    pub fn get(&self, var: &str) -> Option<EClassId> {
        self.0.get(var).copied()
    }

    pub fn insert(&mut self, var: impl Into<String>, id: EClassId) {
        self.0.insert(var.into(), id);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, EClassId)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Optional guard on a rule: receives the graph, the matched class, and the
/// bindings; the match is dropped when it returns false. Used for conditions
/// decidable on constant-foldable classes.
pub type Condition = dyn Fn(&EGraph, EClassId, &Substitution) -> bool + Send + Sync;

/// A named oriented rewrite. Every variable on the right must be bound on
/// the left.
#[derive(Clone)]
pub struct RewriteRule {
    name: String,
    lhs: Pattern,
    rhs: Pattern,
    condition: Option<Arc<Condition>>,
}

impl RewriteRule {
    pub fn new(name: impl Into<String>, lhs: Pattern, rhs: Pattern) -> Result<RewriteRule, Error> {
        let name = name.into();
        let lhs_vars = lhs.vars();
        for v in rhs.vars() {
            if !lhs_vars.contains(&v) {
                return Err(Error::FreeVariable { rule: name, var: v });
            }
        }
        Ok(RewriteRule {
            name,
            lhs,
            rhs,
            condition: None,
        })
    }

    pub fn with_condition(
        mut self,
        cond: impl Fn(&EGraph, EClassId, &Substitution) -> bool + Send + Sync + 'static,
    ) -> RewriteRule {
        self.condition = Some(Arc::new(cond));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lhs(&self) -> &Pattern {
        &self.lhs
    }

    pub fn rhs(&self) -> &Pattern {
        &self.rhs
    }

    pub fn condition(&self) -> Option<&Condition> {
        self.condition.as_deref()
    }
}

impl fmt::Debug for RewriteRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} => {}", self.name, self.lhs, self.rhs)?;
        if self.condition.is_some() {
            f.write_str(" [conditional]")?;
        }
        Ok(())
    }
}

/// Parse one `name: lhs => rhs` line.
pub fn parse_rule(lang: &LanguageDef, line: &str) -> Result<RewriteRule, Error> {
    let Some((name, body)) = line.split_once(':') else {
        return Err(Error::RuleParse {
            line: 0,
            msg: format!("missing ':' in '{line}'"),
        });
    };
    let name = name.trim();
    if name.is_empty() {
        return Err(Error::RuleParse {
            line: 0,
            msg: "empty rule name".into(),
        });
    }
    let Some((lhs_src, rhs_src)) = body.split_once("=>") else {
        return Err(Error::RuleParse {
            line: 0,
            msg: format!("missing '=>' in rule '{name}'"),
        });
    };
    let lhs = parse_pattern(lang, lhs_src.trim())?;
    let rhs = parse_pattern(lang, rhs_src.trim())?;
    RewriteRule::new(name, lhs, rhs)
}

/// An ordered rule collection. The position of a rule is its action id.
#[derive(Clone, Debug, Default)]
pub struct RuleSet {
    rules: Vec<RewriteRule>,
}

impl RuleSet {
    pub fn new(rules: Vec<RewriteRule>) -> Result<RuleSet, Error> {
        let mut seen = std::collections::HashSet::new();
        for r in &rules {
            if !seen.insert(r.name().to_string()) {
                return Err(Error::Config(format!("duplicate rule name '{}'", r.name())));
            }
        }
        Ok(RuleSet { rules })
    }

    /// Parse a rule file: one rule per line, `#` comments and blank lines
    /// ignored. Line order is action order.
    pub fn from_str(lang: &LanguageDef, src: &str) -> Result<RuleSet, Error> {
        let mut rules = Vec::new();
        for (i, raw) in src.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rule = parse_rule(lang, line).map_err(|e| match e {
                Error::RuleParse { msg, .. } => Error::RuleParse { line: i + 1, msg },
                other => Error::RuleParse {
                    line: i + 1,
                    msg: other.to_string(),
                },
            })?;
            rules.push(rule);
        }
        if rules.is_empty() {
            return Err(Error::Config("rule file has no rules".into()));
        }
        RuleSet::new(rules)
    }

    pub fn from_file(lang: &LanguageDef, path: &std::path::Path) -> Result<RuleSet, Error> {
        RuleSet::from_str(lang, &std::fs::read_to_string(path)?)
    }

    /// The arithmetic rules shipped in rules/math.rules.
    pub fn math() -> RuleSet {
        RuleSet::from_str(&LanguageDef::math(), include_str!("../rules/math.rules"))
            .expect("shipped math rules are valid")
    }

    /// The propositional rules shipped in rules/prop.rules.
    pub fn prop() -> RuleSet {
        RuleSet::from_str(&LanguageDef::prop(), include_str!("../rules/prop.rules"))
            .expect("shipped prop rules are valid")
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, action: u32) -> Option<&RewriteRule> {
        self.rules.get(action as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RewriteRule> {
        self.rules.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.rules.iter().map(|r| r.name().to_string()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<u32> {
        self.rules
            .iter()
            .position(|r| r.name() == name)
            .map(|i| i as u32)
    }
}

/// Find every way the pattern matches any class. Matching is syntactic and
/// top-down: a node pattern matches a class if some e-node in it has the
/// same op and each subpattern matches the corresponding child class.
/// Output is sorted by canonical class id, then by bindings, and deduped,
/// so equal graphs give byte-equal match lists.
pub fn match_pattern(g: &EGraph, p: &Pattern) -> Vec<(EClassId, Substitution)> {
    let mut out = Vec::new();
    for class in g.classes() {
        let mut partial = Vec::new();
        match_class(g, p, class.id, Substitution::default(), &mut partial);
        for subst in partial {
            out.push((class.id, subst));
        }
    }
    out.sort();
    out.dedup();
    out
}

fn match_class(
    g: &EGraph,
    p: &Pattern,
    class: EClassId,
    subst: Substitution,
    out: &mut Vec<Substitution>,
) {
    let class = g.find(class);
    match p {
        Pattern::Var(v) => {
            if let Some(bound) = subst.get(v) {
                if g.find(bound) == class {
                    out.push(subst);
                }
            } else {
                let mut s = subst;
                s.insert(v.clone(), class);
                out.push(s);
            }
        }
        Pattern::Node { op, children } => {
            for node in &g.class(class).nodes {
                if node.op != *op {
                    continue;
                }
                let mut partials = vec![subst.clone()];
                for (sub_p, child) in children.iter().zip(&node.children) {
                    let mut next = Vec::new();
                    for s in partials {
                        match_class(g, sub_p, *child, s, &mut next);
                    }
                    if next.is_empty() {
                        partials = next;
                        break;
                    }
                    partials = next;
                }
                out.extend(partials);
            }
        }
    }
}

/// Build the pattern in the graph under the given bindings and return its
/// class. Only adds hashconsed e-nodes; never unions, removes, or mutates
/// existing structure, so repeated instantiation is free after the first.
pub fn instantiate(g: &mut EGraph, p: &Pattern, subst: &Substitution) -> Result<EClassId, Error> {
    match p {
        Pattern::Var(v) => {
            let id = subst.get(v).ok_or_else(|| Error::UnboundVar(v.clone()))?;
            if !g.contains_id(id) {
                return Err(Error::UnknownClass(id.raw()));
            }
            Ok(g.find(id))
        }
        Pattern::Node { op, children } => {
            let mut ids = Vec::with_capacity(children.len());
            for c in children {
                ids.push(instantiate(g, c, subst)?);
            }
            Ok(g.add(op.clone(), ids))
        }
    }
}
