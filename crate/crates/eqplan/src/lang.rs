//! Languages, terms, and the s-expression surface syntax.
//!
//! A language is a finite set of symbols with fixed arities plus a pool of
//! leaves used when generating random terms. Terms are plain trees; sharing
//! only appears once they are loaded into an e-graph.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Error;

/// An operator or leaf symbol. Leaves are symbols of arity 0.
/// Cheap to clone; equality and ordering are by (name, arity).
#[derive(Clone, Debug)]
pub struct Symbol {
    name: Arc<str>,
    arity: usize,
}

impl Symbol {
    pub fn new(name: impl AsRef<str>, arity: usize) -> Symbol {
        Symbol {
            name: Arc::from(name.as_ref()),
            arity,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        self.arity
    }
}

impl PartialEq for Symbol {
    fn eq(&self, other: &Self) -> bool {
        self.arity == other.arity && self.name == other.name
    }
}
impl Eq for Symbol {}

impl std::hash::Hash for Symbol {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.name.hash(state);
        self.arity.hash(state);
    }
}

impl PartialOrd for Symbol {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Symbol {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.name
            .as_ref()
            .cmp(other.name.as_ref())
            .then(self.arity.cmp(&other.arity))
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl Serialize for Symbol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Symbol", 2)?;
        st.serialize_field("name", self.name())?;
        st.serialize_field("arity", &self.arity)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Symbol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            name: String,
            arity: usize,
        }
        let raw = Raw::deserialize(d)?;
        Ok(Symbol::new(raw.name, raw.arity))
    }
}

/// A language: named symbol table plus the leaf pool random generation
/// draws from. Symbol names are unique; every leaf has arity 0.
#[derive(Clone, Debug)]
pub struct LanguageDef {
    name: String,
    symbols: Vec<Symbol>,
    leaf_pool: Vec<Symbol>,
    by_name: HashMap<Arc<str>, usize>,
}

impl LanguageDef {
    pub fn new(
        name: impl Into<String>,
        symbols: Vec<Symbol>,
        leaves: &[&str],
    ) -> Result<LanguageDef, Error> {
        let name = name.into();
        let mut by_name = HashMap::new();
        for (i, sym) in symbols.iter().enumerate() {
            if by_name.insert(Arc::from(sym.name()), i).is_some() {
                return Err(Error::Config(format!(
                    "language '{name}': duplicate symbol '{}'",
                    sym.name()
                )));
            }
        }
        if leaves.is_empty() {
            return Err(Error::Config(format!("language '{name}': empty leaf pool")));
        }
        let mut leaf_pool = Vec::with_capacity(leaves.len());
        for leaf in leaves {
            let sym = match by_name.get(*leaf) {
                Some(&i) => symbols[i].clone(),
                None => return Err(Error::UnknownSymbol((*leaf).to_string())),
            };
            if sym.arity() != 0 {
                return Err(Error::Config(format!(
                    "language '{name}': leaf '{leaf}' has arity {}",
                    sym.arity()
                )));
            }
            leaf_pool.push(sym);
        }
        Ok(LanguageDef {
            name,
            symbols,
            leaf_pool,
            by_name,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn leaf_pool(&self) -> &[Symbol] {
        &self.leaf_pool
    }

    pub fn lookup(&self, name: &str) -> Option<&Symbol> {
        self.by_name.get(name).map(|&i| &self.symbols[i])
    }

    /// Arithmetic over a small fixed alphabet. `<<` is left shift.
    pub fn math() -> LanguageDef {
        let symbols = vec![
            Symbol::new("+", 2),
            Symbol::new("-", 2),
            Symbol::new("*", 2),
            Symbol::new("/", 2),
            Symbol::new("pow", 2),
            Symbol::new("<<", 2),
            Symbol::new("sqrt", 1),
            Symbol::new("ln", 1),
            Symbol::new("a", 0),
            Symbol::new("b", 0),
            Symbol::new("c", 0),
            Symbol::new("x", 0),
            Symbol::new("y", 0),
            Symbol::new("0", 0),
            Symbol::new("1", 0),
            Symbol::new("2", 0),
        ];
        LanguageDef::new("math", symbols, &["a", "b", "c", "x", "y", "0", "1", "2"])
            .expect("builtin math language is valid")
    }

    /// Propositional logic: and, or, not, implies, iff.
    pub fn prop() -> LanguageDef {
        let symbols = vec![
            Symbol::new("&", 2),
            Symbol::new("|", 2),
            Symbol::new("~", 1),
            Symbol::new("->", 2),
            Symbol::new("<->", 2),
            Symbol::new("p", 0),
            Symbol::new("q", 0),
            Symbol::new("r", 0),
            Symbol::new("true", 0),
            Symbol::new("false", 0),
        ];
        LanguageDef::new("prop", symbols, &["p", "q", "r", "true", "false"])
            .expect("builtin prop language is valid")
    }

    pub fn from_json_str(src: &str) -> Result<LanguageDef, Error> {
        let raw: LangFile = serde_json::from_str(src)?;
        let leaves: Vec<&str> = raw.leaves.iter().map(|s| s.as_str()).collect();
        LanguageDef::new(raw.name, raw.symbols, &leaves)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<LanguageDef, Error> {
        LanguageDef::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        let raw = LangFile {
            name: self.name.clone(),
            symbols: self.symbols.clone(),
            leaves: self.leaf_pool.iter().map(|s| s.name().to_string()).collect(),
        };
        serde_json::to_string_pretty(&raw).expect("language serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct LangFile {
    name: String,
    symbols: Vec<Symbol>,
    leaves: Vec<String>,
}

/// A ground term over some language.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Term {
    pub op: Symbol,
    pub children: Vec<Term>,
}

impl Term {
    pub fn leaf(op: Symbol) -> Term {
        debug_assert_eq!(op.arity(), 0);
        Term {
            op,
            children: Vec::new(),
        }
    }

    pub fn new(op: Symbol, children: Vec<Term>) -> Term {
        debug_assert_eq!(op.arity(), children.len());
        Term { op, children }
    }

    pub fn size(&self) -> usize {
        term_size(self)
    }

    pub fn depth(&self) -> usize {
        1 + self
            .children
            .iter()
            .map(Term::depth)
            .max()
            .unwrap_or(0)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.children.is_empty() {
            return f.write_str(self.op.name());
        }
        write!(f, "({}", self.op.name())?;
        for child in &self.children {
            write!(f, " {child}")?;
        }
        f.write_str(")")
    }
}

/// Number of nodes in the tree. Shared subterms count once per occurrence.
pub fn term_size(t: &Term) -> usize {
    1 + t.children.iter().map(term_size).sum::<usize>()
}

/// Canonical s-expression: parenthesized prefix form, children separated by
/// single spaces, leaves bare.
pub fn print_term(t: &Term) -> String {
    t.to_string()
}

/// Parse the canonical s-expression form. Every symbol must exist in the
/// language with the arity implied by the child count; errors carry the
/// byte offset of the offending token.
pub fn parse_term(lang: &LanguageDef, src: &str) -> Result<Term, Error> {
    let tokens = tokenize(src)?;
    let mut pos = 0usize;
    let term = parse_at(lang, &tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::Parse {
            pos: tokens[pos].1,
            msg: format!("trailing input '{}'", tokens[pos].0),
        });
    }
    Ok(term)
}

pub(crate) enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
}

impl fmt::Display for Tok<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Open => f.write_str("("),
            Tok::Close => f.write_str(")"),
            Tok::Atom(s) => f.write_str(s),
        }
    }
}

pub(crate) fn tokenize(src: &str) -> Result<Vec<(Tok<'_>, usize)>, Error> {
    let mut out = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                out.push((Tok::Open, i));
                i += 1;
            }
            b')' => {
                out.push((Tok::Close, i));
                i += 1;
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len()
                    && !bytes[i].is_ascii_whitespace()
                    && bytes[i] != b'('
                    && bytes[i] != b')'
                {
                    i += 1;
                }
                out.push((Tok::Atom(&src[start..i]), start));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Parse {
            pos: 0,
            msg: "empty input".into(),
        });
    }
    Ok(out)
}

fn parse_at(lang: &LanguageDef, tokens: &[(Tok<'_>, usize)], pos: &mut usize) -> Result<Term, Error> {
    let Some((tok, at)) = tokens.get(*pos) else {
        return Err(Error::Parse {
            pos: tokens.last().map(|t| t.1 + 1).unwrap_or(0),
            msg: "unexpected end of input".into(),
        });
    };
    match tok {
        Tok::Atom(name) => {
            *pos += 1;
            let sym = resolve(lang, name, 0, *at)?;
            Ok(Term::leaf(sym))
        }
        Tok::Open => {
            *pos += 1;
            let Some((Tok::Atom(name), op_at)) = tokens.get(*pos) else {
                return Err(Error::Parse {
                    pos: *at,
                    msg: "expected an operator after '('".into(),
                });
            };
            let op_at = *op_at;
            *pos += 1;
            let mut children = Vec::new();
            loop {
                match tokens.get(*pos) {
                    Some((Tok::Close, _)) => {
                        *pos += 1;
                        break;
                    }
                    Some(_) => children.push(parse_at(lang, tokens, pos)?),
                    None => {
                        return Err(Error::Parse {
                            pos: *at,
                            msg: "unclosed '('".into(),
                        })
                    }
                }
            }
            let sym = resolve(lang, name, children.len(), op_at)?;
            Ok(Term::new(sym, children))
        }
        Tok::Close => Err(Error::Parse {
            pos: *at,
            msg: "unexpected ')'".into(),
        }),
    }
}

fn resolve(lang: &LanguageDef, name: &str, arity: usize, _at: usize) -> Result<Symbol, Error> {
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

/// Deterministic random term: a pure function of (language, max_depth, seed).
/// The root draws uniformly over the operators (so a generated case is never
/// a bare leaf when max_depth allows more); interior positions draw uniformly
/// over the full symbol table, letting leaves terminate branches early; at
/// the depth limit only the leaf pool is eligible. The stream is ChaCha8
/// keyed by the seed; child subtrees are generated left to right.
pub fn random_term(lang: &LanguageDef, max_depth: usize, seed: u64) -> Term {
    assert!(max_depth >= 1, "max_depth must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if max_depth == 1 {
        return gen_term(lang, 1, &mut rng);
    }
    let ops: Vec<&Symbol> = lang.symbols().iter().filter(|s| s.arity() > 0).collect();
    if ops.is_empty() {
        return gen_term(lang, 1, &mut rng);
    }
    let op = ops[rng.gen_range(0..ops.len())].clone();
    let children = (0..op.arity())
        .map(|_| gen_term(lang, max_depth - 1, &mut rng))
        .collect();
    Term { op, children }
}

fn gen_term(lang: &LanguageDef, depth_left: usize, rng: &mut ChaCha8Rng) -> Term {
    if depth_left <= 1 {
        let pool = lang.leaf_pool();
        return Term::leaf(pool[rng.gen_range(0..pool.len())].clone());
    }
    let symbols = lang.symbols();
    let sym = symbols[rng.gen_range(0..symbols.len())].clone();
    let children = (0..sym.arity())
        .map(|_| gen_term(lang, depth_left - 1, rng))
        .collect();
    Term { op: sym, children }
}
