//! Context-free grammar describing every valid workflow, plus the pruning
//! operations an interaction applies to it.
//!
//! The textual format is one production per line:
//!
//! ```text
//! workflow ::= preproc workflow | classifier
//! classifier ::= kNN <knn_hp> | gaussianNB <gnb_hp>
//! <knn_hp> ::= knn::n_neighbors knn::weights
//! knn::n_neighbors ::= int(1, 30)
//! knn::weights ::= cat(uniform, distance)
//! ```
//!
//! A line starting with `|` continues the previous production and `#` starts
//! a comment. A word is a non-terminal when it is defined on a left-hand
//! side, is wrapped in angle brackets, or contains `::`; every other word is
//! an algorithm terminal. The first production defines the root. Algorithm
//! terminals derived from the `classifier` non-terminal are classifiers, all
//! others are preprocessors. A non-terminal written right after an algorithm
//! terminal is that algorithm's hyperparameter block.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Name of the non-terminal whose alternatives are the classifiers.
pub const CLASSIFIER_CHOICE: &str = "classifier";

const DEFAULT_GRAMMAR: &str = include_str!("../grammars/default.bnf");

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Terminal(String),
    NonTerminal(String),
}

impl Symbol {
    pub fn name(&self) -> &str {
        match self {
            Symbol::Terminal(s) | Symbol::NonTerminal(s) => s,
        }
    }
}

/// Right-hand side of a production.
#[derive(Clone, Debug, PartialEq)]
pub enum Production {
    /// Structural choice between symbol sequences, in file order.
    Alternatives(Vec<Vec<Symbol>>),
    /// Categorical hyperparameter values (removable).
    Categorical(Vec<String>),
    /// Inclusive integer range.
    Integer { lo: i64, hi: i64 },
    /// Closed real range.
    Float { lo: f64, hi: f64 },
}

impl Production {
    pub fn is_value_rule(&self) -> bool {
        !matches!(self, Production::Alternatives(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlgorithmKind {
    Preprocessor,
    Classifier,
}

/// An algorithm terminal together with where it lives in the grammar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlgorithmEntry {
    pub id: String,
    pub kind: AlgorithmKind,
    /// Non-terminal whose alternative derives this algorithm.
    pub choice: String,
    /// Hyperparameter block non-terminal, if any.
    pub block: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TerminalKind {
    AlgorithmName,
    CategoricalValue { hyperparameter: String },
    NumericRange { lo: f64, hi: f64, integer: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerminalSymbol {
    pub id: String,
    pub kind: TerminalKind,
}

/// A categorical hyperparameter value, rendered `algorithm::hyperparameter=value`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HyperparamValueId {
    pub algorithm: String,
    pub hyperparam: String,
    pub value: String,
}

impl HyperparamValueId {
    pub fn new(
        algorithm: impl Into<String>,
        hyperparam: impl Into<String>,
        value: impl Into<String>,
    ) -> Self {
        Self {
            algorithm: algorithm.into(),
            hyperparam: hyperparam.into(),
            value: value.into(),
        }
    }
}

impl fmt::Display for HyperparamValueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}={}", self.algorithm, self.hyperparam, self.value)
    }
}

impl FromStr for HyperparamValueId {
    type Err = GrammarError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GrammarError::BadValueId(s.to_string());
        let (lhs, value) = s.split_once('=').ok_or_else(bad)?;
        let (algorithm, hyperparam) = lhs.rsplit_once("::").ok_or_else(bad)?;
        if algorithm.is_empty() || hyperparam.is_empty() || value.is_empty() {
            return Err(bad());
        }
        Ok(Self::new(algorithm.trim(), hyperparam.trim(), value.trim()))
    }
}

impl Serialize for HyperparamValueId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HyperparamValueId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A broken grammar invariant. Violations are data: `validate` collects all
/// of them instead of stopping at the first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "violation", content = "symbol", rename_all = "snake_case")]
pub enum Violation {
    UndefinedRoot(String),
    UndefinedSymbol(String),
    Unreachable(String),
    Unproductive(String),
    NoClassifier,
    EmptyHyperparameter(String),
    InvalidRange(String),
    DuplicateAlgorithm(String),
    UnknownAlgorithm(String),
    UnknownValue(String),
    LastClassifier(String),
    LastValue(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UndefinedRoot(s) => write!(f, "root `{s}` has no production"),
            Violation::UndefinedSymbol(s) => write!(f, "undefined symbol `{s}`"),
            Violation::Unreachable(s) => write!(f, "`{s}` is not reachable from the root"),
            Violation::Unproductive(s) => write!(f, "`{s}` derives no terminal string"),
            Violation::NoClassifier => write!(f, "no classifier"),
            Violation::EmptyHyperparameter(s) => write!(f, "hyperparameter `{s}` has no values"),
            Violation::InvalidRange(s) => write!(f, "range of `{s}` has lo > hi"),
            Violation::DuplicateAlgorithm(s) => write!(f, "algorithm `{s}` is defined twice"),
            Violation::UnknownAlgorithm(s) => write!(f, "unknown algorithm `{s}`"),
            Violation::UnknownValue(s) => write!(f, "unknown hyperparameter value `{s}`"),
            Violation::LastClassifier(s) => write!(f, "`{s}` is the last classifier"),
            Violation::LastValue(s) => write!(f, "`{s}` is the last value of its hyperparameter"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrammarError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("undefined symbol `{name}` at line {line}, column {column}")]
    UndefinedSymbol {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("non-terminal `{name}` defined twice (line {line})")]
    DuplicateDefinition { name: String, line: usize },
    #[error("invalid grammar: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("unknown hyperparameter value `{0}`")]
    UnknownValue(String),
    #[error("cannot remove `{0}`: it is the last classifier")]
    LastClassifier(String),
    #[error("cannot remove `{0}`: it is the last value of its hyperparameter")]
    LastValue(String),
    #[error("malformed hyperparameter value id `{0}` (expected alg::hp=value)")]
    BadValueId(String),
}

impl GrammarError {
    /// The violation this error represents, for removal errors.
    pub fn as_violation(&self) -> Option<Violation> {
        match self {
            GrammarError::UnknownAlgorithm(s) => Some(Violation::UnknownAlgorithm(s.clone())),
            GrammarError::UnknownValue(s) => Some(Violation::UnknownValue(s.clone())),
            GrammarError::LastClassifier(s) => Some(Violation::LastClassifier(s.clone())),
            GrammarError::LastValue(s) => Some(Violation::LastValue(s.clone())),
            _ => None,
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Short name of a hyperparameter non-terminal (`knn::weights` -> `weights`).
pub fn short_hyperparam_name(non_terminal: &str) -> &str {
    non_terminal
        .rsplit_once("::")
        .map(|(_, s)| s)
        .unwrap_or(non_terminal)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    root: String,
    rules: IndexMap<String, Production>,
}

impl Grammar {
    /// Builds a grammar from already-parsed rules; the first rule is the root.
    pub fn from_rules(rules: IndexMap<String, Production>) -> Self {
        let root = rules.keys().next().cloned().unwrap_or_default();
        Self { root, rules }
    }

    /// The shipped ten-preprocessor, ten-classifier grammar.
    pub fn default_grammar() -> Self {
        parse_grammar(DEFAULT_GRAMMAR).expect("shipped grammar is valid")
    }

    pub fn default_grammar_text() -> &'static str {
        DEFAULT_GRAMMAR
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn production(&self, non_terminal: &str) -> Option<&Production> {
        self.rules.get(non_terminal)
    }

    pub fn rules(&self) -> impl Iterator<Item = (&str, &Production)> {
        self.rules.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn non_terminals(&self) -> BTreeSet<String> {
        self.rules.keys().cloned().collect()
    }

    /// Every terminal: algorithm names, categorical values and numeric ranges.
    pub fn terminals(&self) -> Vec<TerminalSymbol> {
        let mut out = Vec::new();
        for (nt, prod) in &self.rules {
            match prod {
                Production::Alternatives(alts) => {
                    for sym in alts.iter().flatten() {
                        if let Symbol::Terminal(t) = sym {
                            out.push(TerminalSymbol {
                                id: t.clone(),
                                kind: TerminalKind::AlgorithmName,
                            });
                        }
                    }
                }
                Production::Categorical(values) => {
                    for v in values {
                        out.push(TerminalSymbol {
                            id: v.clone(),
                            kind: TerminalKind::CategoricalValue {
                                hyperparameter: nt.clone(),
                            },
                        });
                    }
                }
                Production::Integer { lo, hi } => out.push(TerminalSymbol {
                    id: format!("int({lo}, {hi})"),
                    kind: TerminalKind::NumericRange {
                        lo: *lo as f64,
                        hi: *hi as f64,
                        integer: true,
                    },
                }),
                Production::Float { lo, hi } => out.push(TerminalSymbol {
                    id: format!("float({lo:?}, {hi:?})"),
                    kind: TerminalKind::NumericRange {
                        lo: *lo,
                        hi: *hi,
                        integer: false,
                    },
                }),
            }
        }
        out
    }

    /// Algorithm terminals in grammar order.
    pub fn algorithms(&self) -> Vec<AlgorithmEntry> {
        let mut out = Vec::new();
        for (nt, prod) in &self.rules {
            let Production::Alternatives(alts) = prod else {
                continue;
            };
            for alt in alts {
                for (i, sym) in alt.iter().enumerate() {
                    if let Symbol::Terminal(t) = sym {
                        let block = match alt.get(i + 1) {
                            Some(Symbol::NonTerminal(b)) => Some(b.clone()),
                            _ => None,
                        };
                        out.push(AlgorithmEntry {
                            id: t.clone(),
                            kind: if nt == CLASSIFIER_CHOICE {
                                AlgorithmKind::Classifier
                            } else {
                                AlgorithmKind::Preprocessor
                            },
                            choice: nt.clone(),
                            block,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn algorithm(&self, id: &str) -> Option<AlgorithmEntry> {
        self.algorithms().into_iter().find(|a| a.id == id)
    }

    pub fn classifiers(&self) -> Vec<String> {
        self.algorithms()
            .into_iter()
            .filter(|a| a.kind == AlgorithmKind::Classifier)
            .map(|a| a.id)
            .collect()
    }

    /// Hyperparameter non-terminals (value rules) configured by an algorithm's block.
    pub fn hyperparameters(&self, algorithm: &str) -> Vec<String> {
        let Some(entry) = self.algorithm(algorithm) else {
            return Vec::new();
        };
        let Some(block) = entry.block else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        self.collect_value_rules(&block, &mut out, &mut seen);
        out
    }

    fn collect_value_rules(&self, nt: &str, out: &mut Vec<String>, seen: &mut HashSet<String>) {
        if !seen.insert(nt.to_string()) {
            return;
        }
        match self.rules.get(nt) {
            Some(Production::Alternatives(alts)) => {
                for sym in alts.iter().flatten() {
                    if let Symbol::NonTerminal(child) = sym {
                        self.collect_value_rules(child, out, seen);
                    }
                }
            }
            Some(_) => out.push(nt.to_string()),
            None => {}
        }
    }

    /// Resolves `(algorithm-or-prefix, hyperparameter)` to the owning
    /// algorithm id and the hyperparameter non-terminal. Accepts both
    /// `decisionTree::criterion` and the grammar's own `dt::criterion`.
    pub fn resolve_hyperparameter(&self, algorithm: &str, hyperparam: &str) -> Option<(String, String)> {
        if self.algorithm(algorithm).is_some() {
            return self
                .hyperparameters(algorithm)
                .into_iter()
                .find(|nt| short_hyperparam_name(nt) == hyperparam || nt == hyperparam)
                .map(|nt| (algorithm.to_string(), nt));
        }
        let nt = format!("{algorithm}::{hyperparam}");
        if !self.rules.get(&nt).is_some_and(Production::is_value_rule) {
            return None;
        }
        self.algorithms()
            .into_iter()
            .find(|a| self.hyperparameters(&a.id).contains(&nt))
            .map(|a| (a.id, nt))
    }

    /// Normalizes a value id to use the owning algorithm's id.
    pub fn canonical_value_id(&self, v: &HyperparamValueId) -> Option<HyperparamValueId> {
        let (alg, nt) = self.resolve_hyperparameter(&v.algorithm, &v.hyperparam)?;
        Some(HyperparamValueId::new(alg, short_hyperparam_name(&nt), v.value.clone()))
    }

    /// Categorical values of a hyperparameter, when it is categorical.
    pub fn categorical_values(&self, algorithm: &str, hyperparam: &str) -> Option<&[String]> {
        let (_, nt) = self.resolve_hyperparameter(algorithm, hyperparam)?;
        match self.rules.get(&nt) {
            Some(Production::Categorical(v)) => Some(v),
            _ => None,
        }
    }

    /// Minimum number of derivations needed to fully expand each
    /// non-terminal. Every non-terminal expansion counts one derivation,
    /// including the selection of a hyperparameter value.
    pub fn min_derivations(&self) -> HashMap<String, usize> {
        self.min_derivations_with(false)
    }

    /// `empty_ok` treats empty categoricals as expandable, so that
    /// productivity checks blame only the empty rule itself.
    fn min_derivations_with(&self, empty_ok: bool) -> HashMap<String, usize> {
        let mut cost: HashMap<String, usize> = HashMap::new();
        loop {
            let mut changed = false;
            for (nt, prod) in &self.rules {
                let c = match prod {
                    Production::Alternatives(alts) => alts
                        .iter()
                        .filter_map(|alt| self.alternative_cost(alt, &cost))
                        .min()
                        .map(|c| c + 1),
                    Production::Categorical(v) if v.is_empty() && !empty_ok => None,
                    _ => Some(1),
                };
                if let Some(c) = c {
                    if cost.get(nt).is_none_or(|old| c < *old) {
                        cost.insert(nt.clone(), c);
                        changed = true;
                    }
                }
            }
            if !changed {
                return cost;
            }
        }
    }

    /// Derivations needed by the non-terminals of one alternative, or None
    /// when one of them is unproductive.
    pub fn alternative_cost(&self, alt: &[Symbol], cost: &HashMap<String, usize>) -> Option<usize> {
        alt.iter()
            .map(|s| match s {
                Symbol::Terminal(_) => Some(0),
                Symbol::NonTerminal(n) => cost.get(n).copied(),
            })
            .sum()
    }

    /// Every violated invariant; empty iff the grammar is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !self.rules.contains_key(&self.root) {
            out.push(Violation::UndefinedRoot(self.root.clone()));
        }
        let mut undefined = BTreeSet::new();
        for prod in self.rules.values() {
            if let Production::Alternatives(alts) = prod {
                for sym in alts.iter().flatten() {
                    if let Symbol::NonTerminal(n) = sym {
                        if !self.rules.contains_key(n) {
                            undefined.insert(n.clone());
                        }
                    }
                }
            }
        }
        out.extend(undefined.into_iter().map(Violation::UndefinedSymbol));

        let reachable = self.reachable();
        for nt in self.rules.keys() {
            if !reachable.contains(nt) {
                out.push(Violation::Unreachable(nt.clone()));
            }
        }
        let cost = self.min_derivations_with(true);
        for (nt, prod) in &self.rules {
            match prod {
                Production::Categorical(v) if v.is_empty() => {
                    out.push(Violation::EmptyHyperparameter(nt.clone()))
                }
                Production::Integer { lo, hi } if lo > hi => {
                    out.push(Violation::InvalidRange(nt.clone()))
                }
                Production::Float { lo, hi } if lo.is_nan() || hi.is_nan() || lo > hi => {
                    out.push(Violation::InvalidRange(nt.clone()))
                }
                Production::Alternatives(_) if !cost.contains_key(nt) => {
                    out.push(Violation::Unproductive(nt.clone()))
                }
                _ => {}
            }
        }
        match self.rules.get(CLASSIFIER_CHOICE) {
            Some(Production::Alternatives(alts)) if alts.iter().flatten().any(|s| matches!(s, Symbol::Terminal(_))) => {}
            _ => out.push(Violation::NoClassifier),
        }
        let mut seen = HashSet::new();
        for a in self.algorithms() {
            if !seen.insert(a.id.clone()) {
                out.push(Violation::DuplicateAlgorithm(a.id));
            }
        }
        out
    }

    fn reachable(&self) -> HashSet<String> {
        let mut seen = HashSet::new();
        let mut queue = VecDeque::from([self.root.clone()]);
        while let Some(nt) = queue.pop_front() {
            if !seen.insert(nt.clone()) {
                continue;
            }
            if let Some(Production::Alternatives(alts)) = self.rules.get(&nt) {
                for sym in alts.iter().flatten() {
                    if let Symbol::NonTerminal(n) = sym {
                        if !seen.contains(n) {
                            queue.push_back(n.clone());
                        }
                    }
                }
            }
        }
        seen
    }

    /// Removes an algorithm, its hyperparameter block and all symbols only
    /// it used. The receiver is left untouched.
    pub fn remove_algorithm(&self, id: &str) -> Result<Grammar, GrammarError> {
        let entry = self
            .algorithm(id)
            .ok_or_else(|| GrammarError::UnknownAlgorithm(id.to_string()))?;
        if entry.kind == AlgorithmKind::Classifier && self.classifiers().len() == 1 {
            return Err(GrammarError::LastClassifier(id.to_string()));
        }
        let mut rules = self.rules.clone();
        if let Some(Production::Alternatives(alts)) = rules.get_mut(&entry.choice) {
            alts.retain(|alt| !alt.iter().any(|s| matches!(s, Symbol::Terminal(t) if t == id)));
        }
        let mut g = Grammar {
            root: self.root.clone(),
            rules,
        };
        g.collect_garbage();
        let violations = g.validate();
        if violations.is_empty() {
            Ok(g)
        } else {
            Err(GrammarError::Invalid(violations))
        }
    }

    /// Removes one categorical value from its hyperparameter.
    pub fn remove_hyperparameter_value(&self, v: &HyperparamValueId) -> Result<Grammar, GrammarError> {
        let unknown = || GrammarError::UnknownValue(v.to_string());
        let (_, nt) = self
            .resolve_hyperparameter(&v.algorithm, &v.hyperparam)
            .ok_or_else(unknown)?;
        let Some(Production::Categorical(values)) = self.rules.get(&nt) else {
            return Err(unknown());
        };
        if !values.contains(&v.value) {
            return Err(unknown());
        }
        if values.len() == 1 {
            return Err(GrammarError::LastValue(v.to_string()));
        }
        let mut rules = self.rules.clone();
        if let Some(Production::Categorical(values)) = rules.get_mut(&nt) {
            values.retain(|x| x != &v.value);
        }
        Ok(Grammar {
            root: self.root.clone(),
            rules,
        })
    }

    /// Applies a batch of removals atomically: algorithms first, then values.
    /// Either every removal succeeds or the violations are returned.
    pub fn apply_removals(
        &self,
        algorithms: &[String],
        values: &[HyperparamValueId],
    ) -> Result<Grammar, Vec<Violation>> {
        let mut g = self.clone();
        let mut violations = Vec::new();
        for a in algorithms {
            match g.remove_algorithm(a) {
                Ok(next) => g = next,
                Err(GrammarError::Invalid(v)) => violations.extend(v),
                Err(e) => violations.extend(e.as_violation()),
            }
        }
        for v in values {
            match g.remove_hyperparameter_value(v) {
                Ok(next) => g = next,
                Err(e) => violations.extend(e.as_violation()),
            }
        }
        if violations.is_empty() {
            Ok(g)
        } else {
            Err(violations)
        }
    }

    /// Symbols whose removal keeps the grammar valid.
    pub fn removable_symbols(&self) -> (BTreeSet<String>, BTreeSet<HyperparamValueId>) {
        let algorithms = self.algorithms();
        let n_classifiers = algorithms
            .iter()
            .filter(|a| a.kind == AlgorithmKind::Classifier)
            .count();
        let mut algs = BTreeSet::new();
        let mut values = BTreeSet::new();
        for a in &algorithms {
            if a.kind == AlgorithmKind::Preprocessor || n_classifiers > 1 {
                algs.insert(a.id.clone());
            }
            for nt in self.hyperparameters(&a.id) {
                if let Some(Production::Categorical(vals)) = self.rules.get(&nt) {
                    if vals.len() > 1 {
                        for v in vals {
                            values.insert(HyperparamValueId::new(
                                a.id.clone(),
                                short_hyperparam_name(&nt),
                                v.clone(),
                            ));
                        }
                    }
                }
            }
        }
        (algs, values)
    }

    /// Drops alternatives that reference emptied non-terminals, then
    /// everything unreachable from the root.
    fn collect_garbage(&mut self) {
        loop {
            let empty: HashSet<String> = self
                .rules
                .iter()
                .filter(|(_, p)| matches!(p, Production::Alternatives(a) if a.is_empty()))
                .map(|(k, _)| k.clone())
                .collect();
            if empty.is_empty() {
                break;
            }
            self.rules.retain(|k, _| !empty.contains(k));
            for prod in self.rules.values_mut() {
                if let Production::Alternatives(alts) = prod {
                    alts.retain(|alt| {
                        !alt.iter()
                            .any(|s| matches!(s, Symbol::NonTerminal(n) if empty.contains(n)))
                    });
                }
            }
        }
        let reachable = self.reachable();
        self.rules.retain(|k, _| reachable.contains(k));
    }

    /// Canonical text rendering; `parse_grammar` reads it back unchanged.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (nt, prod) in &self.rules {
            out.push_str(nt);
            out.push_str(" ::= ");
            match prod {
                Production::Alternatives(alts) => {
                    let rendered: Vec<String> = alts
                        .iter()
                        .map(|alt| alt.iter().map(Symbol::name).collect::<Vec<_>>().join(" "))
                        .collect();
                    out.push_str(&rendered.join(" | "));
                }
                Production::Categorical(v) => {
                    out.push_str(&format!("cat({})", v.join(", ")));
                }
                Production::Integer { lo, hi } => out.push_str(&format!("int({lo}, {hi})")),
                Production::Float { lo, hi } => out.push_str(&format!("float({lo:?}, {hi:?})")),
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for Grammar {
    type Err = GrammarError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_grammar(s)
    }
}

#[derive(Debug, Clone)]
enum Token {
    Bar,
    Word(String),
    Call { func: String, args: Vec<String> },
}

#[derive(Debug, Clone)]
struct Spanned {
    token: Token,
    line: usize,
    column: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> GrammarError {
    GrammarError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn tokenize(segment: &str, line: usize, offset: usize, out: &mut Vec<Spanned>) -> Result<(), GrammarError> {
    let chars: Vec<(usize, char)> = segment.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        let column = offset + segment[..pos].chars().count() + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c == '|' {
            out.push(Spanned {
                token: Token::Bar,
                line,
                column,
            });
            i += 1;
        } else {
            let start = pos;
            while i < chars.len() && !chars[i].1.is_whitespace() && chars[i].1 != '|' && chars[i].1 != '(' {
                i += 1;
            }
            let end = chars.get(i).map(|(p, _)| *p).unwrap_or(segment.len());
            let word = &segment[start..end];
            if chars.get(i).is_some_and(|(_, c)| *c == '(') {
                let open = end;
                let close = segment[open..]
                    .find(')')
                    .map(|p| p + open)
                    .ok_or_else(|| syntax(line, column, format!("unclosed `{word}(`")))?;
                let args: Vec<String> = segment[open + 1..close]
                    .split(',')
                    .map(|a| a.trim().to_string())
                    .filter(|a| !a.is_empty())
                    .collect();
                out.push(Spanned {
                    token: Token::Call {
                        func: word.to_string(),
                        args,
                    },
                    line,
                    column,
                });
                while i < chars.len() && chars[i].0 <= close {
                    i += 1;
                }
            } else {
                out.push(Spanned {
                    token: Token::Word(word.to_string()),
                    line,
                    column,
                });
            }
        }
    }
    Ok(())
}

fn value_rule(func: &str, args: &[String], line: usize, column: usize) -> Result<Production, GrammarError> {
    let two = |what: &str| -> Result<(String, String), GrammarError> {
        match args {
            [a, b] => Ok((a.clone(), b.clone())),
            _ => Err(syntax(line, column, format!("{what}(lo, hi) takes two arguments"))),
        }
    };
    match func {
        "cat" => Ok(Production::Categorical(args.to_vec())),
        "int" => {
            let (a, b) = two("int")?;
            let parse = |s: &str| {
                s.parse::<i64>()
                    .map_err(|_| syntax(line, column, format!("`{s}` is not an integer")))
            };
            Ok(Production::Integer {
                lo: parse(&a)?,
                hi: parse(&b)?,
            })
        }
        "float" => {
            let (a, b) = two("float")?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| syntax(line, column, format!("`{s}` is not a number")))
            };
            Ok(Production::Float {
                lo: parse(&a)?,
                hi: parse(&b)?,
            })
        }
        other => Err(syntax(line, column, format!("unknown value rule `{other}`"))),
    }
}

/// Parses the textual grammar format and validates the result.
pub fn parse_grammar(text: &str) -> Result<Grammar, GrammarError> {
    // (lhs, line of definition, rhs tokens)
    let mut raw: Vec<(String, usize, Vec<Spanned>)> = Vec::new();
    for (idx, full_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = full_line.split('#').next().unwrap_or("");
        let trimmed = content.trim_start();
        if trimmed.trim().is_empty() {
            continue;
        }
        let indent = content.len() - trimmed.len();
        if trimmed.starts_with('|') {
            let Some(last) = raw.last_mut() else {
                return Err(syntax(line, indent + 1, "continuation line without a production"));
            };
            tokenize(trimmed, line, indent, &mut last.2)?;
            continue;
        }
        let Some(sep) = content.find("::=") else {
            return Err(syntax(line, indent + 1, "expected `::=`"));
        };
        let lhs = content[..sep].trim();
        if lhs.is_empty() || lhs.split_whitespace().count() != 1 {
            return Err(syntax(line, indent + 1, "left-hand side must be one symbol"));
        }
        if raw.iter().any(|(n, _, _)| n == lhs) {
            return Err(GrammarError::DuplicateDefinition {
                name: lhs.to_string(),
                line,
            });
        }
        let mut tokens = Vec::new();
        let rhs_start = sep + 3;
        tokenize(&content[rhs_start..], line, rhs_start, &mut tokens)?;
        raw.push((lhs.to_string(), line, tokens));
    }
    if raw.is_empty() {
        return Err(syntax(1, 1, "empty grammar"));
    }

    let defined: HashSet<&str> = raw.iter().map(|(n, _, _)| n.as_str()).collect();
    let mut rules = IndexMap::new();
    for (lhs, line, tokens) in &raw {
        let production = match tokens.as_slice() {
            [] => return Err(syntax(*line, 1, format!("`{lhs}` has an empty right-hand side"))),
            [Spanned {
                token: Token::Call { func, args },
                line,
                column,
            }] => value_rule(func, args, *line, *column)?,
            _ => {
                let mut alts = vec![Vec::new()];
                for t in tokens {
                    match &t.token {
                        Token::Bar => {
                            if alts.last().is_some_and(Vec::is_empty) {
                                return Err(syntax(t.line, t.column, "empty alternative"));
                            }
                            alts.push(Vec::new());
                        }
                        Token::Word(w) => {
                            let is_nt = defined.contains(w.as_str())
                                || (w.starts_with('<') && w.ends_with('>'))
                                || w.contains("::");
                            if is_nt && !defined.contains(w.as_str()) {
                                return Err(GrammarError::UndefinedSymbol {
                                    name: w.clone(),
                                    line: t.line,
                                    column: t.column,
                                });
                            }
                            alts.last_mut().expect("non-empty").push(if is_nt {
                                Symbol::NonTerminal(w.clone())
                            } else {
                                Symbol::Terminal(w.clone())
                            });
                        }
                        Token::Call { func, .. } => {
                            return Err(syntax(
                                t.line,
                                t.column,
                                format!("`{func}(...)` must be the whole right-hand side"),
                            ))
                        }
                    }
                }
                if alts.last().is_some_and(Vec::is_empty) {
                    let t = tokens.last().expect("non-empty");
                    return Err(syntax(t.line, t.column, "empty alternative"));
                }
                Production::Alternatives(alts)
            }
        };
        rules.insert(lhs.clone(), production);
    }
    let g = Grammar::from_rules(rules);
    let violations = g.validate();
    if violations.is_empty() {
        Ok(g)
    } else {
        Err(GrammarError::Invalid(violations))
    }
}
