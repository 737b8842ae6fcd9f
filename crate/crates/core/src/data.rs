//! Desk-scale datasets: synthetic ListOps, character-level TSV
//! classification and fixed-window language modelling.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::param::ModelRng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const RESERVED: [&str; 2] = ["<pad>", "<unk>"];

/// Symbol ↔ id map with `pad = 0` and `unk = 1`; other symbols are numbered
/// in sorted order so ids only depend on the symbol set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_symbols<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = symbols
            .into_iter()
            .map(Into::into)
            .filter(|s| !RESERVED.contains(&s.as_str()))
            .collect();
        let symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_list(symbols)
    }

    fn from_list(symbols: Vec<String>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { symbols, index }
    }

    /// Character vocabulary over a set of texts.
    pub fn from_chars<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_symbols(texts.into_iter().flat_map(|t| t.chars()).map(String::from))
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() <= RESERVED.len()
    }

    pub fn id(&self, symbol: &str) -> usize {
        self.index.get(symbol).copied().unwrap_or(UNK)
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn encode_chars(&self, text: &str) -> Vec<usize> {
        let mut buf = [0u8; 4];
        text.chars().map(|c| self.id(c.encode_utf8(&mut buf))).collect()
    }

    pub fn decode_chars(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.symbol(i)).collect()
    }

    /// Rebuilds the lookup table after deserialisation.
    pub fn reindex(self) -> Self {
        Self::from_list(self.symbols)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    /// Next-token ids, one per input position.
    Sequence(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: Target,
}

// ---------------------------------------------------------------- ListOps

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Min,
    Max,
    Med,
    SumMod,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::Min, Op::Max, Op::Med, Op::SumMod];

    pub fn name(self) -> &'static str {
        match self {
            Op::Min => "MIN",
            Op::Max => "MAX",
            Op::Med => "MED",
            Op::SumMod => "SM",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    pub fn apply(self, args: &[u8]) -> u8 {
        match self {
            Op::Min => *args.iter().min().unwrap(),
            Op::Max => *args.iter().max().unwrap(),
            Op::SumMod => (args.iter().map(|&a| a as u32).sum::<u32>() % 10) as u8,
            Op::Med => {
                let mut v = args.to_vec();
                v.sort_unstable();
                let n = v.len();
                // even count: floor of the mean of the two middle values
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    (v[n / 2 - 1] + v[n / 2]) / 2
                }
            }
        }
    }
}

/// Grammar knobs of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ListOpsGrammar {
    pub max_depth: usize,
    pub max_len: usize,
    pub min_arity: usize,
    pub max_arity: usize,
    /// Probability that an argument below the depth cap is a digit.
    pub leaf_prob: f64,
}

impl Default for ListOpsGrammar {
    fn default() -> Self {
        Self {
            max_depth: 2,
            max_len: 32,
            min_arity: 2,
            max_arity: 4,
            leaf_prob: 0.6,
        }
    }
}

#[derive(Debug, Clone)]
enum Expr {
    Digit(u8),
    Node(Op, Vec<Expr>),
}

impl Expr {
    fn value(&self) -> u8 {
        match self {
            Expr::Digit(d) => *d,
            Expr::Node(op, args) => op.apply(&args.iter().map(Expr::value).collect::<Vec<_>>()),
        }
    }

    fn render(&self, out: &mut String) {
        match self {
            Expr::Digit(d) => {
                let _ = write!(out, "{d}");
            }
            Expr::Node(op, args) => {
                out.push('[');
                out.push_str(op.name());
                for a in args {
                    out.push(' ');
                    a.render(out);
                }
                out.push(']');
            }
        }
    }
}

fn gen_expr(rng: &mut ModelRng, g: &ListOpsGrammar, depth: usize) -> Expr {
    let op = Op::ALL[rng.random_range(0..Op::ALL.len())];
    let arity = rng.random_range(g.min_arity..=g.max_arity);
    let args = (0..arity)
        .map(|_| {
            if depth + 1 >= g.max_depth || rng.random::<f64>() < g.leaf_prob {
                Expr::Digit(rng.random_range(0..10))
            } else {
                gen_expr(rng, g, depth + 1)
            }
        })
        .collect();
    Expr::Node(op, args)
}

/// Splits an expression into bracket, operator and digit tokens.
pub fn listops_tokens(expr: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in expr.chars() {
        if c == '[' || c == ']' || c.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// The fixed ListOps vocabulary: brackets, four operators and ten digits.
pub fn listops_vocabulary() -> Vocabulary {
    let digits = (0..10).map(|d| d.to_string());
    Vocabulary::from_symbols(["[", "]"].into_iter().map(String::from).chain(Op::ALL.map(|o| o.name().to_string())).chain(digits))
}

/// Recursive evaluator over the token form, independent of the generator.
pub fn evaluate_listops(expr: &str) -> Result<u8> {
    fn parse(tokens: &[String], pos: &mut usize) -> Result<u8> {
        let bad = |m: &str| Error::Data(format!("malformed ListOps expression: {m}"));
        let tok = tokens.get(*pos).ok_or_else(|| bad("unexpected end"))?;
        *pos += 1;
        if tok != "[" {
            return tok.parse::<u8>().ok().filter(|&d| d < 10).ok_or_else(|| bad(tok));
        }
        let op_tok = tokens.get(*pos).ok_or_else(|| bad("missing operator"))?;
        let op = Op::parse(op_tok).ok_or_else(|| bad(op_tok))?;
        *pos += 1;
        let mut args = Vec::new();
        while tokens.get(*pos).is_some_and(|t| t != "]") {
            args.push(parse(tokens, pos)?);
        }
        if tokens.get(*pos).is_none() {
            return Err(bad("unclosed bracket"));
        }
        *pos += 1;
        if args.is_empty() {
            return Err(bad("operator without arguments"));
        }
        Ok(op.apply(&args))
    }
    let tokens = listops_tokens(expr);
    let mut pos = 0;
    let v = parse(&tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::Data(format!("trailing tokens in {expr:?}")));
    }
    Ok(v)
}

/// `(label, expression)` pairs; examples longer than `max_len` tokens are
/// redrawn.
pub fn gen_listops(count: usize, grammar: &ListOpsGrammar, seed: u64) -> Result<Vec<(u8, String)>> {
    if grammar.max_depth < 1 || grammar.min_arity < 1 || grammar.min_arity > grammar.max_arity {
        return Err(Error::Config(format!("invalid ListOps grammar {grammar:?}")));
    }
    // the shortest expression is `[OP d d]`
    if grammar.max_len < grammar.min_arity + 3 {
        return Err(Error::Config(format!("max_len {} admits no expression", grammar.max_len)));
    }
    let mut rng = ModelRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let e = gen_expr(&mut rng, grammar, 0);
        let mut s = String::new();
        e.render(&mut s);
        if listops_tokens(&s).len() <= grammar.max_len {
            out.push((e.value(), s));
        }
    }
    Ok(out)
}

pub fn listops_examples(pairs: &[(u8, String)], vocab: &Vocabulary) -> Vec<Example> {
    pairs
        .iter()
        .map(|(label, expr)| Example {
            tokens: listops_tokens(expr).iter().map(|t| vocab.id(t)).collect(),
            target: Target::Class(*label as usize),
        })
        .collect()
}

// ---------------------------------------------------------------- TSV

/// Parses `<label>\t<text>` lines. Blank lines are skipped; a missing tab,
/// a non-integer label or empty text is an error naming the line.
pub fn parse_tsv(content: &str) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse { line: line_no, msg: msg.into() };
        let (label, text) = line.split_once('\t').ok_or_else(|| err("expected <label>\\t<text>"))?;
        let label = label.trim().parse::<usize>().map_err(|_| err("label is not a non-negative integer"))?;
        if text.is_empty() {
            return Err(err("empty text"));
        }
        out.push((label, text.to_string()));
    }
    Ok(out)
}

pub fn read_tsv(path: &Path) -> Result<Vec<(usize, String)>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&content)
}

pub fn write_tsv(path: &Path, rows: &[(usize, String)]) -> Result<()> {
    let mut s = String::new();
    for (label, text) in rows {
        let _ = writeln!(s, "{label}\t{text}");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Character-level classification examples. With `vocab = None` the
/// vocabulary is built from this file (use that for the training split).
pub fn load_char_classification(path: &Path, vocab: Option<&Vocabulary>) -> Result<(Vec<Example>, Vocabulary)> {
    let rows = read_tsv(path)?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocabulary::from_chars(rows.iter().map(|(_, t)| t.as_str())),
    };
    let examples = char_examples(&rows, &vocab);
    Ok((examples, vocab))
}

pub fn char_examples(rows: &[(usize, String)], vocab: &Vocabulary) -> Vec<Example> {
    rows.iter()
        .map(|(label, text)| Example {
            tokens: vocab.encode_chars(text),
            target: Target::Class(*label),
        })
        .collect()
}

// ---------------------------------------------------------------- LM

/// Non-overlapping spans of `window + 1` tokens: inputs are the first
/// `window`, targets the same span shifted by one.
pub fn build_lm_windows(stream: &[usize], window: usize) -> Result<Vec<Example>> {
    if window == 0 || stream.len() < window + 1 {
        return Err(Error::Data(format!(
            "stream of {} tokens is too short for window {window}",
            stream.len()
        )));
    }
    Ok(stream
        .chunks_exact(window + 1)
        .map(|span| Example {
            tokens: span[..window].to_vec(),
            target: Target::Sequence(span[1..].to_vec()),
        })
        .collect())
}

// ---------------------------------------------------------------- batching

#[derive(Debug, Clone)]
pub struct Batch {
    pub input: TokenBatch,
    pub targets: Vec<usize>,
    /// Loss weight per target: 1 for real positions or samples, 0 for padding.
    pub weights: Vec<f64>,
}

/// Consecutive groups of `batch_size`, right-padded to the group's longest
/// example.
pub fn batchify(examples: &[Example], batch_size: usize, pad_id: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    examples
        .chunks(batch_size)
        .map(|group| {
            let b = group.len();
            let n = group.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
            if n == 0 {
                return Err(Error::Data("empty example".into()));
            }
            let mut tokens = vec![pad_id; b * n];
            let mut mask = vec![0.0; b * n];
            let mut targets = Vec::new();
            let mut weights = Vec::new();
            for (i, e) in group.iter().enumerate() {
                tokens[i * n..i * n + e.tokens.len()].copy_from_slice(&e.tokens);
                mask[i * n..i * n + e.tokens.len()].fill(1.0);
                match &e.target {
                    Target::Class(c) => {
                        targets.push(*c);
                        weights.push(1.0);
                    }
                    Target::Sequence(t) => {
                        for j in 0..n {
                            targets.push(t.get(j).copied().unwrap_or(pad_id));
                            weights.push(if j < t.len() { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            Ok(Batch {
                input: TokenBatch::new(tokens, b, n, mask)?,
                targets,
                weights,
            })
        })
        .collect()
}
