//! Ideographic description sequences and formation trees.
//!
//! An IDS is the prefix (preorder) serialization of a decomposition tree:
//! operators are the twelve ideographic description characters, leaves are
//! radicals. Parsing yields a [`FormationTree`] whose edges point from child
//! to parent and are typed by the child's [`Azimuth`].

use std::collections::HashSet;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Identifier of a radical in a [`RadicalVocab`].
pub type RadicalId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdsError {
    #[error("unexpected end of input: an operator is missing operands")]
    UnexpectedEnd,
    #[error("trailing tokens after a complete tree (first extra token at position {0})")]
    TrailingTokens(usize),
    #[error("radical r{0} is not in the vocabulary")]
    UnknownRadical(RadicalId),
    #[error("child index {index} out of arity {arity} for {formation}")]
    IndexOutOfArity {
        formation: FormationType,
        index: usize,
        arity: usize,
    },
    #[error("invalid IDS token `{0}`")]
    InvalidToken(String),
    #[error("malformed tree: {0}")]
    MalformedTree(String),
}

/// One of the twelve layout operators, in codepoint order U+2FF0..U+2FFB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FormationType {
    LeftRight,
    TopBottom,
    LeftMiddleRight,
    TopMiddleBottom,
    FullSurround,
    SurroundAbove,
    SurroundBelow,
    SurroundLeft,
    SurroundUpperLeft,
    SurroundUpperRight,
    SurroundLowerLeft,
    Overlaid,
}

const ABBREVS: [&str; 12] = [
    "LR", "TB", "LMR", "TMB", "FS", "SA", "SB", "SL", "SUL", "SUR", "SLL", "OV",
];

impl FormationType {
    pub const ALL: [FormationType; 12] = [
        FormationType::LeftRight,
        FormationType::TopBottom,
        FormationType::LeftMiddleRight,
        FormationType::TopMiddleBottom,
        FormationType::FullSurround,
        FormationType::SurroundAbove,
        FormationType::SurroundBelow,
        FormationType::SurroundLeft,
        FormationType::SurroundUpperLeft,
        FormationType::SurroundUpperRight,
        FormationType::SurroundLowerLeft,
        FormationType::Overlaid,
    ];

    /// Position in codepoint order, 0..12.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// The ideographic description character for this operator.
    pub fn code(self) -> char {
        char::from_u32(0x2FF0 + self.index() as u32).expect("IDC range is valid")
    }

    pub fn from_code(c: char) -> Option<Self> {
        let cp = c as u32;
        if (0x2FF0..=0x2FFB).contains(&cp) {
            Self::from_index((cp - 0x2FF0) as usize)
        } else {
            None
        }
    }

    pub fn arity(self) -> usize {
        match self {
            FormationType::LeftMiddleRight | FormationType::TopMiddleBottom => 3,
            _ => 2,
        }
    }

    /// Upper-case abbreviation used in azimuth names ("LR", "TMB", ...).
    pub fn abbrev(self) -> &'static str {
        ABBREVS[self.index()]
    }

    /// Lower-case ASCII alias accepted by the text tokenizer.
    pub fn alias(self) -> String {
        self.abbrev().to_ascii_lowercase()
    }

    pub fn from_alias(s: &str) -> Option<Self> {
        ABBREVS
            .iter()
            .position(|a| a.eq_ignore_ascii_case(s))
            .and_then(Self::from_index)
    }

    /// True for the seven surround layouts, whose first child frames the second.
    pub fn is_surround(self) -> bool {
        matches!(
            self,
            FormationType::FullSurround
                | FormationType::SurroundAbove
                | FormationType::SurroundBelow
                | FormationType::SurroundLeft
                | FormationType::SurroundUpperLeft
                | FormationType::SurroundUpperRight
                | FormationType::SurroundLowerLeft
        )
    }
}

impl fmt::Display for FormationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

/// Positional role of a node under its parent. Id 0 is the root; ids 1..=26
/// enumerate (formation type, child index) in codepoint then child order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Azimuth(u8);

/// First azimuth id of each formation type.
const AZIMUTH_OFFSETS: [u8; 12] = {
    let mut out = [0u8; 12];
    let mut next = 1u8;
    let mut i = 0;
    while i < 12 {
        out[i] = next;
        next += if i == 2 || i == 3 { 3 } else { 2 };
        i += 1;
    }
    out
};

impl Azimuth {
    pub const ROOT: Azimuth = Azimuth(0);
    /// Number of azimuth ids including ROOT.
    pub const COUNT: usize = 27;

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        (id < Self::COUNT).then_some(Azimuth(id as u8))
    }

    /// The (formation type, child index) pair, or `None` for ROOT.
    pub fn slot(self) -> Option<(FormationType, usize)> {
        if self.0 == 0 {
            return None;
        }
        let fi = AZIMUTH_OFFSETS.iter().rposition(|&o| o <= self.0)?;
        Some((FormationType::ALL[fi], (self.0 - AZIMUTH_OFFSETS[fi]) as usize))
    }

    pub fn name(self) -> String {
        match self.slot() {
            None => "ROOT".to_string(),
            Some((f, i)) => format!("{}-{}", f.abbrev(), i + 1),
        }
    }
}

impl fmt::Display for Azimuth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

pub fn azimuth_of(formation: FormationType, child_index: usize) -> Result<Azimuth, IdsError> {
    if child_index >= formation.arity() {
        return Err(IdsError::IndexOutOfArity {
            formation,
            index: child_index,
            arity: formation.arity(),
        });
    }
    Ok(Azimuth(AZIMUTH_OFFSETS[formation.index()] + child_index as u8))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IdsToken {
    Operator(FormationType),
    Radical(RadicalId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeLabel {
    Radical(RadicalId),
    Formation(FormationType),
}

impl NodeLabel {
    pub fn is_radical(self) -> bool {
        matches!(self, NodeLabel::Radical(_))
    }
}

impl fmt::Display for NodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeLabel::Radical(r) => write!(f, "r{r}"),
            NodeLabel::Formation(t) => write!(f, "{}", t.code()),
        }
    }
}

/// Id to name table for radicals. Ids are dense, `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RadicalVocab {
    names: Vec<String>,
}

impl RadicalVocab {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    /// Vocabulary `r0..r{n-1}`.
    pub fn numbered(n: usize) -> Self {
        Self::new((0..n).map(|i| format!("r{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: RadicalId) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, id: RadicalId) -> bool {
        (id as usize) < self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// A parsed character: nodes in preorder with parent links, child azimuths
/// and per-node mask flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormationTree {
    nodes: Vec<NodeLabel>,
    parent: Vec<Option<usize>>,
    azimuth: Vec<Azimuth>,
    masked: Vec<bool>,
}

impl FormationTree {
    /// Builds a tree from raw columns. Checks preorder parent links and column
    /// lengths but not operator arity, so pruned trees (leaves removed) can be
    /// represented.
    pub fn from_raw_parts(
        nodes: Vec<NodeLabel>,
        parent: Vec<Option<usize>>,
        azimuth: Vec<Azimuth>,
        masked: Vec<bool>,
    ) -> Result<Self, IdsError> {
        let n = nodes.len();
        if n == 0 {
            return Err(IdsError::MalformedTree("empty tree".into()));
        }
        if parent.len() != n || azimuth.len() != n || masked.len() != n {
            return Err(IdsError::MalformedTree("column lengths differ".into()));
        }
        if parent[0].is_some() {
            return Err(IdsError::MalformedTree("node 0 must be the root".into()));
        }
        for (i, p) in parent.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {
                    if nodes[*p].is_radical() {
                        return Err(IdsError::MalformedTree(format!(
                            "node {i} has radical parent {p}"
                        )));
                    }
                }
                _ => {
                    return Err(IdsError::MalformedTree(format!(
                        "node {i} parent must precede it"
                    )))
                }
            }
        }
        Ok(Self {
            nodes,
            parent,
            azimuth,
            masked,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeLabel] {
        &self.nodes
    }

    pub fn label(&self, i: usize) -> NodeLabel {
        self.nodes[i]
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn azimuth(&self, i: usize) -> Azimuth {
        self.azimuth[i]
    }

    pub fn azimuths(&self) -> &[Azimuth] {
        &self.azimuth
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked[i]
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    /// Children of node `i` in sibling order.
    pub fn children(&self, i: usize) -> Vec<usize> {
        (i + 1..self.len())
            .filter(|&c| self.parent[c] == Some(i))
            .collect()
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        !self.parent[i + 1..].contains(&Some(i))
    }

    /// Radical ids of all leaves, in preorder.
    pub fn radicals(&self) -> impl Iterator<Item = RadicalId> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            NodeLabel::Radical(r) => Some(*r),
            NodeLabel::Formation(_) => None,
        })
    }

    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.len()];
        for i in 1..self.len() {
            depth[i] = depth[self.parent[i].expect("non-root")] + 1;
        }
        depth.into_iter().max().unwrap_or(0)
    }

    pub fn to_dot(&self, vocab: Option<&RadicalVocab>) -> String {
        let mut out = String::from("digraph formation_tree {\n  rankdir=BT;\n");
        for (i, label) in self.nodes.iter().enumerate() {
            let text = match (label, vocab) {
                (NodeLabel::Radical(r), Some(v)) => {
                    v.name(*r).map(str::to_string).unwrap_or(label.to_string())
                }
                _ => label.to_string(),
            };
            let style = if self.masked[i] { ", style=dashed" } else { "" };
            out.push_str(&format!("  n{i} [label=\"{text}\"{style}];\n"));
        }
        for i in 1..self.len() {
            let p = self.parent[i].expect("non-root");
            out.push_str(&format!(
                "  n{i} -> n{p} [label=\"{}\"];\n",
                self.azimuth[i].name()
            ));
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct NodeView {
            index: usize,
            label: String,
            kind: &'static str,
            parent: i64,
            azimuth: String,
            azimuth_id: usize,
            masked: bool,
        }
        let nodes: Vec<NodeView> = (0..self.len())
            .map(|i| NodeView {
                index: i,
                label: self.nodes[i].to_string(),
                kind: if self.nodes[i].is_radical() {
                    "radical"
                } else {
                    "formation"
                },
                parent: self.parent[i].map_or(-1, |p| p as i64),
                azimuth: self.azimuth[i].name(),
                azimuth_id: self.azimuth[i].id(),
                masked: self.masked[i],
            })
            .collect();
        serde_json::json!({ "size": self.len(), "nodes": nodes })
    }
}

pub fn parse(tokens: &[IdsToken]) -> Result<FormationTree, IdsError> {
    parse_inner(tokens, None)
}

/// Parses and additionally rejects radicals outside `vocab`.
pub fn parse_with_vocab(
    tokens: &[IdsToken],
    vocab: &RadicalVocab,
) -> Result<FormationTree, IdsError> {
    parse_inner(tokens, Some(vocab))
}

fn parse_inner(
    tokens: &[IdsToken],
    vocab: Option<&RadicalVocab>,
) -> Result<FormationTree, IdsError> {
    let n = tokens.len();
    let mut nodes = Vec::with_capacity(n);
    let mut parent = Vec::with_capacity(n);
    let mut azimuth = Vec::with_capacity(n);
    // (operator node index, formation, children filled so far)
    let mut open: Vec<(usize, FormationType, usize)> = Vec::new();

    for (pos, token) in tokens.iter().enumerate() {
        if !nodes.is_empty() && open.is_empty() {
            return Err(IdsError::TrailingTokens(pos));
        }
        let index = nodes.len();
        match open.last_mut() {
            Some((p, f, filled)) => {
                parent.push(Some(*p));
                azimuth.push(azimuth_of(*f, *filled)?);
                *filled += 1;
                if *filled == f.arity() {
                    open.pop();
                }
            }
            None => {
                parent.push(None);
                azimuth.push(Azimuth::ROOT);
            }
        }
        match *token {
            IdsToken::Operator(f) => {
                nodes.push(NodeLabel::Formation(f));
                open.push((index, f, 0));
            }
            IdsToken::Radical(r) => {
                if let Some(v) = vocab {
                    if !v.contains(r) {
                        return Err(IdsError::UnknownRadical(r));
                    }
                }
                nodes.push(NodeLabel::Radical(r));
            }
        }
    }
    if nodes.is_empty() || !open.is_empty() {
        return Err(IdsError::UnexpectedEnd);
    }
    let masked = vec![false; nodes.len()];
    Ok(FormationTree {
        nodes,
        parent,
        azimuth,
        masked,
    })
}

/// Preorder token sequence of the tree (masks are ignored).
pub fn serialize(tree: &FormationTree) -> Vec<IdsToken> {
    tree.nodes
        .iter()
        .map(|n| match *n {
            NodeLabel::Radical(r) => IdsToken::Radical(r),
            NodeLabel::Formation(f) => IdsToken::Operator(f),
        })
        .collect()
}

/// Marks every leaf whose radical is not in `known`. Formation nodes are never
/// masked.
pub fn mask_unknown(tree: &FormationTree, known: &HashSet<RadicalId>) -> FormationTree {
    let mut out = tree.clone();
    for (i, label) in tree.nodes.iter().enumerate() {
        out.masked[i] = matches!(label, NodeLabel::Radical(r) if !known.contains(r));
    }
    out
}

/// Square boolean matrix, row = query, column = key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    cells: Vec<bool>,
}

impl Adjacency {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            cells: vec![false; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.cells[q * self.n + k]
    }

    pub fn set(&mut self, q: usize, k: usize, value: bool) {
        self.cells[q * self.n + k] = value;
    }

    /// All true (query, key) pairs in row-major order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n * self.n)
            .filter(|&i| self.cells[i])
            .map(|i| (i / self.n, i % self.n))
            .collect()
    }
}

/// Subtree attention pattern: each unmasked node sees itself and its unmasked
/// direct children.
pub fn attention_adjacency(tree: &FormationTree) -> Adjacency {
    let n = tree.len();
    let mut adj = Adjacency::new(n);
    for q in 0..n {
        if !tree.masked[q] {
            adj.set(q, q, true);
        }
    }
    for k in 1..n {
        let q = tree.parent[k].expect("non-root");
        if !tree.masked[q] && !tree.masked[k] {
            adj.set(q, k, true);
        }
    }
    adj
}

/// Splits IDS text into tokens. Operators may be IDC characters or ASCII
/// aliases ("lr", "tmb", ...); radicals are `r<id>`. Whitespace separates
/// ASCII tokens; IDC characters also delimit.
pub fn tokenize(text: &str) -> Result<Vec<IdsToken>, IdsError> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<IdsToken>| -> Result<(), IdsError> {
        if word.is_empty() {
            return Ok(());
        }
        let token = if let Some(f) = FormationType::from_alias(word) {
            IdsToken::Operator(f)
        } else if let Some(id) = word
            .strip_prefix('r')
            .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|d| d.parse::<RadicalId>().ok())
        {
            IdsToken::Radical(id)
        } else {
            return Err(IdsError::InvalidToken(std::mem::take(word)));
        };
        tokens.push(token);
        word.clear();
        Ok(())
    };
    for c in text.chars() {
        if let Some(f) = FormationType::from_code(c) {
            flush(&mut word, &mut tokens)?;
            tokens.push(IdsToken::Operator(f));
        } else if c.is_whitespace() {
            flush(&mut word, &mut tokens)?;
        } else {
            word.push(c);
        }
    }
    flush(&mut word, &mut tokens)?;
    Ok(tokens)
}

/// Canonical text form: IDC characters and `r<id>`, space separated.
pub fn format_tokens(tokens: &[IdsToken]) -> String {
    tokens
        .iter()
        .map(|t| match t {
            IdsToken::Operator(f) => f.code().to_string(),
            IdsToken::Radical(r) => format!("r{r}"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_str(text: &str) -> Result<FormationTree, IdsError> {
    parse(&tokenize(text)?)
}
