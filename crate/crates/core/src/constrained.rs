//! Constrained tuning: injection trees, soft positions, and visible matrices.
//!
//! Knowledge is hung off the trunk as depth-1 branches. Flattening puts each
//! branch right after the last token of its head; soft positions keep trunk
//! tokens at their original index and count branch tokens on from the head.
//! A branch token sees only itself, its own branch, and its head.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::serializer::{InputSequence, TokenSeq};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Branch {
    pub head: Range<usize>,
    pub knowledge: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionTree {
    pub trunk: Vec<TokenId>,
    pub branches: Vec<Branch>,
}

impl InjectionTree {
    /// Validates that every head is a non-empty in-bounds span and that no
    /// two heads overlap.
    pub fn new(trunk: Vec<TokenId>, branches: Vec<Branch>) -> Result<Self> {
        for b in &branches {
            if b.head.start >= b.head.end || b.head.end > trunk.len() {
                return Err(Error::Domain(format!(
                    "branch head {:?} invalid for a trunk of {} tokens",
                    b.head,
                    trunk.len()
                )));
            }
        }
        let mut heads: Vec<&Range<usize>> = branches.iter().map(|b| &b.head).collect();
        heads.sort_by_key(|h| h.start);
        if let Some(w) = heads.windows(2).find(|w| w[0].end > w[1].start) {
            return Err(Error::Overlap(format!("branch heads {:?} and {:?} overlap", w[0], w[1])));
        }
        Ok(InjectionTree { trunk, branches })
    }

    pub fn trunk_len(&self) -> usize {
        self.trunk.len()
    }

    pub fn flat_len(&self) -> usize {
        self.trunk.len() + self.branches.iter().map(|b| b.knowledge.len()).sum::<usize>()
    }

    /// Where each flat token comes from, in flat order.
    pub fn layout(&self) -> Vec<Origin> {
        let mut by_anchor: Vec<usize> = (0..self.branches.len()).collect();
        // stable: branches sharing an anchor keep site order
        by_anchor.sort_by_key(|&b| self.branches[b].head.end);
        let mut out = Vec::with_capacity(self.flat_len());
        let mut next = by_anchor.iter().peekable();
        for t in 0..self.trunk.len() {
            out.push(Origin::Trunk(t));
            while let Some(&b) = next.next_if(|&&b| self.branches[b].head.end == t + 1) {
                out.extend((0..self.branches[b].knowledge.len()).map(|k| Origin::Branch { branch: b, k }));
            }
        }
        out
    }
}

/// Builds the injection tree of one constrained-tuning entry.
pub fn build_injection_tree(seq: &TokenSeq) -> Result<InjectionTree> {
    InjectionTree::new(
        seq.tokens.clone(),
        seq.sites
            .iter()
            .map(|s| Branch {
                head: s.head.clone(),
                knowledge: s.knowledge.clone(),
            })
            .collect(),
    )
}

/// Builds the tree over a whole pair, so `[CLS]`/`[SEP]` are trunk tokens.
pub fn build_pair_tree(input: &InputSequence) -> Result<InjectionTree> {
    InjectionTree::new(
        input.combined.clone(),
        input
            .combined_sites()
            .into_iter()
            .map(|s| Branch {
                head: s.head,
                knowledge: s.knowledge,
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Trunk(usize),
    /// The `k`-th token (0-based) of branch `branch`.
    Branch { branch: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flattened {
    pub tokens: Vec<TokenId>,
    pub soft_positions: Vec<usize>,
    pub trunk_mask: Vec<bool>,
}

pub fn flatten_with_soft_positions(tree: &InjectionTree) -> Flattened {
    let layout = tree.layout();
    let mut tokens = Vec::with_capacity(layout.len());
    let mut soft_positions = Vec::with_capacity(layout.len());
    let mut trunk_mask = Vec::with_capacity(layout.len());
    for o in layout {
        match o {
            Origin::Trunk(t) => {
                tokens.push(tree.trunk[t]);
                soft_positions.push(t);
                trunk_mask.push(true);
            }
            Origin::Branch { branch, k } => {
                let b = &tree.branches[branch];
                tokens.push(b.knowledge[k]);
                soft_positions.push(b.head.end - 1 + k + 1);
                trunk_mask.push(false);
            }
        }
    }
    Flattened {
        tokens,
        soft_positions,
        trunk_mask,
    }
}

/// Square binary matrix stored as one bitset per row.
#[derive(Clone, PartialEq, Eq)]
pub struct VisibleMatrix {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl VisibleMatrix {
    pub fn zeros(n: usize) -> Self {
        let words = n.div_ceil(64);
        VisibleMatrix {
            n,
            words,
            bits: vec![0; n * words],
        }
    }

    pub fn ones(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, true);
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        assert!(i < self.n && j < self.n, "({i}, {j}) outside {0}x{0}", self.n);
        self.bits[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        assert!(i < self.n && j < self.n, "({i}, {j}) outside {0}x{0}", self.n);
        let w = &mut self.bits[i * self.words + j / 64];
        if on {
            *w |= 1 << (j % 64);
        } else {
            *w &= !(1 << (j % 64));
        }
    }

    pub fn row_sum(&self, i: usize) -> usize {
        self.bits[i * self.words..(i + 1) * self.words]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Copy embedded in the top-left corner of an `n`-square zero matrix.
    pub fn padded(&self, n: usize) -> Self {
        assert!(n >= self.n);
        let mut m = Self::zeros(n);
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) {
                    m.set(i, j, true);
                }
            }
        }
        m
    }

    /// Row `i` as hex: byte `k` holds columns `8k..8k+8`, lowest column in
    /// the least significant bit.
    pub fn row_hex(&self, i: usize) -> String {
        let bytes: Vec<u8> = (0..self.n.div_ceil(8))
            .map(|k| {
                (0..8)
                    .filter(|b| 8 * k + b < self.n && self.get(i, 8 * k + b))
                    .fold(0u8, |acc, b| acc | 1 << b)
            })
            .collect();
        hex::encode(bytes)
    }

    pub fn to_hex_rows(&self) -> Vec<String> {
        (0..self.n).map(|i| self.row_hex(i)).collect()
    }

    pub fn from_hex_rows<S: AsRef<str>>(rows: &[S]) -> Result<Self> {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            let bytes = hex::decode(row.as_ref())
                .map_err(|e| Error::Domain(format!("visible row {i}: {e}")))?;
            if bytes.len() != n.div_ceil(8) {
                return Err(Error::Domain(format!("visible row {i} has {} bytes for {n} columns", bytes.len())));
            }
            for j in 0..n {
                if bytes[j / 8] >> (j % 8) & 1 == 1 {
                    m.set(i, j, true);
                }
            }
            if bytes.last().is_some_and(|&last| !n.is_multiple_of(8) && last >> (n % 8) != 0) {
                return Err(Error::Domain(format!("visible row {i} sets bits past column {n}")));
            }
        }
        Ok(m)
    }
}

impl fmt::Debug for VisibleMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "VisibleMatrix({0}x{0})", self.n)?;
        for i in 0..self.n {
            let row: String = (0..self.n).map(|j| if self.get(i, j) { '1' } else { '0' }).collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

/// Visibility over the flattened tree: trunk tokens see each other, a
/// branch sees itself and every token of its head span.
pub fn build_visible_matrix(tree: &InjectionTree, flat_len: usize) -> VisibleMatrix {
    let layout = tree.layout();
    assert_eq!(flat_len, layout.len(), "flat length does not match the tree");
    let mut m = VisibleMatrix::zeros(flat_len);
    let trunk_flat: Vec<usize> = layout
        .iter()
        .enumerate()
        .filter_map(|(f, o)| matches!(o, Origin::Trunk(_)).then_some(f))
        .collect();
    for &i in &trunk_flat {
        for &j in &trunk_flat {
            m.set(i, j, true);
        }
    }
    let mut branch_flat: Vec<Vec<usize>> = vec![Vec::new(); tree.branches.len()];
    for (f, o) in layout.iter().enumerate() {
        if let Origin::Branch { branch, .. } = o {
            branch_flat[*branch].push(f);
        }
    }
    for (b, members) in branch_flat.iter().enumerate() {
        let head: Vec<usize> = tree.branches[b].head.clone().map(|t| trunk_flat[t]).collect();
        for &i in members {
            for &j in members {
                m.set(i, j, true);
            }
            for &h in &head {
                m.set(i, h, true);
                m.set(h, i, true);
            }
        }
    }
    m
}

/// Encoder-ready sequence: flat tokens with soft positions and visibility.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectedSequence {
    pub tokens: Vec<TokenId>,
    pub soft_positions: Vec<usize>,
    pub visible: VisibleMatrix,
    pub segments: Vec<u8>,
    pub trunk_mask: Vec<bool>,
    pub label: Option<u8>,
}

impl InjectedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Template-mode (or knowledge-free) input: hard positions, fully
    /// visible.
    pub fn plain(input: &InputSequence) -> Self {
        let n = input.combined.len();
        InjectedSequence {
            tokens: input.combined.clone(),
            soft_positions: (0..n).collect(),
            visible: VisibleMatrix::ones(n),
            segments: input.segments.clone(),
            trunk_mask: vec![true; n],
            label: input.label,
        }
    }
}

/// Builds the injected sequence of a constrained-tuning pair. Knowledge is
/// never truncated: an over-long result is an error.
pub fn assemble(input: &InputSequence, max_len: usize) -> Result<InjectedSequence> {
    if input.mode.is_template() {
        return Err(Error::Domain(format!(
            "assemble needs a constrained-tuning pair, got {} mode",
            input.mode
        )));
    }
    let tree = build_pair_tree(input)?;
    let flat = flatten_with_soft_positions(&tree);
    if flat.tokens.len() > max_len {
        return Err(Error::SequenceOverflow(format!(
            "{} tokens after injection exceed max_len {max_len}",
            flat.tokens.len()
        )));
    }
    let visible = build_visible_matrix(&tree, flat.tokens.len());
    let segments = tree
        .layout()
        .into_iter()
        .map(|o| match o {
            Origin::Trunk(t) => input.segments[t],
            Origin::Branch { branch, .. } => input.segments[tree.branches[branch].head.end - 1],
        })
        .collect();
    Ok(InjectedSequence {
        tokens: flat.tokens,
        soft_positions: flat.soft_positions,
        visible,
        segments,
        trunk_mask: flat.trunk_mask,
        label: input.label,
    })
}
