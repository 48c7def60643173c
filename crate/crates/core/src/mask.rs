//! Attention connectivity masks.
//!
//! The engine answers one question per layer: which query→key connections in
//! self-attention are allowed this forward pass? Connectivity is a boolean
//! matrix assembled by conjunction from three independent restrictions:
//!
//! * padding — columns of padding positions are never attended;
//! * causality — decoder self-attention sees no future keys;
//! * token masking — a per-layer random subset of tokens has its
//!   connections severed, under one of two strategies.
//!
//! With the siblings strategy a masked token keeps only its self-connection
//! and disappears as a key for everyone else. With the self strategy the
//! token's own key column is removed outright, diagonal included, so the
//! token must be reconstructed from its siblings. Because conjunction is
//! commutative the three restrictions can be applied in any order.
//!
//! A row left with no allowed key would make softmax degenerate, so after
//! composition any all-false row gets its diagonal back.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::fmt;

/// Additive score offset for forbidden connections. Chosen instead of
/// negative infinity so scores stay finite; it underflows to exactly zero
/// weight after softmax for any realistic score magnitude.
pub const MASK_VALUE: f64 = -1.0e9;

// ── Types ───────────────────────────────────────────────────────────────────

/// Per-sequence padding indicator: `true` for real tokens, `false` for padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMaskVector(Vec<bool>);

impl AttentionMaskVector {
    pub fn new(values: Vec<bool>) -> Self {
        AttentionMaskVector(values)
    }

    /// All positions real.
    pub fn full(n: usize) -> Self {
        AttentionMaskVector(vec![true; n])
    }

    /// `real` leading real tokens followed by trailing padding.
    pub fn with_prefix_real(real: usize, total: usize) -> Self {
        let mut v = vec![false; total];
        v.iter_mut().take(real).for_each(|x| *x = true);
        AttentionMaskVector(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_real(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn real_count(&self) -> usize {
        self.0.iter().filter(|x| **x).count()
    }

    pub fn real_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, x)| **x).map(|(i, _)| i)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// How a masked token's connections are severed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    /// No token masking; padding/causal restrictions only.
    None,
    /// Masked token attends only itself and is hidden from its siblings.
    Siblings,
    /// Masked token's key column is removed entirely, diagonal included.
    SelfMask,
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskStrategy::None => write!(f, "none"),
            MaskStrategy::Siblings => write!(f, "siblings"),
            MaskStrategy::SelfMask => write!(f, "self"),
        }
    }
}

/// Sorted set of masked token positions for one sequence, one layer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskedSet {
    indices: BTreeSet<usize>,
}

impl MaskedSet {
    pub fn empty() -> Self {
        MaskedSet::default()
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        MaskedSet { indices: indices.into_iter().collect() }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.contains(&i)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }
}

/// Boolean connectivity matrix: `allow[q][k]` says key `k` is visible to
/// query `q`. Square for self-attention; rectangular for cross-attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllowMatrix {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AllowMatrix {
    pub fn new_all(rows: usize, cols: usize, value: bool) -> Self {
        AllowMatrix { rows, cols, allow: vec![value; rows * cols] }
    }

    /// Padding and (optionally) causal restrictions, before token masking.
    pub fn base(attn_m: &AttentionMaskVector, causal: bool) -> Self {
        let n = attn_m.len();
        let mut m = AllowMatrix::new_all(n, n, false);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, attn_m.is_real(j) && (!causal || j <= i));
            }
        }
        m
    }

    /// Cross-attention base: decoder queries may see every real encoder key.
    pub fn cross(query_rows: usize, memory_attn_m: &AttentionMaskVector) -> Self {
        let cols = memory_attn_m.len();
        let mut m = AllowMatrix::new_all(query_rows, cols, false);
        for i in 0..query_rows {
            for j in 0..cols {
                m.set(i, j, memory_attn_m.is_real(j));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.cols + k]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.allow[q * self.cols + k] = v;
    }

    /// Elementwise AND with another matrix of the same dimensions.
    pub fn conjoin(&self, other: &AllowMatrix) -> Result<AllowMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "conjoin",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        let allow = self.allow.iter().zip(&other.allow).map(|(a, b)| *a && *b).collect();
        Ok(AllowMatrix { rows: self.rows, cols: self.cols, allow })
    }

    /// Remove key column `k` for every query row.
    pub fn clear_column(&mut self, k: usize) {
        for q in 0..self.rows {
            self.set(q, k, false);
        }
    }

    fn row_is_empty(&self, q: usize) -> bool {
        !self.allow[q * self.cols..(q + 1) * self.cols].iter().any(|x| *x)
    }

    /// Give empty rows their diagonal back so softmax stays well defined.
    pub fn apply_row_fallback(&mut self) {
        let n = self.rows.min(self.cols);
        for q in 0..n {
            if self.row_is_empty(q) {
                self.set(q, q, true);
            }
        }
    }
}

// ── Operations ──────────────────────────────────────────────────────────────

/// Independent Bernoulli(rate) trial per real token. If every real token
/// would end up masked, one uniformly chosen token is released so at least
/// one sibling survives.
pub fn select_masked_tokens(
    attn_m: &AttentionMaskVector,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedSet> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("rate", format!("masking rate must be in [0, 1), got {rate}")));
    }
    let mut selected: Vec<usize> = Vec::new();
    for i in 0..attn_m.len() {
        if attn_m.is_real(i) && rng.random::<f64>() < rate {
            selected.push(i);
        }
    }
    let real = attn_m.real_count();
    if real > 0 && selected.len() == real {
        let release = rng.random_range(0..selected.len());
        selected.remove(release);
    }
    Ok(MaskedSet::from_indices(selected))
}

/// One Bernoulli(p_self) trial deciding the strategy for a whole batch.
pub fn draw_strategy(p_self: f64, rng: &mut ChaCha8Rng) -> Result<MaskStrategy> {
    if !(0.0..=1.0).contains(&p_self) {
        return Err(Error::config("p_self", format!("strategy probability must be in [0, 1], got {p_self}")));
    }
    Ok(if rng.random::<f64>() < p_self {
        MaskStrategy::SelfMask
    } else {
        MaskStrategy::Siblings
    })
}

/// Token-masking restriction pattern on an otherwise all-true matrix.
/// Conjoining this with the padding/causal base gives the full mask.
pub fn strategy_restriction(strategy: MaskStrategy, masked: &MaskedSet, n: usize) -> AllowMatrix {
    let mut m = AllowMatrix::new_all(n, n, true);
    match strategy {
        MaskStrategy::None => {}
        MaskStrategy::Siblings => {
            for t in masked.iter() {
                for j in 0..n {
                    if j != t {
                        m.set(t, j, false);
                        m.set(j, t, false);
                    }
                }
            }
        }
        MaskStrategy::SelfMask => {
            for t in masked.iter() {
                m.clear_column(t);
            }
        }
    }
    m
}

/// Full per-sequence connectivity: padding ∧ causality ∧ token masking,
/// then the empty-row fallback.
pub fn build_allow_matrix(
    strategy: MaskStrategy,
    masked: &MaskedSet,
    attn_m: &AttentionMaskVector,
    causal: bool,
) -> Result<AllowMatrix> {
    let n = attn_m.len();
    for t in masked.iter() {
        if t >= n || !attn_m.is_real(t) {
            return Err(Error::contract(
                "build_allow_matrix",
                format!("masked position {t} is padding or out of range (len {n})"),
            ));
        }
    }
    let base = AllowMatrix::base(attn_m, causal);
    let mut full = base.conjoin(&strategy_restriction(strategy, masked, n))?;
    full.apply_row_fallback();
    Ok(full)
}

/// Additive score mask: 0 where allowed, `MASK_VALUE` where forbidden,
/// replicated over `batch` sequences and `heads` heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveMask {
    pub batch: usize,
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    values: Vec<f64>,
}

impl AdditiveMask {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.batch, self.heads, self.rows, self.cols],
            self.values.clone(),
        )
        .expect("consistent dims")
    }
}

/// Expand one allow matrix to a `[batch, heads, N, N]` additive mask.
pub fn expand_to_additive(allow: &AllowMatrix, batch: usize, heads: usize) -> Result<AdditiveMask> {
    expand_batch_to_additive(&vec![allow.clone(); batch], heads)
}

/// Expand per-sequence allow matrices (all the same dimensions) to a
/// `[batch, heads, N, N]` additive mask. The mask is shared across heads.
pub fn expand_batch_to_additive(allows: &[AllowMatrix], heads: usize) -> Result<AdditiveMask> {
    if allows.is_empty() || heads == 0 {
        return Err(Error::contract("expand_to_additive", "batch and heads must be nonzero".to_string()));
    }
    let (rows, cols) = (allows[0].rows(), allows[0].cols());
    let mut values = Vec::with_capacity(allows.len() * heads * rows * cols);
    for allow in allows {
        if allow.rows() != rows || allow.cols() != cols {
            return Err(Error::ShapeMismatch {
                op: "expand_to_additive",
                lhs: vec![rows, cols],
                rhs: vec![allow.rows(), allow.cols()],
            });
        }
        let plane: Vec<f64> = (0..rows * cols)
            .map(|i| if allow.allow[i] { 0.0 } else { MASK_VALUE })
            .collect();
        for _ in 0..heads {
            values.extend_from_slice(&plane);
        }
    }
    Ok(AdditiveMask { batch: allows.len(), heads, rows, cols, values })
}

// ── Tests ───────────────────────────────────────────────────────────────────
