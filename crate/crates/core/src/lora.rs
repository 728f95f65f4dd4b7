//! Dense reference for base-model and low-rank adapter forward passes.
//!
//! The factored path computes `xW + (xA)B` without ever materializing the
//! merged weight `W + AB`; the merged path materializes it. Both must agree
//! to high precision, which every downstream module relies on.

use serde::{Deserialize, Serialize};

use crate::matrix::{DenseMatrix, MatrixError, OpCounter};

/// Projections an adapter may target inside one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] =
        [Projection::Query, Projection::Key, Projection::Value, Projection::Output];
}

/// One low-rank pair: `A` is h x r, `B` is r x d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankPair {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl LowRankPair {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AdapterError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("rank must be >= 1")]
    ZeroRank,
    #[error("rank {rank} exceeds min(h={h}, d={d})")]
    RankTooLarge { rank: usize, h: usize, d: usize },
    #[error("projection {proj:?} has rank {found}, adapter rank is {expected}")]
    MixedRanks { proj: Projection, expected: usize, found: usize },
    #[error("A is {a_rows}x{a_cols} but B is {b_rows}x{b_cols}; A.cols must equal B.rows")]
    PairMismatch { a_rows: usize, a_cols: usize, b_rows: usize, b_cols: usize },
}

/// Per-adapter low-rank matrices for each enabled target projection.
/// All projections of one adapter share the same rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterWeights {
    pub adapter_id: u64,
    pub rank: usize,
    pairs: Vec<(Projection, LowRankPair)>,
}

impl AdapterWeights {
    pub fn new(
        adapter_id: u64,
        pairs: Vec<(Projection, LowRankPair)>,
    ) -> Result<Self, AdapterError> {
        let rank = pairs.first().map(|(_, p)| p.rank()).unwrap_or(0);
        if rank == 0 {
            return Err(AdapterError::ZeroRank);
        }
        for (proj, pair) in &pairs {
            if pair.a.cols() != pair.b.rows() {
                return Err(AdapterError::PairMismatch {
                    a_rows: pair.a.rows(),
                    a_cols: pair.a.cols(),
                    b_rows: pair.b.rows(),
                    b_cols: pair.b.cols(),
                });
            }
            if pair.rank() != rank {
                return Err(AdapterError::MixedRanks { proj: *proj, expected: rank, found: pair.rank() });
            }
            let (h, d) = (pair.a.rows(), pair.b.cols());
            if rank > h.min(d) {
                return Err(AdapterError::RankTooLarge { rank, h, d });
            }
        }
        Ok(Self { adapter_id, rank, pairs })
    }

    /// Random adapter over all four projections, h x r and r x d per pair.
    pub fn random(
        adapter_id: u64,
        h: usize,
        d: usize,
        rank: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let pairs = Projection::ALL
            .iter()
            .map(|&p| {
                (p, LowRankPair {
                    a: DenseMatrix::random(h, rank, rng),
                    b: DenseMatrix::random(rank, d, rng),
                })
            })
            .collect();
        Self::new(adapter_id, pairs).expect("random adapter is well formed")
    }

    pub fn pair(&self, proj: Projection) -> Option<&LowRankPair> {
        self.pairs.iter().find(|(p, _)| *p == proj).map(|(_, pair)| pair)
    }

    pub fn projections(&self) -> impl Iterator<Item = Projection> + '_ {
        self.pairs.iter().map(|(p, _)| *p)
    }
}

/// Base model dimensions; `hidden_in` is the input width h, `hidden_out` the
/// projection output width d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseModelConfig {
    pub hidden_in: usize,
    pub hidden_out: usize,
    pub num_layers: usize,
    pub projections_per_layer: usize,
}

impl Default for BaseModelConfig {
    fn default() -> Self {
        Self { hidden_in: 4096, hidden_out: 4096, num_layers: 1, projections_per_layer: 4 }
    }
}

/// `h = xW`.
pub fn forward_base(x: &DenseMatrix, w: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
    x.matmul(w)
}

/// `xW + (xA)B`, never forming `W + AB`.
pub fn forward_factored(
    x: &DenseMatrix,
    w: &DenseMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
) -> Result<DenseMatrix, MatrixError> {
    let mut ops = OpCounter::new();
    forward_factored_counted(x, w, a, b, &mut ops)
}

pub fn forward_factored_counted(
    x: &DenseMatrix,
    w: &DenseMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
    ops: &mut OpCounter,
) -> Result<DenseMatrix, MatrixError> {
    let base = x.matmul_counted(w, ops)?;
    let xa = x.matmul_counted(a, ops)?;
    let delta = xa.matmul_counted(b, ops)?;
    base.add(&delta)
}

/// `x(W + AB)`: materializes the merged weight, then multiplies.
pub fn forward_merged(
    x: &DenseMatrix,
    w: &DenseMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
) -> Result<DenseMatrix, MatrixError> {
    let mut ops = OpCounter::new();
    forward_merged_counted(x, w, a, b, &mut ops)
}

pub fn forward_merged_counted(
    x: &DenseMatrix,
    w: &DenseMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
    ops: &mut OpCounter,
) -> Result<DenseMatrix, MatrixError> {
    let merged = merge_adapter_counted(w, a, b, ops)?;
    x.matmul_counted(&merged, ops)
}

/// `W + AB`.
pub fn merge_adapter(
    w: &DenseMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
) -> Result<DenseMatrix, MatrixError> {
    let mut ops = OpCounter::new();
    merge_adapter_counted(w, a, b, &mut ops)
}

pub fn merge_adapter_counted(
    w: &DenseMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
    ops: &mut OpCounter,
) -> Result<DenseMatrix, MatrixError> {
    let ab = a.matmul_counted(b, ops)?;
    ops.flops += (w.rows() * w.cols()) as u64;
    w.add(&ab)
}

/// `W' - AB`, the inverse of [`merge_adapter`].
pub fn unmerge_adapter(
    w_merged: &DenseMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
) -> Result<DenseMatrix, MatrixError> {
    let ab = a.matmul(b)?;
    w_merged.sub(&ab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn base_zero_input_gives_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = DenseMatrix::random(6, 4, &mut rng);
        let x = DenseMatrix::zeros(1, 6);
        let out = forward_base(&x, &w).unwrap();
        assert_eq!(out, DenseMatrix::zeros(1, 4));
    }

    #[test]
    fn base_identity_input_returns_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = DenseMatrix::random(5, 3, &mut rng);
        let out = forward_base(&DenseMatrix::identity(5), &w).unwrap();
        assert!(out.max_abs_diff(&w) == 0.0);
    }

    #[test]
    fn factored_zero_adapter_equals_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseMatrix::random(2, 8, &mut rng);
        let w = DenseMatrix::random(8, 8, &mut rng);
        let a = DenseMatrix::zeros(8, 2);
        let b = DenseMatrix::random(2, 8, &mut rng);
        let out = forward_factored(&x, &w, &a, &b).unwrap();
        let base = forward_base(&x, &w).unwrap();
        assert!(out.max_abs_diff(&base) <= 1e-15);
    }

    #[test]
    fn full_rank_adapter_can_cancel_base() {
        // h = d = r: A = I, B = -W, so xW + xAB = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = DenseMatrix::random(4, 4, &mut rng);
        let x = DenseMatrix::random(3, 4, &mut rng);
        let a = DenseMatrix::identity(4);
        let b = DenseMatrix::from_fn(4, 4, |r, c| -w.get(r, c));
        let out = forward_factored(&x, &w, &a, &b).unwrap();
        assert!(out.max_abs() <= 1e-12);
    }

    #[test]
    fn factored_matches_merged_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DenseMatrix::random(3, 8, &mut rng);
        let w = DenseMatrix::random(8, 8, &mut rng);
        let a = DenseMatrix::random(8, 2, &mut rng);
        let b = DenseMatrix::random(2, 8, &mut rng);
        let f = forward_factored(&x, &w, &a, &b).unwrap();
        let m = forward_merged(&x, &w, &a, &b).unwrap();
        assert!(relative_error(&f, &m) <= 1e-9);
    }

    #[test]
    fn merged_zero_b_equals_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DenseMatrix::random(2, 6, &mut rng);
        let w = DenseMatrix::random(6, 4, &mut rng);
        let a = DenseMatrix::random(6, 3, &mut rng);
        let b = DenseMatrix::zeros(3, 4);
        let m = forward_merged(&x, &w, &a, &b).unwrap();
        let base = forward_base(&x, &w).unwrap();
        assert!(m.max_abs_diff(&base) == 0.0);
    }

    #[test]
    fn basis_row_selects_merged_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = DenseMatrix::random(5, 4, &mut rng);
        let a = DenseMatrix::random(5, 2, &mut rng);
        let b = DenseMatrix::random(2, 4, &mut rng);
        let k = 3;
        let x = DenseMatrix::from_fn(1, 5, |_, c| if c == k { 1.0 } else { 0.0 });
        let m = forward_merged(&x, &w, &a, &b).unwrap();
        let merged = merge_adapter(&w, &a, &b).unwrap();
        for c in 0..4 {
            assert!((m.get(0, c) - merged.get(k, c)).abs() <= 1e-12);
        }
    }

    #[test]
    fn merge_unmerge_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = DenseMatrix::random(16, 16, &mut rng);
        let a = DenseMatrix::random(16, 4, &mut rng);
        let b = DenseMatrix::random(4, 16, &mut rng);
        let merged = merge_adapter(&w, &a, &b).unwrap();
        let back = unmerge_adapter(&merged, &a, &b).unwrap();
        assert!(relative_error(&back, &w) <= 1e-9);
    }

    #[test]
    fn merge_zero_adapter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = DenseMatrix::random(6, 6, &mut rng);
        let a = DenseMatrix::zeros(6, 2);
        let b = DenseMatrix::random(2, 6, &mut rng);
        let merged = merge_adapter(&w, &a, &b).unwrap();
        assert!(merged.max_abs_diff(&w) == 0.0);
    }

    #[test]
    fn successive_merges_commute() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = DenseMatrix::random(8, 8, &mut rng);
        let a1 = DenseMatrix::random(8, 2, &mut rng);
        let b1 = DenseMatrix::random(2, 8, &mut rng);
        let a2 = DenseMatrix::random(8, 3, &mut rng);
        let b2 = DenseMatrix::random(3, 8, &mut rng);
        let m12 = merge_adapter(&merge_adapter(&w, &a1, &b1).unwrap(), &a2, &b2).unwrap();
        let m21 = merge_adapter(&merge_adapter(&w, &a2, &b2).unwrap(), &a1, &b1).unwrap();
        assert!(m12.max_abs_diff(&m21) <= 1e-12);
    }

    #[test]
    fn factored_cheaper_for_one_batch_dearer_over_many() {
        // Factored pays 2Bhr + 2Brd extra work every batch; merged pays the
        // 2hrd + hd rebuild once. One batch favors factored, many do not.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (bsz, h, d, r) = (16, 64, 64, 8);
        let x = DenseMatrix::random(bsz, h, &mut rng);
        let w = DenseMatrix::random(h, d, &mut rng);
        let a = DenseMatrix::random(h, r, &mut rng);
        let b = DenseMatrix::random(r, d, &mut rng);

        let mut factored_once = OpCounter::new();
        forward_factored_counted(&x, &w, &a, &b, &mut factored_once).unwrap();
        let mut merged_once = OpCounter::new();
        forward_merged_counted(&x, &w, &a, &b, &mut merged_once).unwrap();
        assert!(factored_once.flops < merged_once.flops);

        // Amortize the merge across many batches: rebuild once, reuse after.
        let batches = 10;
        let mut factored_many = OpCounter::new();
        for _ in 0..batches {
            forward_factored_counted(&x, &w, &a, &b, &mut factored_many).unwrap();
        }
        let mut merged_many = OpCounter::new();
        let merged = merge_adapter_counted(&w, &a, &b, &mut merged_many).unwrap();
        for _ in 0..batches {
            x.matmul_counted(&merged, &mut merged_many).unwrap();
        }
        assert!(factored_many.flops > merged_many.flops);
    }

    #[test]
    fn adapter_weights_validation() {
        let pair = |h: usize, r: usize, d: usize| LowRankPair {
            a: DenseMatrix::zeros(h, r),
            b: DenseMatrix::zeros(r, d),
        };
        assert!(matches!(AdapterWeights::new(0, vec![]), Err(AdapterError::ZeroRank)));
        let mixed = AdapterWeights::new(
            1,
            vec![(Projection::Query, pair(8, 2, 8)), (Projection::Key, pair(8, 4, 8))],
        );
        assert!(matches!(mixed, Err(AdapterError::MixedRanks { .. })));
        let too_big = AdapterWeights::new(2, vec![(Projection::Query, pair(4, 6, 8))]);
        assert!(matches!(too_big, Err(AdapterError::RankTooLarge { .. })));
        let ok = AdapterWeights::new(3, vec![(Projection::Query, pair(8, 2, 8))]).unwrap();
        assert_eq!(ok.rank, 2);
        assert!(ok.pair(Projection::Key).is_none());
    }
}
