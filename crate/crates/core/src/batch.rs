//! Reference semantics for heterogeneous batched LoRA computation over
//! non-contiguous pool pages.
//!
//! A batch mixes requests with different sequence lengths and adapters with
//! different ranks. `mbgmm` is the prefill path (matrix-matrix per segment),
//! `mbgmv` the decode path (one token per segment). Both gather adapter
//! weights page-by-page from the pool. `padded_oracle` is the rejected
//! pad-to-max-rank baseline, kept as the independent check and as the
//! padded-FLOP accounting reference.

use thiserror::Error;

use crate::matrix::{DenseMatrix, MatrixError};
use crate::pool::{AdapterId, PageId, PagePool, PoolError, RequestId};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("segments do not partition batch rows: {0}")]
    SegmentOverlap(String),
    #[error("adapter {0} not resident in the pool")]
    NonResidentAdapter(AdapterId),
    #[error("decode segment for request {request} has token_count {token_count}, expected 1")]
    TokenCountNotOne { request: RequestId, token_count: usize },
    #[error("adapter ref for {adapter}: {tensor} has {got} pages, rank is {rank}")]
    BadPageCount { adapter: AdapterId, tensor: &'static str, rank: usize, got: usize },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// One request's slice of the batch activation matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSegment {
    pub request_id: RequestId,
    /// `None` means base-only traffic: the LoRA delta for these rows is zero.
    pub adapter_id: Option<AdapterId>,
    pub row_start: usize,
    pub token_count: usize,
}

/// Page lists for the A and B tensors of the projection being computed.
/// A's pages hold its columns (h-wide), B's pages hold its rows (d-wide).
#[derive(Debug, Clone)]
pub struct GatheredAdapterRef {
    pub adapter_id: AdapterId,
    pub rank: usize,
    pub a_pages: Vec<PageId>,
    pub b_pages: Vec<PageId>,
}

impl GatheredAdapterRef {
    pub fn new(
        adapter_id: AdapterId,
        rank: usize,
        a_pages: Vec<PageId>,
        b_pages: Vec<PageId>,
    ) -> Result<Self, BatchError> {
        if a_pages.len() != rank {
            return Err(BatchError::BadPageCount {
                adapter: adapter_id,
                tensor: "A",
                rank,
                got: a_pages.len(),
            });
        }
        if b_pages.len() != rank {
            return Err(BatchError::BadPageCount {
                adapter: adapter_id,
                tensor: "B",
                rank,
                got: b_pages.len(),
            });
        }
        Ok(Self { adapter_id, rank, a_pages, b_pages })
    }
}

/// Delta rows plus the arithmetic actually performed.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub delta: DenseMatrix,
    pub flops: u64,
}

fn check_partition(segments: &[BatchSegment], batch_rows: usize) -> Result<(), BatchError> {
    let mut sorted: Vec<&BatchSegment> = segments.iter().collect();
    sorted.sort_by_key(|s| s.row_start);
    let mut next = 0usize;
    for seg in sorted {
        if seg.token_count == 0 {
            return Err(BatchError::SegmentOverlap(format!(
                "request {} has zero tokens",
                seg.request_id
            )));
        }
        if seg.row_start != next {
            return Err(BatchError::SegmentOverlap(format!(
                "expected next segment at row {next}, found row {}",
                seg.row_start
            )));
        }
        next += seg.token_count;
    }
    if next != batch_rows {
        return Err(BatchError::SegmentOverlap(format!(
            "segments cover {next} rows, batch has {batch_rows}"
        )));
    }
    Ok(())
}

fn find_ref<'a>(
    refs: &'a [GatheredAdapterRef],
    adapter: AdapterId,
) -> Result<&'a GatheredAdapterRef, BatchError> {
    refs.iter()
        .find(|r| r.adapter_id == adapter)
        .ok_or(BatchError::NonResidentAdapter(adapter))
}

fn gather_pair(
    pool: &PagePool,
    aref: &GatheredAdapterRef,
) -> Result<(DenseMatrix, DenseMatrix), BatchError> {
    let gathered_a = pool.gather(&aref.a_pages).map_err(|e| match e {
        PoolError::FreePageRead(_) => BatchError::NonResidentAdapter(aref.adapter_id),
        other => BatchError::Pool(other),
    })?;
    let gathered_b = pool.gather(&aref.b_pages).map_err(|e| match e {
        PoolError::FreePageRead(_) => BatchError::NonResidentAdapter(aref.adapter_id),
        other => BatchError::Pool(other),
    })?;
    // A pages store columns: transpose back to h x r.
    Ok((gathered_a.transpose(), gathered_b))
}

/// Prefill path: per segment i with adapter a, delta rows = (x_i * A_a) * B_a.
/// Rows of adapter-less segments stay zero.
pub fn mbgmm(
    x_batch: &DenseMatrix,
    segments: &[BatchSegment],
    adapter_refs: &[GatheredAdapterRef],
    pool: &PagePool,
) -> Result<BatchOutput, BatchError> {
    check_partition(segments, x_batch.rows())?;
    let d = pool.page_size();
    let mut delta = DenseMatrix::zeros(x_batch.rows(), d);
    let mut flops = 0u64;
    for seg in segments {
        let Some(adapter) = seg.adapter_id else { continue };
        let aref = find_ref(adapter_refs, adapter)?;
        let (a, b) = gather_pair(pool, aref)?;
        let x_seg = x_batch.row_slice(seg.row_start, seg.token_count);
        let xa = x_seg.matmul(&a)?;
        let seg_delta = xa.matmul(&b)?;
        for t in 0..seg.token_count {
            delta.row_mut(seg.row_start + t).copy_from_slice(seg_delta.row(t));
        }
        let (s, h, r) = (seg.token_count as u64, x_batch.cols() as u64, aref.rank as u64);
        flops += 2 * s * h * r + 2 * s * r * d as u64;
    }
    Ok(BatchOutput { delta, flops })
}

/// Decode path: every segment is a single token; per row, xAB via gathered
/// pages, accumulated vector-style.
pub fn mbgmv(
    x_rows: &DenseMatrix,
    segments: &[BatchSegment],
    adapter_refs: &[GatheredAdapterRef],
    pool: &PagePool,
) -> Result<BatchOutput, BatchError> {
    for seg in segments {
        if seg.token_count != 1 {
            return Err(BatchError::TokenCountNotOne {
                request: seg.request_id,
                token_count: seg.token_count,
            });
        }
    }
    check_partition(segments, x_rows.rows())?;
    let d = pool.page_size();
    let h = x_rows.cols();
    let mut delta = DenseMatrix::zeros(x_rows.rows(), d);
    let mut flops = 0u64;
    for seg in segments {
        let Some(adapter) = seg.adapter_id else { continue };
        let aref = find_ref(adapter_refs, adapter)?;
        let x = x_rows.row(seg.row_start);
        // xA: dot the token against each gathered A column page.
        let a_cols = pool.gather(&aref.a_pages).map_err(|e| match e {
            PoolError::FreePageRead(_) => BatchError::NonResidentAdapter(aref.adapter_id),
            other => BatchError::Pool(other),
        })?;
        let mut xa = vec![0.0; aref.rank];
        for (j, coeff) in xa.iter_mut().enumerate() {
            let col = a_cols.row(j);
            *coeff = x.iter().zip(col).map(|(p, q)| p * q).sum();
        }
        // (xA)B: scale-accumulate the gathered B row pages.
        let b_rows = pool.gather(&aref.b_pages).map_err(|e| match e {
            PoolError::FreePageRead(_) => BatchError::NonResidentAdapter(aref.adapter_id),
            other => BatchError::Pool(other),
        })?;
        let out = delta.row_mut(seg.row_start);
        for (j, &coeff) in xa.iter().enumerate() {
            for (o, &b) in out.iter_mut().zip(b_rows.row(j)) {
                *o += coeff * b;
            }
        }
        let r = aref.rank as u64;
        flops += 2 * h as u64 * r + 2 * r * d as u64;
    }
    Ok(BatchOutput { delta, flops })
}

/// A dense (un-paged) adapter as the oracle sees it.
#[derive(Debug, Clone)]
pub struct DenseLoraPair {
    pub adapter_id: AdapterId,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

/// The rejected baseline: pad every adapter in the batch to the maximum rank
/// with zeros and compute uniformly. Mathematically identical output; the
/// padded FLOP count charges every segment at the maximum rank.
pub fn padded_oracle(
    x_batch: &DenseMatrix,
    segments: &[BatchSegment],
    adapters_dense: &[DenseLoraPair],
) -> Result<BatchOutput, BatchError> {
    check_partition(segments, x_batch.rows())?;
    let h = x_batch.cols();
    let d = adapters_dense.first().map_or(h, |p| p.b.cols());
    let r_max = segments
        .iter()
        .filter_map(|s| s.adapter_id)
        .map(|id| {
            adapters_dense
                .iter()
                .find(|p| p.adapter_id == id)
                .map(|p| p.a.cols())
                .ok_or(BatchError::NonResidentAdapter(id))
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .max()
        .unwrap_or(0);

    let mut delta = DenseMatrix::zeros(x_batch.rows(), d);
    let mut flops = 0u64;
    if r_max == 0 {
        return Ok(BatchOutput { delta, flops });
    }
    let zero_a = DenseMatrix::zeros(h, r_max);
    let zero_b = DenseMatrix::zeros(r_max, d);
    for seg in segments {
        let (a_pad, b_pad) = match seg.adapter_id {
            None => (zero_a.clone(), zero_b.clone()),
            Some(id) => {
                let pair = adapters_dense
                    .iter()
                    .find(|p| p.adapter_id == id)
                    .ok_or(BatchError::NonResidentAdapter(id))?;
                let r = pair.a.cols();
                let a_pad =
                    DenseMatrix::from_fn(h, r_max, |i, j| if j < r { pair.a.get(i, j) } else { 0.0 });
                let b_pad = DenseMatrix::from_fn(r_max, d, |i, j| {
                    if i < r {
                        pair.b.get(i, j)
                    } else {
                        0.0
                    }
                });
                (a_pad, b_pad)
            }
        };
        let x_seg = x_batch.row_slice(seg.row_start, seg.token_count);
        let seg_delta = x_seg.matmul(&a_pad)?.matmul(&b_pad)?;
        for t in 0..seg.token_count {
            delta.row_mut(seg.row_start + t).copy_from_slice(seg_delta.row(t));
        }
        let s = seg.token_count as u64;
        flops += 2 * s * h as u64 * r_max as u64 + 2 * s * r_max as u64 * d as u64;
    }
    Ok(BatchOutput { delta, flops })
}

/// Load a dense adapter's A and B for one projection into the pool as two
/// tensors (A stored column-per-page, B row-per-page) and return the gather
/// reference. Requires h = d = pool page size.
pub fn stage_adapter(
    pool: &mut PagePool,
    pair: &DenseLoraPair,
) -> Result<GatheredAdapterRef, BatchError> {
    let rank = pair.a.cols();
    let a_t = pair.a.transpose();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * rank);
    for i in 0..rank {
        rows.push(a_t.row(i).to_vec());
    }
    for i in 0..rank {
        rows.push(pair.b.row(i).to_vec());
    }
    pool.load_adapter(pair.adapter_id, rank, 2, &rows)?;
    let a_pages = pool.adapter_tensor_pages(pair.adapter_id, 0)?.to_vec();
    let b_pages = pool.adapter_tensor_pages(pair.adapter_id, 1)?.to_vec();
    GatheredAdapterRef::new(pair.adapter_id, rank, a_pages, b_pages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: usize = 16;

    fn pool() -> PagePool {
        PagePool::new(H, 2048)
    }

    fn random_pair(id: AdapterId, rank: usize, rng: &mut impl Rng) -> DenseLoraPair {
        DenseLoraPair {
            adapter_id: id,
            a: DenseMatrix::random(H, rank, rng),
            b: DenseMatrix::random(rank, H, rng),
        }
    }

    fn segments_for(lengths: &[(Option<AdapterId>, usize)]) -> Vec<BatchSegment> {
        let mut row = 0;
        lengths
            .iter()
            .enumerate()
            .map(|(i, &(adapter_id, token_count))| {
                let seg = BatchSegment { request_id: i as u64, adapter_id, row_start: row, token_count };
                row += token_count;
                seg
            })
            .collect()
    }

    #[test]
    fn zero_adapter_batch_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pool = pool();
        let zero = DenseLoraPair {
            adapter_id: 1,
            a: DenseMatrix::zeros(H, 4),
            b: DenseMatrix::zeros(4, H),
        };
        let aref = stage_adapter(&mut pool, &zero).unwrap();
        let segs = segments_for(&[(Some(1), 3), (Some(1), 2)]);
        let x = DenseMatrix::random(5, H, &mut rng);
        let out = mbgmm(&x, &segs, &[aref], &pool).unwrap();
        assert_eq!(out.delta.max_abs(), 0.0);
    }

    #[test]
    fn mbgmm_matches_padded_oracle_mixed_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pool = pool();
        let pairs: Vec<DenseLoraPair> = [(1u64, 8usize), (2, 16), (3, 16)]
            .iter()
            .map(|&(id, r)| random_pair(id, r.min(H), &mut rng))
            .collect();
        let refs: Vec<GatheredAdapterRef> =
            pairs.iter().map(|p| stage_adapter(&mut pool, p).unwrap()).collect();
        let segs = segments_for(&[(Some(1), 5), (Some(2), 1), (Some(3), 9)]);
        let x = DenseMatrix::random(15, H, &mut rng);
        let got = mbgmm(&x, &segs, &refs, &pool).unwrap();
        let want = padded_oracle(&x, &segs, &pairs).unwrap();
        assert!(got.delta.max_abs_diff(&want.delta) <= 1e-9 * want.delta.max_abs().max(1.0));
        assert!(got.flops < want.flops);
    }

    #[test]
    fn whole_batch_segment_equals_factored_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pool = pool();
        let pair = random_pair(9, 8, &mut rng);
        let aref = stage_adapter(&mut pool, &pair).unwrap();
        let x = DenseMatrix::random(6, H, &mut rng);
        let segs = segments_for(&[(Some(9), 6)]);
        let got = mbgmm(&x, &segs, &[aref], &pool).unwrap();
        // Cross-module oracle: factored forward minus base forward.
        let w = DenseMatrix::random(H, H, &mut rng);
        let full = lora::forward_factored(&x, &w, &pair.a, &pair.b).unwrap();
        let base = lora::forward_base(&x, &w).unwrap();
        let want = full.sub(&base).unwrap();
        assert!(got.delta.max_abs_diff(&want) <= 1e-9 * want.max_abs().max(1.0));
    }

    #[test]
    fn mbgmv_rank_one_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pool = pool();
        // A = e_1 column, B = e_1 row: delta = x[0] at position 0.
        let a = DenseMatrix::from_fn(H, 1, |r, _| if r == 0 { 1.0 } else { 0.0 });
        let b = DenseMatrix::from_fn(1, H, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let pair = DenseLoraPair { adapter_id: 1, a, b };
        let aref = stage_adapter(&mut pool, &pair).unwrap();
        let x = DenseMatrix::random(1, H, &mut rng);
        let segs = segments_for(&[(Some(1), 1)]);
        let out = mbgmv(&x, &segs, &[aref], &pool).unwrap();
        assert!((out.delta.get(0, 0) - x.get(0, 0)).abs() <= 1e-15);
        for c in 1..H {
            assert_eq!(out.delta.get(0, c), 0.0);
        }
    }

    #[test]
    fn mbgmv_matches_per_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pool = PagePool::new(H, 4096);
        let ranks = [8usize, 16, 8, 16, 8, 16, 8];
        let pairs: Vec<DenseLoraPair> = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| random_pair(i as u64, r.min(H), &mut rng))
            .collect();
        let refs: Vec<GatheredAdapterRef> =
            pairs.iter().map(|p| stage_adapter(&mut pool, p).unwrap()).collect();
        let segs: Vec<BatchSegment> = (0..32)
            .map(|row| BatchSegment {
                request_id: row as u64,
                adapter_id: Some((row % 7) as u64),
                row_start: row,
                token_count: 1,
            })
            .collect();
        let x = DenseMatrix::random(32, H, &mut rng);
        let got = mbgmv(&x, &segs, &refs, &pool).unwrap();
        for row in 0..32 {
            let pair = &pairs[row % 7];
            let xr = x.row_slice(row, 1);
            let want = xr.matmul(&pair.a).unwrap().matmul(&pair.b).unwrap();
            let diff: f64 = (0..H).map(|c| (got.delta.get(row, c) - want.get(0, c)).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-9 * want.max_abs().max(1.0), "row {row}: {diff}");
        }
    }

    #[test]
    fn mbgmv_rejects_multi_token_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pool = pool();
        let pair = random_pair(1, 2, &mut rng);
        let aref = stage_adapter(&mut pool, &pair).unwrap();
        let x = DenseMatrix::random(2, H, &mut rng);
        let segs = segments_for(&[(Some(1), 2)]);
        assert!(matches!(
            mbgmv(&x, &segs, &[aref], &pool),
            Err(BatchError::TokenCountNotOne { token_count: 2, .. })
        ));
    }

    #[test]
    fn missing_and_evicted_adapters_are_non_resident() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pool = pool();
        let pair = random_pair(1, 2, &mut rng);
        let aref = stage_adapter(&mut pool, &pair).unwrap();
        let x = DenseMatrix::random(2, H, &mut rng);
        let segs = segments_for(&[(Some(2), 2)]);
        assert!(matches!(
            mbgmm(&x, &segs, &[aref.clone()], &pool),
            Err(BatchError::NonResidentAdapter(2))
        ));
        pool.evict_adapter(1).unwrap();
        let segs = segments_for(&[(Some(1), 2)]);
        assert!(matches!(
            mbgmm(&x, &segs, &[aref], &pool),
            Err(BatchError::NonResidentAdapter(1))
        ));
    }

    #[test]
    fn overlapping_and_gappy_segments_rejected() {
        let pool = pool();
        let x = DenseMatrix::zeros(4, H);
        let overlap = vec![
            BatchSegment { request_id: 0, adapter_id: None, row_start: 0, token_count: 3 },
            BatchSegment { request_id: 1, adapter_id: None, row_start: 2, token_count: 2 },
        ];
        assert!(matches!(mbgmm(&x, &overlap, &[], &pool), Err(BatchError::SegmentOverlap(_))));
        let gap = vec![
            BatchSegment { request_id: 0, adapter_id: None, row_start: 0, token_count: 1 },
            BatchSegment { request_id: 1, adapter_id: None, row_start: 2, token_count: 2 },
        ];
        assert!(matches!(mbgmm(&x, &gap, &[], &pool), Err(BatchError::SegmentOverlap(_))));
    }

    #[test]
    fn padded_flops_dominate_unpadded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pool = pool();
        let pairs =
            vec![random_pair(1, 2, &mut rng), random_pair(2, 8, &mut rng)];
        let refs: Vec<GatheredAdapterRef> =
            pairs.iter().map(|p| stage_adapter(&mut pool, p).unwrap()).collect();
        let segs = segments_for(&[(Some(1), 4), (Some(2), 3)]);
        let x = DenseMatrix::random(7, H, &mut rng);
        let fast = mbgmm(&x, &segs, &refs, &pool).unwrap();
        let padded = padded_oracle(&x, &segs, &pairs).unwrap();
        assert!(padded.flops > fast.flops);

        // Single adapter: identical counts.
        let segs = segments_for(&[(Some(2), 4), (Some(2), 3)]);
        let fast = mbgmm(&x, &segs, &refs, &pool).unwrap();
        let padded = padded_oracle(&x, &segs, &pairs).unwrap();
        assert_eq!(padded.flops, fast.flops);
    }

    #[test]
    fn empty_batch_is_empty() {
        let out = padded_oracle(&DenseMatrix::zeros(0, H), &[], &[]).unwrap();
        assert_eq!(out.delta.rows(), 0);
        assert_eq!(out.flops, 0);
    }

    #[test]
    fn segment_order_does_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pool = pool();
        let pairs = vec![random_pair(1, 4, &mut rng), random_pair(2, 8, &mut rng)];
        let refs: Vec<GatheredAdapterRef> =
            pairs.iter().map(|p| stage_adapter(&mut pool, p).unwrap()).collect();
        let segs = segments_for(&[(Some(1), 3), (Some(2), 5), (None, 2)]);
        let x = DenseMatrix::random(10, H, &mut rng);
        let forward = mbgmm(&x, &segs, &refs, &pool).unwrap();
        let mut reversed = segs.clone();
        reversed.reverse();
        let backward = mbgmm(&x, &reversed, &refs, &pool).unwrap();
        assert_eq!(forward.delta, backward.delta);
    }
}
