//! Block-sparse sliding-tile attention with a streaming softmax.

use ndarray::Array4;
use rayon::prelude::*;

use super::{check_block_mask, check_seq_len, AttentionError, AttentionInputs, AttentionOutput, Scalar};
use crate::grid::GridSpec;
use crate::mask::{block_spans, BlockMask};

/// Block-skipping attention, numerically equivalent to [`super::dense_attention`]
/// with the token-expanded mask. Only admitted (query block, key block) pairs
/// are touched. Each query row keeps a running max and running normalizer
/// across its admitted key blocks, visited in ascending block order, so the
/// result is deterministic regardless of how rows are scheduled over threads.
pub fn sparse_tile_attention<T: Scalar>(
    inputs: &AttentionInputs<T>,
    block_mask: &BlockMask,
    grid: &GridSpec,
    n_text_tokens: usize,
) -> Result<AttentionOutput<T>, AttentionError> {
    let (b_count, h_count, s, d) = inputs.dims();
    check_seq_len(s, grid, n_text_tokens)?;
    check_block_mask(block_mask, grid, n_text_tokens)?;

    let spans = block_spans(grid, n_text_tokens);
    let n_blocks = spans.len();
    let mut admitted: Vec<Vec<u32>> = Vec::with_capacity(n_blocks);
    for qb in 0..n_blocks {
        let row: Vec<u32> = (0..n_blocks)
            .filter(|&kb| block_mask.get(qb, kb))
            .map(|kb| kb as u32)
            .collect();
        if row.is_empty() {
            return Err(AttentionError::EmptyRow { row: spans[qb].0 });
        }
        admitted.push(row);
    }

    let tokens_per_tile = grid.tokens_per_tile();
    let seq_len = grid.seq_len();
    let n_tiles = grid.n_tiles();
    let block_of_token = |p: usize| -> usize {
        if p < seq_len {
            p / tokens_per_tile
        } else {
            n_tiles + (p - seq_len)
        }
    };

    let (q, k, v) = inputs.slices();
    let scale = inputs.scale();
    let mut out = vec![T::zero(); b_count * h_count * s * d];

    for b in 0..b_count {
        for h in 0..h_count {
            let base = (b * h_count + h) * s * d;
            let q_bh = &q[base..base + s * d];
            let k_bh = &k[base..base + s * d];
            let v_bh = &v[base..base + s * d];
            let out_bh = &mut out[base..base + s * d];

            out_bh.par_chunks_mut(d).enumerate().for_each_init(
                || vec![T::zero(); tokens_per_tile],
                |block_buf, (p, orow)| {
                    let qrow = &q_bh[p * d..(p + 1) * d];
                    let mut run_max = T::neg_infinity();
                    let mut norm = T::zero();
                    for x in orow.iter_mut() {
                        *x = T::zero();
                    }
                    for &kb in &admitted[block_of_token(p)] {
                        let (ks, klen) = spans[kb as usize];
                        let mut block_max = T::neg_infinity();
                        for (jj, slot) in block_buf[..klen].iter_mut().enumerate() {
                            let krow = &k_bh[(ks + jj) * d..(ks + jj) * d + d];
                            let mut acc = T::zero();
                            for i in 0..d {
                                acc = acc + qrow[i] * krow[i];
                            }
                            let z = acc * scale;
                            *slot = z;
                            if z > block_max {
                                block_max = z;
                            }
                        }
                        if block_max > run_max {
                            // Rescale the accumulator to the new max. On the
                            // first block exp(-inf) = 0 zeroes a zero state.
                            let c = (run_max - block_max).exp();
                            norm = norm * c;
                            for x in orow.iter_mut() {
                                *x = *x * c;
                            }
                            run_max = block_max;
                        }
                        for (jj, &z) in block_buf[..klen].iter().enumerate() {
                            let w = (z - run_max).exp();
                            norm = norm + w;
                            let vrow = &v_bh[(ks + jj) * d..(ks + jj) * d + d];
                            for i in 0..d {
                                orow[i] = orow[i] + w * vrow[i];
                            }
                        }
                    }
                    let inv = norm.recip();
                    for x in orow.iter_mut() {
                        *x = *x * inv;
                    }
                },
            );
        }
    }

    let out = Array4::from_shape_vec((b_count, h_count, s, d), out).expect("shape");
    Ok(AttentionOutput { out, row_sums: None })
}
