//! Dense reference attention: two-pass masked softmax per query row.

use ndarray::{Array2, Array3, Array4};
use rayon::prelude::*;

use super::{AttentionError, AttentionInputs, AttentionOutput, BiasTable, Scalar};

/// Exact masked softmax attention. Masked logits are excluded from the
/// normalizer entirely (true -inf semantics), so a masked row never produces
/// NaN; an all-false row is rejected up front.
///
/// This is the oracle path the sparse and soft kernels are checked against.
pub fn dense_attention<T: Scalar>(
    inputs: &AttentionInputs<T>,
    token_mask: Option<&Array2<bool>>,
) -> Result<AttentionOutput<T>, AttentionError> {
    dense_core(inputs, token_mask, None)
}

/// Shared implementation for [`dense_attention`] and the soft-window forward:
/// optional token mask, optional additive tile-level bias.
pub(crate) fn dense_core<T: Scalar>(
    inputs: &AttentionInputs<T>,
    token_mask: Option<&Array2<bool>>,
    bias: Option<&BiasTable>,
) -> Result<AttentionOutput<T>, AttentionError> {
    let (b_count, h_count, s, d) = inputs.dims();
    let mask_slice = validate_mask(token_mask, s)?;
    let (q, k, v) = inputs.slices();
    let scale = inputs.scale();

    let mut out = vec![T::zero(); b_count * h_count * s * d];
    let mut row_sums = vec![T::zero(); b_count * h_count * s];

    for b in 0..b_count {
        for h in 0..h_count {
            let base = (b * h_count + h) * s * d;
            let q_bh = &q[base..base + s * d];
            let k_bh = &k[base..base + s * d];
            let v_bh = &v[base..base + s * d];
            let out_bh = &mut out[base..base + s * d];
            let rs_base = (b * h_count + h) * s;
            let rs_bh = &mut row_sums[rs_base..rs_base + s];

            out_bh
                .par_chunks_mut(d)
                .zip(rs_bh.par_iter_mut())
                .enumerate()
                .for_each_init(
                    || vec![T::zero(); s],
                    |buf, (p, (orow, rs))| {
                        let qrow = &q_bh[p * d..(p + 1) * d];
                        let mrow = mask_slice.map(|m| &m[p * s..(p + 1) * s]);
                        *rs = attention_row(qrow, k_bh, v_bh, s, d, scale, mrow, bias, p, buf, orow);
                    },
                );
        }
    }

    let out = Array4::from_shape_vec((b_count, h_count, s, d), out).expect("shape");
    let row_sums = Array3::from_shape_vec((b_count, h_count, s), row_sums).expect("shape");
    Ok(AttentionOutput {
        out,
        row_sums: Some(row_sums),
    })
}

/// Returns the flat mask slice after dimension and empty-row validation.
fn validate_mask<'m>(
    token_mask: Option<&'m Array2<bool>>,
    s: usize,
) -> Result<Option<&'m [bool]>, AttentionError> {
    let Some(m) = token_mask else { return Ok(None) };
    if m.dim() != (s, s) {
        return Err(AttentionError::Shape(format!(
            "token mask is {:?}, expected ({s}, {s})",
            m.dim()
        )));
    }
    let slice = m
        .as_slice()
        .ok_or_else(|| AttentionError::Shape("token mask must be in standard layout".into()))?;
    for p in 0..s {
        if !slice[p * s..(p + 1) * s].iter().any(|&x| x) {
            return Err(AttentionError::EmptyRow { row: p });
        }
    }
    Ok(Some(slice))
}

/// One query row of two-pass masked softmax. Returns the sum of the
/// normalized weights (the row-stochasticity diagnostic).
#[allow(clippy::too_many_arguments)]
fn attention_row<T: Scalar>(
    qrow: &[T],
    k_bh: &[T],
    v_bh: &[T],
    s: usize,
    d: usize,
    scale: T,
    mask_row: Option<&[bool]>,
    bias: Option<&BiasTable>,
    p: usize,
    buf: &mut [T],
    orow: &mut [T],
) -> T {
    let mut mx = T::neg_infinity();
    for j in 0..s {
        if let Some(m) = mask_row {
            if !m[j] {
                continue;
            }
        }
        let krow = &k_bh[j * d..j * d + d];
        let mut acc = T::zero();
        for i in 0..d {
            acc = acc + qrow[i] * krow[i];
        }
        let mut z = acc * scale;
        if let Some(bt) = bias {
            if p < bt.n_video_tokens && j < bt.n_video_tokens {
                let cell = bt.table[[p / bt.tokens_per_tile, j / bt.tokens_per_tile]];
                z = z + T::from_f64(cell).unwrap();
            }
        }
        buf[j] = z;
        if z > mx {
            mx = z;
        }
    }

    for x in orow.iter_mut() {
        *x = T::zero();
    }
    let mut l = T::zero();
    for j in 0..s {
        if let Some(m) = mask_row {
            if !m[j] {
                continue;
            }
        }
        let w = (buf[j] - mx).exp();
        buf[j] = w;
        l = l + w;
        let vrow = &v_bh[j * d..j * d + d];
        for i in 0..d {
            orow[i] = orow[i] + w * vrow[i];
        }
    }
    let inv = l.recip();
    for x in orow.iter_mut() {
        *x = *x * inv;
    }
    let mut rs = T::zero();
    for j in 0..s {
        if let Some(m) = mask_row {
            if !m[j] {
                continue;
            }
        }
        rs = rs + buf[j] * inv;
    }
    rs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::normal_array4;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(b: usize, h: usize, s: usize, d: usize, seed: u64) -> AttentionInputs<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionInputs::new(
            normal_array4((b, h, s, d), &mut rng),
            normal_array4((b, h, s, d), &mut rng),
            normal_array4((b, h, s, d), &mut rng),
        )
        .unwrap()
    }

    #[test]
    fn single_token_returns_value_row() {
        let inp = random_inputs(2, 3, 1, 5, 0);
        let out = dense_attention(&inp, None).unwrap().out;
        assert_eq!(out, *inp.v());
    }

    #[test]
    fn identity_mask_returns_values_exactly() {
        let s = 6;
        let inp = random_inputs(1, 2, s, 4, 1);
        let mut mask = Array2::from_elem((s, s), false);
        for i in 0..s {
            mask[[i, i]] = true;
        }
        let out = dense_attention(&inp, Some(&mask)).unwrap().out;
        assert_eq!(out, *inp.v());
    }

    #[test]
    fn full_mask_matches_no_mask_bitwise() {
        let inp = random_inputs(1, 2, 16, 8, 2);
        let full = Array2::from_elem((16, 16), true);
        let a = dense_attention(&inp, None).unwrap().out;
        let b = dense_attention(&inp, Some(&full)).unwrap().out;
        assert_eq!(a, b);
    }

    #[test]
    fn empty_row_rejected() {
        let inp = random_inputs(1, 1, 3, 2, 3);
        let mut mask = Array2::from_elem((3, 3), true);
        for j in 0..3 {
            mask[[1, j]] = false;
        }
        assert_eq!(
            dense_attention(&inp, Some(&mask)).unwrap_err(),
            AttentionError::EmptyRow { row: 1 }
        );
    }

    #[test]
    fn mask_dims_checked() {
        let inp = random_inputs(1, 1, 3, 2, 4);
        let mask = Array2::from_elem((2, 3), true);
        assert!(matches!(
            dense_attention(&inp, Some(&mask)),
            Err(AttentionError::Shape(_))
        ));
    }

    #[test]
    fn row_sums_are_stochastic() {
        let inp = random_inputs(2, 2, 32, 8, 5);
        let out = dense_attention(&inp, None).unwrap();
        let rs = out.row_sums.unwrap();
        for &x in rs.iter() {
            assert!((x - 1.0).abs() < 1e-9, "row sum {x}");
        }
    }
}
