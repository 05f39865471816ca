//! Attention kernels over (B, H, S, d) tensors with a video-token prefix and
//! an optional text-token suffix.
//!
//! Three forward paths share one set of semantics:
//! - [`dense_attention`]: the reference masked softmax, logits `q·kᵀ/√d`
//!   plus `log M` with true -inf exclusion.
//! - [`sparse_tile_attention`]: block-skipping realization of the same math
//!   with a streaming (running max / running normalizer) softmax.
//! - [`soft_window_attention`]: dense attention with a differentiable
//!   window-distance bias, so window half-widths receive gradients.

mod backward;
mod dense;
mod flops;
mod soft;
mod sparse;

pub use backward::{dense_attention_backward, soft_window_attention_backward, AttentionGrads};
pub use dense::dense_attention;
pub use flops::{flop_count, FlopCount};
pub use soft::{soft_bias_tables, soft_window_attention, SoftBiasTables, EPS_FLOOR};
pub use sparse::sparse_tile_attention;

use ndarray::{Array2, Array3, Array4};
use num_traits::{Float, FromPrimitive};
use thiserror::Error;

use crate::grid::GridSpec;
use crate::mask::BlockMask;

/// Errors from attention kernel validation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("attention row {row} admits no keys")]
    EmptyRow { row: usize },
    #[error("block mask mismatch: {0}")]
    MaskMismatch(String),
    #[error("invalid soft window parameters: {0}")]
    BadSoftParams(String),
}

/// Element type for the kernels; implemented for f32 and f64.
pub trait Scalar: Float + FromPrimitive + Send + Sync + std::fmt::Debug + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Query/key/value tensors of shape (batch, heads, seq, head_dim) plus the
/// shared 1/sqrt(d) logit scale.
#[derive(Debug, Clone)]
pub struct AttentionInputs<T: Scalar> {
    q: Array4<T>,
    k: Array4<T>,
    v: Array4<T>,
    scale: T,
}

impl<T: Scalar> AttentionInputs<T> {
    /// Validates identical shapes, positive dims, and finiteness.
    pub fn new(q: Array4<T>, k: Array4<T>, v: Array4<T>) -> Result<Self, AttentionError> {
        if q.dim() != k.dim() || q.dim() != v.dim() {
            return Err(AttentionError::Shape(format!(
                "q {:?}, k {:?}, v {:?} must agree",
                q.dim(),
                k.dim(),
                v.dim()
            )));
        }
        let (b, h, s, d) = q.dim();
        if b == 0 || h == 0 || s == 0 || d == 0 {
            return Err(AttentionError::Shape(format!(
                "all dims must be >= 1, got {:?}",
                q.dim()
            )));
        }
        for (name, a) in [("q", &q), ("k", &k), ("v", &v)] {
            if a.iter().any(|x| !x.is_finite()) {
                return Err(AttentionError::NonFinite(name));
            }
        }
        let scale = T::from_usize(d).unwrap().sqrt().recip();
        // Canonicalize to standard layout so kernels can use raw slices.
        Ok(Self {
            q: to_standard(q),
            k: to_standard(k),
            v: to_standard(v),
            scale,
        })
    }

    pub fn q(&self) -> &Array4<T> {
        &self.q
    }

    pub fn k(&self) -> &Array4<T> {
        &self.k
    }

    pub fn v(&self) -> &Array4<T> {
        &self.v
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    /// (batch, heads, seq, head_dim).
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.q.dim()
    }

    pub(crate) fn slices(&self) -> (&[T], &[T], &[T]) {
        (
            self.q.as_slice().expect("standard layout"),
            self.k.as_slice().expect("standard layout"),
            self.v.as_slice().expect("standard layout"),
        )
    }
}

fn to_standard<T: Scalar>(a: Array4<T>) -> Array4<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Attention output, same shape as the inputs. `row_sums` carries the sums of
/// the normalized attention weights per row when the computing path collects
/// them (the dense reference does; the streaming paths do not).
#[derive(Debug, Clone)]
pub struct AttentionOutput<T: Scalar> {
    pub out: Array4<T>,
    pub row_sums: Option<Array3<T>>,
}

/// Continuous window relaxation for a single schedule segment: per-axis
/// half-widths and the gate temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftWindowParams {
    pub half_widths: [f64; 3],
    pub temperature: f64,
}

impl SoftWindowParams {
    pub fn new(half_widths: [f64; 3], temperature: f64) -> Result<Self, AttentionError> {
        let p = Self {
            half_widths,
            temperature,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        if self.half_widths.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(AttentionError::BadSoftParams(format!(
                "half-widths must be finite and >= 0, got {:?}",
                self.half_widths
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(AttentionError::BadSoftParams(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Check that `s` matches the grid plus text-suffix layout.
pub(crate) fn check_seq_len(s: usize, grid: &GridSpec, n_text_tokens: usize) -> Result<(), AttentionError> {
    let want = grid.seq_len() + n_text_tokens;
    if s != want {
        return Err(AttentionError::Shape(format!(
            "seq len {s} != grid seq_len {} + {n_text_tokens} text tokens",
            grid.seq_len()
        )));
    }
    Ok(())
}

/// Check that a block mask covers the grid tiles plus text singletons.
pub(crate) fn check_block_mask(
    mask: &BlockMask,
    grid: &GridSpec,
    n_text_tokens: usize,
) -> Result<(), AttentionError> {
    let n = grid.n_tiles() + n_text_tokens;
    if mask.n_query_blocks() != n || mask.n_key_blocks() != n {
        return Err(AttentionError::MaskMismatch(format!(
            "mask is {}x{}, expected {n}x{n}",
            mask.n_query_blocks(),
            mask.n_key_blocks()
        )));
    }
    Ok(())
}

/// Additive logit bias looked up at tile granularity; applies only to
/// video x video token pairs.
pub(crate) struct BiasTable<'a> {
    pub table: &'a Array2<f64>,
    pub tokens_per_tile: usize,
    pub n_video_tokens: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn inputs_validation() {
        let a = Array4::<f64>::zeros((1, 1, 2, 3));
        let b = Array4::<f64>::zeros((1, 1, 2, 4));
        assert!(matches!(
            AttentionInputs::new(a.clone(), b, a.clone()).unwrap_err(),
            AttentionError::Shape(_)
        ));
        let mut nan = a.clone();
        nan[[0, 0, 0, 0]] = f64::NAN;
        assert!(matches!(
            AttentionInputs::new(a.clone(), a.clone(), nan).unwrap_err(),
            AttentionError::NonFinite("v")
        ));
        let ok = AttentionInputs::new(a.clone(), a.clone(), a).unwrap();
        assert!((ok.scale() - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn soft_params_validation() {
        assert!(SoftWindowParams::new([1.0, 0.0, 2.5], 0.1).is_ok());
        assert!(SoftWindowParams::new([-0.1, 0.0, 0.0], 0.1).is_err());
        assert!(SoftWindowParams::new([0.0; 3], 0.0).is_err());
        assert!(SoftWindowParams::new([f64::NAN, 0.0, 0.0], 1.0).is_err());
    }
}
