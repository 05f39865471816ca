//! Timestep-scheduled sliding-tile block masks and cross-modal masks.
//!
//! Windows are measured in tiles. A window is always odd per axis and is
//! re-centered ("clamped") at grid boundaries so that every query row admits
//! a constant number of key tiles: per axis exactly `min(window, extent)`.
//! Text tokens are singleton blocks appended after all video tiles; they
//! attend everywhere and are attended by everyone.

use std::sync::{Arc, OnceLock};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridSpec;

/// Errors from window validation, schedules, and mask (de)serialization.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    /// Window dimensions must be odd so the window is symmetric around a
    /// center tile. Even values in configs are rejected, not rounded.
    #[error("window {axis} dimension {size} is even; windows must be odd")]
    EvenWindow { axis: char, size: usize },
    #[error("window {axis} dimension is zero")]
    ZeroWindow { axis: char },
    #[error("invalid window schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} out of range [1, {n_steps}]")]
    OutOfRangeTimestep { t: usize, n_steps: usize },
    #[error("mask dimension mismatch: {0}")]
    SizeMismatch(String),
    #[error("cannot decode mask bytes: {0}")]
    Decode(String),
}

/// A per-axis tile window (T_w, H_w, W_w). Serialized as a `[t, h, w]` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Window {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Window {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn axes(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    /// Reject zero or even extents.
    pub fn validate(&self) -> Result<(), MaskError> {
        for (axis, size) in [('t', self.t), ('h', self.h), ('w', self.w)] {
            if size == 0 {
                return Err(MaskError::ZeroWindow { axis });
            }
            if size % 2 == 0 {
                return Err(MaskError::EvenWindow { axis, size });
            }
        }
        Ok(())
    }

    /// Per-axis half-widths (window - 1) / 2.
    pub fn half_widths(&self) -> [usize; 3] {
        self.axes().map(|w| (w - 1) / 2)
    }
}

impl From<[usize; 3]> for Window {
    fn from(a: [usize; 3]) -> Self {
        Window::new(a[0], a[1], a[2])
    }
}

impl From<Window> for [usize; 3] {
    fn from(w: Window) -> Self {
        w.axes()
    }
}

/// Raw schedule fields as serialized. Validated into [`WindowSchedule`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowScheduleConfig {
    pub n_steps: usize,
    /// L+1 ascending cut points over timesteps, first = 1, last = n_steps + 1.
    pub boundaries: Vec<usize>,
    /// Per-segment windows in ascending-timestep order (segment i covers
    /// `[boundaries[i], boundaries[i+1])`).
    pub windows: Vec<Window>,
    /// Per-segment continuous half-widths, the trainable relaxation of
    /// `windows`.
    pub soft_half_widths: Vec<[f64; 3]>,
    /// Softness scalar for the relaxed window gates.
    pub temperature: f64,
}

/// Piecewise-constant map from diffusion timestep to tile-window sizes,
/// together with the continuous trainable half-widths it was frozen from.
///
/// Timesteps follow the forward-noising index: `t = n_steps` is the noisiest
/// step, so the coarse large-window phase of a sampling run corresponds to
/// the highest-t segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WindowScheduleConfig", into = "WindowScheduleConfig")]
pub struct WindowSchedule {
    n_steps: usize,
    boundaries: Vec<usize>,
    windows: Vec<Window>,
    soft_half_widths: Vec<[f64; 3]>,
    temperature: f64,
}

impl WindowSchedule {
    /// Validate and build a schedule from explicit boundaries. `windows[i]`
    /// applies to timesteps in `[boundaries[i], boundaries[i+1])`.
    pub fn new(
        n_steps: usize,
        boundaries: Vec<usize>,
        windows: Vec<Window>,
        soft_half_widths: Vec<[f64; 3]>,
        temperature: f64,
    ) -> Result<Self, MaskError> {
        if n_steps == 0 {
            return Err(MaskError::InvalidSchedule("n_steps must be >= 1".into()));
        }
        if windows.is_empty() {
            return Err(MaskError::InvalidSchedule("need at least one segment".into()));
        }
        if boundaries.len() != windows.len() + 1 {
            return Err(MaskError::InvalidSchedule(format!(
                "expected {} boundaries for {} segments, got {}",
                windows.len() + 1,
                windows.len(),
                boundaries.len()
            )));
        }
        if soft_half_widths.len() != windows.len() {
            return Err(MaskError::InvalidSchedule(
                "soft_half_widths length must match windows".into(),
            ));
        }
        if boundaries[0] != 1 || *boundaries.last().unwrap() != n_steps + 1 {
            return Err(MaskError::InvalidSchedule(format!(
                "boundaries must start at 1 and end at n_steps + 1 = {}",
                n_steps + 1
            )));
        }
        if !boundaries.windows(2).all(|p| p[0] < p[1]) {
            return Err(MaskError::InvalidSchedule(
                "boundaries must be strictly increasing".into(),
            ));
        }
        for w in &windows {
            w.validate()?;
        }
        for r in &soft_half_widths {
            if r.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(MaskError::InvalidSchedule(
                    "soft half-widths must be finite and >= 0".into(),
                ));
            }
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(MaskError::InvalidSchedule("temperature must be > 0".into()));
        }
        Ok(Self {
            n_steps,
            boundaries,
            windows,
            soft_half_widths,
            temperature,
        })
    }

    /// Build a schedule that splits `[1, n_steps]` into equal segments.
    ///
    /// `windows_noise_first` lists one window per segment starting with the
    /// segment applied to the *noisiest* (highest-t) timesteps, i.e. in the
    /// order a sampling run encounters them. Soft half-widths are initialized
    /// to `(window - 1) / 2` per axis.
    pub fn equal_split(
        n_steps: usize,
        windows_noise_first: &[Window],
        temperature: f64,
    ) -> Result<Self, MaskError> {
        let n_seg = windows_noise_first.len();
        if n_seg == 0 {
            return Err(MaskError::InvalidSchedule("need at least one segment".into()));
        }
        if n_steps < n_seg {
            return Err(MaskError::InvalidSchedule(format!(
                "cannot split {n_steps} steps into {n_seg} segments"
            )));
        }
        let boundaries: Vec<usize> = (0..=n_seg).map(|i| 1 + i * n_steps / n_seg).collect();
        let windows: Vec<Window> = windows_noise_first.iter().rev().copied().collect();
        let soft = windows
            .iter()
            .map(|w| w.half_widths().map(|r| r as f64))
            .collect();
        Self::new(n_steps, boundaries, windows, soft, temperature)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_segments(&self) -> usize {
        self.windows.len()
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn soft_half_widths(&self) -> &[[f64; 3]] {
        &self.soft_half_widths
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Index of the segment whose half-open interval contains `t`.
    pub fn segment_of(&self, t: usize) -> Result<usize, MaskError> {
        if t < 1 || t > self.n_steps {
            return Err(MaskError::OutOfRangeTimestep {
                t,
                n_steps: self.n_steps,
            });
        }
        // partition_point returns the count of boundaries <= t; segment index
        // is one less.
        Ok(self.boundaries.partition_point(|&b| b <= t) - 1)
    }

    /// Window triple active at timestep `t`.
    pub fn window_at(&self, t: usize) -> Result<Window, MaskError> {
        Ok(self.windows[self.segment_of(t)?])
    }
}

impl TryFrom<WindowScheduleConfig> for WindowSchedule {
    type Error = MaskError;
    fn try_from(c: WindowScheduleConfig) -> Result<Self, Self::Error> {
        Self::new(c.n_steps, c.boundaries, c.windows, c.soft_half_widths, c.temperature)
    }
}

impl From<WindowSchedule> for WindowScheduleConfig {
    fn from(s: WindowSchedule) -> Self {
        WindowScheduleConfig {
            n_steps: s.n_steps,
            boundaries: s.boundaries,
            windows: s.windows,
            soft_half_widths: s.soft_half_widths,
            temperature: s.temperature,
        }
    }
}

const MASK_MAGIC: u32 = u32::from_le_bytes(*b"TBM1");
const MASK_VERSION: u32 = 1;

/// Tile-level boolean admissibility matrix. Row = query block, column = key
/// block. Video tiles come first; each text token is its own block of size 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    n_query_blocks: usize,
    n_key_blocks: usize,
    bits: Vec<bool>,
}

impl BlockMask {
    pub fn new_false(n_query_blocks: usize, n_key_blocks: usize) -> Self {
        Self {
            n_query_blocks,
            n_key_blocks,
            bits: vec![false; n_query_blocks * n_key_blocks],
        }
    }

    pub fn new_true(n_query_blocks: usize, n_key_blocks: usize) -> Self {
        Self {
            n_query_blocks,
            n_key_blocks,
            bits: vec![true; n_query_blocks * n_key_blocks],
        }
    }

    pub fn n_query_blocks(&self) -> usize {
        self.n_query_blocks
    }

    pub fn n_key_blocks(&self) -> usize {
        self.n_key_blocks
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.n_key_blocks + k]
    }

    pub fn set(&mut self, q: usize, k: usize, value: bool) {
        self.bits[q * self.n_key_blocks + k] = value;
    }

    /// One full query row of admissibility flags.
    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.n_key_blocks..(q + 1) * self.n_key_blocks]
    }

    /// Number of admitted key blocks in row `q`.
    pub fn row_count(&self, q: usize) -> usize {
        self.row(q).iter().filter(|&&b| b).count()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of true entries. 1.0 for an empty (0-block) mask by convention.
    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            return 1.0;
        }
        self.popcount() as f64 / self.bits.len() as f64
    }

    /// Serialize: 16-byte header (magic, version, n_query_blocks,
    /// n_key_blocks; little-endian u32 each), then row-major bits packed
    /// LSB-first, 8 per byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let nbits = self.bits.len();
        let mut out = Vec::with_capacity(16 + nbits.div_ceil(8));
        out.extend_from_slice(&MASK_MAGIC.to_le_bytes());
        out.extend_from_slice(&MASK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_query_blocks as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_key_blocks as u32).to_le_bytes());
        out.resize(16 + nbits.div_ceil(8), 0u8);
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[16 + i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MaskError> {
        if bytes.len() < 16 {
            return Err(MaskError::Decode(format!(
                "need at least a 16-byte header, got {} bytes",
                bytes.len()
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        if word(0) != MASK_MAGIC {
            return Err(MaskError::Decode("bad magic".into()));
        }
        if word(1) != MASK_VERSION {
            return Err(MaskError::Decode(format!("unsupported version {}", word(1))));
        }
        let nq = word(2) as usize;
        let nk = word(3) as usize;
        let nbits = nq * nk;
        let expected = 16 + nbits.div_ceil(8);
        if bytes.len() != expected {
            return Err(MaskError::Decode(format!(
                "expected {expected} bytes for a {nq}x{nk} mask, got {}",
                bytes.len()
            )));
        }
        let mut bits = vec![false; nbits];
        for (i, bit) in bits.iter_mut().enumerate() {
            *bit = bytes[16 + i / 8] & (1 << (i % 8)) != 0;
        }
        Ok(Self {
            n_query_blocks: nq,
            n_key_blocks: nk,
            bits,
        })
    }
}

/// Fraction of true entries in a mask.
pub fn mask_density(mask: &BlockMask) -> f64 {
    mask.density()
}

/// Admitted key-tile range on one axis for a query tile at `q`: the window
/// center is clamped so the window never leaves `[0, extent)` and keeps
/// constant cardinality `min(window, extent)`.
pub(crate) fn axis_admitted_range(q: usize, window: usize, extent: usize) -> (usize, usize) {
    if window >= extent {
        return (0, extent - 1);
    }
    let r = (window - 1) / 2;
    let c = q.clamp(r, extent - 1 - r);
    (c - r, c + r)
}

/// Build the video-tile sliding window block mask for one window triple.
pub fn build_sliding_tile_mask(grid: &GridSpec, window: Window) -> Result<BlockMask, MaskError> {
    window.validate()?;
    let [nt, nh, nw] = grid.tile_extents();
    let n = grid.n_tiles();
    let mut mask = BlockMask::new_false(n, n);
    for qi in 0..n {
        let [qt, qh, qw] = grid.tile_coord(qi).expect("tile index in range");
        let (t0, t1) = axis_admitted_range(qt, window.t, nt);
        let (h0, h1) = axis_admitted_range(qh, window.h, nh);
        let (w0, w1) = axis_admitted_range(qw, window.w, nw);
        for kt in t0..=t1 {
            for kh in h0..=h1 {
                let base = (kt * nh + kh) * nw;
                for kw in w0..=w1 {
                    mask.set(qi, base + kw, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Extend a square video mask with `n_text_tokens` singleton text blocks on
/// the suffix. Video->text, text->video, and text->text are all admitted.
pub fn build_cross_modal_mask(video_mask: &BlockMask, n_text_tokens: usize) -> Result<BlockMask, MaskError> {
    let nv = video_mask.n_query_blocks();
    if video_mask.n_key_blocks() != nv {
        return Err(MaskError::SizeMismatch(format!(
            "video mask must be square, got {}x{}",
            nv,
            video_mask.n_key_blocks()
        )));
    }
    let n = nv + n_text_tokens;
    let mut mask = BlockMask::new_true(n, n);
    for q in 0..nv {
        for k in 0..nv {
            mask.set(q, k, video_mask.get(q, k));
        }
    }
    Ok(mask)
}

/// Token span (start, len) of each block when `mask` covers `grid` video
/// tiles plus `n_text_tokens` singleton text blocks.
pub(crate) fn block_spans(grid: &GridSpec, n_text_tokens: usize) -> Vec<(usize, usize)> {
    let tpt = grid.tokens_per_tile();
    let mut spans = Vec::with_capacity(grid.n_tiles() + n_text_tokens);
    spans.extend((0..grid.n_tiles()).map(|i| (i * tpt, tpt)));
    spans.extend((0..n_text_tokens).map(|j| (grid.seq_len() + j, 1)));
    spans
}

fn check_mask_matches(mask: &BlockMask, grid: &GridSpec, n_text_tokens: usize) -> Result<(), MaskError> {
    let n = grid.n_tiles() + n_text_tokens;
    if mask.n_query_blocks() != n || mask.n_key_blocks() != n {
        return Err(MaskError::SizeMismatch(format!(
            "mask is {}x{}, expected {n}x{n} ({} video tiles + {n_text_tokens} text tokens)",
            mask.n_query_blocks(),
            mask.n_key_blocks(),
            grid.n_tiles(),
        )));
    }
    Ok(())
}

/// Expand a block mask to token granularity: entry (p, q) is true iff the
/// block containing p admits the block containing q.
pub fn expand_to_token_mask(
    mask: &BlockMask,
    grid: &GridSpec,
    n_text_tokens: usize,
) -> Result<Array2<bool>, MaskError> {
    check_mask_matches(mask, grid, n_text_tokens)?;
    let spans = block_spans(grid, n_text_tokens);
    let s = grid.seq_len() + n_text_tokens;
    let mut token = Array2::from_elem((s, s), false);
    for (qb, &(qs, ql)) in spans.iter().enumerate() {
        for (kb, &(ks, kl)) in spans.iter().enumerate() {
            if mask.get(qb, kb) {
                for p in qs..qs + ql {
                    for q in ks..ks + kl {
                        token[[p, q]] = true;
                    }
                }
            }
        }
    }
    Ok(token)
}

/// Lazily built masks, one per schedule segment. Construction is idempotent,
/// so concurrent first access is safe.
pub struct SegmentMaskCache {
    grid: GridSpec,
    n_text_tokens: usize,
    schedule: WindowSchedule,
    slots: Vec<OnceLock<Arc<BlockMask>>>,
}

impl SegmentMaskCache {
    pub fn new(grid: GridSpec, schedule: WindowSchedule, n_text_tokens: usize) -> Self {
        let slots = (0..schedule.n_segments()).map(|_| OnceLock::new()).collect();
        Self {
            grid,
            n_text_tokens,
            schedule,
            slots,
        }
    }

    pub fn schedule(&self) -> &WindowSchedule {
        &self.schedule
    }

    /// Composite (video + text) mask for the segment containing `t`.
    pub fn mask_for_timestep(&self, t: usize) -> Result<Arc<BlockMask>, MaskError> {
        let seg = self.schedule.segment_of(t)?;
        Ok(Arc::clone(self.slots[seg].get_or_init(|| {
            // Windows were validated at schedule construction.
            let video = build_sliding_tile_mask(&self.grid, self.schedule.windows()[seg])
                .expect("schedule windows are validated");
            let full = build_cross_modal_mask(&video, self.n_text_tokens)
                .expect("sliding tile masks are square");
            Arc::new(full)
        })))
    }
}
