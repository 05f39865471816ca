//! Tile-sparse spatio-temporal attention for latent video diffusion.
//!
//! The crate is organized around a token grid partitioned into tiles
//! ([`grid`]), tile-level sliding-window block masks driven by a piecewise
//! timestep schedule ([`mask`]), dense / block-sparse / differentiable-window
//! attention kernels ([`attention`]), a small DDPM-style diffusion core
//! ([`diffusion`]), a desk-scale denoiser and training loop that learns the
//! window sizes jointly with the network weights ([`model`]), and a
//! dense-vs-sparse benchmark harness plus image metrics ([`bench`]).

pub mod attention;
pub mod bench;
pub mod diffusion;
pub mod grid;
pub mod mask;
pub mod model;
pub mod util;

pub use attention::{AttentionError, AttentionInputs, AttentionOutput, SoftWindowParams};
pub use grid::{GridError, GridSpec};
pub use mask::{BlockMask, MaskError, Window, WindowSchedule};
