//! Latent token grid, its tile partition, and the tile-major layout maps.
//!
//! Every other module addresses tokens through this layout: all tokens of
//! tile 0 precede all tokens of tile 1, tiles are ordered lexicographically
//! by (tile_t, tile_h, tile_w), and tokens within a tile by (t, h, w).
//! All indices are zero-based.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from grid construction and index maps.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GridError {
    /// A grid or tile dimension was zero.
    #[error("{name} must be >= 1")]
    ZeroSize { name: &'static str },
    /// An axis length is not an exact multiple of its tile size. Ragged
    /// grids are rejected rather than padded.
    #[error("{axis} length {len} is not divisible by its tile size {tile}")]
    Divisibility {
        axis: &'static str,
        len: usize,
        tile: usize,
    },
    /// An index fell outside its valid range.
    #[error("{what} {index} out of range [0, {bound})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
}

/// The six raw grid parameters as they appear in config files. Derived
/// quantities are recomputed and validated on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub t_len: usize,
    pub h_len: usize,
    pub w_len: usize,
    pub t_tile: usize,
    pub h_tile: usize,
    pub w_tile: usize,
}

/// A (t_len, h_len, w_len) token grid partitioned into (t_tile, h_tile,
/// w_tile) tiles, with tile-major token layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridConfig", into = "GridConfig")]
pub struct GridSpec {
    t_len: usize,
    h_len: usize,
    w_len: usize,
    t_tile: usize,
    h_tile: usize,
    w_tile: usize,
    nt: usize,
    nh: usize,
    nw: usize,
    n_tiles: usize,
    tokens_per_tile: usize,
    seq_len: usize,
}

impl GridSpec {
    /// Build a grid. Rejects zero sizes and axis lengths that do not divide
    /// evenly into tiles.
    pub fn new(
        t_len: usize,
        h_len: usize,
        w_len: usize,
        t_tile: usize,
        h_tile: usize,
        w_tile: usize,
    ) -> Result<Self, GridError> {
        let named = [
            ("t_len", t_len),
            ("h_len", h_len),
            ("w_len", w_len),
            ("t_tile", t_tile),
            ("h_tile", h_tile),
            ("w_tile", w_tile),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(GridError::ZeroSize { name });
            }
        }
        let axes = [
            ("t", t_len, t_tile),
            ("h", h_len, h_tile),
            ("w", w_len, w_tile),
        ];
        for (axis, len, tile) in axes {
            if len % tile != 0 {
                return Err(GridError::Divisibility { axis, len, tile });
            }
        }
        let (nt, nh, nw) = (t_len / t_tile, h_len / h_tile, w_len / w_tile);
        let n_tiles = nt * nh * nw;
        let tokens_per_tile = t_tile * h_tile * w_tile;
        Ok(Self {
            t_len,
            h_len,
            w_len,
            t_tile,
            h_tile,
            w_tile,
            nt,
            nh,
            nw,
            n_tiles,
            tokens_per_tile,
            seq_len: n_tiles * tokens_per_tile,
        })
    }

    pub fn from_config(c: GridConfig) -> Result<Self, GridError> {
        Self::new(c.t_len, c.h_len, c.w_len, c.t_tile, c.h_tile, c.w_tile)
    }

    /// Token lengths per axis: (t_len, h_len, w_len).
    pub fn lens(&self) -> [usize; 3] {
        [self.t_len, self.h_len, self.w_len]
    }

    /// Tokens per tile per axis: (t_tile, h_tile, w_tile).
    pub fn tile_dims(&self) -> [usize; 3] {
        [self.t_tile, self.h_tile, self.w_tile]
    }

    /// Tiles per axis: (nt, nh, nw).
    pub fn tile_extents(&self) -> [usize; 3] {
        [self.nt, self.nh, self.nw]
    }

    pub fn n_tiles(&self) -> usize {
        self.n_tiles
    }

    pub fn tokens_per_tile(&self) -> usize {
        self.tokens_per_tile
    }

    /// Total video token count (t_len * h_len * w_len).
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Tile index of token `p`. Under the tile-major layout this is
    /// `p / tokens_per_tile`.
    pub fn tile_idx(&self, p: usize) -> Result<usize, GridError> {
        self.check(p, self.seq_len, "token index")?;
        Ok(p / self.tokens_per_tile)
    }

    /// Token index -> (t, h, w) coordinates.
    pub fn token_to_coord(&self, p: usize) -> Result<[usize; 3], GridError> {
        self.check(p, self.seq_len, "token index")?;
        let tile = p / self.tokens_per_tile;
        let within = p % self.tokens_per_tile;
        let [tt, th, tw] = self.tile_coord(tile)?;
        let dt = within / (self.h_tile * self.w_tile);
        let dh = (within / self.w_tile) % self.h_tile;
        let dw = within % self.w_tile;
        Ok([
            tt * self.t_tile + dt,
            th * self.h_tile + dh,
            tw * self.w_tile + dw,
        ])
    }

    /// (t, h, w) coordinates -> token index.
    pub fn coord_to_token(&self, t: usize, h: usize, w: usize) -> Result<usize, GridError> {
        self.check(t, self.t_len, "t coordinate")?;
        self.check(h, self.h_len, "h coordinate")?;
        self.check(w, self.w_len, "w coordinate")?;
        let tile = self.coord_to_tile(t / self.t_tile, h / self.h_tile, w / self.w_tile)?;
        let within =
            (t % self.t_tile) * self.h_tile * self.w_tile + (h % self.h_tile) * self.w_tile + (w % self.w_tile);
        Ok(tile * self.tokens_per_tile + within)
    }

    /// Tile index -> (tile_t, tile_h, tile_w).
    pub fn tile_coord(&self, i: usize) -> Result<[usize; 3], GridError> {
        self.check(i, self.n_tiles, "tile index")?;
        Ok([i / (self.nh * self.nw), (i / self.nw) % self.nh, i % self.nw])
    }

    /// (tile_t, tile_h, tile_w) -> tile index.
    pub fn coord_to_tile(&self, tile_t: usize, tile_h: usize, tile_w: usize) -> Result<usize, GridError> {
        self.check(tile_t, self.nt, "tile t coordinate")?;
        self.check(tile_h, self.nh, "tile h coordinate")?;
        self.check(tile_w, self.nw, "tile w coordinate")?;
        Ok((tile_t * self.nh + tile_h) * self.nw + tile_w)
    }

    fn check(&self, index: usize, bound: usize, what: &'static str) -> Result<(), GridError> {
        if index >= bound {
            return Err(GridError::OutOfRange { what, index, bound });
        }
        Ok(())
    }
}

impl TryFrom<GridConfig> for GridSpec {
    type Error = GridError;
    fn try_from(c: GridConfig) -> Result<Self, Self::Error> {
        Self::from_config(c)
    }
}

impl From<GridSpec> for GridConfig {
    fn from(g: GridSpec) -> Self {
        GridConfig {
            t_len: g.t_len,
            h_len: g.h_len,
            w_len: g.w_len,
            t_tile: g.t_tile,
            h_tile: g.h_tile,
            w_tile: g.w_tile,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g444() -> GridSpec {
        GridSpec::new(4, 4, 4, 2, 2, 2).unwrap()
    }

    #[test]
    fn derived_fields_small() {
        let g = g444();
        assert_eq!(g.tile_extents(), [2, 2, 2]);
        assert_eq!(g.n_tiles(), 8);
        assert_eq!(g.tokens_per_tile(), 8);
        assert_eq!(g.seq_len(), 64);
    }

    #[test]
    fn whole_grid_single_tile() {
        let g = GridSpec::new(24, 32, 32, 24, 32, 32).unwrap();
        assert_eq!(g.n_tiles(), 1);
        assert_eq!(g.seq_len(), 24_576);
    }

    #[test]
    fn divisibility_rejected() {
        let err = GridSpec::new(5, 4, 4, 2, 2, 2).unwrap_err();
        assert_eq!(
            err,
            GridError::Divisibility {
                axis: "t",
                len: 5,
                tile: 2
            }
        );
    }

    #[test]
    fn zero_size_rejected() {
        assert!(matches!(
            GridSpec::new(4, 4, 4, 2, 0, 2),
            Err(GridError::ZeroSize { name: "h_tile" })
        ));
    }

    #[test]
    fn tile_idx_examples() {
        let g = g444();
        assert_eq!(g.tile_idx(0).unwrap(), 0);
        assert_eq!(g.tile_idx(63).unwrap(), 7);
        assert_eq!(g.tile_idx(8).unwrap(), 1);
        assert!(matches!(g.tile_idx(64), Err(GridError::OutOfRange { .. })));
    }

    #[test]
    fn coordinate_examples() {
        let g = g444();
        assert_eq!(g.tile_coord(0).unwrap(), [0, 0, 0]);
        assert_eq!(g.coord_to_tile(1, 1, 1).unwrap(), 7);
        assert_eq!(g.token_to_coord(63).unwrap(), [3, 3, 3]);
    }

    #[test]
    fn tile_idx_consistent_with_coord_maps() {
        let g = GridSpec::new(4, 6, 4, 2, 3, 2).unwrap();
        for p in 0..g.seq_len() {
            let [t, h, w] = g.token_to_coord(p).unwrap();
            let via_coords = g
                .coord_to_tile(t / g.tile_dims()[0], h / g.tile_dims()[1], w / g.tile_dims()[2])
                .unwrap();
            assert_eq!(g.tile_idx(p).unwrap(), via_coords);
        }
    }

    #[test]
    fn round_trips_and_partition() {
        let g = GridSpec::new(6, 4, 4, 3, 2, 2).unwrap();
        let mut per_tile = vec![0usize; g.n_tiles()];
        for p in 0..g.seq_len() {
            let [t, h, w] = g.token_to_coord(p).unwrap();
            assert_eq!(g.coord_to_token(t, h, w).unwrap(), p);
            per_tile[g.tile_idx(p).unwrap()] += 1;
        }
        assert!(per_tile.iter().all(|&c| c == g.tokens_per_tile()));
        for i in 0..g.n_tiles() {
            let [a, b, c] = g.tile_coord(i).unwrap();
            assert_eq!(g.coord_to_tile(a, b, c).unwrap(), i);
        }
    }

    #[test]
    fn same_tile_tokens_are_local() {
        let g = GridSpec::new(4, 4, 6, 2, 2, 3).unwrap();
        let [tt, ht, wt] = g.tile_dims();
        for p in 0..g.seq_len() {
            for q in 0..g.seq_len() {
                if g.tile_idx(p).unwrap() == g.tile_idx(q).unwrap() {
                    let a = g.token_to_coord(p).unwrap();
                    let b = g.token_to_coord(q).unwrap();
                    assert!(a[0].abs_diff(b[0]) < tt);
                    assert!(a[1].abs_diff(b[1]) < ht);
                    assert!(a[2].abs_diff(b[2]) < wt);
                }
            }
        }
    }

    #[test]
    fn json_round_trip_recomputes_derived_fields() {
        let g = g444();
        let json = serde_json::to_string(&g).unwrap();
        assert!(json.contains("\"t_len\":4"));
        assert!(!json.contains("seq_len"), "derived fields are not serialized");
        let back: GridSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
        let bad: Result<GridSpec, _> = serde_json::from_str(
            r#"{"t_len":5,"h_len":4,"w_len":4,"t_tile":2,"h_tile":2,"w_tile":2}"#,
        );
        assert!(bad.is_err());
    }
}
