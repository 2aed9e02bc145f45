//! Quadrant partition of the patch grid and the region attention mask
//! derived from it.

use crate::error::{Error, Result};
use crate::tensor::AttnMask;
use serde::{Deserialize, Serialize};

/// Number of compression tokens per frame: one scene token plus four
/// region tokens.
pub const COMPRESSION_TOKENS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::UpperLeft,
        Quadrant::UpperRight,
        Quadrant::LowerLeft,
        Quadrant::LowerRight,
    ];

    /// Index in the fixed token ordering [S, R_ul, R_ur, R_ll, R_lr, P...].
    pub fn token_slot(self) -> usize {
        match self {
            Quadrant::UpperLeft => 1,
            Quadrant::UpperRight => 2,
            Quadrant::LowerLeft => 3,
            Quadrant::LowerRight => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Quadrant::UpperLeft => "ul",
            Quadrant::UpperRight => "ur",
            Quadrant::LowerLeft => "ll",
            Quadrant::LowerRight => "lr",
        }
    }
}

/// The quadrant partition of an r×c patch grid.
///
/// Odd dimensions put the middle row/column in the upper/left quadrants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub rows: usize,
    pub cols: usize,
}

impl RegionLayout {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        Ok(RegionLayout { rows, cols })
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Rows covered by upper quadrants: `0..row_split`.
    pub fn row_split(&self) -> usize {
        self.rows.div_ceil(2)
    }

    /// Columns covered by left quadrants: `0..col_split`.
    pub fn col_split(&self) -> usize {
        self.cols.div_ceil(2)
    }

    pub fn quadrant_of(&self, row: usize, col: usize) -> Quadrant {
        let upper = row < self.row_split();
        let left = col < self.col_split();
        match (upper, left) {
            (true, true) => Quadrant::UpperLeft,
            (true, false) => Quadrant::UpperRight,
            (false, true) => Quadrant::LowerLeft,
            (false, false) => Quadrant::LowerRight,
        }
    }

    /// Row-major patch indices belonging to a quadrant.
    pub fn member_patch_indices(&self, quadrant: Quadrant) -> Vec<usize> {
        let mut out = Vec::new();
        for row in 0..self.rows {
            for col in 0..self.cols {
                if self.quadrant_of(row, col) == quadrant {
                    out.push(row * self.cols + col);
                }
            }
        }
        out
    }

    /// Inclusive (row, col) ranges covered by a compression token.
    pub fn covered_ranges(&self, quadrant: Option<Quadrant>) -> ((usize, usize), (usize, usize)) {
        let rs = self.row_split();
        let cs = self.col_split();
        match quadrant {
            None => ((0, self.rows - 1), (0, self.cols - 1)),
            Some(Quadrant::UpperLeft) => ((0, rs - 1), (0, cs - 1)),
            Some(Quadrant::UpperRight) => ((0, rs - 1), (cs, self.cols - 1)),
            Some(Quadrant::LowerLeft) => ((rs, self.rows - 1), (0, cs - 1)),
            Some(Quadrant::LowerRight) => ((rs, self.rows - 1), (cs, self.cols - 1)),
        }
    }
}

/// The (n+5)×(n+5) region attention mask.
///
/// Only the four region-token rows are restricted: a region token may not
/// attend to patch tokens outside its quadrant. Every other pair —
/// scene→anything, region→scene, region→region, patch→anything — stays
/// allowed.
pub fn build_region_mask(layout: &RegionLayout) -> AttnMask {
    let n = layout.patch_count();
    let size = n + COMPRESSION_TOKENS;
    let mut mask = AttnMask::all_true(size);
    for quadrant in Quadrant::ALL {
        let row = quadrant.token_slot();
        let members = layout.member_patch_indices(quadrant);
        for p in 0..n {
            if !members.contains(&p) {
                mask.set(row, COMPRESSION_TOKENS + p, false);
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_by_four_ul_mask_row() {
        let layout = RegionLayout::new(4, 4).unwrap();
        let mask = build_region_mask(&layout);
        let row = Quadrant::UpperLeft.token_slot();
        let allowed: Vec<usize> = (0..16)
            .filter(|&p| mask.is_allowed(row, COMPRESSION_TOKENS + p))
            .collect();
        assert_eq!(allowed, vec![0, 1, 4, 5]);
        let blocked: Vec<usize> = (0..16)
            .filter(|&p| !mask.is_allowed(row, COMPRESSION_TOKENS + p))
            .collect();
        assert_eq!(blocked, vec![2, 3, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15]);
    }

    #[test]
    fn scene_row_fully_allowed() {
        let layout = RegionLayout::new(4, 4).unwrap();
        let mask = build_region_mask(&layout);
        assert_eq!(mask.allowed_in_row(0), 21);
        // Patch rows and region→non-patch entries are untouched too.
        for p in 0..16 {
            assert_eq!(mask.allowed_in_row(COMPRESSION_TOKENS + p), 21);
        }
        for q in Quadrant::ALL {
            for j in 0..COMPRESSION_TOKENS {
                assert!(mask.is_allowed(q.token_slot(), j));
            }
        }
    }

    #[test]
    fn region_rows_allow_quarter_of_patches_on_even_grids() {
        for r in (2..=8).step_by(2) {
            for c in (2..=8).step_by(2) {
                let layout = RegionLayout::new(r, c).unwrap();
                let n = layout.patch_count();
                let mask = build_region_mask(&layout);
                for q in Quadrant::ALL {
                    let row = q.token_slot();
                    let patch_allowed = (0..n)
                        .filter(|&p| mask.is_allowed(row, COMPRESSION_TOKENS + p))
                        .count();
                    assert_eq!(patch_allowed, n / 4, "grid {r}x{c} quadrant {q:?}");
                }
            }
        }
    }

    #[test]
    fn quadrants_partition_all_grids_up_to_16() {
        for r in (2..=16).step_by(2) {
            for c in (2..=16).step_by(2) {
                let layout = RegionLayout::new(r, c).unwrap();
                let mut seen = vec![0u8; layout.patch_count()];
                for q in Quadrant::ALL {
                    for p in layout.member_patch_indices(q) {
                        seen[p] += 1;
                    }
                }
                assert!(seen.iter().all(|&s| s == 1), "grid {r}x{c}");
            }
        }
    }

    #[test]
    fn odd_grid_middle_goes_upper_left() {
        let layout = RegionLayout::new(3, 5).unwrap();
        assert_eq!(layout.quadrant_of(1, 2), Quadrant::UpperLeft);
        assert_eq!(layout.quadrant_of(2, 2), Quadrant::LowerLeft);
        assert_eq!(layout.quadrant_of(1, 3), Quadrant::UpperRight);
        let total: usize = Quadrant::ALL
            .iter()
            .map(|&q| layout.member_patch_indices(q).len())
            .sum();
        assert_eq!(total, 15);
    }
}
