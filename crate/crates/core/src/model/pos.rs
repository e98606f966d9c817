//! Fixed position tables: 2-D sine-cosine embeddings for the main stage and
//! decoder, and relative-offset index maps for the learned RPE tables.

use crate::scalar::Scalar;

/// Row-major (y, x) coordinates of unit `u` on a `grid` x `grid` layout.
pub fn unit_coords(grid: usize, u: usize) -> (usize, usize) {
    (u / grid, u % grid)
}

/// Row index into an RPE table for the offset between two units. Offsets in
/// [-(G-1), G-1] per axis flatten to `(dy + G-1) * (2G-1) + (dx + G-1)`.
pub fn rpe_index(grid: usize, q: usize, k: usize) -> usize {
    let (qy, qx) = unit_coords(grid, q);
    let (ky, kx) = unit_coords(grid, k);
    let dy = qy as isize - ky as isize + (grid as isize - 1);
    let dx = qx as isize - kx as isize + (grid as isize - 1);
    (dy as usize) * (2 * grid - 1) + dx as usize
}

/// RPE rows for every (query, key) pair over `units`, query-major. Length is
/// `units.len()^2`, matching a flattened attention score matrix.
pub fn rpe_pairs(grid: usize, units: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(units.len() * units.len());
    for &q in units {
        for &k in units {
            out.push(rpe_index(grid, q, k));
        }
    }
    out
}

/// 2-D sine-cosine table over the full grid, one `dim`-wide row per unit in
/// row-major order. The first half of each row encodes y, the second x; each
/// half is a standard 1-D sin/cos embedding. `dim` must be divisible by 4.
pub fn sincos_2d<T: Scalar>(dim: usize, grid: usize) -> Vec<T> {
    assert!(dim % 4 == 0, "sincos dim {dim} must be divisible by 4");
    let half = dim / 2;
    let quarter = half / 2;
    let omega: Vec<f64> =
        (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let mut out = Vec::with_capacity(grid * grid * dim);
    for u in 0..grid * grid {
        let (y, x) = unit_coords(grid, u);
        for &coord in &[y as f64, x as f64] {
            for &w in &omega {
                out.push(T::from_f64((coord * w).sin()));
            }
            for &w in &omega {
                out.push(T::from_f64((coord * w).cos()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rpe_index_covers_table_and_respects_translation() {
        let g = 4;
        // Same offset, different absolute positions: same row.
        assert_eq!(rpe_index(g, 5, 0), rpe_index(g, 10, 5));
        // All pairs stay inside the table.
        let rows = (2 * g - 1) * (2 * g - 1);
        for q in 0..g * g {
            for k in 0..g * g {
                assert!(rpe_index(g, q, k) < rows);
            }
        }
        // Zero offset maps to the exact centre row.
        assert_eq!(rpe_index(g, 7, 7), (g - 1) * (2 * g - 1) + (g - 1));
        // Distinct offsets map to distinct rows.
        assert_ne!(rpe_index(g, 1, 0), rpe_index(g, 0, 1));
    }

    #[test]
    fn rpe_pairs_subset_matches_dense_lookup() {
        let g = 3;
        let units = [7usize, 2, 4];
        let pairs = rpe_pairs(g, &units);
        assert_eq!(pairs.len(), 9);
        for (qi, &q) in units.iter().enumerate() {
            for (ki, &k) in units.iter().enumerate() {
                assert_eq!(pairs[qi * 3 + ki], rpe_index(g, q, k));
            }
        }
    }

    #[test]
    fn sincos_rows_are_unit_specific_and_bounded() {
        let table: Vec<f64> = sincos_2d(8, 3);
        assert_eq!(table.len(), 9 * 8);
        assert!(table.iter().all(|v| v.abs() <= 1.0));
        // Position 0 is sin(0)=0 then cos(0)=1 per quarter.
        assert_eq!(&table[0..8], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        // Units sharing y differ only in the x half.
        let row = |u: usize| &table[u * 8..(u + 1) * 8];
        assert_eq!(row(1)[0..4], row(2)[0..4]);
        assert_ne!(row(1)[4..8], row(2)[4..8]);
    }
}
