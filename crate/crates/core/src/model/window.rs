//! Token windowing: cyclic shift, window partition, shift masks and the
//! relative-position index.
//!
//! Tokens of a batch are stored row-major as `(batch, row, col)`. The
//! windowed order is `(batch, window_row, window_col, i, j)` where `(i, j)`
//! is the position inside a `w×w` window, after the grid has been rolled
//! up-left by `shift`.

use crate::error::{Error, Result};

/// `idx[n]` is the token row that lands at windowed position `n`.
pub fn partition_index(batch: usize, grid: usize, w: usize, shift: usize) -> Result<Vec<usize>> {
    if w == 0 || grid % w != 0 {
        return Err(Error::Dimension(format!(
            "token grid {grid} cannot be partitioned into windows of {w}"
        )));
    }
    let per_side = grid / w;
    let mut idx = Vec::with_capacity(batch * grid * grid);
    for b in 0..batch {
        for wr in 0..per_side {
            for wc in 0..per_side {
                for i in 0..w {
                    for j in 0..w {
                        let r = (wr * w + i + shift) % grid;
                        let c = (wc * w + j + shift) % grid;
                        idx.push(b * grid * grid + r * grid + c);
                    }
                }
            }
        }
    }
    Ok(idx)
}

pub fn invert(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (n, &src) in idx.iter().enumerate() {
        inv[src] = n;
    }
    inv
}

/// Rows of `data` (width `width`) rearranged into windowed order.
pub fn window_partition(data: &[f32], width: usize, batch: usize, grid: usize, w: usize, shift: usize) -> Result<Vec<f32>> {
    if data.len() != batch * grid * grid * width {
        return Err(Error::Dimension(format!(
            "{} values do not form {batch}×{grid}×{grid} tokens of width {width}",
            data.len()
        )));
    }
    let idx = partition_index(batch, grid, w, shift)?;
    Ok(gather(data, width, &idx))
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse(data: &[f32], width: usize, batch: usize, grid: usize, w: usize, shift: usize) -> Result<Vec<f32>> {
    if data.len() != batch * grid * grid * width {
        return Err(Error::Dimension(format!(
            "{} values do not form {batch}×{grid}×{grid} tokens of width {width}",
            data.len()
        )));
    }
    let idx = partition_index(batch, grid, w, shift)?;
    Ok(gather(data, width, &invert(&idx)))
}

pub(crate) fn gather(data: &[f32], width: usize, idx: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&data[i * width..(i + 1) * width]);
    }
    out
}

/// Additive attention mask `[windows, w², w²]` for a shifted grid: pairs of
/// positions that came from different regions before the roll get `-100`.
pub fn shift_mask(grid: usize, w: usize, shift: usize) -> Vec<f32> {
    let per_side = grid / w;
    let t = w * w;
    let region = |p: usize| {
        if p < grid - w {
            0
        } else if p < grid - shift {
            1
        } else {
            2
        }
    };
    let mut mask = Vec::with_capacity(per_side * per_side * t * t);
    for wr in 0..per_side {
        for wc in 0..per_side {
            let ids: Vec<usize> = (0..t)
                .map(|n| region(wr * w + n / w) * 3 + region(wc * w + n % w))
                .collect();
            for a in 0..t {
                for b in 0..t {
                    mask.push(if ids[a] == ids[b] { 0.0 } else { -100.0 });
                }
            }
        }
    }
    mask
}

/// Index into the `(2w−1)²`-row bias table for every (query, key) pair of
/// a window, row-major over `[w², w²]`.
pub fn relative_position_index(w: usize) -> Vec<usize> {
    let t = w * w;
    let side = 2 * w - 1;
    let mut idx = Vec::with_capacity(t * t);
    for a in 0..t {
        let (ar, ac) = (a / w, a % w);
        for b in 0..t {
            let (br, bc) = (b / w, b % w);
            idx.push((ar + w - 1 - br) * side + (ac + w - 1 - bc));
        }
    }
    idx
}

/// Row order for 2×2 patch merging: each output token concatenates the
/// tokens at (2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1).
pub fn merge_index(batch: usize, grid: usize) -> Vec<usize> {
    let half = grid / 2;
    let mut idx = Vec::with_capacity(batch * grid * grid);
    for b in 0..batch {
        for i in 0..half {
            for j in 0..half {
                for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    idx.push(b * grid * grid + (2 * i + dr) * grid + 2 * j + dc);
                }
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_by_four_grid_into_four_windows() {
        // Labels = token index; brute-force oracle by window arithmetic.
        let labels: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let out = window_partition(&labels, 1, 1, 4, 2, 0).unwrap();
        let expect = [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15];
        assert_eq!(out, expect.iter().map(|&v| v as f32).collect::<Vec<_>>());
    }

    #[test]
    fn shift_rolls_up_left() {
        let labels: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let out = window_partition(&labels, 1, 1, 4, 2, 1).unwrap();
        // First window after roll by 1 covers original (1,1),(1,2),(2,1),(2,2).
        assert_eq!(&out[..4], &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn indivisible_grid_is_dimension_error() {
        assert!(matches!(partition_index(1, 6, 4, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn mask_blocks_wrapped_regions() {
        let m = shift_mask(4, 2, 1);
        // Window 0 is interior: no masking.
        assert!(m[..16].iter().all(|&v| v == 0.0));
        // Last window mixes three regions per axis slice.
        let last = &m[3 * 16..];
        assert!(last.iter().any(|&v| v == -100.0));
        for a in 0..4 {
            assert_eq!(last[a * 4 + a], 0.0);
        }
    }

    #[test]
    fn relative_index_centre_is_zero_offset() {
        let idx = relative_position_index(2);
        // Diagonal pairs have zero offset → (w-1)*(2w-1) + (w-1) = 4.
        for a in 0..4 {
            assert_eq!(idx[a * 4 + a], 4);
        }
        assert!(idx.iter().all(|&i| i < 9));
    }

    proptest! {
        #[test]
        fn reverse_inverts_partition(batch in 1usize..3, per_side in 1usize..4, w in 1usize..4, width in 1usize..3, seed in any::<u64>()) {
            let grid = per_side * w;
            let n = batch * grid * grid * width;
            let data: Vec<f32> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32).collect();
            for shift in [0, w / 2] {
                let p = window_partition(&data, width, batch, grid, w, shift).unwrap();
                let back = window_reverse(&p, width, batch, grid, w, shift).unwrap();
                prop_assert_eq!(&back, &data);
            }
        }
    }
}
