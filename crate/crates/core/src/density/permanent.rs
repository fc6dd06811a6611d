//! Permanents of small nonnegative matrices.
//!
//! A subset dynamic program assigns rows in order to sets of columns. Every
//! partial sum is nonnegative, so unlike Ryser's inclusion-exclusion formula
//! there is no cancellation and the result keeps full relative precision.

use alloc::vec;
use alloc::vec::Vec;

/// Largest matrix side accepted by [`leave_one_out`].
pub const MAX_SIDE: usize = 20;

/// `out[mask]` = sum over injections of the first `popcount(mask)` rows into
/// the columns of `mask` of the product of chosen entries.
fn subset_table(rows: &[&[f64]], cols: usize) -> Vec<f64> {
    let mut dp = vec![0.0f64; 1 << cols];
    dp[0] = 1.0;
    for mask in 1usize..(1 << cols) {
        let r = mask.count_ones() as usize;
        if r > rows.len() {
            continue;
        }
        let row = rows[r - 1];
        let mut total = 0.0;
        let mut bits = mask;
        while bits != 0 {
            let c = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            total += row[c] * dp[mask & !(1 << c)];
        }
        dp[mask] = total;
    }
    dp
}

/// Permanent of a square row-major matrix.
pub fn permanent(matrix: &[Vec<f64>]) -> f64 {
    let n = matrix.len();
    if n == 0 {
        return 1.0;
    }
    assert!(n <= MAX_SIDE, "permanent limited to {MAX_SIDE}x{MAX_SIDE}");
    let rows: Vec<&[f64]> = matrix.iter().map(Vec::as_slice).collect();
    subset_table(&rows, n)[(1 << n) - 1]
}

/// For an `n x n` matrix, the permanents of the `(n-1) x (n-1)` minors that
/// delete row 0 and column `j`, for every `j`.
pub fn leave_one_out(matrix: &[Vec<f64>]) -> Vec<f64> {
    let n = matrix.len();
    assert!((1..=MAX_SIDE).contains(&n), "matrix side out of range");
    let rows: Vec<&[f64]> = matrix[1..].iter().map(Vec::as_slice).collect();
    let dp = subset_table(&rows, n);
    let full = (1usize << n) - 1;
    (0..n).map(|j| dp[full & !(1 << j)]).collect()
}
