use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};

/// Boolean mask over the last two axes of a logits array.
///
/// `allowed[r * cols + c]` says whether query row `r` may use key `c`. A mask
/// with a single row is broadcast to every query row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(shape_err(
                "Mask::new",
                format!("{}x{} mask needs {} entries, got {}", rows, cols, rows * cols, allowed.len()),
            ));
        }
        Ok(Self { rows, cols, allowed })
    }

    /// Single-row mask broadcast over all query rows.
    pub fn row(allowed: Vec<bool>) -> Self {
        Self {
            rows: 1,
            cols: allowed.len(),
            allowed,
        }
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Lower-triangular mask: row `r` sees keys `0..=r`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Self { rows, cols, allowed }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.allowed[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }

    /// First query row with no allowed key, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&r| !self.row_slice(r).iter().any(|&a| a))
    }

    /// Restriction to the given query rows and key columns.
    pub fn submask(&self, rows: &[usize], cols: &[usize]) -> Self {
        Self::from_fn(rows.len(), cols.len(), |r, c| self.get(rows[r], cols[c]))
    }
}
