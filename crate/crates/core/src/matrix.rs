//! Bit-packed binary covariate matrix.
//!
//! Columns are stored contiguously as `u64` words, so transition counts
//! between a covariate and a latent vector reduce to a handful of
//! `popcount(a & b)` operations per word.

use crate::error::{BaconError, Result};
use std::collections::HashSet;

pub fn words_for(n: usize) -> usize {
    n.div_ceil(64)
}

#[inline]
pub fn get_bit(col: &[u64], i: usize) -> bool {
    (col[i / 64] >> (i % 64)) & 1 == 1
}

#[inline]
pub fn set_bit(col: &mut [u64], i: usize, v: bool) {
    let mask = 1u64 << (i % 64);
    if v {
        col[i / 64] |= mask;
    } else {
        col[i / 64] &= !mask;
    }
}

#[inline]
pub fn popcount(col: &[u64]) -> u32 {
    col.iter().map(|w| w.count_ones()).sum()
}

#[inline]
pub fn popcount_and(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum()
}

#[inline]
pub fn popcount_xor(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryDesignMatrix {
    n: usize,
    p: usize,
    words: usize,
    bits: Vec<u64>,
    ones: Vec<u32>,
    column_ids: Vec<String>,
}

impl BinaryDesignMatrix {
    /// Builds an `n x p` matrix from an entry function `f(i, j)`.
    pub fn from_fn(n: usize, p: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let words = words_for(n);
        let mut bits = vec![0u64; words * p];
        for j in 0..p {
            let col = &mut bits[j * words..(j + 1) * words];
            for i in 0..n {
                if f(i, j) {
                    set_bit(col, i, true);
                }
            }
        }
        let column_ids = (1..=p).map(|j| format!("x{j}")).collect();
        Self::assemble(n, p, bits, column_ids)
    }

    /// Builds a matrix from dense rows of 0/1 values.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, |r| r.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != p {
                return Err(BaconError::Data(format!("row {} has {} entries, expected {p}", i + 1, r.len())));
            }
            if let Some(v) = r.iter().find(|v| **v > 1) {
                return Err(BaconError::Data(format!("non-binary entry {v} in row {}", i + 1)));
            }
        }
        Ok(Self::from_fn(n, p, |i, j| rows[i][j] == 1))
    }

    fn assemble(n: usize, p: usize, bits: Vec<u64>, column_ids: Vec<String>) -> Self {
        let words = words_for(n);
        let ones = (0..p).map(|j| popcount(&bits[j * words..(j + 1) * words])).collect();
        Self { n, p, words, bits, ones, column_ids }
    }

    pub fn with_column_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.p {
            return Err(BaconError::Data(format!("{} column ids supplied for {} columns", ids.len(), self.p)));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(BaconError::Data(format!("duplicate column id {id:?}")));
            }
        }
        self.column_ids = ids;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn words(&self) -> usize {
        self.words
    }

    pub fn column_ids(&self) -> &[String] {
        &self.column_ids
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[u64] {
        &self.bits[j * self.words..(j + 1) * self.words]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        get_bit(self.column(j), i)
    }

    /// Number of ones in column `j`.
    #[inline]
    pub fn column_ones(&self, j: usize) -> u32 {
        self.ones[j]
    }

    pub fn is_constant(&self, j: usize) -> bool {
        self.ones[j] == 0 || self.ones[j] as usize == self.n
    }

    pub fn column_values(&self, j: usize) -> Vec<u8> {
        (0..self.n).map(|i| u8::from(self.get(i, j))).collect()
    }

    pub fn row_values(&self, i: usize) -> Vec<u8> {
        (0..self.p).map(|j| u8::from(self.get(i, j))).collect()
    }

    /// Mean taxicab distance between two columns, in `[0, 1]`.
    pub fn mean_taxicab(&self, j1: usize, j2: usize) -> f64 {
        popcount_xor(self.column(j1), self.column(j2)) as f64 / self.n as f64
    }

    /// Removes all-0 and all-1 columns. Returns the filtered matrix and the
    /// original indices of the retained columns.
    pub fn drop_constant_columns(&self) -> (Self, Vec<usize>) {
        let kept: Vec<usize> = (0..self.p).filter(|&j| !self.is_constant(j)).collect();
        (self.select_columns(&kept), kept)
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(cols.len() * self.words);
        for &j in cols {
            bits.extend_from_slice(self.column(j));
        }
        let ids = cols.iter().map(|&j| self.column_ids[j].clone()).collect();
        Self::assemble(self.n, cols.len(), bits, ids)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let ids = self.column_ids.clone();
        let sub = Self::from_fn(rows.len(), self.p, |i, j| self.get(rows[i], j));
        Self { column_ids: ids, ..sub }
    }
}
