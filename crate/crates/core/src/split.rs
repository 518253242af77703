//! Seeded K-fold partitions shared by cross-fitting and cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fold assignment for `n` rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    /// Rows in fold `fold`, ascending.
    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == fold).collect()
    }

    /// Rows outside fold `fold`, ascending.
    pub fn complement_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Seeded uniform shuffle followed by round-robin assignment.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be at least 2, got {k}")));
    }
    if n < 2 * k {
        return Err(Error::Config(format!(
            "{k} folds need at least {} rows, got {n}",
            2 * k
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        assignment[row] = pos % k;
    }
    Ok(SplitPlan { k, assignment, seed })
}
