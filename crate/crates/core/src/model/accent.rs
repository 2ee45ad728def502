use alloc::vec::Vec;

/// Mean and population variance of one utterance's frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl PooledStats {
    /// Splits one row of a stats-pool output (`mean ⧺ variance`).
    pub fn from_row(row: &[f64]) -> Self {
        let (mean, variance) = row.split_at(row.len() / 2);
        Self { mean: mean.to_vec(), variance: variance.to_vec() }
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend_from_slice(&self.variance);
        v
    }
}
