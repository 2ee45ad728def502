use alloc::vec::Vec;

use rand::Rng as _;

use super::FeatureMatrix;
use crate::rng::Rng;
use crate::{math, Error, Result};

/// Time and frequency masking policy. Widths are drawn uniformly from
/// `0..=max_*_width` (clipped to the feature extent).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct SpecAugmentPolicy {
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        Self { n_time_masks: 2, max_time_width: 4, n_freq_masks: 2, max_freq_width: 8 }
    }
}

impl SpecAugmentPolicy {
    pub const NONE: Self = Self { n_time_masks: 0, max_time_width: 0, n_freq_masks: 0, max_freq_width: 0 };
}

/// Replaces random time and frequency bands by the utterance mean.
pub fn spec_augment(features: &FeatureMatrix, policy: &SpecAugmentPolicy, rng: &mut Rng) -> FeatureMatrix {
    let mut out = features.clone();
    if features.data.is_empty() {
        return out;
    }
    let fill = features.mean() as f32;
    let (rows, cols) = (features.rows, features.cols);
    for _ in 0..policy.n_time_masks {
        let (start, width) = band(rows, policy.max_time_width, rng);
        for t in start..start + width {
            out.data[t * cols..(t + 1) * cols].fill(fill);
        }
    }
    for _ in 0..policy.n_freq_masks {
        let (start, width) = band(cols, policy.max_freq_width, rng);
        for t in 0..rows {
            out.data[t * cols + start..t * cols + start + width].fill(fill);
        }
    }
    out
}

fn band(extent: usize, max_width: usize, rng: &mut Rng) -> (usize, usize) {
    let width = rng.random_range(0..=max_width.min(extent));
    let start = rng.random_range(0..=extent - width);
    (start, width)
}

/// Resamples the time axis by linear interpolation: output frame `j` reads
/// source position `j · factor`, giving `round(T / factor)` frames.
/// Positions past the last frame repeat it.
pub fn speed_perturb(features: &FeatureMatrix, factor: f64) -> Result<FeatureMatrix> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidConfig(alloc::format!("speed factor {factor} must be positive")));
    }
    let rows = math::round(features.rows as f64 / factor) as usize;
    if rows < 1 || features.rows == 0 {
        return Err(Error::DegenerateLength);
    }
    let cols = features.cols;
    let last = features.rows - 1;
    let mut data = Vec::with_capacity(rows * cols);
    for j in 0..rows {
        let pos = j as f64 * factor;
        let lo = (math::floor(pos) as usize).min(last);
        let frac = pos - lo as f64;
        if lo == last || frac == 0.0 {
            data.extend_from_slice(features.row(lo));
        } else {
            let (a, b) = (features.row(lo), features.row(lo + 1));
            data.extend(a.iter().zip(b).map(|(&x, &y)| ((1.0 - frac) * x as f64 + frac * y as f64) as f32));
        }
    }
    FeatureMatrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp(rows: usize, cols: usize) -> FeatureMatrix {
        FeatureMatrix::new(rows, cols, (0..rows * cols).map(|i| i as f32 * 0.25 - 3.0).collect()).unwrap()
    }

    #[test]
    fn empty_policy_is_identity() {
        let f = ramp(7, 5);
        assert_eq!(spec_augment(&f, &SpecAugmentPolicy::NONE, &mut rng::stream(1, &[])), f);
    }

    #[test]
    fn modified_cells_are_bounded() {
        let f = ramp(12, 9);
        let policy = SpecAugmentPolicy { n_time_masks: 2, max_time_width: 3, n_freq_masks: 1, max_freq_width: 4 };
        let bound =
            policy.n_time_masks * policy.max_time_width * f.cols + policy.n_freq_masks * policy.max_freq_width * f.rows;
        let mut r = rng::stream(7, &[]);
        let mut any = false;
        for _ in 0..1000 {
            let g = spec_augment(&f, &policy, &mut r);
            let changed = f.data.iter().zip(&g.data).filter(|(a, b)| a != b).count();
            assert!(changed <= bound);
            any |= changed > 0;
        }
        assert!(any);
    }

    #[test]
    fn full_width_time_mask_never_exceeds_extent() {
        let f = ramp(6, 4);
        let policy = SpecAugmentPolicy { n_time_masks: 1, max_time_width: 6, n_freq_masks: 0, max_freq_width: 0 };
        let mut r = rng::stream(3, &[]);
        for _ in 0..200 {
            let g = spec_augment(&f, &policy, &mut r);
            let rows_changed = (0..f.rows).filter(|&t| f.row(t) != g.row(t)).count();
            assert!(rows_changed <= f.rows);
        }
    }

    #[test]
    fn unit_speed_is_bit_exact() {
        let f = ramp(9, 3);
        assert_eq!(speed_perturb(&f, 1.0).unwrap(), f);
    }

    #[test]
    fn half_speed_doubles_length_on_grid() {
        let f = ramp(10, 3);
        let g = speed_perturb(&f, 0.5).unwrap();
        assert_eq!(g.rows, 20);
        for i in 0..10 {
            assert_eq!(g.row(2 * i), f.row(i));
        }
        // Midpoints average their neighbours.
        assert_eq!(g.row(1)[0], (f.row(0)[0] + f.row(1)[0]) / 2.0);
    }

    #[test]
    fn constant_features_stay_constant() {
        let f = FeatureMatrix::new(11, 2, alloc::vec![0.7; 22]).unwrap();
        for factor in [0.9, 1.1, 0.37, 2.5] {
            assert!(speed_perturb(&f, factor).unwrap().data.iter().all(|&x| x == 0.7));
        }
    }

    #[test]
    fn degenerate_length_is_rejected() {
        assert_eq!(speed_perturb(&ramp(2, 2), 10.0), Err(Error::DegenerateLength));
    }
}
