use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::{math, rng, Error, Result};

pub const ACCENT_NAMES: [&str; 8] = ["US", "UK", "CHN", "IND", "JPN", "KR", "PT", "RU"];

/// A `rows × cols` feature matrix (frames × feature dimensions).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!("{rows}×{cols} matrix with {} values", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub features: FeatureMatrix,
    /// Transcript without blank, sos/eos or accent tags.
    pub tokens: Vec<usize>,
    pub accent_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn label(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

/// Parameters of a synthetic corpus.
///
/// Every symbol has a fixed random prototype block of
/// `frames_per_token × feature_dim` values. An utterance concatenates the
/// prototypes of its symbols, applies its accent's affine coloring
/// `x ↦ A·x + b` to every frame and adds Gaussian noise. Prototypes and
/// colorings depend only on `seed`; the utterances of a split depend on
/// `(seed, split)` and, for out-of-domain corpora, on the domain as well.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct SyntheticCorpusSpec {
    pub vocab: usize,
    pub accent_count: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub noise_std: f64,
    /// `A = I + coloring_scale · R` with `R` entries drawn from `N(0, 1/D)`.
    pub coloring_scale: f64,
    /// Standard deviation of the per-accent offset `b`.
    pub bias_std: f64,
    /// Out-of-domain corpora carry no accent coloring; every utterance is
    /// labelled with accent 0.
    pub out_of_domain: bool,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            vocab: 20,
            accent_count: 8,
            feature_dim: 83,
            frames_per_token: 6,
            min_tokens: 3,
            max_tokens: 10,
            noise_std: 0.5,
            coloring_scale: 0.1,
            bias_std: 0.05,
            out_of_domain: false,
            train_size: 2000,
            dev_size: 200,
            test_size: 400,
            seed: 1,
        }
    }
}

impl SyntheticCorpusSpec {
    /// A background corpus over the same symbol inventory.
    pub fn out_of_domain(&self, train_size: usize) -> Self {
        Self { out_of_domain: true, train_size, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab < 2 {
            return bad(format!("vocab {} must be at least 2 (no adjacent repeats)", self.vocab));
        }
        if self.accent_count < 2 || self.feature_dim == 0 || self.frames_per_token == 0 {
            return bad("accent_count >= 2, feature_dim and frames_per_token > 0 required".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!("token range {}..={}", self.min_tokens, self.max_tokens));
        }
        if !(self.noise_std >= 0.0 && self.bias_std >= 0.0 && self.coloring_scale >= 0.0) {
            return bad("noise_std, bias_std and coloring_scale must be non-negative".into());
        }
        Ok(())
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Dev => self.dev_size,
            Split::Test => self.test_size,
        }
    }
}

/// One accent's affine coloring.
#[derive(Clone, Debug, PartialEq)]
pub struct Coloring {
    /// Row-major `D × D`.
    pub transform: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Symbol prototypes and accent colorings shared by all splits of a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Inventory {
    /// `prototypes[t - 1]` is the `frames_per_token × D` block of symbol `t`.
    pub prototypes: Vec<Vec<f64>>,
    pub colorings: Vec<Coloring>,
}

const MAX_CONDITION: f64 = 100.0;

impl Inventory {
    pub fn generate(spec: &SyntheticCorpusSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.feature_dim;
        let prototypes = (1..=spec.vocab)
            .map(|t| {
                let mut r = rng::stream(spec.seed, &[rng::label("prototype"), t as u64]);
                (0..spec.frames_per_token * d).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        let mut colorings = Vec::with_capacity(spec.accent_count);
        for a in 0..spec.accent_count {
            let mut attempt = 0u64;
            let coloring = loop {
                let mut r = rng::stream(spec.seed, &[rng::label("coloring"), a as u64, attempt]);
                let scale = spec.coloring_scale / math::sqrt(d as f64);
                let mut transform = vec![0.0; d * d];
                for (i, x) in transform.iter_mut().enumerate() {
                    let noise: f64 = r.sample(StandardNormal);
                    *x = scale * noise + if i / d == i % d { 1.0 } else { 0.0 };
                }
                if condition_number(&transform, d) < MAX_CONDITION {
                    let bias = (0..d).map(|_| spec.bias_std * r.sample::<f64, _>(StandardNormal)).collect();
                    break Coloring { transform, bias };
                }
                attempt += 1;
                if attempt > 64 {
                    return Err(Error::InvalidConfig(format!(
                        "coloring_scale {} never yields a well-conditioned transform",
                        spec.coloring_scale
                    )));
                }
            };
            colorings.push(coloring);
        }
        Ok(Self { prototypes, colorings })
    }
}

/// Generates one split. Deterministic in `(spec, split)`; each utterance
/// draws from its own seeded stream.
pub fn generate_corpus(spec: &SyntheticCorpusSpec, split: Split) -> Result<Vec<Utterance>> {
    let inventory = Inventory::generate(spec)?;
    let domain = if spec.out_of_domain { rng::label("out-of-domain") } else { rng::label("in-domain") };
    let prefix = if spec.out_of_domain { "ood-" } else { "" };
    let d = spec.feature_dim;
    let mut out = Vec::with_capacity(spec.size(split));
    let mut colored = vec![0.0; d];
    for i in 0..spec.size(split) {
        let mut r = rng::stream(spec.seed, &[domain, split.label(), i as u64]);
        let len = r.random_range(spec.min_tokens..=spec.max_tokens);
        let mut tokens = Vec::with_capacity(len);
        while tokens.len() < len {
            let t = r.random_range(1..=spec.vocab);
            if tokens.last() != Some(&t) {
                tokens.push(t);
            }
        }
        let accent_id = if spec.out_of_domain { 0 } else { i % spec.accent_count };
        let coloring = (!spec.out_of_domain).then(|| &inventory.colorings[accent_id]);
        let rows = len * spec.frames_per_token;
        let mut data = Vec::with_capacity(rows * d);
        for &t in &tokens {
            for frame in inventory.prototypes[t - 1].chunks(d) {
                match coloring {
                    Some(c) => {
                        for (j, out) in colored.iter_mut().enumerate() {
                            let row = &c.transform[j * d..(j + 1) * d];
                            *out = row.iter().zip(frame).map(|(a, x)| a * x).sum::<f64>() + c.bias[j];
                        }
                    }
                    None => colored.copy_from_slice(frame),
                }
                for &x in &colored {
                    let noise: f64 = r.sample(StandardNormal);
                    data.push((x + spec.noise_std * noise) as f32);
                }
            }
        }
        out.push(Utterance {
            utt_id: format!("{prefix}{}-{i:06}", split.name()),
            features: FeatureMatrix::new(rows, d, data)?,
            tokens,
            accent_id,
        });
    }
    Ok(out)
}

/// 2-norm condition number of a square `n × n` matrix, from the eigenvalues
/// of `AᵀA`.
pub fn condition_number(a: &[f64], n: usize) -> f64 {
    let mut ata = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = (0..n).map(|k| a[k * n + i] * a[k * n + j]).sum();
            ata[i * n + j] = s;
            ata[j * n + i] = s;
        }
    }
    let eig = symmetric_eigenvalues(ata, n);
    let max = eig.iter().copied().fold(0.0, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return f64::INFINITY;
    }
    math::sqrt(max / min)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    let total: f64 = a.iter().map(|x| x * x).sum();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= 1e-24 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + math::sqrt(theta * theta + 1.0));
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec { feature_dim: 6, train_size: 40, dev_size: 8, test_size: 8, ..Default::default() }
    }

    #[test]
    fn jacobi_eigenvalues_of_known_matrices() {
        let mut e = symmetric_eigenvalues(vec![2.0, 1.0, 1.0, 2.0], 2);
        e.sort_by(f64::total_cmp);
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
        assert!((condition_number(&[3.0, 0.0, 0.0, 0.5], 2) - 6.0).abs() < 1e-12);
        assert_eq!(condition_number(&[1.0, 1.0, 1.0, 1.0], 2), f64::INFINITY);
    }

    #[test]
    fn colorings_are_well_conditioned() {
        let spec = SyntheticCorpusSpec::default();
        let inv = Inventory::generate(&spec).unwrap();
        for c in &inv.colorings {
            assert!(condition_number(&c.transform, spec.feature_dim) < MAX_CONDITION);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        assert_eq!(generate_corpus(&spec, Split::Dev).unwrap(), generate_corpus(&spec, Split::Dev).unwrap());
    }

    #[test]
    fn utterances_satisfy_invariants() {
        let spec = small_spec();
        for u in generate_corpus(&spec, Split::Train).unwrap() {
            assert!(u.tokens.iter().all(|&t| (1..=spec.vocab).contains(&t)));
            assert!(u.tokens.windows(2).all(|w| w[0] != w[1]));
            assert!((spec.min_tokens..=spec.max_tokens).contains(&u.tokens.len()));
            assert_eq!(u.features.rows, u.tokens.len() * spec.frames_per_token);
            assert!(u.accent_id < spec.accent_count);
        }
    }

    #[test]
    fn noiseless_identity_coloring_depends_only_on_tokens() {
        let spec = SyntheticCorpusSpec {
            noise_std: 0.0,
            coloring_scale: 0.0,
            bias_std: 0.0,
            vocab: 2,
            min_tokens: 2,
            max_tokens: 2,
            ..small_spec()
        };
        let corpus = generate_corpus(&spec, Split::Train).unwrap();
        for a in &corpus {
            for b in &corpus {
                if a.tokens == b.tokens {
                    assert_eq!(a.features, b.features);
                }
            }
        }
    }

    #[test]
    fn out_of_domain_is_uncolored_and_labelled_zero() {
        let spec = small_spec().out_of_domain(10);
        let corpus = generate_corpus(&spec, Split::Train).unwrap();
        assert!(corpus.iter().all(|u| u.accent_id == 0 && u.utt_id.starts_with("ood-")));
    }
}
