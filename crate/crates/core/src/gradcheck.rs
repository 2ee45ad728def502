//! Central finite-difference checks of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::losses;
use crate::model::{FrameMask, TokenBatch};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::tape::{AttentionSpec, Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Smallest denominator used when turning an absolute gradient difference
/// into a relative one. Gradients below this magnitude are compared in
/// absolute terms; a central difference of an O(1) loss carries roughly
/// `ulp / h` of rounding noise, which this floor must dominate.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Worst disagreement found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_relative_error: f64,
    /// Name (or input index) and element offset of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

fn check_h(h: f64) -> Result<()> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::InvalidConfig(alloc::format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    Ok(())
}

fn scalar_of(tape: &Tape<'_>, v: Var) -> Result<f64> {
    tape.value(v).item()
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences `(f(x+h) − f(x−h)) / 2h`, element by element.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    check_h(h)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradReport { max_relative_error: 0.0, worst: None, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.wrt(*v) {
            Some(g) => g,
            None => {
                zeros = alloc::vec![0.0; inputs[i].len()];
                &zeros
            }
        };
        for e in 0..inputs[i].len() {
            let x0 = inputs[i].data()[e];
            work[i].data_mut()[e] = x0 + h;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = x0 - h;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[e], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((alloc::format!("input{i}"), e));
            }
        }
    }
    Ok(report)
}

/// Gradient check over every value of every parameter in `store`. `f` builds
/// the scalar loss on a tape that reads the (possibly perturbed) store.
pub fn grad_check_params<F>(store: &ParamStore, h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    check_h(h)?;
    let grads = {
        let mut tape = Tape::with_params(store, true);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };
    let mut work = store.clone();
    let mut report = GradReport { max_relative_error: 0.0, worst: None, checked: 0 };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        for e in 0..n {
            let x0 = store.value(id).data()[e];
            work.value_mut(id).data_mut()[e] = x0 + h;
            let plus = {
                let mut tape = Tape::with_params(&work, false);
                let out = f(&mut tape)?;
                scalar_of(&tape, out)?
            };
            work.value_mut(id).data_mut()[e] = x0 - h;
            let minus = {
                let mut tape = Tape::with_params(&work, false);
                let out = f(&mut tape)?;
                scalar_of(&tape, out)?
            };
            work.value_mut(id).data_mut()[e] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.param(id).map_or(0.0, |g| g[e]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((store.get(id).name.clone(), e));
            }
        }
    }
    Ok(report)
}

/// One entry of [`op_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub report: GradReport,
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values in `±[0.1, 1)`, away from the kink of relu.
fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = random(shape, 0.1, 1.0, rng);
    for x in t.data_mut() {
        if rng.random::<bool>() {
            *x = -*x;
        }
    }
    t
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output element contributes a
/// distinct weight to the checked gradient.
fn project(tape: &mut Tape<'_>, out: Var, seed: u64) -> Result<Var> {
    let w = random(tape.value(out).shape(), -1.0, 1.0, &mut rng::stream(seed, &[rng::label("projection")]));
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Gradient checks of every differentiable tape operation and loss kernel on
/// small random inputs, with step `h`.
pub fn op_suite(h: f64) -> Result<Vec<OpCheck>> {
    type Build = fn(&mut Tape<'_>, &[Var]) -> Result<Var>;
    let mut r = rng::stream(0x6772_6164, &[]);
    let r = &mut r;
    let cases: Vec<(&'static str, Vec<Tensor>, Build)> = vec![
        ("matmul", vec![random(&[3, 4], -1.0, 1.0, r), random(&[4, 2], -1.0, 1.0, r)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        }),
        (
            "linear",
            vec![random(&[3, 4], -1.0, 1.0, r), random(&[4, 5], -1.0, 1.0, r), random(&[5], -1.0, 1.0, r)],
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y, 2)
            },
        ),
        ("linear_no_bias", vec![random(&[2, 3], -1.0, 1.0, r), random(&[3, 2], -1.0, 1.0, r)], |t, v| {
            let y = t.linear(v[0], v[1], None)?;
            project(t, y, 3)
        }),
        ("add", vec![random(&[2, 3], -1.0, 1.0, r), random(&[2, 3], -1.0, 1.0, r)], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 4)
        }),
        ("mul", vec![random(&[2, 3], -1.0, 1.0, r), random(&[2, 3], -1.0, 1.0, r)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 5)
        }),
        ("scale", vec![random(&[2, 3], -1.0, 1.0, r)], |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, 6)
        }),
        ("relu", vec![off_zero(&[3, 4], r)], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, 7)
        }),
        ("dropout", vec![random(&[3, 4], -1.0, 1.0, r)], |t, v| {
            let y = t.dropout(v[0], 0.3, &mut rng::stream(8, &[]));
            project(t, y, 8)
        }),
        (
            "layer_norm",
            vec![random(&[3, 5], -2.0, 2.0, r), random(&[5], 0.5, 1.5, r), random(&[5], -1.0, 1.0, r)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, 9)
            },
        ),
        ("softmax", vec![random(&[3, 4], -2.0, 2.0, r)], |t, v| {
            let y = t.softmax(v[0]);
            project(t, y, 10)
        }),
        (
            "attention",
            vec![random(&[6, 4], -1.0, 1.0, r), random(&[8, 4], -1.0, 1.0, r), random(&[8, 4], -1.0, 1.0, r)],
            |t, v| {
                let spec =
                    AttentionSpec { batch: 2, q_len: 3, k_len: 4, heads: 2, key_lens: vec![4, 2], causal: false };
                let y = t.attention(v[0], v[1], v[2], spec)?;
                project(t, y, 11)
            },
        ),
        (
            "causal_attention",
            vec![random(&[6, 4], -1.0, 1.0, r), random(&[6, 4], -1.0, 1.0, r), random(&[6, 4], -1.0, 1.0, r)],
            |t, v| {
                let spec = AttentionSpec { batch: 2, q_len: 3, k_len: 3, heads: 2, key_lens: vec![3, 2], causal: true };
                let y = t.attention(v[0], v[1], v[2], spec)?;
                project(t, y, 12)
            },
        ),
        ("embedding", vec![random(&[5, 3], -1.0, 1.0, r)], |t, v| {
            let y = t.embedding(v[0], &[1, 4, 1, 0])?;
            project(t, y, 13)
        }),
        ("stats_pool", vec![random(&[8, 3], -1.0, 1.0, r)], |t, v| {
            let y = t.stats_pool(v[0], &[(0, 3), (4, 4), (3, 1)])?;
            project(t, y, 14)
        }),
        ("sum", vec![random(&[2, 3], -1.0, 1.0, r)], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![random(&[2, 3], -1.0, 1.0, r)], |t, v| Ok(t.mean(v[0]))),
        ("reshape", vec![random(&[2, 3], -1.0, 1.0, r)], |t, v| {
            let y = t.reshape(v[0], vec![3, 2])?;
            project(t, y, 15)
        }),
        ("ctc_loss", vec![random(&[10, 4], -2.0, 2.0, r)], |t, v| {
            let mask = FrameMask { batch: 2, max_len: 5, lens: vec![5, 3] };
            Ok(losses::ctc_loss(t, v[0], &mask, &[vec![1, 2, 1], vec![3]])?.0)
        }),
        ("attention_ce", vec![random(&[6, 5], -2.0, 2.0, r)], |t, v| {
            losses::attention_ce(t, v[0], &TokenBatch::new(&[vec![1, 2, 4], vec![3]]), 0.1)
        }),
        ("accent_ce", vec![random(&[3, 4], -2.0, 2.0, r)], |t, v| losses::accent_ce(t, v[0], &[0, 3, 1])),
        ("combine", vec![random(&[1], 0.5, 2.0, r), random(&[1], 0.5, 2.0, r), random(&[1], 0.5, 2.0, r)], |t, v| {
            losses::combine(t, Some((v[0], v[1])), Some(v[2]), &losses::LossConfig::default())
        }),
    ];
    cases.into_iter().map(|(op, inputs, f)| Ok(OpCheck { op, report: grad_check(f, &inputs, h)? })).collect()
}
