//! Training objectives: CTC, label-smoothed attention cross-entropy, accent
//! cross-entropy, and their weighted combination
//!
//! ```text
//! asr   = γ·ctc + (1 − γ)·att
//! total = β·asr + λ·accent
//! ```
//!
//! Every loss is a per-utterance quantity averaged over the batch. CTC is the
//! negative log-likelihood of the whole transcript (not divided by its
//! length); the attention loss is the mean over output positions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{self, LOG_FLOOR};
use crate::model::{FrameMask, TokenBatch};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct LossConfig {
    /// Weight of the ASR loss.
    pub beta: f64,
    /// Weight of the accent loss.
    pub lambda: f64,
    /// Weight of CTC inside the ASR loss.
    pub gamma: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 1.0, lambda: 0.1, gamma: 0.3, label_smoothing: 0.1 }
    }
}

impl LossConfig {
    /// The constrained weighting with `β = 1 − λ`.
    pub fn convex(lambda: f64) -> Self {
        Self { beta: 1.0 - lambda, lambda, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.gamma)
            && self.lambda >= 0.0
            && self.beta > 0.0
            && (0.0..1.0).contains(&self.label_smoothing);
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Scalar components of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub att: f64,
    pub asr: f64,
    pub accent: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(ctc: f64, att: f64, accent: f64, cfg: &LossConfig) -> Result<Self> {
        for (name, v) in [("ctc", ctc), ("att", att), ("accent", accent)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss")));
            }
        }
        let asr = cfg.gamma * ctc + (1.0 - cfg.gamma) * att;
        let total = cfg.beta * asr + cfg.lambda * accent;
        Ok(Self { ctc, att, asr, accent, total })
    }
}

/// Minimum number of frames that admits a CTC alignment of `target`: one
/// per label plus a separating blank between equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn log_softmax_rows(logits: &[f64], v: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lp = vec![0.0; logits.len()];
    let mut p = vec![0.0; logits.len()];
    for ((row, out), prob) in logits.chunks(v).zip(lp.chunks_mut(v)).zip(p.chunks_mut(v)) {
        math::log_softmax_into(row, out);
        for (o, q) in out.iter_mut().zip(prob.iter_mut()) {
            *q = math::exp(*o);
            *o = o.max(LOG_FLOOR);
        }
    }
    (lp, p)
}

/// CTC negative log-likelihood of `target` under `frames × v` logits and,
/// optionally, its gradient with respect to the logits.
pub(crate) fn ctc_forward_backward(
    logits: &[f64],
    v: usize,
    target: &[usize],
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if target.contains(&0) {
        return Err(Error::BlankInTarget);
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= v) {
        return Err(Error::LabelOutOfRange { label: bad, classes: v });
    }
    let frames = logits.len() / v;
    let required = ctc_min_frames(target);
    if frames < required || frames == 0 {
        return Err(Error::InfeasibleAlignment { frames, required: required.max(1) });
    }
    let (lp, p) = log_softmax_rows(logits, v);
    let s_len = 2 * target.len() + 1;
    let ext = |s: usize| if s.is_multiple_of(2) { 0 } else { target[s / 2] };
    // A label may skip the preceding blank unless it repeats the label
    // before that blank.
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && ext(s) != ext(s - 2);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp[0];
    if s_len > 1 {
        alpha[1] = lp[ext(1)];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = math::log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = math::log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp[t * v + ext(s)] };
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let mut log_p = last[s_len - 1];
    if s_len > 1 {
        log_p = math::log_add(log_p, last[s_len - 2]);
    }
    let log_p = log_p.max(LOG_FLOOR);
    let nll = -log_p;
    if !want_grad {
        return Ok((nll, None));
    }

    let mut beta = vec![ninf; frames * s_len];
    let t_last = frames - 1;
    beta[t_last * s_len + s_len - 1] = lp[t_last * v + ext(s_len - 1)];
    if s_len > 1 {
        beta[t_last * s_len + s_len - 2] = lp[t_last * v + ext(s_len - 2)];
    }
    for t in (0..t_last).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = math::log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = math::log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp[t * v + ext(s)] };
        }
    }

    let mut grad = p;
    let mut occupancy = vec![ninf; v];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let k = ext(s);
            occupancy[k] = math::log_add(occupancy[k], a + b - lp[t * v + k]);
        }
        for (k, &o) in occupancy.iter().enumerate() {
            if o != ninf {
                grad[t * v + k] -= math::exp(o - log_p);
            }
        }
    }
    Ok((nll, Some(grad)))
}

/// CTC negative log-likelihood for a single `frames × vocab` logit matrix.
pub fn ctc_nll(logits: &Tensor, target: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!("CTC logits must be T×V, got {:?}", logits.shape())));
    }
    ctc_forward_backward(logits.data(), logits.cols(), target, false).map(|(nll, _)| nll)
}

/// Batch-averaged CTC loss over the valid frames of each utterance. Returns
/// the loss node and the per-utterance negative log-likelihoods.
pub fn ctc_loss(tape: &mut Tape<'_>, logits: Var, mask: &FrameMask, targets: &[Vec<usize>]) -> Result<(Var, Vec<f64>)> {
    let t = tape.value(logits);
    let v = t.cols();
    if t.rows() != mask.batch * mask.max_len || targets.len() != mask.batch {
        return Err(Error::LengthMismatch { expected: mask.batch * mask.max_len, actual: t.rows() });
    }
    let want_grad = tape.requires_grad(logits);
    let mut grad = if want_grad { vec![0.0; t.len()] } else { Vec::new() };
    let mut per_utt = Vec::with_capacity(mask.batch);
    let inv_b = 1.0 / mask.batch as f64;
    for (b, target) in targets.iter().enumerate() {
        let start = b * mask.max_len * v;
        let rows = &t.data()[start..start + mask.lens[b] * v];
        let (nll, g) = ctc_forward_backward(rows, v, target, want_grad)?;
        per_utt.push(nll);
        if let Some(g) = g {
            for (acc, x) in grad[start..start + g.len()].iter_mut().zip(g) {
                *acc = x * inv_b;
            }
        }
    }
    let loss = per_utt.iter().sum::<f64>() * inv_b;
    if !want_grad {
        grad = vec![0.0; t.len()];
    }
    Ok((tape.fused_scalar(logits, loss, grad), per_utt))
}

/// Label-smoothed cross-entropy over the valid positions of `targets`:
/// `(1 − ε)·NLL(target) + ε·mean_v NLL(v)`, averaged over each sequence and
/// then over the batch.
pub fn attention_ce(tape: &mut Tape<'_>, logits: Var, targets: &TokenBatch, eps: f64) -> Result<Var> {
    let weights: Vec<f64> = (0..targets.batch)
        .flat_map(|b| {
            let len = targets.lens[b];
            (0..targets.max_len).map(move |i| if i < len { 1.0 / len as f64 } else { 0.0 })
        })
        .map(|w| w / targets.batch as f64)
        .collect();
    smoothed_ce(tape, logits, &targets.ids, &weights, eps)
}

/// Softmax cross-entropy of one label per utterance, averaged over the batch.
pub fn accent_ce(tape: &mut Tape<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = tape.value(logits).cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let w = vec![1.0 / labels.len().max(1) as f64; labels.len()];
    smoothed_ce(tape, logits, labels, &w, 0.0)
}

fn smoothed_ce(tape: &mut Tape<'_>, logits: Var, targets: &[usize], weights: &[f64], eps: f64) -> Result<Var> {
    let t = tape.value(logits);
    let v = t.cols();
    if t.rows() != targets.len() {
        return Err(Error::LengthMismatch { expected: targets.len(), actual: t.rows() });
    }
    let mut grad = vec![0.0; t.len()];
    let mut lp = vec![0.0; v];
    let mut loss = 0.0;
    for (r, (&y, &w)) in targets.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        if y >= v {
            return Err(Error::LabelOutOfRange { label: y, classes: v });
        }
        math::log_softmax_into(t.row(r), &mut lp);
        let mean_nll = -lp.iter().map(|x| x.max(LOG_FLOOR)).sum::<f64>() / v as f64;
        let nll = -lp[y].max(LOG_FLOOR);
        loss += w * ((1.0 - eps) * nll + eps * mean_nll);
        let g = &mut grad[r * v..(r + 1) * v];
        for (gk, l) in g.iter_mut().zip(&lp) {
            *gk = w * (math::exp(*l) - eps / v as f64);
        }
        g[y] -= w * (1.0 - eps);
    }
    Ok(tape.fused_scalar(logits, loss, grad))
}

/// Builds `total = β·(γ·ctc + (1 − γ)·att) + λ·accent` on the tape. Missing
/// components drop out: without an accent term the total is the ASR loss,
/// without ASR terms it is the accent loss.
pub fn combine(tape: &mut Tape<'_>, asr: Option<(Var, Var)>, accent: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    let asr = match asr {
        Some((ctc, att)) => {
            let c = tape.scale(ctc, cfg.gamma);
            let a = tape.scale(att, 1.0 - cfg.gamma);
            Some(tape.add(c, a)?)
        }
        None => None,
    };
    match (asr, accent) {
        (Some(asr), Some(acc)) => {
            let a = tape.scale(asr, cfg.beta);
            let b = tape.scale(acc, cfg.lambda);
            tape.add(a, b)
        }
        (Some(asr), None) => Ok(asr),
        (None, Some(acc)) => Ok(acc),
        (None, None) => Err(Error::InvalidConfig("no loss component selected".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_arithmetic() {
        let cfg = LossConfig { beta: 1.0, lambda: 0.1, gamma: 0.3, label_smoothing: 0.1 };
        let b = LossBreakdown::combine(2.0, 1.0, 0.05, &cfg).unwrap();
        assert!((b.asr - 1.3).abs() < 1e-12);
        assert!((b.total - 1.305).abs() < 1e-12);

        let cfg0 = LossConfig { lambda: 0.0, ..cfg };
        let b = LossBreakdown::combine(2.0, 1.0, 0.05, &cfg0).unwrap();
        assert_eq!(b.total, b.asr);

        let convex = LossConfig::convex(0.1);
        assert!((convex.beta + convex.lambda - 1.0).abs() < 1e-15);
        assert!((convex.beta - 0.9).abs() < 1e-15);
    }

    #[test]
    fn combine_rejects_non_finite() {
        let cfg = LossConfig::default();
        assert!(matches!(LossBreakdown::combine(f64::NAN, 1.0, 1.0, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn ctc_single_frame_uniform() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let nll = ctc_nll(&logits, &[1]).unwrap();
        assert!((nll - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ctc_repeat_needs_separating_blank() {
        let logits = Tensor::zeros(&[2, 3]);
        assert_eq!(ctc_nll(&logits, &[1, 1]), Err(Error::InfeasibleAlignment { frames: 2, required: 3 }));
        assert!(ctc_nll(&Tensor::zeros(&[3, 3]), &[1, 1]).is_ok());
        assert_eq!(ctc_nll(&logits, &[0, 1]), Err(Error::BlankInTarget));
    }

    #[test]
    fn attention_ce_uniform_is_log_v() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 5]));
        let targets = TokenBatch::new(&[vec![1, 2, 4]]);
        let l = attention_ce(&mut tape, logits, &targets, 0.0).unwrap();
        assert!((tape.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_ce_smoothed_hand_computed() {
        // One position, V = 4, logits [1, 0, 0, 0], target 0, ε = 0.1.
        // log-softmax: [1 − ln(e+3), −ln(e+3) ×3].
        let z = (1f64.exp() + 3.0).ln();
        let lp = [1.0 - z, -z, -z, -z];
        let expected = 0.9 * -lp[0] + 0.1 * -(lp.iter().sum::<f64>()) / 4.0;
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let l = attention_ce(&mut tape, logits, &TokenBatch::new(&[vec![0]]), 0.1).unwrap();
        assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-14);
        assert!((expected - 0.818_668_380_628_679).abs() < 1e-12);
    }

    #[test]
    fn attention_ce_length_mismatch() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 5]));
        let r = attention_ce(&mut tape, logits, &TokenBatch::new(&[vec![1, 2, 3]]), 0.0);
        assert!(matches!(r, Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn accent_ce_examples() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 8]));
        let l = accent_ce(&mut tape, logits, &[3]).unwrap();
        assert!((tape.value(l).item().unwrap() - 8f64.ln()).abs() < 1e-12);

        let mut z = vec![0.0; 8];
        z[3] = 20.0;
        let logits = tape.constant(Tensor::new(vec![1, 8], z).unwrap());
        let l = accent_ce(&mut tape, logits, &[3]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-6);

        let r = accent_ce(&mut tape, logits, &[8]);
        assert_eq!(r.unwrap_err(), Error::LabelOutOfRange { label: 8, classes: 8 });
    }
}
