//! Decoding (CTC greedy, attention beam search, joint CTC/attention
//! rescoring), word error rate and accent accuracy.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::data::Utterance;
use crate::losses::ctc_nll;
use crate::model::{EncoderOutput, FeatureBatch, FrameMask, Model, ModelConfig, SharingConfig, TokenBatch};
use crate::tensor::Tensor;
use crate::train::{Mode, TagPosition};
use crate::{math, Error, Result};

/// Per-frame argmax, then collapse adjacent repeats and drop blanks.
pub fn ctc_greedy(logits: &Tensor) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..logits.rows() {
        let k = argmax(logits.row(t));
        if prev != Some(k) && k != ModelConfig::BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Decoded tokens without sos/eos (accent tags included, if any).
    pub tokens: Vec<usize>,
    /// Summed attention log-probability, including the closing eos.
    pub att_logprob: f64,
    pub ctc_logprob: Option<f64>,
    /// Accent read from a tag token (tag-appending models only).
    pub accent_tag: Option<usize>,
    pub final_score: f64,
}

impl Hypothesis {
    /// Scored positions: the tokens plus the closing eos.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() + 1
    }
}

/// Next-token distributions of an autoregressive decoder.
pub trait PrefixScorer {
    fn vocab_size(&self) -> usize;
    fn sos_eos(&self) -> usize;
    /// Log-probabilities of the next token after each prefix (every prefix
    /// starts with sos).
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// The attention decoder of `model` over one utterance's encoder output.
pub struct AttentionScorer<'m> {
    model: &'m Model,
    /// `frames × d_model` final encoder layer.
    memory: Tensor,
}

impl<'m> AttentionScorer<'m> {
    pub fn new(model: &'m Model, memory: Tensor) -> Self {
        Self { model, memory }
    }
}

impl PrefixScorer for AttentionScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn sos_eos(&self) -> usize {
        self.model.config.sos_eos()
    }

    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let frames = self.memory.rows();
        let mut mem = Vec::with_capacity(n * self.memory.len());
        for _ in 0..n {
            mem.extend_from_slice(self.memory.data());
        }
        let mut tape = self.model.tape(false);
        let memory = tape.constant(Tensor::new(vec![n * frames, self.memory.cols()], mem)?);
        let enc = EncoderOutput {
            layers: vec![memory],
            residual: Vec::new(),
            mask: FrameMask { batch: n, max_len: frames, lens: vec![frames; n] },
        };
        let tokens = TokenBatch::new(prefixes);
        let logits = self.model.decode_logits(&mut tape, &tokens, &enc, None)?;
        let logits = tape.value(logits);
        let v = logits.cols();
        Ok((0..n)
            .map(|b| {
                let mut lp = vec![0.0; v];
                math::log_softmax_into(logits.row(b * tokens.max_len + tokens.lens[b] - 1), &mut lp);
                lp
            })
            .collect())
    }
}

/// Length cap `ceil(ratio · frames)`, at least 1.
pub fn max_decode_len(ratio: f64, frames: usize) -> usize {
    (math::ceil(ratio * frames as f64) as usize).max(1)
}

fn by_score_then_tokens(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Beam search over the decoder with length-normalized scores
/// `att_logprob / (tokens + 1)`.
///
/// At every step each live hypothesis is extended by every token except
/// blank; the best `beam` extensions (by log-probability, ties to the
/// smaller token id) survive, and those that chose eos are finished.
/// Hypotheses still open after `max_len` tokens are closed with eos. The
/// result holds at most `beam` hypotheses, best first.
pub fn beam_search<S: PrefixScorer + ?Sized>(scorer: &S, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::InvalidConfig("beam must be at least 1".into()));
    }
    let eos = scorer.sos_eos();
    let v = scorer.vocab_size();
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..=max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> =
            live.iter().map(|(t, _)| core::iter::once(eos).chain(t.iter().copied()).collect()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        // (extended sequence incl. the chosen token, log-prob)
        let mut cands: Vec<(Vec<usize>, f64)> = Vec::new();
        for ((tokens, score), lp) in live.iter().zip(&lps) {
            for (k, &l) in lp.iter().enumerate().take(v).skip(1) {
                if step == max_len && k != eos {
                    continue;
                }
                let mut ext = tokens.clone();
                ext.push(k);
                cands.push((ext, score + l));
            }
        }
        cands.sort_by(|a, b| by_score_then_tokens((a.1, &a.0), (b.1, &b.0)));
        cands.truncate(beam);
        live.clear();
        for (mut tokens, score) in cands {
            if tokens.last() == Some(&eos) {
                tokens.pop();
                let len = tokens.len() + 1;
                finished.push(Hypothesis {
                    tokens,
                    att_logprob: score,
                    ctc_logprob: None,
                    accent_tag: None,
                    final_score: score / len as f64,
                });
            } else {
                live.push((tokens, score));
            }
        }
    }
    sort_hypotheses(&mut finished);
    finished.truncate(beam);
    Ok(finished)
}

fn sort_hypotheses(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| by_score_then_tokens((a.final_score, &a.tokens), (b.final_score, &b.tokens)));
}

/// Re-ranks hypotheses by
/// `(1 − w)·att_logprob/len + w·ctc_logprob/len`, where `len` counts the
/// tokens plus eos and `ctc_logprob` is the CTC log-likelihood under
/// `ctc_logits` (`frames × vocab`). Hypotheses CTC cannot align score −∞.
/// The sort is stable.
pub fn joint_rescore(mut hyps: Vec<Hypothesis>, ctc_logits: &Tensor, w_ctc: f64) -> Result<Vec<Hypothesis>> {
    if !(0.0..=1.0).contains(&w_ctc) {
        return Err(Error::InvalidConfig(format!("CTC weight {w_ctc} outside [0, 1]")));
    }
    for h in &mut hyps {
        let ctc = match ctc_nll(ctc_logits, &h.tokens) {
            Ok(nll) => -nll,
            Err(Error::InfeasibleAlignment { .. }) => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        h.ctc_logprob = Some(ctc);
        let len = h.scored_len() as f64;
        h.final_score = if w_ctc == 0.0 {
            h.att_logprob / len
        } else if ctc == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            (1.0 - w_ctc) * h.att_logprob / len + w_ctc * ctc / len
        };
    }
    hyps.sort_by(|a, b| b.final_score.total_cmp(&a.final_score));
    Ok(hyps)
}

/// Splits an accent tag out of a decoded sequence. Exactly one tag yields
/// its accent; with none or several the accent is unknown. Tags never appear
/// in the returned transcript.
pub fn extract_accent_tag(tokens: &[usize], config: &ModelConfig) -> (Vec<usize>, Option<usize>) {
    let tags: Vec<usize> = tokens.iter().filter_map(|&t| config.tag_accent(t)).collect();
    let transcript = tokens.iter().copied().filter(|&t| config.tag_accent(t).is_none()).collect();
    let accent = if tags.len() == 1 { Some(tags[0]) } else { None };
    (transcript, accent)
}

/// Edit counts of a minimal alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WerStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
    pub wer: f64,
}

impl WerStats {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn from_counts(substitutions: usize, insertions: usize, deletions: usize, reference_length: usize) -> Self {
        let edits = substitutions + insertions + deletions;
        let wer = if reference_length == 0 { 0.0 } else { edits as f64 / reference_length as f64 };
        Self { substitutions, insertions, deletions, reference_length, wer }
    }

    /// Pools edit counts over utterances.
    pub fn pooled<'a, I: IntoIterator<Item = &'a WerStats>>(stats: I) -> Self {
        let (mut s, mut i, mut d, mut n) = (0, 0, 0, 0);
        for w in stats {
            s += w.substitutions;
            i += w.insertions;
            d += w.deletions;
            n += w.reference_length;
        }
        Self::from_counts(s, i, d, n)
    }
}

/// Levenshtein alignment with unit costs. Among minimal alignments the
/// backtrace prefers a substitution, then an insertion, then a deletion.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<WerStats> {
    if reference.is_empty() && !hypothesis.is_empty() {
        return Err(Error::EmptyReference);
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = cost[i * w + j - 1] + 1;
            let del = cost[(i - 1) * w + j] + 1;
            cost[i * w + j] = diag.min(ins).min(del);
        }
    }
    let (mut s, mut ins, mut del) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if cost[(i - 1) * w + j - 1] + usize::from(!same) == here {
                s += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * w + j - 1] + 1 == here {
            ins += 1;
            j -= 1;
        } else {
            del += 1;
            i -= 1;
        }
    }
    Ok(WerStats::from_counts(s, ins, del, n))
}

/// How transcripts are decoded during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum DecodeMethod {
    /// Attention beam search followed by joint CTC rescoring.
    Beam,
    /// CTC best path only.
    CtcGreedy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct DecodeConfig {
    pub method: DecodeMethod,
    pub beam: usize,
    pub ctc_weight: f64,
    pub max_len_ratio: f64,
    /// Utterances encoded together.
    pub batch_size: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { method: DecodeMethod::Beam, beam: 10, ctc_weight: 0.3, max_len_ratio: 1.0, batch_size: 32 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beam >= 1
            && (0.0..=1.0).contains(&self.ctc_weight)
            && self.max_len_ratio > 0.0
            && self.max_len_ratio <= 1.0
            && self.batch_size >= 1;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid decode settings {self:?}")));
        }
        Ok(())
    }
}

/// Corpus-level results. Fields a mode cannot produce are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub wer: Option<WerStats>,
    pub accent_accuracy: Option<f64>,
    /// Indexed by accent id; `None` for accents absent from the data.
    pub per_accent_accuracy: Vec<Option<f64>>,
    pub accent_counts: Vec<usize>,
    /// Utterances with an empty reference, left out of the WER.
    pub empty_references: usize,
}

/// The best decoded sequence for each utterance of an encoded batch.
fn decode_batch(
    model: &Model,
    tape: &crate::Tape<'_>,
    enc: &EncoderOutput,
    ctc: Option<&Tensor>,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<usize>>> {
    let d = model.config.d_model;
    let v = model.config.vocab_size;
    let last = tape.value(enc.last());
    let mut out = Vec::with_capacity(enc.mask.batch);
    for (b, &frames) in enc.mask.lens.iter().enumerate() {
        let first = b * enc.mask.max_len;
        let ctc_rows = ctc.map(|c| Tensor::new(vec![frames, v], c.data()[first * v..(first + frames) * v].to_vec()));
        let best = match cfg.method {
            DecodeMethod::CtcGreedy => ctc_greedy(&ctc_rows.expect("CTC logits computed")?),
            DecodeMethod::Beam => {
                let memory = Tensor::new(vec![frames, d], last.data()[first * d..(first + frames) * d].to_vec())?;
                let scorer = AttentionScorer::new(model, memory);
                let hyps = beam_search(&scorer, cfg.beam, max_decode_len(cfg.max_len_ratio, frames))?;
                let hyps = match ctc_rows {
                    Some(rows) if cfg.ctc_weight > 0.0 => joint_rescore(hyps, &rows?, cfg.ctc_weight)?,
                    _ => hyps,
                };
                hyps.into_iter().next().map(|h| h.tokens).unwrap_or_default()
            }
        };
        out.push(best);
    }
    Ok(out)
}

/// Decodes and classifies `utterances`.
///
/// WER is pooled over the corpus. The accent prediction is the accent head's
/// argmax for modes that train it, and the decoded tag for the
/// tag-appending mode (an utterance without exactly one tag counts as
/// wrong). With `decode = None` nothing is decoded, so only head-based
/// accuracy is reported.
pub fn evaluate(
    model: &Model,
    mode: Mode,
    sharing: SharingConfig,
    utterances: &[Utterance],
    decode: Option<&DecodeConfig>,
) -> Result<EvalReport> {
    if utterances.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(cfg) = decode {
        cfg.validate()?;
    }
    let accents = model.config.accent_count;
    let wants_wer = decode.is_some() && mode != Mode::MonoAr;
    let wants_acc = match mode {
        Mode::MonoAsr => false,
        Mode::MonoAr | Mode::Mtjr => true,
        Mode::Stjr(_) => decode.is_some(),
    };
    let batch_size = decode.map_or(32, |c| c.batch_size);

    let mut stats = Vec::new();
    let mut empty_references = 0;
    let mut correct = vec![0usize; accents];
    let mut counts = vec![0usize; accents];
    for chunk in utterances.chunks(batch_size) {
        let feats = FeatureBatch::from_utterances(
            model.config.feature_dim,
            chunk.iter().map(|u| (u.features.data.as_slice(), u.features.rows)),
        )?;
        let mut tape = model.tape(false);
        let enc = model.encode_features(&mut tape, &feats, None)?;
        let head_pred: Option<Vec<usize>> = if matches!(mode, Mode::MonoAr | Mode::Mtjr) {
            let logits = model.accent_branch(&mut tape, &enc, sharing)?;
            let logits = tape.value(logits);
            Some((0..chunk.len()).map(|b| argmax(logits.row(b))).collect())
        } else {
            None
        };
        let decoded = match decode {
            Some(cfg) if mode != Mode::MonoAr => {
                let needs_ctc = cfg.method == DecodeMethod::CtcGreedy || cfg.ctc_weight > 0.0;
                let ctc = if needs_ctc {
                    let c = model.ctc_logits(&mut tape, &enc)?;
                    Some(tape.value(c).clone())
                } else {
                    None
                };
                Some(decode_batch(model, &tape, &enc, ctc.as_ref(), cfg)?)
            }
            _ => None,
        };
        for (b, utt) in chunk.iter().enumerate() {
            let (transcript, tag) = match &decoded {
                Some(d) => {
                    let (t, tag) = extract_accent_tag(&d[b], &model.config);
                    (Some(t), tag)
                }
                None => (None, None),
            };
            if wants_wer {
                let hyp = transcript.as_deref().unwrap_or(&[]);
                match wer(&utt.tokens, hyp) {
                    Ok(s) => stats.push(s),
                    Err(Error::EmptyReference) => {
                        empty_references += 1;
                        log::warn!("{}: empty reference left out of WER", utt.utt_id);
                    }
                    Err(e) => return Err(e),
                }
            }
            if wants_acc {
                if utt.accent_id >= accents {
                    return Err(Error::LabelOutOfRange { label: utt.accent_id, classes: accents });
                }
                let predicted = match &head_pred {
                    Some(p) => Some(p[b]),
                    None => tag,
                };
                counts[utt.accent_id] += 1;
                correct[utt.accent_id] += usize::from(predicted == Some(utt.accent_id));
            }
        }
    }
    let total: usize = counts.iter().sum();
    Ok(EvalReport {
        wer: wants_wer.then(|| WerStats::pooled(&stats)),
        accent_accuracy: wants_acc.then(|| correct.iter().sum::<usize>() as f64 / total as f64),
        per_accent_accuracy: if wants_acc {
            counts.iter().zip(&correct).map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64)).collect()
        } else {
            vec![None; accents]
        },
        accent_counts: counts,
        empty_references,
    })
}

/// Target sequence of the tag-appending mode.
pub fn tagged_target(tokens: &[usize], accent: usize, position: TagPosition, config: &ModelConfig) -> Vec<usize> {
    let tag = config.accent_tag(accent);
    match position {
        TagPosition::Append => tokens.iter().copied().chain(core::iter::once(tag)).collect(),
        TagPosition::Prepend => core::iter::once(tag).chain(tokens.iter().copied()).collect(),
    }
}
