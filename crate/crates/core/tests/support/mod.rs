//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use mtjr_core::decode::PrefixScorer;
use mtjr_core::Tensor;

/// Natural-log probability of every frame label, by direct normalization.
fn log_probs(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|t| {
            let row = logits.row(t);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            row.iter().map(|x| x - z.ln()).collect()
        })
        .collect()
}

/// Collapses repeats, then drops blanks (id 0).
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &k) in path.iter().enumerate() {
        if k != 0 && (i == 0 || path[i - 1] != k) {
            out.push(k);
        }
    }
    out
}

/// Probability of `target` as the sum over every one of the `V^T` frame
/// labelings that collapse to it.
pub fn ctc_probability(logits: &Tensor, target: &[usize]) -> f64 {
    let (t, v) = (logits.rows(), logits.cols());
    let lp = log_probs(logits);
    let mut path = vec![0usize; t];
    let mut total = 0.0;
    loop {
        if collapse(&path) == target {
            total += path.iter().enumerate().map(|(i, &k)| lp[i][k]).sum::<f64>().exp();
        }
        // Odometer increment.
        let mut i = 0;
        loop {
            if i == t {
                return total;
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Minimum edit count over every alignment, by unmemoized recursion.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let diag = edit_distance(ra, rb) + usize::from(x != y);
            let del = edit_distance(ra, b) + 1;
            let ins = edit_distance(a, rb) + 1;
            diag.min(del).min(ins)
        }
    }
}

/// Per-frame argmax (first maximum wins), then the collapse rule.
pub fn greedy_rule(logits: &Tensor) -> Vec<usize> {
    let best: Vec<usize> = (0..logits.rows())
        .map(|t| {
            let row = logits.row(t);
            let mut k = 0;
            for j in 1..row.len() {
                if row[j] > row[k] {
                    k = j;
                }
            }
            k
        })
        .collect();
    collapse(&best)
}

/// Every sequence of at most `max_len` tokens (no blank, no eos) followed by
/// eos, with its summed log-probability and length-normalized score, best
/// first.
pub fn enumerate_hypotheses<S: PrefixScorer>(scorer: &S, max_len: usize) -> Vec<(Vec<usize>, f64, f64)> {
    let eos = scorer.sos_eos();
    let tokens: Vec<usize> = (1..scorer.vocab_size()).filter(|&k| k != eos).collect();
    let mut out = Vec::new();
    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for len in 0..=max_len {
        let prefixes: Vec<Vec<usize>> =
            frontier.iter().map(|(t, _)| std::iter::once(eos).chain(t.iter().copied()).collect()).collect();
        let lps = scorer.next_log_probs(&prefixes).unwrap();
        let mut next = Vec::new();
        for ((seq, score), lp) in frontier.iter().zip(&lps) {
            let total = score + lp[eos];
            out.push((seq.clone(), total, total / (seq.len() + 1) as f64));
            if len < max_len {
                for &k in &tokens {
                    let mut s = seq.clone();
                    s.push(k);
                    next.push((s, score + lp[k]));
                }
            }
        }
        frontier = next;
    }
    out.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
    out
}
