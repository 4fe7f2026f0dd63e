use std::collections::HashMap;

const MAX_ORDER: usize = 4;
/// Numerator used for an order with no matches.
const SMOOTH_EPS: f64 = 0.1;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 on a 0..100 scale with clipped counts, the brevity penalty,
/// an epsilon floor for orders without matches, and orders with no
/// hypothesis n-grams at all dropped from the geometric mean.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    assert_eq!(hyps.len(), refs.len(), "one reference per hypothesis");
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..MAX_ORDER {
        if totals[n] == 0 {
            continue;
        }
        let num = if matches[n] == 0 { SMOOTH_EPS } else { matches[n] as f64 };
        log_sum += (num / totals[n] as f64).ln();
        orders += 1;
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * (log_sum / orders as f64).exp()
}

/// Position-wise matches over the longer of each pair, pooled over the
/// corpus. Two empty sequences count as a perfect match.
pub fn token_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    assert_eq!(hyps.len(), refs.len(), "one reference per hypothesis");
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hit += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}
