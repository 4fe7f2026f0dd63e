use crate::corpus::{BOS, EOS, PAD};
use crate::error::{invalid, Result};

/// Next-token log-probabilities given a BOS-prefixed history.
pub trait StepScorer {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[usize]) -> Result<Vec<f64>>> StepScorer for F {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    logprob: f64,
}

impl Hyp {
    fn score(&self, length_penalty: f64) -> f64 {
        let len = (self.tokens.len() - 1).max(1) as f64;
        self.logprob / len.powf(length_penalty)
    }
}

/// Beam search. Returns generated tokens without BOS; a trailing EOS is kept
/// when the hypothesis produced one. PAD and BOS are never emitted.
pub fn generate<S: StepScorer>(
    scorer: &mut S,
    max_len: usize,
    beam: usize,
    length_penalty: f64,
) -> Result<Vec<usize>> {
    if beam == 0 {
        return invalid("beam must be at least 1");
    }
    let mut alive = vec![Hyp {
        tokens: vec![BOS],
        logprob: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for h in &alive {
            let lp = scorer.log_probs(&h.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                if tok == PAD || tok == BOS || l == f64::NEG_INFINITY {
                    continue;
                }
                candidates.push((h, tok, h.logprob + l));
            }
        }
        // stable: ties keep hypothesis then token order
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut next = Vec::new();
        for (h, tok, lp) in candidates.into_iter().take(beam) {
            let mut tokens = h.tokens.clone();
            tokens.push(tok);
            let hyp = Hyp { tokens, logprob: lp };
            if tok == EOS {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    finished.extend(alive);
    let best = finished
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            a.score(length_penalty)
                .total_cmp(&b.score(length_penalty))
                .then(j.cmp(i))
        })
        .map(|(_, h)| h.tokens[1..].to_vec());
    Ok(best.unwrap_or_default())
}
