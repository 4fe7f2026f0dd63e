use super::*;
use crate::corpus::{BOS, EOS};
use crate::substrate::finite_diff_check;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const D: usize = 8;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

fn random_input(t: usize, seed: u64) -> Tensor {
    Tensor::randn(&[t, D], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn zero_all(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = 0.0;
        }
    }
}

#[test]
fn zero_weight_layer_is_identity() {
    let mut store = ParamStore::new();
    let enc = EncoderStack::new(&mut store, "enc", 1, D, 2, 16, false, &mut rng()).unwrap();
    zero_all(&mut store);
    let x = random_input(5, 1);
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let y = enc.encode(&mut g, &Ctx::eval(&store), xv, &[true; 5]).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn masked_frames_do_not_leak() {
    let mut store = ParamStore::new();
    let enc = EncoderStack::new(&mut store, "enc", 2, D, 2, 16, true, &mut rng()).unwrap();
    let x = random_input(6, 2);
    let mask = [true, true, true, true, false, false];
    let mut swapped = x.clone();
    let (r4, r5) = (x.row_slice(4).to_vec(), x.row_slice(5).to_vec());
    swapped.data_mut()[4 * D..5 * D].copy_from_slice(&r5);
    swapped.data_mut()[5 * D..6 * D].copy_from_slice(&r4);
    let run = |t: &Tensor| {
        let mut g = Graph::no_grad();
        let v = g.constant(t.clone());
        let y = enc.encode(&mut g, &Ctx::eval(&store), v, &mask).unwrap();
        g.value(y).data()[..4 * D].to_vec()
    };
    let (a, b) = (run(&x), run(&swapped));
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let enc = EncoderStack::new(&mut store, "enc", 1, D, 2, 12, true, &mut rng()).unwrap();
    let x = random_input(4, 3);
    let target = random_input(4, 4);
    let report = finite_diff_check(&mut store, None, 1e-5, |g, s| {
        let xv = g.constant(x.clone());
        let y = enc.encode(g, &Ctx::eval(s), xv, &[true, true, true, false])?;
        let t = g.constant(target.clone());
        let d = g.mul(y, t)?;
        g.sum(d)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn embedding_lookup_and_mask() {
    let mut store = ParamStore::new();
    let emb = TextEmbedding::new(&mut store, "emb", 10, D, &mut rng()).unwrap();
    let mut g = Graph::no_grad();
    let (e, mask) = emb.embed(&mut g, &Ctx::eval(&store), &[5, 7, 5, 0]).unwrap();
    assert_eq!(mask, vec![true, true, true, false]);
    let pos = sinusoidal_positions(4, D);
    let v = g.value(e);
    for j in 0..D {
        let a = v.at(0, j) - pos.at(0, j);
        let b = v.at(2, j) - pos.at(2, j);
        assert!((a - b).abs() < 1e-12);
    }
    assert!(emb.embed(&mut g, &Ctx::eval(&store), &[10]).is_err());
}

#[test]
fn embedding_gradient_is_sparse() {
    let mut store = ParamStore::new();
    let emb = TextEmbedding::new(&mut store, "emb", 10, D, &mut rng()).unwrap();
    let mut g = Graph::new();
    let (e, _) = emb.embed(&mut g, &Ctx::eval(&store), &[2, 6, 6]).unwrap();
    let sq = g.mul(e, e).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    let gt = grads.get(&store, emb.table).unwrap();
    for r in 0..10 {
        let nonzero = gt.row_slice(r).iter().any(|v| *v != 0.0);
        assert_eq!(nonzero, r == 2 || r == 6, "row {r}");
    }
}

fn decoder_fixture() -> (ParamStore, DecoderStack, Tensor) {
    let mut store = ParamStore::new();
    let dec = DecoderStack::new(&mut store, "dec", 2, D, 2, 12, 9, &mut rng()).unwrap();
    (store, dec, random_input(5, 9))
}

#[test]
fn decoder_is_causal_and_normalized() {
    let (store, dec, mem) = decoder_fixture();
    let mask = [true, true, true, true, false];
    let run = |tgt: &[usize]| {
        let mut g = Graph::no_grad();
        let m = g.constant(mem.clone());
        let (logits, trace) = dec.decode(&mut g, &Ctx::eval(&store), tgt, m, &mask).unwrap();
        (g.value(logits).clone(), trace)
    };
    let (a, trace) = run(&[BOS, 4, 5, 6]);
    let (b, _) = run(&[BOS, 4, 5, 8]);
    assert_eq!(a.row_slice(0), b.row_slice(0));
    assert_eq!(a.row_slice(2), b.row_slice(2));
    assert_ne!(a.row_slice(3), b.row_slice(3));
    assert_eq!(trace.layers.len(), 2);
    for layer in &trace.layers {
        assert_eq!(layer.len(), 2);
        for w in layer {
            assert_eq!(w.shape(), &[4, 5]);
            for r in 0..4 {
                let row = w.row_slice(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row[4] < 1e-12);
            }
        }
    }
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let (mut store, dec, mem) = decoder_fixture();
    let report = finite_diff_check(&mut store, None, 1e-5, |g, s| {
        let m = g.constant(mem.clone());
        let (logits, _) = dec.decode(g, &Ctx::eval(s), &[BOS, 4, 7], m, &[true; 5])?;
        let lp = g.log_softmax(logits)?;
        g.smoothed_nll(lp, &[4, 7, EOS], 0.1)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn gradient_reaches_memory() {
    let (store, dec, mem) = decoder_fixture();
    let mut g = Graph::new();
    let m = g.constant(mem);
    let m = g.scale(m, 1.0).unwrap();
    let (logits, _) = dec.decode(&mut g, &Ctx::eval(&store), &[BOS, 5], m, &[true; 5]).unwrap();
    let s = g.sum(logits).unwrap();
    assert!(g.backward(s).unwrap().touches(&store));
}

/// Log-probs over 9 ids from a fixed table indexed by prefix length.
fn table_scorer(table: Vec<Vec<(usize, f64)>>) -> impl FnMut(&[usize]) -> Result<Vec<f64>> {
    move |prefix: &[usize]| {
        let mut lp = vec![f64::NEG_INFINITY; 9];
        let step = prefix.len() - 1;
        // depend on the previous token too, so paths differ
        let prev = *prefix.last().unwrap();
        for &(tok, p) in &table[step] {
            let bump = if prev == 5 && tok == 4 { 0.3 } else { 0.0 };
            lp[tok] = p + bump;
        }
        let z = lp.iter().filter(|v| v.is_finite()).map(|v| v.exp()).sum::<f64>().ln();
        Ok(lp.iter().map(|v| v - z).collect())
    }
}

#[test]
fn dominant_token_repeats_until_max_len() {
    let mut s = |_: &[usize]| -> Result<Vec<f64>> {
        let mut lp = vec![-10.0; 9];
        lp[6] = -0.01;
        Ok(lp)
    };
    assert_eq!(generate(&mut s, 5, 1, 1.0).unwrap(), vec![6; 5]);
    assert_eq!(generate(&mut s, 5, 3, 1.0).unwrap(), vec![6; 5]);
}

#[test]
fn greedy_is_stepwise_argmax() {
    let mut scorer = table_scorer(vec![
        vec![(4, 0.0), (5, 0.4), (EOS, -3.0)],
        vec![(4, 0.1), (5, 0.0), (EOS, -1.0)],
        vec![(4, 0.0), (5, 0.2), (EOS, 0.5)],
    ]);
    let mut manual = vec![BOS];
    for _ in 0..3 {
        let lp = scorer(&manual).unwrap();
        let best = (0..9).max_by(|a, b| lp[*a].total_cmp(&lp[*b])).unwrap();
        manual.push(best);
        if best == EOS {
            break;
        }
    }
    assert_eq!(generate(&mut scorer, 3, 1, 1.0).unwrap(), manual[1..].to_vec());
}

#[test]
fn beam_matches_exhaustive_search() {
    let table = vec![
        vec![(4, 0.0), (5, 0.2)],
        vec![(4, 0.5), (5, 0.0)],
        vec![(4, 0.0), (5, 1.1)],
    ];
    let mut scorer = table_scorer(table);
    let mut best = (f64::NEG_INFINITY, vec![]);
    for a in [4, 5] {
        for b in [4, 5] {
            for c in [4, 5] {
                let mut lp = 0.0;
                let mut prefix = vec![BOS];
                for t in [a, b, c] {
                    lp += scorer(&prefix).unwrap()[t];
                    prefix.push(t);
                }
                if lp > best.0 {
                    best = (lp, vec![a, b, c]);
                }
            }
        }
    }
    assert_eq!(generate(&mut scorer, 3, 4, 1.0).unwrap(), best.1);
}

#[test]
fn wide_beam_with_eos_matches_exhaustive_scores() {
    let table = vec![
        vec![(4, 0.0), (5, 0.1), (EOS, -0.5)],
        vec![(4, 0.3), (5, 0.0), (EOS, 0.2)],
        vec![(4, 0.0), (5, 0.4), (EOS, 0.1)],
    ];
    let mut scorer = table_scorer(table);
    for penalty in [0.0, 1.0, 2.0] {
        let mut best = (f64::NEG_INFINITY, vec![]);
        let mut stack = vec![(vec![BOS], 0.0)];
        while let Some((prefix, lp)) = stack.pop() {
            let done = prefix.len() == 4 || *prefix.last().unwrap() == EOS;
            if done {
                let score = lp / ((prefix.len() - 1) as f64).powf(penalty);
                if score > best.0 {
                    best = (score, prefix[1..].to_vec());
                }
                continue;
            }
            let next = scorer(&prefix).unwrap();
            for t in [4, 5, EOS] {
                let mut p = prefix.clone();
                p.push(t);
                stack.push((p, lp + next[t]));
            }
        }
        let got = generate(&mut scorer, 3, 64, penalty).unwrap();
        assert_eq!(got, best.1, "penalty {penalty}");
    }
    assert!(generate(&mut scorer, 3, 0, 1.0).is_err());
}
