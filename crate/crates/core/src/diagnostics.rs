//! Perturbation-sensitivity instruments: G value (pooled T-Enc distance),
//! its layerwise profile, cross-attention entropy, modality cosine, G
//! binning and the raw-versus-perturbed robustness report.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{apply_perturbation, sample_perturbation_spec, PerturbationSpec, Waveform};
use crate::corpus::Example;
use crate::encoders::AttentionTrace;
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::substrate::{derive_seed, masked_mean_pool, Tensor};
use crate::training::{corpus_bleu, strip_eos, token_accuracy};

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Distance between masked temporal means of two `[T, d]` sequences.
pub fn pooled_distance(a: &Tensor, mask_a: &[bool], b: &Tensor, mask_b: &[bool]) -> Result<f64> {
    Ok(l2(&masked_mean_pool(a, mask_a)?, &masked_mean_pool(b, mask_b)?))
}

/// G value for every T-Enc layer; the last entry uses the final output.
pub fn layerwise_g(model: &Model, w: &Waveform, w_pert: &Waveform) -> Result<Vec<f64>> {
    let a = model.encode(w)?;
    let b = model.encode(w_pert)?;
    a.tenc_layers
        .iter()
        .zip(&b.tenc_layers)
        .map(|(x, y)| pooled_distance(x, &a.mask, y, &b.mask))
        .collect()
}

/// Sentence-level L2 distance between pooled final T-Enc outputs.
pub fn g_value(model: &Model, w: &Waveform, w_pert: &Waveform) -> Result<f64> {
    Ok(*layerwise_g(model, w, w_pert)?.last().expect("T-Enc has layers"))
}

/// Mean entropy (natural log) of attention rows restricted to unmasked keys.
pub fn row_entropy_mean(weights: &Tensor, key_mask: &[bool]) -> f64 {
    let mut total = 0.0;
    for r in 0..weights.rows() {
        total -= weights
            .row_slice(r)
            .iter()
            .zip(key_mask)
            .filter(|(p, m)| **m && **p > 0.0)
            .map(|(p, _)| p * p.ln())
            .sum::<f64>();
    }
    total / weights.rows().max(1) as f64
}

/// Per decoder layer, the entropy of cross-attention rows averaged over heads
/// and queries.
pub fn attention_entropy(trace: &AttentionTrace, key_mask: &[bool]) -> Result<Vec<f64>> {
    trace
        .layers
        .iter()
        .map(|heads| {
            if heads.is_empty() {
                return invalid("attention layer without heads");
            }
            for h in heads {
                if h.cols() != key_mask.len() {
                    return invalid(format!("{} keys with a mask of {}", h.cols(), key_mask.len()));
                }
            }
            Ok(heads.iter().map(|h| row_entropy_mean(h, key_mask)).sum::<f64>() / heads.len() as f64)
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine between the pooled speech-side T-Enc input (`h_gamma`) and
/// the pooled text-side input of each utterance.
pub fn modality_cosine(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return invalid("no utterances");
    }
    let mut sum = 0.0;
    for e in examples {
        let Some(src) = &e.src else {
            return invalid(format!("utterance {} has no transcript", e.id));
        };
        let enc = model.encode(&e.waveform)?;
        let (text, mask) = model.text_input(src)?;
        sum += cosine(&masked_mean_pool(&enc.h_gamma, &enc.mask)?, &masked_mean_pool(&text, &mask)?);
    }
    Ok(sum / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GBin {
    /// Indices into the input slices, ascending by G.
    pub members: Vec<usize>,
    pub mean_g: f64,
    pub mean_metric: f64,
}

/// Sorts utterances by G and splits them into `k` bins whose sizes differ by
/// at most one, the larger bins first.
pub fn bin_by_g(g: &[f64], metric: &[f64], k: usize) -> Result<Vec<GBin>> {
    if g.len() != metric.len() {
        return invalid("one metric value per G value is required");
    }
    if k == 0 || g.len() < k {
        return invalid(format!("{} utterances cannot fill {k} bins", g.len()));
    }
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g[a].total_cmp(&g[b]).then(a.cmp(&b)));
    let (base, rem) = (g.len() / k, g.len() % k);
    let mut bins = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < rem);
        let members = order[start..start + size].to_vec();
        start += size;
        let mean = |v: &[f64]| members.iter().map(|&j| v[j]).sum::<f64>() / size as f64;
        bins.push(GBin {
            mean_g: mean(g),
            mean_metric: mean(metric),
            members,
        });
    }
    Ok(bins)
}

/// How probe perturbations are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecDistribution {
    Identity,
    /// The training-time policy: every factor uniform over its set.
    Policy,
    Fixed(PerturbationSpec),
}

impl SpecDistribution {
    fn sample(&self, rng: &mut ChaCha8Rng) -> PerturbationSpec {
        match self {
            Self::Identity => PerturbationSpec::IDENTITY,
            Self::Policy => sample_perturbation_spec(rng),
            Self::Fixed(s) => *s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttDiagnostics {
    pub id: String,
    pub spec: PerturbationSpec,
    pub g: f64,
    pub raw_accuracy: f64,
    pub pert_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: usize,
    pub size: usize,
    pub mean_g: f64,
    pub raw_accuracy: f64,
    pub pert_accuracy: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub utterances: Vec<UttDiagnostics>,
    pub layer_g: Vec<f64>,
    pub layer_entropy: Vec<f64>,
    /// Present for multi-task models with transcripts.
    pub modality_cosine: Option<f64>,
    pub bins: Vec<BinRow>,
    pub mean_g: f64,
    /// Mean over utterances of raw minus perturbed token accuracy.
    pub mean_gap: f64,
    pub raw_bleu: f64,
    pub pert_bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub distribution: SpecDistribution,
    pub seed: u64,
    pub beam: usize,
    pub max_len: usize,
    pub bins: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            distribution: SpecDistribution::Policy,
            seed: 0,
            beam: 1,
            max_len: 12,
            bins: 5,
        }
    }
}

/// Decodes raw and perturbed audio of every example and collects G values,
/// per-layer G and entropy, per-bin accuracy and the robustness gap.
pub fn robustness_report(model: &Model, examples: &[Example], probe: &ProbeConfig) -> Result<DiagnosticsReport> {
    if examples.len() < probe.bins {
        return invalid(format!("{} utterances cannot fill {} bins", examples.len(), probe.bins));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let n_layers = model.cfg.n_tenc;
    let mut layer_g = vec![0.0; n_layers];
    let mut layer_entropy = vec![0.0; model.cfg.n_dec];
    let mut utts = Vec::with_capacity(examples.len());
    let (mut raw_hyps, mut pert_hyps, mut refs) = (Vec::new(), Vec::new(), Vec::new());
    for (i, e) in examples.iter().enumerate() {
        let spec = probe.distribution.sample(&mut rng);
        let pert = apply_perturbation(&e.waveform, &spec, derive_seed(probe.seed, &[i as u64]))?;
        let lg = layerwise_g(model, &e.waveform, &pert)?;
        for (acc, v) in layer_g.iter_mut().zip(&lg) {
            *acc += v;
        }
        let (trace, mask) = model.attention_trace(&e.waveform, &e.tgt)?;
        for (acc, v) in layer_entropy.iter_mut().zip(attention_entropy(&trace, &mask)?) {
            *acc += v;
        }
        let raw = strip_eos(model.translate(&e.waveform, probe.beam, probe.max_len)?);
        let per = strip_eos(model.translate(&pert, probe.beam, probe.max_len)?);
        let reference = std::slice::from_ref(&e.tgt);
        utts.push(UttDiagnostics {
            id: e.id.clone(),
            spec,
            g: *lg.last().unwrap(),
            raw_accuracy: token_accuracy(std::slice::from_ref(&raw), reference),
            pert_accuracy: token_accuracy(std::slice::from_ref(&per), reference),
        });
        raw_hyps.push(raw);
        pert_hyps.push(per);
        refs.push(e.tgt.clone());
    }
    let n = examples.len() as f64;
    layer_g.iter_mut().for_each(|v| *v /= n);
    layer_entropy.iter_mut().for_each(|v| *v /= n);

    let g: Vec<f64> = utts.iter().map(|u| u.g).collect();
    let raw: Vec<f64> = utts.iter().map(|u| u.raw_accuracy).collect();
    let pert: Vec<f64> = utts.iter().map(|u| u.pert_accuracy).collect();
    let bins = bin_by_g(&g, &raw, probe.bins)?
        .into_iter()
        .enumerate()
        .map(|(index, bin)| {
            let mean = |v: &[f64]| bin.members.iter().map(|&j| v[j]).sum::<f64>() / bin.members.len() as f64;
            let (r, p) = (mean(&raw), mean(&pert));
            BinRow {
                bin: index,
                size: bin.members.len(),
                mean_g: bin.mean_g,
                raw_accuracy: r,
                pert_accuracy: p,
                gap: r - p,
            }
        })
        .collect();
    let modality = if model.cfg.mode == crate::corpus::Mode::MultiTask && examples.iter().all(|e| e.src.is_some()) {
        Some(modality_cosine(model, examples)?)
    } else {
        None
    };
    Ok(DiagnosticsReport {
        mean_g: g.iter().sum::<f64>() / n,
        mean_gap: raw.iter().zip(&pert).map(|(r, p)| r - p).sum::<f64>() / n,
        raw_bleu: corpus_bleu(&raw_hyps, &refs),
        pert_bleu: corpus_bleu(&pert_hyps, &refs),
        utterances: utts,
        layer_g,
        layer_entropy,
        modality_cosine: modality,
        bins,
    })
}

impl DiagnosticsReport {
    /// One row per G bin.
    pub fn bins_csv(&self) -> String {
        let mut out = String::from("bin,size,mean_g,raw_accuracy,pert_accuracy,gap\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b.bin, b.size, b.mean_g, b.raw_accuracy, b.pert_accuracy, b.gap
            ));
        }
        out
    }

    /// Writes `report.json` and `bins.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join("bins.csv"), self.bins_csv())?;
        Ok(())
    }
}
