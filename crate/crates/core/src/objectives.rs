//! Loss terms and the transcript-free / multi-task composites.

use serde::{Deserialize, Serialize};

use crate::audio::SnrLevel;
use crate::corpus::Mode;
use crate::error::{invalid, Result};
use crate::substrate::{Graph, Var};

/// Which optional terms contribute. `opp = false` removes the
/// content-agnostic encoder and projection, which also disables the speaker,
/// SNR and MI terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub consis: bool,
    pub spk: bool,
    pub snr: bool,
    pub mi: bool,
    pub jsd: bool,
    pub opp: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            consis: true,
            spk: true,
            snr: true,
            mi: true,
            jsd: true,
            opp: true,
        }
    }
}

impl Toggles {
    pub fn none() -> Self {
        Self {
            consis: false,
            spk: false,
            snr: false,
            mi: false,
            jsd: false,
            opp: true,
        }
    }

    /// Applies the dependencies between toggles.
    pub fn resolved(mut self) -> Self {
        if !self.opp {
            self.spk = false;
            self.snr = false;
            self.mi = false;
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub consis: f64,
    pub mi: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self { consis: 1.0, mi: 0.01 }
    }
}

/// Scalar values of every term; inactive terms are 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub st: f64,
    pub mt: f64,
    pub jsd: f64,
    pub spk: f64,
    pub snr: f64,
    pub consis: f64,
    pub mi: f64,
    pub total: f64,
    pub active: Vec<String>,
}

/// Graph nodes of the computed terms.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub st: Option<Var>,
    pub mt: Option<Var>,
    pub jsd: Option<Var>,
    pub spk: Option<Var>,
    pub snr: Option<Var>,
    pub consis: Option<Var>,
    pub mi: Option<Var>,
}

fn sum_of(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    if terms.is_empty() {
        return invalid("empty batch");
    }
    let row = g.concat_cols(&terms)?;
    g.sum(row)
}

/// Label-smoothed NLL summed over each sequence's tokens and over the
/// batch. `logits[i]` is `[T_i, V]`, `targets[i]` has length `T_i`.
pub fn loss_st(g: &mut Graph, logits: &[Var], targets: &[Vec<usize>], smoothing: f64) -> Result<Var> {
    if logits.len() != targets.len() {
        return invalid(format!("{} logit sequences for {} targets", logits.len(), targets.len()));
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (l, t) in logits.iter().zip(targets) {
        let lp = g.log_softmax(*l)?;
        terms.push(g.smoothed_nll(lp, t, smoothing)?);
    }
    sum_of(g, terms)
}

/// Same contract as [`loss_st`] on the text path.
pub fn loss_mt(g: &mut Graph, logits: &[Var], targets: &[Vec<usize>], smoothing: f64) -> Result<Var> {
    loss_st(g, logits, targets, smoothing)
}

/// Token-wise Jensen-Shannon divergence between two sets of teacher-forced
/// log-distributions: mean over tokens, summed over the batch.
pub fn loss_jsd(g: &mut Graph, logp_st: &[Var], logp_mt: &[Var]) -> Result<Var> {
    if logp_st.len() != logp_mt.len() {
        return invalid("JSD needs one text sequence per speech sequence");
    }
    let mut terms = Vec::with_capacity(logp_st.len());
    for (&p, &q) in logp_st.iter().zip(logp_mt) {
        for v in [p, q] {
            let t = g.value(v);
            for r in 0..t.rows() {
                let s: f64 = t.row_slice(r).iter().map(|x| x.exp()).sum();
                if (s - 1.0).abs() > 1e-6 {
                    return invalid(format!("JSD input row {r} sums to {s}"));
                }
            }
        }
        let tokens = g.shape(p)[0];
        let j = g.jsd(p, q)?;
        terms.push(g.scale(j, 1.0 / tokens as f64)?);
    }
    sum_of(g, terms)
}

fn paired_nll(g: &mut Graph, clean: &[Var], pert: &[Var], clean_labels: &[usize], pert_labels: &[usize]) -> Result<Var> {
    let n = clean.len();
    if pert.len() != n || clean_labels.len() != n || pert_labels.len() != n {
        return invalid("classifier losses need both branches and labels for every sample");
    }
    let mut picks = Vec::with_capacity(2 * n);
    for i in 0..n {
        for (lp, y) in [(clean[i], clean_labels[i]), (pert[i], pert_labels[i])] {
            let classes = g.shape(lp)[1];
            if y >= classes {
                return invalid(format!("label {y} outside {classes} classes"));
            }
            picks.push(g.select(lp, &[y])?);
        }
    }
    let s = sum_of(g, picks)?;
    g.scale(s, -0.5)
}

/// `-1/2 · Σ_i [log p_clean_i(spk_i) + log p_pert_i(spk_i)]` over
/// `[1, n_speakers]` log-probabilities.
pub fn loss_spk(g: &mut Graph, clean: &[Var], pert: &[Var], speakers: &[usize]) -> Result<Var> {
    paired_nll(g, clean, pert, speakers, speakers)
}

/// As [`loss_spk`] with the clean branch labeled `Clean` and the perturbed
/// branch labeled by its sampled SNR.
pub fn loss_snr(g: &mut Graph, clean: &[Var], pert: &[Var], pert_levels: &[SnrLevel]) -> Result<Var> {
    let clean_labels = vec![SnrLevel::Clean.index(); pert_levels.len()];
    let pert_labels: Vec<usize> = pert_levels.iter().map(|l| l.index()).collect();
    paired_nll(g, clean, pert, &clean_labels, &pert_labels)
}

/// Sum over the batch of the L2 distance between masked temporal means.
pub fn loss_consis(g: &mut Graph, clean: &[(Var, &[bool])], pert: &[(Var, &[bool])]) -> Result<Var> {
    if clean.len() != pert.len() {
        return invalid("consistency needs a perturbed sample for every clean one");
    }
    let mut terms = Vec::with_capacity(clean.len());
    for (&(a, ma), &(b, mb)) in clean.iter().zip(pert) {
        let pa = g.masked_mean_rows(a, ma)?;
        let pb = g.masked_mean_rows(b, mb)?;
        let d = g.sub(pa, pb)?;
        terms.push(g.norm2(d)?);
    }
    sum_of(g, terms)
}

/// Weighted sum of the active terms. Transcript-free:
/// `st + spk + snr + w_consis·consis + w_mi·mi`; multi-task adds `mt + jsd`.
pub fn total_loss(
    g: &mut Graph,
    terms: &LossTerms,
    mode: Mode,
    weights: Weights,
    toggles: Toggles,
) -> Result<(Var, LossReport)> {
    let toggles = toggles.resolved();
    let Some(st) = terms.st else {
        return invalid("the translation loss is always required");
    };
    let mut report = LossReport::default();
    let mut parts: Vec<(Var, f64)> = vec![(st, 1.0)];
    report.active.push("st".into());
    let mut want = |name: &str, on: bool, v: Option<Var>, w: f64, parts: &mut Vec<(Var, f64)>| -> Result<()> {
        if !on {
            return Ok(());
        }
        match v {
            Some(v) => {
                parts.push((v, w));
                report.active.push(name.into());
                Ok(())
            }
            None => invalid(format!("{name} term is enabled but was not computed")),
        }
    };
    if mode == Mode::MultiTask {
        want("mt", true, terms.mt, 1.0, &mut parts)?;
        want("jsd", toggles.jsd, terms.jsd, 1.0, &mut parts)?;
    }
    want("spk", toggles.spk, terms.spk, 1.0, &mut parts)?;
    want("snr", toggles.snr, terms.snr, 1.0, &mut parts)?;
    want("consis", toggles.consis, terms.consis, weights.consis, &mut parts)?;
    want("mi", toggles.mi && weights.mi != 0.0, terms.mi, weights.mi, &mut parts)?;

    let mut scaled = Vec::with_capacity(parts.len());
    for &(v, w) in &parts {
        scaled.push(if w == 1.0 { v } else { g.scale(v, w)? });
    }
    let row = g.concat_cols(&scaled)?;
    let total = g.sum(row)?;

    let val = |g: &Graph, name: &str, v: Option<Var>| -> f64 {
        if report.active.iter().any(|a| a == name) {
            v.map_or(0.0, |v| g.value(v).item())
        } else {
            0.0
        }
    };
    report.st = g.value(st).item();
    report.mt = val(g, "mt", terms.mt);
    report.jsd = val(g, "jsd", terms.jsd);
    report.spk = val(g, "spk", terms.spk);
    report.snr = val(g, "snr", terms.snr);
    report.consis = val(g, "consis", terms.consis);
    report.mi = val(g, "mi", terms.mi);
    report.total = g.value(total).item();
    Ok((total, report))
}
