//! Network wiring: clean speech, perturbed speech and text paths over shared
//! T-Enc and decoder weights.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainState, CHECKPOINT_MAGIC};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{apply_perturbation, Waveform};
use crate::corpus::{Batch, Mode, BOS, EOS};
use crate::encoders::{generate, AttentionTrace, DecoderStack, EncoderStack, TextEmbedding};
use crate::error::{invalid, Error, Result};
use crate::frontend::{Frontend, FrontendConfig};
use crate::layers::{sinusoidal_positions, Ctx};
use crate::miest::ApproxNet;
use crate::objectives::{
    loss_consis, loss_jsd, loss_mt, loss_snr, loss_spk, loss_st, total_loss, LossReport, LossTerms, Toggles,
    Weights,
};
use crate::purification::{project_onto, purify, ClassifierHead, RepBundle};
use crate::substrate::{
    derive_seed, finite_diff_check, GradCheckReport, Gradients, Graph, ParamId, ParamStore, Tensor, Var,
};

const N_SNR_CLASSES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Content-agnostic encoder layers.
    pub n_alpha: usize,
    /// Complex (content-bearing) encoder layers.
    pub n_beta: usize,
    pub n_tenc: usize,
    pub n_dec: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub n_speakers: usize,
    pub lambda_consis: f64,
    pub lambda_mi: f64,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub toggles: Toggles,
    pub mode: Mode,
    pub seed: u64,
    pub frontend: FrontendConfig,
    pub classifier_hidden: usize,
    pub approx_hidden: usize,
    pub approx_lr: f64,
    pub approx_steps: usize,
    pub length_penalty: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            n_alpha: 1,
            n_beta: 1,
            n_tenc: 5,
            n_dec: 6,
            src_vocab: 16,
            tgt_vocab: 16,
            n_speakers: 4,
            lambda_consis: 1.0,
            lambda_mi: 0.01,
            dropout: 0.1,
            label_smoothing: 0.1,
            toggles: Toggles::default(),
            mode: Mode::TranscriptFree,
            seed: 0,
            frontend: FrontendConfig::default(),
            classifier_hidden: 1024,
            approx_hidden: 64,
            approx_lr: 1e-4,
            approx_steps: 10,
            length_penalty: 1.0,
        }
    }
}

impl ModelConfig {
    /// A few thousand parameters; small enough for exhaustive
    /// finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            ffn_dim: 12,
            n_tenc: 1,
            n_dec: 1,
            classifier_hidden: 6,
            approx_hidden: 6,
            dropout: 0.0,
            frontend: FrontendConfig {
                channels: vec![3, 4, 4],
                strides: vec![5, 4, 4, 4],
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_alpha == 0 || self.n_beta == 0 || self.n_tenc == 0 || self.n_dec == 0 {
            return invalid("every encoder and the decoder need at least one layer");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.src_vocab <= EOS + 1 || self.tgt_vocab <= EOS + 1 {
            return invalid("vocabularies must contain content symbols");
        }
        if self.n_speakers < 2 {
            return invalid("need at least two speakers");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return invalid("dropout and label smoothing must lie in [0, 1)");
        }
        if self.lambda_consis < 0.0 || self.lambda_mi < 0.0 {
            return invalid("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn weights(&self) -> Weights {
        Weights {
            consis: self.lambda_consis,
            mi: self.lambda_mi,
        }
    }

    /// Toggles actually in effect for a batch of `n` utterances.
    pub fn effective_toggles(&self, n: usize) -> Toggles {
        let mut t = self.toggles.resolved();
        if self.lambda_mi == 0.0 || n < 2 {
            t.mi = false;
        }
        if self.mode == Mode::TranscriptFree {
            t.jsd = false;
        }
        t
    }
}

/// Parameter handles of every sub-network. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub frontend: Frontend,
    pub ci_enc: EncoderStack,
    /// Absent when the projection branch is ablated.
    pub ca_enc: Option<EncoderStack>,
    pub spk_head: Option<ClassifierHead>,
    pub snr_head: Option<ClassifierHead>,
    pub tenc: EncoderStack,
    pub src_embed: TextEmbedding,
    pub decoder: DecoderStack,
    pub d_model: usize,
}

/// Graph nodes of one speech forward pass.
#[derive(Clone, Debug)]
pub struct SpeechPass {
    pub bundle: RepBundle,
    /// Every T-Enc layer output; the last is the decoder memory.
    pub tenc_layers: Vec<Var>,
    pub logits: Option<Var>,
    pub trace: Option<AttentionTrace>,
}

impl SpeechPass {
    pub fn memory(&self) -> Var {
        *self.tenc_layers.last().expect("T-Enc has layers")
    }
}

/// Graph nodes of one text forward pass.
#[derive(Clone, Debug)]
pub struct TextPass {
    /// T-Enc input (scaled embeddings plus positions).
    pub input: Var,
    pub mask: Vec<bool>,
    pub memory: Var,
    pub logits: Option<Var>,
}

/// Combines CI-Enc and (optional) CA-Enc outputs into a bundle.
pub fn purify_bundle(g: &mut Graph, h_beta: Var, h_alpha: Option<Var>, mask: Vec<bool>) -> Result<RepBundle> {
    match h_alpha {
        Some(a) => {
            let star = project_onto(g, h_beta, a)?;
            let gamma = purify(g, h_beta, star)?;
            Ok(RepBundle {
                h_alpha: Some(a),
                h_beta,
                h_beta_star: Some(star),
                h_gamma: gamma,
                mask,
            })
        }
        None => Ok(RepBundle {
            h_alpha: None,
            h_beta,
            h_beta_star: None,
            h_gamma: h_beta,
            mask,
        }),
    }
}

fn with_bos(tgt: &[usize]) -> Vec<usize> {
    std::iter::once(BOS).chain(tgt.iter().copied()).collect()
}

fn with_eos(tgt: &[usize]) -> Vec<usize> {
    tgt.iter().copied().chain(std::iter::once(EOS)).collect()
}

impl Network {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let frontend = Frontend::new(store, &cfg.frontend, d, &mut rng)?;
        let ci_enc = EncoderStack::new(store, "ci_enc", cfg.n_beta, d, cfg.n_heads, cfg.ffn_dim, false, &mut rng)?;
        let (ca_enc, spk_head, snr_head) = if cfg.toggles.opp {
            (
                Some(EncoderStack::new(store, "ca_enc", cfg.n_alpha, d, cfg.n_heads, cfg.ffn_dim, false, &mut rng)?),
                Some(ClassifierHead::new(store, "spk_head", d, cfg.classifier_hidden, cfg.n_speakers, &mut rng)?),
                Some(ClassifierHead::new(store, "snr_head", d, cfg.classifier_hidden, N_SNR_CLASSES, &mut rng)?),
            )
        } else {
            (None, None, None)
        };
        let tenc = EncoderStack::new(store, "t_enc", cfg.n_tenc, d, cfg.n_heads, cfg.ffn_dim, true, &mut rng)?;
        let src_embed = TextEmbedding::new(store, "src_embed", cfg.src_vocab, d, &mut rng)?;
        let decoder = DecoderStack::new(store, "decoder", cfg.n_dec, d, cfg.n_heads, cfg.ffn_dim, cfg.tgt_vocab, &mut rng)?;
        Ok(Self {
            frontend,
            ci_enc,
            ca_enc,
            spk_head,
            snr_head,
            tenc,
            src_embed,
            decoder,
            d_model: d,
        })
    }

    /// Waveform to purified representations.
    pub fn represent(&self, g: &mut Graph, ctx: &Ctx, w: &Waveform) -> Result<RepBundle> {
        let x = self.frontend.extract_features(g, ctx, w)?;
        let t0 = g.shape(x)[0];
        let ds = self.frontend.downsample(g, ctx, x, &vec![true; t0])?;
        let t = g.shape(ds.values)[0];
        let pos = g.constant(sinusoidal_positions(t, self.d_model));
        let h = g.add(ds.values, pos)?;
        let h = ctx.dropout(g, h)?;
        let h_beta = self.ci_enc.encode(g, ctx, h, &ds.mask)?;
        let h_alpha = match &self.ca_enc {
            Some(enc) => Some(enc.encode(g, ctx, h, &ds.mask)?),
            None => None,
        };
        purify_bundle(g, h_beta, h_alpha, ds.mask)
    }

    /// Decoder over `memory`; teacher-forced on `tgt` (without BOS/EOS).
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        ctx: &Ctx,
        memory: Var,
        mask: &[bool],
        tgt: &[usize],
    ) -> Result<(Var, AttentionTrace)> {
        self.decoder.decode(g, ctx, &with_bos(tgt), memory, mask)
    }

    pub fn forward_speech(&self, g: &mut Graph, ctx: &Ctx, w: &Waveform, tgt: Option<&[usize]>) -> Result<SpeechPass> {
        let bundle = self.represent(g, ctx, w)?;
        let tenc_layers = self.tenc.encode_layers(g, ctx, bundle.h_gamma, &bundle.mask)?;
        let memory = *tenc_layers.last().unwrap();
        let (logits, trace) = match tgt {
            Some(t) => {
                let (l, tr) = self.teacher_forced(g, ctx, memory, &bundle.mask, t)?;
                (Some(l), Some(tr))
            }
            None => (None, None),
        };
        Ok(SpeechPass {
            bundle,
            tenc_layers,
            logits,
            trace,
        })
    }

    pub fn forward_text(&self, g: &mut Graph, ctx: &Ctx, src: &[usize], tgt: Option<&[usize]>) -> Result<TextPass> {
        let (input, mask) = self.src_embed.embed(g, ctx, src)?;
        let x = ctx.dropout(g, input)?;
        let memory = self.tenc.encode(g, ctx, x, &mask)?;
        let logits = match tgt {
            Some(t) => Some(self.teacher_forced(g, ctx, memory, &mask, t)?.0),
            None => None,
        };
        Ok(TextPass {
            input,
            mask,
            memory,
            logits,
        })
    }

    /// Every term except MI. Returns the clean-branch bundles for the MI
    /// estimator.
    #[allow(clippy::too_many_arguments)]
    pub fn build_terms(
        &self,
        g: &mut Graph,
        ctx_clean: &Ctx,
        ctx_pert: &Ctx,
        cfg: &ModelConfig,
        toggles: Toggles,
        batch: &Batch,
        perturbed: Option<&[Waveform]>,
    ) -> Result<(LossTerms, Vec<RepBundle>)> {
        if cfg.mode == Mode::MultiTask && !batch.has_src() {
            return invalid("multi-task training needs a transcript for every utterance");
        }
        let mut terms = LossTerms::default();
        let targets: Vec<Vec<usize>> = batch.examples.iter().map(|e| with_eos(&e.tgt)).collect();
        let mut st_logits = Vec::with_capacity(batch.len());
        let mut clean = Vec::with_capacity(batch.len());
        for ex in &batch.examples {
            let pass = self.forward_speech(g, ctx_clean, &ex.waveform, Some(&ex.tgt))?;
            st_logits.push(pass.logits.unwrap());
            clean.push(pass.bundle);
        }
        terms.st = Some(loss_st(g, &st_logits, &targets, cfg.label_smoothing)?);

        if cfg.mode == Mode::MultiTask {
            let mut mt_logits = Vec::with_capacity(batch.len());
            for ex in &batch.examples {
                let src = ex.src.as_deref().unwrap();
                mt_logits.push(self.forward_text(g, ctx_clean, src, Some(&ex.tgt))?.logits.unwrap());
            }
            terms.mt = Some(loss_mt(g, &mt_logits, &targets, cfg.label_smoothing)?);
            if toggles.jsd {
                let lp_st = st_logits.iter().map(|&l| g.log_softmax(l)).collect::<Result<Vec<_>>>()?;
                let lp_mt = mt_logits.iter().map(|&l| g.log_softmax(l)).collect::<Result<Vec<_>>>()?;
                terms.jsd = Some(loss_jsd(g, &lp_st, &lp_mt)?);
            }
        }

        if toggles.spk || toggles.snr || toggles.consis {
            let Some(perturbed) = perturbed else {
                return invalid("enabled terms need the perturbed branch");
            };
            if perturbed.len() != batch.len() {
                return invalid("one perturbed waveform per utterance is required");
            }
            let pert = perturbed
                .iter()
                .map(|w| self.represent(g, ctx_pert, w))
                .collect::<Result<Vec<_>>>()?;
            let heads = |g: &mut Graph, head: &Option<ClassifierHead>, ctx: &Ctx, bundles: &[RepBundle]| {
                let head = head.as_ref().ok_or_else(|| Error::InvalidArgument("classifier head missing".into()))?;
                bundles
                    .iter()
                    .map(|b| {
                        let a = b.h_alpha.ok_or_else(|| Error::InvalidArgument("h_alpha missing".into()))?;
                        head.log_probs(g, ctx, a, &b.mask)
                    })
                    .collect::<Result<Vec<_>>>()
            };
            if toggles.spk {
                let c = heads(g, &self.spk_head, ctx_clean, &clean)?;
                let p = heads(g, &self.spk_head, ctx_pert, &pert)?;
                let ids: Vec<usize> = batch.examples.iter().map(|e| e.speaker).collect();
                terms.spk = Some(loss_spk(g, &c, &p, &ids)?);
            }
            if toggles.snr {
                let c = heads(g, &self.snr_head, ctx_clean, &clean)?;
                let p = heads(g, &self.snr_head, ctx_pert, &pert)?;
                let levels: Vec<_> = batch.perturbations.iter().map(|s| s.snr).collect();
                terms.snr = Some(loss_snr(g, &c, &p, &levels)?);
            }
            if toggles.consis {
                let c: Vec<(Var, &[bool])> = clean.iter().map(|b| (b.h_gamma, b.mask.as_slice())).collect();
                let p: Vec<(Var, &[bool])> = pert.iter().map(|b| (b.h_gamma, b.mask.as_slice())).collect();
                terms.consis = Some(loss_consis(g, &c, &p)?);
            }
        }
        Ok((terms, clean))
    }
}

fn mi_samples(bundles: &[RepBundle]) -> Result<Vec<(Var, Var)>> {
    bundles
        .iter()
        .map(|b| {
            b.h_beta_star
                .map(|s| (b.h_gamma, s))
                .ok_or_else(|| Error::InvalidArgument("MI needs the projection branch".into()))
        })
        .collect()
}

/// Outputs of [`Model::training_step`].
#[derive(Debug)]
pub struct StepOutput {
    pub report: LossReport,
    pub grads: Gradients,
    /// Positive log-likelihood of the approximation network before its last
    /// inner update, when MI was active.
    pub q_likelihood: Option<f64>,
}

/// Plain-tensor representations of one utterance.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub h_alpha: Option<Tensor>,
    pub h_beta: Tensor,
    pub h_beta_star: Option<Tensor>,
    pub h_gamma: Tensor,
    pub mask: Vec<bool>,
    pub tenc_layers: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub net: Network,
    pub store: ParamStore,
    /// Present whenever the projection branch is.
    pub approx: Option<ApproxNet>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::new(&mut store, &cfg)?;
        let approx = if cfg.toggles.opp {
            Some(ApproxNet::new(
                cfg.d_model,
                cfg.approx_hidden,
                cfg.approx_lr,
                derive_seed(cfg.seed, &[0xa9]),
            )?)
        } else {
            None
        };
        Ok(Self { cfg, net, store, approx })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// One line per parameter tensor followed by the total.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (_, name, t) in self.store.iter() {
            out.push_str(&format!("{name:<40} {:?}\n", t.shape()));
        }
        out.push_str(&format!("total parameters: {}\n", self.param_count()));
        if let Some(a) = &self.approx {
            out.push_str(&format!("approximation network parameters: {}\n", a.store.num_scalars()));
        }
        out
    }

    /// Perturbed copies of the batch audio under its sampled specs.
    pub fn perturb_batch(batch: &Batch, seed: u64) -> Result<Vec<Waveform>> {
        batch
            .examples
            .iter()
            .zip(&batch.perturbations)
            .enumerate()
            .map(|(i, (ex, spec))| apply_perturbation(&ex.waveform, spec, derive_seed(seed, &[i as u64])))
            .collect()
    }

    fn needs_perturbed(t: Toggles) -> bool {
        t.spk || t.snr || t.consis
    }

    /// Forward both branches, fit the approximation network on the detached
    /// clean representations, estimate MI with it frozen, and differentiate
    /// the total loss with respect to the main parameters.
    pub fn training_step(&mut self, batch: &Batch, seed: u64) -> Result<StepOutput> {
        let toggles = self.cfg.effective_toggles(batch.len());
        let perturbed = if Self::needs_perturbed(toggles) {
            Some(Self::perturb_batch(batch, derive_seed(seed, &[0]))?)
        } else {
            None
        };
        let Model { cfg, net, store, approx } = self;
        let ctx_clean = Ctx::train(store, cfg.dropout, derive_seed(seed, &[1]));
        let ctx_pert = Ctx::train(store, cfg.dropout, derive_seed(seed, &[2]));
        let mut g = Graph::new();
        let (mut terms, clean) = net.build_terms(&mut g, &ctx_clean, &ctx_pert, cfg, toggles, batch, perturbed.as_deref())?;
        let mut q_likelihood = None;
        if toggles.mi {
            let approx = approx
                .as_mut()
                .ok_or_else(|| Error::InvalidArgument("MI enabled without an approximation network".into()))?;
            let samples = mi_samples(&clean)?;
            let pairs: Vec<(Tensor, Tensor)> = samples
                .iter()
                .map(|&(x, c)| (g.value(x).clone(), g.value(c).clone()))
                .collect();
            q_likelihood = Some(approx.train_q(&pairs, cfg.approx_steps)?);
            terms.mi = Some(approx.estimate_mi(&mut g, &samples)?);
        }
        let (loss, report) = total_loss(&mut g, &terms, cfg.mode, cfg.weights(), toggles)?;
        let grads = g.backward(loss)?;
        Ok(StepOutput {
            report,
            grads,
            q_likelihood,
        })
    }

    /// Loss of the full objective without dropout or inner updates.
    pub fn evaluate_loss(&self, batch: &Batch, seed: u64) -> Result<LossReport> {
        let toggles = self.cfg.effective_toggles(batch.len());
        let perturbed = if Self::needs_perturbed(toggles) {
            Some(Self::perturb_batch(batch, derive_seed(seed, &[0]))?)
        } else {
            None
        };
        let mut g = Graph::no_grad();
        let ctx = Ctx::eval(&self.store);
        Ok(objective(&self.net, &mut g, &ctx, &self.cfg, self.approx.as_ref(), toggles, batch, perturbed.as_deref())?.1)
    }

    /// Finite-difference check of the full objective on `batch`, with the
    /// approximation network held fixed.
    pub fn gradient_check(&mut self, batch: &Batch, seed: u64, step: f64, ids: Option<&[ParamId]>) -> Result<GradCheckReport> {
        let toggles = self.cfg.effective_toggles(batch.len());
        let perturbed = if Self::needs_perturbed(toggles) {
            Some(Self::perturb_batch(batch, derive_seed(seed, &[0]))?)
        } else {
            None
        };
        let Model { cfg, net, store, approx } = self;
        let approx = approx.as_ref();
        finite_diff_check(store, ids, step, |g, s| {
            let ctx = Ctx::eval(s);
            Ok(objective(net, g, &ctx, cfg, approx, toggles, batch, perturbed.as_deref())?.0)
        })
    }

    /// Representations and T-Enc layer outputs of one clean utterance.
    pub fn encode(&self, w: &Waveform) -> Result<Encoded> {
        let mut g = Graph::no_grad();
        let pass = self.net.forward_speech(&mut g, &Ctx::eval(&self.store), w, None)?;
        let b = &pass.bundle;
        let val = |v: Var| g.value(v).clone();
        Ok(Encoded {
            h_alpha: b.h_alpha.map(val),
            h_beta: val(b.h_beta),
            h_beta_star: b.h_beta_star.map(val),
            h_gamma: val(b.h_gamma),
            mask: b.mask.clone(),
            tenc_layers: pass.tenc_layers.iter().map(|&v| val(v)).collect(),
        })
    }

    /// T-Enc input for a transcript, with its mask.
    pub fn text_input(&self, src: &[usize]) -> Result<(Tensor, Vec<bool>)> {
        if self.cfg.mode != Mode::MultiTask {
            return invalid("the text path exists only in multi-task mode");
        }
        let mut g = Graph::no_grad();
        let pass = self.net.forward_text(&mut g, &Ctx::eval(&self.store), src, None)?;
        Ok((g.value(pass.input).clone(), pass.mask))
    }

    /// Cross-attention weights of the teacher-forced decoder.
    pub fn attention_trace(&self, w: &Waveform, tgt: &[usize]) -> Result<(AttentionTrace, Vec<bool>)> {
        let mut g = Graph::no_grad();
        let pass = self.net.forward_speech(&mut g, &Ctx::eval(&self.store), w, Some(tgt))?;
        Ok((pass.trace.unwrap(), pass.bundle.mask))
    }

    /// Decodes a clean waveform. The result never contains PAD or BOS; it
    /// ends with EOS when the search produced one.
    pub fn translate(&self, w: &Waveform, beam: usize, max_len: usize) -> Result<Vec<usize>> {
        let ctx = Ctx::eval(&self.store);
        let mut g = Graph::no_grad();
        let pass = self.net.forward_speech(&mut g, &ctx, w, None)?;
        let memory = g.value(pass.memory()).clone();
        let mask = pass.bundle.mask;
        let mut scorer = |prefix: &[usize]| -> Result<Vec<f64>> {
            let mut g = Graph::no_grad();
            let m = g.constant(memory.clone());
            let (logits, _) = self.net.decoder.decode(&mut g, &ctx, prefix, m, &mask)?;
            let last = g.slice_rows(logits, prefix.len() - 1, 1)?;
            let lp = g.log_softmax(last)?;
            Ok(g.value(lp).data().to_vec())
        };
        generate(&mut scorer, max_len, beam, self.cfg.length_penalty)
    }

    /// Decodes from a source transcript through the text path.
    pub fn translate_text(&self, src: &[usize], beam: usize, max_len: usize) -> Result<Vec<usize>> {
        self.text_input(src)?;
        let ctx = Ctx::eval(&self.store);
        let mut g = Graph::no_grad();
        let pass = self.net.forward_text(&mut g, &ctx, src, None)?;
        let memory = g.value(pass.memory).clone();
        let mask = pass.mask;
        let mut scorer = |prefix: &[usize]| -> Result<Vec<f64>> {
            let mut g = Graph::no_grad();
            let m = g.constant(memory.clone());
            let (logits, _) = self.net.decoder.decode(&mut g, &ctx, prefix, m, &mask)?;
            let last = g.slice_rows(logits, prefix.len() - 1, 1)?;
            let lp = g.log_softmax(last)?;
            Ok(g.value(lp).data().to_vec())
        };
        generate(&mut scorer, max_len, beam, self.cfg.length_penalty)
    }
}

#[allow(clippy::too_many_arguments)]
fn objective(
    net: &Network,
    g: &mut Graph,
    ctx: &Ctx,
    cfg: &ModelConfig,
    approx: Option<&ApproxNet>,
    toggles: Toggles,
    batch: &Batch,
    perturbed: Option<&[Waveform]>,
) -> Result<(Var, LossReport)> {
    let (mut terms, clean) = net.build_terms(g, ctx, ctx, cfg, toggles, batch, perturbed)?;
    if toggles.mi {
        let approx = approx.ok_or_else(|| Error::InvalidArgument("MI enabled without an approximation network".into()))?;
        terms.mi = Some(approx.estimate_mi(g, &mi_samples(&clean)?)?);
    }
    total_loss(g, &terms, cfg.mode, cfg.weights(), toggles)
}
