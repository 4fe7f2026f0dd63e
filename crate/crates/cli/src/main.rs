//! `stlab`: corpus synthesis, perturbation, training, evaluation,
//! diagnostics and gradient checks from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use stlab_core::audio::{apply_perturbation, read_wav, write_wav, PerturbationSpec, SnrLevel};
use stlab_core::corpus::{
    generate_corpus, load_examples, read_corpus_info, synthesize_corpus, Batch, CorpusConfig, Mode, CORPUS_INFO,
    TRAIN_MANIFEST,
};
use stlab_core::diagnostics::{robustness_report, ProbeConfig, SpecDistribution};
use stlab_core::model::{load_checkpoint, Model, ModelConfig};
use stlab_core::training::{evaluate, TrainConfig, Trainer, FINAL_CHECKPOINT, METRICS_LOG};

#[derive(Parser)]
#[command(name = "stlab", version, about = "Toy speech translation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (WAVs, manifests, corpus.json).
    Synth(SynthArgs),
    /// Apply one perturbation to a WAV file.
    Perturb(PerturbArgs),
    /// Train a model on a generated corpus.
    Train(TrainArgs),
    /// Decode a manifest with a checkpoint and score it.
    Eval(EvalArgs),
    /// Robustness report: G values, attention entropy, per-bin gaps.
    Diagnose(DiagnoseArgs),
    /// Finite-difference check of the full training objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    utts: Option<usize>,
    /// Held-out utterances written to eval.jsonl.
    #[arg(long = "eval")]
    n_eval: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Target SNR in dB (5, 10, 20, 50) or "inf".
    #[arg(long, default_value = "inf")]
    snr: String,
    /// Pitch shift in semitones.
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pitch: i32,
    /// Time-stretch rate; output length is round(len / stretch).
    #[arg(long, default_value_t = 1.0)]
    stretch: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Ablation switches shared by `train` and `gradcheck`.
#[derive(Args, Clone, Copy, Default)]
struct ToggleFlags {
    #[arg(long)]
    no_consis: bool,
    #[arg(long)]
    no_spk: bool,
    #[arg(long)]
    no_snr: bool,
    #[arg(long)]
    no_mi: bool,
    #[arg(long)]
    no_jsd: bool,
    /// Remove CA-Enc and the projection (also drops spk, snr and mi).
    #[arg(long)]
    no_opp: bool,
}

impl ToggleFlags {
    fn apply(&self, cfg: &mut ModelConfig) {
        let t = &mut cfg.toggles;
        t.consis &= !self.no_consis;
        t.spk &= !self.no_spk;
        t.snr &= !self.no_snr;
        t.mi &= !self.no_mi;
        t.jsd &= !self.no_jsd;
        t.opp &= !self.no_opp;
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `synth`.
    #[arg(long)]
    corpus: PathBuf,
    /// Training manifest; defaults to `<corpus>/train.jsonl`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON with optional `model`, `train` and `steps` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint; its model config wins.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train until this global step.
    #[arg(long)]
    steps: Option<u64>,
    /// transcript_free or multi_task.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[command(flatten)]
    toggles: ToggleFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Receives report.json and bins.csv.
    #[arg(long)]
    out: PathBuf,
    /// policy, identity, or fixed (with --snr/--pitch/--stretch).
    #[arg(long, default_value = "policy")]
    probe: String,
    #[arg(long, default_value = "inf")]
    snr: String,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pitch: i32,
    #[arg(long, default_value_t = 1.0)]
    stretch: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    #[arg(long, default_value_t = 5)]
    bins: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model config JSON; defaults to the tiny check configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    utts: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[command(flatten)]
    toggles: ToggleFlags,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRun {
    model: ModelConfig,
    train: TrainConfig,
    steps: u64,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            steps: 2000,
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_config<T: Serialize>(command: &str, cfg: &T) -> Result<()> {
    println!("{command} config {}", serde_json::to_string(cfg)?);
    Ok(())
}

fn parse_snr(s: &str) -> Result<SnrLevel> {
    let db = match s.to_ascii_lowercase().as_str() {
        "inf" | "infinite" | "clean" => f64::INFINITY,
        other => other.parse().with_context(|| format!("bad SNR {s:?}"))?,
    };
    Ok(SnrLevel::from_db(db)?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: CorpusConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => CorpusConfig::default(),
    };
    if let Some(v) = a.utts {
        cfg.n_utts = v;
    }
    if let Some(v) = a.n_eval {
        cfg.n_eval = v;
    }
    if let Some(v) = a.speakers {
        cfg.n_speakers = v;
    }
    if let Some(v) = a.vocab {
        cfg.vocab_size = v;
    }
    if let Some(v) = a.min_len {
        cfg.min_len = v;
    }
    if let Some(v) = a.max_len {
        cfg.max_len = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    print_config("synth", &cfg)?;
    let out = generate_corpus(&cfg, &a.out)?;
    println!("wrote {}", out.train_manifest.display());
    if let Some(p) = out.eval_manifest {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn perturb(a: PerturbArgs) -> Result<()> {
    let spec = PerturbationSpec::new(parse_snr(&a.snr)?, a.pitch, a.stretch)?;
    print_config("perturb", &serde_json::json!({ "input": a.input, "out": a.out, "spec": spec, "seed": a.seed }))?;
    let w = read_wav(&a.input)?;
    let p = apply_perturbation(&w, &spec, a.seed)?;
    write_wav(&a.out, &p)?;
    println!("{} samples -> {} samples", w.len(), p.len());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut run: TrainRun = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainRun::default(),
    };
    if let Some(v) = a.steps {
        run.steps = v;
    }
    let t = &mut run.train;
    if let Some(v) = a.seed {
        t.seed = v;
        run.model.seed = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.base_lr = v;
    }
    if let Some(v) = a.warmup {
        t.warmup = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    let manifest = a.manifest.clone().unwrap_or_else(|| a.corpus.join(TRAIN_MANIFEST));
    let examples = load_examples(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let mut trainer = match &a.resume {
        Some(ck) => {
            let flags_given = a.mode.is_some() || a.dropout.is_some() || a.config.is_some();
            if flags_given {
                log::warn!("model settings come from the checkpoint when resuming");
            }
            let tr = Trainer::resume(ck, run.train.clone(), examples)?;
            run.model = tr.model.cfg.clone();
            tr
        }
        None => {
            if let Some(v) = a.mode {
                run.model.mode = v;
            }
            if let Some(v) = a.dropout {
                run.model.dropout = v;
            }
            a.toggles.apply(&mut run.model);
            let info = read_corpus_info(&a.corpus).with_context(|| format!("reading {}", a.corpus.join(CORPUS_INFO).display()))?;
            let vocab = info.vocab().len();
            run.model.src_vocab = vocab;
            run.model.tgt_vocab = vocab;
            run.model.n_speakers = info.config.n_speakers;
            Trainer::new(Model::new(run.model.clone())?, run.train.clone(), examples)?
        }
    };
    print_config("train", &run)?;
    log::info!("{} parameters", trainer.model.param_count());
    let logs = trainer.run(run.steps, Some(&a.out))?;
    if let Some(last) = logs.last() {
        println!("step {} total {:.4} st {:.4}", last.step, last.losses.total, last.losses.st);
    }
    println!("wrote {}", a.out.join(FINAL_CHECKPOINT).display());
    println!("wrote {}", a.out.join(METRICS_LOG).display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    print_config(
        "eval",
        &serde_json::json!({ "checkpoint": a.checkpoint, "manifest": a.manifest, "beam": a.beam, "max_len": a.max_len }),
    )?;
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let examples = load_examples(&a.manifest)?;
    let m = evaluate(&model, &examples, a.beam, a.max_len)?;
    let json = serde_json::json!({
        "n_utts": m.n_utts,
        "token_accuracy": m.token_accuracy,
        "corpus_bleu": m.corpus_bleu,
    });
    println!("{json}");
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&m)?)?;
    }
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let distribution = match a.probe.as_str() {
        "policy" => SpecDistribution::Policy,
        "identity" => SpecDistribution::Identity,
        "fixed" => SpecDistribution::Fixed(PerturbationSpec::new(parse_snr(&a.snr)?, a.pitch, a.stretch)?),
        other => bail!("unknown probe {other:?}; expected policy, identity or fixed"),
    };
    let probe = ProbeConfig {
        distribution,
        seed: a.seed,
        beam: a.beam,
        max_len: a.max_len,
        bins: a.bins,
    };
    print_config(
        "diagnose",
        &serde_json::json!({ "checkpoint": a.checkpoint, "manifest": a.manifest, "out": a.out, "probe": probe }),
    )?;
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let examples = load_examples(&a.manifest)?;
    let report = robustness_report(&model, &examples, &probe)?;
    report.write(&a.out)?;
    println!(
        "mean G {:.4} mean gap {:.4} raw BLEU {:.2} perturbed BLEU {:.2}",
        report.mean_g, report.mean_gap, report.raw_bleu, report.pert_bleu
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut cfg: ModelConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ModelConfig::tiny(),
    };
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    a.toggles.apply(&mut cfg);
    cfg.seed = a.seed;
    print_config(
        "gradcheck",
        &serde_json::json!({ "model": cfg, "utts": a.utts, "step": a.step, "tol": a.tol, "seed": a.seed }),
    )?;
    let corpus = synthesize_corpus(&CorpusConfig {
        n_utts: a.utts,
        n_eval: 0,
        n_speakers: cfg.n_speakers,
        vocab_size: cfg.tgt_vocab,
        min_len: 3,
        max_len: 4,
        seed: a.seed,
    })?;
    let mut batch = Batch::new(corpus.train)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed);
    for p in &mut batch.perturbations {
        *p = stlab_core::audio::sample_perturbation_spec(&mut rng);
    }
    let mut model = Model::new(cfg)?;
    let report = model.gradient_check(&batch, a.seed, a.step, None)?;
    println!(
        "{}",
        serde_json::json!({ "checked": report.checked, "max_rel_error": report.max_rel_error, "worst": report.worst })
    );
    if !(report.max_rel_error < a.tol) {
        bail!("max relative error {:.3e} exceeds {:.1e}", report.max_rel_error, a.tol);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Perturb(a) => perturb(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
