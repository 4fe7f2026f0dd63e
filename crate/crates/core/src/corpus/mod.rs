//! Synthetic parallel corpus: vocabulary, manifests, generation, batching.

mod manifest;
mod vocab;

pub use manifest::{read_manifest, write_manifest, Utterance};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{
    read_wav, synth_utterance, write_wav, PerturbationSpec, SpeakerProfile, SynthConfig, Waveform,
};
use crate::error::{invalid, Result};

/// Which supervision a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Speech and translation only.
    TranscriptFree,
    /// Speech, transcript and translation.
    MultiTask,
}

impl std::str::FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transcript_free" => Ok(Mode::TranscriptFree),
            "multi_task" => Ok(Mode::MultiTask),
            other => invalid(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_utts: usize,
    /// Extra held-out utterances written to `eval.jsonl`.
    pub n_eval: usize,
    pub n_speakers: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_utts: 200,
            n_eval: 50,
            n_speakers: 4,
            vocab_size: 16,
            min_len: 3,
            max_len: 8,
            seed: 0,
        }
    }
}

/// Everything needed to regenerate or extend a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub config: CorpusConfig,
    pub synth: SynthConfig,
    pub speakers: Vec<SpeakerProfile>,
    /// Target id of each content id, indexed by `id - first_content_id`.
    pub permutation: Vec<usize>,
}

impl CorpusInfo {
    pub fn vocab(&self) -> Vocab {
        Vocab::toy(self.config.vocab_size).expect("validated at generation")
    }

    /// Reverse then permute.
    pub fn translate(&self, src: &[usize]) -> Vec<usize> {
        let first = self.synth.first_content_id;
        src.iter()
            .rev()
            .map(|t| self.permutation[t - first])
            .collect()
    }
}

/// Paths written by [`generate_corpus`].
#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub info: CorpusInfo,
    pub train_manifest: PathBuf,
    pub eval_manifest: Option<PathBuf>,
}

pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const EVAL_MANIFEST: &str = "eval.jsonl";
pub const CORPUS_INFO: &str = "corpus.json";

/// An in-memory corpus: generation metadata plus train and held-out examples.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub info: CorpusInfo,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

/// Generates the corpus described by `cfg` without touching the disk.
pub fn synthesize_corpus(cfg: &CorpusConfig) -> Result<SynthCorpus> {
    if cfg.n_speakers < 2 {
        return invalid("need at least two speakers");
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return invalid(format!("bad length range {}..={}", cfg.min_len, cfg.max_len));
    }
    let vocab = Vocab::toy(cfg.vocab_size)?;
    let first = vocab.first_content_id();
    let n_content = vocab.len() - first;
    if n_content == 0 {
        return invalid("vocabulary has no content symbols");
    }
    let synth = SynthConfig {
        first_content_id: first,
        vocab_size: vocab.len(),
        ..SynthConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let speakers = SpeakerProfile::generate(cfg.n_speakers, cfg.seed)?;
    let mut permutation: Vec<usize> = (first..vocab.len()).collect();
    permutation.shuffle(&mut rng);
    let info = CorpusInfo {
        config: cfg.clone(),
        synth,
        speakers,
        permutation,
    };
    let make = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Example>> {
        (0..count)
            .map(|i| {
                let len = rng.gen_range(cfg.min_len..=cfg.max_len);
                let src: Vec<usize> = (0..len).map(|_| rng.gen_range(first..vocab.len())).collect();
                let speaker = i % cfg.n_speakers;
                let waveform = synth_utterance(&src, &info.speakers[speaker], &info.synth, rng.gen())?;
                Ok(Example {
                    id: format!("{prefix}{i:05}"),
                    waveform,
                    speaker,
                    tgt: info.translate(&src),
                    src: Some(src),
                })
            })
            .collect()
    };
    let train = make("train_", cfg.n_utts, &mut rng)?;
    let eval = make("eval_", cfg.n_eval, &mut rng)?;
    Ok(SynthCorpus { info, train, eval })
}

/// Writes WAVs, `train.jsonl`, optionally `eval.jsonl`, and `corpus.json`
/// under `out_dir`.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<GeneratedCorpus> {
    let corpus = synthesize_corpus(cfg)?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join("wav"))?;
    let write = |examples: &[Example]| -> Result<Vec<Utterance>> {
        examples
            .iter()
            .map(|e| {
                let wav = PathBuf::from("wav").join(format!("{}.wav", e.id));
                write_wav(out_dir.join(&wav), &e.waveform)?;
                Ok(Utterance {
                    id: e.id.clone(),
                    wav,
                    speaker: e.speaker,
                    src: e.src.clone(),
                    tgt: e.tgt.clone(),
                })
            })
            .collect()
    };
    let train = write(&corpus.train)?;
    let eval = write(&corpus.eval)?;

    let train_manifest = out_dir.join(TRAIN_MANIFEST);
    write_manifest(&train_manifest, &train)?;
    let eval_manifest = if cfg.n_eval > 0 {
        let p = out_dir.join(EVAL_MANIFEST);
        write_manifest(&p, &eval)?;
        Some(p)
    } else {
        None
    };
    fs::write(
        out_dir.join(CORPUS_INFO),
        serde_json::to_string_pretty(&corpus.info)?,
    )?;
    Ok(GeneratedCorpus {
        info: corpus.info,
        train_manifest,
        eval_manifest,
    })
}

pub fn read_corpus_info(dir: impl AsRef<Path>) -> Result<CorpusInfo> {
    Ok(serde_json::from_str(&fs::read_to_string(
        dir.as_ref().join(CORPUS_INFO),
    )?)?)
}

/// An utterance with its audio loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub waveform: Waveform,
    pub speaker: usize,
    pub src: Option<Vec<usize>>,
    pub tgt: Vec<usize>,
}

/// Reads a manifest and the WAVs it references (relative to the manifest).
pub fn load_examples(manifest: impl AsRef<Path>) -> Result<Vec<Example>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|u| {
            let waveform = read_wav(base.join(&u.wav))?;
            Ok(Example {
                id: u.id,
                waveform,
                speaker: u.speaker,
                src: u.src,
                tgt: u.tgt,
            })
        })
        .collect()
}

/// A group of examples processed in one optimizer step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub examples: Vec<Example>,
    /// One per example; identity until the trainer samples them.
    pub perturbations: Vec<PerturbationSpec>,
}

impl Batch {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return invalid("empty batch");
        }
        let perturbations = vec![PerturbationSpec::IDENTITY; examples.len()];
        Ok(Self {
            examples,
            perturbations,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_src(&self) -> bool {
        self.examples.iter().all(|e| e.src.is_some())
    }

    /// Samples padded with zeros to the longest waveform, and the mask of
    /// real samples.
    pub fn padded_audio(&self) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
        pad(self.examples.iter().map(|e| e.waveform.samples.as_slice()), 0.0)
    }

    pub fn padded_tgt(&self) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
        pad(self.examples.iter().map(|e| e.tgt.as_slice()), PAD)
    }

    pub fn padded_src(&self) -> Option<(Vec<Vec<usize>>, Vec<Vec<bool>>)> {
        if !self.has_src() {
            return None;
        }
        Some(pad(
            self.examples.iter().map(|e| e.src.as_deref().unwrap()),
            PAD,
        ))
    }
}

fn pad<'a, T: Copy + 'a>(
    seqs: impl Iterator<Item = &'a [T]> + Clone,
    fill: T,
) -> (Vec<Vec<T>>, Vec<Vec<bool>>) {
    let max = seqs.clone().map(|s| s.len()).max().unwrap_or(0);
    seqs.map(|s| {
        let mut v = s.to_vec();
        v.resize(max, fill);
        let mut m = vec![true; s.len()];
        m.resize(max, false);
        (v, m)
    })
    .unzip()
}

/// One shuffled epoch of batches; the last may be short.
pub fn make_batches(examples: &[Example], batch_size: usize, mode: Mode, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return invalid("batch size must be at least 1");
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let items = chunk
                .iter()
                .map(|&i| {
                    let mut e = examples[i].clone();
                    if mode == Mode::TranscriptFree {
                        e.src = None;
                    }
                    e
                })
                .collect();
            Batch::new(items)
        })
        .collect()
}

/// Symbols of `ids` with PAD, BOS and EOS removed.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> Result<String> {
    vocab.decode(ids)
}
