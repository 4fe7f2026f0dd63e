use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{invalid, Result};

/// Voice of one synthetic speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: usize,
    /// Frequency of the first content token, in Hz.
    pub base_frequency: f64,
    /// Relative amplitude of harmonics 1, 2, ...
    pub harmonic_amplitudes: Vec<f64>,
}

impl SpeakerProfile {
    pub const MIN_BASE_HZ: f64 = 80.0;
    pub const MAX_BASE_HZ: f64 = 400.0;

    pub fn new(speaker_id: usize, base_frequency: f64, harmonic_amplitudes: Vec<f64>) -> Result<Self> {
        if !(Self::MIN_BASE_HZ..=Self::MAX_BASE_HZ).contains(&base_frequency) {
            return invalid(format!(
                "base frequency {base_frequency} Hz outside [{}, {}]",
                Self::MIN_BASE_HZ,
                Self::MAX_BASE_HZ
            ));
        }
        if harmonic_amplitudes.is_empty() || harmonic_amplitudes.iter().any(|a| *a < 0.0) {
            return invalid("harmonic amplitudes must be nonempty and nonnegative");
        }
        Ok(Self {
            speaker_id,
            base_frequency,
            harmonic_amplitudes,
        })
    }

    /// A single pure harmonic.
    pub fn flat(speaker_id: usize, base_frequency: f64) -> Result<Self> {
        Self::new(speaker_id, base_frequency, vec![1.0])
    }

    /// `n` speakers with base frequencies spread over one semitone around
    /// 180 Hz and distinct random five-harmonic timbres.
    pub fn generate(n: usize, seed: u64) -> Result<Vec<Self>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        (0..n)
            .map(|i| {
                let frac = if n > 1 { i as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
                let base = 180.0 * 2f64.powf(frac / 12.0);
                let mut amps = vec![1.0];
                amps.extend((0..4).map(|_| rng.gen_range(0.05..1.0)));
                Self::new(i, base, amps)
            })
            .collect()
    }
}

/// Layout of synthesized utterances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub segment_ms: f64,
    /// Smallest token id that carries sound; lower ids are reserved symbols.
    pub first_content_id: usize,
    /// One past the largest valid token id.
    pub vocab_size: usize,
    /// Pitch distance between consecutive token ids, in semitones.
    pub semitone_step: f64,
    pub peak_amplitude: f64,
    pub fade_ms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            segment_ms: 80.0,
            first_content_id: 4,
            vocab_size: 16,
            semitone_step: 3.0,
            peak_amplitude: 0.5,
            fade_ms: 5.0,
        }
    }
}

impl SynthConfig {
    pub fn segment_len(&self) -> usize {
        (self.segment_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Fundamental of `token` for `speaker`.
    pub fn token_frequency(&self, token: usize, speaker: &SpeakerProfile) -> f64 {
        let offset = (token - self.first_content_id) as f64;
        speaker.base_frequency * 2f64.powf(offset * self.semitone_step / 12.0)
    }
}

/// One harmonic tone segment per token, voiced by `speaker`.
pub fn synth_utterance(
    tokens: &[usize],
    speaker: &SpeakerProfile,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Waveform> {
    if tokens.is_empty() {
        return invalid("cannot synthesize an empty token sequence");
    }
    if let Some(bad) = tokens
        .iter()
        .find(|t| **t < cfg.first_content_id || **t >= cfg.vocab_size)
    {
        return invalid(format!("unknown token id {bad}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seg = cfg.segment_len();
    let sr = cfg.sample_rate as f64;
    let nyquist = sr / 2.0;
    let fade = ((cfg.fade_ms * sr / 1000.0).round() as usize).min(seg / 2);
    let norm: f64 = speaker.harmonic_amplitudes.iter().sum();
    let mut samples = Vec::with_capacity(seg * tokens.len());
    for &tok in tokens {
        let f0 = cfg.token_frequency(tok, speaker);
        let gain = cfg.peak_amplitude * rng.gen_range(0.85..1.0) / norm;
        let phases: Vec<f64> = speaker
            .harmonic_amplitudes
            .iter()
            .map(|_| rng.gen_range(0.0..2.0 * PI))
            .collect();
        for n in 0..seg {
            let t = n as f64 / sr;
            let mut v = 0.0;
            for (h, (amp, ph)) in speaker.harmonic_amplitudes.iter().zip(&phases).enumerate() {
                let f = f0 * (h + 1) as f64;
                if f >= nyquist {
                    break;
                }
                v += amp * (2.0 * PI * f * t + ph).sin();
            }
            let env = if fade == 0 {
                1.0
            } else if n < fade {
                0.5 - 0.5 * (PI * n as f64 / fade as f64).cos()
            } else if n >= seg - fade {
                0.5 - 0.5 * (PI * (seg - 1 - n) as f64 / fade as f64).cos()
            } else {
                1.0
            };
            samples.push((v * gain * env).clamp(-1.0, 1.0));
        }
    }
    Ok(Waveform::new(samples, cfg.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_is_one_segment_per_token() {
        let cfg = SynthConfig::default();
        let spk = &SpeakerProfile::generate(2, 1).unwrap()[0];
        let w = synth_utterance(&[4, 5, 6], spk, &cfg, 0).unwrap();
        assert_eq!(cfg.segment_len(), 1280);
        assert_eq!(w.len(), 3840);
        assert!(w.samples.iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn speakers_differ_but_share_boundaries() {
        let cfg = SynthConfig::default();
        let spk = SpeakerProfile::generate(2, 1).unwrap();
        let a = synth_utterance(&[4, 9, 6], &spk[0], &cfg, 3).unwrap();
        let b = synth_utterance(&[4, 9, 6], &spk[1], &cfg, 3).unwrap();
        assert_eq!(a.len(), b.len());
        assert_ne!(a, b);
        // fades put near-silence at every segment boundary for both
        for k in 1..3 {
            let i = k * cfg.segment_len();
            assert!(a.samples[i].abs() < 1e-12 && b.samples[i].abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_and_empty_tokens_are_errors() {
        let cfg = SynthConfig::default();
        let spk = SpeakerProfile::flat(0, 200.0).unwrap();
        assert!(synth_utterance(&[], &spk, &cfg, 0).is_err());
        assert!(synth_utterance(&[2], &spk, &cfg, 0).is_err());
        assert!(synth_utterance(&[16], &spk, &cfg, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default();
        let spk = SpeakerProfile::flat(0, 200.0).unwrap();
        let a = synth_utterance(&[5, 7], &spk, &cfg, 9).unwrap();
        let b = synth_utterance(&[5, 7], &spk, &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn profiles_respect_frequency_range() {
        assert!(SpeakerProfile::flat(0, 79.0).is_err());
        for p in SpeakerProfile::generate(8, 4).unwrap() {
            assert!((80.0..=400.0).contains(&p.base_frequency));
        }
    }
}
