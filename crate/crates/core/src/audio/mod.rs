//! Toy speech synthesis, the three perturbation policies, and WAV I/O.

mod perturb;
mod synth;
mod wav;

pub use perturb::{
    add_noise_at_snr, apply_perturbation, measure_snr, pitch_shift, sample_perturbation_spec,
    time_stretch, PerturbationSpec, SnrLevel, PITCH_STEPS, STRETCH_RATES,
};
pub use synth::{synth_utterance, SpeakerProfile, SynthConfig};
pub use wav::{read_wav, write_wav};

use serde::{Deserialize, Serialize};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
