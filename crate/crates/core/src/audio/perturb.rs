use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{invalid, Result};

pub const PITCH_STEPS: [i32; 3] = [-1, 0, 1];
pub const STRETCH_RATES: [f64; 5] = [0.8, 0.9, 1.0, 1.1, 1.2];

const FRAME_MS: f64 = 25.0;
const HOP_MS: f64 = 10.0;
/// Largest WSOLA alignment shift, as a fraction of the synthesis hop.
const SEARCH_FRACTION: f64 = 0.75;

/// Signal-to-noise ratio of the noise policy. `Clean` means no noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SnrLevel {
    Db5,
    Db10,
    Db20,
    Db50,
    Clean,
}

impl SnrLevel {
    pub const ALL: [SnrLevel; 5] = [
        SnrLevel::Db5,
        SnrLevel::Db10,
        SnrLevel::Db20,
        SnrLevel::Db50,
        SnrLevel::Clean,
    ];

    /// dB value; infinite for `Clean`.
    pub fn db(self) -> f64 {
        match self {
            SnrLevel::Db5 => 5.0,
            SnrLevel::Db10 => 10.0,
            SnrLevel::Db20 => 20.0,
            SnrLevel::Db50 => 50.0,
            SnrLevel::Clean => f64::INFINITY,
        }
    }

    /// Class index used by the SNR classifier.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|l| *l == self).unwrap()
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match Self::ALL.get(i) {
            Some(l) => Ok(*l),
            None => invalid(format!("SNR class {i} out of range")),
        }
    }

    pub fn from_db(db: f64) -> Result<Self> {
        match Self::ALL.iter().find(|l| l.db() == db) {
            Some(l) => Ok(*l),
            None => invalid(format!("unsupported SNR {db} dB")),
        }
    }
}

/// One draw of the three perturbation factors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub snr: SnrLevel,
    pub mu: i32,
    pub tau: f64,
}

impl PerturbationSpec {
    pub const IDENTITY: PerturbationSpec = PerturbationSpec {
        snr: SnrLevel::Clean,
        mu: 0,
        tau: 1.0,
    };

    pub fn new(snr: SnrLevel, mu: i32, tau: f64) -> Result<Self> {
        let spec = Self { snr, mu, tau };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !PITCH_STEPS.contains(&self.mu) {
            return invalid(format!("pitch step {} not in {PITCH_STEPS:?}", self.mu));
        }
        check_rate(self.tau)
    }

    pub fn is_identity(&self) -> bool {
        self.snr == SnrLevel::Clean && self.mu == 0 && self.tau == 1.0
    }
}

fn check_rate(tau: f64) -> Result<()> {
    if STRETCH_RATES.iter().any(|r| (r - tau).abs() < 1e-9) {
        Ok(())
    } else {
        invalid(format!("stretch rate {tau} not in {STRETCH_RATES:?}"))
    }
}

/// Each factor uniform and independent over its set.
pub fn sample_perturbation_spec<R: Rng + ?Sized>(rng: &mut R) -> PerturbationSpec {
    PerturbationSpec {
        snr: SnrLevel::ALL[rng.gen_range(0..SnrLevel::ALL.len())],
        mu: PITCH_STEPS[rng.gen_range(0..PITCH_STEPS.len())],
        tau: STRETCH_RATES[rng.gen_range(0..STRETCH_RATES.len())],
    }
}

/// `10·log10(P_signal / P_noise)`.
pub fn measure_snr(signal: &Waveform, noise: &Waveform) -> Result<f64> {
    if signal.len() != noise.len() {
        return invalid(format!(
            "signal has {} samples, noise has {}",
            signal.len(),
            noise.len()
        ));
    }
    let pn = noise.power();
    if pn == 0.0 {
        return invalid("noise power is zero");
    }
    Ok(10.0 * (signal.power() / pn).log10())
}

/// Adds white Gaussian noise scaled so its power is exactly
/// `P_signal / 10^(epsilon/10)`. Infinite `epsilon` returns `w` unchanged.
pub fn add_noise_at_snr(w: &Waveform, epsilon: f64, seed: u64) -> Result<Waveform> {
    if w.is_empty() {
        return invalid("empty waveform");
    }
    if epsilon == f64::INFINITY {
        return Ok(w.clone());
    }
    if !epsilon.is_finite() {
        return invalid(format!("SNR must be finite or +inf, got {epsilon}"));
    }
    let ps = w.power();
    if ps == 0.0 {
        return invalid("cannot set an SNR relative to a silent waveform");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise: Vec<f64> = (0..w.len()).map(|_| rng.sample(StandardNormal)).collect();
    let pn = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    let scale = (ps / 10f64.powf(epsilon / 10.0) / pn).sqrt();
    for v in &mut noise {
        *v *= scale;
    }
    let samples = w.samples.iter().zip(&noise).map(|(s, n)| s + n).collect();
    Ok(Waveform::new(samples, w.sample_rate))
}

/// Pitch-preserving rate change (tau > 1 shortens). Output length is
/// `round(len / tau)`; `tau == 1` returns an exact copy.
pub fn time_stretch(w: &Waveform, tau: f64) -> Result<Waveform> {
    check_rate(tau)?;
    if tau == 1.0 {
        return Ok(w.clone());
    }
    let out_len = (w.len() as f64 / tau).round() as usize;
    Ok(wsola(w, out_len.max(1)))
}

/// Shifts pitch by `mu` semitones keeping the length unchanged.
pub fn pitch_shift(w: &Waveform, mu: i32) -> Result<Waveform> {
    if !PITCH_STEPS.contains(&mu) {
        return invalid(format!("pitch step {mu} not in {PITCH_STEPS:?}"));
    }
    if mu == 0 {
        return Ok(w.clone());
    }
    let r = 2f64.powf(mu as f64 / 12.0);
    let resampled = resample_linear(w, r);
    Ok(wsola(&resampled, w.len()))
}

/// Pitch shift, then time stretch, then noise.
pub fn apply_perturbation(w: &Waveform, spec: &PerturbationSpec, seed: u64) -> Result<Waveform> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(w.clone());
    }
    let shifted = pitch_shift(w, spec.mu)?;
    let stretched = time_stretch(&shifted, spec.tau)?;
    add_noise_at_snr(&stretched, spec.snr.db(), seed)
}

/// Reads `w` at positions `0, r, 2r, ...`.
fn resample_linear(w: &Waveform, r: f64) -> Waveform {
    let x = &w.samples;
    let n_out = ((x.len() as f64 / r).round() as usize).max(1);
    let last = x.len() - 1;
    let samples = (0..n_out)
        .map(|n| {
            let pos = n as f64 * r;
            let i = pos.floor() as usize;
            if i >= last {
                return x[last];
            }
            let frac = pos - i as f64;
            x[i] * (1.0 - frac) + x[i + 1] * frac
        })
        .collect();
    Waveform::new(samples, w.sample_rate)
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (u, v) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += u[k] * v[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Waveform-similarity overlap-add to exactly `out_len` samples.
///
/// Output frames are centred at multiples of the synthesis hop; each takes
/// the input frame near its nominal position whose start best correlates with
/// the natural continuation of the previously chosen frame.
fn wsola(w: &Waveform, out_len: usize) -> Waveform {
    let x = &w.samples;
    let sr = w.sample_rate as f64;
    let n = ((FRAME_MS * sr / 1000.0).round() as usize).max(2);
    let hs = ((HOP_MS * sr / 1000.0).round() as usize).max(1);
    let half = (n / 2) as isize;
    let delta = (hs as f64 * SEARCH_FRACTION) as isize;
    let ratio = x.len() as f64 / out_len as f64;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos())
        .collect();
    // zero padding on both sides so every candidate frame is a plain slice
    let pad = (n as isize + 2 * delta + 2 * hs as isize + half) as usize;
    let mut padded = vec![0.0; x.len() + 2 * pad];
    padded[pad..pad + x.len()].copy_from_slice(x);
    let slice = |start: isize| -> &[f64] {
        let s = (start + pad as isize).clamp(0, (padded.len() - n) as isize) as usize;
        &padded[s..s + n]
    };

    let mut out = vec![0.0; out_len];
    let mut wsum = vec![0.0; out_len];
    let frames = out_len.div_ceil(hs) + 1;
    let mut prev_start: Option<isize> = None;
    for k in 0..frames {
        let centre_out = (k * hs) as isize;
        let nominal = (centre_out as f64 * ratio).round() as isize - half;
        let start = match prev_start {
            None => nominal,
            Some(p) => {
                let target = p + hs as isize;
                let mut best = nominal;
                let mut best_score = f64::NEG_INFINITY;
                for d in -delta..=delta {
                    let cand = nominal + d;
                    let score = dot(slice(cand), slice(target));
                    if score > best_score {
                        best_score = score;
                        best = cand;
                    }
                }
                best
            }
        };
        prev_start = Some(start);
        let frame = slice(start);
        for i in 0..n {
            let o = centre_out - half + i as isize;
            if o < 0 || o as usize >= out_len {
                continue;
            }
            out[o as usize] += window[i] * frame[i];
            wsum[o as usize] += window[i];
        }
    }
    for (v, s) in out.iter_mut().zip(&wsum) {
        if *s > 1e-8 {
            *v /= s;
        }
    }
    Waveform::new(out, w.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_utterance, SpeakerProfile, SynthConfig, SAMPLE_RATE};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rustfft::{num_complex::Complex, FftPlanner};

    fn sine(freq: f64, len: usize) -> Waveform {
        let sr = SAMPLE_RATE as f64;
        let s = (0..len)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * freq * n as f64 / sr).sin())
            .collect();
        Waveform::new(s, SAMPLE_RATE)
    }

    /// Frequency of the largest magnitude FFT bin, and the bin width.
    fn fft_peak(w: &Waveform) -> (f64, f64) {
        let mut buf: Vec<Complex<f64>> =
            w.samples.iter().map(|s| Complex::new(*s, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        let half = buf.len() / 2;
        let k = (1..half)
            .max_by(|a, b| buf[*a].norm().total_cmp(&buf[*b].norm()))
            .unwrap();
        let bin = w.sample_rate as f64 / buf.len() as f64;
        (k as f64 * bin, bin)
    }

    fn max_xcorr(a: &[f64], b: &[f64], max_lag: isize) -> f64 {
        let n = a.len().min(b.len()) as isize;
        let mut best = f64::NEG_INFINITY;
        for lag in -max_lag..=max_lag {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let j = i + lag;
                if j < 0 || j >= n {
                    continue;
                }
                let (x, y) = (a[i as usize], b[j as usize]);
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            best = best.max(ab / (aa * bb).sqrt());
        }
        best
    }

    #[test]
    fn synth_pure_tone_peaks_at_base() {
        let cfg = SynthConfig {
            segment_ms: 1000.0,
            ..SynthConfig::default()
        };
        let spk = SpeakerProfile::flat(0, 200.0).unwrap();
        let w = synth_utterance(&[cfg.first_content_id], &spk, &cfg, 0).unwrap();
        let (f, bin) = fft_peak(&w);
        assert!((f - 200.0).abs() <= bin, "peak {f}");
    }

    #[test]
    fn infinite_snr_is_identity() {
        let w = sine(300.0, 1000);
        assert_eq!(add_noise_at_snr(&w, f64::INFINITY, 1).unwrap(), w);
    }

    #[test]
    fn noise_power_matches_definition() {
        let w = sine(300.0, 4000);
        let y = add_noise_at_snr(&w, 20.0, 2).unwrap();
        let noise: Vec<f64> = y.samples.iter().zip(&w.samples).map(|(a, b)| a - b).collect();
        let pn = Waveform::new(noise.clone(), SAMPLE_RATE).power();
        assert!((pn - w.power() / 100.0).abs() < 1e-12);
        let snr = measure_snr(&w, &Waveform::new(noise, SAMPLE_RATE)).unwrap();
        assert!((snr - 20.0).abs() < 1e-9);
    }

    #[test]
    fn five_db_on_sine() {
        let w = sine(440.0, 8000);
        let y = add_noise_at_snr(&w, 5.0, 3).unwrap();
        let noise: Vec<f64> = y.samples.iter().zip(&w.samples).map(|(a, b)| a - b).collect();
        let snr = measure_snr(&w, &Waveform::new(noise, SAMPLE_RATE)).unwrap();
        assert!((snr - 5.0).abs() < 0.5);
    }

    #[test]
    fn silent_input_with_finite_snr_is_error() {
        let w = Waveform::new(vec![0.0; 100], SAMPLE_RATE);
        assert!(add_noise_at_snr(&w, 10.0, 0).is_err());
        assert!(add_noise_at_snr(&w, f64::INFINITY, 0).is_ok());
        assert!(add_noise_at_snr(&sine(100.0, 10), f64::NAN, 0).is_err());
    }

    #[test]
    fn measure_snr_examples() {
        let w = sine(300.0, 500);
        assert!(measure_snr(&w, &w).unwrap().abs() < 1e-12);
        let tenth = Waveform::new(w.samples.iter().map(|s| s / 10.0).collect(), SAMPLE_RATE);
        assert!((measure_snr(&w, &tenth).unwrap() - 20.0).abs() < 1e-9);
        let zero = Waveform::new(vec![0.0; 500], SAMPLE_RATE);
        assert!(measure_snr(&w, &zero).is_err());
        assert!(measure_snr(&w, &sine(1.0, 10)).is_err());
    }

    #[test]
    fn measure_snr_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..257).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..257).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let mut sa = 0.0;
        let mut sb = 0.0;
        for i in 0..257 {
            sa += a[i] * a[i];
            sb += b[i] * b[i];
        }
        let expect = 10.0 * (sa / sb).log10();
        let got = measure_snr(
            &Waveform::new(a, SAMPLE_RATE),
            &Waveform::new(b, SAMPLE_RATE),
        )
        .unwrap();
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn stretch_identity_and_lengths() {
        let w = sine(440.0, 16000);
        assert_eq!(time_stretch(&w, 1.0).unwrap(), w);
        assert_eq!(time_stretch(&w, 0.8).unwrap().len(), 20000);
        assert_eq!(time_stretch(&w, 1.2).unwrap().len(), 13333);
        assert!(time_stretch(&w, 1.5).is_err());
    }

    #[test]
    fn stretch_preserves_pitch() {
        let w = sine(440.0, 16000);
        for tau in [0.8, 1.2] {
            let y = time_stretch(&w, tau).unwrap();
            let (f, bin) = fft_peak(&y);
            assert!((f - 440.0).abs() <= 2.0 * bin, "tau {tau}: peak {f}");
        }
    }

    #[test]
    fn pitch_shift_moves_peak() {
        let w = sine(440.0, 16000);
        assert_eq!(pitch_shift(&w, 0).unwrap(), w);
        for mu in [-1, 1] {
            let y = pitch_shift(&w, mu).unwrap();
            assert_eq!(y.len(), w.len());
            let expect = 440.0 * 2f64.powf(mu as f64 / 12.0);
            let (f, bin) = fft_peak(&y);
            assert!((f - expect).abs() <= 2.0 * bin, "mu {mu}: peak {f} vs {expect}");
        }
        assert!(pitch_shift(&w, 2).is_err());
    }

    #[test]
    fn pitch_down_then_up_correlates() {
        let w = sine(440.0, 16000);
        let y = pitch_shift(&pitch_shift(&w, -1).unwrap(), 1).unwrap();
        let c = max_xcorr(&w.samples, &y.samples, 40);
        assert!(c > 0.9, "correlation {c}");

        let cfg = SynthConfig::default();
        let spk = &SpeakerProfile::generate(3, 2).unwrap()[1];
        let u = synth_utterance(&[5, 9, 12, 7], spk, &cfg, 4).unwrap();
        let v = pitch_shift(&pitch_shift(&u, -1).unwrap(), 1).unwrap();
        // alignment drift is local, so compare segment interiors; frames
        // straddling a boundary blend two tones
        let seg = cfg.segment_len();
        for k in 0..4 {
            let r = k * seg + 160..(k + 1) * seg - 160;
            let c = max_xcorr(&u.samples[r.clone()], &v.samples[r], 40);
            assert!(c > 0.9, "segment {k} correlation {c}");
        }
    }

    #[test]
    fn composed_perturbation() {
        let w = sine(440.0, 16000);
        assert_eq!(
            apply_perturbation(&w, &PerturbationSpec::IDENTITY, 7).unwrap(),
            w
        );
        let spec = PerturbationSpec::new(SnrLevel::Db20, 0, 0.8).unwrap();
        let y = apply_perturbation(&w, &spec, 7).unwrap();
        assert_eq!(y.len(), 20000);
        let clean = time_stretch(&w, 0.8).unwrap();
        let noise: Vec<f64> = y.samples.iter().zip(&clean.samples).map(|(a, b)| a - b).collect();
        let snr = measure_snr(&clean, &Waveform::new(noise, SAMPLE_RATE)).unwrap();
        assert!((snr - 20.0).abs() < 0.5);
        assert_eq!(apply_perturbation(&w, &spec, 7).unwrap(), y);
    }

    #[test]
    fn spec_validation() {
        assert!(PerturbationSpec::new(SnrLevel::Db5, 2, 1.0).is_err());
        assert!(PerturbationSpec::new(SnrLevel::Db5, 1, 0.7).is_err());
        assert_eq!(SnrLevel::from_db(50.0).unwrap(), SnrLevel::Db50);
        assert_eq!(SnrLevel::from_db(f64::INFINITY).unwrap(), SnrLevel::Clean);
        for (i, l) in SnrLevel::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
        }
    }

    #[test]
    fn sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut eps = [0usize; 5];
        let mut mu = [0usize; 3];
        let mut tau = [0usize; 5];
        for _ in 0..n {
            let s = sample_perturbation_spec(&mut rng);
            eps[s.snr.index()] += 1;
            mu[(s.mu + 1) as usize] += 1;
            tau[STRETCH_RATES.iter().position(|r| *r == s.tau).unwrap()] += 1;
        }
        for c in eps.iter().chain(&tau) {
            assert!((*c as f64 / n as f64 - 0.2).abs() < 0.01);
        }
        for c in mu {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.01);
        }
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(sample_perturbation_spec(&mut a), sample_perturbation_spec(&mut b));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn requested_snr_is_achieved(seed in any::<u64>(), len in 50usize..2000, level in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), SAMPLE_RATE);
            let eps = SnrLevel::ALL[level].db();
            let y = add_noise_at_snr(&w, eps, seed).unwrap();
            let noise: Vec<f64> = y.samples.iter().zip(&w.samples).map(|(a, b)| a - b).collect();
            let snr = measure_snr(&w, &Waveform::new(noise, SAMPLE_RATE)).unwrap();
            prop_assert!((snr - eps).abs() < 0.5);
        }

        #[test]
        fn stretch_length_is_exact(len in 1usize..5000, t in 0usize..5) {
            let w = sine(300.0, len);
            let tau = STRETCH_RATES[t];
            let y = time_stretch(&w, tau).unwrap();
            prop_assert_eq!(y.len(), ((len as f64 / tau).round() as usize).max(1));
        }
    }
}
