//! Short-time Fourier analysis and synthesis.
//!
//! The numeric work lives in [`engine`], which operates on `f64` buffers and
//! exposes vector-Jacobian products for both directions. [`ops`] lifts those
//! into autodiff graph nodes for the codec and the distortion layer.

pub mod engine;
pub mod ops;
pub mod resample;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::audio_io::AudioClip;
use crate::error::{Error, Result};

pub use engine::{Spectrum, StftEngine};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// Periodic Hann.
    Hann,
    /// Periodic Hamming.
    Hamming,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop_length: usize,
    pub window_length: usize,
    pub window_kind: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop_length: 256,
            window_length: 1024,
            window_kind: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 4 || !self.fft_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "fft_size must be even and >= 4, got {}",
                self.fft_size
            )));
        }
        if self.window_length == 0 || self.window_length > self.fft_size {
            return Err(Error::Config(format!(
                "window_length must be in 1..={}, got {}",
                self.fft_size, self.window_length
            )));
        }
        if self.hop_length == 0 || 2 * self.hop_length > self.window_length {
            return Err(Error::Config(format!(
                "hop_length {} gives less than 2x overlap for window {}",
                self.hop_length, self.window_length
            )));
        }
        Ok(())
    }

    /// Frequency bins per frame.
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced for a clip of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop_length
    }

    /// Shortest clip the analysis accepts.
    pub fn min_samples(&self) -> usize {
        self.window_length.max(self.fft_size / 2 + 1)
    }

    /// Window of length `fft_size`, zero-padded symmetrically when
    /// `window_length < fft_size`.
    pub fn window(&self) -> Vec<f64> {
        let l = self.window_length;
        let offset = (self.fft_size - l) / 2;
        let mut w = vec![0.0; self.fft_size];
        for i in 0..l {
            let phase = 2.0 * PI * i as f64 / l as f64;
            w[offset + i] = match self.window_kind {
                WindowKind::Hann => 0.5 - 0.5 * phase.cos(),
                WindowKind::Hamming => 0.54 - 0.46 * phase.cos(),
            };
        }
        w
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        let need = self.min_samples();
        if len < need {
            return Err(Error::InputTooShort { got: len, need });
        }
        Ok(())
    }
}

/// Magnitude and phase, each `frames x bins`, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectroPair {
    pub frames: usize,
    pub bins: usize,
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub sample_rate: u32,
}

impl SpectroPair {
    pub fn new(
        frames: usize,
        bins: usize,
        magnitude: Vec<f64>,
        phase: Vec<f64>,
        sample_rate: u32,
    ) -> Result<Self> {
        let n = frames * bins;
        if magnitude.len() != n || phase.len() != n {
            return Err(Error::Contract(format!(
                "spectrogram {frames}x{bins} needs {n} values, got magnitude {} and phase {}",
                magnitude.len(),
                phase.len()
            )));
        }
        Ok(Self {
            frames,
            bins,
            magnitude,
            phase,
            sample_rate,
        })
    }

    pub fn magnitude_at(&self, frame: usize, bin: usize) -> f64 {
        self.magnitude[frame * self.bins + bin]
    }

    pub fn phase_at(&self, frame: usize, bin: usize) -> f64 {
        self.phase[frame * self.bins + bin]
    }

    /// Per-bin magnitude averaged over frames.
    pub fn mean_spectrum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.bins];
        for row in self.magnitude.chunks_exact(self.bins) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let t = self.frames.max(1) as f64;
        out.iter_mut().for_each(|o| *o /= t);
        out
    }
}

/// Analysis with center reflect padding.
pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<SpectroPair> {
    let engine = StftEngine::new(*cfg)?;
    let spec = engine.analyze(&clip.samples_f64())?;
    let (magnitude, phase) = spec.to_polar();
    SpectroPair::new(spec.frames, spec.bins, magnitude, phase, clip.sample_rate())
}

/// Weighted overlap-add synthesis, trimmed or zero-padded to `length_hint`.
pub fn istft(spec: &SpectroPair, cfg: &StftConfig, length_hint: usize) -> Result<AudioClip> {
    let engine = StftEngine::new(*cfg)?;
    if spec.bins != cfg.n_bins() {
        return Err(Error::Contract(format!(
            "spectrogram has {} bins, config expects {}",
            spec.bins,
            cfg.n_bins()
        )));
    }
    if length_hint > spec.frames * cfg.hop_length {
        return Err(Error::Contract(format!(
            "length hint {length_hint} exceeds {} frames x hop {}",
            spec.frames, cfg.hop_length
        )));
    }
    let complex = Spectrum::from_polar(spec.frames, spec.bins, &spec.magnitude, &spec.phase);
    let y = engine.synthesize(&complex, length_hint);
    AudioClip::from_f64(&y, spec.sample_rate)
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_phase(x: f64) -> f64 {
    let mut y = x - 2.0 * PI * (x / (2.0 * PI)).round();
    if y <= -PI {
        y += 2.0 * PI;
    } else if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// Energy ratio in dB between `reference` and the error `estimate - reference`.
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let signal: f64 = reference.iter().map(|x| x * x).sum();
    let noise: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    10.0 * (signal / noise).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(x: Vec<f64>) -> AudioClip {
        AudioClip::from_f64(&x, 22050).unwrap()
    }

    #[test]
    fn frame_count_and_bins() {
        let cfg = StftConfig::default();
        let s = stft(&AudioClip::silence(22050, 22050), &cfg).unwrap();
        assert_eq!((s.frames, s.bins), (87, 513));
        assert!(s.magnitude.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn short_clip_is_rejected() {
        let cfg = StftConfig::default();
        let err = stft(&AudioClip::silence(1000, 22050), &cfg).unwrap_err();
        assert!(matches!(err, Error::InputTooShort { got: 1000, need: 1024 }));
    }

    #[test]
    fn sinusoid_peaks_at_expected_bin() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..22050)
            .map(|i| (2.0 * PI * 440.0 * i as f64 / 22050.0).sin())
            .collect();
        let s = stft(&clip(x.clone()), &cfg).unwrap();
        let mean = s.mean_spectrum();
        let peak = (0..mean.len()).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();

        // Independent oracle: direct DFT of one interior windowed frame.
        let w = cfg.window();
        let start = 5000;
        let dft_mag = |k: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..1024 {
                let a = -2.0 * PI * (k * n) as f64 / 1024.0;
                re += x[start + n] * w[n] * a.cos();
                im += x[start + n] * w[n] * a.sin();
            }
            (re * re + im * im).sqrt()
        };
        let oracle = (0..513).max_by(|&a, &b| dft_mag(a).total_cmp(&dft_mag(b))).unwrap();
        assert_eq!(peak, 20);
        assert_eq!(oracle, 20);
    }

    #[test]
    fn round_trip_is_transparent() {
        let cfg = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [1024, 1500, 22050, 33333] {
            let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.5f32..0.5) as f64).collect();
            let c = clip(x);
            let y = istft(&stft(&c, &cfg).unwrap(), &cfg, len).unwrap();
            assert_eq!(y.len(), len);
            assert!(snr_db(&c.samples_f64(), &y.samples_f64()) > 40.0);
        }
    }

    #[test]
    fn zero_magnitude_gives_silence() {
        let cfg = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phase: Vec<f64> = (0..87 * 513).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s = SpectroPair::new(87, 513, vec![0.0; 87 * 513], phase, 22050).unwrap();
        let y = istft(&s, &cfg, 22050).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn istft_shape_errors() {
        let cfg = StftConfig::default();
        let s = SpectroPair::new(4, 100, vec![0.0; 400], vec![0.0; 400], 22050).unwrap();
        assert!(matches!(istft(&s, &cfg, 100), Err(Error::Contract(_))));
        let s = SpectroPair::new(4, 513, vec![0.0; 4 * 513], vec![0.0; 4 * 513], 22050).unwrap();
        assert!(matches!(istft(&s, &cfg, 4 * 256 + 1), Err(Error::Contract(_))));
        assert!(SpectroPair::new(2, 2, vec![0.0; 3], vec![0.0; 4], 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig::default().validate().is_ok());
        let bad = StftConfig {
            window_length: 2048,
            ..StftConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = StftConfig {
            hop_length: 600,
            ..StftConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn wrap_phase_principal_range() {
        for &x in &[0.0, PI, -PI, 3.0 * PI, -3.0 * PI, 7.5, -7.5, 1e3] {
            let y = wrap_phase(x);
            assert!(y > -PI && y <= PI, "{x} -> {y}");
            let k = (x - y) / (2.0 * PI);
            assert!((k - k.round()).abs() < 1e-9);
        }
    }
}
