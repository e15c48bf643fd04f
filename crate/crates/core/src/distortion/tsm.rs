//! Time-scale modification by spectrogram time warping.
//!
//! Frames are resampled along time at a fixed hop: output frame `j` reads the
//! source at fractional position `u_j = j (T - 1) / (T' - 1)`. Magnitudes are
//! linearly interpolated. Phases are re-synthesized so every output frame
//! advances by the instantaneous frequency measured between the two source
//! frames it sits between.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dsp::engine::{self, Spectrum, StftEngine};
use crate::dsp::{wrap_phase, SpectroPair, StftConfig};
use crate::error::{Error, Result};

pub const MIN_RATE: f64 = 0.5;
pub const MAX_RATE: f64 = 2.0;

/// How output phases are derived from the source phases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseMode {
    /// Phase-vocoder accumulation of instantaneous-frequency advances.
    #[default]
    Cumulative,
    /// Per-frame form: source phase plus the wrapped inter-frame difference
    /// scaled by the rate, without accumulation.
    Literal,
}

pub fn check_rate(rate: f64) -> Result<()> {
    if !(MIN_RATE..=MAX_RATE).contains(&rate) {
        return Err(Error::Parameter(format!(
            "time-scale rate must be in [{MIN_RATE}, {MAX_RATE}], got {rate}"
        )));
    }
    Ok(())
}

pub fn warped_frames(frames: usize, rate: f64) -> usize {
    ((rate * frames as f64).round() as usize).max(2)
}

/// Source frame and interpolation weight for every output frame.
fn positions(frames: usize, out_frames: usize) -> Vec<(usize, f64)> {
    let scale = (frames - 1) as f64 / (out_frames - 1) as f64;
    (0..out_frames)
        .map(|j| {
            let u = j as f64 * scale;
            let i = (u.floor() as usize).min(frames - 2);
            (i, u - i as f64)
        })
        .collect()
}

/// Centre angular frequency of bin `k`, in radians per hop.
fn bin_advance(k: usize, cfg: &StftConfig) -> f64 {
    2.0 * PI * k as f64 * cfg.hop_length as f64 / cfg.fft_size as f64
}

struct Warp {
    pos: Vec<(usize, f64)>,
    bins: usize,
    mode: PhaseMode,
    rate: f64,
}

impl Warp {
    fn new(frames: usize, bins: usize, rate: f64, mode: PhaseMode) -> Result<Self> {
        check_rate(rate)?;
        if frames < 2 {
            return Err(Error::Contract(format!(
                "time warp needs at least 2 frames, got {frames}"
            )));
        }
        Ok(Self {
            pos: positions(frames, warped_frames(frames, rate)),
            bins,
            mode,
            rate,
        })
    }

    fn out_frames(&self) -> usize {
        self.pos.len()
    }

    fn magnitude(&self, s: &[f64]) -> Vec<f64> {
        let h = self.bins;
        let mut out = Vec::with_capacity(self.pos.len() * h);
        for &(i, f) in &self.pos {
            let (a, b) = (&s[i * h..(i + 1) * h], &s[(i + 1) * h..(i + 2) * h]);
            out.extend(a.iter().zip(b).map(|(&x, &y)| (1.0 - f) * x + f * y));
        }
        out
    }

    fn magnitude_vjp(&self, g: &[f64], frames: usize) -> Vec<f64> {
        let h = self.bins;
        let mut out = vec![0.0; frames * h];
        for (j, &(i, f)) in self.pos.iter().enumerate() {
            for k in 0..h {
                let gj = g[j * h + k];
                out[i * h + k] += (1.0 - f) * gj;
                out[(i + 1) * h + k] += f * gj;
            }
        }
        out
    }

    /// Unwrapped output phase.
    fn phase(&self, p: &[f64], cfg: &StftConfig) -> Vec<f64> {
        let h = self.bins;
        let tp = self.pos.len();
        let mut out = vec![0.0; tp * h];
        match self.mode {
            PhaseMode::Cumulative => {
                out[..h].copy_from_slice(&p[..h]);
                for j in 1..tp {
                    let i = self.pos[j - 1].0;
                    for k in 0..h {
                        let w = bin_advance(k, cfg);
                        let d = wrap_phase(p[(i + 1) * h + k] - p[i * h + k] - w);
                        out[j * h + k] = out[(j - 1) * h + k] + w + d;
                    }
                }
            }
            PhaseMode::Literal => {
                for (j, &(i, _)) in self.pos.iter().enumerate() {
                    for k in 0..h {
                        let d = wrap_phase(p[(i + 1) * h + k] - p[i * h + k]);
                        out[j * h + k] = p[i * h + k] + d * self.rate;
                    }
                }
            }
        }
        out
    }

    /// Gradient with respect to source phases. Phase wrapping has unit
    /// derivative almost everywhere.
    fn phase_vjp(&self, g: &[f64], frames: usize) -> Vec<f64> {
        let h = self.bins;
        let tp = self.pos.len();
        let mut out = vec![0.0; frames * h];
        match self.mode {
            PhaseMode::Cumulative => {
                // Output j depends on p_0 and on every increment l <= j, so
                // increment l receives the suffix sum of output gradients.
                let mut suffix = vec![0.0; h];
                for j in (1..tp).rev() {
                    let i = self.pos[j - 1].0;
                    for k in 0..h {
                        suffix[k] += g[j * h + k];
                        out[(i + 1) * h + k] += suffix[k];
                        out[i * h + k] -= suffix[k];
                    }
                }
                for k in 0..h {
                    out[k] += suffix[k] + g[k];
                }
            }
            PhaseMode::Literal => {
                for (j, &(i, _)) in self.pos.iter().enumerate() {
                    for k in 0..h {
                        let gj = g[j * h + k];
                        out[i * h + k] += (1.0 - self.rate) * gj;
                        out[(i + 1) * h + k] += self.rate * gj;
                    }
                }
            }
        }
        out
    }
}

/// Warps a magnitude/phase pair along time. Output phases are wrapped into
/// the principal range.
pub fn timewarp_spectrogram(
    spec: &SpectroPair,
    rate: f64,
    cfg: &StftConfig,
    mode: PhaseMode,
) -> Result<SpectroPair> {
    if spec.bins != cfg.n_bins() {
        return Err(Error::Contract(format!(
            "spectrogram has {} bins, config expects {}",
            spec.bins,
            cfg.n_bins()
        )));
    }
    let warp = Warp::new(spec.frames, spec.bins, rate, mode)?;
    let magnitude = warp.magnitude(&spec.magnitude);
    let phase = warp.phase(&spec.phase, cfg).into_iter().map(wrap_phase).collect();
    SpectroPair::new(warp.out_frames(), spec.bins, magnitude, phase, spec.sample_rate)
}

pub fn output_len(len: usize, rate: f64) -> usize {
    (rate * len as f64).round() as usize
}

/// Forward pass on raw samples. Returns the output and a closure mapping an
/// output gradient back to the input.
pub fn tsm_traced(
    engine: &StftEngine,
    x: &[f64],
    rate: f64,
    mode: PhaseMode,
) -> Result<(Vec<f64>, impl Fn(&[f64]) -> Vec<f64>)> {
    let cfg = *engine.config();
    let spec = engine.analyze(x)?;
    let (s, p) = spec.to_polar();
    let warp = Warp::new(spec.frames, spec.bins, rate, mode)?;
    let s2 = warp.magnitude(&s);
    let p2 = warp.phase(&p, &cfg);
    let out_len = output_len(x.len(), rate);
    let y = engine.synthesize(
        &Spectrum::from_polar(warp.out_frames(), spec.bins, &s2, &p2),
        out_len,
    );
    let engine = engine.clone();
    let len = x.len();
    let vjp = move |gy: &[f64]| {
        let gspec = engine.synthesize_vjp(gy, warp.out_frames());
        let (gs2, gp2) = engine::from_polar_vjp(&s2, &p2, &gspec);
        let gs = warp.magnitude_vjp(&gs2, spec.frames);
        let gp = warp.phase_vjp(&gp2, spec.frames);
        engine.analyze_vjp(&engine::polar_vjp(&spec, &gs, &gp), len)
    };
    Ok((y, vjp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_arithmetic() {
        assert_eq!(warped_frames(87, 0.8), 70);
        assert_eq!(warped_frames(2, 0.5), 2);
        assert!(check_rate(0.49).is_err());
        assert!(check_rate(2.01).is_err());
    }

    #[test]
    fn unit_rate_is_identity_on_spectrogram() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = StftConfig::default();
        let (t, h) = (9, cfg.n_bins());
        let mag: Vec<f64> = (0..t * h).map(|_| rng.gen_range(0.0..2.0)).collect();
        let ph: Vec<f64> = (0..t * h).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s = SpectroPair::new(t, h, mag.clone(), ph.clone(), 22050).unwrap();
        for mode in [PhaseMode::Cumulative, PhaseMode::Literal] {
            let w = timewarp_spectrogram(&s, 1.0, &cfg, mode).unwrap();
            assert_eq!(w.frames, t);
            for (a, b) in w.magnitude.iter().zip(&mag) {
                assert!((a - b).abs() <= 1e-6);
            }
            if mode == PhaseMode::Cumulative {
                for (a, b) in w.phase.iter().zip(&ph) {
                    assert!(wrap_phase(a - b).abs() < 1e-9);
                }
            }
            assert!(w.phase.iter().all(|&p| p > -PI && p <= PI));
        }
    }

    fn phase_adjoint(mode: PhaseMode) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = StftConfig {
            fft_size: 16,
            hop_length: 4,
            window_length: 16,
            window_kind: crate::dsp::WindowKind::Hann,
        };
        let (t, h) = (7, 9);
        for rate in [0.6, 1.3] {
            let warp = Warp::new(t, h, rate, mode).unwrap();
            let p: Vec<f64> = (0..t * h).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let g: Vec<f64> = (0..warp.out_frames() * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let gp = warp.phase_vjp(&g, t);
            // Small perturbations keep every wrapped difference on one branch.
            let eps = 1e-6;
            for idx in [0, 5, 20, 40, t * h - 1] {
                let mut a = p.clone();
                a[idx] += eps;
                let mut b = p.clone();
                b[idx] -= eps;
                let f = |q: &[f64]| -> f64 {
                    warp.phase(q, &cfg).iter().zip(&g).map(|(x, y)| x * y).sum()
                };
                let fd = (f(&a) - f(&b)) / (2.0 * eps);
                assert!((fd - gp[idx]).abs() < 1e-6, "{mode:?} rate {rate} idx {idx}: {fd} vs {}", gp[idx]);
            }
        }
    }

    #[test]
    fn phase_adjoint_cumulative() {
        phase_adjoint(PhaseMode::Cumulative);
    }

    #[test]
    fn phase_adjoint_literal() {
        phase_adjoint(PhaseMode::Literal);
    }
}
