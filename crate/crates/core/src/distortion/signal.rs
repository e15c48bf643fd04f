//! Sample-domain attacks with explicit adjoints.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::resample::{resample_to_len, resample_to_len_vjp};
use crate::error::{Error, Result};

/// Output of an attack together with its vector-Jacobian product.
pub struct Traced {
    pub y: Vec<f64>,
    pub vjp: Box<dyn Fn(&[f64]) -> Vec<f64>>,
}

impl Traced {
    pub fn new(y: Vec<f64>, vjp: impl Fn(&[f64]) -> Vec<f64> + 'static) -> Self {
        Self {
            y,
            vjp: Box::new(vjp),
        }
    }

    pub fn identity(x: &[f64]) -> Self {
        Self::new(x.to_vec(), |g| g.to_vec())
    }

    /// `y = k x`.
    pub fn scaled(x: &[f64], k: f64) -> Self {
        Self::new(x.iter().map(|v| v * k).collect(), move |g| {
            g.iter().map(|v| v * k).collect()
        })
    }
}

/// Taps of the lowpass FIR.
pub const LOWPASS_TAPS: usize = 255;

/// Blackman-windowed sinc lowpass, normalized to unit DC gain.
pub fn lowpass_kernel(cutoff_hz: f64, sample_rate: f64) -> Vec<f64> {
    let fc = cutoff_hz / sample_rate;
    let c = (LOWPASS_TAPS / 2) as f64;
    let mut h: Vec<f64> = (0..LOWPASS_TAPS)
        .map(|n| {
            let d = n as f64 - c;
            let sinc = if d == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * d).sin() / (PI * d)
            };
            let t = n as f64 / (LOWPASS_TAPS - 1) as f64;
            let w = 0.42 - 0.5 * (2.0 * PI * t).cos() + 0.08 * (4.0 * PI * t).cos();
            sinc * w
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Centred "same" convolution with zero extension at the edges.
fn convolve_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let c = h.len() / 2;
    let m = x.len();
    (0..m)
        .map(|i| {
            let lo = (i + c).saturating_sub(m - 1);
            let hi = (i + c).min(h.len() - 1);
            (lo..=hi).map(|k| h[k] * x[i + c - k]).sum()
        })
        .collect()
}

fn correlate_same(g: &[f64], h: &[f64]) -> Vec<f64> {
    let flipped: Vec<f64> = h.iter().rev().copied().collect();
    convolve_same(g, &flipped)
}

pub fn lowpass(x: &[f64], cutoff_hz: f64, sample_rate: u32) -> Result<Traced> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::Parameter(format!(
            "lowpass cutoff must be in (0, {nyquist}) Hz, got {cutoff_hz}"
        )));
    }
    let h = lowpass_kernel(cutoff_hz, sample_rate as f64);
    let y = convolve_same(x, &h);
    Ok(Traced::new(y, move |g| correlate_same(g, &h)))
}

/// Linear resampling to `out_len` samples.
pub fn resample_len(x: &[f64], out_len: usize) -> Traced {
    let n = x.len();
    Traced::new(resample_to_len(x, out_len), move |g| {
        resample_to_len_vjp(g, n)
    })
}

pub fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.25..=4.0).contains(&ratio) {
        return Err(Error::Parameter(format!(
            "resample ratio must be in [0.25, 4], got {ratio}"
        )));
    }
    Ok(())
}

/// Resamples to `round(ratio * M)` and back to `M`.
pub fn resample_round_trip(x: &[f64], ratio: f64) -> Result<Traced> {
    check_ratio(ratio)?;
    let m = x.len();
    let mid = ((ratio * m as f64).round() as usize).max(1);
    let a = resample_len(x, mid);
    let b = resample_len(&a.y, m);
    let (va, vb) = (a.vjp, b.vjp);
    Ok(Traced::new(b.y, move |g| va(&vb(g))))
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn gaussian_noise_vec(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Adds white Gaussian noise scaled so that the SNR against `x` is exactly
/// `snr_db`. The gradient includes the dependence of the scale on `x`.
pub fn gaussian_noise(x: &[f64], snr_db: f64, seed: u64) -> Result<Traced> {
    if !(0.0..=60.0).contains(&snr_db) {
        return Err(Error::Parameter(format!(
            "noise SNR must be in [0, 60] dB, got {snr_db}"
        )));
    }
    let ex = energy(x);
    if ex <= 0.0 {
        return Err(Error::DegenerateInput("noise target SNR on a silent clip".into()));
    }
    Ok(scaled_noise(x, ex, snr_db, seed))
}

fn scaled_noise(x: &[f64], ex: f64, snr_db: f64, seed: u64) -> Traced {
    let n = gaussian_noise_vec(x.len(), seed);
    let en = energy(&n).max(f64::MIN_POSITIVE);
    let k = (ex / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    let y = x.iter().zip(&n).map(|(a, b)| a + k * b).collect();
    let xs = x.to_vec();
    Traced::new(y, move |g| {
        let gn: f64 = g.iter().zip(&n).map(|(a, b)| a * b).sum();
        let c = gn * k / ex;
        g.iter().zip(&xs).map(|(gi, xi)| gi + c * xi).collect()
    })
}

pub fn amplitude(x: &[f64], scale: f64) -> Result<Traced> {
    if !(scale > 0.0 && scale <= 2.0) {
        return Err(Error::Parameter(format!(
            "amplitude scale must be in (0, 2], got {scale}"
        )));
    }
    Ok(Traced::scaled(x, scale))
}

/// Uniform quantization with step `2^(1 - bits)`; straight-through gradient.
pub fn requantize(x: &[f64], bits: u32) -> Result<Traced> {
    if !(4..=16).contains(&bits) {
        return Err(Error::Parameter(format!(
            "requantize bits must be in [4, 16], got {bits}"
        )));
    }
    let step = 2f64.powi(1 - bits as i32);
    let y = x.iter().map(|v| (v / step).round() * step).collect();
    Ok(Traced::new(y, |g| g.to_vec()))
}

/// Signal-to-noise ratio of the coding-noise stand-in for a given bitrate.
pub fn mp3_proxy_snr_db(kbps: u32) -> f64 {
    20.0 + 10.0 * (kbps as f64 / 64.0).log2()
}

pub fn check_kbps(kbps: u32) -> Result<()> {
    if kbps != 64 && kbps != 128 {
        return Err(Error::Parameter(format!(
            "mp3 bitrate must be 64 or 128 kbps, got {kbps}"
        )));
    }
    Ok(())
}

/// Differentiable stand-in for lossy coding: lowpass at 0.8 of Nyquist, then
/// white noise at a bitrate-dependent SNR. Silence passes through unchanged.
pub fn mp3_proxy(x: &[f64], kbps: u32, sample_rate: u32, seed: u64) -> Result<Traced> {
    check_kbps(kbps)?;
    let lp = lowpass(x, 0.4 * sample_rate as f64, sample_rate)?;
    let ey = energy(&lp.y);
    if ey <= 0.0 {
        return Ok(lp);
    }
    let noisy = scaled_noise(&lp.y, ey, mp3_proxy_snr_db(kbps), seed);
    let (v1, v2) = (lp.vjp, noisy.vjp);
    Ok(Traced::new(noisy.y, move |g| v1(&v2(g))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropPosition {
    Begin,
    Middle,
    End,
    Random,
}

impl CropPosition {
    pub fn as_str(self) -> &'static str {
        match self {
            CropPosition::Begin => "begin",
            CropPosition::Middle => "middle",
            CropPosition::End => "end",
            CropPosition::Random => "random",
        }
    }
}

impl std::str::FromStr for CropPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "begin" => Ok(Self::Begin),
            "middle" => Ok(Self::Middle),
            "end" => Ok(Self::End),
            "random" => Ok(Self::Random),
            other => Err(Error::Parameter(format!("unknown crop position '{other}'"))),
        }
    }
}

/// Keeps the samples at `keep`, in order.
pub fn select(x: &[f64], keep: Vec<usize>) -> Traced {
    let n = x.len();
    let y = keep.iter().map(|&i| x[i]).collect();
    Traced::new(y, move |g| {
        let mut gx = vec![0.0; n];
        for (&i, &v) in keep.iter().zip(g) {
            gx[i] += v;
        }
        gx
    })
}

/// Removes a contiguous span of `round(fraction * M)` samples.
pub fn crop(
    x: &[f64],
    fraction: f64,
    position: CropPosition,
    seed: u64,
    min_len: usize,
) -> Result<Traced> {
    if !(0.0..=0.95).contains(&fraction) {
        return Err(Error::Parameter(format!(
            "crop fraction must be in [0, 0.95], got {fraction}"
        )));
    }
    let m = x.len();
    let cut = (fraction * m as f64).round() as usize;
    let kept = m - cut;
    if kept < min_len {
        return Err(Error::DegenerateOutput(format!(
            "crop leaves {kept} samples, need at least {min_len}"
        )));
    }
    let start = match position {
        CropPosition::Begin => 0,
        CropPosition::Middle => kept / 2,
        CropPosition::End => kept,
        CropPosition::Random => ChaCha8Rng::seed_from_u64(seed).gen_range(0..=kept),
    };
    let keep = (0..start).chain(start + cut..m).collect();
    Ok(select(x, keep))
}

/// Deletes one uniformly chosen sample from every full block of `k`.
pub fn jitter(x: &[f64], k: usize, seed: u64) -> Result<Traced> {
    if k < 2 {
        return Err(Error::Parameter(format!("jitter block must be >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = x.len();
    let mut keep = Vec::with_capacity(m - m / k);
    for block in 0..m / k {
        let drop = block * k + rng.gen_range(0..k);
        keep.extend((block * k..(block + 1) * k).filter(|&i| i != drop));
    }
    keep.extend((m / k) * k..m);
    Ok(select(x, keep))
}
