#![allow(dead_code)]

use std::f64::consts::PI;

use realfft::RealFftPlanner;
use syncguard::audio_io::AudioClip;

pub const SR: u32 = 22050;

pub fn tone(freq: f64, len: usize) -> AudioClip {
    let x: Vec<f64> = (0..len)
        .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / SR as f64).sin())
        .collect();
    AudioClip::from_f64(&x, SR).unwrap()
}

/// Dominant frequency in Hz from a Hann-windowed, zero-padded FFT with
/// parabolic peak interpolation.
pub fn peak_hz(x: &[f32], sample_rate: u32) -> f64 {
    let n = (x.len() * 4).next_power_of_two();
    let mut buf = vec![0.0f64; n];
    let m = x.len();
    for (i, &v) in x.iter().enumerate() {
        let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / m as f64).cos();
        buf[i] = v as f64 * w;
    }
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(n);
    let mut out = fft.make_output_vec();
    fft.process(&mut buf, &mut out).unwrap();
    let mag: Vec<f64> = out.iter().map(|c| c.norm()).collect();
    let k = (1..mag.len() - 1).max_by(|&a, &b| mag[a].total_cmp(&mag[b])).unwrap();
    let (a, b, c) = (mag[k - 1].ln(), mag[k].ln(), mag[k + 1].ln());
    let delta = 0.5 * (a - c) / (a - 2.0 * b + c);
    (k as f64 + delta) * sample_rate as f64 / n as f64
}

/// Energy of `x` above `cutoff_hz`, from a plain FFT.
pub fn band_energy_above(x: &[f32], sample_rate: u32, cutoff_hz: f64) -> f64 {
    let n = x.len();
    let mut buf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(n);
    let mut out = fft.make_output_vec();
    fft.process(&mut buf, &mut out).unwrap();
    out.iter()
        .enumerate()
        .filter(|(k, _)| *k as f64 * sample_rate as f64 / n as f64 > cutoff_hz)
        .map(|(_, c)| c.norm_sqr())
        .sum()
}

pub fn energy(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64 * v as f64).sum()
}

pub fn snr_db(a: &[f32], b: &[f32]) -> f64 {
    let s = energy(a);
    let n: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    10.0 * (s / n).log10()
}
