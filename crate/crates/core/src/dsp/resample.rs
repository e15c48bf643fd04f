//! Band-limited resampling by windowed-sinc interpolation.
//!
//! Output sample `m` of a resampling from `n_in` to `n_out` samples sits at
//! source position `u = m * n_in / n_out`. Its value is a Blackman-windowed
//! sinc sum over neighbouring input samples, with the cutoff lowered to the
//! output Nyquist when downsampling. The map is linear in the input, so the
//! adjoint scatters with the same taps.

use std::f64::consts::PI;

/// Zero crossings of the sinc kernel on each side, at unit cutoff.
const ZERO_CROSSINGS: f64 = 16.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window on `t` in `[-1, 1]`.
fn blackman(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        0.0
    } else {
        0.42 + 0.5 * (PI * t).cos() + 0.08 * (2.0 * PI * t).cos()
    }
}

fn for_each_tap(n_in: usize, n_out: usize, mut f: impl FnMut(usize, usize, f64)) {
    let step = n_in as f64 / n_out as f64;
    let fc = (n_out as f64 / n_in as f64).min(1.0);
    let half = ZERO_CROSSINGS / fc;
    for m in 0..n_out {
        let u = m as f64 * step;
        let lo = (u - half).ceil().max(0.0) as usize;
        let hi = ((u + half).floor() as usize).min(n_in - 1);
        for n in lo..=hi {
            let d = u - n as f64;
            let w = fc * sinc(fc * d) * blackman(d / half);
            if w != 0.0 {
                f(m, n, w);
            }
        }
    }
}

/// Resamples `x` to exactly `out_len` samples.
pub fn resample_to_len(x: &[f64], out_len: usize) -> Vec<f64> {
    if out_len == x.len() {
        return x.to_vec();
    }
    let mut y = vec![0.0; out_len];
    if x.is_empty() {
        return y;
    }
    for_each_tap(x.len(), out_len, |m, n, w| y[m] += w * x[n]);
    y
}

/// Adjoint of [`resample_to_len`] from an `in_len`-sample input.
pub fn resample_to_len_vjp(grad: &[f64], in_len: usize) -> Vec<f64> {
    if grad.len() == in_len {
        return grad.to_vec();
    }
    let mut gx = vec![0.0; in_len];
    if in_len == 0 {
        return gx;
    }
    for_each_tap(in_len, grad.len(), |m, n, w| gx[n] += w * grad[m]);
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, sr: f64, len: usize) -> Vec<f64> {
        (0..len).map(|i| (2.0 * PI * freq * i as f64 / sr).sin()).collect()
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (n_in, n_out) in [(300, 240), (240, 300), (500, 123)] {
            let x: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = resample_to_len(&x, n_out);
            let gx = resample_to_len_vjp(&g, n_in);
            let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn upsampled_tone_keeps_frequency() {
        // 100 Hz at 1 kHz, upsampled to 2 kHz: compare interior samples.
        let x = tone(100.0, 1000.0, 1000);
        let y = resample_to_len(&x, 2000);
        let expect = tone(100.0, 2000.0, 2000);
        let err = (200..1800).map(|i| (y[i] - expect[i]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "max interior error {err}");
    }
}
