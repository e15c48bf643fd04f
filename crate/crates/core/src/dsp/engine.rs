//! Complex STFT/ISTFT on `f64` buffers with hand-derived adjoints.

use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use super::StftConfig;
use crate::error::Result;

/// Window-square sums below this are treated as uncovered samples.
const WSUM_FLOOR: f64 = 1e-10;

/// Complex spectrogram, `frames x bins`, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            re: vec![0.0; frames * bins],
            im: vec![0.0; frames * bins],
        }
    }

    pub fn from_polar(frames: usize, bins: usize, magnitude: &[f64], phase: &[f64]) -> Self {
        let (re, im) = magnitude
            .iter()
            .zip(phase)
            .map(|(&s, &p)| (s * p.cos(), s * p.sin()))
            .unzip();
        Self {
            frames,
            bins,
            re,
            im,
        }
    }

    pub fn to_polar(&self) -> (Vec<f64>, Vec<f64>) {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| (r.hypot(i), i.atan2(r)))
            .unzip()
    }
}

/// Planned transforms plus the analysis window for one [`StftConfig`].
#[derive(Clone)]
pub struct StftEngine {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for StftEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftEngine").field("cfg", &self.cfg).finish()
    }
}

impl StftEngine {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            window: cfg.window(),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    fn pad(&self) -> usize {
        self.cfg.fft_size / 2
    }

    fn rfft(&self, buf: &mut [f64], out: &mut [Complex<f64>]) {
        self.forward
            .process(buf, out)
            .expect("buffer sizes match the plan");
    }

    fn irfft(&self, spec: &mut [Complex<f64>], out: &mut [f64]) {
        let last = spec.len() - 1;
        spec[0].im = 0.0;
        spec[last].im = 0.0;
        self.inverse
            .process(spec, out)
            .expect("buffer sizes match the plan");
    }

    /// Index into `x` (length `m`) for padded position `i`.
    fn reflect(&self, i: usize, m: usize) -> usize {
        let j = i as isize - self.pad() as isize;
        let last = m as isize - 1;
        let r = if j < 0 {
            -j
        } else if j > last {
            2 * last - j
        } else {
            j
        };
        r as usize
    }

    pub fn analyze(&self, x: &[f64]) -> Result<Spectrum> {
        self.cfg.check_len(x.len())?;
        let n = self.cfg.fft_size;
        let hop = self.cfg.hop_length;
        let frames = self.cfg.n_frames(x.len());
        let bins = self.cfg.n_bins();
        let mut spec = Spectrum::zeros(frames, bins);
        let mut buf = vec![0.0; n];
        let mut out = vec![Complex::default(); bins];
        for t in 0..frames {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = x[self.reflect(t * hop + k, x.len())] * self.window[k];
            }
            self.rfft(&mut buf, &mut out);
            let row = t * bins;
            for (k, c) in out.iter().enumerate() {
                spec.re[row + k] = c.re;
                spec.im[row + k] = c.im;
            }
        }
        Ok(spec)
    }

    /// Gradient of a loss with respect to the input samples, given its
    /// gradient with respect to the real and imaginary parts of `analyze(x)`.
    pub fn analyze_vjp(&self, grad: &Spectrum, len: usize) -> Vec<f64> {
        let n = self.cfg.fft_size;
        let hop = self.cfg.hop_length;
        let bins = grad.bins;
        let mut gx = vec![0.0; len];
        let mut spec = vec![Complex::default(); bins];
        let mut frame = vec![0.0; n];
        for t in 0..grad.frames {
            let row = t * bins;
            for k in 0..bins {
                let g = Complex::new(grad.re[row + k], grad.im[row + k]);
                spec[k] = if k == 0 || k == bins - 1 {
                    Complex::new(g.re, 0.0)
                } else {
                    g * 0.5
                };
            }
            self.irfft(&mut spec, &mut frame);
            for (k, &v) in frame.iter().enumerate() {
                gx[self.reflect(t * hop + k, len)] += v * self.window[k];
            }
        }
        gx
    }

    fn window_sum(&self, frames: usize) -> Vec<f64> {
        let n = self.cfg.fft_size;
        let hop = self.cfg.hop_length;
        let mut wsum = vec![0.0; (frames - 1) * hop + n];
        for t in 0..frames {
            for (k, &w) in self.window.iter().enumerate() {
                wsum[t * hop + k] += w * w;
            }
        }
        wsum
    }

    pub fn synthesize(&self, spec: &Spectrum, length: usize) -> Vec<f64> {
        let n = self.cfg.fft_size;
        let hop = self.cfg.hop_length;
        let bins = spec.bins;
        let wsum = self.window_sum(spec.frames);
        let mut acc = vec![0.0; wsum.len()];
        let mut buf = vec![Complex::default(); bins];
        let mut frame = vec![0.0; n];
        let scale = 1.0 / n as f64;
        for t in 0..spec.frames {
            let row = t * bins;
            for k in 0..bins {
                buf[k] = Complex::new(spec.re[row + k], spec.im[row + k]);
            }
            self.irfft(&mut buf, &mut frame);
            for (k, &v) in frame.iter().enumerate() {
                acc[t * hop + k] += v * scale * self.window[k];
            }
        }
        let pad = self.pad();
        (0..length)
            .map(|i| match (acc.get(i + pad), wsum.get(i + pad)) {
                (Some(&a), Some(&w)) if w > WSUM_FLOOR => a / w,
                _ => 0.0,
            })
            .collect()
    }

    /// Gradient with respect to the real and imaginary parts of the
    /// synthesized spectrum, given the gradient of the output samples.
    pub fn synthesize_vjp(&self, grad: &[f64], frames: usize) -> Spectrum {
        let n = self.cfg.fft_size;
        let hop = self.cfg.hop_length;
        let bins = self.cfg.n_bins();
        let wsum = self.window_sum(frames);
        let pad = self.pad();
        let mut gacc = vec![0.0; wsum.len()];
        for (i, &g) in grad.iter().enumerate() {
            if let Some(&w) = wsum.get(i + pad) {
                if w > WSUM_FLOOR {
                    gacc[i + pad] = g / w;
                }
            }
        }
        let mut out = Spectrum::zeros(frames, bins);
        let mut buf = vec![0.0; n];
        let mut spec = vec![Complex::default(); bins];
        let scale = 1.0 / n as f64;
        for t in 0..frames {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = gacc[t * hop + k] * self.window[k];
            }
            self.rfft(&mut buf, &mut spec);
            let row = t * bins;
            for (k, c) in spec.iter().enumerate() {
                let edge = k == 0 || k == bins - 1;
                let ck = if edge { scale } else { 2.0 * scale };
                out.re[row + k] = ck * c.re;
                out.im[row + k] = if edge { 0.0 } else { ck * c.im };
            }
        }
        out
    }
}

/// Gradient through `(re, im) -> |z|`, given `d|z|`.
pub fn magnitude_vjp(spec: &Spectrum, grad_mag: &[f64]) -> Spectrum {
    let mut out = Spectrum::zeros(spec.frames, spec.bins);
    for i in 0..grad_mag.len() {
        let (r, im) = (spec.re[i], spec.im[i]);
        let m = r.hypot(im);
        if m > 0.0 {
            out.re[i] = grad_mag[i] * r / m;
            out.im[i] = grad_mag[i] * im / m;
        }
    }
    out
}

/// Gradient through `(re, im) -> (|z|, arg z)`, given both output gradients.
pub fn polar_vjp(spec: &Spectrum, grad_mag: &[f64], grad_phase: &[f64]) -> Spectrum {
    let mut out = magnitude_vjp(spec, grad_mag);
    for i in 0..grad_phase.len() {
        let (r, im) = (spec.re[i], spec.im[i]);
        let m2 = r * r + im * im;
        if m2 > 0.0 {
            out.re[i] -= grad_phase[i] * im / m2;
            out.im[i] += grad_phase[i] * r / m2;
        }
    }
    out
}

/// Gradient through `(s, p) -> (s cos p, s sin p)`, given the gradient of
/// the Cartesian parts. Returns `(d s, d p)`.
pub fn from_polar_vjp(magnitude: &[f64], phase: &[f64], grad: &Spectrum) -> (Vec<f64>, Vec<f64>) {
    (0..magnitude.len())
        .map(|i| {
            let (c, s) = (phase[i].cos(), phase[i].sin());
            let ds = grad.re[i] * c + grad.im[i] * s;
            let dp = magnitude[i] * (grad.im[i] * c - grad.re[i] * s);
            (ds, dp)
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> StftConfig {
        StftConfig {
            fft_size: 64,
            hop_length: 16,
            window_length: 64,
            window_kind: super::super::WindowKind::Hann,
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn analysis_adjoint_identity() {
        let e = StftEngine::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_vec(&mut rng, 200);
        let y = e.analyze(&x).unwrap();
        let g = Spectrum {
            frames: y.frames,
            bins: y.bins,
            re: rand_vec(&mut rng, y.re.len()),
            im: rand_vec(&mut rng, y.im.len()),
        };
        let lhs = dot(&y.re, &g.re) + dot(&y.im, &g.im);
        let rhs = dot(&x, &e.analyze_vjp(&g, x.len()));
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn synthesis_adjoint_identity() {
        let e = StftEngine::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = 13;
        let mut spec = Spectrum {
            frames,
            bins: 33,
            re: rand_vec(&mut rng, frames * 33),
            im: rand_vec(&mut rng, frames * 33),
        };
        // Imaginary DC and Nyquist are ignored by synthesis.
        for t in 0..frames {
            spec.im[t * 33] = 0.0;
            spec.im[t * 33 + 32] = 0.0;
        }
        let len = 190;
        let y = e.synthesize(&spec, len);
        let g = rand_vec(&mut rng, len);
        let adj = e.synthesize_vjp(&g, frames);
        let lhs = dot(&y, &g);
        let rhs = dot(&spec.re, &adj.re) + dot(&spec.im, &adj.im);
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn magnitude_sum_gradient_matches_finite_difference() {
        let e = StftEngine::new(StftConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_vec(&mut rng, 2048);
        let f = |x: &[f64]| -> f64 { e.analyze(x).unwrap().to_polar().0.iter().sum() };
        let spec = e.analyze(&x).unwrap();
        let ones = vec![1.0; spec.re.len()];
        let grad = e.analyze_vjp(&magnitude_vjp(&spec, &ones), x.len());
        let h = 1e-6;
        for _ in 0..5 {
            let i = rng.gen_range(0..x.len());
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-3 * fd.abs().max(1e-3),
                "sample {i}: fd {fd} analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn polar_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = Spectrum {
            frames: 1,
            bins: 8,
            re: rand_vec(&mut rng, 8),
            im: rand_vec(&mut rng, 8),
        };
        let gm = rand_vec(&mut rng, 8);
        let gp = rand_vec(&mut rng, 8);
        let loss = |s: &Spectrum| {
            let (m, p) = s.to_polar();
            dot(&m, &gm) + dot(&p, &gp)
        };
        let g = polar_vjp(&spec, &gm, &gp);
        let h = 1e-6;
        for i in 0..8 {
            let mut a = spec.clone();
            a.re[i] += h;
            let mut b = spec.clone();
            b.re[i] -= h;
            assert!(((loss(&a) - loss(&b)) / (2.0 * h) - g.re[i]).abs() < 1e-5);
            let mut a = spec.clone();
            a.im[i] += h;
            let mut b = spec.clone();
            b.im[i] -= h;
            assert!(((loss(&a) - loss(&b)) / (2.0 * h) - g.im[i]).abs() < 1e-5);
        }
    }
}
