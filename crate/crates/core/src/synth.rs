//! Synthetic speech-like signals for smoke tests and demos: voiced syllables
//! with a gliding pitch, formant-shaped harmonics, unvoiced noise bursts and
//! a faint noise floor.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio_io::AudioClip;

struct Syllable {
    start: usize,
    len: usize,
    voiced: bool,
    f0: (f64, f64),
    formants: [(f64, f64); 3],
}

pub fn speech_like(seed: u64, len: usize, sample_rate: u32) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let base_f0 = rng.gen_range(90.0..240.0);

    let mut syllables = Vec::new();
    let mut t = (rng.gen_range(0.0..0.08) * sr) as usize;
    while t < len {
        let dur = (rng.gen_range(0.08..0.28) * sr) as usize;
        let f0a = base_f0 * rng.gen_range(0.85..1.2);
        syllables.push(Syllable {
            start: t,
            len: dur,
            voiced: rng.gen_bool(0.8),
            f0: (f0a, f0a * rng.gen_range(0.85..1.15)),
            formants: [
                (rng.gen_range(300.0..900.0), rng.gen_range(60.0..140.0)),
                (rng.gen_range(900.0..2400.0), rng.gen_range(80.0..200.0)),
                (rng.gen_range(2200.0..3500.0), rng.gen_range(120.0..260.0)),
            ],
        });
        t += dur + (rng.gen_range(0.0..0.06) * sr) as usize;
    }

    let mut out = vec![0.0f64; len];
    for syl in &syllables {
        let end = (syl.start + syl.len).min(len);
        let n = syl.len as f64;
        let envelope = |i: usize| (PI * (i - syl.start) as f64 / n).sin().powf(0.7);
        if syl.voiced {
            let mut phase = rng.gen_range(0.0..2.0 * PI);
            let max_h = ((0.45 * sr) / syl.f0.0.max(syl.f0.1)) as usize;
            let gains: Vec<(f64, f64)> = (1..=max_h.min(60))
                .map(|h| {
                    let f = h as f64 * syl.f0.0;
                    let shape: f64 = syl
                        .formants
                        .iter()
                        .map(|&(c, bw)| (-((f - c) / bw).powi(2)).exp())
                        .sum();
                    let tilt = 1.0 / (h as f64).sqrt();
                    ((shape + 0.03) * tilt, rng.gen_range(0.0..2.0 * PI))
                })
                .collect();
            for i in syl.start..end {
                let frac = (i - syl.start) as f64 / n;
                let f0 = syl.f0.0 + (syl.f0.1 - syl.f0.0) * frac;
                phase += 2.0 * PI * f0 / sr;
                let mut v = 0.0;
                for (h, &(gain, off)) in gains.iter().enumerate() {
                    v += gain * ((h + 1) as f64 * phase + off).sin();
                }
                out[i] += 0.3 * v * envelope(i);
            }
        } else {
            // Fricative: first-difference (highpass) noise.
            let mut prev = 0.0;
            for i in syl.start..end {
                let w: f64 = rng.sample(StandardNormal);
                out[i] += 0.08 * (w - 0.7 * prev) * envelope(i);
                prev = w;
            }
        }
    }
    for v in &mut out {
        let w: f64 = rng.sample(StandardNormal);
        *v += 1e-3 * w;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let target = rng.gen_range(0.3..0.8);
    for v in &mut out {
        *v *= target / peak;
    }
    AudioClip::from_f64(&out, sample_rate).expect("finite samples")
}

/// `count` clips with seeds `seed, seed + 1, ...`.
pub fn corpus(seed: u64, count: usize, len: usize, sample_rate: u32) -> Vec<AudioClip> {
    (0..count)
        .map(|i| speech_like(seed.wrapping_add(i as u64), len, sample_rate))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = speech_like(3, 22050, 22050);
        let b = speech_like(3, 22050, 22050);
        assert_eq!(a, b);
        assert_ne!(a, speech_like(4, 22050, 22050));
        let peak = a.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(peak > 0.29 && peak <= 0.8);
    }
}
