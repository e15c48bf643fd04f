use std::path::PathBuf;
use std::process::Command;

use crate::audio_io::{resample_clip, save_audio, AudioClip};
use crate::codec::Message;
use crate::error::{Error, Result};

/// Reported SNR when the two signals are identical.
pub const SNR_CAP_DB: f64 = 100.0;

/// Environment variable naming an external PESQ evaluator. It is invoked as
/// `<tool> <reference.wav> <degraded.wav>` on 16 kHz files and must print
/// the score as the last whitespace-separated token of its output.
pub const PESQ_ENV: &str = "SYNCGUARD_PESQ";

/// Fraction of matching bits.
pub fn acc(recovered: &Message, original: &Message) -> Result<f64> {
    acc_bits(recovered.bits(), original.bits())
}

pub fn acc_bits(recovered: &[u8], original: &[u8]) -> Result<f64> {
    if recovered.len() != original.len() || original.is_empty() {
        return Err(Error::Contract(format!(
            "cannot compare {} recovered bits with {} original bits",
            recovered.len(),
            original.len()
        )));
    }
    let same = recovered.iter().zip(original).filter(|(a, b)| a == b).count();
    Ok(same as f64 / original.len() as f64)
}

/// `10·log10(Σa² / Σ(a_w − a)²)`, capped at [`SNR_CAP_DB`].
pub fn snr(a: &[f32], a_w: &[f32]) -> Result<f64> {
    if a.len() != a_w.len() {
        return Err(Error::Contract(format!(
            "snr of signals with {} and {} samples",
            a.len(),
            a_w.len()
        )));
    }
    let signal: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum();
    if signal == 0.0 {
        return Err(Error::DegenerateInput("snr reference has zero energy".into()));
    }
    let noise: f64 = a
        .iter()
        .zip(a_w)
        .map(|(&x, &y)| (y as f64 - x as f64).powi(2))
        .sum();
    if noise == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (signal / noise).log10()).min(SNR_CAP_DB))
}

pub fn snr_clips(a: &AudioClip, a_w: &AudioClip) -> Result<f64> {
    snr(a.samples(), a_w.samples())
}

/// PESQ through the external tool named by [`PESQ_ENV`]. `None` when the
/// tool is not configured or fails; a score is never invented.
pub fn pesq_hook(a: &AudioClip, a_w: &AudioClip) -> Option<f64> {
    let tool = std::env::var_os(PESQ_ENV).map(PathBuf::from)?;
    let run = || -> Result<f64> {
        let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
        let ref_path = dir.path().join("ref.wav");
        let deg_path = dir.path().join("deg.wav");
        save_audio(&resample_clip(a, 16_000)?, &ref_path)?;
        save_audio(&resample_clip(a_w, 16_000)?, &deg_path)?;
        let out = Command::new(&tool)
            .arg(&ref_path)
            .arg(&deg_path)
            .output()
            .map_err(|e| Error::io(&tool, e))?;
        if !out.status.success() {
            return Err(Error::Unavailable("PESQ tool failed".into()));
        }
        String::from_utf8_lossy(&out.stdout)
            .split_whitespace()
            .last()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Unavailable("PESQ tool printed no score".into()))
    };
    match run() {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("PESQ unavailable: {e}");
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc_cases() {
        let a = Message::new(vec![1, 0, 1, 1], 0).unwrap();
        assert_eq!(acc(&a, &a).unwrap(), 1.0);
        assert_eq!(acc(&a.complement(), &a).unwrap(), 0.0);
        let b = Message::new(vec![1, 0, 0, 0], 0).unwrap();
        assert_eq!(acc(&a, &b).unwrap(), 0.5);
        assert!(acc_bits(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn snr_cases() {
        let a: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.01).sin()).collect();
        let aw: Vec<f32> = a.iter().map(|x| x + x / 10.0).collect();
        assert!((snr(&a, &aw).unwrap() - 20.0).abs() < 1e-4);
        assert_eq!(snr(&a, &a).unwrap(), SNR_CAP_DB);
        assert!(matches!(snr(&[0.0; 4], &[1.0; 4]), Err(Error::DegenerateInput(_))));
        assert!(snr(&a, &a[1..]).is_err());
    }

    #[test]
    fn pesq_absent_is_none() {
        if std::env::var_os(PESQ_ENV).is_none() {
            let c = AudioClip::silence(100, 16_000);
            assert_eq!(pesq_hook(&c, &c), None);
        }
    }
}
