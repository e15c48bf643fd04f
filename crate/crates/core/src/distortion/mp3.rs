//! Real MP3 round trip through an external `ffmpeg`, for evaluation only.

use std::path::Path;
use std::process::{Command, Stdio};

use crate::audio_io::{load_audio, save_audio, AudioClip};
use crate::error::{Error, Result};

/// Executable used for encoding; overridable through the environment.
pub const ENCODER_ENV: &str = "SYNCGUARD_FFMPEG";

fn encoder() -> String {
    std::env::var(ENCODER_ENV).unwrap_or_else(|_| "ffmpeg".into())
}

pub fn codec_available() -> bool {
    Command::new(encoder())
        .arg("-version")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .is_ok_and(|s| s.success())
}

fn run(args: &[&std::ffi::OsStr]) -> Result<()> {
    let status = Command::new(encoder())
        .args(args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map_err(|e| Error::Unavailable(format!("mp3 encoder: {e}")))?;
    if !status.success() {
        return Err(Error::Unavailable(format!("mp3 encoder exited with {status}")));
    }
    Ok(())
}

/// Lag in `[0, max_lag]` maximizing the correlation of `decoded[lag..]`
/// with `reference`.
pub fn best_lag(reference: &[f32], decoded: &[f32], max_lag: usize) -> usize {
    let window = reference.len().min(8192);
    (0..=max_lag.min(decoded.len().saturating_sub(1)))
        .max_by(|&a, &b| {
            let score = |lag: usize| -> f64 {
                reference[..window]
                    .iter()
                    .zip(decoded.iter().skip(lag))
                    .map(|(&r, &d)| r as f64 * d as f64)
                    .sum()
            };
            score(a).total_cmp(&score(b))
        })
        .unwrap_or(0)
}

/// Shifts `decoded` by `lag` and pads or trims it to `len`.
pub fn realign(decoded: &[f32], lag: usize, len: usize) -> Vec<f32> {
    let mut out: Vec<f32> = decoded.iter().skip(lag).take(len).copied().collect();
    out.resize(len, 0.0);
    out
}

/// Encodes at `kbps`, decodes, and realigns to the input length.
pub fn codec_round_trip(clip: &AudioClip, kbps: u32) -> Result<AudioClip> {
    if !codec_available() {
        return Err(Error::Unavailable("no mp3 encoder found".into()));
    }
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let wav_in = dir.path().join("in.wav");
    let mp3 = dir.path().join("coded.mp3");
    let wav_out = dir.path().join("out.wav");
    save_audio(clip, &wav_in)?;
    let rate = format!("{kbps}k");
    let os = |p: &Path| p.as_os_str().to_owned();
    run(&[
        "-y".as_ref(),
        "-i".as_ref(),
        &os(&wav_in),
        "-b:a".as_ref(),
        rate.as_ref(),
        &os(&mp3),
    ])?;
    run(&["-y".as_ref(), "-i".as_ref(), &os(&mp3), &os(&wav_out)])?;
    let decoded = load_audio(&wav_out, clip.sample_rate())?;
    let lag = best_lag(clip.samples(), decoded.samples(), 4096);
    AudioClip::new(realign(decoded.samples(), lag, clip.len()), clip.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn realign_recovers_delay() {
        let reference: Vec<f32> = (0..3000).map(|i| ((i * 7919) % 211) as f32 / 105.0 - 1.0).collect();
        let mut decoded = vec![0.0; 577];
        decoded.extend_from_slice(&reference);
        let lag = best_lag(&reference, &decoded, 1000);
        assert_eq!(lag, 577);
        assert_eq!(realign(&decoded, lag, reference.len()), reference);
        assert_eq!(realign(&decoded, 0, 10).len(), 10);
    }
}
