use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{acc, snr_clips};
use super::report::clip_message;
use crate::audio_io::AudioClip;
use crate::codec::{CodecModel, MacCounts, Message, ParamCounts};
use crate::distortion::signal::CropPosition;
use crate::distortion::{AttackSpec, Distorter};
use crate::error::{Error, Result};
use crate::trainer::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRow {
    pub position: String,
    pub fraction: f64,
    pub acc: Option<f64>,
    pub n_clips: usize,
    pub skipped_clips: usize,
}

/// Accuracy over a grid of crop positions and fractions.
pub fn crop_position_study(
    model: &CodecModel,
    clips: &[AudioClip],
    fractions: &[f64],
    positions: &[CropPosition],
    seed: u64,
    distorter: &Distorter,
) -> Result<Vec<CropRow>> {
    if clips.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let marked: Vec<(Message, AudioClip)> = clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let m = clip_message(model, seed, i);
            model.embed(c, &m).map(|aw| (m, aw))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &position in positions {
        for &fraction in fractions {
            let attack = AttackSpec::Crop { fraction, position };
            attack.validate()?;
            let (mut sum, mut n, mut skipped) = (0.0, 0, 0);
            for (i, (m, aw)) in marked.iter().enumerate() {
                let s = derive_seed(seed, i as u64, 200);
                match distorter.apply(&attack, aw, s).and_then(|x| model.extract(&x)) {
                    Ok((bits, _)) => {
                        sum += acc(&bits, m)?;
                        n += 1;
                    }
                    Err(Error::InputTooShort { .. }) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            rows.push(CropRow {
                position: position.as_str().to_string(),
                fraction,
                acc: (n > 0).then(|| sum / n as f64),
                n_clips: n,
                skipped_clips: skipped,
            });
        }
    }
    Ok(rows)
}

pub fn crop_rows_csv(rows: &[CropRow]) -> String {
    let mut s = String::from("position,fraction,acc,n_clips,skipped_clips\n");
    for r in rows {
        let acc = r.acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        writeln!(s, "{},{},{},{},{}", r.position, r.fraction, acc, r.n_clips, r.skipped_clips).unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    pub offset_seconds: f64,
    pub start_sample: usize,
    pub bits: String,
    pub pattern_ok: bool,
}

/// Number of windows of `window` seconds at `stride` spacing in `duration`.
pub fn window_count(duration: f64, window: f64, stride: f64) -> usize {
    if duration < window {
        0
    } else {
        ((duration - window) / stride + 1e-9).floor() as usize + 1
    }
}

/// Extraction on every window of a sliding scan.
pub fn sliding_extract(
    clip: &AudioClip,
    model: &CodecModel,
    window_seconds: f64,
    stride_seconds: f64,
) -> Result<Vec<WindowResult>> {
    if !(stride_seconds > 0.0 && window_seconds > 0.0) {
        return Err(Error::Parameter("window and stride must be positive".into()));
    }
    let sr = clip.sample_rate() as f64;
    let win = (window_seconds * sr).round() as usize;
    if win < model.min_samples() {
        return Err(Error::InputTooShort {
            got: win,
            need: model.min_samples(),
        });
    }
    if clip.len() < win {
        return Err(Error::InputTooShort {
            got: clip.len(),
            need: win,
        });
    }
    let count = window_count(clip.duration_secs(), window_seconds, stride_seconds);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = ((i as f64 * stride_seconds * sr).round() as usize).min(clip.len() - win);
        let (bits, _) = model.extract(&clip.slice(start, win)?)?;
        out.push(WindowResult {
            offset_seconds: start as f64 / sr,
            start_sample: start,
            bits: bits.to_bit_string(),
            pattern_ok: bits.pattern_ok(),
        });
    }
    Ok(out)
}

/// First window whose pattern bits validate.
pub fn detect(windows: &[WindowResult]) -> Option<&WindowResult> {
    windows.iter().find(|w| w.pattern_ok)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationTrace {
    pub offsets: Vec<f64>,
    pub acc_at_offset: Vec<f64>,
    pub pattern_rate: Vec<f64>,
    pub window_seconds: f64,
    pub stride_seconds: f64,
}

impl LocalizationTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("offset_seconds,acc,pattern_rate\n");
        for ((o, a), p) in self.offsets.iter().zip(&self.acc_at_offset).zip(&self.pattern_rate) {
            writeln!(s, "{o:.4},{a:.6},{p:.6}").unwrap();
        }
        s
    }
}

/// Embeds a watermark into one window of each host clip (placed in the
/// middle) and scores extraction from windows shifted by each offset in
/// `[-max_offset, max_offset]` at `stride_seconds` spacing.
pub fn localization_trace(
    model: &CodecModel,
    hosts: &[AudioClip],
    window_seconds: f64,
    stride_seconds: f64,
    max_offset: f64,
    seed: u64,
) -> Result<LocalizationTrace> {
    if !(stride_seconds > 0.0) || max_offset < 0.0 {
        return Err(Error::Parameter("stride must be positive and max_offset >= 0".into()));
    }
    if hosts.is_empty() {
        return Err(Error::Config("no host clips".into()));
    }
    let steps = (max_offset / stride_seconds + 1e-9).floor() as i64;
    let offsets: Vec<f64> = (-steps..=steps).map(|k| k as f64 * stride_seconds).collect();
    let mut acc_sum = vec![0.0; offsets.len()];
    let mut pat_sum = vec![0.0; offsets.len()];
    let mut counts = vec![0usize; offsets.len()];
    for (i, host) in hosts.iter().enumerate() {
        let sr = host.sample_rate() as f64;
        let win = (window_seconds * sr).round() as usize;
        let insert = host.len().saturating_sub(win) / 2;
        if host.len() < win {
            return Err(Error::InputTooShort {
                got: host.len(),
                need: win,
            });
        }
        let msg = clip_message(model, seed, i);
        let marked = model.embed(&host.slice(insert, win)?, &msg)?;
        let mut samples = host.samples().to_vec();
        samples[insert..insert + win].copy_from_slice(marked.samples());
        let full = AudioClip::new(samples, host.sample_rate())?;
        for (k, &o) in offsets.iter().enumerate() {
            let start = insert as i64 + (o * sr).round() as i64;
            if start < 0 || start as usize + win > full.len() {
                continue;
            }
            let (bits, _) = model.extract(&full.slice(start as usize, win)?)?;
            acc_sum[k] += acc(&bits, &msg)?;
            pat_sum[k] += f64::from(u8::from(bits.pattern_ok()));
            counts[k] += 1;
        }
    }
    let avg = |v: Vec<f64>| -> Vec<f64> {
        v.iter()
            .zip(&counts)
            .map(|(s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
            .collect()
    };
    Ok(LocalizationTrace {
        offsets,
        acc_at_offset: avg(acc_sum),
        pattern_rate: avg(pat_sum),
        window_seconds,
        stride_seconds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub n_bits: usize,
    pub acc: f64,
    pub snr_db: f64,
    pub n_clips: usize,
}

/// Clean accuracy and SNR for each model.
pub fn capacity_sweep(models: &[CodecModel], clips: &[AudioClip], seed: u64) -> Result<Vec<CapacityRow>> {
    if clips.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    models
        .iter()
        .map(|model| {
            let (mut a, mut s) = (0.0, 0.0);
            for (i, c) in clips.iter().enumerate() {
                let m = clip_message(model, seed, i);
                let aw = model.embed(c, &m)?;
                s += snr_clips(c, &aw)?;
                a += acc(&model.extract(&aw)?.0, &m)?;
            }
            let n = clips.len() as f64;
            Ok(CapacityRow {
                n_bits: model.n_bits(),
                acc: a / n,
                snr_db: s / n,
                n_clips: clips.len(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub params: ParamCounts,
    /// Multiply-accumulates per second of audio.
    pub macs_per_second: MacCounts,
    pub embed_ms_per_second: f64,
    pub extract_ms_per_second: f64,
    pub runs: usize,
    pub clip_seconds: f64,
}

impl EfficiencyReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        let m = &self.macs_per_second;
        writeln!(s, "{:<14} {:>12} {:>16} {:>12}", "network", "params", "MACs per sec", "ms per sec").unwrap();
        writeln!(s, "{:<14} {:>12} {:>16} {:>12.2}", "encoder", p.encoder, m.encoder, self.embed_ms_per_second).unwrap();
        writeln!(s, "{:<14} {:>12} {:>16} {:>12.2}", "decoder", p.decoder, m.decoder, self.extract_ms_per_second).unwrap();
        writeln!(s, "{:<14} {:>12} {:>16} {:>12}", "discriminator", p.discriminator, m.discriminator, "-").unwrap();
        writeln!(s, "timing: median of {} runs on a {:.1} s clip", self.runs, self.clip_seconds).unwrap();
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Parameter counts, analytic MACs and median wall-clock embed/extract time,
/// all normalized per second of audio.
pub fn efficiency_report(model: &CodecModel, clip: &AudioClip, runs: usize) -> Result<EfficiencyReport> {
    if runs < 20 {
        return Err(Error::Parameter(format!("timing needs at least 20 runs, got {runs}")));
    }
    let secs = clip.duration_secs();
    let sr = clip.sample_rate() as usize;
    let msg = clip_message(model, 0, 0);
    let mut embed_ms = Vec::with_capacity(runs);
    let mut extract_ms = Vec::with_capacity(runs);
    let marked = model.embed(clip, &msg)?;
    for _ in 0..runs {
        let t = Instant::now();
        std::hint::black_box(model.embed(clip, &msg)?);
        embed_ms.push(t.elapsed().as_secs_f64() * 1e3 / secs);
        let t = Instant::now();
        std::hint::black_box(model.extract(&marked)?);
        extract_ms.push(t.elapsed().as_secs_f64() * 1e3 / secs);
    }
    Ok(EfficiencyReport {
        params: model.count_parameters(),
        macs_per_second: model.macs(sr),
        embed_ms_per_second: median(embed_ms),
        extract_ms_per_second: median(extract_ms),
        runs,
        clip_seconds: secs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_count(3.0, 1.0, 0.05), 41);
        assert_eq!(window_count(1.0, 1.0, 0.05), 1);
        assert_eq!(window_count(0.5, 1.0, 0.05), 0);
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
