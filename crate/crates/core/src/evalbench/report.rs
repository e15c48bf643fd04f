use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{acc, pesq_hook, snr_clips};
use crate::audio_io::AudioClip;
use crate::codec::{CodecModel, Message};
use crate::distortion::chain::AttackChain;
use crate::distortion::{AttackSpec, Distorter};
use crate::error::{Error, Result};
use crate::trainer::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub attack: String,
    /// Mean accuracy over scored clips; `None` when the row was skipped.
    pub acc: Option<f64>,
    pub n_clips: usize,
    pub skipped_clips: usize,
    /// Reason the whole attack was skipped, if it was.
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: Option<String>,
    pub seed: u64,
    pub dataset: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub snr_db: f64,
    pub pesq: Option<f64>,
    pub meta: ReportMeta,
}

impl EvalReport {
    pub fn row(&self, attack: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.attack == attack)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let width = self.rows.iter().map(|r| r.attack.len()).max().unwrap_or(6).max(6);
        writeln!(s, "{:<width$}  {:>7}  {:>6}  {:>7}", "attack", "ACC", "clips", "skipped").unwrap();
        for r in &self.rows {
            let acc = match (&r.acc, &r.skipped) {
                (_, Some(_)) => "skipped".to_string(),
                (Some(a), None) => format!("{:.2}%", 100.0 * a),
                (None, None) => "n/a".to_string(),
            };
            writeln!(
                s,
                "{:<width$}  {:>7}  {:>6}  {:>7}",
                r.attack, acc, r.n_clips, r.skipped_clips
            )
            .unwrap();
        }
        writeln!(s, "SNR: {:.2} dB", self.snr_db).unwrap();
        match self.pesq {
            Some(p) => writeln!(s, "PESQ: {p:.2}").unwrap(),
            None => writeln!(s, "PESQ: n/a (no external evaluator configured)").unwrap(),
        }
        for r in &self.rows {
            if let Some(reason) = &r.skipped {
                writeln!(s, "note: {} skipped: {reason}", r.attack).unwrap();
            }
        }
        s
    }

    /// One JSON record per row followed by a summary record.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut emit = |v: serde_json::Value| {
            writeln!(f, "{v}").map_err(|e| Error::io(path, e))
        };
        for r in &self.rows {
            emit(serde_json::json!({ "kind": "row", "row": r }))?;
        }
        emit(serde_json::json!({
            "kind": "summary",
            "snr_db": self.snr_db,
            "pesq": self.pesq,
            "meta": self.meta,
        }))
    }
}

/// Message used for clip `index` under `seed`: pattern plus random payload.
pub fn clip_message(model: &CodecModel, seed: u64, index: usize) -> Message {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64, 11));
    Message::random(cfg.n_bits, cfg.pattern_len, &mut rng)
}

/// Whether an attack failure on one clip should be counted as a skip.
fn per_clip_skip(e: &Error) -> bool {
    matches!(
        e,
        Error::InputTooShort { .. } | Error::DegenerateInput(_) | Error::DegenerateOutput(_)
    )
}

/// Embeds a fresh message into every clip, applies each attack chain and
/// scores the extraction. MP3 uses the real codec and the row is marked
/// skipped when none is installed.
pub fn robustness_table(
    model: &CodecModel,
    clips: &[AudioClip],
    attacks: &[AttackChain],
    seed: u64,
    distorter: &Distorter,
) -> Result<EvalReport> {
    robustness_table_with(model, clips, attacks, seed, distorter, false)
}

/// As [`robustness_table`]; with `mp3_proxy` the MP3 stages use the training
/// proxy and their rows are labelled `(proxy)`.
pub fn robustness_table_with(
    model: &CodecModel,
    clips: &[AudioClip],
    attacks: &[AttackChain],
    seed: u64,
    distorter: &Distorter,
    mp3_proxy: bool,
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut marked = Vec::with_capacity(clips.len());
    let mut snr_sum = 0.0;
    let mut pesq_sum = 0.0;
    let mut pesq_ok = true;
    for (i, clip) in clips.iter().enumerate() {
        let msg = clip_message(model, seed, i);
        let aw = model.embed(clip, &msg)?;
        snr_sum += snr_clips(clip, &aw)?;
        if pesq_ok {
            match pesq_hook(clip, &aw) {
                Some(p) => pesq_sum += p,
                None => pesq_ok = false,
            }
        }
        marked.push((msg, aw));
    }
    let mut rows = Vec::with_capacity(attacks.len());
    for (ai, chain) in attacks.iter().enumerate() {
        let mut sum = 0.0;
        let mut scored = 0;
        let mut skipped = 0;
        let mut row_skip = None;
        for (i, (msg, aw)) in marked.iter().enumerate() {
            let s = derive_seed(seed, i as u64, 100 + ai as u64);
            match distorter.apply_chain(chain, aw, s, !mp3_proxy) {
                Ok(attacked) => match model.extract(&attacked) {
                    Ok((bits, _)) => {
                        sum += acc(&bits, msg)?;
                        scored += 1;
                    }
                    Err(e) if per_clip_skip(&e) => skipped += 1,
                    Err(e) => return Err(e),
                },
                Err(Error::Unavailable(reason)) => {
                    row_skip = Some(reason);
                    break;
                }
                Err(e) if per_clip_skip(&e) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        let uses_mp3 = chain.0.iter().any(|a| matches!(a, AttackSpec::Mp3 { .. }));
        let label = if mp3_proxy && uses_mp3 {
            format!("{chain} (proxy)")
        } else {
            chain.to_string()
        };
        rows.push(match row_skip {
            Some(reason) => ReportRow {
                attack: label.clone(),
                acc: None,
                n_clips: 0,
                skipped_clips: clips.len(),
                skipped: Some(reason),
            },
            None => ReportRow {
                attack: label.clone(),
                acc: (scored > 0).then(|| sum / scored as f64),
                n_clips: scored,
                skipped_clips: skipped,
                skipped: None,
            },
        });
    }
    Ok(EvalReport {
        rows,
        snr_db: snr_sum / clips.len() as f64,
        pesq: pesq_ok.then(|| pesq_sum / clips.len() as f64),
        meta: ReportMeta {
            checkpoint: None,
            seed,
            dataset: String::new(),
        },
    })
}
