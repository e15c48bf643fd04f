//! Attacks for training (differentiable) and evaluation.
//!
//! Every attack is implemented on `f64` samples and returns a [`Traced`]
//! value carrying its vector-Jacobian product, so the same code serves the
//! plain [`Distorter::apply`] path and the graph-recording
//! [`Distorter::apply_graph`] path used inside training.

pub mod chain;
pub mod mp3;
pub mod sampler;
pub mod signal;
pub mod tsm;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use syncguard_nn::{Graph, Var};

use crate::audio_io::AudioClip;
use crate::dsp::ops::custom_map;
use crate::dsp::{StftConfig, StftEngine};
use crate::error::{Error, Result};

pub use chain::{AttackChain, AttackTemplate, Value};
pub use sampler::{AttackSampler, Level, PoolEntry, SamplerConfig};
pub use signal::{CropPosition, Traced};
pub use tsm::{timewarp_spectrogram, PhaseMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Identity,
    Tsm,
    PitchScale,
    Resample,
    GaussianNoise,
    Mp3,
    Amplitude,
    Requantize,
    Lowpass,
    Crop,
    Jitter,
}

impl AttackKind {
    /// Name used in the text grammar.
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Identity => "identity",
            AttackKind::Tsm => "tsm",
            AttackKind::PitchScale => "pitch",
            AttackKind::Resample => "resample",
            AttackKind::GaussianNoise => "noise",
            AttackKind::Mp3 => "mp3",
            AttackKind::Amplitude => "amplitude",
            AttackKind::Requantize => "requantize",
            AttackKind::Lowpass => "lowpass",
            AttackKind::Crop => "crop",
            AttackKind::Jitter => "jitter",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "identity" | "none" => AttackKind::Identity,
            "tsm" => AttackKind::Tsm,
            "pitch" | "pitch_scale" => AttackKind::PitchScale,
            "resample" => AttackKind::Resample,
            "noise" | "gaussian_noise" => AttackKind::GaussianNoise,
            "mp3" => AttackKind::Mp3,
            "amplitude" => AttackKind::Amplitude,
            "requantize" => AttackKind::Requantize,
            "lowpass" => AttackKind::Lowpass,
            "crop" => AttackKind::Crop,
            "jitter" => AttackKind::Jitter,
            other => return Err(Error::Parameter(format!("unknown attack '{other}'"))),
        })
    }
}

/// One attack with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AttackSpec {
    Identity,
    /// Duration multiplied by `rate`, pitch preserved.
    Tsm { rate: f64 },
    /// Frequencies multiplied by `ratio`, duration preserved.
    PitchScale { ratio: f64 },
    /// Resampled to `ratio` of the length and back.
    Resample { ratio: f64 },
    GaussianNoise { snr_db: f64 },
    Mp3 { kbps: u32 },
    Amplitude { scale: f64 },
    Requantize { bits: u32 },
    Lowpass { cutoff_hz: f64 },
    Crop { fraction: f64, position: CropPosition },
    Jitter { one_in_k: usize },
}

/// `2^(x / 12)`.
pub fn semitones_to_ratio(semitones: f64) -> f64 {
    2f64.powf(semitones / 12.0)
}

fn take_number(params: &mut BTreeMap<String, Value>, key: &str) -> Result<Option<f64>> {
    match params.remove(key) {
        None => Ok(None),
        Some(Value::Number(v)) => Ok(Some(v)),
        Some(Value::Word(w)) => Err(Error::Parameter(format!(
            "parameter '{key}' must be numeric, got '{w}'"
        ))),
    }
}

fn require(params: &mut BTreeMap<String, Value>, key: &str, attack: &str) -> Result<f64> {
    take_number(params, key)?
        .ok_or_else(|| Error::Parameter(format!("{attack} needs parameter '{key}'")))
}

fn integral(v: f64, key: &str) -> Result<u64> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Parameter(format!(
            "parameter '{key}' must be a non-negative integer, got {v}"
        )));
    }
    Ok(v as u64)
}

impl AttackSpec {
    pub fn kind(&self) -> AttackKind {
        match self {
            AttackSpec::Identity => AttackKind::Identity,
            AttackSpec::Tsm { .. } => AttackKind::Tsm,
            AttackSpec::PitchScale { .. } => AttackKind::PitchScale,
            AttackSpec::Resample { .. } => AttackKind::Resample,
            AttackSpec::GaussianNoise { .. } => AttackKind::GaussianNoise,
            AttackSpec::Mp3 { .. } => AttackKind::Mp3,
            AttackSpec::Amplitude { .. } => AttackKind::Amplitude,
            AttackSpec::Requantize { .. } => AttackKind::Requantize,
            AttackSpec::Lowpass { .. } => AttackKind::Lowpass,
            AttackSpec::Crop { .. } => AttackKind::Crop,
            AttackSpec::Jitter { .. } => AttackKind::Jitter,
        }
    }

    /// Builds an attack from its grammar name and parameters.
    pub fn from_parts(name: &str, params: &BTreeMap<String, Value>) -> Result<Self> {
        let kind = AttackKind::from_name(name)?;
        let mut p = params.clone();
        let n = kind.name();
        let spec = match kind {
            AttackKind::Identity => AttackSpec::Identity,
            AttackKind::Tsm => AttackSpec::Tsm {
                rate: require(&mut p, "rate", n)?,
            },
            AttackKind::PitchScale => {
                let ratio = take_number(&mut p, "ratio")?;
                let semis = take_number(&mut p, "semitones")?;
                match (ratio, semis) {
                    (Some(r), None) => AttackSpec::PitchScale { ratio: r },
                    (None, Some(x)) => {
                        if x.abs() > 12.0 {
                            return Err(Error::Parameter(format!(
                                "pitch shift must be within 12 semitones, got {x}"
                            )));
                        }
                        AttackSpec::PitchScale {
                            ratio: semitones_to_ratio(x),
                        }
                    }
                    _ => {
                        return Err(Error::Parameter(
                            "pitch needs exactly one of 'ratio' or 'semitones'".into(),
                        ))
                    }
                }
            }
            AttackKind::Resample => AttackSpec::Resample {
                ratio: require(&mut p, "ratio", n)?,
            },
            AttackKind::GaussianNoise => AttackSpec::GaussianNoise {
                snr_db: require(&mut p, "snr", n)?,
            },
            AttackKind::Mp3 => AttackSpec::Mp3 {
                kbps: integral(take_number(&mut p, "kbps")?.unwrap_or(64.0), "kbps")? as u32,
            },
            AttackKind::Amplitude => AttackSpec::Amplitude {
                scale: require(&mut p, "scale", n)?,
            },
            AttackKind::Requantize => AttackSpec::Requantize {
                bits: integral(require(&mut p, "bits", n)?, "bits")? as u32,
            },
            AttackKind::Lowpass => AttackSpec::Lowpass {
                cutoff_hz: require(&mut p, "cutoff", n)?,
            },
            AttackKind::Crop => {
                let fraction = require(&mut p, "fraction", n)?;
                let position = match p.remove("position") {
                    None => CropPosition::Random,
                    Some(Value::Word(w)) => w.parse()?,
                    Some(Value::Number(v)) => {
                        return Err(Error::Parameter(format!("bad crop position {v}")))
                    }
                };
                AttackSpec::Crop { fraction, position }
            }
            AttackKind::Jitter => AttackSpec::Jitter {
                one_in_k: integral(take_number(&mut p, "k")?.unwrap_or(100.0), "k")? as usize,
            },
        };
        if let Some(key) = p.keys().next() {
            return Err(Error::Parameter(format!("{n} does not take parameter '{key}'")));
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Checks parameter ranges.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        match *self {
            AttackSpec::Identity => Ok(()),
            AttackSpec::Tsm { rate } => tsm::check_rate(rate),
            AttackSpec::PitchScale { ratio } => {
                if (0.5..=2.0).contains(&ratio) {
                    Ok(())
                } else {
                    bad(format!("pitch ratio must be in [0.5, 2], got {ratio}"))
                }
            }
            AttackSpec::Resample { ratio } => signal::check_ratio(ratio),
            AttackSpec::GaussianNoise { snr_db } => {
                if (0.0..=60.0).contains(&snr_db) {
                    Ok(())
                } else {
                    bad(format!("noise SNR must be in [0, 60] dB, got {snr_db}"))
                }
            }
            AttackSpec::Mp3 { kbps } => signal::check_kbps(kbps),
            AttackSpec::Amplitude { scale } => {
                if scale > 0.0 && scale <= 2.0 {
                    Ok(())
                } else {
                    bad(format!("amplitude scale must be in (0, 2], got {scale}"))
                }
            }
            AttackSpec::Requantize { bits } => {
                if (4..=16).contains(&bits) {
                    Ok(())
                } else {
                    bad(format!("requantize bits must be in [4, 16], got {bits}"))
                }
            }
            AttackSpec::Lowpass { cutoff_hz } => {
                if cutoff_hz > 0.0 {
                    Ok(())
                } else {
                    bad(format!("lowpass cutoff must be positive, got {cutoff_hz}"))
                }
            }
            AttackSpec::Crop { fraction, .. } => {
                if (0.0..=0.95).contains(&fraction) {
                    Ok(())
                } else {
                    bad(format!("crop fraction must be in [0, 0.95], got {fraction}"))
                }
            }
            AttackSpec::Jitter { one_in_k } => {
                if one_in_k >= 2 {
                    Ok(())
                } else {
                    bad(format!("jitter block must be >= 2, got {one_in_k}"))
                }
            }
        }
    }

    /// Expected output length for an input of `len` samples.
    pub fn output_len(&self, len: usize) -> usize {
        match *self {
            AttackSpec::Tsm { rate } => tsm::output_len(len, rate),
            AttackSpec::Crop { fraction, .. } => len - (fraction * len as f64).round() as usize,
            AttackSpec::Jitter { one_in_k } => len - len / one_in_k,
            _ => len,
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.kind().name();
        match self {
            AttackSpec::Identity => f.write_str(n),
            AttackSpec::Tsm { rate } => write!(f, "{n}:rate={rate}"),
            AttackSpec::PitchScale { ratio } => write!(f, "{n}:ratio={ratio}"),
            AttackSpec::Resample { ratio } => write!(f, "{n}:ratio={ratio}"),
            AttackSpec::GaussianNoise { snr_db } => write!(f, "{n}:snr={snr_db}"),
            AttackSpec::Mp3 { kbps } => write!(f, "{n}:kbps={kbps}"),
            AttackSpec::Amplitude { scale } => write!(f, "{n}:scale={scale}"),
            AttackSpec::Requantize { bits } => write!(f, "{n}:bits={bits}"),
            AttackSpec::Lowpass { cutoff_hz } => write!(f, "{n}:cutoff={cutoff_hz}"),
            AttackSpec::Crop { fraction, position } => {
                write!(f, "{n}:fraction={fraction},position={}", position.as_str())
            }
            AttackSpec::Jitter { one_in_k } => write!(f, "{n}:k={one_in_k}"),
        }
    }
}

impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse::<AttackTemplate>()?.fixed()
    }
}

impl TryFrom<String> for AttackSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AttackSpec> for String {
    fn from(a: AttackSpec) -> String {
        a.to_string()
    }
}

/// Applies attacks with a fixed STFT setup for the spectral ones.
#[derive(Clone)]
pub struct Distorter {
    engine: StftEngine,
    phase_mode: PhaseMode,
}

impl Default for Distorter {
    fn default() -> Self {
        Self::new(StftConfig::default(), PhaseMode::default()).expect("default config is valid")
    }
}

impl Distorter {
    pub fn new(stft: StftConfig, phase_mode: PhaseMode) -> Result<Self> {
        Ok(Self {
            engine: StftEngine::new(stft)?,
            phase_mode,
        })
    }

    /// Shortest clip any attack may produce.
    pub fn min_len(&self) -> usize {
        self.engine.config().min_samples()
    }

    /// Training-path forward with adjoint. MP3 uses the differentiable proxy.
    pub fn traced(
        &self,
        attack: &AttackSpec,
        x: &[f64],
        sample_rate: u32,
        seed: u64,
    ) -> Result<Traced> {
        attack.validate()?;
        match *attack {
            AttackSpec::Identity => Ok(Traced::identity(x)),
            AttackSpec::Tsm { rate } => {
                let (y, vjp) = tsm::tsm_traced(&self.engine, x, rate, self.phase_mode)?;
                Ok(Traced::new(y, vjp))
            }
            AttackSpec::PitchScale { ratio } => {
                let (y, vjp) = tsm::tsm_traced(&self.engine, x, ratio, self.phase_mode)?;
                let back = signal::resample_len(&y, x.len());
                let vb = back.vjp;
                Ok(Traced::new(back.y, move |g| vjp(&vb(g))))
            }
            AttackSpec::Resample { ratio } => signal::resample_round_trip(x, ratio),
            AttackSpec::GaussianNoise { snr_db } => signal::gaussian_noise(x, snr_db, seed),
            AttackSpec::Mp3 { kbps } => signal::mp3_proxy(x, kbps, sample_rate, seed),
            AttackSpec::Amplitude { scale } => signal::amplitude(x, scale),
            AttackSpec::Requantize { bits } => signal::requantize(x, bits),
            AttackSpec::Lowpass { cutoff_hz } => signal::lowpass(x, cutoff_hz, sample_rate),
            AttackSpec::Crop { fraction, position } => {
                signal::crop(x, fraction, position, seed, self.min_len())
            }
            AttackSpec::Jitter { one_in_k } => signal::jitter(x, one_in_k, seed),
        }
    }

    /// Training-path attack on a clip.
    pub fn apply(&self, attack: &AttackSpec, clip: &AudioClip, seed: u64) -> Result<AudioClip> {
        if let AttackSpec::Identity = attack {
            return Ok(clip.clone());
        }
        let t = self.traced(attack, &clip.samples_f64(), clip.sample_rate(), seed)?;
        AudioClip::from_f64(&t.y, clip.sample_rate())
    }

    /// Evaluation-path attack: identical to [`Self::apply`] except that MP3
    /// goes through the real codec and fails with [`Error::Unavailable`]
    /// when none is installed.
    pub fn apply_eval(&self, attack: &AttackSpec, clip: &AudioClip, seed: u64) -> Result<AudioClip> {
        match *attack {
            AttackSpec::Mp3 { kbps } => {
                signal::check_kbps(kbps)?;
                mp3::codec_round_trip(clip, kbps)
            }
            _ => self.apply(attack, clip, seed),
        }
    }

    /// Applies a chain left to right. Stage `i` uses seed `seed + i`.
    pub fn apply_chain(
        &self,
        chain: &AttackChain,
        clip: &AudioClip,
        seed: u64,
        eval: bool,
    ) -> Result<AudioClip> {
        let mut out = clip.clone();
        for (i, a) in chain.0.iter().enumerate() {
            let s = seed.wrapping_add(i as u64);
            out = if eval {
                self.apply_eval(a, &out, s)?
            } else {
                self.apply(a, &out, s)?
            };
        }
        Ok(out)
    }

    /// Records the attack on a 1-D signal node.
    pub fn apply_graph(
        &self,
        g: &mut Graph,
        attack: &AttackSpec,
        x: Var,
        sample_rate: u32,
        seed: u64,
    ) -> Result<Var> {
        if let AttackSpec::Identity = attack {
            return Ok(x);
        }
        let samples: Vec<f64> = g.value(x).data().iter().map(|&v| v as f64).collect();
        let t = self.traced(attack, &samples, sample_rate, seed)?;
        let len = t.y.len();
        Ok(custom_map(g, x, &t.y, &[len], t.vjp))
    }
}

fn clip_op(
    clip: &AudioClip,
    f: impl FnOnce(&[f64]) -> Result<Traced>,
) -> Result<AudioClip> {
    let t = f(&clip.samples_f64())?;
    AudioClip::from_f64(&t.y, clip.sample_rate())
}

/// Time-scale modification with the default STFT and cumulative phase.
pub fn tsm(clip: &AudioClip, rate: f64) -> Result<AudioClip> {
    Distorter::default().apply(&AttackSpec::Tsm { rate }, clip, 0)
}

/// Single-pass resampling to `round(ratio * M)` samples.
pub fn resample(clip: &AudioClip, ratio: f64) -> Result<AudioClip> {
    signal::check_ratio(ratio)?;
    let out = (ratio * clip.len() as f64).round() as usize;
    clip_op(clip, |x| Ok(signal::resample_len(x, out)))
}

pub fn pitch_scale(clip: &AudioClip, semitones: f64) -> Result<AudioClip> {
    if semitones.abs() > 12.0 {
        return Err(Error::Parameter(format!(
            "pitch shift must be within 12 semitones, got {semitones}"
        )));
    }
    pitch_scale_ratio(clip, semitones_to_ratio(semitones))
}

pub fn pitch_scale_ratio(clip: &AudioClip, ratio: f64) -> Result<AudioClip> {
    Distorter::default().apply(&AttackSpec::PitchScale { ratio }, clip, 0)
}

pub fn gaussian_noise(clip: &AudioClip, snr_db: f64, seed: u64) -> Result<AudioClip> {
    clip_op(clip, |x| signal::gaussian_noise(x, snr_db, seed))
}

/// Training-path MP3 stand-in.
pub fn mp3_proxy(clip: &AudioClip, kbps: u32, seed: u64) -> Result<AudioClip> {
    clip_op(clip, |x| signal::mp3_proxy(x, kbps, clip.sample_rate(), seed))
}

pub fn amplitude(clip: &AudioClip, scale: f64) -> Result<AudioClip> {
    clip_op(clip, |x| signal::amplitude(x, scale))
}

pub fn requantize(clip: &AudioClip, bits: u32) -> Result<AudioClip> {
    clip_op(clip, |x| signal::requantize(x, bits))
}

pub fn lowpass(clip: &AudioClip, cutoff_hz: f64) -> Result<AudioClip> {
    clip_op(clip, |x| signal::lowpass(x, cutoff_hz, clip.sample_rate()))
}

pub fn crop(clip: &AudioClip, fraction: f64, position: CropPosition, seed: u64) -> Result<AudioClip> {
    let min_len = StftConfig::default().min_samples();
    clip_op(clip, |x| signal::crop(x, fraction, position, seed, min_len))
}

pub fn jitter(clip: &AudioClip, one_in_k: usize, seed: u64) -> Result<AudioClip> {
    clip_op(clip, |x| signal::jitter(x, one_in_k, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_round_trip_for_every_kind() {
        for s in [
            "identity",
            "tsm:rate=0.9",
            "pitch:ratio=1.1",
            "resample:ratio=0.8",
            "noise:snr=30",
            "mp3:kbps=64",
            "amplitude:scale=0.85",
            "requantize:bits=8",
            "lowpass:cutoff=6000",
            "crop:fraction=0.2,position=begin",
            "jitter:k=100",
        ] {
            let a: AttackSpec = s.parse().unwrap();
            assert_eq!(a.to_string(), s);
        }
        let p: AttackSpec = "pitch:semitones=12".parse().unwrap();
        assert_eq!(p, AttackSpec::PitchScale { ratio: 2.0 });
        assert_eq!("jitter".parse::<AttackSpec>().unwrap(), AttackSpec::Jitter { one_in_k: 100 });
    }

    #[test]
    fn grammar_rejects_bad_parameters() {
        for s in [
            "tsm",
            "tsm:rate=3",
            "tsm:speed=1",
            "pitch:ratio=1.1,semitones=1",
            "pitch:semitones=13",
            "requantize:bits=8.5",
            "crop:fraction=0.2,position=left",
            "jitter:k=1",
            "mp3:kbps=96",
            "warp:rate=1",
        ] {
            assert!(s.parse::<AttackSpec>().is_err(), "{s}");
        }
    }

    #[test]
    fn serde_uses_text_form() {
        let a = AttackSpec::Crop {
            fraction: 0.1,
            position: CropPosition::End,
        };
        let j = serde_json::to_string(&a).unwrap();
        assert_eq!(j, "\"crop:fraction=0.1,position=end\"");
        assert_eq!(serde_json::from_str::<AttackSpec>(&j).unwrap(), a);
    }
}
