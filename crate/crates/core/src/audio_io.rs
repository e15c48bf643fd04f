//! WAV ingestion and persistence, plus fixed-length dataset segmentation.
//!
//! Everything downstream works on mono clips at [`WORKING_RATE`]. Input files
//! with more channels are averaged to mono; other rates go through the same
//! windowed-sinc resampler the distortion layer uses.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::resample;
use crate::error::{Error, Result};

pub const WORKING_RATE: u32 = 22050;

/// Smallest segment length the dataset tooling accepts, in seconds.
pub const MIN_SEGMENT_SECONDS: f64 = 0.5;

/// Mono waveform with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Contract(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a clip from `f64` samples, narrowing to `f32`.
    pub fn from_f64(samples: &[f64], sample_rate: u32) -> Result<Self> {
        Self::new(samples.iter().map(|&x| x as f32).collect(), sample_rate)
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn samples_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&x| x as f64).collect()
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sub-clip `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::Contract(format!(
                "slice {start}..{} exceeds clip length {}",
                start + len,
                self.len()
            )));
        }
        Ok(Self {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&x| (x as f64) * (x as f64)).sum()
    }
}

/// Reads a WAV file, downmixes to mono and resamples to `target_rate`.
pub fn load_audio(path: impl AsRef<Path>, target_rate: u32) -> Result<AudioClip> {
    let path = path.as_ref();
    if target_rate == 0 {
        return Err(Error::Parameter("target sample rate must be positive".into()));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    // Once the file is open, any decoding failure is a format problem.
    let reader = hound::WavReader::new(std::io::BufReader::new(file))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
        }
        hound::SampleFormat::Float => reader.into_samples::<f32>().collect(),
    }
    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if interleaved.is_empty() {
        return Err(Error::Format(format!("{}: no samples", path.display())));
    }
    let mono: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    let clip = AudioClip::new(mono, spec.sample_rate)?;
    resample_clip(&clip, target_rate)
}

/// Converts a clip to `target_rate`. Returns an unmodified copy if the rate
/// already matches.
pub fn resample_clip(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if clip.sample_rate() == target_rate {
        return Ok(clip.clone());
    }
    let out_len =
        (clip.len() as f64 * target_rate as f64 / clip.sample_rate() as f64).round() as usize;
    if out_len == 0 {
        return Err(Error::Format("clip too short to resample".into()));
    }
    let y = resample::resample_to_len(&clip.samples_f64(), out_len);
    AudioClip::from_f64(&y, target_rate)
}

/// Writes a 16-bit PCM mono WAV. Samples are clamped to [-1, 1] first.
pub fn save_audio(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &x in clip.samples() {
        let q = (x.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Where to find audio and how to cut it.
///
/// If `root_path/<split>` exists it is used, otherwise `root_path` itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root_path: PathBuf,
    pub segment_seconds: f64,
    pub split: Split,
    pub shuffle_seed: u64,
}

impl DatasetSpec {
    pub fn new(root_path: impl Into<PathBuf>, segment_seconds: f64) -> Self {
        Self {
            root_path: root_path.into(),
            segment_seconds,
            split: Split::Train,
            shuffle_seed: 0,
        }
    }

    pub fn segment_len(&self) -> usize {
        (self.segment_seconds * WORKING_RATE as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.segment_seconds >= MIN_SEGMENT_SECONDS) {
            return Err(Error::Config(format!(
                "segment_seconds must be >= {MIN_SEGMENT_SECONDS}, got {}",
                self.segment_seconds
            )));
        }
        Ok(())
    }

    fn directory(&self) -> PathBuf {
        let sub = self.root_path.join(self.split.as_str());
        if sub.is_dir() {
            sub
        } else {
            self.root_path.clone()
        }
    }
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Fixed-length segments from every WAV under the dataset directory.
///
/// Files are visited in a seeded shuffle of their sorted paths; each file is
/// cut from its start into consecutive segments and the remainder dropped.
pub fn iterate_segments(spec: &DatasetSpec) -> Result<Segments> {
    spec.validate()?;
    let dir = spec.directory();
    let mut files = Vec::new();
    collect_wavs(&dir, &mut files)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no .wav files under {}", dir.display())));
    }
    files.sort();
    files.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.shuffle_seed));
    Ok(Segments {
        files,
        next_file: 0,
        current: None,
        offset: 0,
        segment_len: spec.segment_len(),
        skipped_files: 0,
    })
}

/// Single-consumer iterator returned by [`iterate_segments`].
pub struct Segments {
    files: Vec<PathBuf>,
    next_file: usize,
    current: Option<AudioClip>,
    offset: usize,
    segment_len: usize,
    skipped_files: usize,
}

impl Segments {
    /// Files that were too short to yield a single segment.
    pub fn skipped_files(&self) -> usize {
        self.skipped_files
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }
}

impl Iterator for Segments {
    type Item = Result<AudioClip>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(clip) = &self.current {
                if self.offset + self.segment_len <= clip.len() {
                    let seg = clip.slice(self.offset, self.segment_len);
                    self.offset += self.segment_len;
                    return Some(seg);
                }
                self.current = None;
            }
            let path = self.files.get(self.next_file)?.clone();
            self.next_file += 1;
            match load_audio(&path, WORKING_RATE) {
                Ok(clip) => {
                    if clip.len() < self.segment_len {
                        log::warn!(
                            "{}: {:.3} s is shorter than one segment, skipped",
                            path.display(),
                            clip.duration_secs()
                        );
                        self.skipped_files += 1;
                        continue;
                    }
                    self.current = Some(clip);
                    self.offset = 0;
                }
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_wav(path: &Path, rate: u32, channels: u16, frames: &[Vec<i16>]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for frame in frames {
            for &s in frame {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn native_rate_mono_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let raw: Vec<i16> = (0..500).map(|i| (i * 37 % 2000 - 1000) as i16).collect();
        write_wav(&p, WORKING_RATE, 1, &raw.iter().map(|&s| vec![s]).collect::<Vec<_>>());
        let clip = load_audio(&p, WORKING_RATE).unwrap();
        for (&got, &s) in clip.samples().iter().zip(&raw) {
            assert_eq!(got, s as f32 / 32768.0);
        }
    }

    #[test]
    fn stereo_44k_is_downmixed_and_halved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let m = 44101;
        let frames: Vec<Vec<i16>> = (0..m)
            .map(|i| {
                let v = (1000.0 * (i as f64 * 0.01).sin()) as i16;
                vec![v, v / 2]
            })
            .collect();
        write_wav(&p, 44100, 2, &frames);
        let clip = load_audio(&p, WORKING_RATE).unwrap();
        let expected = (m as f64 * 22050.0 / 44100.0).round() as usize;
        assert!(clip.len().abs_diff(expected) <= 1);
        assert_eq!(clip.sample_rate(), WORKING_RATE);
    }

    #[test]
    fn empty_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.wav");
        fs::write(&p, b"").unwrap();
        let err = load_audio(&p, WORKING_RATE).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err:?}");
        let p2 = dir.path().join("nosamples.wav");
        write_wav(&p2, WORKING_RATE, 1, &[]);
        assert!(matches!(load_audio(&p2, WORKING_RATE), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_audio("/definitely/not/here.wav", WORKING_RATE).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn save_clamps_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        let clip = AudioClip::new(vec![0.0, 1.5, -2.0, 0.25], WORKING_RATE).unwrap();
        save_audio(&clip, &p).unwrap();
        let back = load_audio(&p, WORKING_RATE).unwrap();
        assert_eq!(back.samples()[0], 0.0);
        assert!((back.samples()[1] - 1.0).abs() <= 1.0 / 32768.0);
        assert_eq!(back.samples()[2], -1.0);
        assert_eq!(back.samples()[3], 0.25);

        let silent = AudioClip::silence(100, WORKING_RATE);
        save_audio(&silent, &p).unwrap();
        assert!(load_audio(&p, WORKING_RATE).unwrap().samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let clip = AudioClip::silence(10, WORKING_RATE);
        let err = save_audio(&clip, "/nonexistent-dir/x/y.wav").unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn non_finite_samples_rejected() {
        assert!(AudioClip::new(vec![0.0, f32::NAN], 100).is_err());
        assert!(AudioClip::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn segments_follow_remainder_rule() {
        let dir = tempfile::tempdir().unwrap();
        let ten: Vec<Vec<i16>> = (0..(10 * WORKING_RATE as usize + 300)).map(|i| vec![(i % 100) as i16]).collect();
        write_wav(&dir.path().join("long.wav"), WORKING_RATE, 1, &ten);
        let spec = DatasetSpec::new(dir.path(), 1.0);
        let segs: Vec<AudioClip> = iterate_segments(&spec).unwrap().map(|s| s.unwrap()).collect();
        assert_eq!(segs.len(), 10);
        assert!(segs.iter().all(|s| s.len() == 22050));

        let short_dir = tempfile::tempdir().unwrap();
        let short: Vec<Vec<i16>> = (0..(WORKING_RATE as usize * 9 / 10)).map(|_| vec![1]).collect();
        write_wav(&short_dir.path().join("short.wav"), WORKING_RATE, 1, &short);
        let mut it = iterate_segments(&DatasetSpec::new(short_dir.path(), 1.0)).unwrap();
        assert!(it.next().is_none());
        assert_eq!(it.skipped_files(), 1);
    }

    #[test]
    fn segment_order_is_seeded() {
        let dir = tempfile::tempdir().unwrap();
        for k in 0..6 {
            let data: Vec<Vec<i16>> = (0..WORKING_RATE as usize / 2).map(|_| vec![k * 100]).collect();
            write_wav(&dir.path().join(format!("f{k}.wav")), WORKING_RATE, 1, &data);
        }
        let mut spec = DatasetSpec::new(dir.path(), 0.5);
        spec.shuffle_seed = 42;
        let first = |s: &DatasetSpec| -> Vec<f32> {
            iterate_segments(s).unwrap().map(|c| c.unwrap().samples()[0]).collect()
        };
        assert_eq!(first(&spec), first(&spec));
        assert_eq!(first(&spec).len(), 6);
    }

    #[test]
    fn dataset_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            iterate_segments(&DatasetSpec::new(dir.path(), 1.0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            iterate_segments(&DatasetSpec::new(dir.path(), 0.25)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_subdirectory_is_preferred() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("test")).unwrap();
        let data: Vec<Vec<i16>> = (0..WORKING_RATE as usize).map(|_| vec![5]).collect();
        write_wav(&dir.path().join("test/x.wav"), WORKING_RATE, 1, &data);
        write_wav(&dir.path().join("top.wav"), WORKING_RATE, 1, &data);
        let mut spec = DatasetSpec::new(dir.path(), 1.0);
        spec.split = Split::Test;
        assert_eq!(iterate_segments(&spec).unwrap().files().len(), 1);
    }
}
