//! Command-line front end. Every command returns its standard output and the
//! files it wrote so that runs can be recorded in a manifest and replayed.

pub mod manifest;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::{load_audio, save_audio, DatasetSpec, Split, WORKING_RATE};
use crate::codec::checkpoint::file_sha256;
use crate::codec::{CodecModel, Message, ModelConfig};
use crate::distortion::chain::AttackChain;
use crate::distortion::signal::CropPosition;
use crate::distortion::Distorter;
use crate::error::{Error, Result};
use crate::evalbench::{self, EvalReport};
use crate::trainer::{self, RunPaths, TrainConfig};
use manifest::{hash_files, Manifest, MANIFEST_VERSION};

/// Attack grid used by `evaluate` when none is given.
pub const DEFAULT_ATTACKS: &[&str] = &[
    "identity",
    "resample:ratio=0.5",
    "noise:snr=20",
    "noise:snr=30",
    "mp3:kbps=64",
    "mp3:kbps=128",
    "amplitude:scale=0.5",
    "requantize:bits=8",
    "lowpass:cutoff=5000",
    "tsm:rate=0.8",
    "tsm:rate=0.9",
    "tsm:rate=1.1",
    "tsm:rate=1.2",
    "pitch:ratio=0.9",
    "pitch:ratio=1.1",
    "crop:fraction=0.2,position=random",
    "jitter:k=100",
];

#[derive(Parser, Debug)]
#[command(name = "syncguard", version, about = "Robust blind audio watermarking")]
pub struct Cli {
    /// Run configuration (TOML) with optional `[model]` and `[train]` tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where to write the run manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Two-stage training on a directory of WAV files.
    Train(TrainArgs),
    /// Embed a message into a WAV file.
    Embed(EmbedArgs),
    /// Recover the message from a WAV file.
    Extract(ExtractArgs),
    /// Apply an attack chain to a WAV file.
    Attack(AttackArgs),
    /// Robustness table over a dataset.
    Evaluate(EvaluateArgs),
    /// Accuracy over crop positions and fractions.
    CropStudy(CropStudyArgs),
    /// Sliding-window detection in a file, or an offset trace over a dataset.
    Locate(LocateArgs),
    /// Train and evaluate models of several capacities.
    Sweep(SweepArgs),
    /// Parameter counts, MACs and timing.
    Efficiency(EfficiencyArgs),
    /// Rerun a recorded command and check that its outputs are identical.
    Replay(ReplayArgs),
    /// Write synthetic speech-like WAV files.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from an existing checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Use the small desk-scale model.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub bits: Option<usize>,
    #[arg(long)]
    pub pattern_len: Option<usize>,
    #[arg(long)]
    pub segment_seconds: Option<f64>,
    #[arg(long)]
    pub stage1_steps: Option<usize>,
    #[arg(long)]
    pub stage2_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_w: Option<f64>,
    /// Metrics log (JSON lines); defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Bit string or `0x` hex; the pattern is prefixed unless `--raw-bits`.
    /// A seeded random payload is used when omitted.
    #[arg(long)]
    pub bits: Option<String>,
    #[arg(long)]
    pub raw_bits: bool,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Also print the soft scores.
    #[arg(long)]
    pub soft: bool,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    pub chain: String,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the differentiable MP3 stand-in instead of the external encoder.
    #[arg(long)]
    pub mp3_proxy: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Attack chain; repeatable. Defaults to the config list or the built-in grid.
    #[arg(long = "attack")]
    pub attacks: Vec<String>,
    #[arg(long)]
    pub max_clips: Option<usize>,
    #[arg(long)]
    pub segment_seconds: Option<f64>,
    /// Report as JSON lines.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub mp3_proxy: bool,
}

#[derive(Args, Debug)]
pub struct CropStudyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.85")]
    pub fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "begin,middle,end")]
    pub positions: Vec<String>,
    #[arg(long)]
    pub max_clips: Option<usize>,
    #[arg(long)]
    pub segment_seconds: Option<f64>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LocateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// File to scan.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Host clips for the offset trace.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 1.0)]
    pub window: f64,
    #[arg(long, default_value_t = 0.05)]
    pub stride: f64,
    #[arg(long, default_value_t = 0.5)]
    pub max_offset: f64,
    /// Host length for the offset trace.
    #[arg(long, default_value_t = 3.0)]
    pub host_seconds: f64,
    #[arg(long)]
    pub max_clips: Option<usize>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "32,64,96")]
    pub bits: Vec<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub max_clips: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EfficiencyArgs {
    /// Checkpoint; the default (or `--toy`) configuration when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub toy: bool,
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub seconds: f64,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub manifest_file: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 1.0)]
    pub seconds: f64,
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub segment_seconds: Option<f64>,
    pub attacks: Option<Vec<String>>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(m) = &cfg.model {
            m.validate()?;
        }
        if let Some(t) = &cfg.train {
            t.validate()?;
        }
        Ok(cfg)
    }
}

/// Result of one command.
#[derive(Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    pub outputs: Vec<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

struct Ctx {
    run: RunConfig,
    seed: u64,
}

impl Ctx {
    fn data(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        flag.clone()
            .or_else(|| self.run.data.clone())
            .ok_or_else(|| Error::Config("no dataset given (--data or `data` in the config)".into()))
    }

    fn segment_seconds(&self, flag: Option<f64>) -> f64 {
        flag.or(self.run.segment_seconds).unwrap_or(1.0)
    }

    fn dataset(&self, flag: &Option<PathBuf>, split: &str, seconds: Option<f64>) -> Result<DatasetSpec> {
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(Error::Config(format!("unknown split '{other}'"))),
        };
        Ok(DatasetSpec {
            split,
            shuffle_seed: self.seed,
            ..DatasetSpec::new(self.data(flag)?, self.segment_seconds(seconds))
        })
    }
}

fn load_clips(spec: &DatasetSpec, max: Option<usize>) -> Result<Vec<crate::audio_io::AudioClip>> {
    let mut clips = trainer::load_dataset(spec)?;
    if let Some(m) = max {
        clips.truncate(m);
    }
    Ok(clips)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<Outcome> {
    let mut cfg = ctx.run.train.clone().unwrap_or_default();
    cfg.seed = ctx.seed;
    if let Some(v) = a.stage1_steps {
        cfg.stage1_steps = v;
    }
    if let Some(v) = a.stage2_steps {
        cfg.stage2_steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.lambda_w {
        cfg.lambda_w = v;
    }
    cfg.validate()?;
    let model = match &a.init {
        Some(p) => CodecModel::load_checkpoint(p)?,
        None => {
            let mut m = match (&ctx.run.model, a.toy) {
                (_, true) => ModelConfig::toy(16, 4),
                (Some(m), false) => m.clone(),
                (None, false) => ModelConfig::default(),
            };
            if let Some(b) = a.bits {
                m.n_bits = b;
            }
            if let Some(k) = a.pattern_len {
                m.pattern_len = k;
            }
            CodecModel::new(m, ctx.seed)?
        }
    };
    let data = ctx.dataset(&a.data, "train", a.segment_seconds)?;
    let metrics = a
        .metrics
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.jsonl", a.out.display())));
    let paths = RunPaths {
        metrics: Some(metrics.clone()),
        checkpoint_dir: a.checkpoint_dir.clone(),
    };
    let (model, state) = trainer::train(model, &data, cfg, &paths)?;
    model.save_checkpoint(&a.out)?;
    let mut stdout = String::new();
    if let Some(m) = state.last() {
        writeln!(
            stdout,
            "trained {} steps (stage 2 from step {}); last: acc {:.4} snr {:.2} dB loss {:.6}",
            state.step,
            state.stage2_start.map_or("-".into(), |s| s.to_string()),
            m.acc,
            m.snr_db,
            m.loss
        )
        .unwrap();
    }
    writeln!(stdout, "checkpoint: {}", a.out.display()).unwrap();
    Ok(Outcome {
        stdout,
        outputs: vec![a.out.clone(), metrics],
        inputs: vec![],
        checkpoint: None,
    })
}

fn cmd_embed(ctx: &Ctx, a: &EmbedArgs) -> Result<Outcome> {
    let model = CodecModel::load_checkpoint(&a.model)?;
    let cfg = model.config();
    let msg = match &a.bits {
        Some(text) => Message::parse(text, cfg.n_bits, cfg.pattern_len, a.raw_bits)?,
        None => Message::random(cfg.n_bits, cfg.pattern_len, &mut ChaCha8Rng::seed_from_u64(ctx.seed)),
    };
    let clip = load_audio(&a.input, WORKING_RATE)?;
    let marked = model.embed(&clip, &msg)?;
    save_audio(&marked, &a.out)?;
    let snr = evalbench::metrics::snr_clips(&clip, &marked).unwrap_or(f64::NAN);
    Ok(Outcome {
        stdout: format!("{}\nsnr_db={snr:.2}\n", msg.to_bit_string()),
        outputs: vec![a.out.clone()],
        inputs: vec![a.input.clone()],
        checkpoint: Some(a.model.clone()),
    })
}

fn cmd_extract(a: &ExtractArgs) -> Result<Outcome> {
    let model = CodecModel::load_checkpoint(&a.model)?;
    let clip = load_audio(&a.input, WORKING_RATE)?;
    let (bits, soft) = model.extract(&clip)?;
    let mut stdout = format!("{} pattern_ok={}\n", bits.to_bit_string(), bits.pattern_ok());
    if a.soft {
        let s: Vec<String> = soft.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(stdout, "soft {}", s.join(" ")).unwrap();
    }
    Ok(Outcome {
        stdout,
        outputs: vec![],
        inputs: vec![a.input.clone()],
        checkpoint: Some(a.model.clone()),
    })
}

fn cmd_attack(ctx: &Ctx, a: &AttackArgs) -> Result<Outcome> {
    let chain: AttackChain = a.chain.parse()?;
    let clip = load_audio(&a.input, WORKING_RATE)?;
    let out = Distorter::default().apply_chain(&chain, &clip, ctx.seed, !a.mp3_proxy)?;
    save_audio(&out, &a.out)?;
    Ok(Outcome {
        stdout: format!("{chain}: {} -> {} samples\n", clip.len(), out.len()),
        outputs: vec![a.out.clone()],
        inputs: vec![a.input.clone()],
        checkpoint: None,
    })
}

fn cmd_evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<Outcome> {
    let model = CodecModel::load_checkpoint(&a.model)?;
    let spec = ctx.dataset(&a.data, &a.split, a.segment_seconds)?;
    let clips = load_clips(&spec, a.max_clips)?;
    let texts: Vec<String> = if !a.attacks.is_empty() {
        a.attacks.clone()
    } else if let Some(list) = &ctx.run.attacks {
        list.clone()
    } else {
        DEFAULT_ATTACKS.iter().map(|s| s.to_string()).collect()
    };
    let chains: Vec<AttackChain> = texts.iter().map(|t| t.parse()).collect::<Result<_>>()?;
    let distorter = Distorter::default();
    let mut report: EvalReport = evalbench::report::robustness_table_with(
        &model,
        &clips,
        &chains,
        ctx.seed,
        &distorter,
        a.mp3_proxy,
    )?;
    report.meta.checkpoint = Some(file_sha256(&a.model)?);
    report.meta.dataset = spec.root_path.display().to_string();
    let mut outputs = vec![];
    if let Some(p) = &a.report {
        report.write_jsonl(p)?;
        outputs.push(p.clone());
    }
    Ok(Outcome {
        stdout: report.to_table(),
        outputs,
        inputs: vec![],
        checkpoint: Some(a.model.clone()),
    })
}

fn cmd_crop_study(ctx: &Ctx, a: &CropStudyArgs) -> Result<Outcome> {
    let model = CodecModel::load_checkpoint(&a.model)?;
    let spec = ctx.dataset(&a.data, &a.split, a.segment_seconds)?;
    let clips = load_clips(&spec, a.max_clips)?;
    let positions: Vec<CropPosition> = a.positions.iter().map(|p| p.parse()).collect::<Result<_>>()?;
    let rows = evalbench::crop_position_study(
        &model,
        &clips,
        &a.fractions,
        &positions,
        ctx.seed,
        &Distorter::default(),
    )?;
    let csv = evalbench::studies::crop_rows_csv(&rows);
    let mut outputs = vec![];
    if let Some(p) = &a.csv {
        write_text(p, &csv)?;
        outputs.push(p.clone());
    }
    Ok(Outcome {
        stdout: csv,
        outputs,
        inputs: vec![],
        checkpoint: Some(a.model.clone()),
    })
}

fn cmd_locate(ctx: &Ctx, a: &LocateArgs) -> Result<Outcome> {
    let model = CodecModel::load_checkpoint(&a.model)?;
    let mut stdout = String::new();
    let mut outputs = vec![];
    let mut inputs = vec![];
    if let Some(input) = &a.input {
        let clip = load_audio(input, WORKING_RATE)?;
        let windows = evalbench::sliding_extract(&clip, &model, a.window, a.stride)?;
        let mut csv = String::from("offset_seconds,bits,pattern_ok\n");
        for w in &windows {
            writeln!(csv, "{:.4},{},{}", w.offset_seconds, w.bits, w.pattern_ok).unwrap();
        }
        match evalbench::detect(&windows) {
            Some(w) => writeln!(stdout, "detected at {:.3} s: {}", w.offset_seconds, w.bits).unwrap(),
            None => writeln!(stdout, "no pattern-valid window in {} windows", windows.len()).unwrap(),
        }
        stdout.push_str(&csv);
        if let Some(p) = &a.csv {
            write_text(p, &csv)?;
            outputs.push(p.clone());
        }
        inputs.push(input.clone());
    } else {
        let spec = ctx.dataset(&a.data, &a.split, Some(a.host_seconds))?;
        let hosts = load_clips(&spec, a.max_clips)?;
        let trace = evalbench::localization_trace(&model, &hosts, a.window, a.stride, a.max_offset, ctx.seed)?;
        let csv = trace.to_csv();
        stdout.push_str(&csv);
        if let Some(p) = &a.csv {
            write_text(p, &csv)?;
            outputs.push(p.clone());
        }
    }
    Ok(Outcome {
        stdout,
        outputs,
        inputs,
        checkpoint: Some(a.model.clone()),
    })
}

fn cmd_sweep(ctx: &Ctx, a: &SweepArgs) -> Result<Outcome> {
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let train_spec = ctx.dataset(&a.data, "train", None)?;
    let test_spec = ctx.dataset(&a.data, "test", None)?;
    let cfg = ctx.run.train.clone().unwrap_or_default();
    let base = match (&ctx.run.model, a.toy) {
        (_, true) => ModelConfig::toy(16, 4),
        (Some(m), false) => m.clone(),
        (None, false) => ModelConfig::default(),
    };
    let mut models = Vec::new();
    let mut outputs = Vec::new();
    for &bits in &a.bits {
        let mcfg = ModelConfig {
            n_bits: bits,
            pattern_len: base.pattern_len.min(bits),
            ..base.clone()
        };
        let ckpt = a.out_dir.join(format!("bits{bits}.ckpt"));
        let paths = RunPaths {
            metrics: Some(a.out_dir.join(format!("bits{bits}.metrics.jsonl"))),
            checkpoint_dir: None,
        };
        let (model, _) = trainer::train(
            CodecModel::new(mcfg, ctx.seed)?,
            &train_spec,
            TrainConfig {
                seed: ctx.seed,
                ..cfg.clone()
            },
            &paths,
        )?;
        model.save_checkpoint(&ckpt)?;
        outputs.push(ckpt);
        models.push(model);
    }
    let clips = load_clips(&test_spec, a.max_clips)?;
    let rows = evalbench::capacity_sweep(&models, &clips, ctx.seed)?;
    let mut csv = String::from("n_bits,acc,snr_db,n_clips\n");
    for r in &rows {
        writeln!(csv, "{},{:.6},{:.4},{}", r.n_bits, r.acc, r.snr_db, r.n_clips).unwrap();
    }
    let path = a.out_dir.join("sweep.csv");
    write_text(&path, &csv)?;
    outputs.push(path);
    Ok(Outcome {
        stdout: csv,
        outputs,
        inputs: vec![],
        checkpoint: None,
    })
}

fn cmd_efficiency(ctx: &Ctx, a: &EfficiencyArgs) -> Result<Outcome> {
    let model = match &a.model {
        Some(p) => CodecModel::load_checkpoint(p)?,
        None => {
            let cfg = match (&ctx.run.model, a.toy) {
                (_, true) => ModelConfig::toy(16, 4),
                (Some(m), false) => m.clone(),
                (None, false) => ModelConfig::default(),
            };
            CodecModel::new(cfg, ctx.seed)?
        }
    };
    let len = (a.seconds * WORKING_RATE as f64).round() as usize;
    let clip = crate::synth::speech_like(ctx.seed, len, WORKING_RATE);
    let report = evalbench::efficiency_report(&model, &clip, a.runs)?;
    Ok(Outcome {
        stdout: report.to_table(),
        outputs: vec![],
        inputs: vec![],
        checkpoint: a.model.clone(),
    })
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<Outcome> {
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let len = (a.seconds * WORKING_RATE as f64).round() as usize;
    let mut outputs = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let clip = crate::synth::speech_like(ctx.seed.wrapping_add(i as u64), len, WORKING_RATE);
        let p = a.out_dir.join(format!("clip{i:04}.wav"));
        save_audio(&clip, &p)?;
        outputs.push(p);
    }
    Ok(Outcome {
        stdout: format!("wrote {} clips to {}\n", a.count, a.out_dir.display()),
        outputs,
        inputs: vec![],
        checkpoint: None,
    })
}

fn default_manifest(cli: &Cli) -> Option<PathBuf> {
    let beside = |p: &Path| Some(PathBuf::from(format!("{}.manifest.json", p.display())));
    match &cli.command {
        Command::Train(a) => beside(&a.out),
        Command::Embed(a) => beside(&a.out),
        Command::Attack(a) => beside(&a.out),
        Command::Evaluate(a) => a.report.as_deref().and_then(beside),
        Command::CropStudy(a) => a.csv.as_deref().and_then(beside),
        Command::Locate(a) => a.csv.as_deref().and_then(beside),
        Command::Sweep(a) => Some(a.out_dir.join("sweep.manifest.json")),
        Command::Replay(_) => None,
        _ => None,
    }
    .or_else(|| match &cli.command {
        Command::Replay(_) => None,
        other => Some(PathBuf::from(format!("syncguard-{}.manifest.json", command_name(other)))),
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Train(_) => "train",
        Command::Embed(_) => "embed",
        Command::Extract(_) => "extract",
        Command::Attack(_) => "attack",
        Command::Evaluate(_) => "evaluate",
        Command::CropStudy(_) => "crop-study",
        Command::Locate(_) => "locate",
        Command::Sweep(_) => "sweep",
        Command::Efficiency(_) => "efficiency",
        Command::Replay(_) => "replay",
        Command::Synth(_) => "synth",
    }
}

/// Arguments with any `--manifest` option removed.
fn strip_manifest(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
        } else if a == "--manifest" {
            skip = true;
        } else if !a.starts_with("--manifest=") {
            out.push(a.clone());
        }
    }
    out
}

fn cmd_replay(a: &ReplayArgs) -> Result<Outcome> {
    let recorded = Manifest::load(&a.manifest_file)?;
    if recorded.version != MANIFEST_VERSION {
        return Err(Error::Config(format!("manifest version {} is not supported", recorded.version)));
    }
    let tmp = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
    let mut args = recorded.args.clone();
    if let Some(text) = &recorded.config {
        let p = tmp.path().join("config.toml");
        write_text(&p, text)?;
        if let Some(i) = args.iter().position(|x| x == "--config") {
            args[i + 1] = p.display().to_string();
        }
    }
    let new_manifest = tmp.path().join("replay.manifest.json");
    args.push("--manifest".into());
    args.push(new_manifest.display().to_string());
    let cli = Cli::try_parse_from(std::iter::once("syncguard".to_string()).chain(args.clone()))
        .map_err(|e| Error::Config(format!("manifest arguments do not parse: {e}")))?;
    let (outcome, fresh) = execute(&cli, &args)?;
    let mut problems = Vec::new();
    if fresh.checkpoint_sha256 != recorded.checkpoint_sha256 {
        problems.push("checkpoint hash differs".to_string());
    }
    if fresh.inputs != recorded.inputs {
        problems.push("input hashes differ".to_string());
    }
    if fresh.stdout != recorded.stdout {
        problems.push("standard output differs".to_string());
    }
    if fresh.outputs != recorded.outputs {
        problems.push("output file hashes differ".to_string());
    }
    if !problems.is_empty() {
        return Err(Error::DegenerateOutput(format!("replay mismatch: {}", problems.join("; "))));
    }
    Ok(Outcome {
        stdout: format!(
            "{}replay ok: {} identical ({} output files)\n",
            outcome.stdout,
            recorded.command,
            fresh.outputs.len()
        ),
        ..Outcome::default()
    })
}

fn execute(cli: &Cli, raw_args: &[String]) -> Result<(Outcome, Manifest)> {
    let config_text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let run = match &config_text {
        Some(t) => RunConfig::from_toml(t)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(run.seed).unwrap_or(0);
    let ctx = Ctx { run, seed };
    let outcome = match &cli.command {
        Command::Train(a) => cmd_train(&ctx, a)?,
        Command::Embed(a) => cmd_embed(&ctx, a)?,
        Command::Extract(a) => cmd_extract(a)?,
        Command::Attack(a) => cmd_attack(&ctx, a)?,
        Command::Evaluate(a) => cmd_evaluate(&ctx, a)?,
        Command::CropStudy(a) => cmd_crop_study(&ctx, a)?,
        Command::Locate(a) => cmd_locate(&ctx, a)?,
        Command::Sweep(a) => cmd_sweep(&ctx, a)?,
        Command::Efficiency(a) => cmd_efficiency(&ctx, a)?,
        Command::Synth(a) => cmd_synth(&ctx, a)?,
        Command::Replay(a) => return Ok((cmd_replay(a)?, dummy_manifest())),
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        command: command_name(&cli.command).to_string(),
        args: strip_manifest(raw_args),
        seed: Some(seed),
        config: config_text,
        checkpoint_sha256: match &outcome.checkpoint {
            Some(p) => Some(file_sha256(p)?),
            None => None,
        },
        inputs: hash_files(&outcome.inputs)?,
        outputs: hash_files(&outcome.outputs)?,
        stdout: outcome.stdout.clone(),
    };
    if let Some(path) = cli.manifest.clone().or_else(|| default_manifest(cli)) {
        manifest.save(&path)?;
    }
    Ok((outcome, manifest))
}

fn dummy_manifest() -> Manifest {
    Manifest {
        version: MANIFEST_VERSION,
        command: "replay".into(),
        args: vec![],
        seed: None,
        config: None,
        checkpoint_sha256: None,
        inputs: Default::default(),
        outputs: Default::default(),
        stdout: String::new(),
    }
}

/// Exit status for an error: 2 for usage and configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.verbose {
        let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
            .try_init();
    } else {
        let _ = env_logger::try_init();
    }
    let raw: Vec<String> = argv[1..].iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &raw) {
        Ok((outcome, _)) => {
            print!("{}", outcome.stdout);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
