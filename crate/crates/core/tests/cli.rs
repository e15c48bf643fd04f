mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::SR;
use syncguard::audio_io::{load_audio, save_audio, WORKING_RATE};
use syncguard::cli::manifest::Manifest;
use syncguard::codec::{CodecModel, Message, ModelConfig};
use syncguard::synth::speech_like;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        CodecModel::new(ModelConfig::toy(16, 4), 8)
            .unwrap()
            .save_checkpoint(ws.path("m.ckpt"))
            .unwrap();
        save_audio(&speech_like(21, SR as usize, SR), ws.path("a.wav")).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_syncguard"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ok(o: Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn embed(ws: &Workspace) -> String {
    ok(ws.run(&[
        "embed", "--model", &ws.p("m.ckpt"), "--in", &ws.p("a.wav"), "--bits", "1010_1100_0011",
        "--out", &ws.p("aw.wav"),
    ]))
}

#[test]
fn embed_extract_matches_library() {
    let ws = Workspace::new();
    let out = embed(&ws);
    let msg_line = out.lines().next().unwrap();
    assert_eq!(msg_line, "1011101011000011");

    let model = CodecModel::load_checkpoint(ws.path("m.ckpt")).unwrap();
    let clip = load_audio(ws.path("a.wav"), WORKING_RATE).unwrap();
    let msg = Message::parse("101011000011", 16, 4, false).unwrap();
    let marked = model.embed(&clip, &msg).unwrap();
    save_audio(&marked, ws.path("api.wav")).unwrap();
    assert_eq!(
        std::fs::read(ws.path("aw.wav")).unwrap(),
        std::fs::read(ws.path("api.wav")).unwrap()
    );
    assert_eq!(load_audio(ws.path("aw.wav"), WORKING_RATE).unwrap().len(), clip.len());

    let printed = ok(ws.run(&["extract", "--model", &ws.p("m.ckpt"), "--in", &ws.p("aw.wav")]));
    let reread = load_audio(ws.path("aw.wav"), WORKING_RATE).unwrap();
    let (bits, _) = model.extract(&reread).unwrap();
    assert_eq!(printed, format!("{} pattern_ok={}\n", bits.to_bit_string(), bits.pattern_ok()));
}

#[test]
fn attack_chain_applies_left_to_right() {
    let ws = Workspace::new();
    embed(&ws);
    ok(ws.run(&[
        "attack", "--chain", "tsm:rate=0.9|noise:snr=30", "--in", &ws.p("aw.wav"), "--out",
        &ws.p("atk.wav"),
    ]));
    let m = load_audio(ws.path("aw.wav"), WORKING_RATE).unwrap().len();
    let attacked = load_audio(ws.path("atk.wav"), WORKING_RATE).unwrap();
    assert_eq!(attacked.len(), (0.9 * m as f64).round() as usize);
    assert!(ws.path("atk.wav.manifest.json").is_file());
}

#[test]
fn replay_reproduces_and_detects_changes() {
    let ws = Workspace::new();
    embed(&ws);
    let manifest = ws.p("x.json");
    let first = ok(ws.run(&[
        "extract", "--model", &ws.p("m.ckpt"), "--in", &ws.p("aw.wav"), "--soft", "--manifest",
        &manifest,
    ]));
    let recorded = Manifest::load(Path::new(&manifest)).unwrap();
    assert_eq!(recorded.command, "extract");
    assert_eq!(recorded.stdout, first);
    assert!(recorded.checkpoint_sha256.is_some());
    assert!(!recorded.args.iter().any(|a| a == "--manifest"));

    let replay = ok(ws.run(&["replay", &manifest]));
    assert!(replay.starts_with(&first));
    assert!(replay.contains("replay ok"));

    // Replaying the embed step rewrites the same bytes.
    let replay = ok(ws.run(&["replay", &ws.p("aw.wav.manifest.json")]));
    assert!(replay.contains("replay ok"));

    std::fs::copy(ws.path("a.wav"), ws.path("aw.wav")).unwrap();
    let changed = ws.run(&["replay", &manifest]);
    assert_eq!(changed.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ws.run(&["embed", "--model", "m.ckpt"]).status.code(), Some(2));
    let bad_chain = ws.run(&["attack", "--chain", "tsm:speed=2", "--in", "a.wav", "--out", "b.wav"]);
    assert_eq!(bad_chain.status.code(), Some(2));
    let missing = ws.run(&["extract", "--model", "m.ckpt", "--in", "nope.wav"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(!missing.stderr.is_empty());

    std::fs::write(ws.path("bad.toml"), "[train]\nlearning_rate = -1.0\n").unwrap();
    let bad_cfg = ws.run(&["--config", "bad.toml", "efficiency", "--toy", "--seconds", "0.5"]);
    assert_eq!(bad_cfg.status.code(), Some(2));
    std::fs::write(ws.path("typo.toml"), "sed = 3\n").unwrap();
    assert_eq!(ws.run(&["--config", "typo.toml", "synth", "--out-dir", "s"]).status.code(), Some(2));

    let wrong_bits = ws.run(&[
        "embed", "--model", "m.ckpt", "--in", "a.wav", "--bits", "1", "--out", "o.wav",
    ]);
    assert_eq!(wrong_bits.status.code(), Some(2));
}

#[test]
fn synth_and_efficiency_commands() {
    let ws = Workspace::new();
    ok(ws.run(&["synth", "--out-dir", "clips", "--count", "3", "--seconds", "0.5"]));
    let wavs = std::fs::read_dir(ws.path("clips")).unwrap().count();
    assert!(wavs >= 3);
    let table = ok(ws.run(&["efficiency", "--model", "m.ckpt", "--runs", "20", "--seconds", "0.5"]));
    let params = CodecModel::load_checkpoint(ws.path("m.ckpt")).unwrap().count_parameters();
    assert!(table.contains(&params.encoder.to_string()));
    assert!(table.contains(&params.decoder.to_string()));
}
