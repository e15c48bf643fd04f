//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line each and exits non-zero if any failed.
//!
//! The toy training run dominates the runtime (roughly 17 minutes on
//! one CPU core).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use common::{peak_hz, snr_db, tone, SR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use syncguard::audio_io::{save_audio, AudioClip};
use syncguard::codec::{Binder, CodecModel, Message, ModelConfig, Part};
use syncguard::distortion::{self, AttackChain, AttackSpec, CropPosition, Distorter, SamplerConfig};
use syncguard::dsp::{istft, stft, StftConfig};
use syncguard::evalbench::{acc, localization_trace, robustness_table, EvalReport};
use syncguard::synth::corpus;
use syncguard::trainer::{loss_adv, loss_e, loss_w, RunPaths, TrainConfig, Trainer};
use syncguard_nn::{Graph, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn stft_round_trip() -> Outcome {
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let len = rng.gen_range(SR as usize / 2..=3 * SR as usize);
        let x: Vec<f32> = (0..len).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let clip = AudioClip::new(x, SR).unwrap();
        let y = istft(&stft(&clip, &cfg).unwrap(), &cfg, len).unwrap();
        worst = worst.min(snr_db(clip.samples(), y.samples()));
    }
    check(worst >= 40.0, format!("worst reconstruction SNR {worst:.1} dB over 100 clips"))
}

fn tsm_contract() -> Outcome {
    let x = tone(440.0, SR as usize);
    let mut notes = Vec::new();
    let mut ok = true;
    for rate in [0.8, 0.9, 1.1, 1.2] {
        let y = distortion::tsm(&x, rate).unwrap();
        let len_err = (y.len() as f64 - rate * x.len() as f64).abs();
        let f = peak_hz(y.samples(), SR);
        ok &= len_err <= 256.0 && (f - 440.0).abs() <= 4.4;
        notes.push(format!("{rate}: len {} peak {f:.1} Hz", y.len()));
    }
    check(ok, notes.join(", "))
}

fn pitch_contract() -> Outcome {
    let x = tone(440.0, SR as usize);
    let mut notes = Vec::new();
    let mut ok = distortion::semitones_to_ratio(12.0) == 2.0;
    for rho in [0.9, 1.1] {
        let y = distortion::pitch_scale_ratio(&x, rho).unwrap();
        let f = peak_hz(y.samples(), SR);
        ok &= y.len().abs_diff(x.len()) <= 256 && (f - 440.0 * rho).abs() <= 0.02 * 440.0 * rho;
        notes.push(format!("{rho}: len {} peak {f:.1} Hz", y.len()));
    }
    notes.push(format!("2^(12/12) = {}", distortion::semitones_to_ratio(12.0)));
    check(ok, notes.join(", "))
}

fn attack_oracles() -> Outcome {
    let m = 1000;
    let short = AudioClip::new(vec![0.1; m], SR).unwrap();
    let jit = distortion::jitter(&short, 100, 3).unwrap().len();
    let long = tone(300.0, SR as usize);
    let crop = distortion::crop(&long, 0.2, CropPosition::Random, 3).unwrap().len();
    let crop_expect = long.len() - (0.2 * long.len() as f64).round() as usize;
    let mut ok = jit == 990 && crop == crop_expect;
    let mut notes = vec![format!("jitter {jit}"), format!("crop {crop}/{crop_expect}")];
    for target in [20.0, 30.0] {
        let y = distortion::gaussian_noise(&long, target, 5).unwrap();
        let got = snr_db(long.samples(), y.samples());
        ok &= (got - target).abs() <= 0.5;
        notes.push(format!("noise {target} -> {got:.2} dB"));
    }
    check(ok, notes.join(", "))
}

fn differentiability() -> Outcome {
    let model = CodecModel::new(ModelConfig::toy(16, 4), 2).unwrap();
    let clip = corpus(7, 1, SR as usize, SR).remove(0);
    let msg = Message::random(16, 4, &mut ChaCha8Rng::seed_from_u64(3));
    let d = Distorter::default();
    let mut ok = true;
    let mut notes = Vec::new();
    for attack in ["identity", "tsm:rate=0.9", "pitch:ratio=1.1", "noise:snr=30", "lowpass:cutoff=6000"] {
        let spec: AttackSpec = attack.parse().unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(model.store(), &[Part::Encoder]);
        let x = g.constant(Tensor::new(&[clip.len()], clip.samples().to_vec()));
        let trace = model.embed_graph(&mut g, &mut b, x, &msg).unwrap();
        let y = d.apply_graph(&mut g, &spec, trace.audio, SR, 4).unwrap();
        let soft = model.extract_graph(&mut g, &mut b, y).unwrap();
        let loss = syncguard::trainer::loss::loss_w_graph(&mut g, soft, &msg).unwrap();
        let grads = g.backward(loss);
        let mut norm = 0.0f64;
        let mut finite = true;
        for (id, t) in grads.params() {
            if model.store().name(id).starts_with("enc.") {
                finite &= t.data().iter().all(|v| v.is_finite());
                norm += t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            }
        }
        ok &= finite && norm > 0.0;
        notes.push(format!("{attack} |g|={:.2e}", norm.sqrt()));
    }
    for attack in ["tsm:rate=0.9", "tsm:rate=1.1", "pitch:ratio=1.1", "resample:ratio=0.7"] {
        let worst = fd_relative_error(&d, &attack.parse().unwrap());
        ok &= worst <= 1e-3;
        notes.push(format!("{attack} fd rel err {worst:.1e}"));
    }
    check(ok, notes.join(", "))
}

/// Largest relative error between the analytic and central-difference
/// directional derivative over a few random directions on a 2048-sample probe.
fn fd_relative_error(d: &Distorter, attack: &AttackSpec) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..2048).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let t = d.traced(attack, &x, SR, 0).unwrap();
    let c: Vec<f64> = (0..t.y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grad = (t.vjp)(&c);
    let f = |x: &[f64]| -> f64 {
        let y = d.traced(attack, x, SR, 0).unwrap().y;
        y.iter().zip(&c).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let v: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = 1e-5;
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        let an: f64 = grad.iter().zip(&v).map(|(a, b)| a * b).sum();
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()));
    }
    worst
}

struct Trained {
    stage1: EvalReport,
    stage2: CodecModel,
    report: EvalReport,
    minutes: f64,
    disc_loss: (f64, f64),
}

const TRAIN_CLIPS: usize = 64;
const HELD_OUT: usize = 16;
const STAGE1_STEPS: usize = 500;
const STAGE2_STEPS: usize = 500;

fn train_toy() -> Trained {
    let start = Instant::now();
    let clips = corpus(100, TRAIN_CLIPS, SR as usize, SR);
    let held_out = corpus(10_000, HELD_OUT, SR as usize, SR);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        stage2_learning_rate: Some(STAGE2_LR),
        lambda_w: 1.0,
        batch_size: 2,
        stage1_steps: STAGE1_STEPS,
        stage2_steps: STAGE2_STEPS,
        stage1_exit_acc: None,
        sampler: SamplerConfig::from_entries(&[
            ("tsm:rate=0.9", 0.3),
            ("tsm:rate=1.1", 0.3),
            ("noise:snr=30", 0.1),
            ("crop:fraction=0.1", 0.1),
        ]),
        ..TrainConfig::default()
    };
    let model = CodecModel::new(ModelConfig::toy(16, 4), 1).unwrap();
    let mut trainer = Trainer::new(model, cfg, clips).unwrap();
    let d = Distorter::default();
    while trainer.state().step < STAGE1_STEPS {
        trainer.step().unwrap();
    }
    let identity = ["identity".parse().unwrap()];
    let stage1 = robustness_table(trainer.model(), &held_out, &identity, 77, &d).unwrap();
    while !trainer.finished() {
        trainer.step().unwrap();
    }
    let history = &trainer.state().history;
    let early: f64 = history[..10].iter().map(|m| m.loss_d).sum::<f64>() / 10.0;
    let late: f64 = history[STAGE1_STEPS - 10..STAGE1_STEPS].iter().map(|m| m.loss_d).sum::<f64>() / 10.0;
    let (model, _) = trainer.into_parts();
    let attacks: Vec<_> = [
        "identity",
        "noise:snr=30",
        "tsm:rate=0.9",
        "tsm:rate=1.1",
        "crop:fraction=0.1",
        "crop:fraction=0.2,position=begin",
        "crop:fraction=0.2,position=middle",
        "crop:fraction=0.2,position=end",
    ]
    .iter()
    .map(|s| s.parse().unwrap())
    .collect();
    let report = robustness_table(&model, &held_out, &attacks, 78, &d).unwrap();
    Trained {
        stage1,
        stage2: model,
        report,
        minutes: start.elapsed().as_secs_f64() / 60.0,
        disc_loss: (early, late),
    }
}

const STAGE2_LR: f64 = 1e-4;

/// Report rows are labelled with the canonical chain text, so the lookup key
/// goes through the parser too. A missing row is a failure, not a zero.
fn row_acc(r: &EvalReport, attack: &str) -> f64 {
    let key = attack.parse::<AttackChain>().unwrap().to_string();
    r.row(&key)
        .and_then(|row| row.acc)
        .unwrap_or_else(|| panic!("no scored row for {key}"))
}

fn toy_training(t: &Trained) -> Outcome {
    let s1_acc = row_acc(&t.stage1, "identity");
    let s1_snr = t.stage1.snr_db;
    let mut ok = s1_acc >= 0.99 && s1_snr >= 15.0 && t.minutes <= 360.0;
    let mut notes = vec![format!("stage 1 held-out acc {s1_acc:.4} snr {s1_snr:.1} dB")];
    for a in ["noise:snr=30", "tsm:rate=0.9", "tsm:rate=1.1", "crop:fraction=0.1"] {
        let v = row_acc(&t.report, a);
        ok &= v >= 0.90;
        notes.push(format!("{a} {v:.4}"));
    }
    // The trained model must stay imperceptible after fine-tuning too.
    ok &= t.report.snr_db >= 15.0;
    notes.push(format!(
        "stage 2 clean acc {:.4} snr {:.1} dB",
        row_acc(&t.report, "identity"),
        t.report.snr_db
    ));
    notes.push(format!("L_d {:.3} -> {:.3}", t.disc_loss.0, t.disc_loss.1));
    notes.push(format!("{:.1} min", t.minutes));
    check(ok, notes.join(", "))
}

fn crop_positions(t: &Trained) -> Outcome {
    let identity = row_acc(&t.report, "identity");
    let mut ok = true;
    let mut notes = vec![format!("identity {identity:.4}")];
    for pos in ["begin", "middle", "end"] {
        let v = row_acc(&t.report, &format!("crop:fraction=0.2,position={pos}"));
        ok &= (v - identity).abs() <= 0.05;
        notes.push(format!("{pos} {v:.4}"));
    }
    check(ok, notes.join(", "))
}

fn arbitrary_length(t: &Trained) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    t.stage2.save_checkpoint(&path).unwrap();
    let model = CodecModel::load_checkpoint(&path).unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for (i, secs) in [0.5, 1.0, 5.0, 10.0].into_iter().enumerate() {
        let clip = corpus(20_000 + i as u64, 1, (secs * SR as f64) as usize, SR).remove(0);
        let msg = Message::random(16, 4, &mut ChaCha8Rng::seed_from_u64(i as u64));
        let marked = model.embed(&clip, &msg).unwrap();
        let (bits, soft) = model.extract(&marked).unwrap();
        ok &= marked.len() == clip.len() && bits.len() == 16 && soft.len() == 16;
        notes.push(format!("{secs} s: {} bits acc {:.3}", bits.len(), acc(&bits, &msg).unwrap()));
    }
    let host = corpus(30_000, 1, 3 * SR as usize, SR).remove(0);
    let trace = localization_trace(&model, &[host], 1.0, 0.05, 0.0, 5).unwrap();
    notes.push(format!("on-watermark window pattern_ok rate {:.2}", trace.pattern_rate[0]));
    check(ok, notes.join(", "))
}

fn sampler_statistics() -> Outcome {
    let cfg = SamplerConfig::from_entries(&[
        ("tsm:rate=0.9", 0.3),
        ("noise:snr=30", 0.1),
        ("amplitude:scale=0.8", 0.05),
        ("pitch:ratio=1.1", 0.3),
        ("lowpass:cutoff=6000", 0.05),
    ]);
    let s = cfg.build().unwrap();
    let expect = [0.3, 0.1, 0.05, 0.3, 0.05, 0.2];
    let mut counts = [0usize; 6];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 100_000;
    for _ in 0..n {
        counts[s.draw_index(&mut rng).unwrap_or(5)] += 1;
    }
    let worst = counts
        .iter()
        .zip(expect)
        .map(|(&c, e)| (c as f64 / n as f64 - e).abs())
        .fold(0.0, f64::max);
    check(worst <= 0.01, format!("max |freq - weight| {worst:.4} over 1e5 draws"))
}

fn loss_analytics() -> Outcome {
    let bits = Message::new(vec![1, 0, 1, 1, 0, 0, 1, 0, 1, 1], 0).unwrap();
    let lw = loss_w(&[0.5; 10], &bits).unwrap();
    let a: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.01).sin()).collect();
    let a_shift: Vec<f32> = a.iter().map(|v| v + 0.1).collect();
    let le = loss_e(&a, &a_shift).unwrap();
    let ladv = loss_adv(0.0);
    let ok = (lw - 0.25).abs() < 1e-12 && (le - 0.01).abs() < 1e-6 && (ladv - 0.5f64.ln()).abs() < 1e-9;
    check(ok, format!("loss_w {lw}, loss_e {le:.8}, L_adv(0) {ladv:.12}"))
}

fn reproducibility() -> Outcome {
    let tiny = ModelConfig {
        n_bits: 8,
        pattern_len: 2,
        c_w: 2,
        c_v: 2,
        hidden: 4,
        n_blocks: 2,
        disc_width: 2,
        ..ModelConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let clips = corpus(300, 8, SR as usize / 2, SR);
    let run = |name: &str| -> Vec<u8> {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 1,
            stage1_steps: 50,
            stage2_steps: 50,
            stage1_exit_acc: None,
            sampler: SamplerConfig::default_pool(),
            seed: 5,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(CodecModel::new(tiny.clone(), 5).unwrap(), cfg, clips.clone()).unwrap();
        let path = dir.path().join(name);
        let paths = RunPaths {
            metrics: Some(path.clone()),
            checkpoint_dir: None,
        };
        t.run(&paths, |_| {}).unwrap();
        std::fs::read(path).unwrap()
    };
    let a = run("a.jsonl");
    let b = run("b.jsonl");
    let lines = String::from_utf8_lossy(&a).lines().count();
    let logs_equal = a == b && lines == 100;

    let model = CodecModel::new(ModelConfig::toy(16, 4), 9).unwrap();
    model.save_checkpoint(dir.path().join("m.ckpt")).unwrap();
    save_audio(&corpus(400, 1, SR as usize, SR).remove(0), dir.path().join("a.wav")).unwrap();
    let cli = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_syncguard"))
            .args(args)
            .current_dir(dir.path())
            .output()
            .unwrap()
    };
    let embed = cli(&["embed", "--model", "m.ckpt", "--in", "a.wav", "--out", "aw.wav", "--seed", "4"]);
    let extract = cli(&["extract", "--model", "m.ckpt", "--in", "aw.wav", "--soft", "--manifest", "x.json"]);
    let replay = cli(&["replay", "x.json"]);
    let replay_embed = cli(&["replay", "aw.wav.manifest.json"]);
    let replay_ok = [&embed, &extract, &replay, &replay_embed].iter().all(|o| o.status.success())
        && String::from_utf8_lossy(&replay.stdout).starts_with(&*String::from_utf8_lossy(&extract.stdout));
    check(
        logs_equal && replay_ok,
        format!("metrics logs identical over {lines} steps: {logs_equal}; CLI replay identical: {replay_ok}"),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1} s): {detail}");
            }
        }
    };
    report(1, "STFT round trip", &mut stft_round_trip);
    report(2, "TSM contract", &mut tsm_contract);
    report(3, "pitch-scale contract", &mut pitch_contract);
    report(4, "attack length and measurement oracles", &mut attack_oracles);
    report(5, "differentiability", &mut differentiability);
    let trained = catch_unwind(train_toy).ok();
    let needs_model = |f: fn(&Trained) -> Outcome| {
        let t = trained.as_ref();
        move || t.map_or_else(|| Err("toy training failed".to_string()), f)
    };
    report(6, "toy end-to-end training", &mut needs_model(toy_training));
    report(7, "broadcast under cropping", &mut needs_model(crop_positions));
    report(8, "arbitrary-length extraction", &mut needs_model(arbitrary_length));
    report(9, "sampler statistics", &mut sampler_statistics);
    report(10, "loss analytics", &mut loss_analytics);
    report(11, "reproducibility", &mut reproducibility);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 11 acceptance criteria passed");
}
