//! Two-stage training: clean embedding first, then the distortion layer.

pub mod config;
pub mod loss;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use syncguard_nn::{Adam, AdamConfig, GradBuffer, Graph, ParamId, Tensor};

use crate::audio_io::{iterate_segments, AudioClip, DatasetSpec};
use crate::codec::{Binder, CodecModel, Message, Part};
use crate::distortion::sampler::AttackSampler;
use crate::distortion::{AttackSpec, Distorter};
use crate::error::{Error, Result};
use crate::evalbench::metrics::{acc_bits, snr};

pub use config::TrainConfig;
pub use loss::{loss_adv, loss_d, loss_e, loss_w};

/// Mixes a base seed with two counters (splitmix64 finalizer).
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-step record written to the metrics log. Losses and scores are batch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub stage: u8,
    pub attack: String,
    pub loss: f64,
    pub loss_e: f64,
    pub loss_w: f64,
    pub loss_adv: f64,
    pub loss_d: f64,
    pub acc: f64,
    pub snr_db: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub stage: u8,
    /// Step at which stage 2 began, if it has.
    pub stage2_start: Option<usize>,
    pub history: Vec<StepMetrics>,
}

impl TrainState {
    pub fn last(&self) -> Option<&StepMetrics> {
        self.history.last()
    }

    /// Records of one stage.
    pub fn stage_history(&self, stage: u8) -> impl DoubleEndedIterator<Item = &StepMetrics> {
        self.history.iter().filter(move |m| m.stage == stage)
    }
}

/// Optional run outputs.
#[derive(Clone, Debug, Default)]
pub struct RunPaths {
    pub metrics: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct Trainer {
    model: CodecModel,
    cfg: TrainConfig,
    clips: Vec<AudioClip>,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    sampler: AttackSampler,
    distorter: Distorter,
    codec_ids: Vec<ParamId>,
    opt_codec: Adam,
    opt_disc: Adam,
    grads: GradBuffer,
    state: TrainState,
}

impl Trainer {
    pub fn new(model: CodecModel, cfg: TrainConfig, clips: Vec<AudioClip>) -> Result<Self> {
        cfg.validate()?;
        if clips.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if let Some(c) = clips.iter().find(|c| c.len() < model.min_samples()) {
            return Err(Error::InputTooShort {
                got: c.len(),
                need: model.min_samples(),
            });
        }
        let sampler = cfg.sampler.build()?;
        let distorter = Distorter::new(model.config().stft, cfg.phase_mode)?;
        let codec_ids = model.param_ids(&[Part::Encoder, Part::Decoder]);
        let disc_ids = model.param_ids(&[Part::Discriminator]);
        let adam = |lr: f64| AdamConfig {
            lr: lr as f32,
            ..AdamConfig::default()
        };
        let opt_codec = Adam::new(model.store(), codec_ids.clone(), adam(cfg.learning_rate));
        let opt_disc = Adam::new(
            model.store(),
            disc_ids,
            adam(cfg.disc_learning_rate.unwrap_or(cfg.learning_rate)),
        );
        let grads = GradBuffer::zeros_like(model.store());
        let state = TrainState {
            step: 0,
            stage: model.stage(),
            stage2_start: (model.stage() == 2).then_some(0),
            history: Vec::new(),
        };
        let mut t = Self {
            order: (0..clips.len()).collect(),
            model,
            cfg,
            clips,
            cursor: 0,
            epoch: 0,
            sampler,
            distorter,
            codec_ids,
            opt_codec,
            opt_disc,
            grads,
            state,
        };
        t.shuffle();
        Ok(t)
    }

    pub fn model(&self) -> &CodecModel {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_parts(self) -> (CodecModel, TrainState) {
        (self.model, self.state)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, self.epoch as u64, 4));
        self.order = (0..self.clips.len()).collect();
        self.order.shuffle(&mut rng);
    }

    fn next_batch(&mut self) -> Vec<usize> {
        (0..self.cfg.batch_size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.cursor = 0;
                    self.epoch += 1;
                    self.shuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// Total steps this trainer will run.
    pub fn total_steps(&self) -> usize {
        self.cfg.stage1_steps + self.cfg.stage2_steps
    }

    pub fn finished(&self) -> bool {
        match self.state.stage2_start {
            Some(start) => self.state.step >= start + self.cfg.stage2_steps,
            None => self.cfg.stage2_steps == 0 && self.state.step >= self.cfg.stage1_steps,
        }
    }

    fn maybe_advance_stage(&mut self) -> Result<()> {
        if self.state.stage != 1 {
            return Ok(());
        }
        let by_steps = self.state.step >= self.cfg.stage1_steps;
        let by_acc = self.cfg.stage1_exit_acc.is_some_and(|target| {
            let w = self.cfg.exit_window;
            let recent: Vec<f64> = self.state.stage_history(1).rev().take(w).map(|m| m.acc).collect();
            recent.len() == w && recent.iter().sum::<f64>() / w as f64 >= target
        });
        if by_steps || by_acc {
            log::info!("entering stage 2 at step {}", self.state.step);
            self.state.stage = 2;
            self.state.stage2_start = Some(self.state.step);
            self.model.set_stage(2)?;
            if let Some(lr) = self.cfg.stage2_learning_rate {
                self.opt_codec.set_lr(lr as f32);
            }
        }
        Ok(())
    }

    /// One optimization step over a batch. Stage 1 uses no distortion;
    /// stage 2 draws one attack for the whole batch.
    pub fn step(&mut self) -> Result<StepMetrics> {
        self.maybe_advance_stage()?;
        let step = self.state.step;
        let stage = self.state.stage;
        let seed = self.cfg.seed;
        let attack = if stage == 1 {
            AttackSpec::Identity
        } else {
            self.sampler.sample(derive_seed(seed, step as u64, 2))?
        };
        let batch = self.next_batch();
        let n = batch.len() as f64;
        let cfg = &self.cfg;
        let model = &self.model;
        let mut sums = [0.0f64; 7];
        self.grads.clear();
        let mut watermarked = Vec::with_capacity(batch.len());

        for (i, &ci) in batch.iter().enumerate() {
            let clip = &self.clips[ci];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step as u64, 1000 + i as u64));
            let msg = Message::random(model.n_bits(), 0, &mut rng);
            let mut g = Graph::new();
            let mut b = Binder::new(model.store(), &[Part::Encoder, Part::Decoder]);
            let x = g.constant(Tensor::new(&[clip.len()], clip.samples().to_vec()));
            let trace = model.embed_graph(&mut g, &mut b, x, &msg)?;
            let a_w = trace.audio;
            let le = loss::loss_e_graph(&mut g, x, a_w)?;
            let logit = model.discriminate_graph(&mut g, &mut b, a_w)?;
            let ladv = loss::loss_adv_graph(&mut g, logit);
            let distort_seed = derive_seed(seed, step as u64, 2000 + i as u64);
            let attacked = self
                .distorter
                .apply_graph(&mut g, &attack, a_w, clip.sample_rate(), distort_seed)?;
            let soft = model.extract_graph(&mut g, &mut b, attacked)?;
            let lw = loss::loss_w_graph(&mut g, soft, &msg)?;
            let terms = [(le, cfg.lambda_e), (ladv, cfg.lambda_adv), (lw, cfg.lambda_w)];
            let mut total = None;
            for (v, lambda) in terms {
                let t = g.scale(v, lambda as f32);
                total = Some(match total {
                    None => t,
                    Some(acc) => g.add(acc, t),
                });
            }
            let total = total.expect("three terms");
            let l = g.value(total).item() as f64;
            if !l.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss is {l} under attack {attack}"),
                });
            }
            let grads = g.backward(total);
            self.grads.accumulate(&grads, (1.0 / n) as f32);

            let soft_v = g.value(soft).data();
            let bits: Vec<u8> = soft_v.iter().map(|&p| u8::from(p > 0.5)).collect();
            let aw = g.value(a_w).data().to_vec();
            sums[0] += l;
            sums[1] += g.value(le).item() as f64;
            sums[2] += g.value(lw).item() as f64;
            sums[3] += g.value(ladv).item() as f64;
            sums[5] += acc_bits(&bits, msg.bits())?;
            sums[6] += snr(clip.samples(), &aw).unwrap_or(f64::NAN);
            watermarked.push(aw);
        }

        if let Some(limit) = cfg.grad_clip {
            let norm = self.grads.norm(&self.codec_ids) as f64;
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            if norm > limit {
                self.grads.scale(&self.codec_ids, (limit / norm) as f32);
            }
        }
        self.opt_codec.step(self.model.store_mut(), &self.grads);

        // Discriminator update on the watermarked clips of this step.
        self.grads.clear();
        for (&ci, aw) in batch.iter().zip(watermarked) {
            let clip = &self.clips[ci];
            let mut g = Graph::new();
            let mut b = Binder::new(self.model.store(), &[Part::Discriminator]);
            let x = g.constant(Tensor::new(&[clip.len()], clip.samples().to_vec()));
            let xw = g.constant(Tensor::new(&[aw.len()], aw));
            let la = self.model.discriminate_graph(&mut g, &mut b, x)?;
            let lwm = self.model.discriminate_graph(&mut g, &mut b, xw)?;
            let ld = loss::loss_d_graph(&mut g, la, lwm);
            let v = g.value(ld).item() as f64;
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("discriminator loss is {v}"),
                });
            }
            sums[4] += v;
            if self.cfg.train_discriminator {
                let grads = g.backward(ld);
                self.grads.accumulate(&grads, (1.0 / n) as f32);
            }
        }
        if self.cfg.train_discriminator {
            self.opt_disc.step(self.model.store_mut(), &self.grads);
        }
        if !self.model.store().all_finite() {
            return Err(Error::Diverged {
                step,
                detail: "parameters became non-finite".into(),
            });
        }

        let m = StepMetrics {
            step,
            epoch: self.epoch,
            stage,
            attack: attack.to_string(),
            loss: sums[0] / n,
            loss_e: sums[1] / n,
            loss_w: sums[2] / n,
            loss_adv: sums[3] / n,
            loss_d: sums[4] / n,
            acc: sums[5] / n,
            snr_db: sums[6] / n,
        };
        self.state.step += 1;
        self.state.history.push(m.clone());
        Ok(m)
    }

    /// Runs until both stages are done. `on_step` sees every record.
    pub fn run(&mut self, paths: &RunPaths, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        let mut log = match &paths.metrics {
            Some(p) => Some(BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?)),
            None => None,
        };
        if let Some(dir) = &paths.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while !self.finished() {
            let m = self.step()?;
            if m.step % self.cfg.log_every == 0 {
                if let (Some(w), Some(p)) = (log.as_mut(), &paths.metrics) {
                    let line = serde_json::to_string(&m).expect("metrics serialize");
                    writeln!(w, "{line}").map_err(|e| Error::io(p, e))?;
                }
                log::info!(
                    "step {} stage {} [{}] L={:.5} Le={:.2e} Lw={:.4} acc={:.3} snr={:.1}",
                    m.step, m.stage, m.attack, m.loss, m.loss_e, m.loss_w, m.acc, m.snr_db
                );
            }
            on_step(&m);
            if let Some(dir) = &paths.checkpoint_dir {
                if self.state.step.is_multiple_of(self.cfg.checkpoint_every) {
                    self.model
                        .save_checkpoint(dir.join(format!("step{:06}.ckpt", self.state.step)))?;
                }
            }
        }
        if let (Some(w), Some(p)) = (log.as_mut(), &paths.metrics) {
            w.flush().map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

/// Loads every segment of `data` into memory.
pub fn load_dataset(data: &DatasetSpec) -> Result<Vec<AudioClip>> {
    let segments = iterate_segments(data)?;
    let clips: Vec<AudioClip> = segments.collect::<Result<_>>()?;
    if clips.is_empty() {
        return Err(Error::Config(format!(
            "no usable segments under {}",
            data.root_path.display()
        )));
    }
    Ok(clips)
}

/// Full two-stage training on the segments of `data`.
pub fn train(
    model: CodecModel,
    data: &DatasetSpec,
    cfg: TrainConfig,
    paths: &RunPaths,
) -> Result<(CodecModel, TrainState)> {
    let clips = load_dataset(data)?;
    let mut trainer = Trainer::new(model, cfg, clips)?;
    trainer.run(paths, |_| {})?;
    Ok(trainer.into_parts())
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("metrics line: {e}"))))
        .collect()
}
