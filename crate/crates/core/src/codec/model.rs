use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use syncguard_nn::{Conv2dSpec, Graph, ParamId, ParamStore, Tensor, Var};

use super::config::{BlockKind, ModelConfig};
use super::layers::{Binder, Block, Conv, DgBlock, DrBlock, Linear, Part, PlainBlock, LEAKY_SLOPE};
use super::message::Message;
use crate::audio_io::AudioClip;
use crate::dsp::engine::StftEngine;
use crate::dsp::ops::{istft_fixed_phase, stft_magnitude};
use crate::error::{Error, Result};

/// Initial gain of the layer producing the embedding residual, so that an
/// untrained embedder starts close to the identity.
const RESIDUAL_GAIN: f32 = 0.1;

const DISC_KERNEL: usize = 15;
const DISC_STRIDE: usize = 4;
const DISC_WIDTHS: [usize; 5] = [1, 2, 4, 4, 4];

/// Nodes produced while embedding, kept for losses and inspection.
pub struct EmbedTrace {
    /// Watermarked waveform, shape `[M]`.
    pub audio: Var,
    /// Host magnitude `s`, shape `[1, T, H]`.
    pub magnitude: Var,
    pub watermarked_magnitude: Var,
    /// Message feature, shape `[C_w, 1, H]`.
    pub message_feature: Var,
    /// Message feature replicated over frames, `[C_w, T, H]`.
    pub broadcast: Var,
    /// Embedder input, `[C_v + 1 + C_w, T, H]`.
    pub combined: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamCounts {
    pub encoder: usize,
    pub decoder: usize,
    pub discriminator: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MacCounts {
    pub encoder: u64,
    pub decoder: u64,
    pub discriminator: u64,
}

#[derive(Clone, Debug)]
pub struct CodecModel {
    config: ModelConfig,
    store: ParamStore,
    stage: u8,
    engine: StftEngine,
    fc: Linear,
    carrier: Vec<Conv>,
    we_in: Conv,
    we_blocks: Vec<Block>,
    we_out: Conv,
    dw_in: Conv,
    dw_blocks: Vec<Block>,
    dw_out: Conv,
    head: Linear,
    disc: Vec<Conv>,
    disc_head: Linear,
}

fn blocks(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    prefix: &str,
    part: Part,
    skip_channels: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Block> {
    (0..cfg.n_blocks)
        .map(|i| {
            let name = format!("{prefix}.block{i}");
            let (w, k, d) = (cfg.hidden, cfg.kernel_size, cfg.dilation(i));
            match cfg.block_pattern.kind(i) {
                BlockKind::Dr => Block::Dr(DrBlock::new(store, &name, part, w, k, d, rng)),
                BlockKind::Dg => {
                    Block::Dg(DgBlock::new(store, &name, part, w, skip_channels, k, d, rng))
                }
                BlockKind::Plain => Block::Plain(PlainBlock::new(store, &name, part, w, k, rng)),
            }
        })
        .collect()
}

/// Normalized log magnitude: `ln(s + 1e-3·mean(s) + 1e-6)` minus its mean.
/// Makes the networks indifferent to the overall loudness of the input.
fn log_features(g: &mut Graph, s: Var) -> Var {
    let m = g.mean_all(s);
    let m = g.scale(m, 1e-3);
    let floor = g.add_const(m, 1e-6);
    let shifted = g.add_scalar(s, floor);
    let l = g.ln(shifted);
    let lm = g.mean_all(l);
    let neg = g.scale(lm, -1.0);
    g.add_scalar(l, neg)
}

/// Replicates a `[C, 1, H]` feature `t` times along the frame axis.
pub fn broadcast(f_w: &Tensor, t: usize) -> Result<Tensor> {
    if t < 1 {
        return Err(Error::Contract("broadcast needs at least one frame".into()));
    }
    let shape = f_w.shape();
    if shape.len() != 3 || shape[1] != 1 {
        return Err(Error::Contract(format!(
            "broadcast expects [C, 1, H], got {shape:?}"
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(f_w.clone());
    let y = g.broadcast_axis(x, 1, t);
    Ok(g.value(y).clone())
}

impl CodecModel {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let engine = StftEngine::new(config.stft)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let h = c.n_bins();
        let k = c.kernel_size;
        let enc = Part::Encoder;
        let dec = Part::Decoder;

        let fc = Linear::new(&mut store, "enc.fc", enc, c.n_bits, c.c_w * h, &mut rng);
        let carrier = vec![
            Conv::same(&mut store, "enc.carrier0", enc, 1, c.c_v, k, 1, 1.0, &mut rng),
            Conv::same(&mut store, "enc.carrier1", enc, c.c_v, c.c_v, k, 1, 1.0, &mut rng),
        ];
        let we_in = Conv::same(&mut store, "enc.we_in", enc, c.c_v + 1 + c.c_w, c.hidden, k, 1, 1.0, &mut rng);
        let we_blocks = blocks(c, &mut store, "enc.we", enc, 1 + c.c_w, &mut rng);
        let we_out = Conv::same(&mut store, "enc.we_out", enc, c.hidden, 1, k, 1, RESIDUAL_GAIN, &mut rng);
        store.get_mut(we_out.bias).data_mut().fill(0.0);

        let dw_in = Conv::same(&mut store, "dec.dw_in", dec, 1, c.hidden, k, 1, 1.0, &mut rng);
        let dw_blocks = blocks(c, &mut store, "dec.dw", dec, 1, &mut rng);
        let dw_out = Conv::same(&mut store, "dec.dw_out", dec, c.hidden, c.c_w, k, 1, 1.0, &mut rng);
        let head = Linear::new(&mut store, "dec.head", dec, c.c_w * h, c.n_bits, &mut rng);

        let spec = Conv2dSpec {
            stride: (1, DISC_STRIDE),
            dilation: (1, 1),
            padding: (0, DISC_KERNEL / 2),
        };
        let mut disc = Vec::new();
        let mut c_in = 1;
        for (i, mult) in DISC_WIDTHS.iter().enumerate() {
            let c_out = mult * c.disc_width;
            disc.push(Conv::new(
                &mut store,
                &format!("disc.conv{i}"),
                Part::Discriminator,
                c_in,
                c_out,
                (1, DISC_KERNEL),
                spec,
                1.0,
                &mut rng,
            ));
            c_in = c_out;
        }
        let disc_head = Linear::new(&mut store, "disc.head", Part::Discriminator, c_in, 1, &mut rng);

        Ok(Self {
            config,
            store,
            stage: 1,
            engine,
            fc,
            carrier,
            we_in,
            we_blocks,
            we_out,
            dw_in,
            dw_blocks,
            dw_out,
            head,
            disc,
            disc_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn engine(&self) -> &StftEngine {
        &self.engine
    }

    pub fn stage(&self) -> u8 {
        self.stage
    }

    pub fn set_stage(&mut self, stage: u8) -> Result<()> {
        if !(1..=2).contains(&stage) {
            return Err(Error::Contract(format!("training stage must be 1 or 2, got {stage}")));
        }
        self.stage = stage;
        Ok(())
    }

    pub fn n_bits(&self) -> usize {
        self.config.n_bits
    }

    /// Smallest clip the codec accepts.
    pub fn min_samples(&self) -> usize {
        self.config.stft.min_samples()
    }

    pub fn part_of(&self, id: ParamId) -> Part {
        let name = self.store.name(id);
        if name.starts_with("enc.") {
            Part::Encoder
        } else if name.starts_with("dec.") {
            Part::Decoder
        } else {
            Part::Discriminator
        }
    }

    pub fn param_ids(&self, parts: &[Part]) -> Vec<ParamId> {
        self.store.ids().filter(|&id| parts.contains(&self.part_of(id))).collect()
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let mut out = ParamCounts::default();
        for (id, _, t) in self.store.iter() {
            match self.part_of(id) {
                Part::Encoder => out.encoder += t.len(),
                Part::Decoder => out.decoder += t.len(),
                Part::Discriminator => out.discriminator += t.len(),
            }
        }
        out
    }

    /// Analytic multiply-accumulate count of one forward pass over
    /// `samples` samples, excluding the STFT.
    pub fn macs(&self, samples: usize) -> MacCounts {
        let t = self.config.stft.n_frames(samples);
        let h = self.config.n_bins();
        let conv = |c: &Conv| c.cost(t, h).1;
        let trunk = |blocks: &[Block]| -> u64 {
            blocks.iter().flat_map(|b| b.convs()).map(conv).sum()
        };
        let encoder = self.fc.macs()
            + self.carrier.iter().map(conv).sum::<u64>()
            + conv(&self.we_in)
            + trunk(&self.we_blocks)
            + conv(&self.we_out);
        let decoder = conv(&self.dw_in) + trunk(&self.dw_blocks) + conv(&self.dw_out) + self.head.macs();
        let mut w = samples;
        let mut discriminator = self.disc_head.macs();
        for c in &self.disc {
            let ((_, ow), m) = c.cost(1, w);
            discriminator += m;
            w = ow;
        }
        MacCounts {
            encoder,
            decoder,
            discriminator,
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let need = self.min_samples();
        if len < need {
            return Err(Error::InputTooShort { got: len, need });
        }
        Ok(())
    }

    fn check_message(&self, msg: &Message) -> Result<()> {
        if msg.len() != self.config.n_bits {
            return Err(Error::Contract(format!(
                "message has {} bits, model expects {}",
                msg.len(),
                self.config.n_bits
            )));
        }
        Ok(())
    }

    fn signal_node(g: &mut Graph, x: Var) -> Result<usize> {
        match g.shape(x) {
            [m] => Ok(*m),
            other => Err(Error::Contract(format!("expected a 1-D signal, got {other:?}"))),
        }
    }

    // ---- graph-level network ----

    /// Message feature `[C_w, 1, H]` from the bits presented as `2b - 1`.
    pub fn expand_message_graph(&self, g: &mut Graph, b: &mut Binder, msg: &Message) -> Result<Var> {
        self.check_message(msg)?;
        let bits = g.constant(Tensor::new(&[msg.len()], msg.signed()));
        let f = self.fc.forward(g, b, bits)?;
        Ok(g.reshape(f, &[self.config.c_w, 1, self.config.n_bins()]))
    }

    pub fn embed_graph(&self, g: &mut Graph, b: &mut Binder, x: Var, msg: &Message) -> Result<EmbedTrace> {
        self.check_message(msg)?;
        let m = Self::signal_node(g, x)?;
        self.check_len(m)?;
        let polar = stft_magnitude(g, &self.engine, x)?;
        let s = polar.magnitude;
        let feat = log_features(g, s);

        let mut f_c = feat;
        for conv in &self.carrier {
            let h = conv.forward(g, b, f_c)?;
            f_c = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let f_w = self.expand_message_graph(g, b, msg)?;
        let f_wb = g.broadcast_axis(f_w, 1, polar.frames);
        let combined = g.concat(&[f_c, feat, f_wb]);

        let mut h = self.we_in.forward(g, b, combined)?;
        for blk in &self.we_blocks {
            h = blk.forward(g, b, h, &[feat, f_wb])?;
        }
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let r = self.we_out.forward(g, b, h)?;
        let sr = g.mul(s, r);
        let sw = g.add(s, sr);
        let sw = g.relu(sw);
        let audio = istft_fixed_phase(g, &self.engine, sw, polar.phase, polar.frames, m)?;
        Ok(EmbedTrace {
            audio,
            magnitude: s,
            watermarked_magnitude: sw,
            message_feature: f_w,
            broadcast: f_wb,
            combined,
        })
    }

    /// Extractor output before temporal pooling, `[C_w, T, H]`.
    pub fn decoder_trunk_graph(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let m = Self::signal_node(g, x)?;
        self.check_len(m)?;
        let polar = stft_magnitude(g, &self.engine, x)?;
        let feat = log_features(g, polar.magnitude);
        let mut h = self.dw_in.forward(g, b, feat)?;
        for blk in &self.dw_blocks {
            h = blk.forward(g, b, h, &[feat])?;
        }
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        self.dw_out.forward(g, b, h)
    }

    /// Temporal mean, linear head and logistic squashing: soft scores `[n]`.
    pub fn decoder_head_graph(&self, g: &mut Graph, b: &mut Binder, trunk: Var) -> Result<Var> {
        let shape = g.shape(trunk).to_vec();
        if shape.len() != 3 || shape[0] != self.config.c_w || shape[2] != self.config.n_bins() {
            return Err(Error::Contract(format!(
                "decoder head expects [{}, T, {}], got {shape:?}",
                self.config.c_w,
                self.config.n_bins()
            )));
        }
        let pooled = g.mean_axis(trunk, 1);
        let logits = self.head.forward(g, b, pooled)?;
        Ok(g.sigmoid(logits))
    }

    pub fn extract_graph(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let trunk = self.decoder_trunk_graph(g, b, x)?;
        self.decoder_head_graph(g, b, trunk)
    }

    /// Discriminator logit, shape `[1]`.
    pub fn discriminate_graph(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let m = Self::signal_node(g, x)?;
        if m == 0 {
            return Err(Error::Contract("discriminator needs a nonempty clip".into()));
        }
        let mut h = g.reshape(x, &[1, 1, m]);
        for conv in &self.disc {
            let y = conv.forward(g, b, h)?;
            h = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let c = g.shape(h)[0];
        let w = g.shape(h)[2];
        let h = g.reshape(h, &[c, w]);
        let pooled = g.mean_axis(h, 1);
        self.disc_head.forward(g, b, pooled)
    }

    // ---- inference ----

    fn clip_node(g: &mut Graph, clip: &AudioClip) -> Var {
        g.constant(Tensor::new(&[clip.len()], clip.samples().to_vec()))
    }

    pub fn expand_message(&self, msg: &Message) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.store);
        let v = self.expand_message_graph(&mut g, &mut b, msg)?;
        Ok(g.value(v).clone())
    }

    pub fn embed(&self, clip: &AudioClip, msg: &Message) -> Result<AudioClip> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.store);
        let x = Self::clip_node(&mut g, clip);
        let trace = self.embed_graph(&mut g, &mut b, x, msg)?;
        AudioClip::new(g.value(trace.audio).data().to_vec(), clip.sample_rate())
    }

    /// Soft scores in `[0, 1]`.
    pub fn extract_soft(&self, clip: &AudioClip) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.store);
        let x = Self::clip_node(&mut g, clip);
        let soft = self.extract_graph(&mut g, &mut b, x)?;
        Ok(g.value(soft).data().to_vec())
    }

    /// Thresholded bits at 0.5 together with the soft scores.
    pub fn extract(&self, clip: &AudioClip) -> Result<(Message, Vec<f32>)> {
        let soft = self.extract_soft(clip)?;
        Ok((self.threshold(&soft)?, soft))
    }

    pub fn threshold(&self, soft: &[f32]) -> Result<Message> {
        let bits = soft.iter().map(|&p| u8::from(p > 0.5)).collect();
        Message::new(bits, self.config.pattern_len)
    }

    /// Extractor trunk output for `clip`, `[C_w, T, H]`.
    pub fn trunk_features(&self, clip: &AudioClip) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.store);
        let x = Self::clip_node(&mut g, clip);
        let t = self.decoder_trunk_graph(&mut g, &mut b, x)?;
        Ok(g.value(t).clone())
    }

    /// Soft scores from a trunk output produced by [`Self::trunk_features`].
    pub fn head_from_trunk(&self, trunk: &Tensor) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.store);
        let t = g.constant(trunk.clone());
        let soft = self.decoder_head_graph(&mut g, &mut b, t)?;
        Ok(g.value(soft).data().to_vec())
    }

    pub fn discriminate(&self, clip: &AudioClip) -> Result<f32> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.store);
        let x = Self::clip_node(&mut g, clip);
        let logit = self.discriminate_graph(&mut g, &mut b, x)?;
        Ok(g.value(logit).item())
    }

    /// Parameter tensors in registration order, for persistence.
    pub(crate) fn store_parts(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.store.iter().map(|(_, n, t)| (n, t))
    }
}
