//! Parameterized building blocks and the graph binding that decides which
//! parameters receive gradients.

use std::collections::HashMap;

use rand::Rng;
use syncguard_nn::conv::{Geometry, output_size};
use syncguard_nn::{Conv2dSpec, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f32 = 0.2;

/// Sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Encoder,
    Decoder,
    Discriminator,
}

/// Places parameters into one graph, either as trainable leaves or as
/// constants, and reuses the node when a parameter is bound twice.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Vec<Part>,
    bound: HashMap<ParamId, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: &[Part]) -> Self {
        Self {
            store,
            trainable: trainable.to_vec(),
            bound: HashMap::new(),
        }
    }

    /// Every parameter frozen.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn bind(&mut self, g: &mut Graph, id: ParamId, part: Part) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = if self.trainable.contains(&part) {
            g.param(self.store, id)
        } else {
            g.frozen_param(self.store, id)
        };
        self.bound.insert(id, v);
        v
    }
}

fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub part: Part,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub spec: Conv2dSpec,
}

impl Conv {
    /// Weights uniform in `±gain/sqrt(fan_in)`, bias in `±1/sqrt(fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        part: Part,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
        gain: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel.0 * kernel.1) as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(&[c_out, c_in, kernel.0, kernel.1], gain * bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), uniform(&[c_out], bound, rng));
        Self {
            weight,
            bias,
            part,
            c_in,
            c_out,
            kernel,
            spec,
        }
    }

    /// Stride-1 convolution that keeps the spatial size.
    #[allow(clippy::too_many_arguments)]
    pub fn same(
        store: &mut ParamStore,
        name: &str,
        part: Part,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        gain: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let k = (kernel, kernel);
        let spec = Conv2dSpec::same(k, (dilation, dilation));
        Self::new(store, name, part, c_in, c_out, k, spec, gain, rng)
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[0] != self.c_in {
            return Err(Error::Contract(format!(
                "convolution expects [{}, H, W], got {shape:?}",
                self.c_in
            )));
        }
        let (oh, ow) = output_size((shape[1], shape[2]), self.kernel, self.spec);
        if oh == 0 || ow == 0 {
            return Err(Error::Contract(format!(
                "convolution input {shape:?} is smaller than its kernel"
            )));
        }
        let w = b.bind(g, self.weight, self.part);
        let bias = b.bind(g, self.bias, self.part);
        Ok(g.conv2d(x, w, Some(bias), self.spec))
    }

    pub fn num_params(&self) -> usize {
        self.c_out * self.c_in * self.kernel.0 * self.kernel.1 + self.c_out
    }

    /// Output spatial size and multiply-accumulate count for an input of `h × w`.
    pub fn cost(&self, h: usize, w: usize) -> ((usize, usize), u64) {
        let geo = Geometry::new(
            &[self.c_in, h, w],
            &[self.c_out, self.c_in, self.kernel.0, self.kernel.1],
            self.spec,
        );
        ((geo.out_h, geo.out_w), geo.macs())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub part: Part,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        part: Part,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[d_out, d_in], bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform(&[d_out], bound, rng));
        Self {
            weight,
            bias,
            part,
            d_in,
            d_out,
        }
    }

    /// Input is flattened; output has shape `[d_out]`.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let n = g.value(x).len();
        if n != self.d_in {
            return Err(Error::Contract(format!(
                "linear layer expects {} inputs, got {n}",
                self.d_in
            )));
        }
        let flat = if g.shape(x).len() == 1 { x } else { g.reshape(x, &[n]) };
        let w = b.bind(g, self.weight, self.part);
        let bias = b.bind(g, self.bias, self.part);
        Ok(g.linear(flat, w, Some(bias)))
    }

    pub fn num_params(&self) -> usize {
        self.d_out * self.d_in + self.d_out
    }

    pub fn macs(&self) -> u64 {
        (self.d_out * self.d_in) as u64
    }
}

/// `x + conv2(lrelu(conv1(x)))` with both convolutions dilated.
#[derive(Clone, Debug)]
pub struct DrBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl DrBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        part: Part,
        width: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: Conv::same(store, &format!("{name}.conv1"), part, width, width, kernel, dilation, 1.0, rng),
            conv2: Conv::same(store, &format!("{name}.conv2"), part, width, width, kernel, dilation, 1.0, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, b, x)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv2.forward(g, b, h)?;
        Ok(g.add(x, h))
    }
}

/// `x + tanh(conv_a(u)) ⊙ σ(conv_b(u))` where `u` is `x` concatenated with
/// the skip features handed to every gated block.
#[derive(Clone, Debug)]
pub struct DgBlock {
    pub filter: Conv,
    pub gate: Conv,
    pub width: usize,
    pub skip_channels: usize,
}

impl DgBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        part: Part,
        width: usize,
        skip_channels: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let c_in = width + skip_channels;
        Self {
            filter: Conv::same(store, &format!("{name}.filter"), part, c_in, width, kernel, dilation, 1.0, rng),
            gate: Conv::same(store, &format!("{name}.gate"), part, c_in, width, kernel, dilation, 1.0, rng),
            width,
            skip_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var, skip: &[Var]) -> Result<Var> {
        let mut parts = vec![x];
        parts.extend_from_slice(skip);
        let u = concat_checked(g, &parts)?;
        let a = self.filter.forward(g, b, u)?;
        let a = g.tanh(a);
        let s = self.gate.forward(g, b, u)?;
        let s = g.sigmoid(s);
        let h = g.mul(a, s);
        Ok(g.add(x, h))
    }
}

/// Undilated two-layer residual block used by the plain-convolution ablation.
#[derive(Clone, Debug)]
pub struct PlainBlock {
    pub inner: DrBlock,
}

impl PlainBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        part: Part,
        width: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            inner: DrBlock::new(store, name, part, width, kernel, 1, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Dr(DrBlock),
    Dg(DgBlock),
    Plain(PlainBlock),
}

impl Block {
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var, skip: &[Var]) -> Result<Var> {
        match self {
            Block::Dr(blk) => blk.forward(g, b, x),
            Block::Dg(blk) => blk.forward(g, b, x, skip),
            Block::Plain(blk) => blk.inner.forward(g, b, x),
        }
    }

    pub fn convs(&self) -> Vec<&Conv> {
        match self {
            Block::Dr(blk) => vec![&blk.conv1, &blk.conv2],
            Block::Dg(blk) => vec![&blk.filter, &blk.gate],
            Block::Plain(blk) => vec![&blk.inner.conv1, &blk.inner.conv2],
        }
    }
}

/// Channel concatenation with a shape check instead of a panic.
pub fn concat_checked(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let tail = g.shape(parts[0])[1..].to_vec();
    for &p in &parts[1..] {
        if g.shape(p)[1..] != tail[..] {
            return Err(Error::Contract(format!(
                "cannot concatenate {:?} with {:?}",
                g.shape(parts[0]),
                g.shape(p)
            )));
        }
    }
    Ok(g.concat(parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn dr_block_with_zero_branch_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let blk = DrBlock::new(&mut store, "dr", Part::Encoder, 3, 3, 8, &mut rng);
        store.get_mut(blk.conv2.weight).data_mut().fill(0.0);
        store.get_mut(blk.conv2.bias).data_mut().fill(0.0);
        let x = random_input(&[3, 87, 40], 1);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let xv = g.input(x.clone(), false);
        let y = blk.forward(&mut g, &mut b, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn dg_gate_extremes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let blk = DgBlock::new(&mut store, "dg", Part::Encoder, 2, 1, 3, 2, &mut rng);
        let x = random_input(&[2, 10, 12], 2);
        let skip = random_input(&[1, 10, 12], 3);
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let mut b = Binder::frozen(store);
            let xv = g.input(x.clone(), false);
            let sv = g.input(skip.clone(), false);
            let y = blk.forward(&mut g, &mut b, xv, &[sv]).unwrap();
            g.value(y).clone()
        };

        // Closed gate: only the shortcut survives.
        let mut closed = store.clone();
        closed.get_mut(blk.gate.weight).data_mut().fill(0.0);
        closed.get_mut(blk.gate.bias).data_mut().fill(-1e4);
        assert_eq!(run(&closed), x);

        // Open gate: shortcut plus the tanh branch, which stays inside (-1, 1).
        let mut open = store.clone();
        open.get_mut(blk.gate.weight).data_mut().fill(0.0);
        open.get_mut(blk.gate.bias).data_mut().fill(1e4);
        let y = run(&open);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&open);
        let xv = g.input(x.clone(), false);
        let sv = g.input(skip.clone(), false);
        let u = g.concat(&[xv, sv]);
        let a = blk.filter.forward(&mut g, &mut b, u).unwrap();
        let a = g.tanh(a);
        for ((yo, xo), ao) in y.data().iter().zip(x.data()).zip(g.value(a).data()) {
            assert!((yo - (xo + ao)).abs() < 1e-6);
        }
        let plain = run(&store);
        for (yo, xo) in plain.data().iter().zip(x.data()) {
            assert!((yo - xo).abs() < 1.0);
        }
    }

    #[test]
    fn channel_mismatch_is_a_contract_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv::same(&mut store, "c", Part::Decoder, 2, 4, 3, 1, 1.0, &mut rng);
        let lin = Linear::new(&mut store, "l", Part::Decoder, 4, 2, &mut rng);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let x = g.input(Tensor::zeros(&[3, 5, 5]), false);
        assert!(matches!(conv.forward(&mut g, &mut b, x), Err(Error::Contract(_))));
        let x = g.input(Tensor::zeros(&[5]), false);
        assert!(matches!(lin.forward(&mut g, &mut b, x), Err(Error::Contract(_))));
    }

    #[test]
    fn binder_respects_trainable_parts() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Linear::new(&mut store, "e", Part::Encoder, 3, 2, &mut rng);
        let dis = Linear::new(&mut store, "d", Part::Discriminator, 2, 1, &mut rng);
        let mut g = Graph::new();
        let mut b = Binder::new(&store, &[Part::Encoder]);
        let x = g.input(Tensor::filled(&[3], 1.0), false);
        let h = enc.forward(&mut g, &mut b, x).unwrap();
        let y = dis.forward(&mut g, &mut b, h).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        let ids: Vec<ParamId> = grads.params().map(|(id, _)| id).collect();
        assert!(ids.contains(&enc.weight) && ids.contains(&enc.bias));
        assert!(!ids.contains(&dis.weight));
    }
}
