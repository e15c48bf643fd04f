//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value and
//! a closure computing vector-Jacobian products for its inputs. Node ids are
//! assigned in creation order, so reverse id order is a valid reverse
//! topological order for [`Graph::backward`].

use crate::conv::{self, Conv2dSpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward closure may look at.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    /// Forward values of the inputs, in the order given to [`Graph::op`].
    pub inputs: &'a [&'a Tensor],
    /// Forward value of this node.
    pub output: &'a Tensor,
    /// Which inputs need a gradient. Closures may return `None` for the rest.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`]. Only leaves keep their gradient.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients in the order the parameters were bound to the graph.
    /// A parameter bound more than once yields one entry per binding.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(move |&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// Leaf that receives a gradient when `requires_grad` is set.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            param: None,
        })
    }

    /// Binds a trainable parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Node {
            value: store.get(id).clone(),
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
            param: Some(id),
        })
    }

    /// Binds a parameter as a constant (its value participates, its gradient does not).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a custom operation. `value` is the already-computed forward output.
    pub fn op(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
            param: None,
        })
    }

    /// Copies the value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Grads { grads, params }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.op(
            &[a, b],
            value,
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.op(
            &[a, b],
            value,
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.op(
            &[a, b],
            value,
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y));
                let gb = c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x));
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.op(&[a], value, Box::new(move |c| vec![Some(c.grad.map(|g| g * k))]))
    }

    pub fn add_const(&mut self, a: Var, k: f32) -> Var {
        let value = self.value(a).map(|x| x + k);
        self.op(&[a], value, Box::new(|c| vec![Some(c.grad.clone())]))
    }

    /// `a + s` where `s` is a single-element node broadcast over `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "add_scalar expects a single-element node");
        let k = self.value(s).item();
        let value = self.value(a).map(|x| x + k);
        self.op(
            &[a, s],
            value,
            Box::new(|c| {
                let gs = c.needs[1].then(|| Tensor::new(c.inputs[1].shape(), vec![c.grad.sum()]));
                vec![Some(c.grad.clone()), gs]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.op(
            &[a],
            value,
            Box::new(|c| {
                vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.op(
            &[a],
            value,
            Box::new(move |c| {
                vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x > 0.0 { g } else { slope * g }))]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f32::tanh);
        self.op(
            &[a],
            value,
            Box::new(|c| vec![Some(c.grad.zip_map(c.output, |g, y| g * (1.0 - y * y)))]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.op(
            &[a],
            value,
            Box::new(|c| vec![Some(c.grad.zip_map(c.output, |g, y| g * y * (1.0 - y)))]),
        )
    }

    /// Natural log. Inputs must be positive.
    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f32::ln);
        self.op(
            &[a],
            value,
            Box::new(|c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g / x))]),
        )
    }

    /// `max(a, floor)`; clamped elements pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f32) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        self.op(
            &[a],
            value,
            Box::new(move |c| {
                vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x >= floor { g } else { 0.0 }))]
            }),
        )
    }

    // ---- reductions and shape ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.op(
            &[a],
            value,
            Box::new(|c| vec![Some(Tensor::filled(c.inputs[0].shape(), c.grad.item()))]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f32;
        let value = Tensor::scalar(self.value(a).sum() / n);
        self.op(
            &[a],
            value,
            Box::new(move |c| vec![Some(Tensor::filled(c.inputs[0].shape(), c.grad.item() / n))]),
        )
    }

    /// Mean of squared differences, as a single-element node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        self.op(
            &[a],
            value,
            Box::new(|c| vec![Some(c.grad.clone().reshape(c.inputs[0].shape()))]),
        )
    }

    /// Concatenates along axis 0. All other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail: Vec<usize> = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat: trailing dims differ");
            lead += v.shape()[0];
            sizes.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data);
        self.op(
            parts,
            value,
            Box::new(move |c| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(c.inputs)
                    .zip(c.needs)
                    .map(|((&n, input), &need)| {
                        let g = need.then(|| {
                            Tensor::new(input.shape(), c.grad.data()[off..off + n].to_vec())
                        });
                        off += n;
                        g
                    })
                    .collect()
            }),
        )
    }

    /// Repeats a size-1 axis `n` times.
    pub fn broadcast_axis(&mut self, a: Var, axis: usize, n: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape[axis], 1, "broadcast_axis needs a size-1 axis");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let row = &src[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(row);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = n;
        let value = Tensor::new(&out_shape, data);
        self.op(
            &[a],
            value,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut acc = vec![0.0f32; outer * inner];
                for o in 0..outer {
                    let dst = &mut acc[o * inner..(o + 1) * inner];
                    for r in 0..n {
                        let base = (o * n + r) * inner;
                        for (d, &x) in dst.iter_mut().zip(&g[base..base + inner]) {
                            *d += x;
                        }
                    }
                }
                vec![Some(Tensor::new(&shape, acc))]
            }),
        )
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = vec![0.0f32; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for r in 0..n {
                let base = (o * n + r) * inner;
                for (d, &x) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += x;
                }
            }
            for d in dst.iter_mut() {
                *d /= n as f32;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(&out_shape, data);
        self.op(
            &[a],
            value,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut out = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        out.extend(g[o * inner..(o + 1) * inner].iter().map(|&x| x / n as f32));
                    }
                }
                vec![Some(Tensor::new(&shape, out))]
            }),
        )
    }

    // ---- layers ----

    /// `w · x + b` for a 1-D input `x` of length `in`, `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).data();
        let ws = self.value(w);
        let (n_out, n_in) = (ws.shape()[0], ws.shape()[1]);
        assert_eq!(xs.len(), n_in, "linear: input length mismatch");
        let mut out = vec![0.0f32; n_out];
        for (o, dst) in out.iter_mut().enumerate() {
            let row = &ws.data()[o * n_in..(o + 1) * n_in];
            *dst = row.iter().zip(xs).map(|(a, b)| a * b).sum();
        }
        if let Some(b) = b {
            for (d, &bv) in out.iter_mut().zip(self.value(b).data()) {
                *d += bv;
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let value = Tensor::new(&[n_out], out);
        self.op(
            &inputs,
            value,
            Box::new(move |c| {
                let g = c.grad.data();
                let xs = c.inputs[0].data();
                let ws = c.inputs[1].data();
                let gx = c.needs[0].then(|| {
                    let mut gx = vec![0.0f32; n_in];
                    for (o, &go) in g.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        for (d, &wv) in gx.iter_mut().zip(&ws[o * n_in..(o + 1) * n_in]) {
                            *d += go * wv;
                        }
                    }
                    Tensor::new(c.inputs[0].shape(), gx)
                });
                let gw = c.needs[1].then(|| {
                    let mut gw = vec![0.0f32; n_out * n_in];
                    for (o, &go) in g.iter().enumerate() {
                        for (d, &xv) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(xs) {
                            *d = go * xv;
                        }
                    }
                    Tensor::new(&[n_out, n_in], gw)
                });
                let mut res = vec![gx, gw];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| Tensor::new(&[n_out], g.to_vec())));
                }
                res
            }),
        )
    }

    /// 2-D convolution of `x: [C_in, H, W]` with `w: [C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        assert_eq!(xs.ndim(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(ws.ndim(), 4, "conv2d weight must be [C_out, C_in, kh, kw]");
        let geom = conv::Geometry::new(xs.shape(), ws.shape(), spec);
        let bias = b.map(|b| self.value(b).data());
        let out = conv::forward(&geom, xs.data(), ws.data(), bias);
        let value = Tensor::new(&[geom.c_out, geom.out_h, geom.out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.op(
            &inputs,
            value,
            Box::new(move |c| {
                let (gx, gw, gb) = conv::backward(
                    &geom,
                    c.inputs[0].data(),
                    c.inputs[1].data(),
                    c.grad.data(),
                    c.needs[0],
                    c.needs[1],
                    c.inputs.len() == 3 && c.needs[2],
                );
                let mut res = vec![
                    gx.map(|d| Tensor::new(c.inputs[0].shape(), d)),
                    gw.map(|d| Tensor::new(c.inputs[1].shape(), d)),
                ];
                if c.inputs.len() == 3 {
                    res.push(gb.map(|d| Tensor::new(c.inputs[2].shape(), d)));
                }
                res
            }),
        )
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
