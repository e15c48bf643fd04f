//! Autodiff graph nodes backed by the `f64` signal routines.

use std::sync::Arc;

use syncguard_nn::{Graph, Tensor, Var};

use super::engine::{self, StftEngine};
use crate::error::{Error, Result};

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Records `y = f(x)` for a map evaluated outside the graph. `vjp` maps the
/// output gradient to the input gradient.
pub fn custom_map(
    g: &mut Graph,
    x: Var,
    y: &[f64],
    out_shape: &[usize],
    vjp: impl Fn(&[f64]) -> Vec<f64> + 'static,
) -> Var {
    let in_shape = g.shape(x).to_vec();
    let value = Tensor::new(out_shape, to_f32(y));
    g.op(
        &[x],
        value,
        Box::new(move |c| {
            let gx = vjp(&to_f64(c.grad));
            vec![Some(Tensor::new(&in_shape, to_f32(&gx)))]
        }),
    )
}

/// Differentiable magnitude of a 1-D signal node together with its phase,
/// which is returned as a plain constant.
pub struct PolarNode {
    /// Shape `[1, frames, bins]`.
    pub magnitude: Var,
    pub phase: Arc<Vec<f64>>,
    pub frames: usize,
    pub bins: usize,
}

pub fn stft_magnitude(g: &mut Graph, engine: &StftEngine, x: Var) -> Result<PolarNode> {
    if g.shape(x).len() != 1 {
        return Err(Error::Contract(format!(
            "stft expects a 1-D signal, got shape {:?}",
            g.shape(x)
        )));
    }
    let samples = to_f64(g.value(x));
    let len = samples.len();
    let spec = engine.analyze(&samples)?;
    let (mag, phase) = spec.to_polar();
    let (frames, bins) = (spec.frames, spec.bins);
    let engine = engine.clone();
    let magnitude = custom_map(g, x, &mag, &[1, frames, bins], move |gm| {
        engine.analyze_vjp(&engine::magnitude_vjp(&spec, gm), len)
    });
    Ok(PolarNode {
        magnitude,
        phase: Arc::new(phase),
        frames,
        bins,
    })
}

/// Synthesis from a magnitude node (any shape with `frames * bins` elements)
/// and a fixed phase. Output has shape `[length]`.
pub fn istft_fixed_phase(
    g: &mut Graph,
    engine: &StftEngine,
    magnitude: Var,
    phase: Arc<Vec<f64>>,
    frames: usize,
    length: usize,
) -> Result<Var> {
    let bins = engine.config().n_bins();
    if g.value(magnitude).len() != frames * bins || phase.len() != frames * bins {
        return Err(Error::Contract(format!(
            "synthesis of {frames}x{bins} got magnitude {} and phase {}",
            g.value(magnitude).len(),
            phase.len()
        )));
    }
    let mag = to_f64(g.value(magnitude));
    let spec = engine::Spectrum::from_polar(frames, bins, &mag, &phase);
    let y = engine.synthesize(&spec, length);
    let engine = engine.clone();
    Ok(custom_map(g, magnitude, &y, &[length], move |gy| {
        let gs = engine.synthesize_vjp(gy, frames);
        engine::from_polar_vjp(&mag, &phase, &gs).0
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn graph_round_trip_and_gradient() {
        let engine = StftEngine::new(StftConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f32> = (0..4096).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(&[4096], x.clone()), true);
        let p = stft_magnitude(&mut g, &engine, xv).unwrap();
        let y = istft_fixed_phase(&mut g, &engine, p.magnitude, p.phase, p.frames, 4096).unwrap();
        let err: f32 = g
            .value(y)
            .data()
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(err < 1e-4);
        // With phase held fixed the composite is not the identity, but its
        // gradient must still be finite and nonzero.
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        let gx = grads.wrt(xv).unwrap();
        assert!(gx.all_finite());
        assert!(gx.data().iter().any(|&v| v != 0.0));
    }
}
