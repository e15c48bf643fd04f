//! Training objectives, both as plain functions and as graph nodes.

use syncguard_nn::{Graph, Tensor, Var};

use crate::codec::Message;
use crate::error::{Error, Result};

/// Floor applied to every logarithm argument.
pub const LOG_FLOOR: f64 = 1e-7;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean squared error between soft scores and the message bits.
pub fn loss_w(soft: &[f32], bits: &Message) -> Result<f64> {
    if soft.len() != bits.len() {
        return Err(Error::Contract(format!(
            "{} soft scores for a {}-bit message",
            soft.len(),
            bits.len()
        )));
    }
    let sum: f64 = soft
        .iter()
        .zip(bits.bits())
        .map(|(&p, &b)| (p as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / soft.len() as f64)
}

/// Mean squared waveform difference.
pub fn loss_e(a: &[f32], a_w: &[f32]) -> Result<f64> {
    if a.len() != a_w.len() {
        return Err(Error::Contract(format!(
            "loss_e over {} and {} samples",
            a.len(),
            a_w.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Contract("loss_e of empty signals".into()));
    }
    let sum: f64 = a
        .iter()
        .zip(a_w)
        .map(|(&x, &y)| (y as f64 - x as f64).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// `log(1 − σ(logit_w))` for the discriminator logit of the watermarked clip.
pub fn loss_adv(logit_w: f64) -> f64 {
    (1.0 - sigmoid(logit_w)).max(LOG_FLOOR).ln()
}

/// `log(1 − σ(logit_a)) + log(σ(logit_w))` for the clean and watermarked logits.
pub fn loss_d(logit_a: f64, logit_w: f64) -> f64 {
    (1.0 - sigmoid(logit_a)).max(LOG_FLOOR).ln() + sigmoid(logit_w).max(LOG_FLOOR).ln()
}

pub fn loss_w_graph(g: &mut Graph, soft: Var, bits: &Message) -> Result<Var> {
    if g.value(soft).len() != bits.len() {
        return Err(Error::Contract(format!(
            "{} soft scores for a {}-bit message",
            g.value(soft).len(),
            bits.len()
        )));
    }
    let target = g.constant(Tensor::new(
        g.shape(soft),
        bits.bits().iter().map(|&b| b as f32).collect(),
    ));
    Ok(g.mse(soft, target))
}

pub fn loss_e_graph(g: &mut Graph, a: Var, a_w: Var) -> Result<Var> {
    if g.shape(a) != g.shape(a_w) {
        return Err(Error::Contract(format!(
            "loss_e over shapes {:?} and {:?}",
            g.shape(a),
            g.shape(a_w)
        )));
    }
    Ok(g.mse(a_w, a))
}

/// `ln(max(σ(logit), floor))` when `positive`, else `ln(max(1 − σ(logit), floor))`.
fn log_prob(g: &mut Graph, logit: Var, positive: bool) -> Var {
    let p = g.sigmoid(logit);
    let p = if positive {
        p
    } else {
        let neg = g.scale(p, -1.0);
        g.add_const(neg, 1.0)
    };
    let p = g.clamp_min(p, LOG_FLOOR as f32);
    g.ln(p)
}

pub fn loss_adv_graph(g: &mut Graph, logit_w: Var) -> Var {
    log_prob(g, logit_w, false)
}

pub fn loss_d_graph(g: &mut Graph, logit_a: Var, logit_w: Var) -> Var {
    let clean = log_prob(g, logit_a, false);
    let marked = log_prob(g, logit_w, true);
    g.add(clean, marked)
}
