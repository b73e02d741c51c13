use serde::{Deserialize, Serialize};

use crate::error::{MakdError, Result};
use crate::tensor::Tensor;
use crate::transformer::Params;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (biases and norm
    /// parameters are exempt).
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment estimates in canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &Params<Tensor>) -> Self {
        let zeros: Vec<Tensor> = params.leaves().into_iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One AdamW update of a flat parameter slice at update number `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, hp: &AdamW, decay: bool) {
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    let wd = if decay { hp.weight_decay } else { 0.0 };
    for i in 0..p.len() {
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + wd * p[i]);
    }
}

/// Applies one update to every parameter. Fails before touching anything if
/// a gradient is not finite.
pub fn adamw_step(
    params: &mut Params<Tensor>,
    grads: &Params<Tensor>,
    state: &mut AdamState,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    let grads = grads.leaves();
    if grads.len() != state.m.len() {
        return Err(MakdError::invalid("optimizer state does not match the parameters"));
    }
    for (name, g) in &grads {
        if !g.all_finite() {
            return Err(MakdError::NonFinite(format!("gradient of {name}")));
        }
    }
    state.t += 1;
    let t = state.t;
    let mut i = 0;
    let mut shape_error = None;
    params.for_each_mut(|name, p| {
        let g = grads[i].1;
        if g.shape() != p.shape() {
            shape_error.get_or_insert_with(|| format!("gradient shape mismatch for {name}"));
        } else {
            let decay = p.shape().len() == 2;
            adamw_update(p.data_mut(), g.data(), state.m[i].data_mut(), state.v[i].data_mut(), t, lr, hp, decay);
        }
        i += 1;
    });
    match shape_error {
        Some(msg) => Err(MakdError::invalid(msg)),
        None => Ok(()),
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Params<Tensor>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.for_each(|_, g| sq += g.data().iter().map(|x| x * x).sum::<f64>());
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.for_each_mut(|_, g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook scalar AdamW, written independently of the slice version.
    fn scalar_adamw(p0: f64, grad: impl Fn(f64) -> f64, steps: usize, lr: f64, hp: &AdamW) -> Vec<f64> {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = grad(p);
            m = hp.beta1 * m + (1.0 - hp.beta1) * g;
            v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
            let mh = m / (1.0 - hp.beta1.powi(t as i32));
            let vh = v / (1.0 - hp.beta2.powi(t as i32));
            p = p - lr * hp.weight_decay * p - lr * mh / (vh.sqrt() + hp.eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn quadratic_bowl_matches_scalar_reference() {
        let hp = AdamW { weight_decay: 0.1, ..AdamW::default() };
        let grad = |p: f64| 2.0 * (p - 3.0);
        let expect = scalar_adamw(-1.5, grad, 5, 0.05, &hp);
        let (mut p, mut m, mut v) = ([-1.5], [0.0], [0.0]);
        for (t, e) in expect.iter().enumerate() {
            let g = [grad(p[0])];
            adamw_update(&mut p, &g, &mut m, &mut v, t as u64 + 1, 0.05, &hp, true);
            assert!((p[0] - e).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let hp = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let (mut p, mut m, mut v) = ([0.7, -2.0], [0.0; 2], [0.0; 2]);
        for t in 1..=10 {
            adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, t, 0.1, &hp, true);
        }
        assert_eq!(p, [0.7, -2.0]);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let hp = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let (mut p, mut m, mut v) = ([0.0], [0.0], [0.0]);
        let mut last = 0.0;
        for t in 1..=2000 {
            let before = p[0];
            adamw_update(&mut p, &[0.3], &mut m, &mut v, t, 1e-3, &hp, true);
            last = before - p[0];
        }
        assert!((last - 1e-3).abs() < 1e-8);
    }
}
