//! Adam with bias correction, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::scalar::Scalar;

/// Per-parameter first/second moment buffers and the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T: Scalar> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> AdamState<T> {
        AdamState { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }
}

/// One bias-corrected Adam update over every parameter, in place. Gradients
/// are left untouched; the caller resets them before the next accumulation.
pub fn adam_step<T: Scalar>(
    params: &ParameterSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = T::from_f(1.0 - beta1.powi(t));
    let bc2 = T::from_f(1.0 - beta2.powi(t));
    let (b1, b2) = (T::from_f(beta1), T::from_f(beta2));
    let (lr, eps) = (T::from_f(lr), T::from_f(eps));

    for (name, p) in params.iter() {
        let grad = p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Contract(format!("non-finite gradient in parameter {name}")));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); p.numel()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); p.numel()]);
        let mut data = p.to_vec();
        for i in 0..data.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * grad[i];
            v[i] = b2 * v[i] + (T::one() - b2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.set_data(data);
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients<T: Scalar>(params: &ParameterSet<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, p) in params.iter() {
        if let Some(g) = p.grad() {
            for v in g {
                sq += v.to_f() * v.to_f();
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = T::from_f(max_norm / norm);
        for (_, p) in params.iter() {
            p.scale_grad(factor);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AggMethod, ModelConfig};

    fn single_param_set(value: f64) -> (ParameterSet<f64>, ModelConfig) {
        // smallest valid config; we only exercise one named tensor from it
        let cfg = ModelConfig {
            d_model: 2,
            n_heads: 1,
            n_enc: 1,
            n_dec: 1,
            d_ff: 2,
            dropout: 0.0,
            agg_layers: 1,
            agg_method: AggMethod::None,
            use_pointer: false,
            vocab_size: 5,
            max_positions: 4,
        };
        let params = ParameterSet::init(&cfg, 0);
        params.get("out.b").set_data(vec![value; 5]);
        (params, cfg)
    }

    #[test]
    fn first_step_moves_against_the_gradient_sign_by_lr() {
        let (params, _) = single_param_set(1.0);
        let p = params.get("out.b");
        params.zero_grads();
        p.accumulate_grad(&[0.3, -0.7, 2.0, -0.01, 5.0]);
        let mut state = AdamState::new();
        adam_step(&params, &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
        // with constant gradient, m_hat = g and v_hat = g^2, so the update is
        // -lr * g/|g| up to eps
        for (x, g) in p.to_vec().iter().zip([0.3f64, -0.7, 2.0, -0.01, 5.0]) {
            let expected = 1.0 - 0.1 * g / (g.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-6, "{x} vs {expected}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (params, _) = single_param_set(0.5);
        params.zero_grads();
        let before = params.get("out.b").to_vec();
        let mut state = AdamState::new();
        adam_step(&params, &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(params.get("out.b").to_vec(), before);
    }

    #[test]
    fn three_steps_descend_a_quadratic() {
        let (params, _) = single_param_set(1.0);
        let p = params.get("out.b");
        let mut state = AdamState::new();
        let mut last = f64::INFINITY;
        for _ in 0..3 {
            params.zero_grads();
            let x = p.to_vec();
            let f: f64 = x.iter().map(|v| v * v).sum();
            p.accumulate_grad(&x.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
            adam_step(&params, &mut state, 0.05, 0.9, 0.999, 1e-8).unwrap();
            assert!(f < last, "quadratic did not decrease: {f} >= {last}");
            last = f;
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let (params, _) = single_param_set(1.0);
        params.zero_grads();
        params.get("out.b").accumulate_grad(&[f64::NAN, 0.0, 0.0, 0.0, 0.0]);
        let mut state = AdamState::new();
        let err = adam_step(&params, &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(err.to_string().contains("out.b"), "{err}");
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let (params, _) = single_param_set(1.0);
        params.zero_grads();
        params.get("out.b").accumulate_grad(&[3.0, 4.0, 0.0, 0.0, 0.0]);
        let norm = clip_gradients(&params, 2.0);
        assert!((norm - 5.0).abs() < 1e-9);
        let g = params.get("out.b").grad().unwrap();
        let clipped: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((clipped - 2.0).abs() < 1e-9);
    }
}
