use crate::error::{Error, Result};
use crate::model::ParamSet;

use super::config::TrainConfig;

/// Adam moments, one buffer per parameter in `ParamSet` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are clipped to
/// `grad_clip_norm` (global L2 norm) first when configured.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    rate: f64,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if g.len() != p.numel() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                step: state.t + 1,
                what: format!("gradient for {name}"),
            });
        }
    }

    let clip = match config.grad_clip_norm {
        Some(max) => {
            let norm = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    state.t += 1;
    let (b1, b2, eps) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        if g.iter().all(|&x| x == 0.0) && m.iter().all(|&x| x == 0.0) {
            // Update is exactly zero; skip the copy-on-write of shared storage.
            v.iter_mut().for_each(|x| *x *= b2);
            continue;
        }
        let data = p.data_mut();
        for j in 0..data.len() {
            let gj = g[j] * clip;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            data[j] -= rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![1], vec![x]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.5);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &[vec![0.0]], &mut s, 0.1, &TrainConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_rate() {
        let mut p = single(0.0);
        let mut s = OptimizerState::new(&p);
        let cfg = TrainConfig::default();
        adam_step(&mut p, &[vec![1.0]], &mut s, 0.01, &cfg).unwrap();
        // m_hat = 1, v_hat = 1
        let want = -0.01 * 1.0 / (1.0 + cfg.adam_eps);
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn second_moment_accumulates() {
        let mut p = single(0.0);
        let mut s = OptimizerState::new(&p);
        let cfg = TrainConfig::default();
        adam_step(&mut p, &[vec![0.3]], &mut s, 0.01, &cfg).unwrap();
        let v1 = s.v[0][0];
        adam_step(&mut p, &[vec![0.3]], &mut s, 0.01, &cfg).unwrap();
        assert!(s.v[0][0] > v1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(0.0);
        let mut s = OptimizerState::new(&p);
        let err = adam_step(&mut p, &[vec![f64::NAN]], &mut s, 0.01, &TrainConfig::default()).unwrap_err();
        match err {
            Error::Divergence { what, .. } => assert!(what.contains('w')),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clipping_bounds_update_direction() {
        let mut p = single(0.0);
        let mut s = OptimizerState::new(&p);
        let cfg = TrainConfig {
            grad_clip_norm: Some(1.0),
            ..Default::default()
        };
        adam_step(&mut p, &[vec![100.0]], &mut s, 0.01, &cfg).unwrap();
        assert!((s.m[0][0] - 0.1).abs() < 1e-12);
    }
}
