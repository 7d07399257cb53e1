//! SGD and Adam with decoupled weight decay.

use super::config::OptimizerKind;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment buffers for one flat parameter slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One update of `params` in place. `t` is the 1-based update count used for
/// Adam's bias correction.
pub fn update(
    kind: OptimizerKind,
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    lr: f64,
    weight_decay: f64,
    t: u64,
) {
    match kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= lr * (g + weight_decay * *p);
            }
        }
        OptimizerKind::Adam => {
            let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
            let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
            let iter = params
                .iter_mut()
                .zip(grads)
                .zip(moments.m.iter_mut().zip(moments.v.iter_mut()));
            for ((p, &g), (m, v)) in iter {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_is_minus_lr_times_grad() {
        let mut p = vec![1.0, -2.0];
        let mut m = Moments::zeros(2);
        update(OptimizerKind::Sgd, &mut p, &[0.5, 0.25], &mut m, 0.1, 0.0, 1);
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn first_adam_step_moves_by_lr_per_coordinate() {
        let mut p = vec![0.0, 0.0];
        let mut m = Moments::zeros(2);
        update(OptimizerKind::Adam, &mut p, &[3.0, -0.01], &mut m, 0.01, 0.0, 1);
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = vec![2.0];
        let mut m = Moments::zeros(1);
        update(OptimizerKind::Adam, &mut p, &[0.0], &mut m, 0.1, 0.5, 1);
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![5.0];
        let mut m = Moments::zeros(1);
        for t in 1..=2000 {
            let g = [2.0 * (p[0] - 1.5)];
            update(OptimizerKind::Adam, &mut p, &g, &mut m, 0.05, 0.0, t);
        }
        assert!((p[0] - 1.5).abs() < 1e-3, "{}", p[0]);
    }
}
