//! First-order optimizers over a flat list of parameter tensors.

use super::{OptimizerKind, TrainConfig};
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
        momentum: f64,
        velocity: Vec<Vec<f64>>,
    },
    Adam {
        lr: f64,
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(tc: &TrainConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        match tc.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd {
                lr: tc.lr,
                momentum: tc.momentum,
                velocity: zeros(),
            },
            OptimizerKind::Adam => Optimizer::Adam {
                lr: tc.lr,
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub fn sgd(lr: f64, momentum: f64, params: &[Tensor]) -> Self {
        Optimizer::Sgd {
            lr,
            momentum,
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One update. With a zero learning rate parameters are left untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        match self {
            Optimizer::Sgd { lr, momentum, velocity } => {
                if *lr == 0.0 {
                    return;
                }
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    let (lr, mu) = (*lr, *momentum);
                    for ((x, &g), u) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        *u = mu * *u + g;
                        *x -= lr * *u;
                    }
                }
            }
            Optimizer::Adam { lr, step, m, v } => {
                if *lr == 0.0 {
                    return;
                }
                *step += 1;
                let c1 = 1.0 - BETA1.powi(*step);
                let c2 = 1.0 - BETA2.powi(*step);
                let lr = *lr;
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_on_square() {
        // loss θ², gradient 2θ
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = Optimizer::sgd(0.1, 0.9, &p);
        let g = vec![Tensor::scalar(2.0)];
        opt.step(&mut p, &g);
        assert!((p[0].item().unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::vector(vec![1.0, -3.0])];
        let tc = TrainConfig { lr: 0.01, ..Default::default() };
        let mut opt = Optimizer::new(&tc, &p);
        opt.step(&mut p, &[Tensor::vector(vec![5.0, -0.001])]);
        assert!((p[0].data()[0] - 0.99).abs() < 1e-9);
        assert!((p[0].data()[1] - (-2.99)).abs() < 1e-5);
    }

    #[test]
    fn zero_lr_is_identity() {
        let p0 = vec![Tensor::vector(vec![0.1, 0.2, f64::MIN_POSITIVE])];
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let tc = TrainConfig { lr: 0.0, optimizer: kind, ..Default::default() };
            let mut p = p0.clone();
            let mut opt = Optimizer::new(&tc, &p);
            opt.step(&mut p, &[Tensor::vector(vec![1.0, -1.0, 3.0])]);
            assert_eq!(p, p0);
        }
    }
}
