//! SGD with momentum and weight decay, plus the polynomial learning-rate policy.

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    buffers: Vec<Vec<f64>>,
}

impl Velocity {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self {
            buffers: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    /// Replaces the buffers; sizes must match the current ones.
    pub fn load(&mut self, buffers: Vec<Vec<f64>>) -> Result<()> {
        let sizes = |b: &[Vec<f64>]| b.iter().map(Vec::len).collect::<Vec<_>>();
        if sizes(&buffers) != sizes(&self.buffers) {
            return Err(Error::Shape {
                op: "velocity load",
                lhs: sizes(&self.buffers),
                rhs: sizes(&buffers),
            });
        }
        self.buffers = buffers;
        Ok(())
    }
}

/// One update: `v <- momentum * v + grad + weight_decay * param`,
/// `param <- param - lr * v`. Gradients are cleared afterwards.
pub fn sgd_step(params: &mut [Tensor], hp: SgdParams, velocity: &mut Velocity) -> Result<()> {
    if velocity.buffers.len() != params.len() {
        return Err(invalid(format!(
            "sgd_step: {} velocity buffers for {} parameters",
            velocity.buffers.len(),
            params.len()
        )));
    }
    for (i, (p, v)) in params.iter().zip(&velocity.buffers).enumerate() {
        if p.grad().is_none() {
            return Err(Error::MissingGrad { index: i });
        }
        if v.len() != p.len() {
            return Err(Error::Shape {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: vec![v.len()],
            });
        }
    }
    for (p, v) in params.iter_mut().zip(velocity.buffers.iter_mut()) {
        let g = p.grad().expect("checked above").to_vec();
        let data = p.data_mut();
        for ((w, vel), gv) in data.iter_mut().zip(v.iter_mut()).zip(g) {
            *vel = hp.momentum * *vel + gv + hp.weight_decay * *w;
            *w -= hp.lr * *vel;
        }
        p.zero_grad();
    }
    Ok(())
}

/// `lr0 * (1 - step / max_steps) ^ power`.
pub fn poly_lr(step: usize, max_steps: usize, lr0: f64, power: f64) -> Result<f64> {
    if max_steps == 0 {
        return Err(invalid("poly_lr: max_steps must be positive"));
    }
    if step > max_steps {
        return Err(invalid(format!("poly_lr: step {step} beyond max_steps {max_steps}")));
    }
    Ok(lr0 * (1.0 - step as f64 / max_steps as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::from_vec(vec![value]).with_grad();
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn plain_gradient_descent() {
        let mut ps = vec![param(3.0, 0.25)];
        let mut v = Velocity::zeros_like(&ps);
        let hp = SgdParams {
            lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut ps, hp, &mut v).unwrap();
        assert_eq!(ps[0].data(), &[2.75]);
        assert!(ps[0].grad().is_none());
    }

    #[test]
    fn momentum_two_steps() {
        let (lr, g) = (0.1, 0.5);
        let mut ps = vec![param(0.0, g)];
        let mut v = Velocity::zeros_like(&ps);
        let hp = SgdParams {
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut ps, hp, &mut v).unwrap();
        ps[0].accumulate_grad(&[g]).unwrap();
        sgd_step(&mut ps, hp, &mut v).unwrap();
        // v1 = g, v2 = 0.9 g + g; displacement lr (g + 1.9 g) = lr 2.9 g
        assert!((ps[0].data()[0] + lr * 2.9 * g).abs() < 1e-15);
        assert!((v.buffers()[0][0] - 1.9 * g).abs() < 1e-15);
    }

    #[test]
    fn decay_only_update() {
        let mut ps = vec![param(1.0, 0.0)];
        let mut v = Velocity::zeros_like(&ps);
        let hp = SgdParams {
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 0.001,
        };
        sgd_step(&mut ps, hp, &mut v).unwrap();
        assert_eq!(ps[0].data()[0], 1.0 - 0.002 * 0.001);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut ps = vec![param(1.0, 1.0), Tensor::from_vec(vec![2.0]).with_grad()];
        let mut v = Velocity::zeros_like(&ps);
        let hp = SgdParams {
            lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        assert!(matches!(
            sgd_step(&mut ps, hp, &mut v),
            Err(Error::MissingGrad { index: 1 })
        ));
        // Nothing was applied.
        assert_eq!(ps[0].data(), &[1.0]);
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 100, 0.002, 1.0).unwrap(), 0.002);
        assert_eq!(poly_lr(100, 100, 0.002, 1.0).unwrap(), 0.0);
        assert!((poly_lr(50, 100, 0.002, 1.0).unwrap() - 0.001).abs() < 1e-18);
        assert!(poly_lr(101, 100, 0.002, 1.0).is_err());
        assert!(poly_lr(0, 0, 0.002, 1.0).is_err());
    }
}
