//! SGD with momentum.

use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// `v ← m·v + g; p ← p − lr·v` for every tensor.
pub fn optimizer_step(params: &mut [Tensor], grads: &[Tensor], velocity: &mut [Tensor], lr: f64, momentum: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(dim_err!("{} params, {} grads, {} velocities", params.len(), grads.len(), velocity.len()));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(dim_err!("shape mismatch {:?} / {:?} / {:?}", p.shape(), g.shape(), v.shape()));
        }
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Momentum buffers matching a parameter list.
pub fn zero_velocity(params: &[Tensor]) -> Vec<Tensor> {
    params.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    crate::math::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_grads_leave_params() {
        let mut p = vec![Tensor::full(&[3], 1.5)];
        let g = vec![Tensor::zeros(&[3])];
        let mut v = zero_velocity(&p);
        optimizer_step(&mut p, &g, &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p[0].data(), &[1.5; 3]);
    }

    #[test]
    fn no_momentum_is_plain_sgd() {
        let mut p = vec![Tensor::full(&[2], 1.0)];
        let g = vec![Tensor::new(&[2], vec![0.5, -2.0]).unwrap()];
        let mut v = zero_velocity(&p);
        optimizer_step(&mut p, &g, &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p[0].data(), &[1.0 - 0.05, 1.0 + 0.2]);
    }

    #[test]
    fn two_momentum_steps_follow_recurrence() {
        let (g1, g2, lr) = (0.3, -0.7, 0.01);
        let mut p = vec![Tensor::scalar(2.0)];
        let mut v = zero_velocity(&p);
        optimizer_step(&mut p, &[Tensor::scalar(g1)], &mut v, lr, 0.9).unwrap();
        optimizer_step(&mut p, &[Tensor::scalar(g2)], &mut v, lr, 0.9).unwrap();
        let v2 = 0.9 * g1 + g2;
        assert_eq!(v[0].item(), v2);
        assert!((p[0].item() - (2.0 - lr * g1 - lr * v2)).abs() < 1e-15);
    }
}
