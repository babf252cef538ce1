use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// Update: `g' = g + wd·p`, `v ← m·v + g'`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// Zero-initialised buffers shaped like `params`.
    pub fn new(params: &[Tensor], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            lr: 0.0,
            buffers: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Domain(format!("learning rate must be finite and ≥ 0, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }
}

pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.buffers.len() {
        return Err(Error::Shape(format!(
            "sgd_step: {} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            state.buffers.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.buffers).enumerate() {
        if p.shape() != g.shape() || v.len() != p.len() {
            return Err(Error::Shape(format!(
                "sgd_step: parameter {i} shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    let (m, wd, lr) = (state.momentum, state.weight_decay, state.lr);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.buffers.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            let gd = gi + wd * *pi;
            *vi = m * *vi + gd;
            *pi -= lr * *vi;
        }
        if !p.is_finite() {
            return Err(Error::NonFinite("sgd_step"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(p0: f64, grads: &[f64], lr: f64, m: f64, wd: f64) -> f64 {
        let mut params = vec![Tensor::scalar(p0)];
        let mut st = OptimizerState::new(&params, m, wd);
        st.set_lr(lr).unwrap();
        for &g in grads {
            sgd_step(&mut params, &[Tensor::scalar(g)], &mut st).unwrap();
        }
        params[0].data()[0]
    }

    #[test]
    fn plain_gradient_step() {
        assert!((run(1.0, &[1.0], 0.1, 0.0, 0.0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        // v1 = 1, p1 = -1; v2 = 0.9 + 1 = 1.9, p2 = -2.9
        assert!((run(0.0, &[1.0, 1.0], 1.0, 0.9, 0.0) + 2.9).abs() < 1e-12);
    }

    #[test]
    fn decay_only_step() {
        assert!((run(10.0, &[0.0], 1.0, 0.0, 1e-4) - 9.999).abs() < 1e-12);
    }

    #[test]
    fn buffers_start_at_zero() {
        let st = OptimizerState::new(&[Tensor::zeros(&[2, 3])], 0.9, 1e-4);
        assert!(st.buffers()[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut st = OptimizerState::new(&params, 0.9, 0.0);
        assert!(sgd_step(&mut params, &[Tensor::zeros(&[3])], &mut st).is_err());
        assert!(sgd_step(&mut params, &[], &mut st).is_err());
    }

    #[test]
    fn negative_lr_rejected() {
        let mut st = OptimizerState::new(&[], 0.9, 0.0);
        assert!(st.set_lr(-1.0).is_err());
    }
}
