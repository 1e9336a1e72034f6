use super::{Tensor, TensorError};

/// A first-order update rule. `step` consumes the accumulated gradients and
/// leaves them zeroed.
pub trait Optimizer {
    fn step(&mut self, params: &mut [Tensor], lr: f64) -> Result<(), TensorError>;
}

/// Plain gradient descent: `p <- p - lr * grad(p)`, then `grad(p) <- 0`.
pub fn sgd_step(params: &mut [Tensor], lr: f64) -> Result<(), TensorError> {
    check_grads(params)?;
    for p in params {
        let dtype = p.dtype();
        let grad = p.grad.as_mut().expect("checked above");
        for (v, g) in p.data.iter_mut().zip(grad.iter_mut()) {
            *v = dtype.round(*v - lr * *g);
            *g = 0.0;
        }
    }
    Ok(())
}

fn check_grads(params: &[Tensor]) -> Result<(), TensorError> {
    match params.iter().position(|p| p.grad.is_none()) {
        Some(i) => Err(TensorError::MissingGrad(i)),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Sgd;

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [Tensor], lr: f64) -> Result<(), TensorError> {
        sgd_step(params, lr)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, params: &mut [Tensor], lr: f64) -> Result<(), TensorError> {
        check_grads(params)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let dtype = p.dtype();
            let grad = p.grad.as_mut().expect("checked above");
            for i in 0..p.data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let x = p.data[i] * (1.0 - lr * self.weight_decay) - lr * update;
                p.data[i] = dtype.round(x);
                grad[i] = 0.0;
            }
        }
        Ok(())
    }
}
