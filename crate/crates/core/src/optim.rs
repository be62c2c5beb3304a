//! Parameter update rules: SGD with coupled weight decay, and AdaGrad.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adagrad,
}

impl std::str::FromStr for OptimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adagrad" => Ok(Self::Adagrad),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Optimizer state. AdaGrad keeps one squared-gradient accumulator per
/// parameter tensor, matched by position in the `params` slice, so the
/// caller must pass parameters in a stable order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    accumulators: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Self {
        assert!(learning_rate >= 0.0 && weight_decay >= 0.0);
        Self {
            kind: OptimKind::Sgd,
            learning_rate,
            weight_decay,
            epsilon: 0.0,
            accumulators: Vec::new(),
        }
    }

    pub fn adagrad(learning_rate: f64) -> Self {
        assert!(learning_rate >= 0.0);
        Self {
            kind: OptimKind::Adagrad,
            learning_rate,
            weight_decay: 0.0,
            epsilon: 1e-10,
            accumulators: Vec::new(),
        }
    }

    pub fn new(kind: OptimKind, learning_rate: f64, weight_decay: f64) -> Self {
        match kind {
            OptimKind::Sgd => Self::sgd(learning_rate, weight_decay),
            OptimKind::Adagrad => Self::adagrad(learning_rate),
        }
    }

    /// Apply one update to every parameter, then zero all gradients.
    /// Refuses to touch anything if some gradient is missing.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if p.grad.is_none() {
                return Err(Error::MissingGrad(format!("parameter #{i}")));
            }
        }
        if self.kind == OptimKind::Adagrad && self.accumulators.len() != params.len() {
            self.accumulators = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }

        for (idx, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            match self.kind {
                OptimKind::Sgd => {
                    let (lr, wd) = (self.learning_rate, self.weight_decay);
                    for (v, g) in p.data_mut().iter_mut().zip(&grad) {
                        *v -= lr * (g + wd * *v);
                    }
                }
                OptimKind::Adagrad => {
                    let lr = self.learning_rate;
                    let eps = self.epsilon;
                    let accum = &mut self.accumulators[idx];
                    for ((v, g), a) in p.data_mut().iter_mut().zip(&grad).zip(accum.iter_mut()) {
                        *a += g * g;
                        *v -= lr * g / (a.sqrt() + eps);
                    }
                }
            }
            p.grad = Some(vec![0.0; grad.len()]);
        }
        Ok(())
    }

    #[cfg(test)]
    fn accumulator(&self, idx: usize) -> &[f64] {
        &self.accumulators[idx]
    }
}
