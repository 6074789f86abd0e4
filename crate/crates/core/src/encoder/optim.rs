use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::{EncoderParams, TrainConfig};

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &EncoderParams<T>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr: T::of(cfg.lr),
            beta1: T::of(cfg.beta1),
            beta2: T::of(cfg.beta2),
            eps: T::of(cfg.adam_eps),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: &mut EncoderParams<T>, grads: &EncoderParams<T>) {
        self.step += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.step);
        let c2 = one - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..pd.len() {
                let gi = gd[i];
                let mi = self.beta1 * m.data()[i] + (one - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (one - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] = pd[i] - self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = EncoderConfig::default();
        let mut p = EncoderParams::<f64>::init(&cfg).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.head_b2.data_mut()[0] = 3.0;
        g.head_b2.data_mut()[1] = -0.5;
        let mut adam = Adam::new(&p, &TrainConfig::default());
        adam.update(&mut p, &g);
        assert!((p.head_b2.data()[0] - (before.head_b2.data()[0] - 1e-3)).abs() < 1e-9);
        assert!((p.head_b2.data()[1] - (before.head_b2.data()[1] + 1e-3)).abs() < 1e-9);
        assert_eq!(p.token_emb, before.token_emb);
    }
}
