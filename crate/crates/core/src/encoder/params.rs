use rand_distr::{Distribution, Normal};

use crate::numerics::Tensor;
use crate::rng;
use crate::scalar::Scalar;

use super::{EncoderConfig, EncoderError};

const INIT_STD: f64 = 0.02;

/// Weights of one post-LN transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    /// Key projection; no key bias since softmax rows are invariant to it.
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

/// All trainable tensors of the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub token_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub emb_ln_gain: Tensor<T>,
    pub emb_ln_bias: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head_w1: Tensor<T>,
    pub head_b1: Tensor<T>,
    pub head_w2: Tensor<T>,
    pub head_b2: Tensor<T>,
    /// Output bias of the tied-embedding masked-token predictor.
    pub mlm_bias: Tensor<T>,
}

const LAYER_FIELDS: [&str; 15] = [
    "wq", "bq", "wk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_bias", "w1", "b1", "w2", "b2", "ln2_gain", "ln2_bias",
];

impl<T: Scalar> LayerParams<T> {
    fn tensors(&self) -> [&Tensor<T>; 15] {
        [
            &self.wq, &self.bq, &self.wk, &self.wv, &self.bv, &self.wo, &self.bo, &self.ln1_gain, &self.ln1_bias,
            &self.w1, &self.b1, &self.w2, &self.b2, &self.ln2_gain, &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 15] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

impl<T: Scalar> EncoderParams<T> {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: &EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, "encoder.init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut w = |rows: usize, cols: usize| Tensor::from_fn(rows, cols, |_, _| T::of(normal.sample(&mut rng)));
        let zeros = |n: usize| Tensor::zeros(&[1, n]);
        let ones = |n: usize| Tensor::full(&[1, n], T::one());
        let (d, ff) = (config.d_model, config.d_ff);

        let token_emb = w(config.vocab_size, d);
        let pos_emb = w(config.max_len, d);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams {
                wq: w(d, d),
                bq: zeros(d),
                wk: w(d, d),
                wv: w(d, d),
                bv: zeros(d),
                wo: w(d, d),
                bo: zeros(d),
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                w1: w(d, ff),
                b1: zeros(ff),
                w2: w(ff, d),
                b2: zeros(d),
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
            });
        }
        Ok(Self {
            config: config.clone(),
            token_emb,
            pos_emb,
            emb_ln_gain: ones(d),
            emb_ln_bias: zeros(d),
            layers,
            head_w1: w(d, d),
            head_b1: zeros(d),
            head_w2: w(d, config.n_classes),
            head_b2: zeros(config.n_classes),
            mlm_bias: zeros(config.vocab_size),
        })
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["token_emb", "pos_emb", "emb_ln_gain", "emb_ln_bias"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for l in 0..self.layers.len() {
            names.extend(LAYER_FIELDS.iter().map(|f| format!("layer{l}.{f}")));
        }
        names.extend(["head_w1", "head_b1", "head_w2", "head_b2", "mlm_bias"].iter().map(|s| s.to_string()));
        names
    }

    /// Tensors in the order of [`names`](Self::names).
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.token_emb, &self.pos_emb, &self.emb_ln_gain, &self.emb_ln_bias];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.head_w1, &self.head_b1, &self.head_w2, &self.head_b2, &self.mlm_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.token_emb,
            &mut self.pos_emb,
            &mut self.emb_ln_gain,
            &mut self.emb_ln_bias,
        ];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([
            &mut self.head_w1,
            &mut self.head_b1,
            &mut self.head_w2,
            &mut self.head_b2,
            &mut self.mlm_bias,
        ]);
        out
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.names().into_iter().zip(self.tensors().into_iter().cloned()).collect()
    }

    /// Rebuilds parameters from named tensors, checking every name and shape.
    pub fn from_named(config: &EncoderConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, EncoderError> {
        let mut params = Self::init(config)?;
        let names = params.names();
        if named.len() != names.len() {
            return Err(EncoderError::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        for ((expected, slot), (name, tensor)) in names.iter().zip(params.tensors_mut()).zip(named) {
            if &name != expected || slot.shape() != tensor.shape() {
                return Err(EncoderError::Checkpoint(format!(
                    "tensor {name} {:?} does not match {expected} {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(params)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        let named = self.names().into_iter().zip(self.tensors().into_iter().map(|t| t.cast())).collect();
        EncoderParams::from_named(&self.config, named).expect("same config, same layout")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let c = EncoderConfig::default();
        let a = EncoderParams::<f64>::init(&c).unwrap();
        let b = EncoderParams::<f64>::init(&c).unwrap();
        assert_eq!(a, b);
        let c2 = EncoderConfig { seed: 1, ..c };
        assert_ne!(a, EncoderParams::<f64>::init(&c2).unwrap());
    }

    #[test]
    fn init_layout() {
        let c = EncoderConfig::default();
        let p = EncoderParams::<f64>::init(&c).unwrap();
        assert_eq!(p.names().len(), p.tensors().len());
        assert_eq!(p.layers[0].ln1_gain.data(), &[1.0; 32]);
        assert!(p.layers[1].b1.data().iter().all(|&v| v == 0.0));
        let std = {
            let d = p.layers[0].w1.data();
            (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt()
        };
        assert!((std - 0.02).abs() < 0.003, "std {std}");
    }

    #[test]
    fn invalid_config_rejected() {
        let c = EncoderConfig {
            d_model: 30,
            heads: 4,
            ..EncoderConfig::default()
        };
        assert!(matches!(EncoderParams::<f64>::init(&c), Err(EncoderError::InvalidConfig(_))));
    }

    #[test]
    fn named_roundtrip() {
        let c = EncoderConfig::default();
        let p = EncoderParams::<f64>::init(&c).unwrap();
        assert_eq!(EncoderParams::from_named(&c, p.named()).unwrap(), p);
        let mut bad = p.named();
        bad.swap(0, 1);
        assert!(EncoderParams::from_named(&c, bad).is_err());
    }
}
