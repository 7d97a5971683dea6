//! The assembled model: backbone, residual quantizer and transformer head.

use std::path::Path;

use rand::Rng;

use crate::autodiff::Var;
use crate::backbone::{backbone_forward, init_backbone};
use crate::config::ModelConfig;
use crate::csi::ActivityId;
use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::params::ParamStore;
use crate::rvq::{codebooks_from, init_codebooks_random, rvq_train, RvqEncoding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::{decoder_forward, encoder_forward, init_transformer};

pub const BACKBONE_PREFIX: &str = "backbone";

/// How backbone features reach the transformer.
#[derive(Clone, Debug)]
pub enum Quantize<S> {
    /// Residual quantization with a straight-through gradient.
    Rvq,
    /// Raw features, no quantization.
    Bypass,
    /// `Z + offset` with a frozen offset. With `offset = B − Z` at a fixed
    /// point this has the value of the quantized path and an exact derivative
    /// equal to the straight-through one, so finite differences can check it.
    Surrogate(Tensor<S>),
}

pub struct ModelOutput<S> {
    /// `[batch, N_q, N_act + 1]` per decoder layer.
    pub logits: Vec<Var>,
    pub rvq_loss: Option<Var>,
    pub features: Var,
    pub encoding: Option<RvqEncoding<S>>,
}

#[derive(Clone, Debug)]
pub struct AmarModel<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> AmarModel<S> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_backbone(&config.backbone, &mut params, BACKBONE_PREFIX, rng);
        init_codebooks_random(&mut params, &config.rvq, config.backbone.d(), rng);
        init_transformer(&config.transformer, &mut params, rng);
        Ok(AmarModel { config, params })
    }

    pub fn classes(&self) -> usize {
        self.config.transformer.classes()
    }

    pub fn codebooks(&self) -> Result<Vec<Tensor<S>>> {
        codebooks_from(&self.params, self.config.rvq.layers)
    }

    /// Stacks `[T, C]` amplitudes into a `[batch, T, C]` input.
    pub fn batch_input(samples: &[&Tensor<f32>]) -> Result<Tensor<S>> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let (t, c) = (first.shape()[0], first.shape()[1]);
        let mut data = Vec::with_capacity(samples.len() * t * c);
        for s in samples {
            if s.shape() != first.shape() {
                return Err(Error::shape(
                    "batch_input",
                    format!("{:?} vs {:?}", first.shape(), s.shape()),
                ));
            }
            data.extend(s.data().iter().map(|&v| S::of(v as f64)));
        }
        Tensor::new(vec![samples.len(), t, c], data)
    }

    /// Full forward pass. `dropped[b][v]` drops RVQ layer `v` for sample `b`.
    pub fn forward(
        &self,
        fw: &mut Forward<S>,
        x: Var,
        quantize: &Quantize<S>,
        dropped: &[Vec<bool>],
    ) -> Result<ModelOutput<S>> {
        let z = backbone_forward(fw, &self.config.backbone, BACKBONE_PREFIX, x)?;
        let (b, rvq_loss, encoding) = match quantize {
            Quantize::Rvq => {
                let (q, loss, enc) = rvq_train(fw, &self.config.rvq, z, dropped)?;
                (q, Some(loss), Some(enc))
            }
            Quantize::Bypass => (z, None, None),
            Quantize::Surrogate(offset) => {
                let (_, loss, enc) = rvq_train(fw, &self.config.rvq, z, dropped)?;
                let c = fw.graph.constant(offset.clone());
                (fw.graph.add(z, c)?, Some(loss), Some(enc))
            }
        };
        let logits = self.head(fw, b)?;
        Ok(ModelOutput {
            logits,
            rvq_loss,
            features: z,
            encoding,
        })
    }

    /// Encoder and decoder over `[batch, ℓ, d]` tokens.
    pub fn head(&self, fw: &mut Forward<S>, b: Var) -> Result<Vec<Var>> {
        let e = encoder_forward(fw, &self.config.transformer, b)?;
        decoder_forward(fw, &self.config.transformer, e)
    }

    /// Inference-mode features `Z: [batch, ℓ, d]`.
    pub fn features(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut fw = Forward::new(&self.params, false);
        let xv = fw.graph.constant(x.clone());
        let z = backbone_forward(&mut fw, &self.config.backbone, BACKBONE_PREFIX, xv)?;
        Ok(fw.graph.value(z).clone())
    }

    /// Inference-mode logits of every decoder layer for given tokens.
    pub fn head_logits(&self, b: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let mut fw = Forward::new(&self.params, false);
        let bv = fw.graph.constant(b.clone());
        let logits = self.head(&mut fw, bv)?;
        Ok(logits
            .into_iter()
            .map(|l| fw.graph.value(l).clone())
            .collect())
    }

    /// Inference-mode final-layer logits `[batch, N_q, classes]`.
    pub fn logits(&self, x: &Tensor<S>, no_rvq: bool) -> Result<Tensor<S>> {
        let mut fw = Forward::new(&self.params, false);
        let xv = fw.graph.constant(x.clone());
        let quantize = if no_rvq {
            Quantize::Bypass
        } else {
            Quantize::Rvq
        };
        let none = vec![vec![false; self.config.rvq.layers]; x.shape()[0]];
        let out = self.forward(&mut fw, xv, &quantize, &none)?;
        Ok(fw.graph.value(*out.logits.last().unwrap()).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    /// Loads a checkpoint that must match this model's geometry exactly.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut model = AmarModel::new(
            config,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        )?;
        model.params.load(path)?;
        Ok(model)
    }
}

/// Per-query argmax over `[.., N_q, classes]` logits; the last class (∅) becomes `None`.
pub fn predicted_sets<S: Scalar>(logits: &Tensor<S>) -> Vec<Vec<Option<ActivityId>>> {
    let s = logits.shape();
    let (n_q, classes) = (s[s.len() - 2], s[s.len() - 1]);
    logits
        .data()
        .chunks(n_q * classes)
        .map(|sample| {
            sample
                .chunks(classes)
                .map(|row| {
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    (best + 1 < classes).then(|| (best + 1) as ActivityId)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Preset, RunConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn argmax_sets() {
        let l = Tensor::<f64>::from_f64(vec![1, 2, 3], &[0.1, 2.0, 0.3, 0.0, 0.0, 5.0]).unwrap();
        assert_eq!(predicted_sets(&l), vec![vec![Some(2), None]]);
    }

    #[test]
    fn desk_shapes() {
        let cfg = RunConfig::preset(Preset::Desk);
        let model =
            AmarModel::<f64>::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::zeros(&[2, 300, 32]);
        let l = model.logits(&x, false).unwrap();
        assert_eq!(l.shape(), &[2, 6, 10]);
        assert_eq!(model.features(&x).unwrap().shape(), &[2, 19, 32]);
        assert_eq!(model.params.count_trainable(""), cfg.model.param_count());
    }
}
