//! A complete joint model: encoder and predictor parameters with their
//! configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TrainingSample;
use crate::encoder::{self, Arch, EncoderConfig, EncoderParams, ForwardTrace, Guide};
use crate::error::{Error, Result};
use crate::jointlm::{self, JointModelParams, PredictionContext, PredictorConfig, PredictorTrace};
use crate::tensor::Tensor;
use crate::training::GradientStore;

/// Half-width of the uniform initialisation interval.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.predictor.hidden_layers > 0 && self.predictor.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub joint: JointModelParams,
}

impl Model {
    /// Fresh model with weights uniform in `[-INIT_SCALE, INIT_SCALE]` and zero biases.
    pub fn init(config: ModelConfig, src_vocab: usize, tgt_vocab: usize, seed: u64) -> Result<Self> {
        Self::init_with_scale(config, src_vocab, tgt_vocab, seed, INIT_SCALE)
    }

    pub fn init_with_scale(
        config: ModelConfig,
        src_vocab: usize,
        tgt_vocab: usize,
        seed: u64,
        scale: f64,
    ) -> Result<Self> {
        config.validate()?;
        if src_vocab < 4 || tgt_vocab < 4 {
            return Err(Error::Config("vocabularies must include the reserved tokens".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = &config.encoder;
        let encoder = EncoderParams::init(enc, src_vocab, scale, &mut rng);
        let joint = JointModelParams::init(
            &config.predictor,
            enc.repr_dim,
            enc.history,
            enc.tgt_emb_dim,
            tgt_vocab,
            scale,
            &mut rng,
        );
        Ok(Model {
            config,
            encoder,
            joint,
        })
    }

    pub fn arch(&self) -> Arch {
        self.config.encoder.arch
    }

    pub fn src_vocab_size(&self) -> usize {
        self.encoder.src_embeddings.rows()
    }

    pub fn tgt_vocab_size(&self) -> usize {
        self.joint.vocab_size()
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut t = self.encoder.tensors();
        t.extend(self.joint.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.joint.tensors_mut());
        t
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rounds every parameter to the nearest `f32`, the on-disk precision.
    pub fn round_to_storage(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn guide<'a>(&self, sample: &'a TrainingSample) -> Guide<'a> {
        let arch = self.arch();
        Guide {
            affiliated: Some(&sample.affiliated),
            head_positions: if arch == Arch::TagDep {
                &sample.head_positions
            } else {
                &[]
            },
            history: Some(&sample.history),
        }
    }

    fn check_sample(&self, sample: &TrainingSample) -> Result<()> {
        let k = self.config.encoder.history;
        if sample.history.len() != k {
            return Err(Error::Shape(format!(
                "history has {} words, expected {k}",
                sample.history.len()
            )));
        }
        if sample.target as usize >= self.tgt_vocab_size() {
            return Err(Error::Shape(format!("target id {} outside vocabulary", sample.target)));
        }
        Ok(())
    }

    /// Encoder and predictor forward pass for one sample.
    pub fn forward(&self, sample: &TrainingSample) -> Result<(ForwardTrace, PredictorTrace)> {
        self.check_sample(sample)?;
        let (phi, enc_trace) = encoder::encode(
            &sample.source_ids,
            self.guide(sample),
            &self.config.encoder,
            &self.encoder,
            &self.joint.tgt_embeddings,
        )?;
        let pred = jointlm::predict(
            &PredictionContext {
                phi: &phi,
                history: &sample.history,
            },
            &self.joint,
        )?;
        Ok((enc_trace, pred))
    }

    pub fn log_probs(&self, sample: &TrainingSample) -> Result<Vec<f64>> {
        Ok(self.forward(sample)?.1.log_probs)
    }

    /// `log p(target | φ, history)`, natural log.
    pub fn sample_log_prob(&self, sample: &TrainingSample) -> Result<f64> {
        let (_, pred) = self.forward(sample)?;
        Ok(pred.log_probs[sample.target as usize])
    }

    /// Accumulates `scale · ∇(−log p)` for one sample into `grads` and
    /// returns the sample's negative log-probability.
    pub fn accumulate_gradient(
        &self,
        sample: &TrainingSample,
        scale: f64,
        grads: &mut GradientStore,
    ) -> Result<f64> {
        let (enc_trace, pred) = self.forward(sample)?;
        let nll = -pred.log_probs[sample.target as usize];
        let d_phi = jointlm::backward(
            &pred,
            sample.target,
            scale,
            &sample.history,
            self.config.encoder.repr_dim,
            &self.joint,
            &mut grads.joint,
        );
        encoder::backward(
            &enc_trace,
            &d_phi,
            &sample.source_ids,
            &sample.history,
            &self.config.encoder,
            &self.encoder,
            &mut grads.encoder,
            &mut grads.joint.tgt_embeddings,
        );
        Ok(nll)
    }
}

/// Free-function form of [`Model::sample_log_prob`].
pub fn sample_log_prob(
    sample: &TrainingSample,
    enc_params: &EncoderParams,
    jm_params: &JointModelParams,
    cfg: &EncoderConfig,
) -> Result<f64> {
    let (phi, _) = encoder::encode(
        &sample.source_ids,
        Guide {
            affiliated: Some(&sample.affiliated),
            head_positions: if cfg.arch == Arch::TagDep {
                &sample.head_positions
            } else {
                &[]
            },
            history: Some(&sample.history),
        },
        cfg,
        enc_params,
        &jm_params.tgt_embeddings,
    )?;
    let lp = jointlm::predict_log_probs(
        &PredictionContext {
            phi: &phi,
            history: &sample.history,
        },
        jm_params,
    )?;
    lp.get(sample.target as usize)
        .copied()
        .ok_or_else(|| Error::Shape(format!("target id {} outside vocabulary", sample.target)))
}

/// `exp(−mean log p)` over the samples.
pub fn perplexity(samples: &[TrainingSample], model: &Model) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let lps = samples
        .par_iter()
        .map(|s| model.sample_log_prob(s))
        .collect::<Result<Vec<f64>>>()?;
    let mean = lps.iter().sum::<f64>() / lps.len() as f64;
    Ok((-mean).exp())
}

/// Fraction of samples whose gold word is the arg-max prediction.
pub fn accuracy(samples: &[TrainingSample], model: &Model) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let hits = samples
        .par_iter()
        .map(|s| {
            let lp = model.log_probs(s)?;
            let best = lp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i as u32);
            Ok((best == Some(s.target)) as usize)
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS_ID, PAD_ID};
    use crate::encoder::Fusion;

    fn cfg(arch: Arch) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                arch,
                src_emb_dim: 6,
                tgt_emb_dim: 5,
                attn_dim: 4,
                attn_depth: 1,
                conv1_maps: 5,
                conv3_maps: 4,
                repr_dim: 6,
                maxlen: 10,
                history: 3,
                fusion: Fusion::Gating,
                pool_k: 2,
            },
            predictor: PredictorConfig {
                hidden_dim: 7,
                hidden_layers: 1,
            },
        }
    }

    fn sample() -> TrainingSample {
        TrainingSample {
            source_ids: vec![PAD_ID, PAD_ID, 4, 5, 6, 7, 8, 9, 10, 11],
            affiliated: vec![4],
            head_positions: vec![],
            history: vec![BOS_ID, 5, 6],
            target: 7,
        }
    }

    #[test]
    fn uniform_model_gives_log_v() {
        let mut m = Model::init(cfg(Arch::Tag), 12, 20, 1).unwrap();
        m.joint.softmax_w.fill(0.0);
        let lp = m.sample_log_prob(&sample()).unwrap();
        assert!((lp + 20f64.ln()).abs() < 1e-12);
        let ppl = perplexity(&[sample(), sample()], &m).unwrap();
        assert!((ppl - 20.0).abs() < 1e-9);
    }

    #[test]
    fn free_function_matches_method() {
        for arch in Arch::ALL {
            let m = Model::init_with_scale(cfg(arch), 12, 20, 3, 0.7).unwrap();
            let s = sample();
            let a = m.sample_log_prob(&s).unwrap();
            let b = sample_log_prob(&s, &m.encoder, &m.joint, &m.config.encoder).unwrap();
            assert_eq!(a, b);
            assert!(a <= 0.0);
        }
    }

    #[test]
    fn empty_perplexity_is_an_error() {
        let m = Model::init(cfg(Arch::Generic), 12, 20, 1).unwrap();
        assert!(perplexity(&[], &m).is_err());
    }

    #[test]
    fn generic_model_has_no_attention_tensors() {
        let m = Model::init(cfg(Arch::Generic), 12, 20, 1).unwrap();
        assert!(m.tensors().iter().all(|(n, _)| !n.contains("attn")));
        let m = Model::init(cfg(Arch::Attention), 12, 20, 1).unwrap();
        assert!(m.tensors().iter().any(|(n, _)| n == "encoder.attn.0.w"));
    }
}
