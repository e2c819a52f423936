//! Joint language model head: predicts the next target word from the source
//! representation φ and the k previous target words.
//!
//! Perplexities are natural-log based: `exp(-mean ln p)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{history_input, Dense, SourceRepresentation};
use crate::error::{Error, Result};
use crate::tensor::{axpy, log_sum_exp, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub hidden_dim: usize,
    pub hidden_layers: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            hidden_dim: 200,
            hidden_layers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointModelParams {
    /// `V_tgt × d_t`, shared by the predictor input and the attention DNN.
    pub tgt_embeddings: Tensor,
    pub hidden: Vec<Dense>,
    pub softmax_w: Tensor,
    pub softmax_b: Tensor,
}

impl JointModelParams {
    pub fn init<R: Rng>(
        cfg: &PredictorConfig,
        repr_dim: usize,
        history: usize,
        tgt_emb_dim: usize,
        tgt_vocab: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let tgt_embeddings = Tensor::uniform(&[tgt_vocab, tgt_emb_dim], scale, rng);
        let mut inp = repr_dim + history * tgt_emb_dim;
        let mut hidden = Vec::with_capacity(cfg.hidden_layers);
        for _ in 0..cfg.hidden_layers {
            hidden.push(Dense::init(cfg.hidden_dim, inp, scale, rng));
            inp = cfg.hidden_dim;
        }
        JointModelParams {
            tgt_embeddings,
            hidden,
            softmax_w: Tensor::uniform(&[tgt_vocab, inp], scale, rng),
            softmax_b: Tensor::zeros(&[tgt_vocab]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        JointModelParams {
            tgt_embeddings: Tensor::zeros_like(&self.tgt_embeddings),
            hidden: self.hidden.iter().map(Dense::zeros_like).collect(),
            softmax_w: Tensor::zeros_like(&self.softmax_w),
            softmax_b: Tensor::zeros_like(&self.softmax_b),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.softmax_w.rows()
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("joint.tgt_embeddings".to_string(), &self.tgt_embeddings)];
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("joint.hidden.{i}.w"), &l.w));
            out.push((format!("joint.hidden.{i}.b"), &l.b));
        }
        out.push(("joint.softmax.w".into(), &self.softmax_w));
        out.push(("joint.softmax.b".into(), &self.softmax_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("joint.tgt_embeddings".to_string(), &mut self.tgt_embeddings)];
        for (i, l) in self.hidden.iter_mut().enumerate() {
            out.push((format!("joint.hidden.{i}.w"), &mut l.w));
            out.push((format!("joint.hidden.{i}.b"), &mut l.b));
        }
        out.push(("joint.softmax.w".into(), &mut self.softmax_w));
        out.push(("joint.softmax.b".into(), &mut self.softmax_b));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionContext<'a> {
    pub phi: &'a SourceRepresentation,
    pub history: &'a [u32],
}

/// Activations of one prediction: the MLP input, each hidden output, and
/// the final log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorTrace {
    pub acts: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
}

pub fn predict(ctx: &PredictionContext<'_>, params: &JointModelParams) -> Result<PredictorTrace> {
    let mut input = ctx.phi.values.clone();
    input.extend(history_input(ctx.history, &params.tgt_embeddings)?);
    let expected = params
        .hidden
        .first()
        .map_or(params.softmax_w.cols(), |l| l.w.cols());
    if input.len() != expected {
        return Err(Error::Shape(format!(
            "predictor input {} does not match first layer width {expected}",
            input.len()
        )));
    }
    let mut acts = vec![input];
    for layer in &params.hidden {
        let y = layer.forward(acts.last().expect("non-empty"));
        acts.push(y);
    }
    let mut logits = vec![0.0; params.vocab_size()];
    params.softmax_w.affine(
        acts.last().expect("non-empty"),
        params.softmax_b.data(),
        &mut logits,
    );
    let lse = log_sum_exp(&logits);
    logits.iter_mut().for_each(|v| *v -= lse);
    Ok(PredictorTrace {
        acts,
        log_probs: logits,
    })
}

/// Log-probabilities of every target word.
pub fn predict_log_probs(
    ctx: &PredictionContext<'_>,
    params: &JointModelParams,
) -> Result<Vec<f64>> {
    Ok(predict(ctx, params)?.log_probs)
}

/// Backward of `scale · (−log p(target))`. Accumulates into `grads` and
/// returns `dL/dφ`.
pub fn backward(
    trace: &PredictorTrace,
    target: u32,
    scale: f64,
    history: &[u32],
    repr_dim: usize,
    params: &JointModelParams,
    grads: &mut JointModelParams,
) -> Vec<f64> {
    let mut d_logits: Vec<f64> = trace.log_probs.iter().map(|lp| scale * lp.exp()).collect();
    d_logits[target as usize] -= scale;

    let top = trace.acts.last().expect("non-empty");
    grads.softmax_w.outer_acc(&d_logits, top);
    axpy(1.0, &d_logits, grads.softmax_b.data_mut());
    let mut dy = vec![0.0; top.len()];
    params.softmax_w.matvec_t_acc(&d_logits, &mut dy);

    for (l, layer) in params.hidden.iter().enumerate().rev() {
        dy = layer.backward(&trace.acts[l], &trace.acts[l + 1], &dy, &mut grads.hidden[l]);
    }

    let dt = params.tgt_embeddings.cols();
    for (j, &id) in history.iter().enumerate() {
        let off = repr_dim + j * dt;
        axpy(
            1.0,
            &dy[off..off + dt],
            grads.tgt_embeddings.row_mut(id as usize),
        );
    }
    dy.truncate(repr_dim);
    dy
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(v: usize, hidden: usize, seed: u64) -> JointModelParams {
        let cfg = PredictorConfig {
            hidden_dim: hidden,
            hidden_layers: 1,
        };
        JointModelParams::init(&cfg, 5, 3, 4, v, 0.8, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_softmax_is_uniform() {
        let mut p = params(20, 16, 1);
        p.softmax_w.fill(0.0);
        let phi = SourceRepresentation {
            values: vec![0.3; 5],
        };
        let lp = predict_log_probs(
            &PredictionContext {
                phi: &phi,
                history: &[2, 5, 9],
            },
            &p,
        )
        .unwrap();
        for v in lp {
            assert!((v + 20f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_softmax_oracle() {
        let p = params(20, 16, 2);
        let phi = SourceRepresentation {
            values: vec![0.1, 0.9, 0.4, 0.5, 0.7],
        };
        let history = [4u32, 7, 11];
        let lp = predict_log_probs(&PredictionContext { phi: &phi, history: &history }, &p)
            .unwrap();

        // naive oracle with explicit loops
        let mut x = phi.values.clone();
        for &h in &history {
            x.extend_from_slice(p.tgt_embeddings.row(h as usize));
        }
        let layer = &p.hidden[0];
        let hid: Vec<f64> = (0..16)
            .map(|i| {
                let mut s = layer.b.data()[i];
                for (j, xv) in x.iter().enumerate() {
                    s += layer.w.row(i)[j] * xv;
                }
                1.0 / (1.0 + (-s).exp())
            })
            .collect();
        let e: Vec<f64> = (0..20)
            .map(|v| {
                let mut s = p.softmax_b.data()[v];
                for (j, hv) in hid.iter().enumerate() {
                    s += p.softmax_w.row(v)[j] * hv;
                }
                s.exp()
            })
            .collect();
        let z: f64 = e.iter().sum();
        for v in 0..20 {
            assert!((lp[v] - (e[v] / z).ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn zeroing_phi_block_removes_source_dependence() {
        let mut p = params(20, 16, 3);
        for i in 0..16 {
            p.hidden[0].w.row_mut(i)[..5].fill(0.0);
        }
        let history = [4u32, 7, 11];
        let a = SourceRepresentation {
            values: vec![0.1; 5],
        };
        let b = SourceRepresentation {
            values: vec![0.9, 0.2, 0.4, 0.8, 0.3],
        };
        let la = predict_log_probs(&PredictionContext { phi: &a, history: &history }, &p).unwrap();
        let lb = predict_log_probs(&PredictionContext { phi: &b, history: &history }, &p).unwrap();
        assert_eq!(la, lb);
    }
}
