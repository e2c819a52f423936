//! Minibatch SGD with exact backpropagation, and finite-difference
//! gradient checking.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TrainingSample, BOS_ID, PAD_ID};
use crate::encoder::{Arch, EncoderConfig, EncoderParams, Fusion};
use crate::error::{Error, Result};
use crate::jointlm::{JointModelParams, PredictorConfig};
use crate::model::{perplexity, Model, ModelConfig, INIT_SCALE};
use crate::tensor::Tensor;

/// Samples per gradient-accumulation chunk. The chunking is independent of
/// the thread count, so the reduction order is fixed.
const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Halve the learning rate whenever held-out perplexity fails to improve.
    pub lr_halving: bool,
    /// Global-norm clipping threshold.
    pub grad_clip: Option<f64>,
    /// Half-width of the uniform weight initialisation.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Fixed gradient reduction order. Turning this off lets rayon reduce
    /// in whatever order it likes (faster, not bit-reproducible).
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            minibatch: 500,
            epochs: 10,
            seed: 1,
            lr_halving: false,
            grad_clip: None,
            init_scale: INIT_SCALE,
            deterministic: true,
        }
    }
}

fn default_init_scale() -> f64 {
    INIT_SCALE
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.minibatch == 0 {
            return Err(Error::Config("minibatch must be at least 1".into()));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::Config("init scale must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One gradient tensor per learnable tensor, same shapes as the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientStore {
    pub encoder: EncoderParams,
    pub joint: JointModelParams,
}

impl GradientStore {
    pub fn zeros_for(model: &Model) -> Self {
        GradientStore {
            encoder: model.encoder.zeros_like(),
            joint: model.joint.zeros_like(),
        }
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

    pub fn add(&mut self, other: &GradientStore) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if !t.all_finite() {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of the batch.
pub fn minibatch_loss(batch: &[TrainingSample], model: &Model) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let lps = batch
        .par_iter()
        .map(|s| model.sample_log_prob(s))
        .collect::<Result<Vec<f64>>>()?;
    Ok(-lps.iter().sum::<f64>() / batch.len() as f64)
}

fn chunk_gradient(chunk: &[TrainingSample], model: &Model, scale: f64) -> Result<(GradientStore, f64)> {
    let mut grads = GradientStore::zeros_for(model);
    let mut nll = 0.0;
    for s in chunk {
        nll += model.accumulate_gradient(s, scale, &mut grads)?;
    }
    Ok((grads, nll))
}

/// Exact gradient of [`minibatch_loss`] and the loss itself.
pub fn backward(batch: &[TrainingSample], model: &Model) -> Result<(GradientStore, f64)> {
    backward_with(batch, model, true)
}

pub fn backward_with(
    batch: &[TrainingSample],
    model: &Model,
    deterministic: bool,
) -> Result<(GradientStore, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scale = 1.0 / batch.len() as f64;
    let (grads, nll) = if deterministic {
        let parts = batch
            .par_chunks(CHUNK)
            .map(|c| chunk_gradient(c, model, scale))
            .collect::<Result<Vec<_>>>()?;
        let mut iter = parts.into_iter();
        let (mut grads, mut nll) = iter.next().expect("non-empty batch");
        for (g, n) in iter {
            grads.add(&g);
            nll += n;
        }
        (grads, nll)
    } else {
        batch
            .par_chunks(CHUNK)
            .map(|c| chunk_gradient(c, model, scale))
            .try_reduce_with(|(mut ga, na), (gb, nb)| {
                ga.add(&gb);
                Ok((ga, na + nb))
            })
            .expect("non-empty batch")?
    };
    grads.check_finite()?;
    debug_assert!(
        grads
            .encoder
            .src_embeddings
            .row(PAD_ID as usize)
            .iter()
            .all(|&v| v == 0.0),
        "gradient reached the PAD embedding"
    );
    Ok((grads, nll * scale))
}

/// `p ← p − lr·g`, after optional global-norm clipping. Returns the
/// (pre-clipping) gradient norm.
pub fn sgd_step(model: &mut Model, grads: &GradientStore, lr: f64, clip: Option<f64>) -> f64 {
    let norm = grads.global_norm();
    let factor = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for ((_, p), (_, g)) in model.tensors_mut().into_iter().zip(grads.tensors()) {
        p.add_scaled(g, -lr * factor);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_nll: f64,
    pub held_out_ppl: Option<f64>,
    pub learning_rate: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl EpochMetrics {
    /// `key=value` line for logs and metrics files.
    pub fn to_line(&self) -> String {
        let ppl = self
            .held_out_ppl
            .map_or_else(|| "na".to_string(), |p| format!("{p:.6}"));
        format!(
            "epoch={} train_nll={:.6} heldout_ppl={} lr={} wall_s={:.3}",
            self.epoch, self.train_nll, ppl, self.learning_rate, self.wall_seconds
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Final model, or the last good one if training aborted.
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub aborted: Option<Error>,
}

/// Permutation of `0..n` for an epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Shuffled minibatch SGD for `cfg.epochs` epochs starting from `model`.
pub fn train(
    mut model: Model,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    held_out: Option<&[TrainingSample]>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let held_out = held_out.filter(|h| !h.is_empty());
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.learning_rate;
    let mut best_ppl = f64::INFINITY;
    let mut batch = Vec::with_capacity(cfg.minibatch);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let last_good = model.clone();
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        let mut nll_sum = 0.0;
        let mut failure = None;
        for idx in order.chunks(cfg.minibatch) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| samples[i].clone()));
            match backward_with(&batch, &model, cfg.deterministic) {
                Ok((grads, nll)) if nll.is_finite() => {
                    nll_sum += nll * batch.len() as f64;
                    sgd_step(&mut model, &grads, lr, cfg.grad_clip);
                }
                Ok((_, nll)) => {
                    failure = Some(Error::Config(format!(
                        "training diverged in epoch {epoch} (nll {nll})"
                    )));
                    break;
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failure {
            log::error!("aborting training: {e}");
            return Ok(TrainOutcome {
                model: last_good,
                metrics,
                aborted: Some(e),
            });
        }
        let held_out_ppl = held_out.map(|h| perplexity(h, &model)).transpose()?;
        let m = EpochMetrics {
            epoch,
            train_nll: nll_sum / samples.len() as f64,
            held_out_ppl,
            learning_rate: lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        metrics.push(m);
        if let Some(p) = held_out_ppl {
            if cfg.lr_halving && p >= best_ppl {
                lr *= 0.5;
            }
            best_ppl = best_ppl.min(p);
        }
    }
    Ok(TrainOutcome {
        model,
        metrics,
        aborted: None,
    })
}

/// Small configuration used for gradient checking.
pub fn grad_check_config(arch: Arch, fusion: Fusion) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            arch,
            src_emb_dim: 8,
            tgt_emb_dim: 8,
            attn_dim: 8,
            attn_depth: 1,
            conv1_maps: 6,
            conv3_maps: 6,
            repr_dim: 8,
            maxlen: 10,
            history: 3,
            fusion,
            pool_k: 2,
        },
        predictor: PredictorConfig {
            hidden_dim: 12,
            hidden_layers: 1,
        },
    }
}

/// Vocabulary size used for gradient checking (both sides).
pub const GRAD_CHECK_VOCAB: usize = 20;
const GRAD_CHECK_BATCH: usize = 4;
/// Larger than the training init so that gate gradients sit well above the
/// rounding floor of an ε=1e-4 central difference.
const GRAD_CHECK_INIT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub arch: Arch,
    pub fusion: Fusion,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < tol)
    }
}

/// Random samples that exercise every guide path of `cfg`.
pub fn random_samples(
    cfg: &EncoderConfig,
    src_vocab: usize,
    tgt_vocab: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<TrainingSample> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(cfg.maxlen / 2..=cfg.maxlen);
            let offset = cfg.maxlen - len;
            let mut source_ids = vec![PAD_ID; offset];
            source_ids.extend((0..len).map(|_| {
                if rng.gen_bool(0.1) {
                    0
                } else {
                    rng.gen_range(4..src_vocab as u32)
                }
            }));
            let mut affiliated: Vec<usize> = (0..rng.gen_range(1..=2))
                .map(|_| rng.gen_range(offset..cfg.maxlen))
                .collect();
            affiliated.sort_unstable();
            affiliated.dedup();
            let head_positions = if cfg.arch == Arch::TagDep {
                vec![rng.gen_range(offset..cfg.maxlen)]
            } else {
                Vec::new()
            };
            TrainingSample {
                source_ids,
                affiliated,
                head_positions,
                history: (0..cfg.history)
                    .map(|_| rng.gen_range(BOS_ID..tgt_vocab as u32))
                    .collect(),
                target: rng.gen_range(3..tgt_vocab as u32),
            }
        })
        .collect()
}

/// Compares analytic gradients with central finite differences for every
/// parameter group, on a random model and batch.
pub fn gradient_check(cfg: &ModelConfig, seed: u64, epsilon: f64) -> Result<GradCheckReport> {
    gradient_check_with(cfg, seed, epsilon, |_| {})
}

/// Like [`gradient_check`], but lets the caller tamper with the analytic
/// gradient before comparison.
pub fn gradient_check_with(
    cfg: &ModelConfig,
    seed: u64,
    epsilon: f64,
    mutate: impl FnOnce(&mut GradientStore),
) -> Result<GradCheckReport> {
    gradient_check_impl(cfg, seed, epsilon, GRAD_CHECK_INIT, mutate)
}

fn gradient_check_impl(
    cfg: &ModelConfig,
    seed: u64,
    epsilon: f64,
    scale: f64,
    mutate: impl FnOnce(&mut GradientStore),
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::NonPositiveEpsilon);
    }
    let v = GRAD_CHECK_VOCAB;
    let mut model = Model::init_with_scale(cfg.clone(), v, v, seed, scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let batch = random_samples(&cfg.encoder, v, v, GRAD_CHECK_BATCH, &mut rng);
    let (mut grads, _) = backward(&batch, &model)?;
    mutate(&mut grads);

    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let mut groups = Vec::new();
    for (g, name) in names.iter().enumerate() {
        let analytic = grads.tensors()[g].1.data().to_vec();
        let mut errors = Vec::with_capacity(analytic.len());
        for (c, &a) in analytic.iter().enumerate() {
            let orig = model.tensors()[g].1.data()[c];
            model.tensors_mut()[g].1.data_mut()[c] = orig + epsilon;
            let up = minibatch_loss(&batch, &model)?;
            model.tensors_mut()[g].1.data_mut()[c] = orig - epsilon;
            let down = minibatch_loss(&batch, &model)?;
            model.tensors_mut()[g].1.data_mut()[c] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            errors.push((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
        }
        let max = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0, f64::max);
        groups.push(GroupError {
            name: name.clone(),
            coords: errors.len(),
            max_rel_error: max(&mut errors.iter().copied()),
        });
        if name == "encoder.conv1.w" && cfg.encoder.arch.tag_bits() > 0 {
            let enc = &cfg.encoder;
            let width = enc.conv1_width();
            let tag_cols: Vec<usize> = (0..3)
                .flat_map(|s| {
                    (0..enc.arch.tag_bits())
                        .map(move |b| enc.prefix_width() + s * enc.input_width() + enc.src_emb_dim + b)
                })
                .collect();
            let sel: Vec<f64> = (0..enc.conv1_maps)
                .flat_map(|f| tag_cols.iter().map(move |&col| f * width + col))
                .map(|i| errors[i])
                .collect();
            groups.push(GroupError {
                name: "encoder.conv1.w[tag_bits]".into(),
                coords: sel.len(),
                max_rel_error: max(&mut sel.iter().copied()),
            });
        }
    }
    Ok(GradCheckReport {
        arch: cfg.encoder.arch,
        fusion: cfg.encoder.fusion,
        groups,
    })
}
