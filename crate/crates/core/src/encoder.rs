//! Convolutional source encoders.
//!
//! The pipeline is fixed: embedding layer, window-3 convolution, local
//! fusion of adjacent window pairs, a second window-3 convolution, global
//! fusion over all locations, and a sigmoid projection to the source
//! representation. The guided variants differ only in their first layers:
//!
//! * `tag` appends a bit marking affiliated source words,
//! * `tag_dep` appends a second bit marking their dependency heads,
//! * `attention` prepends a history-derived vector `h` to every first-layer
//!   convolution window.
//!
//! Local and global fusion are either learned gates (default) or the max /
//! k-max pooling ablation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD_ID;
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, sigmoid, softmax_into, Tensor};

/// Convolution window width on both convolution layers.
pub const WINDOW: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Generic,
    Tag,
    TagDep,
    Attention,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Generic, Arch::Tag, Arch::TagDep, Arch::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Generic => "generic",
            Arch::Tag => "tag",
            Arch::TagDep => "tag_dep",
            Arch::Attention => "attention",
        }
    }

    /// Number of tagging bits appended to each embedding.
    pub fn tag_bits(self) -> usize {
        match self {
            Arch::Tag => 1,
            Arch::TagDep => 2,
            Arch::Generic | Arch::Attention => 0,
        }
    }

    pub fn needs_affiliation(self) -> bool {
        self.tag_bits() > 0
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generic" | "cnn" => Ok(Arch::Generic),
            "tag" | "tagcnn" => Ok(Arch::Tag),
            "tag_dep" | "tag-dep" => Ok(Arch::TagDep),
            "attention" | "in" | "incnn" => Ok(Arch::Attention),
            _ => Err(Error::Config(format!("unknown arch {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Gating,
    Pooling,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gating" => Ok(Fusion::Gating),
            "pooling" => Ok(Fusion::Pooling),
            _ => Err(Error::Config(format!("unknown fusion mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub arch: Arch,
    /// Source embedding dimension.
    pub src_emb_dim: usize,
    /// Target embedding dimension (history words).
    pub tgt_emb_dim: usize,
    /// Dimension of the attention signal `h` (attention arch only).
    pub attn_dim: usize,
    /// Number of affine+sigmoid layers producing `h`.
    pub attn_depth: usize,
    pub conv1_maps: usize,
    pub conv3_maps: usize,
    pub repr_dim: usize,
    pub maxlen: usize,
    /// Target history length `k`.
    pub history: usize,
    pub fusion: Fusion,
    /// Global k-max pool size, pooling mode only.
    pub pool_k: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            arch: Arch::Tag,
            src_emb_dim: 100,
            tgt_emb_dim: 100,
            attn_dim: 100,
            attn_depth: 1,
            conv1_maps: 100,
            conv3_maps: 100,
            repr_dim: 100,
            maxlen: 40,
            history: 3,
            fusion: Fusion::Gating,
            pool_k: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("src_emb_dim", self.src_emb_dim),
            ("conv1_maps", self.conv1_maps),
            ("conv3_maps", self.conv3_maps),
            ("repr_dim", self.repr_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.arch == Arch::Attention {
            if self.attn_dim == 0 || self.attn_depth == 0 || self.tgt_emb_dim == 0 {
                return Err(Error::Config(
                    "attention arch needs positive attn_dim, attn_depth and tgt_emb_dim".into(),
                ));
            }
            if self.history == 0 {
                return Err(Error::Config("attention arch needs a history".into()));
            }
        }
        if self.maxlen < WINDOW {
            return Err(Error::Config(format!("maxlen {} shorter than window", self.maxlen)));
        }
        let l1 = self.layer1_len();
        if l1 % 2 != 0 {
            return Err(Error::Config(format!(
                "layer-1 length {l1} (maxlen - 2) must be even"
            )));
        }
        if self.layer2_len() < WINDOW {
            return Err(Error::Config(format!(
                "maxlen {} leaves no layer-3 location",
                self.maxlen
            )));
        }
        if self.fusion == Fusion::Pooling && (self.pool_k == 0 || self.pool_k > self.layer3_len())
        {
            return Err(Error::Config(format!(
                "pool_k {} outside [1, {}]",
                self.pool_k,
                self.layer3_len()
            )));
        }
        Ok(())
    }

    pub fn layer1_len(&self) -> usize {
        self.maxlen + 1 - WINDOW
    }

    pub fn layer2_len(&self) -> usize {
        self.layer1_len() / 2
    }

    pub fn layer3_len(&self) -> usize {
        self.layer2_len() + 1 - WINDOW
    }

    /// Width of a Layer-0 row: embedding plus tag bits.
    pub fn input_width(&self) -> usize {
        self.src_emb_dim + self.arch.tag_bits()
    }

    pub fn prefix_width(&self) -> usize {
        if self.arch == Arch::Attention {
            self.attn_dim
        } else {
            0
        }
    }

    /// Width of a first-layer convolution filter.
    pub fn conv1_width(&self) -> usize {
        self.prefix_width() + WINDOW * self.input_width()
    }
}

/// Affine layer with sigmoid activation; `w` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn init<R: Rng>(out: usize, inp: usize, scale: f64, rng: &mut R) -> Self {
        Dense {
            w: Tensor::uniform(&[out, inp], scale, rng),
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Dense {
            w: Tensor::zeros_like(&self.w),
            b: Tensor::zeros_like(&self.b),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim()];
        self.w.affine(x, self.b.data(), &mut out);
        out.iter_mut().for_each(|v| *v = sigmoid(*v));
        out
    }

    /// Back through `y = σ(Wx + b)`; returns `dx`.
    pub fn backward(&self, x: &[f64], y: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let dpre: Vec<f64> = dy.iter().zip(y).map(|(g, v)| g * v * (1.0 - v)).collect();
        grad.w.outer_acc(&dpre, x);
        axpy(1.0, &dpre, grad.b.data_mut());
        let mut dx = vec![0.0; x.len()];
        self.w.matvec_t_acc(&dpre, &mut dx);
        dx
    }
}

/// Every learnable tensor of an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `V_src × d`; the PAD row stays zero.
    pub src_embeddings: Tensor,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    /// Local gate over four Layer-0 rows (`1 × 4·d0`), gating mode only.
    pub gate_local: Option<Dense>,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    /// Global gate scoring vector `w_g`, gating mode only.
    pub gate_global_w: Option<Tensor>,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    /// Attention DNN from the concatenated history embeddings to `h`.
    pub attn: Vec<Dense>,
}

impl EncoderParams {
    /// Uniform `[-scale, scale]` weights and embeddings, zero biases.
    pub fn init<R: Rng>(cfg: &EncoderConfig, src_vocab: usize, scale: f64, rng: &mut R) -> Self {
        let d0 = cfg.input_width();
        let mut src_embeddings = Tensor::uniform(&[src_vocab, cfg.src_emb_dim], scale, rng);
        if (PAD_ID as usize) < src_vocab {
            src_embeddings.row_mut(PAD_ID as usize).fill(0.0);
        }
        let conv1_w = Tensor::uniform(&[cfg.conv1_maps, cfg.conv1_width()], scale, rng);
        let gate_local =
            (cfg.fusion == Fusion::Gating).then(|| Dense::init(1, 4 * d0, scale, rng));
        let conv3_w = Tensor::uniform(&[cfg.conv3_maps, WINDOW * cfg.conv1_maps], scale, rng);
        let gate_global_w = (cfg.fusion == Fusion::Gating)
            .then(|| Tensor::uniform(&[cfg.conv3_maps], scale, rng));
        let proj_w = Tensor::uniform(&[cfg.repr_dim, cfg.conv3_maps], scale, rng);
        let attn = if cfg.arch == Arch::Attention {
            (0..cfg.attn_depth)
                .map(|i| {
                    let inp = if i == 0 {
                        cfg.history * cfg.tgt_emb_dim
                    } else {
                        cfg.attn_dim
                    };
                    Dense::init(cfg.attn_dim, inp, scale, rng)
                })
                .collect()
        } else {
            Vec::new()
        };
        EncoderParams {
            src_embeddings,
            conv1_b: Tensor::zeros(&[cfg.conv1_maps]),
            conv1_w,
            gate_local,
            conv3_b: Tensor::zeros(&[cfg.conv3_maps]),
            conv3_w,
            gate_global_w,
            proj_b: Tensor::zeros(&[cfg.repr_dim]),
            proj_w,
            attn,
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            src_embeddings: Tensor::zeros_like(&self.src_embeddings),
            conv1_w: Tensor::zeros_like(&self.conv1_w),
            conv1_b: Tensor::zeros_like(&self.conv1_b),
            gate_local: self.gate_local.as_ref().map(Dense::zeros_like),
            conv3_w: Tensor::zeros_like(&self.conv3_w),
            conv3_b: Tensor::zeros_like(&self.conv3_b),
            gate_global_w: self.gate_global_w.as_ref().map(Tensor::zeros_like),
            proj_w: Tensor::zeros_like(&self.proj_w),
            proj_b: Tensor::zeros_like(&self.proj_b),
            attn: self.attn.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("encoder.src_embeddings".to_string(), &self.src_embeddings),
            ("encoder.conv1.w".into(), &self.conv1_w),
            ("encoder.conv1.b".into(), &self.conv1_b),
        ];
        if let Some(g) = &self.gate_local {
            out.push(("encoder.gate_local.w".into(), &g.w));
            out.push(("encoder.gate_local.b".into(), &g.b));
        }
        out.push(("encoder.conv3.w".into(), &self.conv3_w));
        out.push(("encoder.conv3.b".into(), &self.conv3_b));
        if let Some(w) = &self.gate_global_w {
            out.push(("encoder.gate_global.w".into(), w));
        }
        out.push(("encoder.proj.w".into(), &self.proj_w));
        out.push(("encoder.proj.b".into(), &self.proj_b));
        for (i, l) in self.attn.iter().enumerate() {
            out.push((format!("encoder.attn.{i}.w"), &l.w));
            out.push((format!("encoder.attn.{i}.b"), &l.b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("encoder.src_embeddings".to_string(), &mut self.src_embeddings),
            ("encoder.conv1.w".into(), &mut self.conv1_w),
            ("encoder.conv1.b".into(), &mut self.conv1_b),
        ];
        if let Some(g) = &mut self.gate_local {
            out.push(("encoder.gate_local.w".into(), &mut g.w));
            out.push(("encoder.gate_local.b".into(), &mut g.b));
        }
        out.push(("encoder.conv3.w".into(), &mut self.conv3_w));
        out.push(("encoder.conv3.b".into(), &mut self.conv3_b));
        if let Some(w) = &mut self.gate_global_w {
            out.push(("encoder.gate_global.w".into(), w));
        }
        out.push(("encoder.proj.w".into(), &mut self.proj_w));
        out.push(("encoder.proj.b".into(), &mut self.proj_b));
        for (i, l) in self.attn.iter_mut().enumerate() {
            out.push((format!("encoder.attn.{i}.w"), &mut l.w));
            out.push((format!("encoder.attn.{i}.b"), &mut l.b));
        }
        out
    }
}

/// The fixed-dimension vector φ handed to the predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceRepresentation {
    pub values: Vec<f64>,
}

/// Guide signals for one encoding. `None` means "not supplied", which is an
/// error for the archs that need it; an empty slice is a supplied empty set.
#[derive(Clone, Copy, Debug, Default)]
pub struct Guide<'a> {
    pub affiliated: Option<&'a [usize]>,
    pub head_positions: &'a [usize],
    pub history: Option<&'a [u32]>,
}

/// Selection made by the local fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LocalFusion {
    /// Gate weight α per window pair.
    Gates(Vec<f64>),
    /// Per (pair, map): 0 if the left window won, 1 if the right did.
    Argmax(Vec<u8>),
}

/// Selection made by the global fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub enum GlobalFusion {
    /// Softmax weights ω over Layer-3 locations.
    Weights(Vec<f64>),
    /// Per feature map, the locations averaged by k-max pooling.
    TopK(Vec<Vec<usize>>),
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub layer0: Tensor,
    /// Input to the attention DNN followed by each layer's output.
    pub attn_acts: Vec<Vec<f64>>,
    pub layer1: Tensor,
    pub local: LocalFusion,
    pub layer2: Tensor,
    pub layer3: Tensor,
    pub global: GlobalFusion,
    pub layer4: Vec<f64>,
    pub phi: Vec<f64>,
}

impl ForwardTrace {
    pub fn attention_signal(&self) -> Option<&[f64]> {
        if self.attn_acts.len() > 1 {
            self.attn_acts.last().map(Vec::as_slice)
        } else {
            None
        }
    }

    /// Recomputes Layer-4 and φ from Layer-3 and the stored fusion selection.
    pub fn replay_phi(&self, params: &EncoderParams) -> Vec<f64> {
        let f3 = self.layer3.cols();
        let mut layer4 = vec![0.0; f3];
        match &self.global {
            GlobalFusion::Weights(w) => {
                for (i, &wi) in w.iter().enumerate() {
                    axpy(wi, self.layer3.row(i), &mut layer4);
                }
            }
            GlobalFusion::TopK(sel) => {
                for (f, locs) in sel.iter().enumerate() {
                    let s: f64 = locs.iter().map(|&i| self.layer3.row(i)[f]).sum();
                    layer4[f] = s / locs.len() as f64;
                }
            }
        }
        project_final(&layer4, &params.proj_w, &params.proj_b).values
    }
}

/// Layer-0: embeddings plus tag bits; PAD rows are all zero.
pub fn embed_source(
    source_ids: &[u32],
    affiliated: &[usize],
    head_positions: &[usize],
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<Tensor> {
    if source_ids.len() != cfg.maxlen {
        return Err(Error::Shape(format!(
            "source has {} ids, expected maxlen {}",
            source_ids.len(),
            cfg.maxlen
        )));
    }
    if !head_positions.is_empty() && cfg.arch != Arch::TagDep {
        return Err(Error::Config(format!(
            "head positions supplied to arch {}",
            cfg.arch
        )));
    }
    let d = cfg.src_emb_dim;
    let d0 = cfg.input_width();
    let vocab = params.src_embeddings.rows();
    let mut x = Tensor::zeros(&[cfg.maxlen, d0]);
    for (i, &id) in source_ids.iter().enumerate() {
        if id == PAD_ID {
            continue;
        }
        if id as usize >= vocab {
            return Err(Error::Shape(format!("source id {id} outside vocabulary {vocab}")));
        }
        x.row_mut(i)[..d].copy_from_slice(params.src_embeddings.row(id as usize));
    }
    let bits = cfg.arch.tag_bits();
    let mut set_bit = |positions: &[usize], bit: usize| -> Result<()> {
        for &p in positions {
            if p >= cfg.maxlen {
                return Err(Error::Shape(format!("guide position {p} outside maxlen")));
            }
            if source_ids[p] != PAD_ID {
                x.row_mut(p)[d + bit] = 1.0;
            }
        }
        Ok(())
    };
    if bits >= 1 {
        set_bit(affiliated, 0)?;
    }
    if bits >= 2 {
        set_bit(head_positions, 1)?;
    }
    Ok(x)
}

/// Narrow window-3 convolution with sigmoid units. `input` is `L_in × width`;
/// `filters` is `F × (|prefix| + 3·width)`; the optional prefix is prepended
/// to every window.
pub fn convolve(
    input: &Tensor,
    filters: &Tensor,
    biases: &[f64],
    prefix: Option<&[f64]>,
) -> Result<Tensor> {
    let l_in = input.rows();
    let width = input.cols();
    let p = prefix.map_or(0, <[f64]>::len);
    if l_in < WINDOW {
        return Err(Error::Shape(format!("convolution input length {l_in} < {WINDOW}")));
    }
    if filters.cols() != p + WINDOW * width || biases.len() != filters.rows() {
        return Err(Error::Shape(format!(
            "filters {:?} incompatible with prefix {p}, width {width}, {} biases",
            filters.shape(),
            biases.len()
        )));
    }
    let maps = filters.rows();
    let l_out = l_in + 1 - WINDOW;
    // the prefix contribution is the same at every location
    let base: Vec<f64> = (0..maps)
        .map(|f| biases[f] + prefix.map_or(0.0, |h| dot(&filters.row(f)[..p], h)))
        .collect();
    let mut out = Tensor::zeros(&[l_out, maps]);
    for i in 0..l_out {
        let window = &input.data()[i * width..(i + WINDOW) * width];
        let row = out.row_mut(i);
        for f in 0..maps {
            row[f] = sigmoid(base[f] + dot(&filters.row(f)[p..], window));
        }
    }
    Ok(out)
}

/// Gated blend of window pairs `(2j, 2j+1)`; the gate reads the four
/// Layer-0 rows `2j..2j+4` underlying the pair. Returns output and α.
pub fn local_gate(
    layer1: &Tensor,
    layer0: &Tensor,
    gate_w: &[f64],
    gate_b: f64,
) -> Result<(Tensor, Vec<f64>)> {
    let l1 = layer1.rows();
    let d0 = layer0.cols();
    if l1 % 2 != 0 {
        return Err(Error::Config(format!("layer-1 length {l1} is odd")));
    }
    if gate_w.len() != 4 * d0 || layer0.rows() < l1 + 2 {
        return Err(Error::Shape("local gate input mismatch".into()));
    }
    let maps = layer1.cols();
    let mut out = Tensor::zeros(&[l1 / 2, maps]);
    let mut alphas = Vec::with_capacity(l1 / 2);
    for j in 0..l1 / 2 {
        let input = &layer0.data()[2 * j * d0..(2 * j + 4) * d0];
        let a = sigmoid(dot(gate_w, input) + gate_b);
        let (left, right) = (layer1.row(2 * j), layer1.row(2 * j + 1));
        for (o, (l, r)) in out.row_mut(j).iter_mut().zip(left.iter().zip(right)) {
            *o = a * l + (1.0 - a) * r;
        }
        alphas.push(a);
    }
    Ok((out, alphas))
}

/// Softmax-weighted sum over locations. Returns output and ω.
pub fn global_gate(layer3: &Tensor, w_g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = (0..layer3.rows()).map(|i| dot(w_g, layer3.row(i))).collect();
    let mut omega = vec![0.0; scores.len()];
    softmax_into(&scores, &mut omega);
    let mut out = vec![0.0; layer3.cols()];
    for (i, &w) in omega.iter().enumerate() {
        axpy(w, layer3.row(i), &mut out);
    }
    (out, omega)
}

/// Size-2 max pooling over window pairs; ties go to the left window.
pub fn pool_local(layer1: &Tensor) -> Result<(Tensor, Vec<u8>)> {
    let l1 = layer1.rows();
    if l1 % 2 != 0 {
        return Err(Error::Config(format!("layer-1 length {l1} is odd")));
    }
    let maps = layer1.cols();
    let mut out = Tensor::zeros(&[l1 / 2, maps]);
    let mut arg = Vec::with_capacity(l1 / 2 * maps);
    for j in 0..l1 / 2 {
        let (left, right) = (layer1.row(2 * j), layer1.row(2 * j + 1));
        for f in 0..maps {
            let pick_right = right[f] > left[f];
            out.row_mut(j)[f] = if pick_right { right[f] } else { left[f] };
            arg.push(pick_right as u8);
        }
    }
    Ok((out, arg))
}

/// Mean of the `pool_k` largest values of each feature map. Ties prefer the
/// lower location.
pub fn pool_global(layer3: &Tensor, pool_k: usize) -> Result<(Vec<f64>, Vec<Vec<usize>>)> {
    let l3 = layer3.rows();
    if pool_k == 0 || pool_k > l3 {
        return Err(Error::Config(format!("pool_k {pool_k} outside [1, {l3}]")));
    }
    let maps = layer3.cols();
    let mut out = vec![0.0; maps];
    let mut sel = Vec::with_capacity(maps);
    for (f, o) in out.iter_mut().enumerate() {
        let mut idx: Vec<usize> = (0..l3).collect();
        idx.sort_by(|&a, &b| {
            layer3.row(b)[f]
                .total_cmp(&layer3.row(a)[f])
                .then(a.cmp(&b))
        });
        idx.truncate(pool_k);
        idx.sort_unstable();
        *o = idx.iter().map(|&i| layer3.row(i)[f]).sum::<f64>() / pool_k as f64;
        sel.push(idx);
    }
    Ok((out, sel))
}

pub fn project_final(layer4: &[f64], proj_w: &Tensor, proj_b: &Tensor) -> SourceRepresentation {
    let mut values = vec![0.0; proj_w.rows()];
    proj_w.affine(layer4, proj_b.data(), &mut values);
    values.iter_mut().for_each(|v| *v = sigmoid(*v));
    SourceRepresentation { values }
}

/// Concatenated embeddings of the history words.
pub fn history_input(history: &[u32], tgt_embeddings: &Tensor) -> Result<Vec<f64>> {
    let mut x = Vec::with_capacity(history.len() * tgt_embeddings.cols());
    for &id in history {
        if id as usize >= tgt_embeddings.rows() {
            return Err(Error::Shape(format!("history id {id} outside target vocabulary")));
        }
        x.extend_from_slice(tgt_embeddings.row(id as usize));
    }
    Ok(x)
}

/// Attention signal `h` from the k-word history. Returns every activation,
/// starting with the DNN input; `h` is the last entry.
pub fn compute_attention_signal(
    history: &[u32],
    tgt_embeddings: &Tensor,
    layers: &[Dense],
) -> Result<Vec<Vec<f64>>> {
    let mut acts = vec![history_input(history, tgt_embeddings)?];
    for layer in layers {
        let x = acts.last().expect("non-empty");
        if x.len() != layer.w.cols() {
            return Err(Error::Shape(format!(
                "attention input {} does not match layer width {}",
                x.len(),
                layer.w.cols()
            )));
        }
        let y = layer.forward(x);
        acts.push(y);
    }
    Ok(acts)
}

/// Full encoder forward pass.
pub fn encode(
    source_ids: &[u32],
    guide: Guide<'_>,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    tgt_embeddings: &Tensor,
) -> Result<(SourceRepresentation, ForwardTrace)> {
    let (affiliated, heads) = match cfg.arch {
        Arch::Tag | Arch::TagDep => {
            let aff = guide.affiliated.ok_or(Error::MissingGuide {
                arch: cfg.arch.name(),
                what: "affiliated positions",
            })?;
            let heads = if cfg.arch == Arch::TagDep {
                guide.head_positions
            } else {
                &[][..]
            };
            (aff, heads)
        }
        Arch::Generic | Arch::Attention => (&[][..], &[][..]),
    };
    let layer0 = embed_source(source_ids, affiliated, heads, cfg, params)?;

    let attn_acts = if cfg.arch == Arch::Attention {
        let history = guide.history.ok_or(Error::MissingGuide {
            arch: cfg.arch.name(),
            what: "target history",
        })?;
        if history.len() != cfg.history {
            return Err(Error::Shape(format!(
                "history has {} words, expected {}",
                history.len(),
                cfg.history
            )));
        }
        compute_attention_signal(history, tgt_embeddings, &params.attn)?
    } else {
        Vec::new()
    };
    let prefix = if attn_acts.len() > 1 {
        attn_acts.last().map(Vec::as_slice)
    } else {
        None
    };

    let layer1 = convolve(&layer0, &params.conv1_w, params.conv1_b.data(), prefix)?;
    let (layer2, local) = match (&params.gate_local, cfg.fusion) {
        (Some(g), Fusion::Gating) => {
            let (out, a) = local_gate(&layer1, &layer0, g.w.data(), g.b.data()[0])?;
            (out, LocalFusion::Gates(a))
        }
        (None, Fusion::Pooling) => {
            let (out, a) = pool_local(&layer1)?;
            (out, LocalFusion::Argmax(a))
        }
        _ => return Err(Error::Config("local fusion parameters do not match mode".into())),
    };
    let layer3 = convolve(&layer2, &params.conv3_w, params.conv3_b.data(), None)?;
    let (layer4, global) = match (&params.gate_global_w, cfg.fusion) {
        (Some(w), Fusion::Gating) => {
            if w.len() != layer3.cols() {
                return Err(Error::Shape("global gate width mismatch".into()));
            }
            let (out, omega) = global_gate(&layer3, w.data());
            (out, GlobalFusion::Weights(omega))
        }
        (None, Fusion::Pooling) => {
            let (out, sel) = pool_global(&layer3, cfg.pool_k)?;
            (out, GlobalFusion::TopK(sel))
        }
        _ => return Err(Error::Config("global fusion parameters do not match mode".into())),
    };
    if params.proj_w.cols() != layer4.len() {
        return Err(Error::Shape("projection width mismatch".into()));
    }
    let phi = project_final(&layer4, &params.proj_w, &params.proj_b);
    let trace = ForwardTrace {
        layer0,
        attn_acts,
        layer1,
        local,
        layer2,
        layer3,
        global,
        layer4,
        phi: phi.values.clone(),
    };
    Ok((phi, trace))
}

/// Backward through a convolution layer: accumulates filter/bias gradients
/// and returns `(d input, d prefix)`.
fn convolve_backward(
    input: &Tensor,
    output: &Tensor,
    d_output: &Tensor,
    filters: &Tensor,
    prefix: Option<&[f64]>,
    d_filters: &mut Tensor,
    d_biases: &mut Tensor,
) -> (Tensor, Vec<f64>) {
    let width = input.cols();
    let p = prefix.map_or(0, <[f64]>::len);
    let maps = filters.rows();
    let mut d_input = Tensor::zeros(&[input.rows(), width]);
    let mut pre_sum = vec![0.0; maps];
    for i in 0..output.rows() {
        let window = &input.data()[i * width..(i + WINDOW) * width];
        let z = output.row(i);
        let dz = d_output.row(i);
        for f in 0..maps {
            let g = dz[f] * z[f] * (1.0 - z[f]);
            if g == 0.0 {
                continue;
            }
            pre_sum[f] += g;
            axpy(g, window, &mut d_filters.row_mut(f)[p..]);
            let d_win = &mut d_input.data_mut()[i * width..(i + WINDOW) * width];
            axpy(g, &filters.row(f)[p..], d_win);
        }
    }
    axpy(1.0, &pre_sum, d_biases.data_mut());
    let mut d_prefix = vec![0.0; p];
    if let Some(h) = prefix {
        for f in 0..maps {
            axpy(pre_sum[f], h, &mut d_filters.row_mut(f)[..p]);
            axpy(pre_sum[f], &filters.row(f)[..p], &mut d_prefix);
        }
    }
    (d_input, d_prefix)
}

/// Accumulates the gradient of a loss with respect to every encoder tensor,
/// given `dL/dφ`. History-embedding gradients from the attention path go
/// into `d_tgt_embeddings`.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    trace: &ForwardTrace,
    d_phi: &[f64],
    source_ids: &[u32],
    history: &[u32],
    cfg: &EncoderConfig,
    params: &EncoderParams,
    grads: &mut EncoderParams,
    d_tgt_embeddings: &mut Tensor,
) {
    // Layer-5
    let d_pre5: Vec<f64> = d_phi
        .iter()
        .zip(&trace.phi)
        .map(|(g, v)| g * v * (1.0 - v))
        .collect();
    grads.proj_w.outer_acc(&d_pre5, &trace.layer4);
    axpy(1.0, &d_pre5, grads.proj_b.data_mut());
    let mut d_layer4 = vec![0.0; trace.layer4.len()];
    params.proj_w.matvec_t_acc(&d_pre5, &mut d_layer4);

    // Layer-4
    let layer3 = &trace.layer3;
    let mut d_layer3 = Tensor::zeros_like(layer3);
    match &trace.global {
        GlobalFusion::Weights(omega) => {
            let w_g = params.gate_global_w.as_ref().expect("gating params");
            let d_omega: Vec<f64> = (0..layer3.rows())
                .map(|i| dot(&d_layer4, layer3.row(i)))
                .collect();
            let mean: f64 = omega.iter().zip(&d_omega).map(|(w, d)| w * d).sum();
            let gw = grads.gate_global_w.as_mut().expect("gating grads");
            for i in 0..layer3.rows() {
                let ds = omega[i] * (d_omega[i] - mean);
                axpy(ds, layer3.row(i), gw.data_mut());
                let row = d_layer3.row_mut(i);
                axpy(omega[i], &d_layer4, row);
                axpy(ds, w_g.data(), row);
            }
        }
        GlobalFusion::TopK(sel) => {
            for (f, locs) in sel.iter().enumerate() {
                let g = d_layer4[f] / locs.len() as f64;
                for &i in locs {
                    d_layer3.row_mut(i)[f] += g;
                }
            }
        }
    }

    // Layer-3
    let (d_layer2, _) = convolve_backward(
        &trace.layer2,
        layer3,
        &d_layer3,
        &params.conv3_w,
        None,
        &mut grads.conv3_w,
        &mut grads.conv3_b,
    );

    // Layer-2
    let layer1 = &trace.layer1;
    let layer0 = &trace.layer0;
    let d0 = layer0.cols();
    let mut d_layer1 = Tensor::zeros_like(layer1);
    let mut d_layer0 = Tensor::zeros_like(layer0);
    match &trace.local {
        LocalFusion::Gates(alphas) => {
            let gate = params.gate_local.as_ref().expect("gating params");
            let g_grad = grads.gate_local.as_mut().expect("gating grads");
            for (j, &a) in alphas.iter().enumerate() {
                let dz = d_layer2.row(j);
                axpy(a, dz, d_layer1.row_mut(2 * j));
                axpy(1.0 - a, dz, d_layer1.row_mut(2 * j + 1));
                let diff: f64 = dz
                    .iter()
                    .zip(layer1.row(2 * j).iter().zip(layer1.row(2 * j + 1)))
                    .map(|(g, (l, r))| g * (l - r))
                    .sum();
                let d_pre = diff * a * (1.0 - a);
                if d_pre == 0.0 {
                    continue;
                }
                let span = 2 * j * d0..(2 * j + 4) * d0;
                axpy(d_pre, &layer0.data()[span.clone()], g_grad.w.data_mut());
                g_grad.b.data_mut()[0] += d_pre;
                axpy(d_pre, gate.w.data(), &mut d_layer0.data_mut()[span]);
            }
        }
        LocalFusion::Argmax(arg) => {
            let maps = layer1.cols();
            for j in 0..d_layer2.rows() {
                for f in 0..maps {
                    let src = 2 * j + arg[j * maps + f] as usize;
                    d_layer1.row_mut(src)[f] += d_layer2.row(j)[f];
                }
            }
        }
    }

    // Layer-1
    let prefix = trace.attention_signal();
    let (d_from_conv, d_h) = convolve_backward(
        layer0,
        layer1,
        &d_layer1,
        &params.conv1_w,
        prefix,
        &mut grads.conv1_w,
        &mut grads.conv1_b,
    );
    d_layer0.add_scaled(&d_from_conv, 1.0);

    // Layer-0: tag bits are constants, PAD rows are fixed zeros
    let d = cfg.src_emb_dim;
    for (i, &id) in source_ids.iter().enumerate() {
        if id == PAD_ID {
            continue;
        }
        axpy(
            1.0,
            &d_layer0.row(i)[..d],
            grads.src_embeddings.row_mut(id as usize),
        );
    }

    // attention DNN
    if prefix.is_some() {
        let mut dy = d_h;
        for (l, layer) in params.attn.iter().enumerate().rev() {
            let x = &trace.attn_acts[l];
            let y = &trace.attn_acts[l + 1];
            dy = layer.backward(x, y, &dy, &mut grads.attn[l]);
        }
        let dt = d_tgt_embeddings.cols();
        for (j, &id) in history.iter().enumerate() {
            axpy(
                1.0,
                &dy[j * dt..(j + 1) * dt],
                d_tgt_embeddings.row_mut(id as usize),
            );
        }
    }
}
