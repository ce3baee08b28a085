//! A complete classifier: temporal attention, fusion, projection head and
//! classifier, with batch-level forward and backward passes.
//!
//! Pipeline for one batch (post-stage projection):
//!
//! ```text
//! frames --attention--> K summaries --fusion--> V --affine+ReLU--> [BN] --dropout--> head --> logits
//! ```
//!
//! With the pre stage the affine+ReLU map is applied to every frame before the
//! attention instead. Batch normalisation is only available after fusion.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::attention::{
    attend_backward, attend_frames, fuse_backward, fuse_summaries, AttentionTrace, CltaCache,
    CltaParams, FrameSequence, FusionMode, FusionSpec,
};
use crate::baselines::{
    average_pool, self_attention, self_attention_backward, sldg_attention, sldg_backward,
    tsf_attention, tsf_backward, SelfAttentionParams, SldgParams, TsfParams,
};
use crate::classifiers::{predict, ClassifierKind, Head};
use crate::error::{CltaError, Result};
use crate::numerics::{cross_entropy_with_grad, dot, GradientBundle, Matrix, ParamSet};
use crate::trainer::dropout_mask;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Clta,
    Average,
    SelfAttention,
    Tsf,
    Sldg,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 5] = [
        AttentionKind::Clta,
        AttentionKind::Average,
        AttentionKind::SelfAttention,
        AttentionKind::Tsf,
        AttentionKind::Sldg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Clta => "clta",
            AttentionKind::Average => "avg",
            AttentionKind::SelfAttention => "selfattn",
            AttentionKind::Tsf => "tsf",
            AttentionKind::Sldg => "sldg",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            AttentionKind::Clta => 0,
            AttentionKind::Average => 1,
            AttentionKind::SelfAttention => 2,
            AttentionKind::Tsf => 3,
            AttentionKind::Sldg => 4,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionStage {
    Pre,
    Post,
}

impl ProjectionStage {
    pub fn name(self) -> &'static str {
        match self {
            ProjectionStage::Pre => "pre",
            ProjectionStage::Post => "post",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub attention: AttentionKind,
    /// Number of Gaussians / attention rows.
    pub k: usize,
    pub beta: f64,
    /// Maximum sequence length, frozen from the training split.
    pub z: usize,
    /// Frame feature dimension.
    pub dim: usize,
    pub num_classes: usize,
    pub fusion: FusionMode,
    pub classifier: ClassifierKind,
    /// Width of the projection; 0 disables it.
    pub hidden: usize,
    pub projection_stage: ProjectionStage,
    pub batch_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            attention: AttentionKind::Clta,
            k: 6,
            beta: 1e3,
            z: 40,
            dim: 16,
            num_classes: 20,
            fusion: FusionMode::Average,
            classifier: ClassifierKind::Softmax,
            hidden: 64,
            projection_stage: ProjectionStage::Post,
            batch_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CltaError::config("K must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(CltaError::config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.z == 0 || self.dim == 0 || self.num_classes == 0 {
            return Err(CltaError::config("Z, feature dimension and class count must be positive"));
        }
        if self.batch_norm && (self.hidden == 0 || self.projection_stage == ProjectionStage::Pre) {
            return Err(CltaError::config("batch normalisation requires a post-stage projection"));
        }
        Ok(())
    }

    /// Fusion actually applied: SLDG always learns soft weights, averaging has none.
    pub fn effective_fusion(&self) -> Option<FusionMode> {
        match self.attention {
            AttentionKind::Average => None,
            AttentionKind::Sldg => Some(FusionMode::SoftWeight),
            _ => Some(self.fusion),
        }
    }

    fn pre_projection(&self) -> bool {
        self.hidden > 0 && self.projection_stage == ProjectionStage::Pre
    }

    fn post_projection(&self) -> bool {
        self.hidden > 0 && self.projection_stage == ProjectionStage::Post
    }

    /// Dimension the attention operates on.
    pub fn attention_dim(&self) -> usize {
        if self.pre_projection() {
            self.hidden
        } else {
            self.dim
        }
    }

    /// Dimension of the classifier input.
    pub fn embedding_dim(&self) -> usize {
        if self.hidden > 0 {
            self.hidden
        } else {
            self.dim
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionParams {
    Clta { w_mean: Matrix, w_std: Matrix },
    Average,
    SelfAttention(SelfAttentionParams),
    Tsf(TsfParams),
    Sldg(SldgParams),
}

/// Affine map followed by a rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `h x d_in`
    pub w: Matrix,
    /// `1 x h`
    pub b: Matrix,
}

impl Projection {
    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter_rows()
            .zip(self.b.as_slice())
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
}

/// Per-feature batch statistics from a training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub attention: AttentionParams,
    /// `1 x K`, present only with soft-weight fusion.
    pub fusion_logits: Option<Matrix>,
    pub projection: Option<Projection>,
    pub batch_norm: Option<BatchNorm>,
    pub head: Head,
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("positive shape")
}

enum AttnCache {
    Clta(CltaCache),
    None,
}

struct VideoPass {
    descriptor: Vec<f64>,
    trace: AttentionTrace,
    /// Frames seen by the attention (projected in the pre stage).
    attn_frames: Option<Matrix>,
    /// Pre-activations of the per-frame projection.
    pre_act: Option<Matrix>,
    cache: AttnCache,
}

/// Output of [`Model::batch_loss_grad`].
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub grads: GradientBundle,
    pub correct: usize,
    pub stats: Option<BatchStats>,
}

impl Model {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let k = config.k;
        let da = config.attention_dim();
        let attention = match config.attention {
            AttentionKind::Clta => AttentionParams::Clta {
                w_mean: gaussian_matrix(rng, k, da, 1.0 / (config.beta * (da as f64).sqrt())),
                w_std: gaussian_matrix(rng, k, da, 0.1 / (da as f64).sqrt()),
            },
            AttentionKind::Average => AttentionParams::Average,
            AttentionKind::SelfAttention => AttentionParams::SelfAttention(SelfAttentionParams {
                w: gaussian_matrix(rng, k, da, 0.1 / (da as f64).sqrt()),
            }),
            AttentionKind::Tsf => AttentionParams::Tsf(TsfParams::init(k)?),
            AttentionKind::Sldg => AttentionParams::Sldg(SldgParams::init(k)?),
        };
        let fusion_logits = (config.effective_fusion() == Some(FusionMode::SoftWeight)).then(|| Matrix::zeros(1, k));
        let projection = (config.hidden > 0).then(|| Projection {
            w: gaussian_matrix(rng, config.hidden, config.dim, (2.0 / config.dim as f64).sqrt()),
            b: Matrix::zeros(1, config.hidden),
        });
        let batch_norm = config.batch_norm.then(|| BatchNorm {
            gamma: Matrix::filled(1, config.hidden, 1.0),
            beta: Matrix::zeros(1, config.hidden),
            running_mean: Matrix::zeros(1, config.hidden),
            running_var: Matrix::filled(1, config.hidden, 1.0),
        });
        let head = Head::new(config.classifier, config.embedding_dim(), config.num_classes, rng)?;
        Ok(Model {
            config,
            attention,
            fusion_logits,
            projection,
            batch_norm,
            head,
        })
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = Vec::new();
        match &self.attention {
            AttentionParams::Clta { w_mean, w_std } => {
                out.push(("attn.w_mean", w_mean));
                out.push(("attn.w_std", w_std));
            }
            AttentionParams::Average => {}
            AttentionParams::SelfAttention(p) => out.push(("attn.w", &p.w)),
            AttentionParams::Tsf(p) => {
                out.push(("attn.centers", &p.centers));
                out.push(("attn.widths", &p.widths));
            }
            AttentionParams::Sldg(p) => out.push(("attn.scales", &p.scales)),
        }
        if let Some(f) = &self.fusion_logits {
            out.push(("fusion.logits", f));
        }
        if let Some(p) = &self.projection {
            out.push(("proj.w", &p.w));
            out.push(("proj.b", &p.b));
        }
        if let Some(bn) = &self.batch_norm {
            out.push(("bn.gamma", &bn.gamma));
            out.push(("bn.beta", &bn.beta));
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = Vec::new();
        match &mut self.attention {
            AttentionParams::Clta { w_mean, w_std } => {
                out.push(("attn.w_mean", w_mean));
                out.push(("attn.w_std", w_std));
            }
            AttentionParams::Average => {}
            AttentionParams::SelfAttention(p) => out.push(("attn.w", &mut p.w)),
            AttentionParams::Tsf(p) => {
                out.push(("attn.centers", &mut p.centers));
                out.push(("attn.widths", &mut p.widths));
            }
            AttentionParams::Sldg(p) => out.push(("attn.scales", &mut p.scales)),
        }
        if let Some(f) = &mut self.fusion_logits {
            out.push(("fusion.logits", f));
        }
        if let Some(p) = &mut self.projection {
            out.push(("proj.w", &mut p.w));
            out.push(("proj.b", &mut p.b));
        }
        if let Some(bn) = &mut self.batch_norm {
            out.push(("bn.gamma", &mut bn.gamma));
            out.push(("bn.beta", &mut bn.beta));
        }
        out.extend(self.head.params_mut());
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(&'static str, &Matrix)> {
        match &self.batch_norm {
            Some(bn) => vec![("bn.running_mean", &bn.running_mean), ("bn.running_var", &bn.running_var)],
            None => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        match &mut self.batch_norm {
            Some(bn) => vec![
                ("bn.running_mean", &mut bn.running_mean),
                ("bn.running_var", &mut bn.running_var),
            ],
            None => Vec::new(),
        }
    }

    pub fn param_set(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, m) in self.params() {
            ps.insert(name, m.clone());
        }
        ps
    }

    /// Overwrites every trainable parameter from `ps`; keys and shapes must match exactly.
    pub fn load_params(&mut self, ps: &ParamSet) -> Result<()> {
        let mut used = 0;
        for (name, slot) in self.params_mut() {
            let src = ps
                .get(name)
                .ok_or_else(|| CltaError::shape(format!("missing parameter `{name}`")))?;
            if !src.same_shape(slot) {
                return Err(CltaError::shape(format!(
                    "parameter `{name}` is {:?}, expected {:?}",
                    src.shape(),
                    slot.shape()
                )));
            }
            *slot = src.clone();
            used += 1;
        }
        if used != ps.len() {
            return Err(CltaError::shape("parameter set has entries the model does not use"));
        }
        Ok(())
    }

    fn clta_params(&self) -> Option<CltaParams> {
        match &self.attention {
            AttentionParams::Clta { w_mean, w_std } => Some(CltaParams {
                w_mean: w_mean.clone(),
                w_std: w_std.clone(),
                beta: self.config.beta,
                z: self.config.z,
            }),
            _ => None,
        }
    }

    fn fusion_spec(&self) -> Option<FusionSpec> {
        match self.config.effective_fusion()? {
            FusionMode::Average => Some(FusionSpec::average(self.config.k)),
            FusionMode::SoftWeight => Some(FusionSpec::soft(
                self.fusion_logits.as_ref().expect("soft fusion has logits").as_slice().to_vec(),
            )),
        }
    }

    fn check_sequence(&self, seq: &FrameSequence) -> Result<()> {
        if seq.is_empty() {
            return Err(CltaError::shape(format!("video `{}` has no frames", seq.video_id)));
        }
        if seq.dim() != self.config.dim {
            return Err(CltaError::shape(format!(
                "video `{}` has feature dimension {}, model expects {}",
                seq.video_id,
                seq.dim(),
                self.config.dim
            )));
        }
        if seq.len() > self.config.z {
            return Err(CltaError::config(format!(
                "video `{}` has {} frames, more than Z = {}",
                seq.video_id,
                seq.len(),
                self.config.z
            )));
        }
        Ok(())
    }

    fn encode(&self, seq: &FrameSequence) -> Result<VideoPass> {
        self.check_sequence(seq)?;
        let (attn_frames, pre_act) = if self.config.pre_projection() {
            let proj = self.projection.as_ref().expect("projection configured");
            let t = seq.len();
            let h = self.config.hidden;
            let mut pre = Matrix::zeros(t, h);
            let mut post = Matrix::zeros(t, h);
            for (i, f) in seq.features.iter_rows().enumerate() {
                let a = proj.pre_activation(f);
                for (j, v) in a.into_iter().enumerate() {
                    pre.set(i, j, v);
                    post.set(i, j, v.max(0.0));
                }
            }
            (Some(post), Some(pre))
        } else {
            (None, None)
        };
        let frames = attn_frames.as_ref().unwrap_or(&seq.features);
        let t = frames.rows();
        let z = self.config.z;

        let (trace, cache) = match &self.attention {
            AttentionParams::Clta { .. } => {
                let (tr, c) = attend_frames(frames, &self.clta_params().expect("clta"))?;
                (tr, AttnCache::Clta(c))
            }
            AttentionParams::Average => {
                let view = FrameSequence {
                    features: frames.clone(),
                    label: None,
                    video_id: String::new(),
                };
                let v = average_pool(&view)?;
                let trace = AttentionTrace {
                    mu: Vec::new(),
                    sigma: Vec::new(),
                    raw: Matrix::filled(1, t, 1.0),
                    norm: Matrix::filled(1, t, 1.0 / t as f64),
                    summaries: Matrix::row_vector(v)?,
                };
                (trace, AttnCache::None)
            }
            other => {
                let view = FrameSequence {
                    features: frames.clone(),
                    label: None,
                    video_id: String::new(),
                };
                let tr = match other {
                    AttentionParams::SelfAttention(p) => self_attention(&view, p)?,
                    AttentionParams::Tsf(p) => tsf_attention(&view, p, z)?,
                    AttentionParams::Sldg(p) => sldg_attention(&view, p, z)?,
                    _ => unreachable!(),
                };
                (tr, AttnCache::None)
            }
        };
        let descriptor = match self.fusion_spec() {
            Some(spec) => fuse_summaries(&trace.summaries, &spec)?,
            None => trace.summaries.row(0).to_vec(),
        };
        Ok(VideoPass {
            descriptor,
            trace,
            attn_frames,
            pre_act,
            cache,
        })
    }

    /// Gradients of the attention, fusion and pre-stage projection for one video.
    fn encode_backward(&self, seq: &FrameSequence, pass: &VideoPass, d_desc: &[f64]) -> Result<GradientBundle> {
        let mut grads = GradientBundle::zeros_like(self.params());
        let frames = pass.attn_frames.as_ref().unwrap_or(&seq.features);
        let want_frames = self.config.pre_projection();

        let d_summaries = match self.fusion_spec() {
            Some(spec) => {
                let (ds, dl) = fuse_backward(&pass.trace.summaries, &spec, d_desc)?;
                if let Some(dl) = dl {
                    grads.slot("fusion.logits").as_mut_slice().copy_from_slice(&dl);
                }
                ds
            }
            None => Matrix::row_vector(d_desc.to_vec())?,
        };

        let d_frames = match (&self.attention, &pass.cache) {
            (AttentionParams::Clta { .. }, AttnCache::Clta(cache)) => {
                let params = self.clta_params().expect("clta");
                let g = attend_backward(frames, &params, &pass.trace, cache, &d_summaries, want_frames);
                *grads.slot("attn.w_mean") = g.w_mean;
                *grads.slot("attn.w_std") = g.w_std;
                g.frames
            }
            (AttentionParams::Average, _) => want_frames.then(|| {
                let t = frames.rows();
                let mut df = Matrix::zeros(t, frames.cols());
                for i in 0..t {
                    for (g, d) in df.row_mut(i).iter_mut().zip(d_desc) {
                        *g = d / t as f64;
                    }
                }
                df
            }),
            (AttentionParams::SelfAttention(p), _) => {
                let (dw, df) = self_attention_backward(frames, p, &pass.trace, &d_summaries, want_frames);
                *grads.slot("attn.w") = dw;
                df
            }
            (AttentionParams::Tsf(p), _) => {
                let (dc, dw, df) = tsf_backward(frames, p, self.config.z, &pass.trace, &d_summaries, want_frames);
                *grads.slot("attn.centers") = dc;
                *grads.slot("attn.widths") = dw;
                df
            }
            (AttentionParams::Sldg(p), _) => {
                let (ds, df) = sldg_backward(frames, p, &pass.trace, &d_summaries, want_frames);
                *grads.slot("attn.scales") = ds;
                df
            }
            _ => unreachable!("cache matches attention kind"),
        };

        if let (Some(df), Some(pre)) = (d_frames, pass.pre_act.as_ref()) {
            let h = self.config.hidden;
            let mut gw = Matrix::zeros(h, self.config.dim);
            let mut gb = Matrix::zeros(1, h);
            for (i, f) in seq.features.iter_rows().enumerate() {
                for j in 0..h {
                    if pre.get(i, j) <= 0.0 {
                        continue;
                    }
                    let g = df.get(i, j);
                    gb.as_mut_slice()[j] += g;
                    for (w, x) in gw.row_mut(j).iter_mut().zip(f) {
                        *w += g * x;
                    }
                }
            }
            *grads.slot("proj.w") = gw;
            *grads.slot("proj.b") = gb;
        }
        Ok(grads)
    }

    /// Attention trace for one video; useful for inspection.
    pub fn trace(&self, seq: &FrameSequence) -> Result<AttentionTrace> {
        Ok(self.encode(seq)?.trace)
    }

    /// Pooled (pre-projection) descriptor.
    pub fn descriptor(&self, seq: &FrameSequence) -> Result<Vec<f64>> {
        Ok(self.encode(seq)?.descriptor)
    }

    fn post_project(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let proj = self.projection.as_ref().expect("projection configured");
        let pre = proj.pre_activation(v);
        let post = pre.iter().map(|x| x.max(0.0)).collect();
        (pre, post)
    }

    /// Classifier input for one video in evaluation mode (no dropout, running BN statistics).
    pub fn embed(&self, seq: &FrameSequence) -> Result<Vec<f64>> {
        let pass = self.encode(seq)?;
        if !self.config.post_projection() {
            return Ok(pass.descriptor);
        }
        let (_, mut r) = self.post_project(&pass.descriptor);
        if let Some(bn) = &self.batch_norm {
            for (j, x) in r.iter_mut().enumerate() {
                let s = (bn.running_var.get(0, j) + BN_EPS).sqrt();
                *x = bn.gamma.get(0, j) * (*x - bn.running_mean.get(0, j)) / s + bn.beta.get(0, j);
            }
        }
        Ok(r)
    }

    /// Logits for one video in evaluation mode, with the attention trace.
    pub fn forward(&self, seq: &FrameSequence) -> Result<(Vec<f64>, AttentionTrace)> {
        let x = self.embed(seq)?;
        let trace = self.trace(seq)?;
        Ok((self.logits_or_uniform(&x)?, trace))
    }

    pub fn predict(&self, seq: &FrameSequence) -> Result<usize> {
        Ok(predict(&self.forward(seq)?.0))
    }

    /// Cosine heads cannot score an all-zero input (e.g. everything dropped);
    /// such inputs get uniform logits.
    fn logits_or_uniform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.head.kind() == ClassifierKind::Cosine && x.iter().all(|&v| v == 0.0) {
            return Ok(vec![0.0; self.head.num_classes()]);
        }
        self.head.logits(x)
    }

    /// Mean cross-entropy over the batch and its gradient for every parameter.
    ///
    /// With `train = Some((rng, rate))` the pass runs in training mode: dropout
    /// masks with the given rate are drawn from `rng` in batch order and
    /// batch-norm uses batch statistics.
    pub fn batch_loss_grad<R: Rng>(
        &self,
        batch: &[&FrameSequence],
        labels: &[usize],
        train: Option<(&mut R, f64)>,
    ) -> Result<BatchResult> {
        if batch.is_empty() || batch.len() != labels.len() {
            return Err(CltaError::config("batch needs matching, non-empty videos and labels"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.config.num_classes) {
            return Err(CltaError::Index {
                index: bad,
                len: self.config.num_classes,
            });
        }
        if let Some((_, rate)) = &train {
            if !(0.0..1.0).contains(rate) {
                return Err(CltaError::config(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        let training = train.is_some();
        let n = batch.len();
        let passes: Vec<VideoPass> = batch
            .par_iter()
            .map(|seq| self.encode(seq))
            .collect::<Result<_>>()?;

        // Post-fusion stage.
        let post = self.config.post_projection();
        let mut pre_act = Vec::with_capacity(n);
        let mut rect = Vec::with_capacity(n);
        for p in &passes {
            if post {
                let (a, r) = self.post_project(&p.descriptor);
                pre_act.push(a);
                rect.push(r);
            } else {
                rect.push(p.descriptor.clone());
            }
        }
        let width = rect[0].len();

        let mut stats = None;
        let mut normalized = Vec::new();
        let mut inv_std = Vec::new();
        let mut x = rect.clone();
        if let Some(bn) = &self.batch_norm {
            let (mean, var) = if training {
                let mut mean = vec![0.0; width];
                for r in &rect {
                    for (m, v) in mean.iter_mut().zip(r) {
                        *m += v / n as f64;
                    }
                }
                let mut var = vec![0.0; width];
                for r in &rect {
                    for j in 0..width {
                        var[j] += (r[j] - mean[j]).powi(2) / n as f64;
                    }
                }
                stats = Some(BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: n,
                });
                (mean, var)
            } else {
                (bn.running_mean.as_slice().to_vec(), bn.running_var.as_slice().to_vec())
            };
            inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            for (r, xi) in rect.iter().zip(x.iter_mut()) {
                let xhat: Vec<f64> = (0..width).map(|j| (r[j] - mean[j]) * inv_std[j]).collect();
                for j in 0..width {
                    xi[j] = bn.gamma.get(0, j) * xhat[j] + bn.beta.get(0, j);
                }
                normalized.push(xhat);
            }
        }

        let masks: Option<Vec<Vec<f64>>> = match train {
            Some((rng, rate)) if rate > 0.0 => Some((0..n).map(|_| dropout_mask(width, rate, rng)).collect()),
            _ => None,
        };
        if let Some(masks) = &masks {
            for (xi, m) in x.iter_mut().zip(masks) {
                xi.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
        }

        let mut grads = GradientBundle::zeros_like(self.params());
        let mut correct = 0;
        let mut d_x = Vec::with_capacity(n);
        let scale = 1.0 / n as f64;
        for (xi, &y) in x.iter().zip(labels) {
            let logits = self.logits_or_uniform(xi)?;
            if predict(&logits) == y {
                correct += 1;
            }
            let (loss, mut dl) = cross_entropy_with_grad(&logits, y)?;
            grads.loss += loss * scale;
            dl.iter_mut().for_each(|g| *g *= scale);
            if self.head.kind() == ClassifierKind::Cosine && xi.iter().all(|&v| v == 0.0) {
                d_x.push(vec![0.0; width]);
            } else {
                d_x.push(self.head.backward(xi, &dl, &mut grads)?);
            }
        }

        if let Some(masks) = &masks {
            for (g, m) in d_x.iter_mut().zip(masks) {
                g.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
        }

        let mut d_rect = d_x;
        if let Some(bn) = &self.batch_norm {
            let mut d_gamma = vec![0.0; width];
            let mut d_beta = vec![0.0; width];
            for (g, xhat) in d_rect.iter().zip(&normalized) {
                for j in 0..width {
                    d_gamma[j] += g[j] * xhat[j];
                    d_beta[j] += g[j];
                }
            }
            grads.slot("bn.gamma").as_mut_slice().copy_from_slice(&d_gamma);
            grads.slot("bn.beta").as_mut_slice().copy_from_slice(&d_beta);
            if training {
                let mut sum_dxhat = vec![0.0; width];
                let mut sum_dxhat_xhat = vec![0.0; width];
                for (g, xhat) in d_rect.iter().zip(&normalized) {
                    for j in 0..width {
                        let dxh = g[j] * bn.gamma.get(0, j);
                        sum_dxhat[j] += dxh;
                        sum_dxhat_xhat[j] += dxh * xhat[j];
                    }
                }
                for (g, xhat) in d_rect.iter_mut().zip(&normalized) {
                    for j in 0..width {
                        let dxh = g[j] * bn.gamma.get(0, j);
                        g[j] = inv_std[j] / n as f64
                            * (n as f64 * dxh - sum_dxhat[j] - xhat[j] * sum_dxhat_xhat[j]);
                    }
                }
            } else {
                for g in d_rect.iter_mut() {
                    for j in 0..width {
                        g[j] *= bn.gamma.get(0, j) * inv_std[j];
                    }
                }
            }
        }

        let d_desc: Vec<Vec<f64>> = if post {
            let proj = self.projection.as_ref().expect("projection configured");
            let mut d_desc = Vec::with_capacity(n);
            let gw_rows = proj.w.rows();
            let mut gw = Matrix::zeros(gw_rows, proj.w.cols());
            let mut gb = Matrix::zeros(1, gw_rows);
            for ((g, a), p) in d_rect.iter().zip(&pre_act).zip(&passes) {
                let dh: Vec<f64> = g.iter().zip(a).map(|(g, a)| if *a > 0.0 { *g } else { 0.0 }).collect();
                for (j, &dhj) in dh.iter().enumerate() {
                    if dhj == 0.0 {
                        continue;
                    }
                    gb.as_mut_slice()[j] += dhj;
                    for (w, v) in gw.row_mut(j).iter_mut().zip(&p.descriptor) {
                        *w += dhj * v;
                    }
                }
                let mut dv = vec![0.0; proj.w.cols()];
                for (row, &dhj) in proj.w.iter_rows().zip(&dh) {
                    for (o, w) in dv.iter_mut().zip(row) {
                        *o += dhj * w;
                    }
                }
                d_desc.push(dv);
            }
            *grads.slot("proj.w") = gw;
            *grads.slot("proj.b") = gb;
            d_desc
        } else {
            d_rect
        };

        let per_video: Vec<GradientBundle> = batch
            .par_iter()
            .zip(passes.par_iter())
            .zip(d_desc.par_iter())
            .map(|((seq, pass), d)| self.encode_backward(seq, pass, d))
            .collect::<Result<_>>()?;
        for g in &per_video {
            grads.accumulate(g)?;
        }
        Ok(BatchResult { grads, correct, stats })
    }

    /// Folds training batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        if let Some(bn) = &mut self.batch_norm {
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            for j in 0..stats.mean.len() {
                let m = bn.running_mean.get(0, j);
                let v = bn.running_var.get(0, j);
                bn.running_mean
                    .set(0, j, (1.0 - BN_MOMENTUM) * m + BN_MOMENTUM * stats.mean[j]);
                bn.running_var
                    .set(0, j, (1.0 - BN_MOMENTUM) * v + BN_MOMENTUM * stats.var[j] * unbias);
            }
        }
    }

    /// FNV-1a over the bit patterns of every parameter; changes if any bit changes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, m) in self.params().into_iter().chain(self.buffers()) {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
            }
            for v in m.as_slice() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::SoftmaxHead;
    use crate::numerics::{finite_diff_check, softmax_stable};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, z: usize) -> Vec<FrameSequence> {
        (0..n)
            .map(|i| {
                let t = rng.random_range(1..=z);
                let data = (0..t * d).map(|_| rng.random_range(-1.5..1.5)).collect();
                FrameSequence::new(Matrix::from_vec(t, d, data).unwrap(), Some(i % 3), format!("v{i}")).unwrap()
            })
            .collect()
    }

    fn small_config(attention: AttentionKind) -> ModelConfig {
        ModelConfig {
            attention,
            k: 2,
            beta: 5.0,
            z: 6,
            dim: 3,
            num_classes: 3,
            hidden: 4,
            ..ModelConfig::default()
        }
    }

    fn perturb(model: &mut Model, rng: &mut ChaCha8Rng, amount: f64) {
        for (_, p) in model.params_mut() {
            for v in p.as_mut_slice() {
                *v += rng.random_range(-amount..amount);
            }
        }
    }

    fn check_gradients(model: &Model, batch: &[FrameSequence], tol: f64) {
        let refs: Vec<&FrameSequence> = batch.iter().collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label.unwrap()).collect();
        let res = model
            .batch_loss_grad::<ChaCha8Rng>(&refs, &labels, None)
            .unwrap();
        res.grads.check_against(model.params()).unwrap();
        let loss = |ps: &ParamSet| -> Result<f64> {
            let mut m = model.clone();
            m.load_params(ps)?;
            Ok(m.batch_loss_grad::<ChaCha8Rng>(&refs, &labels, None)?.grads.loss)
        };
        // Entrywise comparison with an absolute floor: dead ReLU units have exactly
        // zero gradient, where the numeric estimate is pure round-off.
        let ps = model.param_set();
        let eps = 1e-5;
        for (name, p) in ps.iter() {
            let g = res.grads.get(name).unwrap();
            for i in 0..p.as_slice().len() {
                let mut probe = ps.clone();
                let mut m = p.clone();
                m.as_mut_slice()[i] = p.as_slice()[i] + eps;
                probe.insert(name.clone(), m.clone());
                let up = loss(&probe).unwrap();
                m.as_mut_slice()[i] = p.as_slice()[i] - eps;
                probe.insert(name.clone(), m);
                let down = loss(&probe).unwrap();
                let numeric = (up - down) / (2.0 * eps);
                let analytic = g.as_slice()[i];
                assert!(
                    (analytic - numeric).abs() <= tol * analytic.abs().max(numeric.abs()) + 1e-9,
                    "{:?}: {name}[{i}] analytic {analytic} numeric {numeric}",
                    model.config
                );
            }
        }
    }

    #[test]
    fn gradients_match_for_every_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for attention in AttentionKind::ALL {
            for (fusion, classifier, stage, hidden) in [
                (FusionMode::Average, ClassifierKind::Softmax, ProjectionStage::Post, 4),
                (FusionMode::SoftWeight, ClassifierKind::Cosine, ProjectionStage::Post, 4),
                (FusionMode::SoftWeight, ClassifierKind::Softmax, ProjectionStage::Pre, 4),
                (FusionMode::Average, ClassifierKind::Softmax, ProjectionStage::Post, 0),
            ] {
                let cfg = ModelConfig {
                    fusion,
                    classifier,
                    projection_stage: stage,
                    hidden,
                    ..small_config(attention)
                };
                let mut model = Model::new(cfg, &mut rng).unwrap();
                perturb(&mut model, &mut rng, 0.3);
                let batch = random_batch(&mut rng, 3, 3, 6);
                check_gradients(&model, &batch, 1e-5);
            }
        }
    }

    #[test]
    fn batch_norm_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let cfg = ModelConfig {
            batch_norm: true,
            ..small_config(AttentionKind::Clta)
        };
        let mut model = Model::new(cfg, &mut rng).unwrap();
        perturb(&mut model, &mut rng, 0.3);
        let batch = random_batch(&mut rng, 4, 3, 6);
        let refs: Vec<&FrameSequence> = batch.iter().collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label.unwrap()).collect();
        // Training mode with dropout 0 is deterministic, so it can be checked.
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let res = model.batch_loss_grad(&refs, &labels, Some((&mut r, 0.0))).unwrap();
        assert!(res.stats.is_some());
        let loss = |ps: &ParamSet| -> Result<f64> {
            let mut m = model.clone();
            m.load_params(ps)?;
            let mut r = ChaCha8Rng::seed_from_u64(0);
            Ok(m.batch_loss_grad(&refs, &labels, Some((&mut r, 0.0)))?.grads.loss)
        };
        let report = finite_diff_check(loss, &model.param_set(), &res.grads, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
        check_gradients(&model, &batch, 1e-5);
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let cfg = ModelConfig {
            num_classes: 5,
            ..small_config(AttentionKind::Clta)
        };
        let model = Model::new(cfg, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 1, 3, 6);
        let (logits, _) = model.forward(&batch[0]).unwrap();
        assert_eq!(logits, vec![0.0; 5]);
        let res = model
            .batch_loss_grad::<ChaCha8Rng>(&[&batch[0]], &[2], None)
            .unwrap();
        assert_abs_diff_eq!(res.grads.loss, 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_frame_without_projection_is_head_of_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let cfg = ModelConfig {
            hidden: 0,
            ..small_config(AttentionKind::Clta)
        };
        let mut model = Model::new(cfg, &mut rng).unwrap();
        perturb(&mut model, &mut rng, 1.0);
        let f = vec![0.4, -1.0, 2.0];
        let seq = FrameSequence::from_rows(&[f.clone()]).unwrap();
        let (logits, _) = model.forward(&seq).unwrap();
        let direct = model.head.logits(&f).unwrap();
        for (a, b) in logits.iter().zip(&direct) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        // T=3, d=2, K=1, no projection, softmax head.
        let frames = [[0.5, -1.0], [1.5, 0.25], [-0.75, 2.0]];
        let (wm, ws) = ([0.8, -0.3], [0.2, 0.6]);
        let (beta, z) = (2.0, 4usize);
        let hw = [[1.0, -0.5, 0.25], [0.5, 0.75, -1.0]];
        let hb = [0.1, -0.2, 0.3];

        let scores: Vec<f64> = frames.iter().map(|f| beta * (f[0] * wm[0] + f[1] * wm[1])).collect();
        let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let tot: f64 = ex.iter().sum();
        let mu = ex.iter().enumerate().map(|(i, e)| e / tot * (i + 1) as f64).sum::<f64>() / z as f64;
        let sigma = frames
            .iter()
            .map(|f| 1.0 / (1.0 + (-(f[0] * ws[0] + f[1] * ws[1])).exp()))
            .sum::<f64>()
            / z as f64;
        let a: Vec<f64> = (1..=3)
            .map(|t| (-0.5 * ((t as f64 / z as f64 - mu) / sigma).powi(2)).exp())
            .collect();
        let ea: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        let ta: f64 = ea.iter().sum();
        let v = [
            (0..3).map(|t| ea[t] / ta * frames[t][0]).sum::<f64>(),
            (0..3).map(|t| ea[t] / ta * frames[t][1]).sum::<f64>(),
        ];
        let logits: Vec<f64> = (0..3).map(|c| hw[0][c] * v[0] + hw[1][c] * v[1] + hb[c]).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig {
            k: 1,
            beta,
            z,
            dim: 2,
            num_classes: 3,
            hidden: 0,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg, &mut rng).unwrap();
        model.attention = AttentionParams::Clta {
            w_mean: Matrix::from_rows(&[wm.to_vec()]).unwrap(),
            w_std: Matrix::from_rows(&[ws.to_vec()]).unwrap(),
        };
        model.head = Head::Softmax(SoftmaxHead {
            w: Matrix::from_rows(&[hw[0].to_vec(), hw[1].to_vec()]).unwrap(),
            bias: Matrix::row_vector(hb.to_vec()).unwrap(),
        });
        let seq = FrameSequence::from_rows(&frames.iter().map(|f| f.to_vec()).collect::<Vec<_>>()).unwrap();
        let (out, trace) = model.forward(&seq).unwrap();
        assert_abs_diff_eq!(trace.mu[0], mu, epsilon = 1e-12);
        assert_abs_diff_eq!(trace.sigma[0], sigma, epsilon = 1e-12);
        for (x, y) in out.iter().zip(&logits) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let p = softmax_stable(&out).unwrap();
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let model = Model::new(small_config(AttentionKind::Clta), &mut rng).unwrap();
        let long = FrameSequence::new(Matrix::zeros(7, 3), Some(0), "long").unwrap();
        assert!(matches!(model.forward(&long), Err(CltaError::Config(_))));
        let wide = FrameSequence::new(Matrix::zeros(2, 4), Some(0), "wide").unwrap();
        assert!(matches!(model.forward(&wide), Err(CltaError::Shape(_))));
        let ok = FrameSequence::new(Matrix::zeros(2, 3), Some(0), "ok").unwrap();
        assert!(model.batch_loss_grad::<ChaCha8Rng>(&[&ok], &[3], None).is_err());

        let bad = ModelConfig {
            batch_norm: true,
            projection_stage: ProjectionStage::Pre,
            ..small_config(AttentionKind::Clta)
        };
        assert!(Model::new(bad, &mut rng).is_err());
        let mut r = ChaCha8Rng::seed_from_u64(1);
        assert!(model.batch_loss_grad(&[&ok], &[0], Some((&mut r, 1.0))).is_err());
    }

    #[test]
    fn load_params_is_strict() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut model = Model::new(small_config(AttentionKind::Tsf), &mut rng).unwrap();
        let mut ps = model.param_set();
        model.load_params(&ps).unwrap();
        ps.insert("extra", Matrix::zeros(1, 1));
        assert!(model.load_params(&ps).is_err());
        let mut ps = model.param_set();
        ps.insert("attn.centers", Matrix::zeros(1, 5));
        assert!(model.load_params(&ps).is_err());
    }
}
