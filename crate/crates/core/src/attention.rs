//! Contents-and-length temporal attention.
//!
//! Each of the `K` Gaussians gets its centre from a soft-argmax over the
//! frame scores `f_t · w_mean[k]` and its width from the summed sigmoids of
//! `f_t · w_std[k]`; both are divided by the dataset-wide maximum length `Z`.
//! Frame positions inside the formulas are 1-based (`t = 1..=T`).
//!
//! The Gaussian values are passed through a softmax over time and used to
//! pool the frames into `K` summaries, which [`fuse`] combines into a single
//! descriptor.

use crate::error::{CltaError, Result};
use crate::numerics::{dot, sigmoid, softmax_backward, softmax_stable, Matrix};

/// Exponents below this are clamped before `exp` so weights stay positive.
pub const LOG_WEIGHT_FLOOR: f64 = -700.0;

/// One video: `T x d` frame features plus an optional class id.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub features: Matrix,
    pub label: Option<usize>,
    pub video_id: String,
}

impl FrameSequence {
    pub fn new(features: Matrix, label: Option<usize>, video_id: impl Into<String>) -> Result<Self> {
        if !features.is_finite() {
            return Err(CltaError::Numeric {
                param: "frame features".into(),
            });
        }
        Ok(FrameSequence {
            features,
            label,
            video_id: video_id.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        FrameSequence::new(Matrix::from_rows(rows)?, None, "")
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// The two learning matrices plus the soft-argmax scale and length normaliser.
#[derive(Debug, Clone, PartialEq)]
pub struct CltaParams {
    pub w_mean: Matrix,
    pub w_std: Matrix,
    pub beta: f64,
    pub z: usize,
}

impl CltaParams {
    pub fn new(w_mean: Matrix, w_std: Matrix, beta: f64, z: usize) -> Result<Self> {
        let p = CltaParams {
            w_mean,
            w_std,
            beta,
            z,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.w_mean.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_mean.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(CltaError::config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.z == 0 {
            return Err(CltaError::config("Z must be positive"));
        }
        if !self.w_mean.same_shape(&self.w_std) {
            return Err(CltaError::shape(format!(
                "w_mean {:?} and w_std {:?} differ",
                self.w_mean.shape(),
                self.w_std.shape()
            )));
        }
        Ok(())
    }
}

/// Everything the attention computed for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Gaussian centres, one per Gaussian. Empty for mechanisms without a template.
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `K x T` raw weights (Gaussian values, or scores for self-attention).
    pub raw: Matrix,
    /// `K x T` normalised weights; every row sums to one.
    pub norm: Matrix,
    /// `K x d` pooled summaries.
    pub summaries: Matrix,
}

impl AttentionTrace {
    pub fn k(&self) -> usize {
        self.summaries.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Average,
    SoftWeight,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Average => "average",
            FusionMode::SoftWeight => "soft",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionSpec {
    pub mode: FusionMode,
    pub soft_logits: Vec<f64>,
}

impl FusionSpec {
    pub fn average(k: usize) -> Self {
        FusionSpec {
            mode: FusionMode::Average,
            soft_logits: vec![0.0; k],
        }
    }

    pub fn soft(soft_logits: Vec<f64>) -> Self {
        FusionSpec {
            mode: FusionMode::SoftWeight,
            soft_logits,
        }
    }

    /// The convex weights applied to the `K` summaries.
    pub fn weights(&self) -> Result<Vec<f64>> {
        match self.mode {
            FusionMode::Average => {
                let k = self.soft_logits.len();
                Ok(vec![1.0 / k as f64; k])
            }
            FusionMode::SoftWeight => softmax_stable(&self.soft_logits),
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(CltaError::config(format!("soft-argmax scale must be positive, got {beta}")))
    }
}

fn scaled_softmax(scores: &[f64], beta: f64) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = scores.iter().map(|s| beta * s).collect();
    softmax_stable(&scaled)
}

/// Differentiable argmax: the expected 1-based index under `softmax(beta * scores)`.
pub fn soft_argmax(scores: &[f64], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let p = scaled_softmax(scores, beta)?;
    Ok(expected_index(&p))
}

fn expected_index(p: &[f64]) -> f64 {
    p.iter().enumerate().map(|(i, pi)| pi * (i + 1) as f64).sum()
}

fn frame_scores(frames: &Matrix, w: &[f64]) -> Result<Vec<f64>> {
    if frames.cols() != w.len() {
        return Err(CltaError::shape(format!(
            "frames have dimension {}, weight vector has {}",
            frames.cols(),
            w.len()
        )));
    }
    Ok(frames.iter_rows().map(|f| dot(f, w)).collect())
}

fn check_length(t_len: usize, z: usize) -> Result<()> {
    if t_len == 0 {
        return Err(CltaError::shape("sequence has no frames"));
    }
    if t_len > z {
        return Err(CltaError::config(format!(
            "sequence length {t_len} exceeds the normaliser Z = {z}"
        )));
    }
    Ok(())
}

/// Gaussian centre for one learning vector, in `[1/Z, T/Z]`.
pub fn learn_mean(frames: &Matrix, w_mean: &[f64], beta: f64, z: usize) -> Result<f64> {
    check_length(frames.rows(), z)?;
    Ok(soft_argmax(&frame_scores(frames, w_mean)?, beta)? / z as f64)
}

/// Gaussian width for one learning vector, in `(0, T/Z]`.
pub fn learn_std(frames: &Matrix, w_std: &[f64], z: usize) -> Result<f64> {
    check_length(frames.rows(), z)?;
    let total: f64 = frame_scores(frames, w_std)?.into_iter().map(sigmoid).sum();
    Ok(total / z as f64)
}

fn log_gaussian(t: usize, z: usize, mu: f64, sigma: f64) -> f64 {
    let u = (t as f64 / z as f64 - mu) / sigma;
    -0.5 * u * u
}

/// Unnormalised Gaussian weights `exp(-((t/Z - mu)/sigma)^2 / 2)` for `t = 1..=T`.
pub fn gaussian_weights(t_len: usize, z: usize, mu: f64, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(CltaError::Degenerate(format!(
            "Gaussian width must be positive and finite, got {sigma}"
        )));
    }
    if t_len == 0 || z == 0 {
        return Err(CltaError::shape("Gaussian weights need T >= 1 and Z >= 1"));
    }
    Ok((1..=t_len)
        .map(|t| log_gaussian(t, z, mu, sigma).max(LOG_WEIGHT_FLOOR).exp())
        .collect())
}

/// `(d a/d mu, d a/d sigma)` contracted with an upstream gradient on `a`.
pub(crate) fn gaussian_backward(
    z: usize,
    mu: f64,
    sigma: f64,
    a: &[f64],
    da: &[f64],
) -> (f64, f64) {
    let mut dmu = 0.0;
    let mut dsigma = 0.0;
    for (i, (&ai, &gi)) in a.iter().zip(da).enumerate() {
        let t = i + 1;
        if log_gaussian(t, z, mu, sigma) < LOG_WEIGHT_FLOOR {
            continue;
        }
        let u = (t as f64 / z as f64 - mu) / sigma;
        dmu += gi * ai * u / sigma;
        dsigma += gi * ai * u * u / sigma;
    }
    (dmu, dsigma)
}

/// Row-wise softmax of a `K x T` matrix.
pub(crate) fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for k in 0..m.rows() {
        out.row_mut(k).copy_from_slice(&softmax_stable(m.row(k))?);
    }
    Ok(out)
}

pub(crate) fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for k in 0..y.rows() {
        out.row_mut(k).copy_from_slice(&softmax_backward(y.row(k), dy.row(k)));
    }
    out
}

/// `summaries[k] = Σ_t weights[k,t] · frames[t]`
pub(crate) fn pool(weights: &Matrix, frames: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(weights.rows(), frames.cols());
    for k in 0..weights.rows() {
        let dst = out.row_mut(k);
        for (t, f) in frames.iter_rows().enumerate() {
            let w = weights.get(k, t);
            for (o, x) in dst.iter_mut().zip(f) {
                *o += w * x;
            }
        }
    }
    out
}

/// Backward of [`pool`]: returns the gradient on the weights and accumulates the
/// gradient on the frames into `d_frames` when given.
pub(crate) fn pool_backward(
    weights: &Matrix,
    frames: &Matrix,
    d_summaries: &Matrix,
    mut d_frames: Option<&mut Matrix>,
) -> Matrix {
    let mut d_weights = Matrix::zeros(weights.rows(), weights.cols());
    for k in 0..weights.rows() {
        let dv = d_summaries.row(k);
        for (t, f) in frames.iter_rows().enumerate() {
            d_weights.set(k, t, dot(dv, f));
            if let Some(df) = d_frames.as_deref_mut() {
                let w = weights.get(k, t);
                for (g, x) in df.row_mut(t).iter_mut().zip(dv) {
                    *g += w * x;
                }
            }
        }
    }
    d_weights
}

/// Intermediate values kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct CltaCache {
    /// Soft-argmax probabilities, `K x T`.
    argmax_probs: Matrix,
    /// `sigmoid(f_t · w_std[k])`, `K x T`.
    std_gates: Matrix,
}

/// Runs the attention on one video.
pub fn attend(seq: &FrameSequence, params: &CltaParams) -> Result<AttentionTrace> {
    attend_frames(&seq.features, params).map(|(trace, _)| trace)
}

pub(crate) fn attend_frames(frames: &Matrix, params: &CltaParams) -> Result<(AttentionTrace, CltaCache)> {
    params.validate()?;
    if frames.cols() != params.dim() {
        return Err(CltaError::shape(format!(
            "frames have dimension {}, attention expects {}",
            frames.cols(),
            params.dim()
        )));
    }
    let t_len = frames.rows();
    check_length(t_len, params.z)?;
    let k = params.k();
    let z = params.z as f64;

    let mut mu = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    let mut raw = Matrix::zeros(k, t_len);
    let mut argmax_probs = Matrix::zeros(k, t_len);
    let mut std_gates = Matrix::zeros(k, t_len);

    for j in 0..k {
        let p = scaled_softmax(&frame_scores(frames, params.w_mean.row(j))?, params.beta)?;
        let m = expected_index(&p) / z;
        argmax_probs.row_mut(j).copy_from_slice(&p);

        let gates: Vec<f64> = frame_scores(frames, params.w_std.row(j))?
            .into_iter()
            .map(sigmoid)
            .collect();
        let s = gates.iter().sum::<f64>() / z;
        std_gates.row_mut(j).copy_from_slice(&gates);

        raw.row_mut(j)
            .copy_from_slice(&gaussian_weights(t_len, params.z, m, s)?);
        mu.push(m);
        sigma.push(s);
    }
    let norm = softmax_rows(&raw)?;
    let summaries = pool(&norm, frames);
    Ok((
        AttentionTrace {
            mu,
            sigma,
            raw,
            norm,
            summaries,
        },
        CltaCache {
            argmax_probs,
            std_gates,
        },
    ))
}

pub(crate) struct CltaGrads {
    pub w_mean: Matrix,
    pub w_std: Matrix,
    pub frames: Option<Matrix>,
}

/// Backpropagates a gradient on the `K x d` summaries to both learning matrices
/// (and to the frames when `want_frames` is set).
pub(crate) fn attend_backward(
    frames: &Matrix,
    params: &CltaParams,
    trace: &AttentionTrace,
    cache: &CltaCache,
    d_summaries: &Matrix,
    want_frames: bool,
) -> CltaGrads {
    let (t_len, d) = frames.shape();
    let k = params.k();
    let z = params.z as f64;
    let mut d_frames = want_frames.then(|| Matrix::zeros(t_len, d));

    let d_norm = pool_backward(&trace.norm, frames, d_summaries, d_frames.as_mut());
    let d_raw = softmax_rows_backward(&trace.norm, &d_norm);

    let mut g_mean = Matrix::zeros(k, d);
    let mut g_std = Matrix::zeros(k, d);
    for j in 0..k {
        let (dmu, dsigma) =
            gaussian_backward(params.z, trace.mu[j], trace.sigma[j], trace.raw.row(j), d_raw.row(j));

        // mu = m / Z with m = Σ p_t t and p = softmax(beta * s):
        // d m / d s_t = beta p_t (t - m).
        let p = cache.argmax_probs.row(j);
        let m = trace.mu[j] * z;
        let dm = dmu / z;
        for (i, (&pi, f)) in p.iter().zip(frames.iter_rows()).enumerate() {
            let ds = params.beta * pi * ((i + 1) as f64 - m) * dm;
            if ds == 0.0 {
                continue;
            }
            for (g, x) in g_mean.row_mut(j).iter_mut().zip(f) {
                *g += ds * x;
            }
            if let Some(df) = d_frames.as_mut() {
                for (g, w) in df.row_mut(i).iter_mut().zip(params.w_mean.row(j)) {
                    *g += ds * w;
                }
            }
        }

        // sigma = Σ sigmoid(q_t) / Z
        let gates = cache.std_gates.row(j);
        for (i, (&gate, f)) in gates.iter().zip(frames.iter_rows()).enumerate() {
            let dq = dsigma / z * gate * (1.0 - gate);
            for (g, x) in g_std.row_mut(j).iter_mut().zip(f) {
                *g += dq * x;
            }
            if let Some(df) = d_frames.as_mut() {
                for (g, w) in df.row_mut(i).iter_mut().zip(params.w_std.row(j)) {
                    *g += dq * w;
                }
            }
        }
    }
    CltaGrads {
        w_mean: g_mean,
        w_std: g_std,
        frames: d_frames,
    }
}

/// Combines the `K` summaries into one descriptor.
pub fn fuse(trace: &AttentionTrace, spec: &FusionSpec) -> Result<Vec<f64>> {
    fuse_summaries(&trace.summaries, spec)
}

pub(crate) fn fuse_summaries(summaries: &Matrix, spec: &FusionSpec) -> Result<Vec<f64>> {
    if summaries.rows() != spec.soft_logits.len() {
        return Err(CltaError::shape(format!(
            "trace has {} summaries, fusion expects {}",
            summaries.rows(),
            spec.soft_logits.len()
        )));
    }
    let w = spec.weights()?;
    let mut out = vec![0.0; summaries.cols()];
    for (row, wk) in summaries.iter_rows().zip(&w) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += wk * x;
        }
    }
    Ok(out)
}

/// Returns the gradient on the summaries and, in soft-weight mode, on the logits.
pub(crate) fn fuse_backward(
    summaries: &Matrix,
    spec: &FusionSpec,
    d_out: &[f64],
) -> Result<(Matrix, Option<Vec<f64>>)> {
    let w = spec.weights()?;
    let mut d_summaries = Matrix::zeros(summaries.rows(), summaries.cols());
    for (k, wk) in w.iter().enumerate() {
        for (g, x) in d_summaries.row_mut(k).iter_mut().zip(d_out) {
            *g = wk * x;
        }
    }
    let d_logits = match spec.mode {
        FusionMode::Average => None,
        FusionMode::SoftWeight => {
            let dw: Vec<f64> = summaries.iter_rows().map(|v| dot(v, d_out)).collect();
            Some(softmax_backward(&w, &dw))
        }
    };
    Ok((d_summaries, d_logits))
}
