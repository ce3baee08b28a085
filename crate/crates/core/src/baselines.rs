//! Comparison temporal-attention mechanisms evaluated on the same inputs as CLTA.
//!
//! * average pooling over frames,
//! * self-attention with a single learning matrix,
//! * TSF: trainable Gaussian templates shared by all videos, rescaled by length,
//! * SLDG: length-defined Gaussians with a trainable scale each.
//!
//! TSF and SLDG weights depend only on `(T, parameters)`; this is what they are
//! meant to contrast against.

use crate::attention::{
    gaussian_backward, gaussian_weights, pool, pool_backward, softmax_rows, softmax_rows_backward,
    AttentionTrace, FrameSequence,
};
use crate::error::{CltaError, Result};
use crate::numerics::{dot, sigmoid, softmax_backward, softmax_stable, softplus, softplus_inverse, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionParams {
    /// `K x d`
    pub w: Matrix,
}

/// Centres map through `tanh` into a fraction of the length; widths through softplus.
#[derive(Debug, Clone, PartialEq)]
pub struct TsfParams {
    /// `1 x K`
    pub centers: Matrix,
    /// `1 x K`
    pub widths: Matrix,
}

impl TsfParams {
    /// Centres evenly spaced in `[-1, 1]`, widths with `softplus(w) = 1 / (2K)`.
    pub fn init(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(CltaError::config("TSF needs at least one Gaussian"));
        }
        let centers = if k == 1 {
            vec![0.0]
        } else {
            (0..k).map(|i| -1.0 + 2.0 * i as f64 / (k - 1) as f64).collect()
        };
        let width = softplus_inverse(1.0 / (2.0 * k as f64));
        Ok(TsfParams {
            centers: Matrix::row_vector(centers)?,
            widths: Matrix::row_vector(vec![width; k])?,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.cols()
    }

    /// `(mu_k, sigma_k)` for a video of length `t_len`.
    pub fn templates(&self, t_len: usize, z: usize) -> Vec<(f64, f64)> {
        let span = t_len as f64 / z as f64;
        self.centers
            .as_slice()
            .iter()
            .zip(self.widths.as_slice())
            .map(|(&c, &w)| ((c.tanh() + 1.0) / 2.0 * span, softplus(w) * span))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SldgParams {
    /// `1 x K`
    pub scales: Matrix,
}

impl SldgParams {
    pub fn init(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(CltaError::config("SLDG needs at least one Gaussian"));
        }
        Ok(SldgParams {
            scales: Matrix::row_vector(vec![1.0; k])?,
        })
    }

    pub fn k(&self) -> usize {
        self.scales.cols()
    }

    /// Evenly spaced centres `(k - 0.5) / K` of the length with half-spacing widths.
    pub fn templates(&self, t_len: usize, z: usize) -> Vec<(f64, f64)> {
        let k = self.k() as f64;
        let span = t_len as f64 / z as f64;
        (1..=self.k())
            .map(|i| ((i as f64 - 0.5) / k * span, span / (2.0 * k)))
            .collect()
    }
}

fn check_frames(seq: &FrameSequence, dim: Option<usize>, z: Option<usize>) -> Result<()> {
    if seq.is_empty() {
        return Err(CltaError::shape("sequence has no frames"));
    }
    if let Some(d) = dim {
        if seq.dim() != d {
            return Err(CltaError::shape(format!(
                "frames have dimension {}, attention expects {d}",
                seq.dim()
            )));
        }
    }
    if let Some(z) = z {
        if seq.len() > z {
            return Err(CltaError::config(format!(
                "sequence length {} exceeds the normaliser Z = {z}",
                seq.len()
            )));
        }
    }
    Ok(())
}

/// Mean over frames.
pub fn average_pool(seq: &FrameSequence) -> Result<Vec<f64>> {
    check_frames(seq, None, None)?;
    let t = seq.len() as f64;
    let mut out = vec![0.0; seq.dim()];
    for f in seq.features.iter_rows() {
        for (o, x) in out.iter_mut().zip(f) {
            *o += x / t;
        }
    }
    Ok(out)
}

/// Per-frame weights `softmax_t(f_t · w_k)`; `raw` holds the scores.
pub fn self_attention(seq: &FrameSequence, params: &SelfAttentionParams) -> Result<AttentionTrace> {
    check_frames(seq, Some(params.w.cols()), None)?;
    let frames = &seq.features;
    let k = params.w.rows();
    let mut raw = Matrix::zeros(k, frames.rows());
    for j in 0..k {
        for (t, f) in frames.iter_rows().enumerate() {
            raw.set(j, t, dot(f, params.w.row(j)));
        }
    }
    let norm = softmax_rows(&raw)?;
    let summaries = pool(&norm, frames);
    Ok(AttentionTrace {
        mu: Vec::new(),
        sigma: Vec::new(),
        raw,
        norm,
        summaries,
    })
}

/// Gradients of the self-attention pooling: `(d w, d frames)`.
pub(crate) fn self_attention_backward(
    frames: &Matrix,
    params: &SelfAttentionParams,
    trace: &AttentionTrace,
    d_summaries: &Matrix,
    want_frames: bool,
) -> (Matrix, Option<Matrix>) {
    let mut d_frames = want_frames.then(|| Matrix::zeros(frames.rows(), frames.cols()));
    let d_norm = pool_backward(&trace.norm, frames, d_summaries, d_frames.as_mut());
    let d_scores = softmax_rows_backward(&trace.norm, &d_norm);
    let mut d_w = Matrix::zeros(params.w.rows(), params.w.cols());
    for j in 0..params.w.rows() {
        for (t, f) in frames.iter_rows().enumerate() {
            let g = d_scores.get(j, t);
            for (dw, x) in d_w.row_mut(j).iter_mut().zip(f) {
                *dw += g * x;
            }
            if let Some(df) = d_frames.as_mut() {
                for (dx, w) in df.row_mut(t).iter_mut().zip(params.w.row(j)) {
                    *dx += g * w;
                }
            }
        }
    }
    (d_w, d_frames)
}

fn template_trace(frames: &Matrix, templates: &[(f64, f64)], z: usize, scales: Option<&[f64]>) -> Result<AttentionTrace> {
    let t_len = frames.rows();
    let k = templates.len();
    let mut raw = Matrix::zeros(k, t_len);
    let mut norm = Matrix::zeros(k, t_len);
    for (j, &(mu, sigma)) in templates.iter().enumerate() {
        let a = gaussian_weights(t_len, z, mu, sigma)?;
        let s = scales.map_or(1.0, |s| s[j]);
        let scaled: Vec<f64> = a.iter().map(|v| s * v).collect();
        norm.row_mut(j).copy_from_slice(&softmax_stable(&scaled)?);
        raw.row_mut(j).copy_from_slice(&a);
    }
    let summaries = pool(&norm, frames);
    Ok(AttentionTrace {
        mu: templates.iter().map(|t| t.0).collect(),
        sigma: templates.iter().map(|t| t.1).collect(),
        raw,
        norm,
        summaries,
    })
}

/// Shared trainable Gaussian templates rescaled by the video length.
pub fn tsf_attention(seq: &FrameSequence, params: &TsfParams, z: usize) -> Result<AttentionTrace> {
    check_frames(seq, None, Some(z))?;
    if params.widths.cols() != params.k() {
        return Err(CltaError::shape("TSF centres and widths differ in length"));
    }
    template_trace(&seq.features, &params.templates(seq.len(), z), z, None)
}

/// `(d centers, d widths, d frames)`
pub(crate) fn tsf_backward(
    frames: &Matrix,
    params: &TsfParams,
    z: usize,
    trace: &AttentionTrace,
    d_summaries: &Matrix,
    want_frames: bool,
) -> (Matrix, Matrix, Option<Matrix>) {
    let mut d_frames = want_frames.then(|| Matrix::zeros(frames.rows(), frames.cols()));
    let d_norm = pool_backward(&trace.norm, frames, d_summaries, d_frames.as_mut());
    let d_raw = softmax_rows_backward(&trace.norm, &d_norm);
    let span = frames.rows() as f64 / z as f64;
    let k = params.k();
    let mut d_c = Matrix::zeros(1, k);
    let mut d_w = Matrix::zeros(1, k);
    for j in 0..k {
        let (dmu, dsigma) = gaussian_backward(z, trace.mu[j], trace.sigma[j], trace.raw.row(j), d_raw.row(j));
        let th = params.centers.get(0, j).tanh();
        d_c.set(0, j, dmu * (1.0 - th * th) / 2.0 * span);
        d_w.set(0, j, dsigma * sigmoid(params.widths.get(0, j)) * span);
    }
    (d_c, d_w, d_frames)
}

/// Length-defined Gaussians whose values are multiplied by a trainable scale
/// before the softmax over time.
pub fn sldg_attention(seq: &FrameSequence, params: &SldgParams, z: usize) -> Result<AttentionTrace> {
    check_frames(seq, None, Some(z))?;
    template_trace(
        &seq.features,
        &params.templates(seq.len(), z),
        z,
        Some(params.scales.as_slice()),
    )
}

/// `(d scales, d frames)`
pub(crate) fn sldg_backward(
    frames: &Matrix,
    params: &SldgParams,
    trace: &AttentionTrace,
    d_summaries: &Matrix,
    want_frames: bool,
) -> (Matrix, Option<Matrix>) {
    let mut d_frames = want_frames.then(|| Matrix::zeros(frames.rows(), frames.cols()));
    let d_norm = pool_backward(&trace.norm, frames, d_summaries, d_frames.as_mut());
    let mut d_s = Matrix::zeros(1, params.k());
    for j in 0..params.k() {
        let d_scaled = softmax_backward(trace.norm.row(j), d_norm.row(j));
        d_s.set(0, j, dot(&d_scaled, trace.raw.row(j)));
    }
    (d_s, d_frames)
}
