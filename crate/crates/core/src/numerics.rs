//! Dense double-precision linear algebra and the differentiable primitives the
//! attention heads are built from.
//!
//! Every primitive here has a hand-derived backward companion; the central
//! difference checker at the bottom of the module validates them.

use std::collections::BTreeMap;

use crate::error::{CltaError, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CltaError::shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(CltaError::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(CltaError::shape("ragged rows"));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    /// A `1 x n` matrix; used to store vector-valued parameters.
    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Matrix::from_vec(1, n, values)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(CltaError::shape(format!(
                "cannot add {:?} into {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `M x`
pub fn matvec(m: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if m.cols() != x.len() {
        return Err(CltaError::shape(format!(
            "matvec: matrix has {} columns, vector has {} entries",
            m.cols(),
            x.len()
        )));
    }
    Ok(m.iter_rows().map(|row| dot(row, x)).collect())
}

/// `Mᵀ x`
pub fn matvec_t(m: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if m.rows() != x.len() {
        return Err(CltaError::shape(format!(
            "matvec_t: matrix has {} rows, vector has {} entries",
            m.rows(),
            x.len()
        )));
    }
    let mut out = vec![0.0; m.cols()];
    for (row, &xi) in m.iter_rows().zip(x) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v * xi;
        }
    }
    Ok(out)
}

/// Softmax with max-subtraction.
pub fn softmax_stable(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(CltaError::shape("softmax of an empty vector"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Pulls an upstream gradient back through `y = softmax(x)`.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner = dot(y, dy);
    y.iter().zip(dy).map(|(yi, gi)| yi * (gi - inner)).collect()
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Logistic function, evaluated without overflow for large negative inputs.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `-log softmax(logits)[target]`
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(CltaError::Index {
            index: target,
            len: logits.len(),
        });
    }
    Ok((log_sum_exp(logits) - logits[target]).max(0.0))
}

/// Cross-entropy loss together with its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    let loss = cross_entropy(logits, target)?;
    let mut grad = softmax_stable(logits)?;
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Named collection of parameter matrices, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet(pub BTreeMap<String, Matrix>);

impl ParamSet {
    pub fn new() -> Self {
        ParamSet(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        self.0.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(|m| m.as_slice().len()).sum()
    }
}

/// Loss value plus one gradient matrix per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    pub grads: BTreeMap<String, Matrix>,
}

impl GradientBundle {
    /// Zero gradients shaped like `params`.
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = (&'a str, &'a Matrix)>) -> Self {
        let grads = params
            .into_iter()
            .map(|(name, m)| (name.to_string(), Matrix::zeros(m.rows(), m.cols())))
            .collect();
        GradientBundle { loss: 0.0, grads }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub(crate) fn slot(&mut self, name: &str) -> &mut Matrix {
        self.grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("gradient slot `{name}` was never registered"))
    }

    /// Adds `other` entrywise; both bundles must share the same keys.
    pub fn accumulate(&mut self, other: &GradientBundle) -> Result<()> {
        self.loss += other.loss;
        for (name, g) in &other.grads {
            let slot = self
                .grads
                .get_mut(name)
                .ok_or_else(|| CltaError::shape(format!("unexpected gradient `{name}`")))?;
            slot.add_scaled(g, 1.0)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.loss *= s;
        self.grads.values_mut().for_each(|g| g.scale(s));
    }

    /// Checks that gradients cover exactly the given parameters with matching shapes.
    pub fn check_against<'a>(
        &self,
        params: impl IntoIterator<Item = (&'a str, &'a Matrix)>,
    ) -> Result<()> {
        let mut seen = 0;
        for (name, p) in params {
            let g = self
                .grads
                .get(name)
                .ok_or_else(|| CltaError::shape(format!("no gradient for `{name}`")))?;
            if !g.same_shape(p) {
                return Err(CltaError::shape(format!(
                    "gradient for `{name}` is {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            seen += 1;
        }
        if seen != self.grads.len() {
            return Err(CltaError::shape("gradient bundle has extra entries"));
        }
        Ok(())
    }
}

/// Outcome of a central-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `loss_fn` around `params`.
///
/// The error for one scalar is `|a - n| / max(1e-8, |a| + |n|)`; the report
/// carries the maximum over every entry of every parameter.
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &ParamSet,
    analytic: &GradientBundle,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(CltaError::config(format!(
            "finite-difference step {eps} outside [1e-6, 1e-4]"
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        checked: 0,
    };
    let mut probe = params.clone();
    for (name, p) in params.iter() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| CltaError::shape(format!("no analytic gradient for `{name}`")))?;
        if !grad.same_shape(p) {
            return Err(CltaError::shape(format!("gradient shape mismatch for `{name}`")));
        }
        for i in 0..p.as_slice().len() {
            let original = p.as_slice()[i];
            let eval = |probe: &mut ParamSet, v: f64| -> Result<f64> {
                probe.0.get_mut(name).expect("cloned key").as_mut_slice()[i] = v;
                let loss = loss_fn(probe)?;
                if !loss.is_finite() {
                    return Err(CltaError::Numeric {
                        param: format!("{name}[{i}]"),
                    });
                }
                Ok(loss)
            };
            let plus = eval(&mut probe, original + eps)?;
            let minus = eval(&mut probe, original - eps)?;
            probe.0.get_mut(name).expect("cloned key").as_mut_slice()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.as_slice()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = Some(name.clone());
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
