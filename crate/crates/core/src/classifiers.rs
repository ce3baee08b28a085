//! Linear-softmax and cosine-similarity classification heads.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CltaError, Result};
use crate::numerics::{cross_entropy_with_grad, dot, GradientBundle, Matrix};
use crate::trainer::AdamState;

/// Initial cosine temperature.
const COSINE_PROTO_INIT_STD: f64 = 0.01;

pub const COSINE_TEMPERATURE_INIT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    Softmax,
    Cosine,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Softmax => "softmax",
            ClassifierKind::Cosine => "cosine",
        }
    }
}

/// `logits = Wᵀ V + bias`
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    /// `h x c`
    pub w: Matrix,
    /// `1 x c`
    pub bias: Matrix,
}

/// `logits_i = temperature · cos(V, proto_i)`; the temperature is stored as a log.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineHead {
    /// `c x h`
    pub protos: Matrix,
    /// `1 x 1`
    pub log_temperature: Matrix,
}

impl CosineHead {
    pub fn temperature(&self) -> f64 {
        self.log_temperature.get(0, 0).exp()
    }
}

pub fn softmax_logits(v: &[f64], head: &SoftmaxHead) -> Result<Vec<f64>> {
    if v.len() != head.w.rows() || head.bias.cols() != head.w.cols() {
        return Err(CltaError::shape(format!(
            "softmax head is {:?} with {} biases, descriptor has {} entries",
            head.w.shape(),
            head.bias.cols(),
            v.len()
        )));
    }
    let mut out = head.bias.as_slice().to_vec();
    for (row, &x) in head.w.iter_rows().zip(v) {
        for (o, w) in out.iter_mut().zip(row) {
            *o += w * x;
        }
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarities `s'_i` in `[-1, 1]` (multiply by the temperature for logits).
pub fn cosine_scores(v: &[f64], head: &CosineHead) -> Result<Vec<f64>> {
    if v.len() != head.protos.cols() {
        return Err(CltaError::shape(format!(
            "cosine head expects {} features, descriptor has {}",
            head.protos.cols(),
            v.len()
        )));
    }
    let nv = norm(v);
    if nv == 0.0 {
        return Err(CltaError::Degenerate("descriptor has zero norm".into()));
    }
    head.protos
        .iter_rows()
        .enumerate()
        .map(|(i, w)| {
            let nw = norm(w);
            if nw == 0.0 {
                return Err(CltaError::Degenerate(format!("prototype {i} has zero norm")));
            }
            Ok((dot(v, w) / (nv * nw)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Softmax(SoftmaxHead),
    Cosine(CosineHead),
}

impl Head {
    /// Fresh head for `classes` outputs over `features`-dimensional inputs.
    /// Softmax heads start at zero. Cosine prototypes are small random vectors,
    /// so a few optimiser steps are enough to overwrite their direction.
    pub fn new<R: Rng>(kind: ClassifierKind, features: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if features == 0 || classes == 0 {
            return Err(CltaError::config("classifier needs positive input and output sizes"));
        }
        Ok(match kind {
            ClassifierKind::Softmax => Head::Softmax(SoftmaxHead {
                w: Matrix::zeros(features, classes),
                bias: Matrix::zeros(1, classes),
            }),
            ClassifierKind::Cosine => {
                let scale = COSINE_PROTO_INIT_STD / (features as f64).sqrt();
                let data = (0..features * classes)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Head::Cosine(CosineHead {
                    protos: Matrix::from_vec(classes, features, data)?,
                    log_temperature: Matrix::filled(1, 1, COSINE_TEMPERATURE_INIT.ln()),
                })
            }
        })
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            Head::Softmax(_) => ClassifierKind::Softmax,
            Head::Cosine(_) => ClassifierKind::Cosine,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Head::Softmax(h) => h.w.cols(),
            Head::Cosine(h) => h.protos.rows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Head::Softmax(h) => h.w.rows(),
            Head::Cosine(h) => h.protos.cols(),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Head::Softmax(h) => vec![("head.b", &h.bias), ("head.w", &h.w)],
            Head::Cosine(h) => vec![("head.log_temperature", &h.log_temperature), ("head.proto", &h.protos)],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        match self {
            Head::Softmax(h) => vec![("head.b", &mut h.bias), ("head.w", &mut h.w)],
            Head::Cosine(h) => vec![
                ("head.log_temperature", &mut h.log_temperature),
                ("head.proto", &mut h.protos),
            ],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Head::Softmax(h) => softmax_logits(x, h),
            Head::Cosine(h) => {
                let t = h.temperature();
                Ok(cosine_scores(x, h)?.into_iter().map(|s| t * s).collect())
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns `d loss / d x`.
    pub(crate) fn backward(&self, x: &[f64], d_logits: &[f64], grads: &mut GradientBundle) -> Result<Vec<f64>> {
        match self {
            Head::Softmax(h) => {
                let gw = grads.slot("head.w");
                for (i, &xi) in x.iter().enumerate() {
                    for (g, d) in gw.row_mut(i).iter_mut().zip(d_logits) {
                        *g += xi * d;
                    }
                }
                for (g, d) in grads.slot("head.b").row_mut(0).iter_mut().zip(d_logits) {
                    *g += d;
                }
                Ok(h.w.iter_rows().map(|row| dot(row, d_logits)).collect())
            }
            Head::Cosine(h) => {
                let scores = cosine_scores(x, h)?;
                let t = h.temperature();
                let nx = norm(x);
                let mut dx = vec![0.0; x.len()];
                let mut d_lt = 0.0;
                for (i, (w, (&s, &dl))) in h.protos.iter_rows().zip(scores.iter().zip(d_logits)).enumerate() {
                    d_lt += dl * t * s;
                    let ds = dl * t;
                    let nw = norm(w);
                    for (j, g) in dx.iter_mut().enumerate() {
                        *g += ds * (w[j] / (nx * nw) - s * x[j] / (nx * nx));
                    }
                    let gp = grads.slot("head.proto");
                    for (j, g) in gp.row_mut(i).iter_mut().enumerate() {
                        *g += ds * (x[j] / (nx * nw) - s * w[j] / (nw * nw));
                    }
                }
                grads.slot("head.log_temperature").as_mut_slice()[0] += d_lt;
                Ok(dx)
            }
        }
    }
}

/// Optimisation settings for fitting a head on fixed descriptors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadFitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Fits `head` on fixed inputs with Adam and mean cross-entropy; returns the
/// loss of the last mini-batch.
pub fn fit_head<R: Rng>(
    head: &mut Head,
    xs: &[Vec<f64>],
    ys: &[usize],
    cfg: &HeadFitConfig,
    rng: &mut R,
) -> Result<f64> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(CltaError::config("head fitting needs matching, non-empty inputs and labels"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(CltaError::config("head fitting needs a positive batch size and learning rate"));
    }
    let mut adam = AdamState::new();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = GradientBundle::zeros_like(head.params());
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let logits = head.logits(&xs[i])?;
                let (loss, mut dl) = cross_entropy_with_grad(&logits, ys[i])?;
                dl.iter_mut().for_each(|g| *g *= scale);
                head.backward(&xs[i], &dl, &mut grads)?;
                grads.loss += loss * scale;
            }
            last = grads.loss;
            adam.step(head.params_mut(), &grads, cfg.lr)?;
        }
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn softmax_head(w: Vec<Vec<f64>>, b: Vec<f64>) -> SoftmaxHead {
        SoftmaxHead {
            w: Matrix::from_rows(&w).unwrap(),
            bias: Matrix::row_vector(b).unwrap(),
        }
    }

    #[test]
    fn softmax_logits_cases() {
        let zero = SoftmaxHead {
            w: Matrix::zeros(3, 4),
            bias: Matrix::zeros(1, 4),
        };
        assert_eq!(softmax_logits(&[1.0, 2.0, 3.0], &zero).unwrap(), vec![0.0; 4]);

        let h = softmax_head(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]], vec![0.0, 0.0]);
        assert_eq!(softmax_logits(&[3.0, 7.0, 0.0], &h).unwrap(), vec![3.0, 7.0]);

        let shifted = softmax_head(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]], vec![5.0, 5.0]);
        let l = softmax_logits(&[3.0, 7.0, 0.0], &shifted).unwrap();
        assert_eq!(l, vec![8.0, 12.0]);
        assert_eq!(predict(&l), 1);
        assert!(softmax_logits(&[1.0], &h).is_err());
    }

    #[test]
    fn cosine_cases() {
        let head = CosineHead {
            protos: Matrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap(),
            log_temperature: Matrix::filled(1, 1, 0.0),
        };
        let s = cosine_scores(&[1.0, 2.0, 0.0], &head).unwrap();
        assert_abs_diff_eq!(s[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], 0.0);
        let orth = cosine_scores(&[-2.0, 1.0, 0.0], &head).unwrap();
        assert_abs_diff_eq!(orth[0], 0.0, epsilon = 1e-15);
        let v = [0.3, -1.1, 2.0];
        let a = cosine_scores(&v, &head).unwrap();
        let b = cosine_scores(&v.map(|x| 5.0 * x), &head).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        assert!(matches!(cosine_scores(&[0.0; 3], &head), Err(CltaError::Degenerate(_))));
    }

    #[test]
    fn predict_cases() {
        assert_eq!(predict(&[0.1, 0.9]), 1);
        assert_eq!(predict(&[0.4, 0.4, 0.4]), 0);
        assert_eq!(predict(&[3.0, 7.0, 2.0]), 1);
    }

    #[test]
    fn head_backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for kind in [ClassifierKind::Softmax, ClassifierKind::Cosine] {
            let mut head = Head::new(kind, 4, 3, &mut rng).unwrap();
            for (_, p) in head.params_mut() {
                for v in p.as_mut_slice() {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target = 2;
            let loss = |head: &Head, x: &[f64]| cross_entropy_with_grad(&head.logits(x).unwrap(), target).unwrap().0;
            let (_, dl) = cross_entropy_with_grad(&head.logits(&x).unwrap(), target).unwrap();
            let mut grads = GradientBundle::zeros_like(head.params());
            let dx = head.backward(&x, &dl, &mut grads).unwrap();
            let h = 1e-6;
            let close = |a: f64, n: f64| assert!((a - n).abs() <= 1e-6 * (a.abs() + n.abs()).max(1e-3), "{kind:?} {a} vs {n}");
            for i in 0..4 {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                close(dx[i], (loss(&head, &xp) - loss(&head, &xm)) / (2.0 * h));
            }
            let names: Vec<&str> = head.params().iter().map(|(n, _)| *n).collect();
            for name in names {
                let len = grads.get(name).unwrap().as_slice().len();
                for i in 0..len {
                    let mut hp = head.clone();
                    let mut hm = head.clone();
                    for (n, p) in hp.params_mut() {
                        if n == name {
                            p.as_mut_slice()[i] += h;
                        }
                    }
                    for (n, p) in hm.params_mut() {
                        if n == name {
                            p.as_mut_slice()[i] -= h;
                        }
                    }
                    close(grads.get(name).unwrap().as_slice()[i], (loss(&hp, &x) - loss(&hm, &x)) / (2.0 * h));
                }
            }
        }
    }

    /// Two well-separated Gaussian blobs, symmetric about the origin.
    fn toy_set(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..100 {
            let c = i % 2;
            let sign = if c == 0 { 1.0 } else { -1.0 };
            xs.push(vec![
                sign * 2.0 + 0.5 * rng.sample::<f64, _>(StandardNormal),
                sign * 1.0 + 0.5 * rng.sample::<f64, _>(StandardNormal),
                0.5 * rng.sample::<f64, _>(StandardNormal),
            ]);
            ys.push(c);
        }
        (xs, ys)
    }

    #[test]
    fn both_heads_fit_separable_toy_set() {
        for kind in [ClassifierKind::Softmax, ClassifierKind::Cosine] {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let (xs, ys) = toy_set(&mut rng);
            let mut head = Head::new(kind, 3, 2, &mut rng).unwrap();
            // 200 Adam steps: full batch, 200 epochs.
            let cfg = HeadFitConfig {
                epochs: 200,
                batch_size: 100,
                lr: 0.01,
            };
            fit_head(&mut head, &xs, &ys, &cfg, &mut rng).unwrap();
            let correct = xs
                .iter()
                .zip(&ys)
                .filter(|(x, &y)| predict(&head.logits(x).unwrap()) == y)
                .count();
            assert!(correct >= 99, "{kind:?}: {correct}/100");
        }
    }

    proptest! {
        #[test]
        fn cosine_invariant_to_positive_rescaling(
            v in prop::collection::vec(-5f64..5.0, 4),
            protos in prop::collection::vec(-5f64..5.0, 12),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&v) > 1e-3);
            let p = Matrix::from_vec(3, 4, protos).unwrap();
            prop_assume!(p.iter_rows().all(|r| norm(r) > 1e-3));
            let head = CosineHead { protos: p.clone(), log_temperature: Matrix::filled(1, 1, 1.0) };
            let mut scaled = p.clone();
            for (i, row) in p.iter_rows().enumerate() {
                let s = if i % 2 == 0 { a } else { b };
                for (j, x) in row.iter().enumerate() {
                    scaled.set(i, j, s * x);
                }
            }
            let head2 = CosineHead { protos: scaled, log_temperature: Matrix::filled(1, 1, 1.0) };
            let va: Vec<f64> = v.iter().map(|x| a * x).collect();
            let l1 = Head::Cosine(head).logits(&v).unwrap();
            let l2 = Head::Cosine(head2).logits(&va).unwrap();
            for (x, y) in l1.iter().zip(&l2) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert_eq!(predict(&l1), predict(&l2));
        }

        #[test]
        fn softmax_prediction_shift_invariant(logits in prop::collection::vec(-10f64..10.0, 1..8), c in -100f64..100.0) {
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            let p1 = crate::numerics::softmax_stable(&logits).unwrap();
            let p2 = crate::numerics::softmax_stable(&shifted).unwrap();
            prop_assert_eq!(predict(&p1), predict(&p2));
        }
    }
}
