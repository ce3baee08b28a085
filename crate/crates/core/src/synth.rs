//! Synthetic frame-feature videos with a planted class signal inside a short window.
//!
//! Every class owns a unit prototype direction. A video is Gaussian noise with
//! `signal_amp * prototype` added to `window_len` consecutive frames. Where the
//! window sits is what the two modes change: at a class-specific fraction of the
//! length, or anywhere, drawn independently per video.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::attention::FrameSequence;
use crate::dataset::{Dataset, Sample, Split};
use crate::error::{CltaError, Result};
use crate::numerics::{dot, Matrix};

/// Prototype pairs must have cosine similarity below this.
pub const MAX_PROTOTYPE_COSINE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    FixedPosition,
    InstanceShifted,
}

impl SynthMode {
    pub fn name(self) -> &'static str {
        match self {
            SynthMode::FixedPosition => "fixed_position",
            SynthMode::InstanceShifted => "instance_shifted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed_position" | "fixed" => Ok(SynthMode::FixedPosition),
            "instance_shifted" | "shifted" => Ok(SynthMode::InstanceShifted),
            other => Err(CltaError::config(format!("unknown synthetic mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub d: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub window_len: usize,
    pub signal_amp: f64,
    pub noise_std: f64,
    pub mode: SynthMode,
    /// Width of the interval, centred on 0.5, that class window fractions are
    /// drawn from in fixed-position mode. 1 spreads classes over the whole video.
    pub position_spread: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 30,
            videos_per_class: 30,
            d: 16,
            t_min: 12,
            t_max: 40,
            window_len: 6,
            signal_amp: 3.0,
            noise_std: 1.0,
            mode: SynthMode::InstanceShifted,
            position_spread: 0.2,
            train_frac: 2.0 / 3.0,
            val_frac: 1.0 / 6.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.videos_per_class == 0 || self.d == 0 {
            return Err(CltaError::config("class count, videos per class and d must be positive"));
        }
        if self.window_len == 0 || self.t_min < self.window_len || self.t_max < self.t_min {
            return Err(CltaError::config(format!(
                "need t_max >= t_min >= window_len >= 1, got t_min {} t_max {} window {}",
                self.t_min, self.t_max, self.window_len
            )));
        }
        if !(self.signal_amp.is_finite() && self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(CltaError::config("signal amplitude and noise std must be finite, noise >= 0"));
        }
        if !(0.0..=1.0).contains(&self.position_spread) {
            return Err(CltaError::config("position_spread must lie in [0, 1]"));
        }
        if !(self.train_frac >= 0.0 && self.val_frac >= 0.0 && self.train_frac + self.val_frac <= 1.0) {
            return Err(CltaError::config("split fractions must be non-negative and sum to at most 1"));
        }
        Ok(())
    }

    /// Number of classes in each split: train and val are rounded, test takes the rest.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.num_classes as f64;
        let train = ((n * self.train_frac).round() as usize).min(self.num_classes);
        let val = ((n * self.val_frac).round() as usize).min(self.num_classes - train);
        (train, val, self.num_classes - train - val)
    }
}

/// A generated dataset together with the ground truth used to build it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub dataset: Dataset,
    /// Zero-based first window frame, parallel to `dataset.samples`.
    pub window_starts: Vec<usize>,
    /// Unit prototype per class, indexed by class number.
    pub prototypes: Vec<Vec<f64>>,
    /// Window fraction per class used by fixed-position mode.
    pub class_fractions: Vec<f64>,
}

impl SynthDataset {
    /// Window start as a fraction of the free range `T - window_len` (0 when the window fills the video).
    pub fn window_fraction(&self, i: usize, window_len: usize) -> f64 {
        let t = self.dataset.samples[i].seq.len();
        if t == window_len {
            0.0
        } else {
            self.window_starts[i] as f64 / (t - window_len) as f64
        }
    }
}

pub fn class_name(c: usize, num_classes: usize) -> String {
    let width = num_classes.saturating_sub(1).to_string().len().max(2);
    format!("c{c:0width$}")
}

/// Full redraws of the prototype set allowed after a slot exhausts its budget.
const PROTOTYPE_RESTARTS: usize = 10;

fn draw_prototypes<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let budget = 10 * cfg.num_classes;
    let mut stuck_at = 0;
    'restart: for _ in 0..PROTOTYPE_RESTARTS {
        let mut protos: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
        while protos.len() < cfg.num_classes {
            let mut accepted = None;
            for _ in 0..budget {
                let mut v: Vec<f64> = (0..cfg.d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dot(&v, &v).sqrt();
                if norm == 0.0 {
                    continue;
                }
                v.iter_mut().for_each(|x| *x /= norm);
                if protos.iter().all(|p| dot(p, &v) < MAX_PROTOTYPE_COSINE) {
                    accepted = Some(v);
                    break;
                }
            }
            match accepted {
                Some(v) => protos.push(v),
                None => {
                    stuck_at = protos.len() + 1;
                    continue 'restart;
                }
            }
        }
        return Ok(protos);
    }
    Err(CltaError::config(format!(
        "could not place prototype {stuck_at} of {} with cosine < {MAX_PROTOTYPE_COSINE} \
         ({budget} draws per prototype, {PROTOTYPE_RESTARTS} restarts); increase d ({}) or reduce the class count",
        cfg.num_classes, cfg.d
    )))
}

/// Generates the dataset; the result depends only on `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes = draw_prototypes(cfg, &mut rng)?;
    let class_fractions: Vec<f64> = (0..cfg.num_classes)
        .map(|_| 0.5 + cfg.position_spread * (rng.random::<f64>() - 0.5))
        .collect();

    let (n_train, n_val, _) = cfg.split_counts();
    let mut order: Vec<usize> = (0..cfg.num_classes).collect();
    order.shuffle(&mut rng);
    let mut split_of = vec![Split::Test; cfg.num_classes];
    for (rank, &c) in order.iter().enumerate() {
        split_of[c] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| CltaError::config(e.to_string()))?;
    let mut samples = Vec::with_capacity(cfg.num_classes * cfg.videos_per_class);
    let mut window_starts = Vec::with_capacity(samples.capacity());
    for c in 0..cfg.num_classes {
        let name = class_name(c, cfg.num_classes);
        for v in 0..cfg.videos_per_class {
            let t = rng.random_range(cfg.t_min..=cfg.t_max);
            let free = t - cfg.window_len;
            let start = match cfg.mode {
                SynthMode::FixedPosition => (class_fractions[c] * free as f64).round() as usize,
                SynthMode::InstanceShifted => rng.random_range(0..=free),
            };
            let mut data = Vec::with_capacity(t * cfg.d);
            for i in 0..t {
                let inside = (start..start + cfg.window_len).contains(&i);
                for j in 0..cfg.d {
                    let mut x = noise.sample(&mut rng);
                    if inside {
                        x += cfg.signal_amp * prototypes[c][j];
                    }
                    // Stored at single precision so files and memory agree.
                    data.push(x as f32 as f64);
                }
            }
            let seq = FrameSequence::new(Matrix::from_vec(t, cfg.d, data)?, None, format!("{name}_v{v:03}"))?;
            samples.push(Sample {
                seq,
                label: name.clone(),
                split: split_of[c],
            });
            window_starts.push(start);
        }
    }
    Ok(SynthDataset {
        dataset: Dataset { samples },
        window_starts,
        prototypes,
        class_fractions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::{fit_head, predict, ClassifierKind, Head, HeadFitConfig};
    use crate::dataset::describe;

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SynthConfig {
            num_classes: 6,
            videos_per_class: 4,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = generate(&SynthConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(other, generate(&cfg).unwrap());
    }

    #[test]
    fn noiseless_full_window_is_the_prototype() {
        let cfg = SynthConfig {
            num_classes: 4,
            videos_per_class: 3,
            t_min: 5,
            t_max: 5,
            window_len: 5,
            noise_std: 0.0,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        for s in &ds.dataset.samples {
            let c: usize = s.label[1..].parse().unwrap();
            for row in s.seq.features.iter_rows() {
                for (x, p) in row.iter().zip(&ds.prototypes[c]) {
                    assert_eq!(*x, (cfg.signal_amp * p) as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn prototypes_are_unit_and_spread() {
        let ds = generate(&SynthConfig::default()).unwrap();
        for (i, p) in ds.prototypes.iter().enumerate() {
            assert!((dot(p, p) - 1.0).abs() < 1e-12);
            for q in &ds.prototypes[..i] {
                assert!(dot(p, q) < MAX_PROTOTYPE_COSINE);
            }
        }
    }

    #[test]
    fn impossible_prototypes_error() {
        let cfg = SynthConfig {
            num_classes: 20,
            d: 2,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(CltaError::Config(m)) if m.contains("prototype")));
    }

    #[test]
    fn default_splits_and_counts() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.split_counts(), (20, 5, 5));
        let ds = generate(&cfg).unwrap();
        ds.dataset.validate().unwrap();
        let summary = describe(&ds.dataset);
        assert_eq!(summary.splits[&Split::Train].classes, 20);
        assert_eq!(summary.splits[&Split::Val].classes, 5);
        assert_eq!(summary.splits[&Split::Test].classes, 5);
        assert_eq!(summary.total_videos, 900);
        assert_eq!(summary.splits.values().map(|s| s.videos).sum::<usize>(), 900);
        assert!(summary.z <= 40);
        assert_eq!(summary.z, ds.dataset.samples.iter().map(|s| s.seq.len()).max().unwrap());
    }

    #[test]
    fn shifted_windows_span_the_video() {
        let cfg = SynthConfig {
            num_classes: 3,
            videos_per_class: 100,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        for c in 0..3 {
            let fr: Vec<f64> = (c * 100..(c + 1) * 100).map(|i| ds.window_fraction(i, cfg.window_len)).collect();
            let lo = fr.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = fr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(hi - lo >= 0.5, "class {c}: {lo}..{hi}");
        }
    }

    #[test]
    fn fixed_windows_follow_class_fraction() {
        let cfg = SynthConfig {
            num_classes: 4,
            videos_per_class: 20,
            mode: SynthMode::FixedPosition,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        for (i, s) in ds.dataset.samples.iter().enumerate() {
            let c = i / 20;
            let free = s.seq.len() - cfg.window_len;
            assert_eq!(ds.window_starts[i], (ds.class_fractions[c] * free as f64).round() as usize);
            assert!((ds.class_fractions[c] - 0.5).abs() <= cfg.position_spread / 2.0);
        }
    }

    #[test]
    fn window_dot_exceeds_background() {
        let cfg = SynthConfig::default();
        let ds = generate(&cfg).unwrap();
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for (i, s) in ds.dataset.samples.iter().enumerate() {
            let c: usize = s.label[1..].parse().unwrap();
            let start = ds.window_starts[i];
            for (t, row) in s.seq.features.iter_rows().enumerate() {
                let v = dot(row, &ds.prototypes[c]);
                if (start..start + cfg.window_len).contains(&t) {
                    inside += v;
                    n_in += 1;
                } else {
                    outside += v;
                    n_out += 1;
                }
            }
        }
        assert!(inside / n_in as f64 - outside / n_out as f64 >= cfg.signal_amp / 2.0);
    }

    #[test]
    fn averaged_descriptors_are_linearly_separable() {
        let cfg = SynthConfig {
            num_classes: 5,
            train_frac: 1.0,
            val_frac: 0.0,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let set = ds.dataset.split(Split::Train);
        let xs: Vec<Vec<f64>> = set.sequences.iter().map(|s| crate::baselines::average_pool(s).unwrap()).collect();
        let ys = set.labels();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = Head::new(ClassifierKind::Softmax, cfg.d, 5, &mut rng).unwrap();
        let fit = HeadFitConfig {
            epochs: 300,
            batch_size: 150,
            lr: 0.05,
        };
        fit_head(&mut head, &xs, &ys, &fit, &mut rng).unwrap();
        let correct = xs
            .iter()
            .zip(&ys)
            .filter(|(x, y)| predict(&head.logits(x).unwrap()) == **y)
            .count();
        assert!(correct as f64 / xs.len() as f64 >= 0.95, "{correct}/150");
    }

    #[test]
    fn rejects_bad_config() {
        let bad = SynthConfig {
            t_min: 4,
            window_len: 6,
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
    }
}
