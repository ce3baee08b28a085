//! End-to-end runs: train on the base split, pick the epoch on the validation
//! split, evaluate few-shot on the test split, and sweep ablations.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{FrameSequence, FusionMode};
use crate::classifiers::ClassifierKind;
use crate::dataset::{Dataset, LabeledSet, Split};
use crate::episodic::{episode_seed, run_episodes, EpisodeSpec, EvalSummary};
use crate::error::{CltaError, Result};
use crate::model::{AttentionKind, Model, ModelConfig, ProjectionStage};
use crate::numerics::{finite_diff_check, GradCheckReport, Matrix, ParamSet};
use crate::trainer::{train, EpochLog, TrainConfig};

/// Model choices that do not depend on the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOptions {
    pub attention: AttentionKind,
    pub k: usize,
    pub beta: f64,
    pub fusion: FusionMode,
    pub classifier: ClassifierKind,
    pub hidden: usize,
    pub projection_stage: ProjectionStage,
    pub batch_norm: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let c = ModelConfig::default();
        ModelOptions {
            attention: c.attention,
            k: c.k,
            beta: c.beta,
            fusion: c.fusion,
            classifier: c.classifier,
            hidden: c.hidden,
            projection_stage: c.projection_stage,
            batch_norm: c.batch_norm,
        }
    }
}

impl ModelOptions {
    pub fn config(&self, dim: usize, num_classes: usize, z: usize) -> ModelConfig {
        ModelConfig {
            attention: self.attention,
            k: self.k,
            beta: self.beta,
            z,
            dim,
            num_classes,
            fusion: self.fusion,
            classifier: self.classifier,
            hidden: self.hidden,
            projection_stage: self.projection_stage,
            batch_norm: self.batch_norm,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    /// Base-class names in label-id order.
    pub class_names: Vec<String>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Validation episodes run after every epoch.
pub fn validation_spec(template: &EpisodeSpec, num_episodes: usize) -> EpisodeSpec {
    EpisodeSpec {
        num_episodes,
        seed: episode_seed(template.seed, u64::MAX),
        ..template.clone()
    }
}

fn usable_for(set: &LabeledSet, spec: &EpisodeSpec) -> bool {
    let mut counts = std::collections::BTreeMap::new();
    for y in set.labels() {
        *counts.entry(y).or_insert(0usize) += 1;
    }
    counts.values().filter(|&&n| n > spec.k_shot).count() >= spec.n_way
}

/// Trains on the train split with `Z` taken over the whole dataset.
///
/// `val` selects the epoch by episodic accuracy on the validation split; it is
/// skipped with a warning when that split cannot supply the episodes.
pub fn train_model(
    ds: &Dataset,
    opts: &ModelOptions,
    cfg: &TrainConfig,
    val: Option<&EpisodeSpec>,
) -> Result<TrainedModel> {
    let train_set = ds.split(Split::Train);
    if train_set.is_empty() {
        return Err(CltaError::config("dataset has no training videos"));
    }
    let dim = ds.dim().expect("non-empty dataset");
    let config = opts.config(dim, train_set.class_names.len(), ds.max_len());
    let mut init_rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, 0x1417));
    let model = Model::new(config, &mut init_rng)?;

    let val_set = ds.split(Split::Val);
    let val_spec = match val {
        Some(spec) if usable_for(&val_set, spec) => Some(spec.clone()),
        Some(spec) => {
            warn!(
                "validation split cannot supply {}-way {}-shot episodes",
                spec.n_way, spec.k_shot
            );
            None
        }
        None => None,
    };
    let validator = val_spec
        .as_ref()
        .map(|spec| move |m: &Model| run_episodes(m, &val_set.sequences, spec).map(|s| s.mean_acc));
    let outcome = match &validator {
        Some(f) => train(model, &train_set.sequences, cfg, Some(f)),
        None => train(model, &train_set.sequences, cfg, None),
    }?;
    Ok(TrainedModel {
        model: outcome.model,
        class_names: train_set.class_names,
        best_epoch: outcome.best_epoch,
        log: outcome.log,
    })
}

/// Few-shot evaluation on the test split; videos longer than the model's `Z` are skipped.
pub fn evaluate(model: &Model, ds: &Dataset, spec: &EpisodeSpec) -> Result<EvalSummary> {
    let mut test = ds.split(Split::Test);
    test.retain_max_len(model.config.z);
    run_episodes(model, &test.sequences, spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    K,
    Beta,
    Fusion,
    Classifier,
}

impl Sweep {
    pub const ALL: [Sweep; 4] = [Sweep::K, Sweep::Beta, Sweep::Fusion, Sweep::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Sweep::K => "k",
            Sweep::Beta => "beta",
            Sweep::Fusion => "fusion",
            Sweep::Classifier => "classifier",
        }
    }

    pub fn parse(s: &str) -> Result<Vec<Sweep>> {
        match s {
            "all" => Ok(Self::ALL.to_vec()),
            other => Self::ALL
                .into_iter()
                .find(|w| w.name() == other)
                .map(|w| vec![w])
                .ok_or_else(|| CltaError::config(format!("unknown sweep `{other}`"))),
        }
    }

    /// `(value label, options)` for each setting of the sweep.
    pub fn settings(self, base: &ModelOptions) -> Vec<(String, ModelOptions)> {
        match self {
            Sweep::K => [3, 6, 9]
                .into_iter()
                .map(|k| (k.to_string(), ModelOptions { k, ..base.clone() }))
                .collect(),
            Sweep::Beta => [1e1, 1e2, 1e3]
                .into_iter()
                .map(|beta| (format!("{beta:e}"), ModelOptions { beta, ..base.clone() }))
                .collect(),
            Sweep::Fusion => [FusionMode::Average, FusionMode::SoftWeight]
                .into_iter()
                .map(|fusion| (fusion.name().to_string(), ModelOptions { fusion, ..base.clone() }))
                .collect(),
            Sweep::Classifier => [ClassifierKind::Softmax, ClassifierKind::Cosine]
                .into_iter()
                .map(|classifier| {
                    (
                        classifier.name().to_string(),
                        ModelOptions {
                            classifier,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub sweep: Sweep,
    pub value: String,
    pub options: ModelOptions,
    pub summary: EvalSummary,
}

/// Trains and evaluates one model per sweep setting.
pub fn ablate(
    ds: &Dataset,
    base: &ModelOptions,
    sweeps: &[Sweep],
    cfg: &TrainConfig,
    val: Option<&EpisodeSpec>,
    eval: &EpisodeSpec,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &sweep in sweeps {
        for (value, options) in sweep.settings(base) {
            let trained = train_model(ds, &options, cfg, val)?;
            let summary = evaluate(&trained.model, ds, eval)?;
            log::info!(
                "{} = {value}: {:.4} ± {:.4}",
                sweep.name(),
                summary.mean_acc,
                summary.ci95
            );
            rows.push(AblationRow {
                sweep,
                value,
                options,
                summary,
            });
        }
    }
    Ok(rows)
}

/// Shape of the seeded gradient-check problem.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSetup {
    pub videos: usize,
    pub dim: usize,
    pub max_len: usize,
    pub k: usize,
    pub hidden: usize,
    pub classes: usize,
    pub beta: f64,
    pub eps: f64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            videos: 3,
            dim: 4,
            max_len: 6,
            k: 2,
            hidden: 5,
            classes: 3,
            beta: 1e3,
            // beta scales the curvature in W_mean, so the smallest allowed step is used.
            eps: 1e-6,
        }
    }
}

/// Checks analytic against central-difference gradients of the batch loss of a
/// seeded CLTA model (soft-weight fusion, post-fusion projection, softmax head).
///
/// All parameters get seeded random values; the projection biases are then
/// shifted so every rectifier is active on the batch, keeping the loss smooth
/// within the finite-difference step.
pub fn gradcheck(seed: u64, setup: &GradCheckSetup) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<FrameSequence> = (0..setup.videos)
        .map(|i| {
            let t = rng.random_range(1..=setup.max_len);
            let data = (0..t * setup.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            FrameSequence::new(Matrix::from_vec(t, setup.dim, data)?, Some(i % setup.classes), format!("g{i}"))
        })
        .collect::<Result<_>>()?;
    let config = ModelConfig {
        attention: AttentionKind::Clta,
        k: setup.k,
        beta: setup.beta,
        z: setup.max_len,
        dim: setup.dim,
        num_classes: setup.classes,
        fusion: FusionMode::SoftWeight,
        classifier: ClassifierKind::Softmax,
        hidden: setup.hidden,
        projection_stage: ProjectionStage::Post,
        batch_norm: false,
    };
    let mut model = Model::new(config, &mut rng)?;
    for (name, p) in model.params_mut() {
        let scale = match name {
            // Keeps beta * scores of order one so the soft-argmax is not saturated.
            "attn.w_mean" => 1.0 / (setup.beta * (setup.dim as f64).sqrt()),
            "attn.w_std" | "fusion.logits" | "head.w" => 0.5,
            _ => 0.1,
        };
        for v in p.as_mut_slice() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let descriptors: Vec<Vec<f64>> = batch.iter().map(|s| model.descriptor(s)).collect::<Result<_>>()?;
    let proj = model.projection.as_mut().expect("hidden > 0");
    for j in 0..setup.hidden {
        let lowest = descriptors
            .iter()
            .map(|v| crate::numerics::dot(proj.w.row(j), v))
            .fold(f64::INFINITY, f64::min);
        proj.b.set(0, j, 0.5 - lowest);
    }

    let refs: Vec<&FrameSequence> = batch.iter().collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label.expect("labelled")).collect();
    let analytic = model.batch_loss_grad::<ChaCha8Rng>(&refs, &labels, None)?.grads;
    analytic.check_against(model.params())?;
    let loss = |ps: &ParamSet| -> Result<f64> {
        let mut m = model.clone();
        m.load_params(ps)?;
        Ok(m.batch_loss_grad::<ChaCha8Rng>(&refs, &labels, None)?.grads.loss)
    };
    finite_diff_check(loss, &model.param_set(), &analytic, setup.eps)
}
