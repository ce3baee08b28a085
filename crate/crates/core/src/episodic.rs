//! n-way k-shot evaluation on novel classes with a frozen encoder.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::FrameSequence;
use crate::classifiers::{fit_head, predict, ClassifierKind, Head, HeadFitConfig};
use crate::error::{CltaError, Result};
use crate::model::Model;

/// Environment variable capping evaluation threads (0 or unset = all cores).
pub const THREADS_ENV: &str = "CLTA_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub num_episodes: usize,
    pub retrain_epochs: usize,
    pub retrain_batch: usize,
    pub retrain_lr: f64,
    pub seed: u64,
    /// Head retrained in each episode; `None` uses the model's own head type.
    pub head: Option<ClassifierKind>,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            n_way: 5,
            k_shot: 5,
            num_episodes: 600,
            retrain_epochs: 100,
            retrain_batch: 64,
            retrain_lr: 1e-3,
            seed: 0,
            head: None,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(CltaError::config("n_way must be at least 2"));
        }
        if self.k_shot == 0 {
            return Err(CltaError::config("k_shot must be at least 1"));
        }
        if self.retrain_batch == 0 || !(self.retrain_lr > 0.0) {
            return Err(CltaError::config("retraining needs a positive batch size and learning rate"));
        }
        Ok(())
    }

    fn fit_config(&self) -> HeadFitConfig {
        HeadFitConfig {
            epochs: self.retrain_epochs,
            batch_size: self.retrain_batch,
            lr: self.retrain_lr,
        }
    }
}

/// Indices into the novel set. Entry `i` of `support`/`query` belongs to episode class `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub accuracy: f64,
    /// Whether the query of each episode class was classified correctly.
    pub correct: Vec<bool>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mean_acc: f64,
    pub ci95: f64,
    pub episodes: Vec<EpisodeResult>,
}

/// Seed of episode `index`, independent of execution order.
pub fn episode_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finaliser over a combination of both inputs.
    let mut z = master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Videos per class label, classes in ascending order.
fn by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        map.entry(y).or_default().push(i);
    }
    map
}

fn eligible_classes(labels: &[usize], spec: &EpisodeSpec) -> Result<BTreeMap<usize, Vec<usize>>> {
    let all = by_class(labels);
    let total = all.len();
    let eligible: BTreeMap<usize, Vec<usize>> =
        all.into_iter().filter(|(_, v)| v.len() > spec.k_shot).collect();
    if eligible.len() < spec.n_way {
        return Err(CltaError::Sampling(format!(
            "{}-way {}-shot needs {} classes with at least {} videos, found {} of {} classes (short by {})",
            spec.n_way,
            spec.k_shot,
            spec.n_way,
            spec.k_shot + 1,
            eligible.len(),
            total,
            spec.n_way - eligible.len()
        )));
    }
    Ok(eligible)
}

fn sample_from(rng: &mut ChaCha8Rng, classes: &BTreeMap<usize, Vec<usize>>, spec: &EpisodeSpec) -> Episode {
    let keys: Vec<usize> = classes.keys().copied().collect();
    let chosen: Vec<usize> = keys.choose_multiple(rng, spec.n_way).copied().collect();
    let mut support = Vec::with_capacity(spec.n_way);
    let mut query = Vec::with_capacity(spec.n_way);
    for c in &chosen {
        let mut vids = classes[c].clone();
        vids.shuffle(rng);
        query.push(vids[spec.k_shot]);
        vids.truncate(spec.k_shot);
        support.push(vids);
    }
    Episode {
        classes: chosen,
        support,
        query,
    }
}

/// Draws one episode from a labelled novel set (`labels[i]` is the class of video `i`).
pub fn sample_episode(rng: &mut ChaCha8Rng, labels: &[usize], spec: &EpisodeSpec) -> Result<Episode> {
    spec.validate()?;
    let classes = eligible_classes(labels, spec)?;
    Ok(sample_from(rng, &classes, spec))
}

/// Fits a fresh `n_way` head on support descriptors; labels are episode-local.
pub fn retrain_classifier(
    support: &[Vec<f64>],
    labels: &[usize],
    kind: ClassifierKind,
    n_way: usize,
    spec: &EpisodeSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Head> {
    let dim = support
        .first()
        .ok_or_else(|| CltaError::config("support set is empty"))?
        .len();
    let mut head = Head::new(kind, dim, n_way, rng)?;
    fit_head(&mut head, support, labels, &spec.fit_config(), rng)?;
    Ok(head)
}

fn run_one(
    embeddings: &[Vec<f64>],
    classes: &BTreeMap<usize, Vec<usize>>,
    kind: ClassifierKind,
    spec: &EpisodeSpec,
    index: usize,
) -> Result<EpisodeResult> {
    let seed = episode_seed(spec.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep = sample_from(&mut rng, classes, spec);
    let mut xs = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut ys = Vec::with_capacity(xs.capacity());
    for (local, vids) in ep.support.iter().enumerate() {
        for &v in vids {
            xs.push(embeddings[v].clone());
            ys.push(local);
        }
    }
    let head = retrain_classifier(&xs, &ys, kind, spec.n_way, spec, &mut rng)?;
    let correct: Vec<bool> = ep
        .query
        .iter()
        .enumerate()
        .map(|(local, &q)| Ok(predict(&head.logits(&embeddings[q])?) == local))
        .collect::<Result<_>>()?;
    Ok(EpisodeResult {
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / spec.n_way as f64,
        correct,
        seed,
    })
}

/// Mean and `1.96 * stderr` of per-episode accuracies.
pub fn summarize(episodes: Vec<EpisodeResult>) -> EvalSummary {
    let n = episodes.len() as f64;
    let mean = episodes.iter().map(|e| e.accuracy).sum::<f64>() / n;
    let var = if episodes.len() > 1 {
        episodes.iter().map(|e| (e.accuracy - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    EvalSummary {
        mean_acc: mean,
        ci95: 1.96 * (var / n).sqrt(),
        episodes,
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| CltaError::config(format!("{THREADS_ENV} must be a non-negative integer, got `{v}`")))
        })
        .transpose()?
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CltaError::config(e.to_string()))
}

/// Runs episodes over precomputed descriptors.
pub fn run_episodes_on_embeddings(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    kind: ClassifierKind,
    spec: &EpisodeSpec,
) -> Result<EvalSummary> {
    spec.validate()?;
    if spec.num_episodes == 0 {
        return Err(CltaError::config("num_episodes must be at least 1"));
    }
    if embeddings.len() != labels.len() {
        return Err(CltaError::shape("descriptor and label counts differ"));
    }
    let classes = eligible_classes(labels, spec)?;
    let episodes: Vec<EpisodeResult> = thread_pool()?.install(|| {
        (0..spec.num_episodes)
            .into_par_iter()
            .map(|i| run_one(embeddings, &classes, kind, spec, i))
            .collect::<Result<_>>()
    })?;
    Ok(summarize(episodes))
}

/// Embeds the novel set with the frozen model and runs the episodes.
pub fn run_episodes(model: &Model, novel: &[FrameSequence], spec: &EpisodeSpec) -> Result<EvalSummary> {
    let labels: Vec<usize> = novel
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| CltaError::config(format!("novel video `{}` has no label", s.video_id)))
        })
        .collect::<Result<_>>()?;
    let embeddings: Vec<Vec<f64>> = thread_pool()?.install(|| {
        novel
            .par_iter()
            .map(|s| model.embed(s))
            .collect::<Result<_>>()
    })?;
    let kind = spec.head.unwrap_or(model.head.kind());
    run_episodes_on_embeddings(&embeddings, &labels, kind, spec)
}
