//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! The process exits non-zero on a failed criterion only when
//! `CLTA_ACCEPTANCE_STRICT=1`; otherwise failures are reported and the
//! summary line shows how many criteria passed. `CLTA_ACCEPTANCE_ONLY=1,4,8`
//! restricts the run to the listed criteria.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use clta_core::attention::{attend, soft_argmax, CltaParams, FrameSequence, FusionMode};
use clta_core::classifiers::ClassifierKind;
use clta_core::dataset::Dataset;
use clta_core::episodic::{run_episodes_on_embeddings, EpisodeSpec, EvalSummary};
use clta_core::model::{AttentionKind, Model, ModelConfig, ProjectionStage};
use clta_core::numerics::Matrix;
use clta_core::pipeline::{ablate, evaluate, train_model, validation_spec, ModelOptions, Sweep};
use clta_core::synth::{generate, SynthConfig, SynthMode};
use clta_core::trainer::TrainConfig;

/// Signal amplitude at which average pooling lands in the target band.
const SYNTH_AMP: f64 = 2.0;
const VAL_EPISODES: usize = 100;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_clta"))
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn within_time(start: Instant, limit: Duration) -> (bool, String) {
    let el = start.elapsed();
    (el <= limit, format!("{:.1}s/{}s", el.as_secs_f64(), limit.as_secs()))
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let out = Command::new(bin())
            .args(["gradcheck", "--seed", &seed.to_string()])
            .output()
            .expect("run gradcheck");
        let text = String::from_utf8_lossy(&out.stdout);
        let err: f64 = text
            .split_whitespace()
            .nth(3)
            .and_then(|s| s.parse().ok())
            .unwrap_or(f64::INFINITY);
        if !out.status.success() {
            return verdict(false, format!("seed {seed}: exit {:?}, {text}", out.status.code()));
        }
        worst = worst.max(err);
    }
    let (fast, time) = within_time(start, Duration::from_secs(30));
    verdict(worst < 1e-4 && fast, format!("max rel error {worst:.2e} over 3 seeds, {time}"))
}

fn normalization_and_range() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut violations) = (0.0f64, 0usize);
    for _ in 0..1000 {
        let t = rng.random_range(1..=30);
        let z = t + rng.random_range(0..10);
        let d = rng.random_range(1..=6);
        let k = rng.random_range(1..=6);
        let beta = [1e1, 1e2, 1e3][rng.random_range(0..3)];
        let frames = gaussian(&mut rng, t, d, 2.0);
        let params = CltaParams::new(gaussian(&mut rng, k, d, 1.0), gaussian(&mut rng, k, d, 1.0), beta, z).unwrap();
        let seq = FrameSequence::new(frames.clone(), None, "x").unwrap();
        let tr = attend(&seq, &params).unwrap();
        let (lo_mu, hi) = (1.0 / z as f64, t as f64 / z as f64);
        for kk in 0..k {
            let s: f64 = tr.norm.row(kk).iter().sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
            if !(tr.mu[kk] >= lo_mu - 1e-12 && tr.mu[kk] <= hi + 1e-12) {
                violations += 1;
            }
            if !(tr.sigma[kk] > 0.0 && tr.sigma[kk] <= hi + 1e-12) {
                violations += 1;
            }
            for j in 0..d {
                let col = (0..t).map(|r| frames.get(r, j));
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let up = col.fold(f64::NEG_INFINITY, f64::max);
                let v = tr.summaries.get(kk, j);
                if v < lo - 1e-9 || v > up + 1e-9 {
                    violations += 1;
                }
            }
        }
    }
    let (fast, time) = within_time(start, Duration::from_secs(10));
    verdict(
        worst_sum <= 1e-9 && violations == 0 && fast,
        format!("max |row sum - 1| {worst_sum:.1e}, {violations} range violations, {time}"),
    )
}

fn soft_argmax_fidelity() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let betas = [1e1, 1e2, 1e3];
    let mut gaps = [0.0f64; 3];
    let mut worst_high = 0.0f64;
    let mut drawn = 0;
    while drawn < 1000 {
        let n = rng.random_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if sorted[0] - sorted[1] < 0.05 {
            continue;
        }
        drawn += 1;
        let arg = scores.iter().position(|&s| s == sorted[0]).unwrap() as f64 + 1.0;
        for (g, &b) in gaps.iter_mut().zip(&betas) {
            let gap = (soft_argmax(&scores, b).unwrap() - arg).abs();
            *g += gap / 1000.0;
            if b == 1e3 {
                worst_high = worst_high.max(gap);
            }
        }
    }
    let monotone = gaps[0] >= gaps[1] && gaps[1] >= gaps[2];
    let (fast, time) = within_time(start, Duration::from_secs(5));
    verdict(
        worst_high <= 1e-6 && monotone && fast,
        format!(
            "max gap at 1e3 {worst_high:.1e}; mean gaps {:.3} / {:.3} / {:.2e}, {time}",
            gaps[0], gaps[1], gaps[2]
        ),
    )
}

/// Straight-line recomputation of the attention, fusion and head from raw arrays.
fn brute_force_logits(
    f: &[Vec<f64>],
    wm: &[Vec<f64>],
    ws: &[Vec<f64>],
    beta: f64,
    z: f64,
    fusion_logits: Option<&[f64]>,
    head: &BruteHead,
) -> Vec<f64> {
    let t_len = f.len();
    let d = f[0].len();
    let k_len = wm.len();
    let mut vs = Vec::new();
    for k in 0..k_len {
        let mut sm = vec![0.0; t_len];
        let mut ss = vec![0.0; t_len];
        for t in 0..t_len {
            for j in 0..d {
                sm[t] += f[t][j] * wm[k][j];
                ss[t] += f[t][j] * ws[k][j];
            }
        }
        let top = sm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for t in 0..t_len {
            denom += (beta * (sm[t] - top)).exp();
        }
        let mut idx = 0.0;
        for t in 0..t_len {
            idx += (t as f64 + 1.0) * (beta * (sm[t] - top)).exp() / denom;
        }
        let mu = idx / z;
        let mut sigma = 0.0;
        for t in 0..t_len {
            sigma += 1.0 / (1.0 + (-ss[t]).exp());
        }
        sigma /= z;
        let mut a = vec![0.0; t_len];
        for t in 0..t_len {
            let u = ((t as f64 + 1.0) / z - mu) / sigma;
            a[t] = (-0.5 * u * u).exp();
        }
        let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut esum = 0.0;
        for t in 0..t_len {
            esum += (a[t] - amax).exp();
        }
        let mut v = vec![0.0; d];
        for t in 0..t_len {
            let e = (a[t] - amax).exp() / esum;
            for j in 0..d {
                v[j] += e * f[t][j];
            }
        }
        vs.push(v);
    }
    let mut weights = vec![1.0 / k_len as f64; k_len];
    if let Some(l) = fusion_logits {
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = l.iter().map(|x| (x - m).exp()).sum();
        weights = l.iter().map(|x| (x - m).exp() / s).collect();
    }
    let mut big_v = vec![0.0; d];
    for k in 0..k_len {
        for j in 0..d {
            big_v[j] += weights[k] * vs[k][j];
        }
    }
    match head {
        BruteHead::Linear { w, b } => (0..b.len())
            .map(|c| b[c] + (0..d).map(|j| w[j][c] * big_v[j]).sum::<f64>())
            .collect(),
        BruteHead::Cosine { protos, log_temp } => {
            let nv = big_v.iter().map(|x| x * x).sum::<f64>().sqrt();
            protos
                .iter()
                .map(|p| {
                    let np = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dot: f64 = p.iter().zip(&big_v).map(|(a, b)| a * b).sum();
                    log_temp.exp() * dot / (nv * np)
                })
                .collect()
        }
    }
}

enum BruteHead {
    Linear { w: Vec<Vec<f64>>, b: Vec<f64> },
    Cosine { protos: Vec<Vec<f64>>, log_temp: f64 },
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let t = rng.random_range(1..=5);
        let d = rng.random_range(1..=3);
        let k = rng.random_range(1..=2);
        let soft = seed % 2 == 1;
        let cosine = seed % 4 >= 2;
        let config = ModelConfig {
            attention: AttentionKind::Clta,
            k,
            beta: [1e1, 1e2, 1e3][seed as usize % 3],
            z: 5,
            dim: d,
            num_classes: 3,
            fusion: if soft { FusionMode::SoftWeight } else { FusionMode::Average },
            classifier: if cosine { ClassifierKind::Cosine } else { ClassifierKind::Softmax },
            hidden: 0,
            projection_stage: ProjectionStage::Post,
            batch_norm: false,
        };
        let mut model = Model::new(config.clone(), &mut rng).unwrap();
        for (_, p) in model.params_mut() {
            for x in p.as_mut_slice() {
                *x = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let frames = gaussian(&mut rng, t, d, 1.0);
        let seq = FrameSequence::new(frames.clone(), None, "o").unwrap();
        let (logits, _) = model.forward(&seq).unwrap();

        let ps = model.param_set();
        let get = |n: &str| ps.get(n).unwrap().clone();
        let head = if cosine {
            BruteHead::Cosine {
                protos: rows_of(&get("head.proto")),
                log_temp: get("head.log_temperature").get(0, 0),
            }
        } else {
            BruteHead::Linear {
                w: rows_of(&get("head.w")),
                b: get("head.b").row(0).to_vec(),
            }
        };
        let fl = soft.then(|| get("fusion.logits").as_slice().to_vec());
        let expect = brute_force_logits(
            &rows_of(&frames),
            &rows_of(&get("attn.w_mean")),
            &rows_of(&get("attn.w_std")),
            config.beta,
            config.z as f64,
            fl.as_deref(),
            &head,
        );
        for (a, b) in logits.iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
    }
    let (fast, time) = within_time(start, Duration::from_secs(5));
    verdict(worst <= 1e-10 && fast, format!("max |diff| {worst:.1e} over 20 instances, {time}"))
}

fn in_ci(s: &EvalSummary, target: f64) -> bool {
    (s.mean_acc - target).abs() <= s.ci95 + 1e-12
}

fn harness_envelope() -> Verdict {
    let start = Instant::now();
    let spec = EpisodeSpec {
        n_way: 5,
        k_shot: 1,
        num_episodes: 600,
        seed: 5,
        ..EpisodeSpec::default()
    };
    // Untrained model on pure-noise videos.
    let noise = generate(&SynthConfig {
        num_classes: 20,
        videos_per_class: 10,
        signal_amp: 0.0,
        train_frac: 0.5,
        val_frac: 0.0,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let opts = ModelOptions::default();
    let model = Model::new(opts.config(noise.dim().unwrap(), 10, noise.max_len()), &mut rng).unwrap();
    let chance = evaluate(&model, &noise, &spec).unwrap();

    // Separable descriptors: one well-separated direction per class.
    let (classes, per) = (10, 6);
    let mut embs = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for _ in 0..per {
            let mut v = vec![0.0; classes];
            v[c] = 5.0;
            embs.push(v);
            labels.push(c);
        }
    }
    let ceiling = run_episodes_on_embeddings(&embs, &labels, ClassifierKind::Softmax, &spec).unwrap();
    let (fast, time) = within_time(start, Duration::from_secs(120));
    verdict(
        in_ci(&chance, 0.2) && in_ci(&ceiling, 1.0) && fast,
        format!(
            "random {:.3} ± {:.3}, separable {:.3} ± {:.3}, {time}",
            chance.mean_acc, chance.ci95, ceiling.mean_acc, ceiling.ci95
        ),
    )
}

fn synth(mode: SynthMode) -> Dataset {
    generate(&SynthConfig {
        signal_amp: SYNTH_AMP,
        mode,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset
}

fn eval_spec() -> EpisodeSpec {
    EpisodeSpec {
        num_episodes: 600,
        ..EpisodeSpec::default()
    }
}

fn train_and_eval(ds: &Dataset, attention: AttentionKind) -> EvalSummary {
    let opts = ModelOptions {
        attention,
        ..ModelOptions::default()
    };
    let spec = eval_spec();
    let val = validation_spec(&spec, VAL_EPISODES);
    let trained = train_model(ds, &opts, &TrainConfig::default(), Some(&val)).unwrap();
    evaluate(&trained.model, ds, &spec).unwrap()
}

fn fmt(s: &EvalSummary) -> String {
    format!("{:.3}±{:.3}", s.mean_acc, s.ci95)
}

fn beats(a: &EvalSummary, b: &EvalSummary) -> bool {
    a.mean_acc - b.mean_acc >= 0.05 && a.mean_acc - a.ci95 > b.mean_acc + b.ci95
}

fn directional_comparison() -> Verdict {
    let start = Instant::now();
    let kinds = [AttentionKind::Clta, AttentionKind::Tsf, AttentionKind::Sldg, AttentionKind::Average];
    let shifted = synth(SynthMode::InstanceShifted);
    let s: Vec<EvalSummary> = kinds.iter().map(|&k| train_and_eval(&shifted, k)).collect();
    let fixed = synth(SynthMode::FixedPosition);
    let f: Vec<EvalSummary> = kinds[..3].iter().map(|&k| train_and_eval(&fixed, k)).collect();

    let band = (0.45..=0.65).contains(&s[3].mean_acc);
    let shifted_ok = beats(&s[0], &s[1]) && beats(&s[0], &s[2]) && beats(&s[0], &s[3]);
    let fixed_ok = (f[0].mean_acc - f[1].mean_acc).abs() <= 0.03 && (f[0].mean_acc - f[2].mean_acc).abs() <= 0.03;
    let (fast, time) = within_time(start, Duration::from_secs(15 * 60));
    verdict(
        band && shifted_ok && fixed_ok && fast,
        format!(
            "shifted clta {} tsf {} sldg {} avg {} (avg in band: {band}); fixed clta {} tsf {} sldg {}, {time}",
            fmt(&s[0]),
            fmt(&s[1]),
            fmt(&s[2]),
            fmt(&s[3]),
            fmt(&f[0]),
            fmt(&f[1]),
            fmt(&f[2])
        ),
    )
}

fn ablation_shape() -> Verdict {
    let start = Instant::now();
    let ds = synth(SynthMode::InstanceShifted);
    let spec = eval_spec();
    let val = validation_spec(&spec, VAL_EPISODES);
    let rows = ablate(
        &ds,
        &ModelOptions::default(),
        &[Sweep::K, Sweep::Beta],
        &TrainConfig::default(),
        Some(&val),
        &spec,
    )
    .unwrap();
    let acc = |sweep: Sweep, value: &str| {
        rows.iter()
            .find(|r| r.sweep == sweep && r.value == value)
            .map(|r| r.summary.mean_acc)
            .unwrap()
    };
    let ks = [acc(Sweep::K, "3"), acc(Sweep::K, "6"), acc(Sweep::K, "9")];
    let best = ks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let k_ok = ks[1] >= best - 0.02;
    let (b1, b2, b3) = (acc(Sweep::Beta, "1e1"), acc(Sweep::Beta, "1e2"), acc(Sweep::Beta, "1e3"));
    let beta_ok = b3 - b1 > 0.01;
    let (fast, time) = within_time(start, Duration::from_secs(30 * 60));
    verdict(
        k_ok && beta_ok && fast,
        format!(
            "K 3/6/9 {:.3}/{:.3}/{:.3} (K=6 ok: {k_ok}); beta 1e1/1e2/1e3 {b1:.3}/{b2:.3}/{b3:.3} (ok: {beta_ok}), {time}",
            ks[0], ks[1], ks[2]
        ),
    )
}

fn clta(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().expect("run clta")
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    matches!((fs::read(a), fs::read(b)), (Ok(x), Ok(y)) if x == y)
}

fn same_tree(a: &Path, b: &Path) -> bool {
    let list = |p: &Path| {
        let mut v: Vec<_> = fs::read_dir(p).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let (la, lb) = (list(a), list(b));
    la == lb && la.iter().all(|n| same_bytes(&a.join(n), &b.join(n)))
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut mismatches = Vec::new();
    let mut failures = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let d = |s: &str| dir.join(s).to_string_lossy().into_owned();
        let steps: Vec<Vec<String>> = vec![
            vec!["gen".into(), "--out".into(), d("data"), "--classes".into(), "30".into(), "--videos-per-class".into(), "8".into(), "--seed".into(), "11".into()],
            vec!["train".into(), "--data".into(), d("data/manifest.csv"), "--out".into(), d("m.ckpt"), "--epochs".into(), "3".into(), "--val-episodes".into(), "20".into(), "--seed".into(), "11".into(), "--deterministic-output".into()],
            vec!["eval".into(), "--data".into(), d("data/manifest.csv"), "--checkpoint".into(), d("m.ckpt"), "--episodes".into(), "50".into(), "--out".into(), d("eval.csv"), "--seed".into(), "11".into(), "--deterministic-output".into()],
            vec!["ablate".into(), "--data".into(), d("data/manifest.csv"), "--sweep".into(), "fusion".into(), "--epochs".into(), "2".into(), "--val-episodes".into(), "10".into(), "--episodes".into(), "20".into(), "--out".into(), d("ablate.csv"), "--seed".into(), "11".into(), "--deterministic-output".into()],
            vec!["dump-attention".into(), "--data".into(), d("data/manifest.csv"), "--checkpoint".into(), d("m.ckpt"), "--out-dir".into(), d("attn"), "--limit".into(), "5".into(), "--deterministic-output".into()],
        ];
        for s in &steps {
            let args: Vec<&str> = s.iter().map(String::as_str).collect();
            let out = clta(&args);
            if !out.status.success() {
                failures.push(format!("{} exited {:?}", s[0], out.status.code()));
            }
        }
        let out = clta(&["gradcheck", "--seed", "11"]);
        fs::write(dir.join("gradcheck.txt"), out.stdout).unwrap();
    }
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for f in ["m.ckpt", "m.ckpt.labels", "m.ckpt.log.csv", "eval.csv", "ablate.csv", "gradcheck.txt", "data/manifest.csv"] {
        if !same_bytes(&a.join(f), &b.join(f)) {
            mismatches.push(f.to_string());
        }
    }
    for dir in ["data/features", "attn"] {
        if !same_tree(&a.join(dir), &b.join(dir)) {
            mismatches.push(dir.to_string());
        }
    }
    let pass = failures.is_empty() && mismatches.is_empty();
    let detail = if pass {
        "gen, train, eval, ablate, dump-attention and gradcheck outputs byte-identical".to_string()
    } else {
        format!("failures {failures:?}, differing {mismatches:?}")
    };
    verdict(pass, detail)
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("CLTA_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("CLTA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [(usize, &str, fn() -> Verdict); 8] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "normalization and range", normalization_and_range),
        (3, "soft-argmax fidelity", soft_argmax_fidelity),
        (4, "oracle equivalence", oracle_equivalence),
        (5, "harness envelope", harness_envelope),
        (6, "shifted vs fixed comparison", directional_comparison),
        (7, "ablation shape", ablation_shape),
        (8, "determinism", determinism),
    ];
    let mut passed = 0;
    let mut ran = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        ran += 1;
        let v = f();
        if v.pass {
            passed += 1;
        }
        println!("criterion {id} {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {passed}/{ran} criteria passed");
    if strict && passed < ran {
        std::process::exit(1);
    }
}
