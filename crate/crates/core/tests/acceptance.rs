//! Acceptance criteria. Every test prints one `PASS`/`FAIL` line naming its
//! criterion before asserting. The trained-model criteria share one set of
//! training runs (3 seeds, probabilistic and deterministic, fold 0).

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

use rand::Rng;

use protoseg::data::{build_splits, DatasetHandle, SplitConfig};
use protoseg::evaluation::{
    binary_iou, class_mean_iou, confusion_counts, episode_iou, evaluate, fold_summary, positive_iou,
    ConfusionCounts, EvalConfig, MetricReport,
};
use protoseg::inference::{aggregate_priors, Aggregation, InferenceConfig};
use protoseg::math::{kl_diag_gauss, reparameterize, BinaryMask, DiagonalGaussian};
use protoseg::model::{Model, ModelConfig};
use protoseg::rng;
use protoseg::training::{
    elbo_loss, load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig, TrainIo,
};
use protoseg::Error;

const SEEDS: [u64; 3] = [0, 1, 2];
const EPISODES: usize = 200;
const EFFICACY_THRESHOLD: f64 = 0.55;

// Written to the raw stderr handle so the line shows up without --nocapture.
fn report(criterion: &str, pass: bool, detail: &str) {
    let line = format!("{} {criterion}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::Write::write_all(&mut std::io::stderr(), line.as_bytes());
    assert!(pass, "{criterion}: {detail}");
}

// ---------------------------------------------------------------------------
// Shared experiment

struct Experiment {
    ds: DatasetHandle,
    split: SplitConfig,
    probabilistic: Vec<Model>,
    deterministic: Vec<Model>,
    reports: Mutex<BTreeMap<String, MetricReport>>,
}

fn experiment_train_config(seed: u64, deterministic: bool) -> TrainConfig {
    TrainConfig {
        seed,
        deterministic,
        ..TrainConfig::default()
    }
}

fn experiment() -> &'static Experiment {
    static EXP: OnceLock<Experiment> = OnceLock::new();
    EXP.get_or_init(|| {
        let cfg = ModelConfig::default();
        let ds = DatasetHandle::default_synthetic_sized(cfg.image_height, cfg.image_width).unwrap();
        let split = build_splits(&ds.class_ids(), 4, 0).unwrap();
        let run = |seed: u64, det: bool| {
            let tc = experiment_train_config(seed, det);
            let model = Model::init(cfg.clone(), seed).unwrap();
            train(model, &ds, &split, &tc, TrainIo::default()).unwrap().model
        };
        let probabilistic = SEEDS.iter().map(|&s| run(s, false)).collect();
        let deterministic = SEEDS.iter().map(|&s| run(s, true)).collect();
        Experiment {
            ds,
            split,
            probabilistic,
            deterministic,
            reports: Mutex::new(BTreeMap::new()),
        }
    })
}

impl Experiment {
    /// Cached held-out evaluation of seed `i` with `L = M = samples`.
    fn eval(&self, i: usize, deterministic: bool, k: usize, samples: usize) -> MetricReport {
        let key = format!("{i}/{deterministic}/{k}/{samples}");
        if let Some(r) = self.reports.lock().unwrap().get(&key) {
            return r.clone();
        }
        let model = if deterministic {
            &self.deterministic[i]
        } else {
            &self.probabilistic[i]
        };
        let cfg = EvalConfig {
            k_shot: k,
            episodes: EPISODES,
            seed: SEEDS[i],
            inference: InferenceConfig {
                samples_l: samples,
                samples_m: samples,
                ..InferenceConfig::default()
            },
        };
        let r = evaluate(model, &self.ds, &self.split, &cfg).unwrap();
        println!(
            "  seed {} {} k={k} L=M={samples}: Class-IoU {:.4} Binary-IoU {:.4} Positive-IoU {:.4}",
            SEEDS[i], r.mode, r.class_mean_iou, r.binary_iou, r.positive_iou
        );
        self.reports.lock().unwrap().insert(key, r.clone());
        r
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// Numerical criteria

#[test]
fn kl_matches_monte_carlo() {
    let mut r = rng::stream(11, 0);
    let samples = 100_000;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut gaussian = || {
            let mean: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
            let log_var: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
            DiagonalGaussian::new(mean, log_var).unwrap()
        };
        let q = gaussian();
        let p = gaussian();
        let exact = kl_diag_gauss(&q, &p).unwrap();
        let mut noise = rng::stream(r.random(), 1);
        let mut total = 0.0;
        for _ in 0..samples {
            let x = reparameterize(&q, &rng::standard_normal_vec(&mut noise, 8)).unwrap();
            total += q.log_pdf(&x.values) - p.log_pdf(&x.values);
        }
        let estimate = total / samples as f64;
        worst = worst.max((estimate - exact).abs() / exact);
    }
    report("KL correctness", worst < 0.02, &format!("worst relative error {worst:.5} over 100 pairs"));
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let model = Model::init(cfg.clone(), 3).unwrap();
    let ds = DatasetHandle::default_synthetic_sized(cfg.image_height, cfg.image_width).unwrap();
    let split = build_splits(&ds.class_ids(), 4, 0).unwrap();
    let tc = TrainConfig {
        k_shot: 2,
        augment: None,
        ..TrainConfig::default()
    };
    let episode = protoseg::training::training_episode(&ds, &split, &tc, 0).unwrap().episode;
    let nz = [0.3, -1.1, 0.5, 0.2];
    let nm = [-0.4, 0.8, 0.1, -0.6];
    let loss = |m: &Model, grads: bool| {
        let mut s = m.session();
        let f = s
            .forward_train(&episode, protoseg::model::LatentSource::Posterior, nz.to_vec(), nm.to_vec())
            .unwrap();
        let (total, b) = elbo_loss(&mut s, &f, &episode.query.mask, 1.0, 1.0);
        let g = grads.then(|| {
            let mut g = s.tape.backward(total);
            s.parameter_gradients(&mut g)
        });
        (b.total, g)
    };
    let analytic = loss(&model, true).1.unwrap();
    let h = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    for (name, grad) in analytic.iter() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in 0..grad.len() {
            let mut plus = model.clone();
            plus.params.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = model.clone();
            minus.params.get_mut(name).unwrap().data_mut()[i] -= h;
            let numeric = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * h);
            diff += (numeric - grad.data()[i]).powi(2);
            nn += numeric * numeric;
            na += grad.data()[i].powi(2);
        }
        let rel = diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-12);
        if rel >= worst.0 {
            worst = (rel, name.clone());
        }
    }
    report(
        "Gradient fidelity",
        worst.0 < 1e-3,
        &format!("{} arrays, worst relative error {:.2e} ({})", analytic.len(), worst.0, worst.1),
    );
}

#[test]
fn reparameterized_draws_match_their_gaussian() {
    let g = DiagonalGaussian::new(vec![0.5, -1.0, 2.0, 0.0], vec![0.0, -2.0, 1.0, 0.5]).unwrap();
    let n = 100_000;
    let mut noise = rng::stream(21, 0);
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|_| reparameterize(&g, &rng::standard_normal_vec(&mut noise, 4)).unwrap().values)
        .collect();
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for d in 0..4 {
        let var = g.variance()[d];
        let m = draws.iter().map(|x| x[d]).sum::<f64>() / n as f64;
        let v = draws.iter().map(|x| (x[d] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (var / n as f64).sqrt();
        let se_var = var * (2.0 / (n - 1) as f64).sqrt();
        let z = ((m - g.mean()[d]).abs() / se_mean).max((v - var).abs() / se_var);
        worst = worst.max(z);
        ok &= z < 3.0;
    }
    report("Reparameterization statistics", ok, &format!("largest deviation {worst:.2} standard errors"));
}

fn oracle_counts(pred: &[u8], gt: &[u8]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for y in 0..8 {
        for x in 0..8 {
            match (pred[y * 8 + x], gt[y * 8 + x]) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
    }
    c
}

fn oracle_iou(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp + fn_) as f64
    }
}

#[test]
fn metrics_match_nested_loop_oracles() {
    let mut r = rng::stream(31, 0);
    let mut mismatches = 0;
    let mut per_class: BTreeMap<usize, ConfusionCounts> = BTreeMap::new();
    let mut oracle_class: BTreeMap<usize, (u64, u64, u64)> = BTreeMap::new();
    let (mut fg, mut episode_scores, mut oracle_scores) = (ConfusionCounts::default(), Vec::new(), Vec::new());
    for i in 0..1000 {
        let density = r.random_range(0.0..1.0);
        let pred: Vec<u8> = (0..64).map(|_| u8::from(r.random_bool(density))).collect();
        let gt: Vec<u8> = (0..64).map(|_| u8::from(r.random_bool(density))).collect();
        let c = confusion_counts(
            &BinaryMask::new(8, 8, pred.clone()).unwrap(),
            &BinaryMask::new(8, 8, gt.clone()).unwrap(),
        )
        .unwrap();
        let o = oracle_counts(&pred, &gt);
        mismatches += usize::from(c != o);
        let class = i % 5;
        per_class.entry(class).or_default().add(&c);
        let e = oracle_class.entry(class).or_default();
        *e = (e.0 + o.tp, e.1 + o.fp, e.2 + o.fn_);
        fg.add(&c);
        episode_scores.push(episode_iou(&c));
        oracle_scores.push(oracle_iou(o.tp, o.fp, o.fn_));
    }
    let class_score = class_mean_iou(&per_class).unwrap().0;
    let oracle_class_score =
        oracle_class.values().map(|&(tp, fp, fn_)| oracle_iou(tp, fp, fn_)).sum::<f64>() / oracle_class.len() as f64;
    let (tp, fp, fn_, tn) = (fg.tp, fg.fp, fg.fn_, fg.tn);
    let oracle_binary = (oracle_iou(tp, fp, fn_) + oracle_iou(tn, fn_, fp)) / 2.0;
    let oracle_positive = oracle_scores.iter().sum::<f64>() / oracle_scores.len() as f64;
    let exact = mismatches == 0
        && class_score == oracle_class_score
        && binary_iou(&fg, &fg.swapped()) == oracle_binary
        && positive_iou(&episode_scores).unwrap() == oracle_positive;
    report(
        "Metric oracle equivalence",
        exact,
        &format!("1000 random 8x8 pairs, {mismatches} count mismatches"),
    );
}

#[test]
fn train_then_eval_is_bitwise_reproducible() {
    let cfg = ModelConfig::default();
    let ds = DatasetHandle::default_synthetic_sized(cfg.image_height, cfg.image_width).unwrap();
    let split = build_splits(&ds.class_ids(), 4, 0).unwrap();
    let tc = TrainConfig {
        iterations: 20,
        seed: 5,
        ..TrainConfig::default()
    };
    let ec = EvalConfig {
        episodes: 20,
        seed: 5,
        inference: InferenceConfig {
            samples_l: 3,
            samples_m: 3,
            ..InferenceConfig::default()
        },
        ..EvalConfig::default()
    };
    let run = || {
        let model = Model::init(cfg.clone(), 5).unwrap();
        let out = train(model, &ds, &split, &tc, TrainIo::default()).unwrap();
        let bytes = Checkpoint::capture(&out.model, &out.adam, tc.iterations, &tc).to_bytes().unwrap();
        let r = evaluate(&out.model, &ds, &split, &ec).unwrap();
        (bytes, r)
    };
    let (a_bytes, a) = run();
    let (b_bytes, b) = run();
    let same = a_bytes == b_bytes
        && a.same_scores(&b)
        && a.class_mean_iou.to_bits() == b.class_mean_iou.to_bits()
        && a.binary_iou.to_bits() == b.binary_iou.to_bits()
        && a.positive_iou.to_bits() == b.positive_iou.to_bits();
    report("Determinism", same, "two train+eval runs give identical checkpoints and metrics");
}

fn injected_report(fold: usize, class_mean_iou: f64) -> MetricReport {
    MetricReport {
        mode: "probabilistic".into(),
        fold,
        k: 1,
        samples_l: 15,
        samples_m: 15,
        episodes: 1000,
        seed: 0,
        deterministic: false,
        attention_enabled: true,
        per_class_iou: BTreeMap::new(),
        class_mean_iou,
        binary_iou: 0.0,
        positive_iou: 0.0,
        wall_clock_s: 0.0,
    }
}

#[test]
fn fold_aggregation_reproduces_the_reported_mean() {
    let reports: Vec<MetricReport> = [54.4, 67.1, 53.8, 54.1]
        .into_iter()
        .enumerate()
        .map(|(f, v)| injected_report(f, v))
        .collect();
    let summary = fold_summary(&reports).unwrap();
    let value = summary[0].class_mean_iou;
    let ok = summary.len() == 1 && (value - 57.35).abs() < 1e-9 && (value - 57.4).abs() <= 0.05 + 1e-9;
    report("Fold mean arithmetic", ok, &format!("fold mean {value:.4}"));
}

#[test]
fn aggregation_identities_hold_exactly() {
    let single = DiagonalGaussian::new(vec![0.25, -1.5, 3.0], vec![-0.7, 0.2, 1.1]).unwrap();
    let k1 = aggregate_priors(std::slice::from_ref(&single), Aggregation::PrecisionWeighted).unwrap();
    let means = [vec![0.5, -1.25, 2.0], vec![1.5, 0.75, -4.0], vec![-0.25, 2.5, 1.0]];
    let log_var = vec![-0.3, 0.6, 1.4];
    let priors: Vec<DiagonalGaussian> = means
        .iter()
        .map(|m| DiagonalGaussian::new(m.clone(), log_var.clone()).unwrap())
        .collect();
    let agg = aggregate_priors(&priors, Aggregation::PrecisionWeighted).unwrap();
    let arithmetic: Vec<f64> = (0..3).map(|d| (means[0][d] + means[1][d] + means[2][d]) / 3.0).collect();
    let ok = k1 == single && agg.mean() == arithmetic.as_slice();
    report("Aggregation identity", ok, "k=1 returns its input; equal variances give the arithmetic mean");
}

#[test]
fn checkpoints_round_trip_and_name_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::tiny();
    let model = Model::init(cfg.clone(), 4).unwrap();
    let ck = Checkpoint::from_model(&model);
    let first = dir.path().join("a.apic");
    let second = dir.path().join("b.apic");
    save_checkpoint(&ck, &first).unwrap();
    save_checkpoint(&load_checkpoint(&first).unwrap(), &second).unwrap();
    let bytes = std::fs::read(&first).unwrap();
    let identical = bytes == std::fs::read(&second).unwrap();

    let mut versioned = bytes.clone();
    versioned[4] = versioned[4].wrapping_add(1);
    let version = Checkpoint::from_bytes(&versioned, &first);

    let truncated = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], &first);

    let other = ModelConfig {
        encoder_channels: vec![3, 5, 4, 4],
        ..cfg.clone()
    };
    let shape = ck.check_config(&other);

    let ok = identical
        && matches!(version, Err(Error::VersionMismatch { .. }))
        && matches!(truncated, Err(Error::Truncated(_)))
        && matches!(shape, Err(Error::ShapeMismatch { .. }));
    report(
        "Checkpoint round-trip",
        ok,
        &format!(
            "byte-identical {identical}; corruptions give {:?} / {:?} / {:?}",
            version.err().map(|e| e.to_string()),
            truncated.err().map(|e| e.to_string()),
            shape.err().map(|e| e.to_string())
        ),
    );
}

// ---------------------------------------------------------------------------
// Trained-model criteria

#[test]
fn training_reaches_the_efficacy_threshold() {
    let exp = experiment();
    let r = exp.eval(0, false, 1, 15);
    report(
        "Training efficacy",
        r.class_mean_iou >= EFFICACY_THRESHOLD,
        &format!(
            "held-out 1-shot Class-IoU {:.4} (threshold {EFFICACY_THRESHOLD})",
            r.class_mean_iou
        ),
    );
}

#[test]
fn probabilistic_model_beats_the_deterministic_baseline() {
    let exp = experiment();
    let prob: Vec<f64> = (0..SEEDS.len()).map(|i| exp.eval(i, false, 1, 15).class_mean_iou).collect();
    let det: Vec<f64> = (0..SEEDS.len()).map(|i| exp.eval(i, true, 1, 1).class_mean_iou).collect();
    let (p, d) = (mean(&prob), mean(&det));
    report(
        "Ablation direction",
        p >= d,
        &format!("probabilistic {p:.4} vs deterministic {d:.4} over {} seeds", SEEDS.len()),
    );
}

#[test]
fn ensemble_size_sweep_is_monotone_within_noise() {
    let exp = experiment();
    let values: Vec<f64> = [1, 5, 10, 15].iter().map(|&l| exp.eval(0, false, 1, l).class_mean_iou).collect();
    let worst_drop = values.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    let ok = worst_drop <= 0.01 && values[3] > values[0];
    report(
        "Ensemble direction",
        ok,
        &format!("Class-IoU at L=M=1,5,10,15: {values:.4?}; largest drop {worst_drop:.4}"),
    );
}

#[test]
fn five_shot_is_no_worse_than_one_shot() {
    let exp = experiment();
    let one: Vec<f64> = (0..SEEDS.len()).map(|i| exp.eval(i, false, 1, 15).class_mean_iou).collect();
    let five: Vec<f64> = (0..SEEDS.len()).map(|i| exp.eval(i, false, 5, 15).class_mean_iou).collect();
    let (a, b) = (mean(&one), mean(&five));
    report(
        "k-shot direction",
        b >= a,
        &format!("5-shot {b:.4} vs 1-shot {a:.4} over {} seeds", SEEDS.len()),
    );
}
