//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use cssda::checkpoint::{encode_checkpoint, save_checkpoint};
use cssda::cli::{run_arm, ArmResult};
use cssda::data::{batch_iter, split_scheme, synth_clusters, synth_with_holdout, Dataset, SynthParams};
use cssda::error::Error;
use cssda::evaluation::{
    balanced_accuracy_binary, confusion, emit_report, evaluate, macro_metrics, roc_auc, ReportFormat,
};
use cssda::losses::{d_unsup_derived, d_unsup_naive, g_unsup_derived, g_unsup_naive};
use cssda::model::{Cssda, ModelShape};
use cssda::training::{
    discriminator_objective, generator_objective, train_run, BatchNoise, GeneratorTerms, Mode, StepInputs, Terms,
    TrainingConfig,
};

struct Verdict {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(name: &'static str, passed: bool, detail: String) -> Verdict {
    Verdict { name, passed, detail }
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn loss_equivalence() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=10);
        let mut rows = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..k).map(|_| rng.random_range(-30.0..=30.0)).collect()).collect()
        };
        let (real, fake) = (rows(1 + (k % 7)), rows(1 + (k % 5)));
        let pairs = [
            (d_unsup_derived(&real, &fake), d_unsup_naive(&real, &fake)),
            (g_unsup_derived(&fake), g_unsup_naive(&fake)),
        ];
        for (derived, naive) in pairs {
            match (derived, naive) {
                (Ok(d), Ok(n)) => worst = worst.max(relative_gap(d, n)),
                _ => failures += 1,
            }
        }
    }
    let elapsed = started.elapsed();
    verdict(
        "derived and naive unsupervised losses agree",
        failures == 0 && worst <= 1e-9 && elapsed < Duration::from_secs(5),
        format!("1000 batches, worst relative gap {worst:.2e}, errors {failures}, {elapsed:.2?}"),
    )
}

fn tiny_data(seed: u64) -> Dataset {
    let p = SynthParams {
        k: 3,
        dim: 8,
        per_class: 6,
        separation: 4.0,
        noise_sd: 1.0,
        seed,
    };
    split_scheme(&synth_clusters(&p).unwrap(), 0.5, seed).unwrap()
}

/// Central-difference check of all four training losses for one seed.
/// Returns the worst violation ratio (≤ 1 passes).
fn gradient_case(seed: u64) -> f64 {
    let data = tiny_data(seed);
    let batch = batch_iter(&data, 12, seed, 0).unwrap().remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Cssda::init(ModelShape::conditional(8, 4, 3), 0.2, 0.1, &mut rng).unwrap();
    let spread = Normal::new(0.0, 0.5).unwrap();
    for p in model.tensors_mut() {
        p.values.iter_mut().for_each(|v| *v = spread.sample(&mut rng));
    }
    let inputs = StepInputs::new(&data, &batch, Mode::Full);
    let noise: BatchNoise = inputs.draw_noise(&model, 0, &mut rng);
    let objective = |which: usize, m: &mut Cssda| -> f64 {
        m.zero_grad();
        let d = |supervised, unsupervised| Terms { supervised, unsupervised };
        let g = |feature_match, unsupervised| GeneratorTerms { feature_match, unsupervised };
        match which {
            0 => discriminator_objective(m, &inputs, &noise, d(true, false)).unwrap().0,
            1 => discriminator_objective(m, &inputs, &noise, d(false, true)).unwrap().1,
            2 => generator_objective(m, &inputs, &noise, g(true, false)).unwrap().unwrap().0,
            _ => generator_objective(m, &inputs, &noise, g(false, true)).unwrap().unwrap().1,
        }
    };
    let mut worst = 0.0f64;
    for which in 0..4 {
        let mut analytic = model.clone();
        objective(which, &mut analytic);
        // discriminator losses train D and the table, generator losses train G
        let tensors = if which < 2 { 4..9 } else { 0..4 };
        for t in tensors {
            for j in 0..model.tensors()[t].values.len() {
                let probe = |delta: f64| {
                    let mut m = model.clone();
                    m.tensors_mut()[t].values[j] += delta;
                    objective(which, &mut m)
                };
                let h = 1e-5;
                let numeric = (probe(h) - probe(-h)) / (2.0 * h);
                let a = analytic.tensors()[t].grad[j];
                let allowed = (1e-4 * a.abs().max(numeric.abs())).max(1e-6);
                worst = worst.max((a - numeric).abs() / allowed);
            }
        }
    }
    worst
}

fn gradient_suite() -> Verdict {
    let started = Instant::now();
    let worst = (0..100).map(gradient_case).fold(0.0, f64::max);
    let elapsed = started.elapsed();
    verdict(
        "analytic gradients match finite differences",
        worst <= 1.0 && elapsed < Duration::from_secs(30),
        format!("100 cases, dim 8 / hidden 4 / k 3, worst error {worst:.2e} of tolerance, {elapsed:.2?}"),
    )
}

fn stability_contrast() -> Verdict {
    let huge: Vec<Vec<f64>> = vec![vec![1e4, -1e4, 0.0], vec![-1e4, -1e4, -1e4], vec![1e4, 1e4, 1e4]];
    let derived_finite = d_unsup_derived(&huge, &huge).is_ok_and(f64::is_finite)
        && g_unsup_derived(&huge).is_ok_and(f64::is_finite);
    let moderate = vec![vec![700.0, 0.0, -5.0]];
    let naive_ok_below = d_unsup_naive(&moderate, &moderate).is_ok() && g_unsup_naive(&moderate).is_ok();
    let overflow_at = [710.0, 1e3, 1e4].iter().all(|&x| {
        let logits = vec![vec![x, 0.0, 0.0]];
        matches!(d_unsup_naive(&logits, &logits), Err(Error::Numeric(_)))
            && matches!(g_unsup_naive(&logits), Err(Error::Numeric(_)))
    });
    verdict(
        "derived losses survive extreme logits, naive ones overflow",
        derived_finite && naive_ok_below && overflow_at,
        format!(
            "derived finite at |l| = 1e4: {derived_finite}; naive fine at 700: {naive_ok_below}; \
             naive numeric error at 710, 1e3, 1e4: {overflow_at}"
        ),
    )
}

/// Per-class precision/recall/F straight from the label lists.
fn brute_force_metrics(truth: &[usize], predicted: &[usize], k: usize) -> (Vec<[f64; 3]>, f64, f64) {
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<[f64; 3]> = (0..k)
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&t, &p) in truth.iter().zip(predicted) {
                match (t == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
            let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            [p, r, f]
        })
        .collect();
    let recall = per_class.iter().map(|m| m[1]).sum::<f64>() / k as f64;
    let f = per_class.iter().map(|m| m[2]).sum::<f64>() / k as f64;
    (per_class, recall, f)
}

/// Fraction of (positive, negative) pairs won by the positive, ties half.
fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut doubled_wins, mut pairs) = (0u128, 0u128);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if !positive[i] || positive[j] {
                continue;
            }
            pairs += 1;
            doubled_wins += if si > sj { 2 } else if si == sj { 1 } else { 0 };
        }
    }
    (pairs > 0).then(|| doubled_wins as f64 / (2 * pairs) as f64)
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    for _ in 0..500 {
        let k = rng.random_range(2..=6);
        let n = rng.random_range(1..=60);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let predicted: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let m = macro_metrics(&confusion(&truth, &predicted, k).unwrap()).unwrap();
        let (oracle, recall, f) = brute_force_metrics(&truth, &predicted, k);
        let same = m.per_class.iter().zip(&oracle).all(|(c, o)| [c.precision, c.recall, c.f_score] == *o)
            && m.balanced_accuracy == recall
            && m.macro_f_score == f;
        // coarse integer scores so ties are common
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<u32> = (0..k).map(|_| rng.random_range(0..4)).collect();
                let total: u32 = raw.iter().sum();
                if total == 0 {
                    vec![1.0 / k as f64; k]
                } else {
                    raw.iter().map(|&r| r as f64 / total as f64).collect()
                }
            })
            .collect();
        let rocs = roc_auc(&scores, &truth).unwrap();
        let auc_same = (0..k).all(|c| {
            let class_scores: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            rocs[c].auc == pairwise_auc(&class_scores, &positive)
        });
        if !(same && auc_same) {
            mismatches += 1;
        }
    }
    let binary = balanced_accuracy_binary(8, 2, 5, 5);
    verdict(
        "metrics match brute-force oracles",
        mismatches == 0 && binary == 0.65,
        format!("500 random cases, {mismatches} mismatches; binary example TP=8 FN=2 TN=5 FP=5 -> {binary}"),
    )
}

/// 3 clusters (dim 64, separation 10, sd 1): a 500-sample training pool and
/// a 600-sample held-out test set.
fn benchmark_data() -> (Dataset, Dataset) {
    let params = SynthParams {
        k: 3,
        dim: 64,
        per_class: 200,
        separation: 10.0,
        noise_sd: 1.0,
        seed: 7,
    };
    let (train, test) = synth_with_holdout(&params, 200).unwrap();
    (train.subsample(500, 7).unwrap(), test.unwrap())
}

fn benchmark_config(mode: Mode, labeled_fraction: f64) -> TrainingConfig {
    TrainingConfig {
        batch_size: 32,
        epochs: 50,
        lr_d: 1e-3,
        lr_g: 1e-3,
        labeled_fraction,
        mode,
        ..TrainingConfig::default()
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn fmt_scores(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

fn end_to_end(train: &Dataset, test: &Dataset) -> (Verdict, ArmResult) {
    let started = Instant::now();
    // 0.1 of the 500-sample pool: 50 labeled, 450 unlabeled
    let full = run_arm(train, test, &benchmark_config(Mode::Full, 0.1), &SEEDS).unwrap();
    let baseline = run_arm(train, test, &benchmark_config(Mode::NoAugment, 0.1), &SEEDS).unwrap();
    let elapsed = started.elapsed();
    let floor = full.balanced_accuracy.iter().copied().fold(f64::INFINITY, f64::min);
    let (m_full, m_base) = (full.median_balanced_accuracy(), baseline.median_balanced_accuracy());
    let v = verdict(
        "synthetic benchmark: full reaches 0.90 and keeps up with no-augment",
        floor >= 0.90 && m_full >= m_base - 0.02 && elapsed < Duration::from_secs(120),
        format!(
            "full [{}] median {m_full:.3}; no-augment [{}] median {m_base:.3}; {elapsed:.2?}",
            fmt_scores(&full.balanced_accuracy),
            fmt_scores(&baseline.balanced_accuracy)
        ),
    );
    (v, full)
}

fn ratio_sweep(train: &Dataset, test: &Dataset) -> Verdict {
    let medians: Vec<f64> = [0.25, 0.5, 0.75]
        .iter()
        .map(|&f| run_arm(train, test, &benchmark_config(Mode::Full, f), &SEEDS).unwrap().median_balanced_accuracy())
        .collect();
    let monotone = medians.windows(2).all(|w| w[1] >= w[0] - 0.03);
    verdict(
        "balanced accuracy is non-decreasing in labeled fraction",
        monotone,
        format!("medians at 0.25 / 0.5 / 0.75: {}", fmt_scores(&medians)),
    )
}

fn roc_criterion(train: &Dataset, test: &Dataset) -> Verdict {
    let mut lowest = f64::INFINITY;
    let mut undefined = 0;
    for &seed in &SEEDS {
        let config = TrainingConfig { seed, ..benchmark_config(Mode::Full, 0.1) };
        let split = split_scheme(train, 0.1, seed).unwrap();
        let (trained, _) = train_run(&split, &config).unwrap();
        let report = evaluate(&trained.model, test, trained.route).unwrap();
        for auc in &report.auc {
            match auc {
                Some(a) => lowest = lowest.min(*a),
                None => undefined += 1,
            }
        }
    }
    verdict(
        "every per-class AUC on the synthetic benchmark is at least 0.95",
        undefined == 0 && lowest >= 0.95,
        format!("lowest AUC over 3 classes x 5 seeds: {lowest:.4}"),
    )
}

fn determinism(train: &Dataset, test: &Dataset) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainingConfig { seed: 17, epochs: 5, ..benchmark_config(Mode::Full, 0.25) };
    let mut files = Vec::new();
    for run in 0..2 {
        let split = split_scheme(train, config.labeled_fraction, config.seed).unwrap();
        let (trained, _) = train_run(&split, &config).unwrap();
        let ckpt = dir.path().join(format!("{run}.ckpt"));
        let report = dir.path().join(format!("{run}.json"));
        save_checkpoint(&trained, &ckpt).unwrap();
        emit_report(&evaluate(&trained.model, test, trained.route).unwrap(), &report, ReportFormat::Json).unwrap();
        files.push((std::fs::read(ckpt).unwrap(), std::fs::read(report).unwrap(), encode_checkpoint(&trained.model).unwrap()));
    }
    let same_ckpt = files[0].0 == files[1].0 && files[0].2 == files[1].2;
    let same_report = files[0].1 == files[1].1;
    verdict(
        "identical config and seed give byte-identical checkpoints and reports",
        same_ckpt && same_report,
        format!("checkpoints identical: {same_ckpt} ({} bytes); reports identical: {same_report}", files[0].0.len()),
    )
}

fn main() {
    let started = Instant::now();
    let (train, test) = benchmark_data();
    let mut verdicts = vec![loss_equivalence(), gradient_suite(), stability_contrast(), metric_oracles()];
    let (e2e, _) = end_to_end(&train, &test);
    verdicts.push(e2e);
    verdicts.push(ratio_sweep(&train, &test));
    verdicts.push(roc_criterion(&train, &test));
    verdicts.push(determinism(&train, &test));

    println!("\nacceptance criteria");
    for v in &verdicts {
        println!("{} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    let failed = verdicts.iter().filter(|v| !v.passed).count();
    println!("{} of {} criteria passed in {:.1?}", verdicts.len() - failed, verdicts.len(), started.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
