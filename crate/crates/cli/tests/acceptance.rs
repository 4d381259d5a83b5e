//! End-to-end acceptance criteria, run in order by one test so the timed
//! criteria do not compete for the CPU. Each prints one status line.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use diabnet::classifier::{build_cnn, CnnSpec};
use diabnet::data::{binarize_pregnancies, load_pima_csv, split_train_test, Dataset};
use diabnet::sae::{encode_features, mean_latent_l1, train_sae, SaeConfig};
use diabnet::stats::{one_way_anova, tukey_hsd, RunGroup};
use diabnet::tensor::{ops, Rng, Tensor};
use diabnet_cli::commands::{cmd_train, run_seed, ExperimentReport, GroupSummary};
use diabnet_cli::pipeline::{balance, prepare, run};
use diabnet_cli::{Configuration, PipelineConfig};
use support::{
    anova_f_direct, f_tail_by_quadrature, gradient_suite_worst, group_with_moments,
    kl_by_quadrature, GRADIENT_PRIMITIVES,
};

/// Empirical replication claims: the status line is printed at the stated
/// threshold, but a shortfall does not fail the suite.
const REPORTED_ONLY: [usize; 1] = [7];

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Status {
    Pass,
    Warn,
    Fail,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        let status = if ok { Status::Pass } else { Status::Fail };
        Self { status, detail }
    }
}

fn canonical_csv() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/diabetes.csv")
}

fn default_config() -> PipelineConfig {
    PipelineConfig::with_input(canonical_csv())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Bypasses test output capture so the lines show up in normal runs.
fn report(id: usize, title: &str, outcome: &Outcome) {
    let label = match outcome.status {
        Status::Pass => "PASS",
        Status::Warn => "WARN",
        Status::Fail => "FAIL",
    };
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "criterion {id:>2} [{label}] {title}: {}",
        outcome.detail
    )
    .unwrap();
    out.flush().unwrap();
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for name in GRADIENT_PRIMITIVES {
        let e = gradient_suite_worst(name, 20);
        if e > worst.0 || e.is_nan() {
            worst = (e, name);
        }
    }
    let elapsed = start.elapsed();
    Outcome::check(
        worst.0 < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "{} primitives x 20 instances, worst relative error {:.2e} ({}), {:.1} s",
            GRADIENT_PRIMITIVES.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_kl() -> Outcome {
    let mut worst = 0.0f64;
    for mu in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        for sigma in [0.3, 1.0, 3.0] {
            let closed = ops::kl_gaussian_standard(&[mu], &[sigma]).unwrap();
            worst = worst.max((closed - kl_by_quadrature(mu, sigma)).abs());
        }
    }
    Outcome::check(
        worst < 1e-6,
        format!("15 grid points, worst |closed - quadrature| {worst:.2e}"),
    )
}

fn c3_data() -> Outcome {
    let records = load_pima_csv(canonical_csv()).unwrap();
    let data = Dataset::from_records(&binarize_pregnancies(&records));
    let split = split_train_test(&data.labels, 0.9, 0).unwrap();
    let train = data.select(&split.train).class_counts();
    let ok = records.len() == 768
        && data.class_counts() == [500, 268]
        && (split.train.len(), split.test.len()) == (691, 77)
        && train == [449, 242];
    Outcome::check(
        ok,
        format!(
            "{} rows, classes {:?}, split {}/{}, train classes {:?}",
            records.len(),
            data.class_counts(),
            split.train.len(),
            split.test.len(),
            train
        ),
    )
}

fn c4_balancing() -> Outcome {
    let cfg = default_config();
    let data = prepare(&cfg).unwrap();
    let (balanced, rep, _) = balance(&cfg, &data.train, cfg.seed).unwrap();
    let n = data.train.len();
    let real_identical = balanced.features.data()[..n * 8] == *data.train.features.data()
        && balanced.labels[..n] == data.train.labels[..]
        && balanced.synthetic[..n].iter().all(|&s| !s);
    let synth_flagged =
        balanced.synthetic[n..].iter().all(|&s| s) && balanced.labels[n..].iter().all(|&l| l == 1);
    Outcome::check(
        rep.before == [449, 242] && balanced.class_counts() == [449, 484] && real_identical && synth_flagged,
        format!(
            "{:?} -> {:?}, real rows bit-identical: {real_identical}, synthetic rows flagged: {synth_flagged}",
            rep.before,
            balanced.class_counts()
        ),
    )
}

fn c5_shape_chain() -> Outcome {
    let expected = vec![
        vec![20, 20, 1],
        vec![19, 15, 100],
        vec![9, 2, 100],
        vec![1800],
    ];
    let built = build_cnn(&CnnSpec::default(), 0).unwrap();
    let traced = built.shape_chain.clone().unwrap_or_default();
    let formula = CnnSpec::default().expected_shape_chain().unwrap();
    let oversized = CnnSpec {
        pool: (20, 6),
        ..CnnSpec::default()
    };
    let rejects = build_cnn(&oversized, 0).is_err();
    Outcome::check(
        traced == expected && formula == expected && rejects,
        format!("traced {traced:?}, oversized pool rejected: {rejects}"),
    )
}

/// Accuracies of `configuration` over the first five experiment seeds.
fn five_runs(configuration: Configuration) -> (Vec<f64>, Duration) {
    let start = Instant::now();
    let cfg = default_config();
    let data = prepare(&cfg).unwrap();
    let accuracies = (0..5)
        .map(|i| {
            let seed = run_seed(cfg.seed, i);
            let rec = run(&cfg, configuration, seed, &data).unwrap().record;
            let mut out = std::io::stdout().lock();
            writeln!(
                out,
                "    {configuration} seed {seed}: accuracy {:.4} ({}/{}), {:.1} s",
                rec.accuracy,
                rec.confusion.tp + rec.confusion.tn,
                rec.test_rows,
                rec.wall_clock_seconds
            )
            .unwrap();
            rec.accuracy
        })
        .collect();
    (accuracies, start.elapsed())
}

fn c6_end_to_end(flagship: &[f64], elapsed: Duration) -> Outcome {
    let med = median(flagship);
    let baseline = 51.0 / 77.0;
    let above = flagship.iter().filter(|&&a| a > baseline).count();
    Outcome::check(
        med >= 0.70 && elapsed < Duration::from_secs(15 * 60) && above >= 4,
        format!(
            "median {med:.4} (floor 0.70), {above}/5 seeds above the {baseline:.4} majority baseline, {:.1} min",
            elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn c7_directional(flagship: &[f64], staged: &[f64]) -> Outcome {
    let (joint, separate) = (median(flagship), median(staged));
    let status = if joint >= separate {
        Status::Pass
    } else if separate - joint < 0.01 {
        Status::Warn
    } else {
        Status::Fail
    };
    Outcome {
        status,
        detail: format!("median sae_with_cnn {joint:.4} vs sae_cnn {separate:.4}"),
    }
}

fn c8_statistics() -> Outcome {
    let mut rng = Rng::new(808);
    let (mut worst_f, mut worst_p) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let k = 2 + (rng.uniform() * 4.0) as usize;
        let groups: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let n = 3 + (rng.uniform() * 5.0) as usize;
                let centre = rng.uniform_range(-2.0, 2.0);
                (0..n).map(|_| centre + rng.normal()).collect()
            })
            .collect();
        let run_groups: Vec<RunGroup> = groups
            .iter()
            .map(|g| RunGroup::new("g", g.clone()))
            .collect();
        let a = one_way_anova(&run_groups).unwrap();
        let direct = anova_f_direct(&groups);
        worst_f = worst_f.max((a.f - direct).abs() / direct.abs().max(1.0));
        let numeric = f_tail_by_quadrature(a.f, a.df_between as f64, a.df_within as f64);
        worst_p = worst_p.max((a.p - numeric).abs());
    }

    let same = vec![0.80, 0.82, 0.79, 0.81];
    let identical: Vec<RunGroup> = (0..5)
        .map(|i| RunGroup::new(format!("g{i}"), same.clone()))
        .collect();
    let identical_pairs = tukey_hsd(&identical, 0.05).unwrap().significant_count();

    let moments = [
        (Configuration::SaeWithCnn, 92.31, 1.04, 12),
        (Configuration::SaeWithMlp, 85.71, 0.66, 11),
        (Configuration::SaeCnn, 80.52, 0.65, 11),
        (Configuration::SaeMlp, 80.52, 0.65, 11),
        (Configuration::Mlp, 79.22, 0.77, 11),
    ];
    let groups: Vec<GroupSummary> = moments
        .iter()
        .map(|&(configuration, mean, sd, n)| {
            let accuracies = group_with_moments(n, mean, sd, &mut rng);
            let g = RunGroup::new(configuration.name(), accuracies.clone());
            GroupSummary {
                configuration,
                seeds: (0..n).map(|i| run_seed(0, i)).collect(),
                mean: g.mean(),
                sd: g.sd(),
                accuracies,
                failures: Vec::new(),
            }
        })
        .collect();
    let rep = ExperimentReport::from_groups(0, groups).unwrap();
    let tukey = rep.tukey.as_ref().unwrap();
    let top_separated = (1..5).all(|j| tukey.significant(0, j) == Some(true));
    let df_shown = rep.to_text().contains("F(4, 51)");

    Outcome::check(
        worst_f < 1e-10 && worst_p < 1e-6 && identical_pairs == 0 && top_separated && df_shown,
        format!(
            "F rel err {worst_f:.1e}, p err {worst_p:.1e} over 50 sets; identical groups: {identical_pairs} significant pairs; top group separated from all: {top_separated}; report shows F(4, 51): {df_shown}"
        ),
    )
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = default_config();
    cfg.joint_cnn_epochs = 5;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let c = Configuration::SaeWithCnn;
    let first = cmd_train(&cfg, c, 17, &a).unwrap();
    let second = cmd_train(&cfg, c, 17, &b).unwrap();
    let same_accuracy = first.record.accuracy == second.record.accuracy;
    let wa = std::fs::read(&first.weights).unwrap();
    let same_bytes = wa == std::fs::read(&second.weights).unwrap();
    Outcome::check(
        same_accuracy && same_bytes,
        format!(
            "sae_with_cnn (5 epochs) twice: accuracy {} / {}, {} weight bytes identical: {same_bytes}",
            first.record.accuracy,
            second.record.accuracy,
            wa.len()
        ),
    )
}

fn c10_sparsity() -> Outcome {
    let mut rng = Rng::new(12);
    let x = Tensor::new([128, 8], (0..128 * 8).map(|_| rng.uniform()).collect()).unwrap();
    let l1: Vec<f64> = [0.0, 1e-3, 1e-1]
        .iter()
        .map(|&lambda| {
            let cfg = SaeConfig {
                lambda,
                epochs: 150,
                seed: 3,
                ..SaeConfig::default()
            };
            let (model, _) = train_sae(&x, &cfg).unwrap();
            mean_latent_l1(&encode_features(&model, &x).unwrap())
        })
        .collect();
    Outcome::check(
        l1.windows(2).all(|p| p[1] <= p[0] * 1.05),
        format!("mean latent L1 at lambda 0, 1e-3, 1e-1: {l1:.4?}"),
    )
}

#[test]
fn acceptance_criteria() {
    let mut statuses = Vec::new();
    let mut record = |id: usize, title: &str, outcome: Outcome| {
        report(id, title, &outcome);
        statuses.push((id, outcome.status));
    };
    record(1, "gradient suite", c1_gradients());
    record(2, "KL oracle", c2_kl());
    record(3, "data fidelity", c3_data());
    record(4, "balancing reproduction", c4_balancing());
    record(5, "CNN shape chain", c5_shape_chain());
    let (flagship, flagship_time) = five_runs(Configuration::SaeWithCnn);
    record(
        6,
        "end-to-end accuracy floor",
        c6_end_to_end(&flagship, flagship_time),
    );
    let (staged, _) = five_runs(Configuration::SaeCnn);
    record(
        7,
        "joint vs separate training",
        c7_directional(&flagship, &staged),
    );
    record(8, "ANOVA/Tukey oracles", c8_statistics());
    record(9, "training determinism", c9_determinism());
    record(10, "sparsity pressure", c10_sparsity());

    let failed: Vec<usize> = statuses
        .iter()
        .filter(|(_, s)| *s == Status::Fail)
        .map(|(id, _)| *id)
        .collect();
    let passed = statuses.iter().filter(|(_, s)| *s == Status::Pass).count();
    writeln!(
        std::io::stdout().lock(),
        "acceptance: {passed}/{} passed, failed {failed:?}",
        statuses.len()
    )
    .unwrap();
    let blocking: Vec<usize> = failed
        .into_iter()
        .filter(|id| !REPORTED_ONLY.contains(id))
        .collect();
    assert!(blocking.is_empty(), "failed criteria: {blocking:?}");
}
