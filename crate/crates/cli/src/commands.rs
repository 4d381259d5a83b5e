use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diabnet::data::{ImputationMeans, NormalizerParams, SplitIndices};
use diabnet::stats::{one_way_anova, tukey_hsd, AnovaResult, RunGroup, TukeyResult};
use serde::{Deserialize, Serialize};

use crate::config::{Configuration, PipelineConfig};
use crate::container::WeightContainer;
use crate::error::{CliError, Result};
use crate::pipeline::{prepare, run, score, MetricsRecord, PreparedData, TrainedModel};

pub const PREPROCESS_FILE: &str = "preprocess.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EXPERIMENT_METRICS_FILE: &str = "experiment_metrics.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

/// Spacing between per-run seeds of an experiment.
pub const SEED_STRIDE: u64 = 10007;

/// Tukey family-wise error rate.
pub const TUKEY_ALPHA: f64 = 0.05;

pub fn run_seed(global: u64, index: usize) -> u64 {
    global.wrapping_add(index as u64 * SEED_STRIDE)
}

/// Weight file name of one run.
pub fn weights_file_name(configuration: Configuration, seed: u64) -> String {
    format!("{}_seed{seed}.adpm", configuration.name())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| CliError::io(path, e))
}

/// Contents of the preprocessing sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub input: String,
    pub rows: usize,
    pub class_counts: [usize; 2],
    pub train_ratio: f64,
    pub split_seed: u64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub train_class_counts: [usize; 2],
    pub test_class_counts: [usize; 2],
    pub split: SplitIndices,
    pub imputation: ImputationMeans,
    pub normalizer: NormalizerParams,
}

impl PreprocessSummary {
    fn new(cfg: &PipelineConfig, data: &PreparedData) -> Self {
        Self {
            input: cfg.input.display().to_string(),
            rows: data.rows,
            class_counts: data.class_counts,
            train_ratio: cfg.train_ratio,
            split_seed: cfg.split_seed,
            train_rows: data.train.len(),
            test_rows: data.test.len(),
            train_class_counts: data.train.class_counts(),
            test_class_counts: data.test.class_counts(),
            split: data.split.clone(),
            imputation: data.imputation.clone(),
            normalizer: data.normalizer.clone(),
        }
    }
}

/// Writes `preprocess.json` into `out`.
pub fn cmd_preprocess(cfg: &PipelineConfig, out: &Path) -> Result<PreprocessSummary> {
    let data = prepare(cfg)?;
    let summary = PreprocessSummary::new(cfg, &data);
    create_dir(out)?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    write_file(&out.join(PREPROCESS_FILE), json.as_bytes())?;
    Ok(summary)
}

pub struct TrainOutcome {
    pub record: MetricsRecord,
    pub weights: PathBuf,
}

/// Trains one run, saves its weights and appends its metrics line.
pub fn cmd_train(
    cfg: &PipelineConfig,
    configuration: Configuration,
    seed: u64,
    out: &Path,
) -> Result<TrainOutcome> {
    let data = prepare(cfg)?;
    let outcome = run(cfg, configuration, seed, &data)?;
    create_dir(out)?;
    let weights = out.join(weights_file_name(configuration, seed));
    outcome.model.to_container().save(&weights)?;
    let mut record = outcome.record;
    record.weights = Some(weights.display().to_string());
    append_line(&out.join(METRICS_FILE), &record.to_line())?;
    Ok(TrainOutcome { record, weights })
}

/// Scores stored weights on the test split and appends a metrics line.
pub fn cmd_evaluate(
    cfg: &PipelineConfig,
    configuration: Configuration,
    seed: u64,
    weights: &Path,
    out: &Path,
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let stored = WeightContainer::load(weights)?;
    let mut model = TrainedModel::skeleton(cfg, configuration, seed)?;
    model.restore(&stored).map_err(|message| CliError::Format {
        path: weights.to_path_buf(),
        message,
    })?;
    let data = prepare(cfg)?;
    let confusion = score(&model, &data, cfg.threshold)?;
    let record = MetricsRecord {
        config: configuration.name().to_string(),
        seed,
        accuracy: confusion.accuracy(),
        confusion,
        test_rows: data.test.len(),
        losses: Vec::new(),
        balance: None,
        weights: Some(weights.display().to_string()),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    create_dir(out)?;
    append_line(&out.join(METRICS_FILE), &record.to_line())?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub configuration: Configuration,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub failures: Vec<RunFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub global_seed: u64,
    pub seed_stride: u64,
    pub groups: Vec<GroupSummary>,
    pub anova: Option<AnovaResult>,
    pub tukey: Option<TukeyResult>,
    /// Why `anova` or `tukey` is absent.
    pub notes: Vec<String>,
}

impl ExperimentReport {
    /// Builds the statistics for `groups`; each needs two successful runs.
    pub fn from_groups(global_seed: u64, groups: Vec<GroupSummary>) -> Result<Self> {
        if let Some(g) = groups.iter().find(|g| g.accuracies.len() < 2) {
            return Err(CliError::Core(diabnet::Error::Data(format!(
                "{} has {} successful runs; the comparison needs at least 2 per configuration",
                g.configuration,
                g.accuracies.len()
            ))));
        }
        let run_groups: Vec<RunGroup> = groups
            .iter()
            .map(|g| RunGroup::new(g.configuration.name(), g.accuracies.clone()))
            .collect();
        let mut notes = Vec::new();
        let anova = one_way_anova(&run_groups)
            .map_err(|e| notes.push(format!("ANOVA not reported: {e}")))
            .ok();
        let tukey = tukey_hsd(&run_groups, TUKEY_ALPHA)
            .map_err(|e| notes.push(format!("Tukey HSD not reported: {e}")))
            .ok();
        Ok(Self {
            global_seed,
            seed_stride: SEED_STRIDE,
            groups,
            anova,
            tukey,
            notes,
        })
    }

    /// Column-aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s += &format!(
            "{:<14} {:>5} {:>8} {:>8} {:>8}\n",
            "configuration", "runs", "mean", "sd", "failed"
        );
        for g in &self.groups {
            s += &format!(
                "{:<14} {:>5} {:>8.4} {:>8.4} {:>8}\n",
                g.configuration.name(),
                g.accuracies.len(),
                g.mean,
                g.sd,
                g.failures.len()
            );
        }
        s.push('\n');
        if let Some(a) = &self.anova {
            s += &format!(
                "one-way ANOVA: F({}, {}) = {:.3}, p = {:.3e}\n",
                a.df_between, a.df_within, a.f, a.p
            );
        }
        if let Some(t) = &self.tukey {
            s += &format!("Tukey HSD (alpha {}, q = {:.3})\n", t.alpha, t.q_critical);
            s += &format!(
                "{:<14} {:<14} {:>10} {:>10} {:>12}\n",
                "first", "second", "diff", "critical", "significant"
            );
            for p in &t.pairs {
                s += &format!(
                    "{:<14} {:<14} {:>10.4} {:>10.4} {:>12}\n",
                    p.first_label,
                    p.second_label,
                    p.mean_difference,
                    p.critical_difference,
                    if p.significant { "yes" } else { "no" }
                );
            }
        }
        for n in &self.notes {
            s += &format!("note: {n}\n");
        }
        s
    }
}

/// Runs every configuration over `repeats` seeds (or the configured 11/12
/// scheme), writes per-run metrics lines and the comparison report.
///
/// Failed runs are reported on stderr and excluded.
pub fn cmd_experiment(
    cfg: &PipelineConfig,
    repeats: Option<usize>,
    out: &Path,
) -> Result<ExperimentReport> {
    if let Some(r) = repeats.filter(|&r| r < 2) {
        return Err(CliError::Usage(format!(
            "--repeats {r}: at least 2 runs per configuration are needed"
        )));
    }
    let data = prepare(cfg)?;
    create_dir(out)?;
    let metrics = out.join(EXPERIMENT_METRICS_FILE);
    write_file(&metrics, b"")?;
    let mut groups = Vec::new();
    for configuration in Configuration::ALL {
        let n = repeats.unwrap_or_else(|| cfg.repeats_for(configuration));
        let (mut seeds, mut accuracies, mut failures) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let seed = run_seed(cfg.seed, i);
            match run(cfg, configuration, seed, &data) {
                Ok(outcome) => {
                    eprintln!(
                        "{configuration} seed {seed}: accuracy {:.4} ({:.1} s)",
                        outcome.record.accuracy, outcome.record.wall_clock_seconds
                    );
                    append_line(&metrics, &outcome.record.to_line())?;
                    seeds.push(seed);
                    accuracies.push(outcome.record.accuracy);
                }
                Err(e) => {
                    eprintln!("warning: {configuration} seed {seed} failed and is excluded: {e}");
                    failures.push(RunFailure {
                        seed,
                        error: e.to_string(),
                    });
                }
            }
        }
        let group = RunGroup::new(configuration.name(), accuracies.clone());
        groups.push(GroupSummary {
            configuration,
            seeds,
            mean: if accuracies.is_empty() {
                f64::NAN
            } else {
                group.mean()
            },
            sd: group.sd(),
            accuracies,
            failures,
        });
    }
    let report = ExperimentReport::from_groups(cfg.seed, groups)?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    write_file(&out.join(REPORT_JSON), json.as_bytes())?;
    write_file(&out.join(REPORT_TEXT), report.to_text().as_bytes())?;
    Ok(report)
}
