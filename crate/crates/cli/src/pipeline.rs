//! One training run of a named configuration, from CSV to test-split metrics.
//!
//! Component seeds are fixed offsets of the run seed: VAE `+0`, balancing
//! `+1`, SAE `+2`, classifier `+3`, joint network `+4`. The split uses
//! `split_seed` so every run is scored on the same held-out rows.

use std::time::Instant;

use diabnet::classifier::{
    build_cnn, build_mlp, predict, train_classifier, Classifier, MlpSpec, Prediction,
};
use diabnet::data::{
    apply_normalizer, binarize_pregnancies, fit_normalizer, impute_missing, load_pima_csv,
    split_train_test, Dataset, ImputationMeans, NormalizerParams, SplitIndices,
};
use diabnet::joint::{build_joint, predict_joint, train_joint, JointModel};
use diabnet::sae::{encode_features, reshape_to_grid, train_sae, with_channel, SaeModel};
use diabnet::stats::{accuracy_and_confusion, Confusion};
use diabnet::tensor::{Rng, Tensor};
use diabnet::train::History;
use diabnet::vae::{balance_dataset, train_vae, BalanceReport};
use serde::{Deserialize, Serialize};

use crate::config::{Configuration, PipelineConfig};
use crate::container::WeightContainer;
use crate::error::Result;

const VAE_OFFSET: u64 = 0;
const BALANCE_OFFSET: u64 = 1;
const SAE_OFFSET: u64 = 2;
const CLASSIFIER_OFFSET: u64 = 3;
const JOINT_OFFSET: u64 = 4;

/// Imputed and normalised splits; the training split is not yet balanced.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub rows: usize,
    pub class_counts: [usize; 2],
    pub split: SplitIndices,
    pub imputation: ImputationMeans,
    pub normalizer: NormalizerParams,
    pub train: Dataset,
    pub test: Dataset,
}

/// Load, binarise, split, impute (train means) and normalise (train fit).
pub fn prepare(cfg: &PipelineConfig) -> Result<PreparedData> {
    let records = load_pima_csv(&cfg.input)?;
    let data = Dataset::from_records(&binarize_pregnancies(&records));
    let split = split_train_test(&data.labels, cfg.train_ratio, cfg.split_seed)?;
    let (train, test, imputation) =
        impute_missing(&data.select(&split.train), &data.select(&split.test))?;
    let normalizer = fit_normalizer(&train.features, cfg.normalizer)?;
    let train = train.with_features(apply_normalizer(&normalizer, &train.features)?)?;
    let test = test.with_features(apply_normalizer(&normalizer, &test.features)?)?;
    Ok(PreparedData {
        rows: data.len(),
        class_counts: data.class_counts(),
        split,
        imputation,
        normalizer,
        train,
        test,
    })
}

/// Trains the VAE on the minority rows of `train` and appends synthetic rows.
pub fn balance(
    cfg: &PipelineConfig,
    train: &Dataset,
    seed: u64,
) -> Result<(Dataset, BalanceReport, History)> {
    let [c0, c1] = train.class_counts();
    if c0 == c1 {
        let report = BalanceReport {
            before: [c0, c1],
            after: [c0, c1],
            minority_label: None,
            synthesized: 0,
        };
        return Ok((train.clone(), report, History::default()));
    }
    let minority = u8::from(c1 < c0);
    let minority_rows = train.select(&train.indices_with_label(minority));
    let vae_cfg = cfg.vae_config(seed.wrapping_add(VAE_OFFSET));
    let (vae, history) = train_vae(&minority_rows, &vae_cfg)?;
    let mut rng = Rng::new(seed.wrapping_add(BALANCE_OFFSET));
    let (balanced, report) = balance_dataset(train, &vae, cfg.balance, &mut rng)?;
    Ok((balanced, report, history))
}

/// A trained (or skeleton) model of one configuration.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    /// Classifier reading the eight normalised features.
    Direct(Classifier),
    /// Frozen SAE encoder feeding a separately trained classifier.
    Staged {
        sae: SaeModel,
        classifier: Classifier,
        grid: bool,
    },
    Joint(JointModel),
}

impl TrainedModel {
    /// Freshly initialised model with the architecture `cfg` describes.
    pub fn skeleton(cfg: &PipelineConfig, configuration: Configuration, seed: u64) -> Result<Self> {
        let clf_seed = seed.wrapping_add(CLASSIFIER_OFFSET);
        Ok(match configuration {
            Configuration::Mlp => {
                let spec = MlpSpec {
                    input: cfg.sae.input_dim,
                    ..cfg.mlp.clone()
                };
                TrainedModel::Direct(build_mlp(&spec, clf_seed)?)
            }
            Configuration::SaeMlp | Configuration::SaeCnn => {
                let sae = SaeModel::new(&cfg.sae_config(seed.wrapping_add(SAE_OFFSET)))?;
                let grid = configuration == Configuration::SaeCnn;
                let classifier = if grid {
                    build_cnn(&cfg.cnn, clf_seed)?
                } else {
                    let spec = MlpSpec {
                        input: cfg.sae.latent_dim,
                        ..cfg.mlp.clone()
                    };
                    build_mlp(&spec, clf_seed)?
                };
                TrainedModel::Staged {
                    sae,
                    classifier,
                    grid,
                }
            }
            Configuration::SaeWithMlp | Configuration::SaeWithCnn => {
                let joint = joint_config(cfg, configuration, seed);
                TrainedModel::Joint(build_joint(&joint)?)
            }
        })
    }

    pub fn to_container(&self) -> WeightContainer {
        match self {
            TrainedModel::Direct(c) => WeightContainer::from_params(&c.params),
            TrainedModel::Staged {
                sae, classifier, ..
            } => {
                let mut out = WeightContainer::from_params(&sae.params);
                out.tensors
                    .extend(WeightContainer::from_params(&classifier.params).tensors);
                out
            }
            TrainedModel::Joint(j) => WeightContainer::from_params(&j.params),
        }
    }

    /// Loads stored weights; names and shapes must match this architecture.
    pub fn restore(&mut self, weights: &WeightContainer) -> std::result::Result<(), String> {
        match self {
            TrainedModel::Direct(c) => weights.restore_into(&mut c.params),
            TrainedModel::Staged {
                sae, classifier, ..
            } => {
                let split = sae.params.len().min(weights.tensors.len());
                let (head, tail) = weights.tensors.split_at(split);
                WeightContainer {
                    tensors: head.to_vec(),
                }
                .restore_into(&mut sae.params)?;
                WeightContainer {
                    tensors: tail.to_vec(),
                }
                .restore_into(&mut classifier.params)
            }
            TrainedModel::Joint(j) => weights.restore_into(&mut j.params),
        }
    }

    /// Rounds every parameter to the precision of the weight container.
    pub fn round_to_f32(&mut self) {
        match self {
            TrainedModel::Direct(c) => c.params.round_to_f32(),
            TrainedModel::Staged {
                sae, classifier, ..
            } => {
                sae.params.round_to_f32();
                classifier.params.round_to_f32();
            }
            TrainedModel::Joint(j) => j.params.round_to_f32(),
        }
    }

    /// Predictions for normalised eight-feature rows.
    pub fn predict(&self, x: &Tensor, threshold: f64) -> Result<Prediction> {
        Ok(match self {
            TrainedModel::Direct(c) => predict(c, x, threshold)?,
            TrainedModel::Staged {
                sae,
                classifier,
                grid,
            } => predict(classifier, &staged_features(sae, x, *grid)?, threshold)?,
            TrainedModel::Joint(j) => predict_joint(j, x, threshold)?,
        })
    }
}

fn staged_features(sae: &SaeModel, x: &Tensor, grid: bool) -> Result<Tensor> {
    let latent = encode_features(sae, x)?;
    Ok(if grid {
        with_channel(&reshape_to_grid(&latent)?)?
    } else {
        latent
    })
}

fn joint_config(
    cfg: &PipelineConfig,
    configuration: Configuration,
    seed: u64,
) -> diabnet::joint::JointConfig {
    let mut joint = cfg
        .joint_config(configuration, seed.wrapping_add(JOINT_OFFSET))
        .expect("joint configuration");
    joint.mlp.input = joint.latent_dim;
    joint
}

/// Summary of one training stage's per-epoch loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    pub stage: String,
    pub epochs: usize,
    pub first: Option<f64>,
    pub last: Option<f64>,
    pub min: Option<f64>,
    /// Final-epoch value of each named component.
    pub last_components: Vec<(String, f64)>,
}

impl StageLoss {
    pub fn from_history(stage: &str, history: &History) -> Self {
        let totals = history.totals();
        Self {
            stage: stage.to_string(),
            epochs: totals.len(),
            first: history.first_total(),
            last: history.last_total(),
            min: totals.iter().copied().reduce(f64::min),
            last_components: history
                .epochs
                .last()
                .map(|e| {
                    history
                        .component_names
                        .iter()
                        .cloned()
                        .zip(e.components.iter().copied())
                        .collect()
                })
                .unwrap_or_default(),
        }
    }
}

/// One JSON line per run or evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config: String,
    pub seed: u64,
    pub accuracy: f64,
    pub confusion: Confusion,
    pub test_rows: usize,
    pub losses: Vec<StageLoss>,
    pub balance: Option<BalanceReport>,
    pub weights: Option<String>,
    pub wall_clock_seconds: f64,
}

impl MetricsRecord {
    /// Single-line JSON.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialise")
    }
}

pub struct RunOutcome {
    pub model: TrainedModel,
    pub record: MetricsRecord,
}

/// Trains `configuration` with `seed` and scores it on the test split.
pub fn run(
    cfg: &PipelineConfig,
    configuration: Configuration,
    seed: u64,
    data: &PreparedData,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let (train, balance_report, vae_history) = balance(cfg, &data.train, seed)?;
    let mut losses = vec![StageLoss::from_history("vae", &vae_history)];
    let mut model = TrainedModel::skeleton(cfg, configuration, seed)?;
    let clf_cfg = cfg.classifier_config(configuration, seed.wrapping_add(CLASSIFIER_OFFSET));
    match &mut model {
        TrainedModel::Direct(c) => {
            let h = train_classifier(c, &train.features, &train.labels, &clf_cfg)?;
            losses.push(StageLoss::from_history("classifier", &h));
        }
        TrainedModel::Staged {
            sae,
            classifier,
            grid,
        } => {
            let (trained, h) = train_sae(&train.features, &sae.config)?;
            *sae = trained;
            losses.push(StageLoss::from_history("sae", &h));
            let features = staged_features(sae, &train.features, *grid)?;
            let h = train_classifier(classifier, &features, &train.labels, &clf_cfg)?;
            losses.push(StageLoss::from_history("classifier", &h));
        }
        TrainedModel::Joint(j) => {
            let h = train_joint(j, &train.features, &train.labels)?;
            losses.push(StageLoss::from_history("joint", &h));
        }
    }
    model.round_to_f32();
    let confusion = score(&model, data, cfg.threshold)?;
    let record = MetricsRecord {
        config: configuration.name().to_string(),
        seed,
        accuracy: confusion.accuracy(),
        confusion,
        test_rows: data.test.len(),
        losses,
        balance: Some(balance_report),
        weights: None,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { model, record })
}

/// Confusion counts of `model` on the test split.
pub fn score(model: &TrainedModel, data: &PreparedData, threshold: f64) -> Result<Confusion> {
    let prediction = model.predict(&data.test.features, threshold)?;
    Ok(accuracy_and_confusion(
        &prediction.labels,
        &data.test.labels,
    )?)
}
