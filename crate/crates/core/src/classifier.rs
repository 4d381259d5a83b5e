//! Binary MLP and CNN classifiers with a single sigmoid output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, ParamStore, Sequential};
use crate::tensor::{ops::ConvGeometry, Mode, Rng, Tape, Tensor, Var};
use crate::train::{batched_rows, fit, BatchLoss, History, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    /// Applied after every hidden layer.
    pub dropout: f64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            input: 400,
            hidden: vec![128, 32],
            dropout: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pool: (usize, usize),
    pub dense: usize,
    pub dropout: f64,
}

impl Default for CnnSpec {
    fn default() -> Self {
        Self {
            height: 20,
            width: 20,
            filters: 100,
            kernel: (2, 6),
            stride: 1,
            pool: (2, 6),
            dense: 64,
            dropout: 0.2,
        }
    }
}

impl CnnSpec {
    /// Per-row shapes at input, after the convolution, after pooling and after
    /// flattening, computed from the size formulas alone.
    pub fn expected_shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        let geometry = ConvGeometry::new(
            &[1, self.height, self.width, 1],
            &[self.filters, self.kernel.0, self.kernel.1, 1],
            self.stride,
        )?;
        let (ph, pw) = self.pool;
        if ph == 0 || pw == 0 || ph > geometry.out_h || pw > geometry.out_w {
            return Err(Error::Argument(format!(
                "pool {:?} does not fit the {}x{} convolution output",
                self.pool, geometry.out_h, geometry.out_w
            )));
        }
        let pooled = vec![geometry.out_h / ph, geometry.out_w / pw, self.filters];
        Ok(vec![
            vec![self.height, self.width, 1],
            vec![geometry.out_h, geometry.out_w, self.filters],
            pooled.clone(),
            vec![pooled.iter().product()],
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Architecture {
    Mlp(MlpSpec),
    Cnn(CnnSpec),
}

impl Architecture {
    /// Number of input values per row.
    pub fn input_len(&self) -> usize {
        match self {
            Architecture::Mlp(s) => s.input,
            Architecture::Cnn(s) => s.height * s.width,
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "dropout rate {rate} outside [0, 1)"
        )))
    }
}

/// `dense, relu, dropout` per hidden width, then `dense -> 1, sigmoid`.
pub fn mlp_head(
    store: &mut ParamStore,
    prefix: &str,
    spec: &MlpSpec,
    rng: &mut Rng,
) -> Result<Sequential> {
    if spec.input == 0 || spec.hidden.contains(&0) {
        return Err(Error::Argument(format!(
            "invalid MLP widths: input {} hidden {:?}",
            spec.input, spec.hidden
        )));
    }
    check_rate(spec.dropout)?;
    let mut net = Sequential::new();
    let mut width = spec.input;
    for (i, &h) in spec.hidden.iter().enumerate() {
        net.dense(store, &format!("{prefix}.dense{i}"), width, h, rng)
            .activation(Activation::Relu)
            .dropout(spec.dropout);
        width = h;
    }
    net.dense(store, &format!("{prefix}.out"), width, 1, rng)
        .activation(Activation::Sigmoid);
    Ok(net)
}

/// Reshape to `height x width x 1`, convolution, relu, max-pool, dropout,
/// flatten, dense, relu, dropout, `dense -> 1`, sigmoid.
///
/// Runs a dry forward pass and fails if the traced shapes differ from
/// [`CnnSpec::expected_shape_chain`]; returns the verified chain.
pub fn cnn_head(
    store: &mut ParamStore,
    prefix: &str,
    spec: &CnnSpec,
    rng: &mut Rng,
) -> Result<(Sequential, Vec<Vec<usize>>)> {
    if spec.dense == 0 || spec.filters == 0 {
        return Err(Error::Argument(
            "CNN filters and dense width must be positive".into(),
        ));
    }
    check_rate(spec.dropout)?;
    let expected = spec.expected_shape_chain()?;
    let flat = expected[3][0];
    let mut net = Sequential::new();
    net.reshape(vec![spec.height, spec.width, 1])
        .conv2d(
            store,
            &format!("{prefix}.conv"),
            1,
            spec.filters,
            spec.kernel,
            spec.stride,
            rng,
        )
        .activation(Activation::Relu)
        .maxpool2d(spec.pool)
        .dropout(spec.dropout)
        .reshape(vec![flat])
        .dense(store, &format!("{prefix}.dense"), flat, spec.dense, rng)
        .activation(Activation::Relu)
        .dropout(spec.dropout)
        .dense(store, &format!("{prefix}.out"), spec.dense, 1, rng)
        .activation(Activation::Sigmoid);

    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::zeros([1, spec.height * spec.width]));
    let traced = net.trace_shapes(&mut tape, &params, x, &mut Rng::new(0))?;
    let chain = vec![
        traced[0].clone(),
        traced[1].clone(),
        traced[3].clone(),
        traced[5].clone(),
    ];
    if chain != expected || traced.last() != Some(&vec![1]) {
        return Err(Error::Argument(format!(
            "CNN shape chain {chain:?} differs from expected {expected:?}"
        )));
    }
    Ok((net, chain))
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub architecture: Architecture,
    pub params: ParamStore,
    pub net: Sequential,
    /// Verified conv/pool/flatten shapes (CNN only).
    pub shape_chain: Option<Vec<Vec<usize>>>,
}

/// MLP with parameter names under `clf.`; weights drawn from `seed`.
pub fn build_mlp(spec: &MlpSpec, seed: u64) -> Result<Classifier> {
    let mut params = ParamStore::new();
    let net = mlp_head(&mut params, "clf", spec, &mut Rng::new(seed).derive(0))?;
    Ok(Classifier {
        architecture: Architecture::Mlp(spec.clone()),
        params,
        net,
        shape_chain: None,
    })
}

/// CNN with parameter names under `clf.`; weights drawn from `seed`.
pub fn build_cnn(spec: &CnnSpec, seed: u64) -> Result<Classifier> {
    let mut params = ParamStore::new();
    let (net, chain) = cnn_head(&mut params, "clf", spec, &mut Rng::new(seed).derive(0))?;
    Ok(Classifier {
        architecture: Architecture::Cnn(spec.clone()),
        params,
        net,
        shape_chain: Some(chain),
    })
}

pub fn build(architecture: &Architecture, seed: u64) -> Result<Classifier> {
    match architecture {
        Architecture::Mlp(s) => build_mlp(s, seed),
        Architecture::Cnn(s) => build_cnn(s, seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn mlp_default() -> Self {
        Self {
            epochs: 450,
            batch_size: 50,
            learning_rate: 1e-3,
            threshold: 0.5,
            seed: 0,
        }
    }

    pub fn cnn_default() -> Self {
        Self {
            epochs: 650,
            ..Self::mlp_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_threshold(self.threshold)?;
        self.train_config().validate()
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }
}

pub(crate) fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "threshold {threshold} outside (0, 1)"
        )))
    }
}

/// Flattens `x` to `N x input_len`, rejecting any other row size.
pub(crate) fn as_rows(x: &Tensor, input_len: usize) -> Result<Tensor> {
    let rows = x.rows();
    if x.shape().len() < 2 || x.row_len() != input_len {
        return Err(Error::shape(
            "classifier input",
            x.shape(),
            &[rows, input_len],
        ));
    }
    x.clone().reshape([rows, input_len])
}

pub(crate) fn check_labels(y: &[u8], rows: usize) -> Result<Tensor> {
    if y.len() != rows {
        return Err(Error::shape("labels", &[y.len()], &[rows]));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    Tensor::new([rows, 1], y.iter().map(|&v| f64::from(v)).collect())
}

/// Minimises binary cross-entropy with mini-batch Adam.
pub fn train_classifier(
    model: &mut Classifier,
    x: &Tensor,
    y: &[u8],
    config: &ClassifierConfig,
) -> Result<History> {
    config.validate()?;
    let x = as_rows(x, model.architecture.input_len())?;
    let targets = check_labels(y, x.rows())?;
    let net = model.net.clone();
    let mut rng = Rng::new(config.seed).derive(1);
    fit(
        &mut model.params,
        x.rows(),
        &config.train_config(),
        &["bce"],
        &mut rng,
        |tape, p, rows, rng| {
            let xb = tape.constant(x.select_rows(rows));
            let yb = tape.constant(targets.select_rows(rows));
            let prob = net.forward(tape, p, xb, Mode::Train, rng)?;
            let loss = tape.bce(prob, yb)?;
            Ok(BatchLoss {
                total: loss,
                components: vec![loss],
            })
        },
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Prediction {
    /// Label 1 iff `p >= threshold`.
    pub fn from_probabilities(probabilities: Vec<f64>, threshold: f64) -> Self {
        let labels = probabilities
            .iter()
            .map(|&p| u8::from(p >= threshold))
            .collect();
        Self {
            probabilities,
            labels,
        }
    }
}

/// Inference in evaluation mode; label 1 iff probability `>= threshold`.
pub fn predict(model: &Classifier, x: &Tensor, threshold: f64) -> Result<Prediction> {
    check_threshold(threshold)?;
    let x = as_rows(x, model.architecture.input_len())?;
    let probs = batched_rows(&x, 128, |chunk| {
        forward_eval(&model.net, &model.params, chunk)
    })?;
    Ok(Prediction::from_probabilities(probs.into_data(), threshold))
}

pub(crate) fn forward_eval(net: &Sequential, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p: Vec<Var> = params.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let out = net.forward(&mut tape, &p, xv, Mode::Eval, &mut Rng::new(0))?;
    Ok(tape.value(out)?.clone())
}
