//! Overcomplete sparse autoencoder lifting rows to a wide non-negative latent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, ParamStore, Sequential};
use crate::tensor::{ops, Mode, Rng, Tape, Tensor, Var};
use crate::train::{batched_rows, fit, BatchLoss, History, TrainConfig};

pub const LATENT_DIM: usize = 400;
pub const GRID_SIDE: usize = 20;

/// What the L1 term of the loss is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityTarget {
    /// Latent activations, averaged over the rows of the batch.
    #[default]
    Activations,
    /// Every dense weight matrix of the encoder and decoder.
    Weights,
}

impl std::str::FromStr for SparsityTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activations" => Ok(Self::Activations),
            "weights" => Ok(Self::Weights),
            other => Err(Error::Argument(format!(
                "unknown sparsity target {other:?} (activations, weights)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Encoder widths between input and latent; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub lambda: f64,
    pub target: SparsityTarget,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            latent_dim: LATENT_DIM,
            hidden: vec![64],
            lambda: 1e-3,
            target: SparsityTarget::Activations,
            epochs: 400,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl SaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Argument("SAE widths must be positive".into()));
        }
        check_lambda(self.lambda)?;
        self.train_config().validate()
    }

    pub(crate) fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "sparsity weight {lambda} must be a non-negative number"
        )))
    }
}

/// Encoder `input -> hidden.. -> latent` (relu throughout) and decoder
/// `latent -> hidden.. -> input` ending in a sigmoid.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub encoder: Sequential,
    pub decoder: Sequential,
}

impl Autoencoder {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        latent: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut widths = vec![input];
        widths.extend(hidden);
        widths.push(latent);
        let encoder = Sequential::dense_stack(
            store,
            &format!("{prefix}.encoder"),
            &widths,
            Activation::Relu,
            Some(Activation::Relu),
            rng,
        );
        widths.reverse();
        let decoder = Sequential::dense_stack(
            store,
            &format!("{prefix}.decoder"),
            &widths,
            Activation::Relu,
            Some(Activation::Sigmoid),
            rng,
        );
        Self { encoder, decoder }
    }

    /// `(latent, reconstruction)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        rng: &mut Rng,
    ) -> Result<(Var, Var)> {
        let latent = self.encoder.forward(tape, params, x, Mode::Train, rng)?;
        let reconstruction = self
            .decoder
            .forward(tape, params, latent, Mode::Train, rng)?;
        Ok((latent, reconstruction))
    }

    /// `factor * sum |W|` over every dense weight matrix.
    pub(crate) fn weight_penalty(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        params: &[Var],
        factor: f64,
    ) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for id in self
            .encoder
            .param_ids()
            .into_iter()
            .chain(self.decoder.param_ids())
        {
            if !store.names()[id.index()].ends_with(".weight") {
                continue;
            }
            let term = tape.l1(params[id.index()], factor)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        Ok(acc)
    }
}

#[derive(Clone, Debug)]
pub struct SaeModel {
    pub config: SaeConfig,
    pub params: ParamStore,
    pub net: Autoencoder,
}

impl SaeModel {
    /// Freshly initialised model; parameter names start with `sae.`.
    pub fn new(config: &SaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed).derive(0);
        let mut params = ParamStore::new();
        let net = Autoencoder::build(
            &mut params,
            "sae",
            config.input_dim,
            &config.hidden,
            config.latent_dim,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            params,
            net,
        })
    }
}

/// Reconstruction MSE plus `lambda` times the mean over rows of each row's
/// latent L1 norm.
pub fn sae_loss(x: &Tensor, reconstruction: &Tensor, latent: &Tensor, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(ops::mse(x, reconstruction)? + lambda * mean_latent_l1(latent))
}

/// Mean over rows of the per-row L1 norm.
pub fn mean_latent_l1(latent: &Tensor) -> f64 {
    let rows = latent.rows();
    if rows == 0 {
        return 0.0;
    }
    ops::penalty_l1([latent]) / rows as f64
}

/// Sparsity term on the tape, or `None` when it vanishes.
pub(crate) fn sparsity_on_tape(
    tape: &mut Tape,
    net: &Autoencoder,
    store: &ParamStore,
    params: &[Var],
    latent: Var,
    lambda: f64,
    target: SparsityTarget,
) -> Result<Var> {
    match target {
        SparsityTarget::Activations => {
            let rows = tape.value(latent)?.rows().max(1) as f64;
            tape.l1(latent, lambda / rows)
        }
        SparsityTarget::Weights => match net.weight_penalty(tape, store, params, lambda)? {
            Some(v) => Ok(v),
            None => tape.l1(latent, 0.0),
        },
    }
}

pub fn train_sae(x: &Tensor, config: &SaeConfig) -> Result<(SaeModel, History)> {
    let mut model = SaeModel::new(config)?;
    check_width(x, config.input_dim)?;
    let mut rng = Rng::new(config.seed).derive(1);
    let net = model.net.clone();
    let store = model.params.clone();
    let history = fit(
        &mut model.params,
        x.rows(),
        &config.train_config(),
        &["reconstruction", "sparsity"],
        &mut rng,
        |tape, p, rows, rng| {
            let xb = tape.constant(x.select_rows(rows));
            let (latent, recon) = net.forward(tape, p, xb, rng)?;
            let mse = tape.mse(recon, xb)?;
            let sparsity =
                sparsity_on_tape(tape, &net, &store, p, latent, config.lambda, config.target)?;
            let total = tape.add(mse, sparsity)?;
            Ok(BatchLoss {
                total,
                components: vec![mse, sparsity],
            })
        },
    )?;
    Ok((model, history))
}

fn check_width(x: &Tensor, width: usize) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[1] != width {
        return Err(Error::shape(
            "autoencoder input",
            x.shape(),
            &[x.rows(), width],
        ));
    }
    Ok(())
}

/// Latent activations of `x` (inference, non-negative).
pub fn encode_features(model: &SaeModel, x: &Tensor) -> Result<Tensor> {
    check_width(x, model.config.input_dim)?;
    batched_rows(x, 1024, |chunk| {
        let mut tape = Tape::new();
        let p = model.params.bind_frozen(&mut tape);
        let xv = tape.constant(chunk.clone());
        let z = model
            .net
            .encoder
            .forward(&mut tape, &p, xv, Mode::Eval, &mut Rng::new(0))?;
        Ok(tape.value(z)?.clone())
    })
}

/// Reconstructions of `x` (inference).
pub fn reconstruct(model: &SaeModel, x: &Tensor) -> Result<Tensor> {
    check_width(x, model.config.input_dim)?;
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let (_, r) = model.net.forward(&mut tape, &p, xv, &mut Rng::new(0))?;
    Ok(tape.value(r)?.clone())
}

/// Row-major `N x 400 -> N x 20 x 20`: `grid[r][c] = row[20 r + c]`.
pub fn reshape_to_grid(features: &Tensor) -> Result<Tensor> {
    let side = GRID_SIDE;
    if features.shape().len() != 2 || features.shape()[1] != side * side {
        return Err(Error::shape(
            "reshape_to_grid",
            features.shape(),
            &[features.rows(), side * side],
        ));
    }
    features.clone().reshape([features.rows(), side, side])
}

/// Appends the singleton channel axis expected by convolution.
pub fn with_channel(grid: &Tensor) -> Result<Tensor> {
    let mut shape = grid.shape().to_vec();
    shape.push(1);
    grid.clone().reshape(shape)
}

/// Inverse of [`reshape_to_grid`] (also accepts a trailing channel axis).
pub fn flatten_grid(grid: &Tensor) -> Result<Tensor> {
    let rows = grid.rows();
    let width = grid.len().checked_div(rows).unwrap_or(0);
    grid.clone().reshape([rows, width])
}
