//! Sparse autoencoder and classifier head trained as one network.
//!
//! The head reads the encoder's latent directly, so the classification loss
//! shapes the shared encoder alongside reconstruction and sparsity.

use serde::{Deserialize, Serialize};

use crate::classifier::{
    as_rows, check_labels, check_threshold, cnn_head, forward_eval, mlp_head, CnnSpec, MlpSpec,
    Prediction,
};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Sequential};
use crate::sae::{check_lambda, mean_latent_l1, Autoencoder, LATENT_DIM};
use crate::tensor::{ops, Mode, Rng, Tape, Tensor, Var};
use crate::train::{batched_rows, fit, BatchLoss, History, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Mlp,
    Cnn,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "cnn" => Ok(Self::Cnn),
            other => Err(Error::Argument(format!(
                "unknown head kind {other:?} (mlp, cnn)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub head: HeadKind,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub lambda: f64,
    /// Weight of the classification loss.
    pub alpha: f64,
    /// Weight of the reconstruction loss.
    pub beta: f64,
    pub mlp: MlpSpec,
    pub cnn: CnnSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl JointConfig {
    pub fn new(head: HeadKind) -> Self {
        Self {
            head,
            input_dim: 8,
            hidden: vec![64],
            latent_dim: LATENT_DIM,
            lambda: 1e-3,
            alpha: 1.0,
            beta: 1.0,
            mlp: MlpSpec::default(),
            cnn: CnnSpec::default(),
            epochs: match head {
                HeadKind::Mlp => 450,
                HeadKind::Cnn => 650,
            },
            batch_size: 50,
            learning_rate: 1e-3,
            threshold: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Argument(format!(
                    "{name} = {w} must be a non-negative number"
                )));
            }
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::Argument("alpha and beta cannot both be zero".into()));
        }
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Argument(
                "joint autoencoder widths must be positive".into(),
            ));
        }
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

/// `beta * mse(x, reconstruction) + alpha * bce(probability, y) + lambda * mean latent L1`.
pub fn joint_loss(
    x: &Tensor,
    reconstruction: &Tensor,
    latent: &Tensor,
    y: &Tensor,
    probability: &Tensor,
    config: &JointConfig,
) -> Result<f64> {
    if config.alpha == 0.0 && config.beta == 0.0 {
        return Err(Error::Argument("alpha and beta cannot both be zero".into()));
    }
    check_lambda(config.lambda)?;
    Ok(config.beta * ops::mse(x, reconstruction)?
        + config.alpha * ops::bce(probability, y)?
        + config.lambda * mean_latent_l1(latent))
}

#[derive(Clone, Debug)]
pub struct JointModel {
    pub config: JointConfig,
    pub params: ParamStore,
    pub autoencoder: Autoencoder,
    pub head: Sequential,
    pub shape_chain: Option<Vec<Vec<usize>>>,
}

pub struct JointOutputs {
    pub latent: Var,
    pub reconstruction: Var,
    pub probability: Var,
}

/// Freshly initialised model; parameter names start with `joint.`.
pub fn build_joint(config: &JointConfig) -> Result<JointModel> {
    config.validate()?;
    let mut rng = Rng::new(config.seed).derive(0);
    let mut params = ParamStore::new();
    let autoencoder = Autoencoder::build(
        &mut params,
        "joint",
        config.input_dim,
        &config.hidden,
        config.latent_dim,
        &mut rng,
    );
    let (head, shape_chain) = match config.head {
        HeadKind::Mlp => {
            let spec = MlpSpec {
                input: config.latent_dim,
                ..config.mlp.clone()
            };
            (mlp_head(&mut params, "joint.head", &spec, &mut rng)?, None)
        }
        HeadKind::Cnn => {
            if config.cnn.height * config.cnn.width != config.latent_dim {
                return Err(Error::Argument(format!(
                    "CNN grid {}x{} does not hold a latent of width {}",
                    config.cnn.height, config.cnn.width, config.latent_dim
                )));
            }
            let (head, chain) = cnn_head(&mut params, "joint.head", &config.cnn, &mut rng)?;
            (head, Some(chain))
        }
    };
    Ok(JointModel {
        config: config.clone(),
        params,
        autoencoder,
        head,
        shape_chain,
    })
}

impl JointModel {
    /// One encoder pass whose latent feeds both the decoder and the head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<JointOutputs> {
        let latent = self
            .autoencoder
            .encoder
            .forward(tape, params, x, mode, rng)?;
        let reconstruction = self
            .autoencoder
            .decoder
            .forward(tape, params, latent, mode, rng)?;
        let probability = self.head.forward(tape, params, latent, mode, rng)?;
        Ok(JointOutputs {
            latent,
            reconstruction,
            probability,
        })
    }

    /// Weighted loss of one batch; the components are the three weighted terms.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        y: Var,
        rng: &mut Rng,
    ) -> Result<BatchLoss> {
        let out = self.forward(tape, params, x, Mode::Train, rng)?;
        let mse = tape.mse(out.reconstruction, x)?;
        let recon = tape.scale(mse, self.config.beta)?;
        let bce = tape.bce(out.probability, y)?;
        let class = tape.scale(bce, self.config.alpha)?;
        let rows = tape.value(out.latent)?.rows().max(1) as f64;
        let sparsity = tape.l1(out.latent, self.config.lambda / rows)?;
        let partial = tape.add(recon, class)?;
        let total = tape.add(partial, sparsity)?;
        Ok(BatchLoss {
            total,
            components: vec![recon, class, sparsity],
        })
    }
}

pub fn train_joint(model: &mut JointModel, x: &Tensor, y: &[u8]) -> Result<History> {
    let x = as_rows(x, model.config.input_dim)?;
    let targets = check_labels(y, x.rows())?;
    let trainer = model.clone();
    let mut rng = Rng::new(model.config.seed).derive(1);
    fit(
        &mut model.params,
        x.rows(),
        &trainer.config.train_config(),
        &["reconstruction", "classification", "sparsity"],
        &mut rng,
        |tape, p, rows, rng| {
            let xb = tape.constant(x.select_rows(rows));
            let yb = tape.constant(targets.select_rows(rows));
            trainer.loss_on_tape(tape, p, xb, yb, rng)
        },
    )
}

/// Head probabilities for 8-feature rows (evaluation mode).
pub fn predict_joint(model: &JointModel, x: &Tensor, threshold: f64) -> Result<Prediction> {
    check_threshold(threshold)?;
    let x = as_rows(x, model.config.input_dim)?;
    let mut net = model.autoencoder.encoder.clone();
    for layer in model.head.layers() {
        net.push(layer.clone());
    }
    let probs = batched_rows(&x, 128, |chunk| forward_eval(&net, &model.params, chunk))?;
    Ok(Prediction::from_probabilities(probs.into_data(), threshold))
}

/// `(latent, reconstruction)` in evaluation mode.
pub fn encode_joint(model: &JointModel, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let x = as_rows(x, model.config.input_dim)?;
    let latent = forward_eval(&model.autoencoder.encoder, &model.params, &x)?;
    let recon = forward_eval(&model.autoencoder.decoder, &model.params, &latent)?;
    Ok((latent, recon))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_weights_rejected() {
        let mut cfg = JointConfig::new(HeadKind::Mlp);
        cfg.alpha = 0.0;
        cfg.beta = 0.0;
        assert!(build_joint(&cfg).is_err());
        let x = Tensor::zeros([1, 8]);
        let p = Tensor::full([1, 1], 0.5);
        assert!(joint_loss(&x, &x, &x, &Tensor::zeros([1, 1]), &p, &cfg).is_err());
    }

    #[test]
    fn cnn_head_gives_both_outputs_for_one_row() {
        let model = build_joint(&JointConfig::new(HeadKind::Cnn)).unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let x = tape.constant(Tensor::full([1, 8], 0.5));
        let out = model
            .forward(&mut tape, &p, x, Mode::Eval, &mut Rng::new(0))
            .unwrap();
        assert_eq!(tape.value(out.reconstruction).unwrap().shape(), &[1, 8]);
        assert_eq!(tape.value(out.probability).unwrap().shape(), &[1, 1]);
        assert_eq!(model.shape_chain.as_ref().unwrap()[3], vec![1800]);
    }

    #[test]
    fn mismatched_grid_rejected() {
        let mut cfg = JointConfig::new(HeadKind::Cnn);
        cfg.latent_dim = 300;
        assert!(build_joint(&cfg).is_err());
    }
}
