//! Variational autoencoder used to synthesise minority-class rows.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Activation, ParamStore, Sequential};
use crate::tensor::{ops, Mode, Rng, Tape, Tensor, Var};
use crate::train::{batched_rows, fit, BatchLoss, History, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Encoder widths after the input; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            latent_dim: 2,
            hidden: vec![16, 8],
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            kl_weight: 1.0,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Argument("VAE widths must be positive".into()));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Argument(format!(
                "kl_weight {} must be a non-negative number",
                self.kl_weight
            )));
        }
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

/// Encoder trunk feeding two dense heads (mean and log-variance), plus a
/// decoder from the latent back to the input width with sigmoid output.
#[derive(Clone, Debug)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub params: ParamStore,
    encoder: Sequential,
    mu_head: Sequential,
    log_var_head: Sequential,
    decoder: Sequential,
}

/// Forward-pass variables of one batch.
pub struct VaeOutputs {
    pub mu: Var,
    pub log_var: Var,
    pub z: Var,
    pub reconstruction: Var,
}

impl VaeModel {
    /// Freshly initialised model; parameter names start with `vae.`.
    pub fn new(config: &VaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed).derive(0);
        let mut params = ParamStore::new();
        let mut enc_widths = vec![config.input_dim];
        enc_widths.extend(&config.hidden);
        let encoder = Sequential::dense_stack(
            &mut params,
            "vae.encoder",
            &enc_widths,
            Activation::Relu,
            Some(Activation::Relu),
            &mut rng,
        );
        let trunk = *enc_widths.last().expect("non-empty");
        let mut mu_head = Sequential::new();
        mu_head.dense(&mut params, "vae.mu", trunk, config.latent_dim, &mut rng);
        let mut log_var_head = Sequential::new();
        log_var_head.dense(
            &mut params,
            "vae.log_var",
            trunk,
            config.latent_dim,
            &mut rng,
        );
        let mut dec_widths = vec![config.latent_dim];
        dec_widths.extend(config.hidden.iter().rev());
        dec_widths.push(config.input_dim);
        let decoder = Sequential::dense_stack(
            &mut params,
            "vae.decoder",
            &dec_widths,
            Activation::Relu,
            Some(Activation::Sigmoid),
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            params,
            encoder,
            mu_head,
            log_var_head,
            decoder,
        })
    }

    /// Encodes, samples `z` with `rng` (or uses `mu` when `sample` is false)
    /// and decodes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        sample: bool,
        rng: &mut Rng,
    ) -> Result<VaeOutputs> {
        let h = self.encoder.forward(tape, params, x, Mode::Train, rng)?;
        let mu = self.mu_head.forward(tape, params, h, Mode::Train, rng)?;
        let log_var = self
            .log_var_head
            .forward(tape, params, h, Mode::Train, rng)?;
        let z = if sample {
            tape.reparameterize(mu, log_var, rng)?
        } else {
            mu
        };
        let reconstruction = self.decoder.forward(tape, params, z, Mode::Train, rng)?;
        Ok(VaeOutputs {
            mu,
            log_var,
            z,
            reconstruction,
        })
    }

    /// Posterior means of `x`.
    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        batched_rows(x, 512, |chunk| {
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let xv = tape.constant(chunk.clone());
            let mut rng = Rng::new(0);
            let h = self
                .encoder
                .forward(&mut tape, &p, xv, Mode::Eval, &mut rng)?;
            let mu = self
                .mu_head
                .forward(&mut tape, &p, h, Mode::Eval, &mut rng)?;
            Ok(tape.value(mu)?.clone())
        })
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.shape()[1] != self.config.input_dim {
            return Err(Error::shape(
                "vae input",
                x.shape(),
                &[x.rows(), self.config.input_dim],
            ));
        }
        Ok(())
    }
}

/// Reconstruction MSE plus `kl_weight` times the row-averaged KL divergence
/// of `N(mu, exp(log_var))` from the standard normal.
pub fn vae_loss(
    x: &Tensor,
    reconstruction: &Tensor,
    mu: &Tensor,
    log_var: &Tensor,
    kl_weight: f64,
) -> Result<f64> {
    if mu.shape() != log_var.shape() {
        return Err(Error::shape("vae_loss", mu.shape(), log_var.shape()));
    }
    let rows = mu.rows().max(1) as f64;
    Ok(ops::mse(x, reconstruction)?
        + kl_weight * ops::kl_standard_from_log_var(mu.data(), log_var.data()) / rows)
}

fn vae_loss_on_tape(
    tape: &mut Tape,
    x: Var,
    out: &VaeOutputs,
    kl_weight: f64,
) -> Result<BatchLoss> {
    let recon = tape.mse(out.reconstruction, x)?;
    let kl = tape.kl_standard(out.mu, out.log_var)?;
    let weighted_kl = tape.scale(kl, kl_weight)?;
    let total = tape.add(recon, weighted_kl)?;
    Ok(BatchLoss {
        total,
        components: vec![recon, weighted_kl],
    })
}

/// Trains on every row of `minority` (labels are ignored).
pub fn train_vae(minority: &Dataset, config: &VaeConfig) -> Result<(VaeModel, History)> {
    let mut model = VaeModel::new(config)?;
    model.check_width(&minority.features)?;
    if minority.len() < 2 * config.batch_size {
        return Err(Error::Data(format!(
            "VAE training needs at least {} rows (twice the batch size), got {}",
            2 * config.batch_size,
            minority.len()
        )));
    }
    let x = &minority.features;
    let mut rng = Rng::new(config.seed).derive(1);
    let trainer = model.clone();
    let history = fit(
        &mut model.params,
        x.rows(),
        &config.train_config(),
        &["reconstruction", "kl"],
        &mut rng,
        |tape, p, rows, rng| {
            let xb = tape.constant(x.select_rows(rows));
            let out = trainer.forward(tape, p, xb, true, rng)?;
            vae_loss_on_tape(tape, xb, &out, config.kl_weight)
        },
    )?;
    Ok((model, history))
}

/// Synthesises `count` rows: seed rows are taken in order (cycling when
/// `count` exceeds them), encoded, sampled and decoded; outputs are clamped to
/// `[0, 1]` and flagged synthetic with the seed row's label.
pub fn generate_synthetic(
    model: &VaeModel,
    seeds: &Dataset,
    count: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    model.check_width(&seeds.features)?;
    if count == 0 {
        return Ok(Dataset::empty(model.config.input_dim));
    }
    if seeds.is_empty() {
        return Err(Error::Data(
            "cannot synthesise rows without seed rows".into(),
        ));
    }
    let order: Vec<usize> = (0..count).map(|i| i % seeds.len()).collect();
    let inputs = seeds.features.select_rows(&order);
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    let xv = tape.constant(inputs);
    let out = model.forward(&mut tape, &p, xv, true, rng)?;
    let features = tape.value(out.reconstruction)?.map(|v| v.clamp(0.0, 1.0));
    Dataset::new(
        features,
        order.iter().map(|&i| seeds.labels[i]).collect(),
        vec![true; count],
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalancePolicy {
    /// Whole passes of one synthetic row per real minority row, until the
    /// minority count reaches the majority count.
    #[default]
    OnePass,
    /// Exactly as many synthetic rows as needed to equalise the classes.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub before: [usize; 2],
    pub after: [usize; 2],
    pub minority_label: Option<u8>,
    pub synthesized: usize,
}

/// Appends synthetic minority rows after the unchanged input rows.
pub fn balance_dataset(
    train: &Dataset,
    model: &VaeModel,
    policy: BalancePolicy,
    rng: &mut Rng,
) -> Result<(Dataset, BalanceReport)> {
    let before = train.class_counts();
    if before[0] == before[1] {
        let report = BalanceReport {
            before,
            after: before,
            minority_label: None,
            synthesized: 0,
        };
        return Ok((train.clone(), report));
    }
    let minority: u8 = if before[1] < before[0] { 1 } else { 0 };
    let seeds_idx: Vec<usize> = (0..train.len())
        .filter(|&i| train.labels[i] == minority && !train.synthetic[i])
        .collect();
    if seeds_idx.is_empty() {
        return Err(Error::Data(format!(
            "no real rows of minority class {minority} to seed synthesis"
        )));
    }
    let seeds = train.select(&seeds_idx);
    let deficit = before[1 - minority as usize] - before[minority as usize];
    let count = match policy {
        BalancePolicy::Exact => deficit,
        BalancePolicy::OnePass => deficit.div_ceil(seeds.len()) * seeds.len(),
    };
    let synthetic = generate_synthetic(model, &seeds, count, rng)?;
    let balanced = train.concat(&synthetic)?;
    let report = BalanceReport {
        before,
        after: balanced.class_counts(),
        minority_label: Some(minority),
        synthesized: count,
    };
    Ok((balanced, report))
}
