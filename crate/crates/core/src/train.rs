//! Mini-batch Adam training shared by every model in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{AdamConfig, AdamState, FlushDenormals, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Row-weighted mean losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub components: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub component_names: Vec<String>,
    pub epochs: Vec<EpochLoss>,
}

impl History {
    pub fn first_total(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.total)
    }

    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total).collect()
    }
}

/// Loss of one batch: the optimised scalar plus named scalars for bookkeeping.
pub struct BatchLoss {
    pub total: Var,
    pub components: Vec<Var>,
}

/// Runs `config.epochs` passes over `n_rows` rows in shuffled mini-batches.
///
/// `step` builds the loss for the given batch row indices on a fresh tape,
/// using the bound parameter variables (same order as `params`). Aborts with
/// [`Error::Numeric`] if the loss or any gradient is not finite. Subnormal
/// intermediates are flushed to zero for the duration (see [`FlushDenormals`]).
pub fn fit<F>(
    params: &mut ParamStore,
    n_rows: usize,
    config: &TrainConfig,
    component_names: &[&str],
    rng: &mut Rng,
    mut step: F,
) -> Result<History>
where
    F: FnMut(&mut Tape, &[Var], &[usize], &mut Rng) -> Result<BatchLoss>,
{
    config.validate()?;
    if n_rows == 0 {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut adam = AdamState::new(
        AdamConfig::with_learning_rate(config.learning_rate),
        params.values(),
    );
    let mut history = History {
        component_names: component_names.iter().map(|s| s.to_string()).collect(),
        epochs: Vec::with_capacity(config.epochs),
    };
    let mut order: Vec<usize> = (0..n_rows).collect();
    let _flush = FlushDenormals::enter();

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut components = vec![0.0; component_names.len()];
        for (batch, rows) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let loss = step(&mut tape, &vars, rows, rng)?;
            let value = tape.scalar(loss.total)?;
            if !value.is_finite() {
                return Err(Error::Numeric {
                    what: "loss",
                    epoch,
                    batch,
                });
            }
            let weight = rows.len() as f64;
            total += value * weight;
            for (acc, c) in components.iter_mut().zip(&loss.components) {
                *acc += tape.scalar(*c)? * weight;
            }
            let mut grads = tape.backward(loss.total)?;
            if !grads.all_finite() {
                return Err(Error::Numeric {
                    what: "gradient",
                    epoch,
                    batch,
                });
            }
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect::<Result<_>>()?;
            adam.step(params.values_mut(), &grads)?;
        }
        let n = n_rows as f64;
        history.epochs.push(EpochLoss {
            total: total / n,
            components: components.into_iter().map(|c| c / n).collect(),
        });
    }
    Ok(history)
}

/// Runs `f` over consecutive row chunks and stacks the outputs.
pub(crate) fn batched_rows<F>(x: &Tensor, chunk: usize, mut f: F) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let n = x.rows();
    let mut out: Option<Tensor> = None;
    let mut start = 0;
    while start < n.max(1) {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let part = f(&x.select_rows(&idx))?;
        out = Some(match out {
            None => part,
            Some(acc) => acc.concat_rows(&part)?,
        });
        if n == 0 {
            break;
        }
        start = end;
    }
    Ok(out.expect("at least one chunk"))
}
