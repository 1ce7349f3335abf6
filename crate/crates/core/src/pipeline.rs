//! Toy end-to-end flow: generate data, pretrain a dense net, prune it and
//! wrap the result as an inference [`Model`].

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{Dataset, SyntheticConfig};
use crate::error::{config_err, Result};
use crate::model::Model;
use crate::nn::{ConvSpec, NetSpec, ToyNet};
use crate::prune::{prune_run_split, train_dense, IterationRecord, PruneConfig, VAL_FRACTION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 15,
            lr: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Convolution stack; the default is the two-layer toy net.
    pub convs: Option<Vec<ConvSpec>>,
}

/// Everything `prune` needs. `seed` drives weight init, pretraining order,
/// the train/validation split and the search.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub data: SyntheticConfig,
    pub net: NetConfig,
    pub pretrain: PretrainConfig,
    pub prune: PruneConfig,
}

impl ToyConfig {
    pub fn net_spec(&self) -> NetSpec {
        let input = [self.data.channels, self.data.height, self.data.width];
        match &self.net.convs {
            Some(convs) => NetSpec {
                input,
                convs: convs.clone(),
                classes: self.data.classes,
            },
            None => NetSpec::two_conv(input, self.data.classes),
        }
    }

    /// The search seed follows the top-level seed.
    pub fn resolved(&self) -> ToyConfig {
        let mut c = self.clone();
        c.prune.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.net_spec().conv_shapes()?;
        self.prune.validate()?;
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr >= 0.0) {
            return Err(config_err!("pretrain needs a positive batch_size and non-negative lr"));
        }
        Ok(())
    }
}

pub struct ToyRun {
    pub model: Model,
    pub baseline_accuracy: f64,
    pub pruned_accuracy: f64,
    pub met_target: bool,
    pub history: Vec<IterationRecord>,
}

/// Train/validation split a model was pruned against, regenerated from the
/// dataset description and split seed in the model's provenance.
pub fn model_split(model: &Model) -> Result<(Dataset, Dataset)> {
    let data = model
        .dataset
        .as_ref()
        .ok_or_else(|| config_err!("model carries no dataset description"))?
        .generate()?;
    let seed = model
        .provenance
        .get("split_seed")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| config_err!("model provenance lacks split_seed"))?;
    data.split(VAL_FRACTION, seed)
}

pub fn run_toy(cfg: &ToyConfig) -> Result<ToyRun> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let data = cfg.data.generate()?;
    let (train, val) = data.split(VAL_FRACTION, cfg.seed)?;
    let mut net = ToyNet::new(cfg.net_spec(), cfg.seed)?;
    let p = &cfg.pretrain;
    train_dense(&mut net, &train, p.epochs, p.lr, p.batch_size, cfg.seed)?;
    let baseline_accuracy = net.accuracy(&val)?;
    log::info!("dense baseline accuracy {baseline_accuracy:.4}");

    let outcome = prune_run_split(&cfg.prune, &net, &train, &val)?;
    let mut model = Model::from_toynet(&outcome.best.net, Some(cfg.data.clone()))?;
    model.provenance = json!({
        "config": cfg,
        "split_seed": cfg.seed,
        "baseline_accuracy": baseline_accuracy,
        "pruned_accuracy": outcome.best.accuracy,
        "met_target": outcome.met_target,
    });
    Ok(ToyRun {
        model,
        baseline_accuracy,
        pruned_accuracy: outcome.best.accuracy,
        met_target: outcome.met_target,
        history: outcome.history,
    })
}
