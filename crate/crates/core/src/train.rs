//! The training loop shared by all three objectives: sample a positive batch,
//! run both networks on both views, backpropagate the objective, step the
//! optimizer on the online network and predictor, then move the target toward
//! the online encoder.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Optimizer, OptimizerKind, Tensor};
use crate::data::{sample_positive_batch, AugmentationSpec, DataSource, Dataset};
use crate::error::{Error, Result};
use crate::losses::{total_loss, uniformity_value, LossConfig, Views};
use crate::model::{ema_update, init_params, ModelParams, NetworkSpec};
use crate::seed::{derive_seed, TAG_INIT, TAG_SAMPLING};

/// Uniformity above this marks a collapsed representation.
pub const COLLAPSE_THRESHOLD: f64 = -0.2;

/// A per-step value: one constant, or an explicit list indexed by step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Constant(f64),
    List(Vec<f64>),
}

impl Schedule {
    /// Value at 1-based step `k`.
    pub fn value(&self, k: usize) -> Result<f64> {
        match self {
            Schedule::Constant(v) if k >= 1 => Ok(*v),
            Schedule::Constant(_) => Err(Error::Schedule {
                step: k,
                detail: "steps are numbered from 1".into(),
            }),
            Schedule::List(vs) => match k.checked_sub(1).and_then(|i| vs.get(i)) {
                Some(v) => Ok(*v),
                None => Err(Error::Schedule {
                    step: k,
                    detail: format!("outside 1..={}", vs.len()),
                }),
            },
        }
    }

    fn values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            Schedule::Constant(v) => Box::new(std::iter::once(*v)),
            Schedule::List(vs) => Box::new(vs.iter().copied()),
        }
    }

    fn validate(&self, field: &str, steps: usize, ok: impl Fn(f64) -> bool, what: &str) -> Result<()> {
        if let Schedule::List(vs) = self {
            if vs.len() != steps {
                return Err(Error::config(field, format!("list has {} entries for {steps} steps", vs.len())));
            }
        }
        if let Some(bad) = self.values().find(|&v| !ok(v)) {
            return Err(Error::config(field, format!("{bad} is not {what}")));
        }
        Ok(())
    }
}

pub fn schedule_value(schedule: &Schedule, k: usize) -> Result<f64> {
    schedule.value(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub network: NetworkSpec,
    pub data: DataSource,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: Schedule,
    pub tau: Schedule,
    pub seed: u64,
    pub log_every: usize,
    /// Predictor learning rate as a multiple of `lr`.
    pub predictor_lr_scale: f64,
    /// Zero disables checkpointing.
    pub checkpoint_every: usize,
    /// View distributions. The sampling seed is derived from `seed`, so
    /// `augmentation.seed` is ignored here.
    pub augmentation: AugmentationSpec,
    /// Fill `wall_ms` in metrics. Off by default since timings break
    /// byte-identical logs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            network: NetworkSpec::default(),
            data: DataSource::default(),
            steps: 2000,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            lr: Schedule::Constant(3e-4),
            tau: Schedule::Constant(0.996),
            seed: 0,
            log_every: 10,
            predictor_lr_scale: 1.0,
            checkpoint_every: 0,
            augmentation: AugmentationSpec::default(),
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// Parses a JSON config; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        if !(self.predictor_lr_scale >= 0.0 && self.predictor_lr_scale.is_finite()) {
            return Err(Error::config("predictor_lr_scale", "must be non-negative"));
        }
        self.lr
            .validate("lr", self.steps, |v| v >= 0.0 && v.is_finite(), "a non-negative learning rate")?;
        self.tau
            .validate("tau", self.steps, |v| (0.0..=1.0).contains(&v), "an EMA rate in [0, 1]")?;
        self.loss.validate()?;
        self.network.validate()?;
        self.augmentation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Epoch (0-based) in which the step's batch begins.
    pub epoch: u64,
    pub loss_total: f64,
    pub loss_align: f64,
    pub loss_cross_model: f64,
    pub uniformity: f64,
    pub wall_ms: Option<u64>,
    pub collapsed: bool,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Everything one step observed, including the gradients it applied.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub step: usize,
    pub epoch: u64,
    pub loss_total: f64,
    pub loss_align: f64,
    pub loss_cross_model: f64,
    pub uniformity: f64,
    /// In [`ModelParams::trainable`] order.
    pub grads: Vec<Tensor>,
}

/// Incremental form of [`train_run`]: one call to [`Trainer::step`] per
/// optimization step.
#[derive(Debug)]
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    params: ModelParams,
    optimizer: Optimizer,
    predictor_optimizer: Optimizer,
    aug: AugmentationSpec,
    done: usize,
}

impl<'a> Trainer<'a> {
    /// Validates `cfg` and initializes parameters from its seed.
    pub fn new(cfg: &TrainConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg.network, derive_seed(cfg.seed, TAG_INIT))?;
        Self::with_params(cfg, data, params)
    }

    /// Starts from given parameters; `cfg.network` is ignored in favor of `params.spec`.
    pub fn with_params(cfg: &TrainConfig, data: &'a Dataset, params: ModelParams) -> Result<Self> {
        let cfg = TrainConfig {
            network: params.spec.clone(),
            ..cfg.clone()
        };
        cfg.validate()?;
        if data.dim() != cfg.network.input_dim {
            return Err(Error::config(
                "network.input_dim",
                format!("{} does not match data dimension {}", cfg.network.input_dim, data.dim()),
            ));
        }
        if cfg.batch_size > data.len() {
            return Err(Error::Batch(format!(
                "batch size {} exceeds dataset size {}",
                cfg.batch_size,
                data.len()
            )));
        }
        let aug = AugmentationSpec {
            seed: derive_seed(cfg.seed, TAG_SAMPLING),
            ..cfg.augmentation.clone()
        };
        Ok(Self {
            optimizer: Optimizer::new(cfg.optimizer),
            predictor_optimizer: Optimizer::new(cfg.optimizer),
            cfg,
            data,
            params,
            aug,
            done: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> usize {
        self.done
    }

    pub fn is_finished(&self) -> bool {
        self.done >= self.cfg.steps
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let k = self.done + 1;
        let lr = self.cfg.lr.value(k)?;
        let tau = self.cfg.tau.value(k)?;
        let n = self.cfg.batch_size;
        let batch = sample_positive_batch(self.data, &self.aug, n, self.done as u64)?;

        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x1 = g.constant(batch.x1);
        let x2 = g.constant(batch.x2);
        let o1 = bound.online(&mut g, x1)?;
        let o2 = bound.online(&mut g, x2)?;
        let zt1 = bound.target(&mut g, x1)?;
        let zt2 = bound.target(&mut g, x2)?;
        let views = Views {
            p1: o1.p,
            p2: o2.p,
            zt1,
            zt2,
        };
        let parts = total_loss(&mut g, &self.cfg.loss, &views)?;
        let loss_total = g.value(parts.total).item();
        if !loss_total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: k,
                value: loss_total,
                state: Box::new(self.params.clone()),
            });
        }
        let uniformity = if n >= 2 {
            uniformity_value(g.value(o1.z), self.cfg.loss.temperature)?
        } else {
            // a single row has no pairs; use its two views instead
            let both = Tensor::from_rows(&[g.value(o1.z).data().to_vec(), g.value(o2.z).data().to_vec()])?;
            uniformity_value(&both, self.cfg.loss.temperature)?
        };

        let grads = g.backward(parts.total)?;
        let grads: Vec<Tensor> = bound.trainable().iter().map(|&v| grads.wrt(v).clone()).collect();
        {
            let split = self.params.encoder_tensor_count();
            let refs: Vec<&Tensor> = grads.iter().collect();
            let mut params = self.params.trainable_mut();
            let (enc, pred) = params.split_at_mut(split);
            self.optimizer.step(enc, &refs[..split], lr)?;
            if !pred.is_empty() {
                let plr = lr * self.cfg.predictor_lr_scale;
                self.predictor_optimizer.step(pred, &refs[split..], plr)?;
            }
        }
        let ModelParams { online, target, .. } = &mut self.params;
        ema_update(target, online, tau)?;
        self.done = k;
        Ok(StepOutcome {
            step: k,
            epoch: ((k - 1) as u64 * n as u64) / self.data.len() as u64,
            loss_total,
            loss_align: g.value(parts.align).item(),
            loss_cross_model: g.value(parts.cross).item(),
            uniformity,
            grads,
        })
    }
}

/// Receives metrics and checkpoints in step order as training runs.
pub trait TrainObserver {
    fn on_metrics(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: usize, _params: &ModelParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRecord>,
}

pub fn train_run(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    train_run_with(cfg, data, &mut ())
}

pub fn train_run_with(cfg: &TrainConfig, data: &Dataset, observer: &mut dyn TrainObserver) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(cfg, data)?;
    let start = Instant::now();
    let mut metrics = Vec::new();
    while !trainer.is_finished() {
        let out = trainer.step()?;
        if out.step % cfg.log_every == 0 {
            let record = MetricsRecord {
                step: out.step,
                epoch: out.epoch,
                loss_total: out.loss_total,
                loss_align: out.loss_align,
                loss_cross_model: out.loss_cross_model,
                uniformity: out.uniformity,
                wall_ms: cfg.record_wall_time.then(|| start.elapsed().as_millis() as u64),
                collapsed: out.uniformity > COLLAPSE_THRESHOLD,
            };
            log::debug!("{}", record.to_json_line());
            observer.on_metrics(&record)?;
            metrics.push(record);
        }
        if cfg.checkpoint_every > 0 && out.step % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(out.step, trainer.params())?;
        }
    }
    Ok(TrainOutput {
        params: trainer.into_params(),
        metrics,
    })
}
