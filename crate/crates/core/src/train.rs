//! Mini-batch training on fixed-length slices and full-sequence prediction.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, seconds_to_samples, slice_sequence, LabeledSeries, MultichannelSeries, Slice};
use crate::error::{contract, invalid, Error, Result};
use crate::loss::{LossBreakdown, LossOptions, Normalization};
use crate::model::{build_model, ModelConfig, MsTcnNet, StageOutput};
use crate::optim::{adam_step, AdamConfig};

fn default_epochs() -> usize {
    50
}
fn default_slice_seconds() -> f64 {
    40.0
}
fn default_batch() -> usize {
    16
}
fn default_true() -> bool {
    true
}
fn default_log_every() -> usize {
    1
}
fn default_lr() -> f64 {
    AdamConfig::default().lr
}
fn default_beta1() -> f64 {
    AdamConfig::default().beta1
}
fn default_beta2() -> f64 {
    AdamConfig::default().beta2
}
fn default_eps() -> f64 {
    AdamConfig::default().eps
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_slice_seconds")]
    pub slice_seconds: f64,
    /// Defaults to `slice_seconds` (non-overlapping slices).
    #[serde(default)]
    pub stride_seconds: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ce_norm: Normalization,
    #[serde(default = "default_true")]
    pub detach_prev: bool,
    /// Global gradient-norm clip; off when `None`.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Progress lines go to stderr every `log_every` epochs (0 = silent).
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: default_epochs(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            slice_seconds: default_slice_seconds(),
            stride_seconds: None,
            batch_size: default_batch(),
            seed: 0,
            ce_norm: Normalization::Elementwise,
            detach_prev: true,
            grad_clip: None,
            log_every: default_log_every(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        self.model.loss_options(self.ce_norm, self.detach_prev)
    }

    pub fn slice_samples(&self, rate_hz: f64) -> usize {
        seconds_to_samples(self.slice_seconds, rate_hz)
    }

    pub fn stride_samples(&self, rate_hz: f64) -> usize {
        seconds_to_samples(self.stride_seconds.unwrap_or(self.slice_seconds), rate_hz)
    }

    pub fn validate(&self, rate_hz: f64) -> Result<()> {
        self.model.validate()?;
        self.adam().validate()?;
        if self.epochs == 0 {
            return Err(invalid("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        let slice = self.slice_samples(rate_hz) as u64;
        let rf = self.model.stage_receptive_field();
        if slice <= rf {
            return Err(invalid(format!(
                "slice of {slice} samples must exceed the receptive field {rf} of {} layers",
                self.model.layers_per_stage
            )));
        }
        if self.stride_samples(rate_hz) == 0 {
            return Err(invalid("stride must be at least one sample"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(invalid("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub ce: f64,
    pub tmse: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub per_stage: Vec<StageMetrics>,
    /// Wall-clock milliseconds since training started; kept out of the log
    /// file so that traces stay bit-identical across runs.
    #[serde(skip)]
    pub elapsed_ms: u128,
}

pub fn write_metrics_log(records: &[EpochRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        writeln!(out)?;
    }
    Ok(())
}

pub struct Trainer {
    config: TrainConfig,
    net: MsTcnNet,
    rng: ChaCha8Rng,
    step: usize,
    epoch: usize,
    log: Vec<EpochRecord>,
    started: Instant,
}

impl Trainer {
    /// Builds the model from `config.model` seeded with `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let net = build_model(&config.model, config.seed)?;
        Self::with_net(config, net)
    }

    pub fn with_net(config: TrainConfig, net: MsTcnNet) -> Result<Self> {
        config.model.validate()?;
        config.adam().validate()?;
        if net.config != config.model {
            return Err(contract("network and training config disagree on the model"));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
        Ok(Trainer {
            config,
            net,
            rng,
            step: 0,
            epoch: 0,
            log: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn net(&self) -> &MsTcnNet {
        &self.net
    }

    pub fn into_net(self) -> MsTcnNet {
        self.net
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over `slices` in seeded-shuffled batches. A non-finite loss
    /// or gradient aborts with [`Error::Diverged`] before the optimizer step,
    /// leaving the parameters from the last completed step in place.
    pub fn run_epoch(&mut self, slices: &[Slice]) -> Result<&EpochRecord> {
        if slices.is_empty() {
            return Err(invalid("no training slices"));
        }
        let expected_len = slices[0].len();
        if slices.iter().any(|s| s.len() != expected_len) {
            return Err(contract("training slices must share one length"));
        }
        let opts = self.config.loss_options();
        let batches = make_batches(slices, self.config.batch_size, &mut self.rng)?;
        let num_stages = self.net.stages.len();
        let mut sum_total = 0.0;
        let mut sum_stage = vec![StageMetrics { ce: 0.0, tmse: 0.0 }; num_stages];
        let epoch = self.epoch + 1;
        for batch in batches {
            self.net.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_total = 0.0;
            for slice in &batch.slices {
                let b: LossBreakdown = self.net.accumulate_gradients(&slice.inputs, &slice.labels, &opts, scale)?;
                batch_total += b.total;
                for (acc, s) in sum_stage.iter_mut().zip(&b.per_stage) {
                    acc.ce += s.ce;
                    acc.tmse += s.tmse;
                }
            }
            let grads_finite = self.net.params().iter().all(|p| p.grad.is_finite());
            if !batch_total.is_finite() || !grads_finite {
                return Err(Error::Diverged { epoch, step: self.step + 1 });
            }
            sum_total += batch_total;
            if let Some(max_norm) = self.config.grad_clip {
                clip_grad_norm(&mut self.net, max_norm);
            }
            adam_step(self.net.params_mut(), &self.config.adam())?;
            self.step += 1;
        }
        self.epoch = epoch;
        let n = slices.len() as f64;
        self.log.push(EpochRecord {
            epoch,
            step: self.step,
            total: sum_total / n,
            per_stage: sum_stage
                .into_iter()
                .map(|s| StageMetrics { ce: s.ce / n, tmse: s.tmse / n })
                .collect(),
            elapsed_ms: self.started.elapsed().as_millis(),
        });
        let rec = self.log.last().expect("just pushed");
        if self.config.log_every > 0 && epoch.is_multiple_of(self.config.log_every) {
            eprintln!("epoch {epoch:>4}  step {:>6}  loss {:.6}", rec.step, rec.total);
        }
        Ok(rec)
    }

    pub fn run(&mut self, slices: &[Slice]) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch(slices)?;
        }
        Ok(())
    }
}

fn clip_grad_norm(net: &mut MsTcnNet, max_norm: f64) {
    let norm = net
        .params()
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in net.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Cuts every recording into training slices per `config`.
pub fn training_slices(config: &TrainConfig, dataset: &[&LabeledSeries]) -> Result<Vec<Slice>> {
    let mut out = Vec::new();
    for rec in dataset {
        let rate = rec.series.sample_rate_hz;
        config.validate(rate)?;
        out.extend(slice_sequence(rec, config.slice_samples(rate), config.stride_samples(rate))?);
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub net: MsTcnNet,
    pub log: Vec<EpochRecord>,
}

/// Slices `dataset`, builds a model from `config`, and trains for
/// `config.epochs` epochs.
pub fn train(config: &TrainConfig, dataset: &[&LabeledSeries]) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(invalid("empty training dataset"));
    }
    let slices = training_slices(config, dataset)?;
    if slices.is_empty() {
        return Err(invalid("every recording is shorter than one training slice"));
    }
    let mut trainer = Trainer::new(config.clone())?;
    trainer.run(&slices)?;
    let log = trainer.log().to_vec();
    Ok(TrainOutcome {
        net: trainer.into_net(),
        log,
    })
}

/// Whole-sequence forward pass (no slicing); returns every stage's output.
pub fn predict(net: &MsTcnNet, series: &MultichannelSeries) -> Result<Vec<StageOutput>> {
    if series.num_channels() != net.config.in_channels {
        return Err(contract(format!(
            "series has {} channels, model expects {}",
            series.num_channels(),
            net.config.in_channels
        )));
    }
    net.forward(&series.samples)
}

/// Fraction of samples whose final-stage argmax equals the label.
pub fn sample_accuracy(net: &MsTcnNet, inputs: &crate::tensor::Tensor, labels: &[usize]) -> Result<f64> {
    let probs = net.predict(inputs)?;
    let pred = crate::metrics::decode(&probs);
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}
