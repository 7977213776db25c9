//! Single-stage and multi-stage temporal convolutional networks.
//!
//! A stage is a 1×1 input projection to `D` filters, `L` residual blocks
//! (dilated conv with dilation `2^ℓ` → ReLU → 1×1 conv → residual add) and a
//! 1×1 head to `C` class logits followed by a softmax. Stages after the first
//! take the previous stage's probabilities as input.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid, Result};
use crate::loss::{total_loss_with_grads, LossBreakdown, LossOptions, Normalization};
use crate::ops;
use crate::tensor::{ParamTensor, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_stages: usize,
    pub layers_per_stage: usize,
    pub num_filters: usize,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_stages: 4,
            layers_per_stage: 12,
            num_filters: 64,
            kernel_size: 3,
            in_channels: 6,
            num_classes: 9,
            lambda: 0.15,
            tau: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_stages", self.num_stages),
            ("layers_per_stage", self.layers_per_stage),
            ("num_filters", self.num_filters),
            ("in_channels", self.in_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(invalid(format!("kernel_size must be odd and positive, got {}", self.kernel_size)));
        }
        if self.num_classes < 2 {
            return Err(invalid("num_classes must be >= 2"));
        }
        if self.layers_per_stage > 40 {
            return Err(invalid("layers_per_stage > 40 overflows the dilation schedule"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda must be a non-negative number"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid("tau must be positive"));
        }
        Ok(())
    }

    pub fn loss_options(&self, ce_norm: Normalization, detach_prev: bool) -> LossOptions {
        LossOptions {
            lambda: self.lambda,
            tau: self.tau,
            ce_norm,
            detach_prev,
        }
    }

    /// Receptive field of one stage for this kernel size.
    pub fn stage_receptive_field(&self) -> u64 {
        (self.kernel_size as u64 - 1) * ((1u64 << self.layers_per_stage) - 1) + 1
    }
}

/// Receptive field of `layers` stacked kernel-3 layers with doubling
/// dilation: `2^(L+1) − 1`.
pub fn receptive_field(layers: usize) -> Result<u64> {
    if layers < 1 {
        return Err(invalid("receptive field needs at least one layer"));
    }
    if layers > 62 {
        return Err(invalid("receptive field overflows u64"));
    }
    Ok((1u64 << (layers + 1)) - 1)
}

fn stage_parameters(cin: usize, cfg: &ModelConfig) -> u64 {
    let (d, k, c) = (cfg.num_filters as u64, cfg.kernel_size as u64, cfg.num_classes as u64);
    let input = cin as u64 * d + d;
    let block = k * d * d + d + d * d + d;
    let head = d * c + c;
    input + cfg.layers_per_stage as u64 * block + head
}

/// Exact number of trainable scalars in a network built from `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> u64 {
    if cfg.num_stages == 0 {
        return 0;
    }
    stage_parameters(cfg.in_channels, cfg)
        + (cfg.num_stages as u64 - 1) * stage_parameters(cfg.num_classes, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pointwise {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub dilation: usize,
    pub dilated_weight: ParamTensor,
    pub dilated_bias: ParamTensor,
    pub pointwise: Pointwise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageNet {
    pub input_projection: Pointwise,
    pub blocks: Vec<ResidualBlock>,
    pub output_head: Pointwise,
}

/// Forward activations of one stage kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StageCache {
    input: Tensor,
    block_inputs: Vec<Tensor>,
    pre_activations: Vec<Tensor>,
    activations: Vec<Tensor>,
    features: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

impl StageCache {
    /// Which ReLU units are active, block by block in row-major order.
    pub fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.pre_activations.iter().flat_map(|a| a.data().iter().map(|&v| v > 0.0))
    }
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub logits: Tensor,
    pub probs: Tensor,
}

fn uniform_param(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamTensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    ParamTensor::new(Tensor::new(shape.to_vec(), data).expect("consistent shape"))
}

fn zero_param(shape: &[usize]) -> ParamTensor {
    ParamTensor::new(Tensor::zeros(shape))
}

impl Pointwise {
    fn init(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Pointwise {
            weight: uniform_param(&[cin, cout], cin, rng),
            bias: zero_param(&[cout]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::pointwise_conv(x, &self.weight.value, &self.bias.value)
    }

    fn backward(&mut self, x: &Tensor, grad_out: &Tensor, scale: f64) -> Result<Tensor> {
        let g = ops::pointwise_conv_backward(x, &self.weight.value, grad_out)?;
        accumulate(&mut self.weight, &g.weight, scale);
        accumulate(&mut self.bias, &g.bias, scale);
        Ok(g.input)
    }
}

fn accumulate(p: &mut ParamTensor, g: &Tensor, scale: f64) {
    for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
        *a += scale * b;
    }
}

impl StageNet {
    fn init(cin: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.num_filters;
        let k = cfg.kernel_size;
        let input_projection = Pointwise::init(cin, d, rng);
        let blocks = (0..cfg.layers_per_stage)
            .map(|l| ResidualBlock {
                dilation: 1 << l,
                dilated_weight: uniform_param(&[k, d, d], k * d, rng),
                dilated_bias: zero_param(&[d]),
                pointwise: Pointwise::init(d, d, rng),
            })
            .collect();
        let output_head = Pointwise::init(d, cfg.num_classes, rng);
        StageNet {
            input_projection,
            blocks,
            output_head,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.input_projection.weight.value.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.output_head.weight.value.shape()[1]
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, cin) = x.expect_matrix("stage input")?;
        if cin != self.in_channels() {
            return Err(contract(format!(
                "stage expects {} input channels, got {cin}",
                self.in_channels()
            )));
        }
        Ok(())
    }

    /// Inference forward pass; keeps no intermediate activations.
    pub fn forward(&self, x: &Tensor) -> Result<StageOutput> {
        self.check_input(x)?;
        let mut h = self.input_projection.forward(x)?;
        for block in &self.blocks {
            let a = ops::conv1d_dilated(&h, &block.dilated_weight.value, &block.dilated_bias.value, block.dilation)?;
            let o = block.pointwise.forward(&ops::relu(&a))?;
            h = ops::residual_add(&h, &o)?;
        }
        let logits = self.output_head.forward(&h)?;
        let probs = ops::softmax_over_classes(&logits)?;
        Ok(StageOutput { logits, probs })
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<StageCache> {
        self.check_input(x)?;
        let mut h = self.input_projection.forward(x)?;
        let n = self.blocks.len();
        let mut block_inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut activations = Vec::with_capacity(n);
        for block in &self.blocks {
            let a = ops::conv1d_dilated(&h, &block.dilated_weight.value, &block.dilated_bias.value, block.dilation)?;
            let r = ops::relu(&a);
            let o = block.pointwise.forward(&r)?;
            let next = ops::residual_add(&h, &o)?;
            block_inputs.push(h);
            pre_activations.push(a);
            activations.push(r);
            h = next;
        }
        let logits = self.output_head.forward(&h)?;
        let probs = ops::softmax_over_classes(&logits)?;
        Ok(StageCache {
            input: x.clone(),
            block_inputs,
            pre_activations,
            activations,
            features: h,
            logits,
            probs,
        })
    }

    /// Accumulates `scale ×` parameter gradients and returns the gradient
    /// with respect to the stage input.
    pub fn backward(&mut self, cache: &StageCache, grad_probs: &Tensor, scale: f64) -> Result<Tensor> {
        let g_logits = ops::softmax_backward(&cache.probs, grad_probs)?;
        let mut gh = self.output_head.backward(&cache.features, &g_logits, scale)?;
        for (l, block) in self.blocks.iter_mut().enumerate().rev() {
            // h_out = h_in + pw(relu(conv(h_in)))
            let g_act = block.pointwise.backward(&cache.activations[l], &gh, scale)?;
            let g_pre = ops::relu_backward(&cache.pre_activations[l], &g_act)?;
            let g = ops::conv1d_dilated_backward(&cache.block_inputs[l], &block.dilated_weight.value, block.dilation, &g_pre)?;
            accumulate(&mut block.dilated_weight, &g.weight, scale);
            accumulate(&mut block.dilated_bias, &g.bias, scale);
            let (skip, _) = ops::residual_add_backward(&gh);
            gh = ops::residual_add(&skip, &g.input)?;
        }
        self.input_projection.backward(&cache.input, &gh, scale)
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = vec![&mut self.input_projection.weight, &mut self.input_projection.bias];
        for b in &mut self.blocks {
            out.push(&mut b.dilated_weight);
            out.push(&mut b.dilated_bias);
            out.push(&mut b.pointwise.weight);
            out.push(&mut b.pointwise.bias);
        }
        out.push(&mut self.output_head.weight);
        out.push(&mut self.output_head.bias);
        out
    }

    fn params(&self) -> Vec<&ParamTensor> {
        let mut out = vec![&self.input_projection.weight, &self.input_projection.bias];
        for b in &self.blocks {
            out.extend([&b.dilated_weight, &b.dilated_bias, &b.pointwise.weight, &b.pointwise.bias]);
        }
        out.extend([&self.output_head.weight, &self.output_head.bias]);
        out
    }

    fn param_names(&self, stage: usize) -> Vec<String> {
        let mut out = vec![format!("stage{stage}.input.weight"), format!("stage{stage}.input.bias")];
        for l in 0..self.blocks.len() {
            for suffix in ["dilated.weight", "dilated.bias", "pointwise.weight", "pointwise.bias"] {
                out.push(format!("stage{stage}.block{l}.{suffix}"));
            }
        }
        out.push(format!("stage{stage}.head.weight"));
        out.push(format!("stage{stage}.head.bias"));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsTcnNet {
    pub config: ModelConfig,
    pub stages: Vec<StageNet>,
}

/// Builds a network with fan-in uniform weights and zero biases.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<MsTcnNet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stages = (0..config.num_stages)
        .map(|s| {
            let cin = if s == 0 { config.in_channels } else { config.num_classes };
            StageNet::init(cin, config, &mut rng)
        })
        .collect();
    Ok(MsTcnNet {
        config: config.clone(),
        stages,
    })
}

impl MsTcnNet {
    /// Runs every stage; element `s` is fed the probabilities of `s − 1`.
    /// The last element's probabilities are the prediction.
    pub fn forward(&self, series: &Tensor) -> Result<Vec<StageOutput>> {
        let mut outputs: Vec<StageOutput> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let out = match outputs.last() {
                None => stage.forward(series)?,
                Some(prev) => stage.forward(&prev.probs)?,
            };
            outputs.push(out);
        }
        Ok(outputs)
    }

    pub fn predict(&self, series: &Tensor) -> Result<Tensor> {
        let mut outs = self.forward(series)?;
        Ok(outs.pop().expect("at least one stage").probs)
    }

    pub fn forward_cached(&self, series: &Tensor) -> Result<Vec<StageCache>> {
        let mut caches: Vec<StageCache> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let cache = match caches.last() {
                None => stage.forward_cached(series)?,
                Some(prev) => stage.forward_cached(&prev.probs)?,
            };
            caches.push(cache);
        }
        Ok(caches)
    }

    /// Backpropagates per-stage probability gradients through all stages,
    /// accumulating `scale ×` gradients into the parameters.
    pub fn backward(&mut self, caches: &[StageCache], mut grad_probs: Vec<Tensor>, scale: f64) -> Result<()> {
        if caches.len() != self.stages.len() || grad_probs.len() != self.stages.len() {
            return Err(contract("one cache and one gradient per stage required"));
        }
        for s in (0..self.stages.len()).rev() {
            let g_in = self.stages[s].backward(&caches[s], &grad_probs[s], scale)?;
            if s > 0 {
                let prev = &mut grad_probs[s - 1];
                for (a, b) in prev.data_mut().iter_mut().zip(g_in.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    /// Forward, total loss, and backward for one labelled sequence.
    /// Parameter gradients are accumulated with weight `scale`.
    pub fn accumulate_gradients(&mut self, series: &Tensor, labels: &[usize], opts: &LossOptions, scale: f64) -> Result<LossBreakdown> {
        let caches = self.forward_cached(series)?;
        let probs: Vec<&Tensor> = caches.iter().map(|c| &c.probs).collect();
        let (breakdown, grads) = total_loss_with_grads(&probs, labels, opts)?;
        self.backward(&caches, grads, scale)?;
        Ok(breakdown)
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.stages.iter_mut().flat_map(|s| s.params_mut()).collect()
    }

    /// Stable parameter names, in the same order as [`Self::params`].
    pub fn param_names(&self) -> Vec<String> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.param_names(i))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(ParamTensor::zero_grad);
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.data().iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(contract(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_parameters()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.numel();
            p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_stages: 1,
            layers_per_stage: 2,
            num_filters: 4,
            kernel_size: 3,
            in_channels: 2,
            num_classes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn receptive_field_values() {
        assert_eq!(receptive_field(12).unwrap(), 8191);
        assert_eq!(receptive_field(1).unwrap(), 3);
        assert_eq!(receptive_field(4).unwrap(), 31);
        assert!(receptive_field(0).is_err());
        let cfg = ModelConfig { layers_per_stage: 7, ..Default::default() };
        assert_eq!(cfg.stage_receptive_field(), receptive_field(7).unwrap());
    }

    #[test]
    fn tiny_parameter_count() {
        assert_eq!(count_parameters(&tiny()), 171);
        let net = build_model(&tiny(), 1).unwrap();
        assert_eq!(net.num_parameters(), 171);
    }

    #[test]
    fn stage_additivity() {
        let one = ModelConfig { num_stages: 2, ..tiny() };
        let two = ModelConfig { num_stages: 4, ..tiny() };
        let refinement = count_parameters(&ModelConfig { in_channels: 3, ..tiny() });
        assert_eq!(count_parameters(&two) - count_parameters(&one), 2 * refinement);
    }

    #[test]
    fn build_is_deterministic_and_structured() {
        let cfg = ModelConfig { num_stages: 4, num_classes: 7, num_filters: 8, layers_per_stage: 3, ..Default::default() };
        let a = build_model(&cfg, 42).unwrap();
        let b = build_model(&cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flat_values(), build_model(&cfg, 43).unwrap().flat_values());
        assert_eq!(a.stages[0].in_channels(), 6);
        for s in &a.stages[1..] {
            assert_eq!(s.input_projection.weight.value.shape(), &[7, 8]);
        }
        let dil: Vec<usize> = a.stages[0].blocks.iter().map(|b| b.dilation).collect();
        assert_eq!(dil, vec![1, 2, 4]);
        let single = build_model(&ModelConfig { num_stages: 1, ..cfg }, 0).unwrap();
        assert_eq!(single.stages.len(), 1);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            ModelConfig { num_stages: 0, ..tiny() },
            ModelConfig { kernel_size: 4, ..tiny() },
            ModelConfig { num_classes: 1, ..tiny() },
            ModelConfig { tau: 0.0, ..tiny() },
            ModelConfig { lambda: -1.0, ..tiny() },
        ] {
            assert!(matches!(build_model(&cfg, 0), Err(crate::Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn zero_head_gives_uniform_probs() {
        let mut net = build_model(&tiny(), 3).unwrap();
        net.stages[0].output_head.weight.value.fill(0.0);
        let x = Tensor::full(&[9, 2], 0.4);
        let p = net.predict(&x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_sample_sequence() {
        let net = build_model(&ModelConfig { num_stages: 3, ..tiny() }, 3).unwrap();
        let outs = net.forward(&Tensor::full(&[1, 2], 1.0)).unwrap();
        assert_eq!(outs.len(), 3);
        assert!(outs.iter().all(|o| o.probs.shape() == [1, 3]));
    }

    #[test]
    fn channel_mismatch_is_contract_error() {
        let net = build_model(&tiny(), 0).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[5, 3])), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn cached_forward_matches_inference() {
        let net = build_model(&ModelConfig { num_stages: 2, ..tiny() }, 9).unwrap();
        let x = Tensor::new(vec![11, 2], (0..22).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.forward_cached(&x).unwrap();
        for (o, c) in a.iter().zip(&b) {
            assert_eq!(o.probs, c.probs);
            assert_eq!(o.logits, c.logits);
        }
    }
}
