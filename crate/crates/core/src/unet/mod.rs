//! The drag-prediction U-Net: initial convolution, a stack of encoder blocks
//! with concurrent squeeze-and-excitation, a scalar drag head, and (when
//! enabled) three mirrored velocity decoders with skip connections.
//!
//! Block layouts:
//! - encoder block: relu -> SE -> dilated conv -> maxpool(2) -> batchnorm
//! - decoder block: relu -> SE -> stride-2 transpose conv -> batchnorm
//! - drag head: flatten -> dropout -> dense -> relu -> dropout -> batchnorm
//!   -> dense(1)
//!
//! Channel widths double per block from `base_width`, capped at
//! `max_channels`. The exact widths of the reference model are not public;
//! these knobs exist so parameter counts can be swept.

use crate::autodiff::{AdError, BnMode, BnState, ConvSpec, NodeId, Scalar, Tape, Tensor};
use crate::geom::standard_normal;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Transpose convolutions use k=4, s=2, p=1: exact 2x upsampling.
const TCONV_KERNEL: usize = 4;

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Network input extents (x, y, z); x is the long axis by convention.
    pub input_dims: [u32; 3],
    /// Channels after the initial convolution.
    pub base_width: usize,
    /// Per-block channel growth factor.
    pub channel_multiplier: f64,
    /// Upper bound on any block's channel count.
    pub max_channels: usize,
    /// Number of encoder blocks; each halves every spatial extent.
    pub depth: usize,
    /// Encoder convolution kernel size (odd, so spatial size is preserved).
    pub kernel_size: usize,
    /// Encoder convolution dilation.
    pub dilation: usize,
    /// Squeeze-and-excitation channel reduction ratio.
    pub se_reduction: usize,
    /// Dropout rate in the drag head.
    pub dropout_rate: f64,
    /// Hidden width of the drag head.
    pub head_hidden: usize,
    /// Build the three velocity decoders.
    pub predict_fields: bool,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_dims: [64, 16, 16],
            base_width: 8,
            channel_multiplier: 2.0,
            max_channels: 256,
            depth: 3,
            kernel_size: 3,
            dilation: 2,
            se_reduction: 4,
            dropout_rate: 0.1,
            head_hidden: 64,
            predict_fields: false,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), UNetError> {
        if self.depth < 1 {
            return Err(UNetError::Config("depth must be >= 1".into()));
        }
        if self.base_width < 1 {
            return Err(UNetError::Config("base_width must be >= 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(UNetError::Config(format!(
                "kernel_size must be odd to preserve spatial extents, got {}",
                self.kernel_size
            )));
        }
        if self.channel_multiplier < 1.0 {
            return Err(UNetError::Config("channel_multiplier must be >= 1".into()));
        }
        if self.se_reduction < 1 {
            return Err(UNetError::Config("se_reduction must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(UNetError::Config(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        let div = 1u32 << self.depth;
        for (axis, &d) in self.input_dims.iter().enumerate() {
            if d == 0 || d % div != 0 {
                return Err(UNetError::Config(format!(
                    "input dim {axis} = {d} must be a positive multiple of 2^depth = {div}"
                )));
            }
        }
        Ok(())
    }

    /// Channel width after block `i` (i = 0 is the initial convolution).
    pub fn channels(&self, i: usize) -> usize {
        let mut c = self.base_width as f64;
        for _ in 0..i {
            c = (c * self.channel_multiplier).round();
        }
        (c as usize).min(self.max_channels).max(1)
    }

    /// Spatial extents at level `i` (after `i` halvings).
    pub fn spatial(&self, i: usize) -> [usize; 3] {
        let div = 1usize << i;
        [
            self.input_dims[0] as usize / div,
            self.input_dims[1] as usize / div,
            self.input_dims[2] as usize / div,
        ]
    }

    fn flat_bottleneck(&self) -> usize {
        let s = self.spatial(self.depth);
        self.channels(self.depth) * s[0] * s[1] * s[2]
    }

    fn se_reduced(&self, channels: usize) -> usize {
        (channels / self.se_reduction).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    HeNormal { fan_in: usize },
    Zero,
    One,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Parameter and batch-norm layout derived deterministically from the
/// config; the model builder and the closed-form parameter count walk the
/// same plan.
#[derive(Debug, Clone)]
pub struct LayerPlan {
    params: Vec<ParamSpec>,
    /// (name, channel count) per batchnorm layer, in forward order.
    bn_layers: Vec<(String, usize)>,
}

fn plan(config: &UNetConfig) -> LayerPlan {
    let mut params = Vec::new();
    let mut bn_layers = Vec::new();
    let k = config.kernel_size;

    fn conv(params: &mut Vec<ParamSpec>, name: &str, f: usize, c: usize, kd: usize, bias: bool) {
        params.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![f, c, kd, kd, kd],
            init: Init::HeNormal { fan_in: c * kd * kd * kd },
        });
        if bias {
            params.push(ParamSpec {
                name: format!("{name}.b"),
                shape: vec![f],
                init: Init::Zero,
            });
        }
    }
    fn dense(params: &mut Vec<ParamSpec>, name: &str, k_in: usize, m: usize) {
        params.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![k_in, m],
            init: Init::HeNormal { fan_in: k_in },
        });
        params.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![m],
            init: Init::Zero,
        });
    }
    fn bn(params: &mut Vec<ParamSpec>, bn_layers: &mut Vec<(String, usize)>, name: &str, c: usize) {
        params.push(ParamSpec {
            name: format!("{name}.gamma"),
            shape: vec![c],
            init: Init::One,
        });
        params.push(ParamSpec {
            name: format!("{name}.beta"),
            shape: vec![c],
            init: Init::Zero,
        });
        bn_layers.push((name.to_string(), c));
    }
    fn se(params: &mut Vec<ParamSpec>, name: &str, c: usize, reduced: usize) {
        dense(params, &format!("{name}.fc1"), c, reduced);
        dense(params, &format!("{name}.fc2"), reduced, c);
        conv(params, &format!("{name}.spatial"), 1, c, 1, true);
    }

    conv(&mut params, "stem.conv", config.channels(0), 1, 3, true);

    for i in 1..=config.depth {
        let cin = config.channels(i - 1);
        let cout = config.channels(i);
        let name = format!("enc{i}");
        se(&mut params, &format!("{name}.se"), cin, config.se_reduced(cin));
        // No conv bias: the following batchnorm would cancel it exactly
        // (maxpool is shift-equivariant), leaving a dead parameter.
        conv(&mut params, &format!("{name}.conv"), cout, cin, k, false);
        bn(&mut params, &mut bn_layers, &format!("{name}.bn"), cout);
    }

    dense(&mut params, "head.fc1", config.flat_bottleneck(), config.head_hidden);
    bn(&mut params, &mut bn_layers, "head.bn", config.head_hidden);
    dense(&mut params, "head.fc2", config.head_hidden, 1);

    if config.predict_fields {
        for d in 0..3 {
            for i in (1..=config.depth).rev() {
                let cin = if i == config.depth {
                    config.channels(config.depth)
                } else {
                    2 * config.channels(i)
                };
                let cout = config.channels(i - 1);
                let name = format!("dec{d}.lvl{i}");
                se(&mut params, &format!("{name}.se"), cin, config.se_reduced(cin));
                // transpose conv kernel layout [Cin, Cout, k, k, k]; no bias
                // for the same batchnorm-cancellation reason as the encoder
                params.push(ParamSpec {
                    name: format!("{name}.tconv.w"),
                    shape: vec![cin, cout, TCONV_KERNEL, TCONV_KERNEL, TCONV_KERNEL],
                    init: Init::HeNormal { fan_in: cin * TCONV_KERNEL.pow(3) },
                });
                bn(&mut params, &mut bn_layers, &format!("{name}.bn"), cout);
            }
            conv(&mut params, &format!("dec{d}.out"), 1, config.channels(0), 1, true);
        }
    }

    LayerPlan { params, bn_layers }
}

/// Closed-form trainable parameter count for a config (sum over the layer
/// plan; running batch-norm statistics are state, not parameters).
pub fn parameter_count(config: &UNetConfig) -> usize {
    plan(config)
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

/// Named parameter store plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct UNetModel<T: Scalar> {
    config: UNetConfig,
    plan: LayerPlan,
    params: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    bn_states: Vec<BnState<T>>,
    bn_index: HashMap<String, usize>,
}

/// Tape handles for one forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    pub cd: NodeId,
    pub fields: Option<NodeId>,
}

impl<T: Scalar> UNetModel<T> {
    pub fn new(config: UNetConfig) -> Result<Self, UNetError> {
        config.validate()?;
        let plan = plan(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::with_capacity(plan.params.len());
        let mut index = HashMap::new();
        for (i, spec) in plan.params.iter().enumerate() {
            let t = match spec.init {
                Init::Zero => Tensor::zeros(&spec.shape),
                Init::One => Tensor::filled(&spec.shape, T::ONE),
                Init::HeNormal { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| T::from_f64(std * standard_normal(&mut rng)))
                }
            };
            assert!(
                index.insert(spec.name.clone(), i).is_none(),
                "duplicate parameter name {}",
                spec.name
            );
            params.push(t);
        }
        let mut bn_states = Vec::with_capacity(plan.bn_layers.len());
        let mut bn_index = HashMap::new();
        for (i, (name, c)) in plan.bn_layers.iter().enumerate() {
            bn_states.push(BnState::new(*c));
            bn_index.insert(name.clone(), i);
        }
        Ok(UNetModel { config, plan, params, index, bn_states, bn_index })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.plan
            .params
            .iter()
            .zip(&self.params)
            .map(|(spec, t)| (spec.name.as_str(), t))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.plan
            .params
            .iter()
            .zip(self.params.iter_mut())
            .map(|(spec, t)| (spec.name.as_str(), t))
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = (&str, &BnState<T>)> {
        self.plan
            .bn_layers
            .iter()
            .zip(&self.bn_states)
            .map(|((name, _), s)| (name.as_str(), s))
    }

    pub fn bn_layer_mut(&mut self, name: &str) -> Option<&mut BnState<T>> {
        self.bn_index.get(name).map(|&i| &mut self.bn_states[i])
    }

    /// Total elements across the parameter store; equals
    /// [`parameter_count`] of the config exactly.
    pub fn stored_parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Registers every parameter as a tape leaf (clone), in plan order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect()
    }

    /// Parameter index in plan/bind order for a name.
    pub fn param_slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn cast<U: Scalar>(&self) -> UNetModel<U> {
        UNetModel {
            config: self.config.clone(),
            plan: self.plan.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            index: self.index.clone(),
            bn_states: self.bn_states.iter().map(|s| s.cast()).collect(),
            bn_index: self.bn_index.clone(),
        }
    }

    /// Builds the network on `tape` from a bound parameter list. Train mode
    /// updates batch-norm running statistics and applies dropout (seeded by
    /// `dropout_seed`); eval mode is deterministic.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: NodeId,
        param_ids: &[NodeId],
        mode: BnMode,
        dropout_seed: u64,
    ) -> Result<ForwardOutput, UNetError> {
        let mut bn_states = std::mem::take(&mut self.bn_states);
        let result = forward_impl(
            &self.config,
            &self.index,
            &self.bn_index,
            &mut bn_states,
            tape,
            input,
            param_ids,
            mode,
            dropout_seed,
            false,
        );
        self.bn_states = bn_states;
        result
    }

    /// Eval-mode forward that leaves the model untouched (running stats are
    /// cloned locally), usable from shared references in parallel scans.
    pub fn forward_eval(
        &self,
        tape: &mut Tape<T>,
        input: NodeId,
        param_ids: &[NodeId],
    ) -> Result<ForwardOutput, UNetError> {
        let mut bn_states = self.bn_states.clone();
        forward_impl(
            &self.config,
            &self.index,
            &self.bn_index,
            &mut bn_states,
            tape,
            input,
            param_ids,
            BnMode::Eval,
            0,
            false,
        )
    }

    #[cfg(test)]
    pub(crate) fn forward_eval_zero_skips(
        &self,
        tape: &mut Tape<T>,
        input: NodeId,
        param_ids: &[NodeId],
    ) -> Result<ForwardOutput, UNetError> {
        let mut bn_states = self.bn_states.clone();
        forward_impl(
            &self.config,
            &self.index,
            &self.bn_index,
            &mut bn_states,
            tape,
            input,
            param_ids,
            BnMode::Eval,
            0,
            true,
        )
    }

    /// Convenience inference: drag coefficients for a `[N,1,D,H,W]` batch.
    pub fn predict_cd(&self, batch: &Tensor<T>) -> Result<Vec<T>, UNetError> {
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let ids = self.bind(&mut tape, false);
        let out = self.forward_eval(&mut tape, input, &ids)?;
        Ok(tape.value(out.cd).data().to_vec())
    }

    /// Convenience inference returning the velocity fields too.
    pub fn predict_with_fields(
        &self,
        batch: &Tensor<T>,
    ) -> Result<(Vec<T>, Option<Tensor<T>>), UNetError> {
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let ids = self.bind(&mut tape, false);
        let out = self.forward_eval(&mut tape, input, &ids)?;
        let cd = tape.value(out.cd).data().to_vec();
        let fields = out.fields.map(|f| tape.value(f).clone());
        Ok((cd, fields))
    }
}

/// Concurrent squeeze-and-excitation: channel gate (GAP -> fc -> relu -> fc
/// -> sigmoid) and spatial gate (1x1x1 conv -> sigmoid), combined by
/// elementwise maximum of the two recalibrated maps.
fn se_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    pid: &dyn Fn(&str) -> usize,
    param_ids: &[NodeId],
    name: &str,
) -> Result<NodeId, AdError> {
    let batch = tape.value(x).shape()[0];
    let channels = tape.value(x).shape()[1];
    let pooled = tape.global_avg_pool(x)?;
    let h = tape.dense(
        pooled,
        param_ids[pid(&format!("{name}.fc1.w"))],
        Some(param_ids[pid(&format!("{name}.fc1.b"))]),
    )?;
    let h = tape.relu(h);
    let h = tape.dense(
        h,
        param_ids[pid(&format!("{name}.fc2.w"))],
        Some(param_ids[pid(&format!("{name}.fc2.b"))]),
    )?;
    let gate_c = tape.sigmoid(h);
    let gate_c = tape.reshape(gate_c, &[batch, channels, 1, 1, 1])?;
    let scaled_c = tape.mul(x, gate_c)?;

    let s = tape.conv3d(
        x,
        param_ids[pid(&format!("{name}.spatial.w"))],
        Some(param_ids[pid(&format!("{name}.spatial.b"))]),
        ConvSpec::unit(),
    )?;
    let gate_s = tape.sigmoid(s);
    let scaled_s = tape.mul(x, gate_s)?;

    tape.maximum(scaled_c, scaled_s)
}

#[allow(clippy::too_many_arguments)]
fn forward_impl<T: Scalar>(
    config: &UNetConfig,
    index: &HashMap<String, usize>,
    bn_index: &HashMap<String, usize>,
    bn_states: &mut [BnState<T>],
    tape: &mut Tape<T>,
    input: NodeId,
    param_ids: &[NodeId],
    mode: BnMode,
    dropout_seed: u64,
    zero_skips: bool,
) -> Result<ForwardOutput, UNetError> {
    let in_shape = tape.value(input).shape().to_vec();
    let expect = [
        config.input_dims[0] as usize,
        config.input_dims[1] as usize,
        config.input_dims[2] as usize,
    ];
    if in_shape.len() != 5 || in_shape[1] != 1 {
        return Err(UNetError::Config(format!(
            "input must be [N,1,{},{},{}], got {in_shape:?}",
            expect[0], expect[1], expect[2]
        )));
    }
    for axis in 0..3 {
        if in_shape[2 + axis] != expect[axis] {
            return Err(UNetError::Ad(AdError::ShapeMismatch {
                op: "unet forward",
                axis: 2 + axis,
                detail: format!(
                    "input extent {} vs configured {}",
                    in_shape[2 + axis],
                    expect[axis]
                ),
            }));
        }
    }
    let pid = |name: &str| -> usize {
        *index
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    };
    let bnid = |name: &str| -> usize {
        *bn_index
            .get(name)
            .unwrap_or_else(|| panic!("missing bn layer {name}"))
    };
    let momentum = T::from_f64(0.1);
    let eps = T::from_f64(1e-5);
    let train = mode == BnMode::Train;

    let stem_spec = ConvSpec { stride: 1, padding: 1, dilation: 1 };
    let mut x = tape.conv3d(
        input,
        param_ids[pid("stem.conv.w")],
        Some(param_ids[pid("stem.conv.b")]),
        stem_spec,
    )?;

    let conv_spec = ConvSpec {
        stride: 1,
        padding: config.dilation * (config.kernel_size - 1) / 2,
        dilation: config.dilation,
    };
    let mut skips: Vec<NodeId> = Vec::with_capacity(config.depth);
    for i in 1..=config.depth {
        let name = format!("enc{i}");
        let r = tape.relu(x);
        let s = se_block(tape, r, &pid, param_ids, &format!("{name}.se"))?;
        let c = tape.conv3d(s, param_ids[pid(&format!("{name}.conv.w"))], None, conv_spec)?;
        let p = tape.maxpool3d(c, 2, 2)?;
        let b = tape.batchnorm(
            p,
            param_ids[pid(&format!("{name}.bn.gamma"))],
            param_ids[pid(&format!("{name}.bn.beta"))],
            &mut bn_states[bnid(&format!("{name}.bn"))],
            mode,
            momentum,
            eps,
        )?;
        skips.push(b);
        x = b;
    }
    let bottleneck = x;

    let flat = tape.flatten(bottleneck)?;
    let d1 = tape.dropout(flat, config.dropout_rate, train, dropout_seed ^ 0x6865_6164)?;
    let fc1 = tape.dense(
        d1,
        param_ids[pid("head.fc1.w")],
        Some(param_ids[pid("head.fc1.b")]),
    )?;
    let r = tape.relu(fc1);
    let d2 = tape.dropout(r, config.dropout_rate, train, dropout_seed ^ 0x6472_6f70)?;
    let hb = tape.batchnorm(
        d2,
        param_ids[pid("head.bn.gamma")],
        param_ids[pid("head.bn.beta")],
        &mut bn_states[bnid("head.bn")],
        mode,
        momentum,
        eps,
    )?;
    let cd = tape.dense(
        hb,
        param_ids[pid("head.fc2.w")],
        Some(param_ids[pid("head.fc2.b")]),
    )?;

    let fields = if config.predict_fields {
        let tconv_spec = ConvSpec { stride: 2, padding: 1, dilation: 1 };
        let mut components = Vec::with_capacity(3);
        for d in 0..3 {
            let mut u = bottleneck;
            for i in (1..=config.depth).rev() {
                let name = format!("dec{d}.lvl{i}");
                let block_in = if i == config.depth {
                    u
                } else {
                    let skip = if zero_skips {
                        let shape = tape.value(skips[i - 1]).shape().to_vec();
                        tape.constant(Tensor::zeros(&shape))
                    } else {
                        skips[i - 1]
                    };
                    tape.concat(&[u, skip])?
                };
                let r = tape.relu(block_in);
                let s = se_block(tape, r, &pid, param_ids, &format!("{name}.se"))?;
                let t = tape.conv3d_transpose(
                    s,
                    param_ids[pid(&format!("{name}.tconv.w"))],
                    None,
                    tconv_spec,
                )?;
                u = tape.batchnorm(
                    t,
                    param_ids[pid(&format!("{name}.bn.gamma"))],
                    param_ids[pid(&format!("{name}.bn.beta"))],
                    &mut bn_states[bnid(&format!("{name}.bn"))],
                    mode,
                    momentum,
                    eps,
                )?;
            }
            let out = tape.conv3d(
                u,
                param_ids[pid(&format!("dec{d}.out.w"))],
                Some(param_ids[pid(&format!("dec{d}.out.b"))]),
                ConvSpec::unit(),
            )?;
            components.push(out);
        }
        Some(tape.concat(&components)?)
    } else {
        None
    };

    Ok(ForwardOutput { cd, fields })
}

#[cfg(test)]
mod tests;
