//! The main classifier: a validated layer plan plus a forward pass that
//! consumes an externally supplied parameter bundle.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{shape_numel, Scalar, Tensor};

fn one() -> usize {
    1
}

/// One layer of the classifier as written in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        generated: bool,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm { channels: usize },
    Relu {},
    #[serde(rename = "maxpool")]
    MaxPool { window: usize, stride: usize },
    #[serde(rename = "avgpool")]
    AvgPool { window: usize, stride: usize },
    Fc {
        in_features: usize,
        out_features: usize,
        #[serde(default)]
        generated: bool,
    },
    /// Residual connection: adds the output of an earlier layer.
    Add { from: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu {} => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Fc { .. } => "fc",
            LayerSpec::Add { .. } => "add",
        }
    }

    pub fn is_generated(&self) -> bool {
        matches!(self, LayerSpec::Conv { generated: true, .. })
    }
}

/// Fixed shape of one hypernetwork output block: `channels × channels × kernel × kernel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitShape {
    pub channels: usize,
    pub kernel: usize,
}

impl UnitShape {
    pub fn new(channels: usize, kernel: usize) -> Self {
        Self { channels, kernel }
    }

    pub fn len(&self) -> usize {
        self.channels * self.channels * self.kernel * self.kernel
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layer list in the form accepted by [`build_plan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDescription {
    /// C×H×W of one input example.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackbonePlan {
    desc: PlanDescription,
    unit: UnitShape,
    /// Per-example output shape of every layer.
    output_shapes: Vec<Vec<usize>>,
    conv_bias: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
    FcWeight,
    FcBias,
}

impl ParamRole {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamRole::ConvWeight => "conv.weight",
            ParamRole::ConvBias => "conv.bias",
            ParamRole::BnScale => "bn.scale",
            ParamRole::BnShift => "bn.shift",
            ParamRole::BnRunningMean => "bn.running_mean",
            ParamRole::BnRunningVar => "bn.running_var",
            ParamRole::FcWeight => "fc.weight",
            ParamRole::FcBias => "fc.bias",
        }
    }

    /// Running statistics are state, not parameters.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Generated,
    Direct,
}

/// Which partition [`count_params`] should count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    All,
    Generated,
    Direct,
}

/// Shape and partition of one parameter slot required by a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub layer: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub partition: Partition,
}

impl ParamSlot {
    pub fn name(&self) -> String {
        param_name(self.layer, self.role)
    }
}

pub fn param_name(layer: usize, role: ParamRole) -> String {
    format!("layer{layer}.{}", role.suffix())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

fn plan_err(idx: usize, spec: &LayerSpec, msg: impl fmt::Display) -> Error {
    Error::Plan(format!("layers[{idx}] ({}): {msg}", spec.kind()))
}

/// Validates a layer description and propagates shapes through it.
pub fn build_plan(desc: PlanDescription, unit: UnitShape) -> Result<BackbonePlan> {
    if desc.input_shape.iter().any(|&d| d == 0) {
        return Err(Error::Plan(format!("input shape {:?} has a zero extent", desc.input_shape)));
    }
    if desc.num_classes < 2 {
        return Err(Error::Plan(format!("num_classes {} < 2", desc.num_classes)));
    }
    if unit.channels == 0 || unit.kernel == 0 {
        return Err(Error::Plan(format!("unit {unit:?} has a zero extent")));
    }
    let mut shape: Vec<usize> = desc.input_shape.to_vec();
    let mut output_shapes: Vec<Vec<usize>> = Vec::with_capacity(desc.layers.len());
    let mut seen_conv = false;
    let mut fc_count = 0;
    for (idx, spec) in desc.layers.iter().enumerate() {
        if fc_count > 0 {
            return Err(plan_err(idx, spec, "layers after the fc head are not supported"));
        }
        let spatial = |shape: &[usize]| -> Result<(usize, usize, usize)> {
            match *shape {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(plan_err(idx, spec, format!("needs a C×H×W input, got {shape:?}"))),
            }
        };
        shape = match *spec {
            LayerSpec::Conv { c_in, c_out, k, stride, padding, generated } => {
                let (c, h, w) = spatial(&shape)?;
                if c_in != c {
                    return Err(plan_err(idx, spec, format!("c_in {c_in} but input has {c} channels")));
                }
                if c_out == 0 || k == 0 || stride == 0 {
                    return Err(plan_err(idx, spec, "c_out, k and stride must be positive"));
                }
                if h + 2 * padding < k || w + 2 * padding < k {
                    return Err(plan_err(idx, spec, format!("kernel {k} larger than padded input {h}×{w}")));
                }
                if generated {
                    if !seen_conv {
                        return Err(plan_err(idx, spec, "the first convolution cannot be generated"));
                    }
                    if c_out % unit.channels != 0 {
                        return Err(plan_err(idx, spec, format!("c_out {c_out} not divisible by {}", unit.channels)));
                    }
                    if c_in % unit.channels != 0 {
                        return Err(plan_err(idx, spec, format!("c_in {c_in} not divisible by {}", unit.channels)));
                    }
                    if k != unit.kernel && k != 1 {
                        return Err(plan_err(
                            idx,
                            spec,
                            format!("generated kernel {k} must be {} or 1", unit.kernel),
                        ));
                    }
                }
                seen_conv = true;
                vec![c_out, (h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1]
            }
            LayerSpec::BatchNorm { channels } => {
                let (c, _, _) = spatial(&shape)?;
                if channels != c {
                    return Err(plan_err(idx, spec, format!("{channels} channels but input has {c}")));
                }
                shape
            }
            LayerSpec::Relu {} => shape,
            LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                let (c, h, w) = spatial(&shape)?;
                if window == 0 || stride == 0 || window > h || window > w {
                    return Err(plan_err(idx, spec, format!("window {window} stride {stride} on {h}×{w}")));
                }
                vec![c, (h - window) / stride + 1, (w - window) / stride + 1]
            }
            LayerSpec::Fc { in_features, out_features, generated } => {
                if generated {
                    return Err(plan_err(idx, spec, "fully connected layers cannot be generated"));
                }
                let features = shape_numel(&shape);
                if in_features != features {
                    return Err(plan_err(idx, spec, format!("in_features {in_features} but input has {features}")));
                }
                if out_features != desc.num_classes {
                    return Err(plan_err(
                        idx,
                        spec,
                        format!("out_features {out_features} but num_classes is {}", desc.num_classes),
                    ));
                }
                fc_count += 1;
                vec![out_features]
            }
            LayerSpec::Add { from } => {
                if from >= idx {
                    return Err(plan_err(idx, spec, format!("skip source {from} is not an earlier layer")));
                }
                if output_shapes[from] != shape {
                    return Err(plan_err(
                        idx,
                        spec,
                        format!("skip source shape {:?} differs from {shape:?}", output_shapes[from]),
                    ));
                }
                shape
            }
        };
        output_shapes.push(shape.clone());
    }
    if fc_count != 1 {
        return Err(Error::Plan("plan must end in exactly one fc head".into()));
    }
    let conv_bias = desc
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            matches!(l, LayerSpec::Conv { .. })
                && !matches!(desc.layers.get(i + 1), Some(LayerSpec::BatchNorm { .. }))
        })
        .collect();
    Ok(BackbonePlan { desc, unit, output_shapes, conv_bias })
}

impl BackbonePlan {
    pub fn description(&self) -> &PlanDescription {
        &self.desc
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.desc.layers
    }

    pub fn unit(&self) -> UnitShape {
        self.unit
    }

    pub fn num_classes(&self) -> usize {
        self.desc.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.desc.input_shape
    }

    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.output_shapes[layer]
    }

    /// Indices of generated convolution layers, in plan order.
    pub fn generated_layers(&self) -> Vec<usize> {
        self.desc.layers.iter().enumerate().filter(|(_, l)| l.is_generated()).map(|(i, _)| i).collect()
    }

    pub fn has_conv_bias(&self, layer: usize) -> bool {
        self.conv_bias[layer]
    }

    /// Every parameter and state slot the plan needs, in a fixed order.
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for (layer, spec) in self.desc.layers.iter().enumerate() {
            let mut push = |role, shape: Vec<usize>, partition| {
                slots.push(ParamSlot { layer, role, shape, partition })
            };
            match *spec {
                LayerSpec::Conv { c_in, c_out, k, generated, .. } => {
                    let part = if generated { Partition::Generated } else { Partition::Direct };
                    push(ParamRole::ConvWeight, vec![c_out, c_in, k, k], part);
                    if self.conv_bias[layer] {
                        push(ParamRole::ConvBias, vec![c_out], Partition::Direct);
                    }
                }
                LayerSpec::BatchNorm { channels } => {
                    push(ParamRole::BnScale, vec![channels], Partition::Direct);
                    push(ParamRole::BnShift, vec![channels], Partition::Direct);
                    push(ParamRole::BnRunningMean, vec![channels], Partition::Direct);
                    push(ParamRole::BnRunningVar, vec![channels], Partition::Direct);
                }
                LayerSpec::Fc { in_features, out_features, .. } => {
                    push(ParamRole::FcWeight, vec![in_features, out_features], Partition::Direct);
                    push(ParamRole::FcBias, vec![out_features], Partition::Direct);
                }
                _ => {}
            }
        }
        slots
    }
}

/// Exact number of scalar parameters in the selected partition.
/// Batch-norm running statistics are not parameters and are never counted.
pub fn count_params(plan: &BackbonePlan, which: Which) -> usize {
    plan.param_slots()
        .iter()
        .filter(|s| s.role.is_trainable())
        .filter(|s| match which {
            Which::All => true,
            Which::Generated => s.partition == Partition::Generated,
            Which::Direct => s.partition == Partition::Direct,
        })
        .map(|s| shape_numel(&s.shape))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub layer: usize,
    pub role: ParamRole,
    pub partition: Partition,
    pub tensor: Tensor<T>,
}

impl<T> ParamEntry<T> {
    pub fn name(&self) -> String {
        param_name(self.layer, self.role)
    }
}

/// Named per-layer tensors of a classifier, ordered as [`BackbonePlan::param_slots`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBundle<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Default for ParamBundle<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamBundle<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn get(&self, layer: usize, role: ParamRole) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.layer == layer && e.role == role).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, layer: usize, role: ParamRole) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|e| e.layer == layer && e.role == role).map(|e| &mut e.tensor)
    }

    /// Inserts or replaces an entry, keeping (layer, role) order.
    pub fn insert(&mut self, layer: usize, role: ParamRole, partition: Partition, tensor: Tensor<T>) {
        match self.entries.binary_search_by_key(&(layer, role), |e| (e.layer, e.role)) {
            Ok(i) => self.entries[i] = ParamEntry { layer, role, partition, tensor },
            Err(i) => self.entries.insert(i, ParamEntry { layer, role, partition, tensor }),
        }
    }

    /// Total scalar count of trainable entries.
    pub fn trainable_len(&self) -> usize {
        self.entries.iter().filter(|e| e.role.is_trainable()).map(|e| e.tensor.len()).sum()
    }

    /// Checks that every slot of `partitions` is present with the right shape
    /// and that no foreign entries exist.
    pub fn check(&self, plan: &BackbonePlan, partitions: &[Partition]) -> Result<()> {
        let slots: Vec<_> = plan.param_slots().into_iter().filter(|s| partitions.contains(&s.partition)).collect();
        for slot in &slots {
            match self.get(slot.layer, slot.role) {
                None => return Err(Error::Bundle(format!("missing {}", slot.name()))),
                Some(t) if t.shape() != slot.shape.as_slice() => {
                    return Err(Error::Bundle(format!(
                        "{} has shape {:?}, plan expects {:?}",
                        slot.name(),
                        t.shape(),
                        slot.shape
                    )))
                }
                _ => {}
            }
        }
        if let Some(e) = self.entries.iter().find(|e| !slots.iter().any(|s| s.layer == e.layer && s.role == e.role)) {
            return Err(Error::Bundle(format!("unexpected entry {}", e.name())));
        }
        Ok(())
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)], momentum: T) -> Result<()> {
        for (layer, s) in stats {
            let rm = self
                .get_mut(*layer, ParamRole::BnRunningMean)
                .ok_or_else(|| Error::Bundle(format!("layer {layer}: no running mean")))?;
            for (r, &m) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = (T::one() - momentum) * *r + momentum * m;
            }
            let rv = self
                .get_mut(*layer, ParamRole::BnRunningVar)
                .ok_or_else(|| Error::Bundle(format!("layer {layer}: no running var")))?;
            for (r, &v) in rv.data_mut().iter_mut().zip(&s.var_unbiased) {
                *r = (T::one() - momentum) * *r + momentum * v;
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamBundle<U> {
        ParamBundle {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { layer: e.layer, role: e.role, partition: e.partition, tensor: e.tensor.cast() })
                .collect(),
        }
    }
}

/// Initializes the selected partitions of a plan: He-normal convolutions,
/// fan-in normal fc weights, zero biases, identity batch norm.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(
    plan: &BackbonePlan,
    partitions: &[Partition],
    rng: &mut R,
) -> ParamBundle<T> {
    let mut bundle = ParamBundle::new();
    for slot in plan.param_slots() {
        if !partitions.contains(&slot.partition) {
            continue;
        }
        let t = match slot.role {
            ParamRole::ConvWeight => {
                let fan_in = slot.shape[1] * slot.shape[2] * slot.shape[3];
                Tensor::randn(&slot.shape, (2.0 / fan_in as f64).sqrt(), rng)
            }
            ParamRole::FcWeight => Tensor::randn(&slot.shape, 1.0 / (slot.shape[0] as f64).sqrt(), rng),
            ParamRole::BnScale | ParamRole::BnRunningVar => Tensor::full(&slot.shape, T::one()),
            ParamRole::ConvBias | ParamRole::BnShift | ParamRole::FcBias | ParamRole::BnRunningMean => {
                Tensor::zeros(&slot.shape)
            }
        };
        bundle.insert(slot.layer, slot.role, slot.partition, t);
    }
    bundle
}

/// Tape variables standing in for a bundle's trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    map: BTreeMap<(usize, ParamRole), Var>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, role: ParamRole, var: Var) {
        self.map.insert((layer, role), var);
    }

    pub fn get(&self, layer: usize, role: ParamRole) -> Result<Var> {
        self.map
            .get(&(layer, role))
            .copied()
            .ok_or_else(|| Error::Bundle(format!("no binding for {}", param_name(layer, role))))
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, ParamRole), Var)> + '_ {
        self.map.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Puts every trainable entry of `bundle` on the tape.
pub fn bind<T: Scalar>(tape: &mut Tape<T>, bundle: &ParamBundle<T>, trainable: bool) -> Bindings {
    let mut b = Bindings::new();
    for e in bundle.entries().iter().filter(|e| e.role.is_trainable()) {
        let v = tape.leaf(e.tensor.clone(), trainable);
        b.insert(e.layer, e.role, v);
    }
    b
}

#[derive(Debug)]
pub struct ForwardOutput<T> {
    pub logits: Var,
    /// Batch statistics of each batch-norm layer (train mode only).
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

/// Runs the classifier on `batch` (N×C×H×W), recording onto `tape`.
///
/// Batch norm uses batch statistics in [`Mode::Train`] and the running
/// statistics stored in `state` in [`Mode::Eval`]. The forward pass never
/// mutates `state`; callers fold `batch_stats` in themselves.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    plan: &BackbonePlan,
    params: &Bindings,
    state: &ParamBundle<T>,
    batch: Var,
    mode: Mode,
) -> Result<ForwardOutput<T>> {
    let bs = tape.value(batch).shape().to_vec();
    if bs.len() != 4 || bs[1..] != plan.desc.input_shape {
        return Err(Error::Dimension(format!(
            "batch shape {bs:?} does not match plan input {:?}",
            plan.desc.input_shape
        )));
    }
    let n = bs[0];
    let mut outputs: Vec<Var> = Vec::with_capacity(plan.desc.layers.len());
    let mut batch_stats = Vec::new();
    let mut cur = batch;
    for (idx, spec) in plan.desc.layers.iter().enumerate() {
        let tag = |e: Error| e.context(format!("layer {idx} ({})", spec.kind()));
        cur = match *spec {
            LayerSpec::Conv { stride, padding, .. } => {
                let w = params.get(idx, ParamRole::ConvWeight)?;
                let y = tape.conv2d(cur, w, stride, padding).map_err(tag)?;
                if plan.conv_bias[idx] {
                    let b = params.get(idx, ParamRole::ConvBias)?;
                    tape.add_channel_bias(y, b).map_err(tag)?
                } else {
                    y
                }
            }
            LayerSpec::BatchNorm { .. } => {
                let scale = params.get(idx, ParamRole::BnScale)?;
                let shift = params.get(idx, ParamRole::BnShift)?;
                match mode {
                    Mode::Train => {
                        let (y, stats) = tape.batch_norm(cur, scale, shift, None).map_err(tag)?;
                        batch_stats.push((idx, stats.expect("train-mode stats")));
                        y
                    }
                    Mode::Eval => {
                        let missing = || Error::Bundle(format!("layer {idx} (batchnorm): missing running statistics"));
                        let rm = state.get(idx, ParamRole::BnRunningMean).ok_or_else(missing)?;
                        let rv = state.get(idx, ParamRole::BnRunningVar).ok_or_else(missing)?;
                        tape.batch_norm(cur, scale, shift, Some((rm.data(), rv.data()))).map_err(tag)?.0
                    }
                }
            }
            LayerSpec::Relu {} => tape.relu(cur)?,
            LayerSpec::MaxPool { window, stride } => tape.max_pool(cur, window, stride).map_err(tag)?,
            LayerSpec::AvgPool { window, stride } => tape.avg_pool(cur, window, stride).map_err(tag)?,
            LayerSpec::Fc { in_features, .. } => {
                let flat = tape.reshape(cur, &[n, in_features]).map_err(tag)?;
                let w = params.get(idx, ParamRole::FcWeight)?;
                let b = params.get(idx, ParamRole::FcBias)?;
                let y = tape.matmul(flat, w).map_err(tag)?;
                tape.add_row_bias(y, b).map_err(tag)?
            }
            LayerSpec::Add { from } => tape.add(cur, outputs[from]).map_err(tag)?,
        };
        outputs.push(cur);
    }
    Ok(ForwardOutput { logits: cur, batch_stats })
}

/// Logits of a complete bundle on a batch, without gradient tracking.
pub fn forward_bundle<T: Scalar>(
    plan: &BackbonePlan,
    params: &ParamBundle<T>,
    batch: &Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    params.check(plan, &[Partition::Generated, Partition::Direct])?;
    let mut tape = Tape::new();
    let bindings = bind(&mut tape, params, false);
    let x = tape.constant(batch.clone());
    let out = forward(&mut tape, plan, &bindings, params, x, mode)?;
    Ok(tape.value(out.logits).clone())
}
