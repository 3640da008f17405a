//! Two-layer linear hypernetwork that emits convolution weights.
//!
//! Each generated layer owns `D = (c_out / C_u) · (c_in / C_u)` embedding
//! chunks. A chunk `z` is mapped to one output unit
//!
//! ```text
//! h     = W_in · z + b_in            (d_h)
//! block = W_outᵀ · h + b_out         (C_u · C_u · k_u · k_u)
//! ```
//!
//! and the `D` blocks tile the layer weight filter-major: chunk
//! `i = b_out · (c_in / C_u) + b_in` fills filters `[b_out·C_u, (b_out+1)·C_u)`
//! and channels `[b_in·C_u, (b_in+1)·C_u)`. A 1×1 target layer reduces each
//! `k_u × k_u` kernel with the configured [`KernelReduction`].
//!
//! One hypernetwork is shared by all generated layers of a member; only the
//! embeddings differ per layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    count_params, init_params, BackbonePlan, Bindings, LayerSpec, ParamBundle, ParamRole, Partition, UnitShape,
    Which,
};
use crate::error::{Error, Result};
use crate::tape::{BlockLayout, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// How a `k_u × k_u` unit kernel collapses onto a 1×1 target kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelReduction {
    #[default]
    Mean,
    Max,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypernetConfig {
    /// Embedding chunk length `N_z`.
    pub embedding_dim: usize,
    /// Hidden width `d_h`; defaults to `embedding_dim`.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    pub unit_channels: usize,
    pub unit_kernel: usize,
    #[serde(default)]
    pub reduction: KernelReduction,
}

impl HypernetConfig {
    pub fn new(embedding_dim: usize, unit_channels: usize, unit_kernel: usize) -> Self {
        Self { embedding_dim, hidden_dim: None, unit_channels, unit_kernel, reduction: KernelReduction::Mean }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_dim.unwrap_or(self.embedding_dim)
    }

    pub fn unit(&self) -> UnitShape {
        UnitShape::new(self.unit_channels, self.unit_kernel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden() == 0 || self.unit_channels == 0 || self.unit_kernel == 0 {
            return Err(Error::Config("hypernet dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypernet<T> {
    /// d_h × N_z
    pub w_in: Tensor<T>,
    /// d_h
    pub b_in: Tensor<T>,
    /// d_h × (C_u·C_u·k_u·k_u)
    pub w_out: Tensor<T>,
    /// C_u·C_u·k_u·k_u
    pub b_out: Tensor<T>,
    pub unit: UnitShape,
    pub reduction: KernelReduction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEmbedding<T> {
    /// Plan index of the generated layer.
    pub layer: usize,
    /// D × N_z
    pub chunks: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<T> {
    pub layers: Vec<LayerEmbedding<T>>,
}

/// Number of output units tiling a generated layer.
pub fn chunk_count(layer: &LayerSpec, unit: UnitShape) -> Result<usize> {
    match *layer {
        LayerSpec::Conv { c_in, c_out, .. } if c_in % unit.channels == 0 && c_out % unit.channels == 0 => {
            Ok((c_out / unit.channels) * (c_in / unit.channels))
        }
        LayerSpec::Conv { c_in, c_out, .. } => Err(Error::Plan(format!(
            "conv {c_in}→{c_out} not divisible by unit channel count {}",
            unit.channels
        ))),
        _ => Err(Error::Generation(format!("cannot generate a {} layer", layer.kind()))),
    }
}

impl<T: Scalar> Hypernet<T> {
    pub fn embedding_dim(&self) -> usize {
        self.w_in.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.w_in.len() + self.b_in.len() + self.w_out.len() + self.b_out.len()
    }

    pub fn check(&self) -> Result<()> {
        let (dh, nz, u) = (self.hidden_dim(), self.embedding_dim(), self.unit.len());
        let ok = self.w_in.shape() == [dh, nz]
            && self.b_in.shape() == [dh]
            && self.w_out.shape() == [dh, u]
            && self.b_out.shape() == [u];
        if !ok {
            return Err(Error::Generation(format!(
                "hypernet shapes inconsistent: w_in {:?} b_in {:?} w_out {:?} b_out {:?} for unit {:?}",
                self.w_in.shape(),
                self.b_in.shape(),
                self.w_out.shape(),
                self.b_out.shape(),
                self.unit
            )));
        }
        if ![&self.w_in, &self.b_in, &self.w_out, &self.b_out].iter().all(|t| t.all_finite()) {
            return Err(Error::Generation("hypernet holds non-finite values".into()));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> HyperVars {
        HyperVars {
            w_in: tape.leaf(self.w_in.clone(), trainable),
            b_in: tape.leaf(self.b_in.clone(), trainable),
            w_out: tape.leaf(self.w_out.clone(), trainable),
            b_out: tape.leaf(self.b_out.clone(), trainable),
        }
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w_in, &mut self.b_in, &mut self.w_out, &mut self.b_out]
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w_in, &self.b_in, &self.w_out, &self.b_out]
    }
}

impl<T: Scalar> EmbeddingSet<T> {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.chunks.len()).sum()
    }

    /// The embedding layout must list exactly the plan's generated layers in order.
    pub fn check(&self, plan: &BackbonePlan, embedding_dim: usize) -> Result<()> {
        let generated = plan.generated_layers();
        if generated.len() != self.layers.len() {
            return Err(Error::Generation(format!(
                "{} embedding layers for {} generated layers",
                self.layers.len(),
                generated.len()
            )));
        }
        for (&idx, emb) in generated.iter().zip(&self.layers) {
            if emb.layer != idx {
                return Err(Error::Generation(format!("embedding for layer {} where layer {idx} expected", emb.layer)));
            }
            let d = chunk_count(&plan.layers()[idx], plan.unit())?;
            if emb.chunks.shape() != [d, embedding_dim] {
                return Err(Error::Generation(format!(
                    "layer {idx}: embedding shape {:?}, expected [{d}, {embedding_dim}]",
                    emb.chunks.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Hypernetwork tensors registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HyperVars {
    pub w_in: Var,
    pub b_in: Var,
    pub w_out: Var,
    pub b_out: Var,
}

fn layout_for(layer: &LayerSpec, unit: UnitShape, reduction: KernelReduction) -> Result<BlockLayout> {
    match *layer {
        LayerSpec::Conv { c_in, c_out, k, .. } => {
            if k != unit.kernel && k != 1 {
                return Err(Error::Generation(format!("kernel {k} cannot be produced from unit kernel {}", unit.kernel)));
            }
            chunk_count(layer, unit)?;
            Ok(BlockLayout {
                c_out,
                c_in,
                k,
                unit_channels: unit.channels,
                unit_kernel: unit.kernel,
                reduction,
            })
        }
        _ => Err(Error::Generation(format!("cannot generate a {} layer", layer.kind()))),
    }
}

/// Generates one layer's weight on the tape from its D × N_z chunk matrix.
pub fn generate_layer_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    hv: &HyperVars,
    chunks: Var,
    layer: &LayerSpec,
    unit: UnitShape,
    reduction: KernelReduction,
) -> Result<Var> {
    let layout = layout_for(layer, unit, reduction)?;
    let d = tape.value(chunks).shape()[0];
    if d != layout.num_blocks() {
        return Err(Error::Generation(format!(
            "{d} chunks supplied, {}×{} layer needs {}",
            layout.c_out,
            layout.c_in,
            layout.num_blocks()
        )));
    }
    let w_in_t = tape.transpose(hv.w_in)?;
    let h = tape.matmul(chunks, w_in_t).map_err(|e| Error::Generation(e.to_string()))?;
    let h = tape.add_row_bias(h, hv.b_in)?;
    let units = tape.matmul(h, hv.w_out)?;
    let units = tape.add_row_bias(units, hv.b_out)?;
    tape.assemble_blocks(units, layout)
}

/// Value-only form of [`generate_layer_on_tape`].
pub fn generate_layer<T: Scalar>(h: &Hypernet<T>, chunks: &Tensor<T>, layer: &LayerSpec) -> Result<Tensor<T>> {
    h.check()?;
    let mut tape = Tape::new();
    let hv = h.bind(&mut tape, false);
    let c = tape.constant(chunks.clone());
    let w = generate_layer_on_tape(&mut tape, &hv, c, layer, h.unit, h.reduction)?;
    Ok(tape.value(w).clone())
}

/// Generates every generated-tagged weight on the tape and records its
/// binding. Returns the embedding leaves in layer order.
pub fn generate_all_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    hv: &HyperVars,
    z: &EmbeddingSet<T>,
    plan: &BackbonePlan,
    reduction: KernelReduction,
    trainable: bool,
    bindings: &mut Bindings,
) -> Result<Vec<Var>> {
    let mut leaves = Vec::with_capacity(z.layers.len());
    for emb in &z.layers {
        let chunks = tape.leaf(emb.chunks.clone(), trainable);
        let spec = &plan.layers()[emb.layer];
        let w = generate_layer_on_tape(tape, hv, chunks, spec, plan.unit(), reduction)
            .map_err(|e| e.context(format!("layer {}", emb.layer)))?;
        bindings.insert(emb.layer, ParamRole::ConvWeight, w);
        leaves.push(chunks);
    }
    Ok(leaves)
}

/// Complete parameter bundle: generated weights from the hypernetwork plus
/// the direct entries passed through unchanged.
pub fn generate_all<T: Scalar>(
    h: &Hypernet<T>,
    z: &EmbeddingSet<T>,
    plan: &BackbonePlan,
    direct: &ParamBundle<T>,
) -> Result<ParamBundle<T>> {
    h.check()?;
    z.check(plan, h.embedding_dim())?;
    direct.check(plan, &[Partition::Direct])?;
    let mut out = direct.clone();
    for emb in &z.layers {
        let w = generate_layer(h, &emb.chunks, &plan.layers()[emb.layer])
            .map_err(|e| e.context(format!("layer {}", emb.layer)))?;
        out.insert(emb.layer, ParamRole::ConvWeight, Partition::Generated, w);
    }
    Ok(out)
}

/// Scalar parameter count of one member: hypernetwork, embeddings and direct
/// parameters.
///
/// `d_h·N_z + d_h + d_h·U + U + N_z·Σ_l D_l + count_params(plan, Direct)`
/// with `U = C_u²·k_u²`.
pub fn member_param_count(plan: &BackbonePlan, cfg: &HypernetConfig) -> Result<usize> {
    let (nz, dh, u) = (cfg.embedding_dim, cfg.hidden(), cfg.unit().len());
    let chunks: usize = plan
        .generated_layers()
        .iter()
        .map(|&i| chunk_count(&plan.layers()[i], cfg.unit()))
        .sum::<Result<usize>>()?;
    Ok(dh * nz + dh + dh * u + u + nz * chunks + count_params(plan, Which::Direct))
}

/// Fresh hypernetwork, embeddings and direct parameters, fully determined by `seed`.
///
/// Embeddings are standard normal, both weight matrices are normal with
/// standard deviation `1/sqrt(fan_in)` and the hypernetwork biases are zero.
pub fn init_member<T: Scalar>(
    plan: &BackbonePlan,
    cfg: &HypernetConfig,
    seed: u64,
) -> Result<(Hypernet<T>, EmbeddingSet<T>, ParamBundle<T>)> {
    cfg.validate()?;
    if cfg.unit() != plan.unit() {
        return Err(Error::Config(format!(
            "hypernet unit {:?} differs from the plan's unit {:?}",
            cfg.unit(),
            plan.unit()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nz, dh, u) = (cfg.embedding_dim, cfg.hidden(), cfg.unit().len());
    let mut layers = Vec::new();
    for idx in plan.generated_layers() {
        let d = chunk_count(&plan.layers()[idx], cfg.unit())?;
        layers.push(LayerEmbedding { layer: idx, chunks: Tensor::randn(&[d, nz], 1.0, &mut rng) });
    }
    let hyper = Hypernet {
        w_in: Tensor::randn(&[dh, nz], 1.0 / (nz as f64).sqrt(), &mut rng),
        b_in: Tensor::zeros(&[dh]),
        w_out: Tensor::randn(&[dh, u], 1.0 / (dh as f64).sqrt(), &mut rng),
        b_out: Tensor::zeros(&[u]),
        unit: cfg.unit(),
        reduction: cfg.reduction,
    };
    let direct = init_params(plan, &[Partition::Direct], &mut rng);
    Ok((hyper, EmbeddingSet { layers }, direct))
}
