//! Trainable classifiers: a single member (hypernetwork-backed or fully
//! direct) and the aggregate of per-norm members.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::Norm;
use crate::backbone::{forward, init_params, BackbonePlan, Bindings, ForwardOutput, Mode, ParamBundle, Partition};
use crate::error::{Error, Result};
use crate::hypernet::{generate_all, generate_all_on_tape, init_member, EmbeddingSet, Hypernet, HypernetConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    pub hypernet: Hypernet<T>,
    pub embeddings: EmbeddingSet<T>,
}

/// One classifier.
///
/// With a generator, `params` holds the direct partition plus batch-norm
/// running statistics and the generated weights come from the hypernetwork.
/// Without one, `params` holds every weight of the plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Member<T> {
    pub norm: Option<Norm>,
    pub generator: Option<Generator<T>>,
    pub params: ParamBundle<T>,
}

/// A member's tensors registered on a tape.
#[derive(Debug)]
pub struct BoundMember {
    pub bindings: Bindings,
    /// Trainable leaves, in [`Member::trainable_mut`] order.
    pub leaves: Vec<Var>,
}

impl<T: Scalar> Member<T> {
    pub fn hyper(plan: &BackbonePlan, cfg: &HypernetConfig, seed: u64) -> Result<Self> {
        let (hypernet, embeddings, params) = init_member(plan, cfg, seed)?;
        Ok(Self { norm: None, generator: Some(Generator { hypernet, embeddings }), params })
    }

    /// Every weight stored directly, generated-tagged layers included.
    pub fn direct(plan: &BackbonePlan, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { norm: None, generator: None, params: init_params(plan, &[Partition::Generated, Partition::Direct], &mut rng) }
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = Some(norm);
        self
    }

    pub fn check(&self, plan: &BackbonePlan) -> Result<()> {
        match &self.generator {
            Some(g) => {
                g.hypernet.check()?;
                g.embeddings.check(plan, g.hypernet.embedding_dim())?;
                self.params.check(plan, &[Partition::Direct])
            }
            None => self.params.check(plan, &[Partition::Generated, Partition::Direct]),
        }
    }

    /// Trainable scalars: hypernetwork, embeddings and direct weights.
    pub fn param_count(&self) -> usize {
        let g = self.generator.as_ref().map_or(0, |g| g.hypernet.param_count() + g.embeddings.param_count());
        g + self.params.trainable_len()
    }

    /// Complete weight bundle with generated layers filled in.
    pub fn materialize(&self, plan: &BackbonePlan) -> Result<ParamBundle<T>> {
        match &self.generator {
            Some(g) => generate_all(&g.hypernet, &g.embeddings, plan, &self.params),
            None => {
                self.params.check(plan, &[Partition::Generated, Partition::Direct])?;
                Ok(self.params.clone())
            }
        }
    }

    /// Registers the member on `tape`, generating weights there so that
    /// gradients flow back to the hypernetwork and embeddings.
    pub fn bind(&self, tape: &mut Tape<T>, plan: &BackbonePlan, trainable: bool) -> Result<BoundMember> {
        let mut bindings = Bindings::new();
        let mut leaves = Vec::new();
        if let Some(g) = &self.generator {
            let hv = g.hypernet.bind(tape, trainable);
            leaves.extend([hv.w_in, hv.b_in, hv.w_out, hv.b_out]);
            let z = generate_all_on_tape(tape, &hv, &g.embeddings, plan, g.hypernet.reduction, trainable, &mut bindings)?;
            leaves.extend(z);
        }
        for e in self.params.entries().iter().filter(|e| e.role.is_trainable()) {
            let v = tape.leaf(e.tensor.clone(), trainable);
            bindings.insert(e.layer, e.role, v);
            leaves.push(v);
        }
        Ok(BoundMember { bindings, leaves })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        plan: &BackbonePlan,
        bound: &BoundMember,
        batch: Var,
        mode: Mode,
    ) -> Result<ForwardOutput<T>> {
        forward(tape, plan, &bound.bindings, &self.params, batch, mode)
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, plan: &BackbonePlan, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, plan, false)?;
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, plan, &bound, xv, mode)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        if let Some(g) = &mut self.generator {
            out.extend(g.hypernet.tensors_mut());
            out.extend(g.embeddings.layers.iter_mut().map(|l| &mut l.chunks));
        }
        out.extend(self.params.entries_mut().iter_mut().filter(|e| e.role.is_trainable()).map(|e| &mut e.tensor));
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = Vec::new();
        if let Some(g) = &self.generator {
            out.extend(g.hypernet.tensors());
            out.extend(g.embeddings.layers.iter().map(|l| &l.chunks));
        }
        out.extend(self.params.entries().iter().filter(|e| e.role.is_trainable()).map(|e| &e.tensor));
        out
    }
}

/// Per-norm members over one shared plan, in perturbation-set order.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedModel<T> {
    pub plan: BackbonePlan,
    pub members: Vec<Member<T>>,
}

impl<T: Scalar> AggregatedModel<T> {
    pub fn new(plan: BackbonePlan, members: Vec<Member<T>>) -> Result<Self> {
        let agg = Self { plan, members };
        agg.check()?;
        Ok(agg)
    }

    pub fn check(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Contract("aggregate has no members".into()));
        }
        for (i, m) in self.members.iter().enumerate() {
            let norm = m.norm.ok_or_else(|| Error::Contract(format!("member {i} has no norm tag")))?;
            if self.members[..i].iter().any(|o| o.norm == Some(norm)) {
                return Err(Error::Contract(format!("member {i}: duplicate norm {norm}")));
            }
            m.check(&self.plan).map_err(|e| e.context(format!("member {i} ({norm})")))?;
        }
        Ok(())
    }

    pub fn norms(&self) -> Vec<Norm> {
        self.members.iter().filter_map(|m| m.norm).collect()
    }

    /// Sum of the members' hypernetwork, embedding and direct counts.
    pub fn param_count(&self) -> usize {
        self.members.iter().map(|m| m.param_count()).sum()
    }

    pub fn materialize(&self) -> Result<Vec<ParamBundle<T>>> {
        self.members
            .iter()
            .enumerate()
            .map(|(i, m)| m.materialize(&self.plan).map_err(|e| e.context(format!("member {i}"))))
            .collect()
    }
}
