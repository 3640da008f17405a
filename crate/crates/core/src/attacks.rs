//! Norm-constrained input perturbations: steepest ascent steps, exact ball
//! projections, projected gradient ascent (PGD) and multi steepest descent (MSD).
//!
//! Batched attacks treat every example (leading-axis row) as its own vector:
//! steps, projections and norms are computed per row.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::backbone::{bind, forward, BackbonePlan, Mode, ParamBundle};
use crate::error::{Error, Result};
use crate::seed;
use crate::tape::{cross_entropy_per_row, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "linf", alias = "inf")]
    Inf,
    #[serde(rename = "l2", alias = "2")]
    L2,
    #[serde(rename = "l1", alias = "1")]
    L1,
}

impl Norm {
    pub const ALL: [Norm; 3] = [Norm::Inf, Norm::L2, Norm::L1];

    pub fn tag(self) -> &'static str {
        match self {
            Norm::Inf => "linf",
            Norm::L2 => "l2",
            Norm::L1 => "l1",
        }
    }

    /// Stable integer used when deriving seeds.
    pub fn id(self) -> u64 {
        match self {
            Norm::Inf => 0,
            Norm::L2 => 2,
            Norm::L1 => 1,
        }
    }

    pub fn of<T: Scalar>(self, v: &[T]) -> T {
        match self {
            Norm::Inf => v.iter().fold(T::zero(), |m, &x| m.max(x.abs())),
            Norm::L2 => v.iter().map(|&x| x * x).sum::<T>().sqrt(),
            Norm::L1 => v.iter().map(|&x| x.abs()).sum(),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" | "inf" => Ok(Norm::Inf),
            "l2" | "2" => Ok(Norm::L2),
            "l1" | "1" => Ok(Norm::L1),
            _ => Err(Error::Config(format!("unknown norm {s:?} (expected linf, l2 or l1)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Zero,
    #[default]
    Random,
}

fn default_tau() -> usize {
    10
}

fn default_top_k() -> usize {
    1
}

/// One ball 𝓑(p, ε) together with the PGD schedule used to search it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub norm: Norm,
    pub eps: f64,
    pub alpha: f64,
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default)]
    pub init: Init,
    /// Coordinates moved by one ℓ1 step.
    #[serde(default = "default_top_k")]
    pub l1_top_k: usize,
}

impl PerturbationSpec {
    pub fn new(norm: Norm, eps: f64, alpha: f64, tau: usize) -> Self {
        Self { norm, eps, alpha, tau, init: Init::Random, l1_top_k: 1 }
    }

    /// Desk-scale defaults for inputs in [0, 1].
    pub fn default_for(norm: Norm) -> Self {
        match norm {
            Norm::Inf => Self::new(norm, 0.03, 0.0075, 10),
            Norm::L2 => Self::new(norm, 0.5, 0.125, 10),
            Norm::L1 => Self::new(norm, 8.0, 2.0, 10),
        }
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.eps) {
            return Err(Error::Config(format!("{}: eps must be positive, got {}", self.norm, self.eps)));
        }
        if !pos(self.alpha) {
            return Err(Error::Config(format!("{}: alpha must be positive, got {}", self.norm, self.alpha)));
        }
        if self.tau == 0 {
            return Err(Error::Config(format!("{}: tau must be at least 1", self.norm)));
        }
        if self.l1_top_k == 0 {
            return Err(Error::Config(format!("{}: l1_top_k must be at least 1", self.norm)));
        }
        Ok(())
    }
}

/// The ordered set 𝒜 of perturbation balls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PerturbationSet {
    specs: Vec<PerturbationSpec>,
}

impl PerturbationSet {
    pub fn new(specs: Vec<PerturbationSpec>) -> Result<Self> {
        let set = Self { specs };
        set.validate()?;
        Ok(set)
    }

    /// ℓ∞, ℓ2, ℓ1 with their default radii.
    pub fn canonical() -> Self {
        Self { specs: Norm::ALL.iter().map(|&n| PerturbationSpec::default_for(n)).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.specs.is_empty() {
            return Err(Error::Config("perturbation set is empty".into()));
        }
        for (i, s) in self.specs.iter().enumerate() {
            s.validate().map_err(|e| e.context(format!("perturbations[{i}]")))?;
            if self.specs[..i].iter().any(|o| o.norm == s.norm) {
                return Err(Error::Config(format!("perturbations[{i}]: duplicate norm {}", s.norm)));
            }
        }
        Ok(())
    }

    pub fn specs(&self) -> &[PerturbationSpec] {
        &self.specs
    }

    pub fn norms(&self) -> Vec<Norm> {
        self.specs.iter().map(|s| s.norm).collect()
    }

    pub fn get(&self, norm: Norm) -> Option<&PerturbationSpec> {
        self.specs.iter().find(|s| s.norm == norm)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Test-only escape hatch: a set that may repeat norms.
    #[doc(hidden)]
    pub fn unchecked(specs: Vec<PerturbationSpec>) -> Self {
        Self { specs }
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Writes `argmax_{‖v‖_p ≤ α} vᵀg` into `out`.
///
/// ℓ1 moves the `top_k` largest-magnitude coordinates by `α/top_k` each
/// (ties to the lowest index); `top_k = 1` is the exact maximizer.
pub fn steepest_step_into<T: Scalar>(g: &[T], norm: Norm, alpha: T, top_k: usize, out: &mut [T]) {
    debug_assert_eq!(g.len(), out.len());
    match norm {
        Norm::Inf => {
            for (o, &v) in out.iter_mut().zip(g) {
                *o = alpha * sign(v);
            }
        }
        Norm::L2 => {
            let n = Norm::L2.of(g);
            if n > T::zero() {
                for (o, &v) in out.iter_mut().zip(g) {
                    *o = alpha * v / n;
                }
            } else {
                out.fill(T::zero());
            }
        }
        Norm::L1 => {
            out.fill(T::zero());
            let k = top_k.min(g.len());
            if k == 1 {
                let mut best = 0;
                for (j, &v) in g.iter().enumerate() {
                    if v.abs() > g[best].abs() {
                        best = j;
                    }
                }
                out[best] = alpha * sign(g[best]);
            } else {
                let mut idx: Vec<usize> = (0..g.len()).collect();
                idx.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).unwrap().then(a.cmp(&b)));
                let share = alpha / T::from_usize(k).unwrap();
                for &j in &idx[..k] {
                    out[j] = share * sign(g[j]);
                }
            }
        }
    }
}

/// Steepest ascent step for the whole tensor viewed as one vector.
pub fn steepest_step<T: Scalar>(grad: &Tensor<T>, norm: Norm, alpha: T) -> Tensor<T> {
    let mut out = Tensor::zeros(grad.shape());
    steepest_step_into(grad.data(), norm, alpha, 1, out.data_mut());
    out
}

/// Nudges a scale factor or threshold by a growing number of ulps until
/// `feasible` accepts it. Rounding in the projection formulas can leave the
/// result a few ulps outside the ball; forcing exact feasibility makes a
/// second projection the identity.
fn settle<T: Scalar>(mut x: T, toward_feasible: T, feasible: impl Fn(T) -> bool) -> T {
    let mut step = T::epsilon();
    while !feasible(x) {
        x += toward_feasible * step * x.abs().max(T::min_positive_value());
        step = step + step;
    }
    x
}

/// In-place Euclidean projection onto 𝓑(p, ε). The result satisfies
/// `norm ≤ ε` as computed by [`Norm::of`], and points already inside are
/// returned unchanged, so projecting twice is bitwise idempotent.
pub fn project_into<T: Scalar>(w: &mut [T], norm: Norm, eps: T) {
    match norm {
        Norm::Inf => {
            for v in w.iter_mut() {
                *v = v.max(-eps).min(eps);
            }
        }
        Norm::L2 => {
            let n = Norm::L2.of(w);
            if n <= eps {
                return;
            }
            let scaled = |s: T| Norm::L2.of(&w.iter().map(|&v| v * s).collect::<Vec<T>>()) <= eps;
            let s = settle(eps / n, -T::one(), scaled);
            for v in w.iter_mut() {
                *v *= s;
            }
        }
        Norm::L1 => {
            if Norm::L1.of(w) <= eps {
                return;
            }
            let mut u: Vec<T> = w.iter().map(|v| v.abs()).collect();
            u.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut cum = T::zero();
            let mut lambda = T::zero();
            for (j, &uj) in u.iter().enumerate() {
                cum += uj;
                let t = (cum - eps) / T::from_usize(j + 1).unwrap();
                if uj > t {
                    lambda = t;
                } else {
                    break;
                }
            }
            let shrink = |l: T| w.iter().map(move |&v| sign(v) * (v.abs() - l).max(T::zero()));
            let lambda = settle(lambda, T::one(), |l| shrink(l).map(|v| v.abs()).sum::<T>() <= eps);
            let out: Vec<T> = shrink(lambda).collect();
            w.copy_from_slice(&out);
        }
    }
}

/// Euclidean projection of the whole tensor (one vector) onto 𝓑(p, ε).
pub fn project_ball<T: Scalar>(omega: &Tensor<T>, norm: Norm, eps: T) -> Tensor<T> {
    let mut out = omega.clone();
    project_into(out.data_mut(), norm, eps);
    out
}

/// A classifier an attack can query.
pub trait AttackTarget<T: Scalar> {
    /// Per-example cross-entropy and the gradient of their sum w.r.t. `x`.
    fn loss_and_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(Vec<T>, Tensor<T>)>;

    /// Per-example cross-entropy.
    fn losses(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>>;
}

/// A fully materialized classifier.
pub struct BundleTarget<'a, T> {
    pub plan: &'a BackbonePlan,
    pub params: &'a ParamBundle<T>,
    pub mode: Mode,
}

fn finite_or_err<T: Scalar>(v: &[T], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Attack(format!("non-finite {what} at position {i}"))),
        None => Ok(()),
    }
}

impl<T: Scalar> AttackTarget<T> for BundleTarget<'_, T> {
    fn loss_and_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(Vec<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let b = bind(&mut tape, self.params, false);
        let xv = tape.leaf(x.clone(), true);
        let out = forward(&mut tape, self.plan, &b, self.params, xv, self.mode)?;
        finite_or_err(tape.value(out.logits).data(), "logit")?;
        let losses = cross_entropy_per_row(tape.value(out.logits), labels)?;
        let ce = tape.cross_entropy(out.logits, labels)?;
        let total = tape.scale(ce, T::from_usize(labels.len()).unwrap())?;
        let g = tape.backward(total)?.wrt(&tape, xv);
        finite_or_err(&losses, "loss")?;
        finite_or_err(g.data(), "input gradient")?;
        Ok((losses, g))
    }

    fn losses(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let b = bind(&mut tape, self.params, false);
        let xv = tape.constant(x.clone());
        let out = forward(&mut tape, self.plan, &b, self.params, xv, self.mode)?;
        finite_or_err(tape.value(out.logits).data(), "logit")?;
        let losses = cross_entropy_per_row(tape.value(out.logits), labels)?;
        finite_or_err(&losses, "loss")?;
        Ok(losses)
    }
}

/// Seeding and data-range options shared by PGD and MSD.
#[derive(Debug, Clone, Copy)]
pub struct AttackContext<'a> {
    /// Inputs are kept inside `[lo, hi]` when set.
    pub clamp: Option<(f64, f64)>,
    pub seed: u64,
    /// One stable identifier per example; random starts derive from
    /// `(seed, id, norm)`, so results do not depend on batching.
    pub example_ids: &'a [u64],
}

fn check_batch<T: Scalar>(x: &Tensor<T>, labels: &[usize], ctx: &AttackContext) -> Result<()> {
    let n = x.shape()[0];
    if labels.len() != n || ctx.example_ids.len() != n {
        return Err(Error::Dimension(format!(
            "attack batch of {n} examples with {} labels and {} ids",
            labels.len(),
            ctx.example_ids.len()
        )));
    }
    finite_or_err(x.data(), "input")
}

fn random_start<T: Scalar>(spec: &PerturbationSpec, row: &mut [T], rng: &mut impl Rng) {
    let eps = spec.eps;
    match (spec.init, spec.norm) {
        (Init::Zero, _) | (Init::Random, Norm::L1) => row.fill(T::zero()),
        (Init::Random, Norm::Inf) => {
            let u = Uniform::new_inclusive(-eps, eps);
            for v in row.iter_mut() {
                *v = T::lit(rng.sample(u));
            }
        }
        (Init::Random, Norm::L2) => {
            let g: Vec<f64> = (0..row.len()).map(|_| rng.sample(StandardNormal)).collect();
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let r = eps * rng.gen::<f64>().powf(1.0 / row.len() as f64);
            for (v, gi) in row.iter_mut().zip(&g) {
                *v = T::lit(gi / n * r);
            }
        }
    }
}

/// Clamps `x + δ` into range, rewriting δ and the adversarial input.
fn apply_range<T: Scalar>(x: &[T], delta: &mut [T], adv: &mut [T], clamp: Option<(f64, f64)>) {
    match clamp {
        Some((lo, hi)) => {
            let (lo, hi) = (T::lit(lo), T::lit(hi));
            for ((d, a), &xi) in delta.iter_mut().zip(adv.iter_mut()).zip(x) {
                *a = (xi + *d).max(lo).min(hi);
                *d = *a - xi;
            }
        }
        None => {
            for ((d, a), &xi) in delta.iter_mut().zip(adv.iter_mut()).zip(x) {
                *a = xi + *d;
            }
        }
    }
}

/// Keeps, per example, the perturbation with the highest loss seen so far.
struct BestIterate<T> {
    loss: Vec<T>,
    delta: Tensor<T>,
}

impl<T: Scalar> BestIterate<T> {
    fn new(shape: &[usize]) -> Self {
        Self { loss: vec![T::neg_infinity(); shape[0]], delta: Tensor::zeros(shape) }
    }

    /// Returns the rows that improved.
    fn record(&mut self, losses: &[T], delta: &Tensor<T>) -> Vec<usize> {
        let mut improved = Vec::new();
        for (i, &l) in losses.iter().enumerate() {
            if l > self.loss[i] {
                self.loss[i] = l;
                self.delta.row_mut(i).copy_from_slice(delta.row(i));
                improved.push(i);
            }
        }
        improved
    }
}

/// Projected gradient ascent inside one ball.
///
/// Runs `spec.tau` iterations of `δ ← clamp(proj(δ + step(∇)))` and returns,
/// per example, the iterate δ¹…δ^τ with the highest loss (earliest on ties).
pub fn pgd_attack<T: Scalar>(
    target: &dyn AttackTarget<T>,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &PerturbationSpec,
    ctx: &AttackContext,
) -> Result<Tensor<T>> {
    spec.validate()?;
    check_batch(x, labels, ctx)?;
    let (eps, alpha) = (T::lit(spec.eps), T::lit(spec.alpha));
    let mut delta = Tensor::zeros(x.shape());
    for (i, &id) in ctx.example_ids.iter().enumerate() {
        let mut rng = seed::stream(&[ctx.seed, seed::purpose::ATTACK, id, spec.norm.id()]);
        random_start(spec, delta.row_mut(i), &mut rng);
    }
    let mut adv = x.clone();
    apply_range(x.data(), delta.data_mut(), adv.data_mut(), ctx.clamp);
    let mut best = BestIterate::new(x.shape());
    let mut step = vec![T::zero(); x.row_len()];
    for t in 0..spec.tau {
        let (losses, g) = target.loss_and_grad(&adv, labels)?;
        if t > 0 {
            best.record(&losses, &delta);
        }
        for i in 0..x.shape()[0] {
            steepest_step_into(g.row(i), spec.norm, alpha, spec.l1_top_k, &mut step);
            let row = delta.row_mut(i);
            for (d, &s) in row.iter_mut().zip(&step) {
                *d += s;
            }
            project_into(row, spec.norm, eps);
        }
        apply_range(x.data(), delta.data_mut(), adv.data_mut(), ctx.clamp);
    }
    best.record(&target.losses(&adv, labels)?, &delta);
    Ok(best.delta)
}

/// Multi steepest descent over the union of the balls in `set`.
///
/// Starts from δ = 0. Each of the `tau` iterations forms one candidate per
/// norm, `clamp(proj_p(δ + step_p(∇)))`, and keeps per example the candidate
/// with the highest loss (earliest norm on ties). Returns the best iterate.
pub fn msd_attack<T: Scalar>(
    target: &dyn AttackTarget<T>,
    x: &Tensor<T>,
    labels: &[usize],
    set: &PerturbationSet,
    tau: usize,
    ctx: &AttackContext,
) -> Result<Tensor<T>> {
    if tau == 0 {
        return Err(Error::Config("msd: tau must be at least 1".into()));
    }
    for s in set.specs() {
        s.validate()?;
    }
    check_batch(x, labels, ctx)?;
    let n = x.shape()[0];
    let mut delta = Tensor::zeros(x.shape());
    let mut adv = x.clone();
    apply_range(x.data(), delta.data_mut(), adv.data_mut(), ctx.clamp);
    let mut best = BestIterate::new(x.shape());
    let mut step = vec![T::zero(); x.row_len()];
    let mut cand = delta.clone();
    let mut cand_adv = adv.clone();
    for _ in 0..tau {
        let (_, g) = target.loss_and_grad(&adv, labels)?;
        let mut chosen = BestIterate::new(x.shape());
        let mut chosen_adv = adv.clone();
        for spec in set.specs() {
            let (eps, alpha) = (T::lit(spec.eps), T::lit(spec.alpha));
            for i in 0..n {
                steepest_step_into(g.row(i), spec.norm, alpha, spec.l1_top_k, &mut step);
                let row = cand.row_mut(i);
                for ((c, &d), &s) in row.iter_mut().zip(delta.row(i)).zip(&step) {
                    *c = d + s;
                }
                project_into(row, spec.norm, eps);
            }
            apply_range(x.data(), cand.data_mut(), cand_adv.data_mut(), ctx.clamp);
            for i in chosen.record(&target.losses(&cand_adv, labels)?, &cand) {
                chosen_adv.row_mut(i).copy_from_slice(cand_adv.row(i));
            }
        }
        delta = chosen.delta;
        adv = chosen_adv;
        best.record(&chosen.loss, &delta);
    }
    Ok(best.delta)
}

/// `x + δ`, the perturbed batch.
pub fn perturb<T: Scalar>(x: &Tensor<T>, delta: &Tensor<T>) -> Result<Tensor<T>> {
    x.add(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::softmax_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Linear two-layer-free classifier `logits = x·W + b`, with closed-form gradients.
    struct Linear {
        w: Vec<f64>, // d × c
        b: Vec<f64>,
        d: usize,
        c: usize,
    }

    impl Linear {
        fn logits(&self, x: &Tensor<f64>) -> Vec<f64> {
            let n = x.shape()[0];
            let mut out = vec![0.0; n * self.c];
            for i in 0..n {
                for k in 0..self.c {
                    out[i * self.c + k] =
                        self.b[k] + (0..self.d).map(|j| x.row(i)[j] * self.w[j * self.c + k]).sum::<f64>();
                }
            }
            out
        }
    }

    impl AttackTarget<f64> for Linear {
        fn loss_and_grad(&self, x: &Tensor<f64>, labels: &[usize]) -> Result<(Vec<f64>, Tensor<f64>)> {
            let z = self.logits(x);
            let p = softmax_rows(&z, self.c);
            let losses = self.losses(x, labels)?;
            let mut g = Tensor::zeros(x.shape());
            for (i, &y) in labels.iter().enumerate() {
                for j in 0..self.d {
                    g.row_mut(i)[j] = (0..self.c)
                        .map(|k| (p[i * self.c + k] - if k == y { 1.0 } else { 0.0 }) * self.w[j * self.c + k])
                        .sum();
                }
            }
            Ok((losses, g))
        }

        fn losses(&self, x: &Tensor<f64>, labels: &[usize]) -> Result<Vec<f64>> {
            let z = Tensor::new(vec![x.shape()[0], self.c], self.logits(x))?;
            cross_entropy_per_row(&z, labels)
        }
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn step_examples() {
        let g = Tensor::new(vec![2], vec![0.2, -0.7]).unwrap();
        assert!(close(steepest_step(&g, Norm::Inf, 0.1).data(), &[0.1, -0.1]));
        assert!(close(steepest_step(&g, Norm::L1, 0.1).data(), &[0.0, -0.1]));
        let g = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert!(close(steepest_step(&g, Norm::L2, 1.0).data(), &[0.6, 0.8]));
        let z = Tensor::<f64>::zeros(&[3]);
        for n in Norm::ALL {
            assert!(steepest_step(&z, n, 1.0).data().iter().all(|&v| v == 0.0));
        }
        let tie = Tensor::new(vec![3], vec![0.5, -0.5, 0.1]).unwrap();
        assert_eq!(steepest_step(&tie, Norm::L1, 1.0).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn top_k_l1_step_spreads_budget() {
        let g = [0.1, -0.9, 0.5, 0.5];
        let mut out = [0.0; 4];
        steepest_step_into(&g, Norm::L1, 1.0, 2, &mut out);
        assert_eq!(out, [0.0, -0.5, 0.5, 0.0]);
    }

    #[test]
    fn projection_examples() {
        let w = Tensor::new(vec![2], vec![0.5, -0.2]).unwrap();
        assert!(close(project_ball(&w, Norm::Inf, 0.3).data(), &[0.3, -0.2]));
        let w = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert!(close(project_ball(&w, Norm::L2, 1.0).data(), &[0.6, 0.8]));
        let w = Tensor::new(vec![2], vec![0.8, 0.3]).unwrap();
        assert!(close(project_ball(&w, Norm::L1, 0.5).data(), &[0.5, 0.0]));
        let w = Tensor::new(vec![3], vec![0.1, -0.05, 0.02]).unwrap();
        for n in Norm::ALL {
            assert_eq!(project_ball(&w, n, 1.0), w);
        }
    }

    #[test]
    fn norm_parsing() {
        assert_eq!("inf".parse::<Norm>().unwrap(), Norm::Inf);
        assert_eq!("2".parse::<Norm>().unwrap(), Norm::L2);
        assert!("l3".parse::<Norm>().is_err());
        let n: Norm = serde_json::from_str("\"1\"").unwrap();
        assert_eq!(n, Norm::L1);
        assert_eq!(serde_json::to_string(&Norm::Inf).unwrap(), "\"linf\"");
    }

    #[test]
    fn set_rejects_duplicates_and_bad_values() {
        let s = PerturbationSpec::default_for(Norm::Inf);
        let e = PerturbationSet::new(vec![s.clone(), s.clone()]).unwrap_err();
        assert!(e.to_string().contains("perturbations[1]") && e.to_string().contains("duplicate"));
        let mut bad = s;
        bad.alpha = 0.0;
        assert!(PerturbationSet::new(vec![bad]).is_err());
        assert!(PerturbationSet::new(vec![]).is_err());
        assert_eq!(PerturbationSet::canonical().norms(), Norm::ALL.to_vec());
    }

    fn toy(seed: u64, d: usize) -> (Linear, Tensor<f64>, Vec<usize>, Vec<u64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 2;
        let w = (0..d * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = vec![0.1, -0.1];
        let n = 5;
        let x = Tensor::from_fn(&[n, d], |_| rng.gen_range(0.2..0.8));
        let y = (0..n).map(|i| i % 2).collect();
        (Linear { w, b, d, c }, x, y, (0..n as u64).collect())
    }

    #[test]
    fn one_step_linf_matches_closed_form() {
        let (m, x, y, ids) = toy(0, 6);
        for (alpha, eps) in [(0.01, 0.05), (0.2, 0.05)] {
            let mut spec = PerturbationSpec::new(Norm::Inf, eps, alpha, 1).with_init(Init::Zero);
            spec.tau = 1;
            let ctx = AttackContext { clamp: None, seed: 0, example_ids: &ids };
            let d = pgd_attack(&m, &x, &y, &spec, &ctx).unwrap();
            for (i, &yi) in y.iter().enumerate() {
                for j in 0..6 {
                    // ∂loss/∂x_j has the sign of w_j,other − w_j,label for a 2-class model
                    let s = m.w[j * 2 + (1 - yi)] - m.w[j * 2 + yi];
                    assert_eq!(d.row(i)[j], alpha.min(eps) * s.signum());
                }
            }
        }
    }

    #[test]
    fn vanishing_ball_keeps_loss() {
        let (m, x, y, ids) = toy(1, 6);
        let base = m.losses(&x, &y).unwrap();
        for n in Norm::ALL {
            let spec = PerturbationSpec::new(n, 1e-12, 1e-12, 5);
            let ctx = AttackContext { clamp: Some((0.0, 1.0)), seed: 3, example_ids: &ids };
            let d = pgd_attack(&m, &x, &y, &spec, &ctx).unwrap();
            let l = m.losses(&perturb(&x, &d).unwrap(), &y).unwrap();
            assert!(close(&l, &base) || l.iter().zip(&base).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn returned_delta_is_feasible_and_beats_start() {
        for seed in 0..5 {
            let (m, x, y, ids) = toy(seed, 8);
            for spec in PerturbationSet::canonical().specs() {
                let ctx = AttackContext { clamp: Some((0.0, 1.0)), seed, example_ids: &ids };
                let d = pgd_attack(&m, &x, &y, spec, &ctx).unwrap();
                let base = m.losses(&x, &y).unwrap();
                let l = m.losses(&perturb(&x, &d).unwrap(), &y).unwrap();
                for i in 0..5 {
                    assert!(spec.norm.of(d.row(i)) <= spec.eps + 1e-9);
                    assert!(d.row(i).iter().zip(x.row(i)).all(|(a, b)| (0.0..=1.0).contains(&(a + b))));
                    assert!(l[i] >= base[i] - 1e-12, "seed {seed} {}: {} < {}", spec.norm, l[i], base[i]);
                }
            }
        }
    }

    #[test]
    fn pgd_is_reproducible_and_batch_invariant() {
        let (m, x, y, ids) = toy(2, 8);
        let spec = PerturbationSpec::new(Norm::L2, 0.3, 0.1, 4);
        let ctx = AttackContext { clamp: Some((0.0, 1.0)), seed: 9, example_ids: &ids };
        let a = pgd_attack(&m, &x, &y, &spec, &ctx).unwrap();
        assert_eq!(a, pgd_attack(&m, &x, &y, &spec, &ctx).unwrap());
        let rows = [3usize, 4];
        let sub_ids: Vec<u64> = rows.iter().map(|&r| ids[r]).collect();
        let sub_y: Vec<usize> = rows.iter().map(|&r| y[r]).collect();
        let ctx2 = AttackContext { example_ids: &sub_ids, ..ctx };
        let b = pgd_attack(&m, &x.select_rows(&rows), &sub_y, &spec, &ctx2).unwrap();
        assert_eq!(b.row(0), a.row(3));
        assert_eq!(b.row(1), a.row(4));
    }

    #[test]
    fn msd_singleton_equals_zero_start_pgd() {
        let (m, x, y, ids) = toy(3, 8);
        for n in Norm::ALL {
            let spec = PerturbationSpec::default_for(n).with_init(Init::Zero);
            let ctx = AttackContext { clamp: Some((0.0, 1.0)), seed: 0, example_ids: &ids };
            let a = pgd_attack(&m, &x, &y, &spec, &ctx).unwrap();
            let set = PerturbationSet::new(vec![spec.clone()]).unwrap();
            let b = msd_attack(&m, &x, &y, &set, spec.tau, &ctx).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn msd_one_step_dominates_each_candidate() {
        let (m, x, y, ids) = toy(4, 8);
        let set = PerturbationSet::canonical();
        let ctx = AttackContext { clamp: Some((0.0, 1.0)), seed: 0, example_ids: &ids };
        let d = msd_attack(&m, &x, &y, &set, 1, &ctx).unwrap();
        let l = m.losses(&perturb(&x, &d).unwrap(), &y).unwrap();
        for spec in set.specs() {
            let mut s = spec.clone().with_init(Init::Zero);
            s.tau = 1;
            let dp = pgd_attack(&m, &x, &y, &s, &ctx).unwrap();
            let lp = m.losses(&perturb(&x, &dp).unwrap(), &y).unwrap();
            for i in 0..5 {
                assert!(l[i] >= lp[i]);
            }
        }
    }

    /// Re-runs MSD by hand on a 2-d model, evaluating both candidates exhaustively.
    #[test]
    fn msd_selection_matches_exhaustive_oracle() {
        let m = Linear { w: vec![1.0, -0.5, 0.3, 0.8], b: vec![0.0, 0.0], d: 2, c: 2 };
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let y = [0usize];
        let set = PerturbationSet::new(vec![
            PerturbationSpec::new(Norm::Inf, 0.2, 0.05, 3),
            PerturbationSpec::new(Norm::L2, 0.5, 0.2, 3),
        ])
        .unwrap();
        let ctx = AttackContext { clamp: None, seed: 0, example_ids: &[0] };
        let mut delta = vec![0.0, 0.0];
        let mut best = (f64::NEG_INFINITY, delta.clone());
        for _ in 0..3 {
            let xt = Tensor::new(vec![1, 2], vec![0.5 + delta[0], 0.5 + delta[1]]).unwrap();
            let (_, g) = m.loss_and_grad(&xt, &y).unwrap();
            let mut cands = Vec::new();
            for s in set.specs() {
                let mut st = [0.0; 2];
                steepest_step_into(g.data(), s.norm, s.alpha, 1, &mut st);
                let mut c = vec![delta[0] + st[0], delta[1] + st[1]];
                project_into(&mut c, s.norm, s.eps);
                let l = m.losses(&Tensor::new(vec![1, 2], vec![0.5 + c[0], 0.5 + c[1]]).unwrap(), &y).unwrap()[0];
                cands.push((l, c));
            }
            let pick = if cands[1].0 > cands[0].0 { 1 } else { 0 };
            delta = cands[pick].1.clone();
            if cands[pick].0 > best.0 {
                best = (cands[pick].0, delta.clone());
            }
        }
        let d = msd_attack(&m, &x, &y, &set, 3, &ctx).unwrap();
        assert_eq!(d.data(), best.1.as_slice());
    }

    #[test]
    fn mismatched_ids_are_rejected() {
        let (m, x, y, _) = toy(5, 4);
        let ctx = AttackContext { clamp: None, seed: 0, example_ids: &[0, 1] };
        let e = pgd_attack(&m, &x, &y, &PerturbationSpec::default_for(Norm::Inf), &ctx).unwrap_err();
        assert!(matches!(e, Error::Dimension(_)));
    }
}
