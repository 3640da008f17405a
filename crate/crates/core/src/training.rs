//! Adversarial training loops.
//!
//! Every strategy shares one loop: shuffle, craft adversarial inputs against
//! the current weights, back-propagate the loss on them through weight
//! generation and the classifier, take an SGD step. Strategies differ only in
//! how the adversarial inputs are crafted and combined.

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{msd_attack, pgd_attack, AttackContext, AttackTarget, BundleTarget, Norm, PerturbationSet, PerturbationSpec};
use crate::backbone::{BackbonePlan, Mode};
use crate::data::{flip_horizontal, Dataset};
use crate::error::{Error, Result};
use crate::hypernet::HypernetConfig;
use crate::model::{AggregatedModel, Member};
use crate::seed::{self, purpose};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Single,
    Max,
    Avg,
    Msd,
    Psat,
}

fn tenth() -> f64 {
    0.1
}

/// Step decay: the rate is multiplied by `factor` at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "tenth")]
    pub factor: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_wd() -> f64 {
    5e-4
}

fn default_clamp() -> Option<(f64, f64)> {
    Some((0.0, 1.0))
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
    pub strategy: Strategy,
    /// Monitor-set evaluation period in epochs; 0 disables it.
    #[serde(default)]
    pub eval_every: usize,
    /// Random horizontal flips of training images.
    #[serde(default)]
    pub flip: bool,
    /// Weight of the newest batch in the batch-norm running statistics.
    #[serde(default = "tenth")]
    pub bn_momentum: f64,
    /// Data range kept by training attacks; `null` disables clamping.
    #[serde(default = "default_clamp")]
    pub clamp: Option<(f64, f64)>,
    /// Step count of the MSD inner attack; defaults to the largest τ in the set.
    #[serde(default)]
    pub msd_tau: Option<usize>,
    /// Threads used to train independent members.
    #[serde(default = "one")]
    pub workers: usize,
}

impl TrainConfig {
    pub fn new(strategy: Strategy, epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            lr,
            momentum: default_momentum(),
            weight_decay: default_wd(),
            schedule: LrSchedule { milestones: Vec::new(), factor: 0.1 },
            seed,
            strategy,
            eval_every: 0,
            flip: false,
            bn_momentum: 0.1,
            clamp: default_clamp(),
            msd_tau: None,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.schedule.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "train.schedule.milestones must be strictly increasing, got {:?}",
                self.schedule.milestones
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("train.momentum must be in [0, 1) and weight_decay nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("train.bn_momentum must be in [0, 1]".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("train.workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.schedule.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.schedule.factor.powi(drops as i32)
    }
}

/// SGD with momentum and coupled weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T, weight_decay: T) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// `v ← μv + g + λp`, `p ← p − lr·v` for every parameter.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Option<Tensor<T>>], lr: T) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Training(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let g = g.as_ref().ok_or_else(|| Error::Training(format!("missing gradient for parameter {i}")))?;
            let v = &mut self.velocity[i];
            if g.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Training(format!(
                    "parameter {i}: shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(HistoryRow { epoch, split: split.into(), metric: metric.into(), value });
    }

    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.split == split && r.metric == metric).map(|r| r.value).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// How one batch's adversarial inputs are crafted.
enum Inner<'a> {
    Single(&'a PerturbationSpec),
    Max(&'a PerturbationSet),
    Avg(&'a PerturbationSet),
    Msd(&'a PerturbationSet, usize),
}

/// Percentage of rows whose argmax (lowest index on ties) equals the label.
pub(crate) fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    labels.iter().enumerate().filter(|&(i, &y)| argmax(logits.row(i)) == y).count()
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    (0..row.len()).fold(0, |a, k| if row[k] > row[a] { k } else { a })
}

/// Clean accuracy of a member in eval mode, in percent.
pub fn clean_accuracy<T: Scalar>(plan: &BackbonePlan, member: &Member<T>, data: &Dataset, batch: usize) -> Result<f64> {
    let bundle = member.materialize(plan)?;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch::<T>(chunk);
        let logits = crate::backbone::forward_bundle(plan, &bundle, &x, Mode::Eval)?;
        correct += count_correct(&logits, &y);
    }
    Ok(100.0 * correct as f64 / data.len().max(1) as f64)
}

fn adversarial_inputs<T: Scalar>(
    inner: &Inner,
    target: &BundleTarget<T>,
    x: &Tensor<T>,
    y: &[usize],
    ctx: &AttackContext,
    selected: &mut [usize],
) -> Result<Vec<Tensor<T>>> {
    let adv = |d: Tensor<T>| x.add(&d);
    match *inner {
        Inner::Single(spec) => Ok(vec![adv(pgd_attack(target, x, y, spec, ctx)?)?]),
        Inner::Avg(set) => set.specs().iter().map(|s| adv(pgd_attack(target, x, y, s, ctx)?)).collect(),
        Inner::Msd(set, tau) => Ok(vec![adv(msd_attack(target, x, y, set, tau, ctx)?)?]),
        Inner::Max(set) => {
            let mut best: Option<(Vec<T>, Tensor<T>)> = None;
            let mut owner = vec![0usize; y.len()];
            let mut per_norm = Vec::new();
            for (k, s) in set.specs().iter().enumerate() {
                let cand = adv(pgd_attack(target, x, y, s, ctx)?)?;
                let losses = target.losses(&cand, y)?;
                match &mut best {
                    None => best = Some((losses.clone(), cand)),
                    Some((bl, bx)) => {
                        for i in 0..y.len() {
                            if losses[i] > bl[i] {
                                bl[i] = losses[i];
                                bx.row_mut(i).copy_from_slice(cand.row(i));
                                owner[i] = k;
                            }
                        }
                    }
                }
                per_norm.push(losses);
            }
            for &k in &owner {
                selected[k] += 1;
            }
            let (bl, bx) = best.expect("nonempty set");
            for (k, l) in per_norm.iter().enumerate() {
                debug!("max: selected loss {:.5} vs {} loss {:.5}", mean(&bl), set.specs()[k].norm, mean(l));
                debug_assert!(bl.iter().zip(l).all(|(a, b)| a >= b));
            }
            Ok(vec![bx])
        }
    }
}

fn mean<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.to_f64().unwrap()).sum::<f64>() / v.len().max(1) as f64
}

fn train_loop<T: Scalar>(
    plan: &BackbonePlan,
    mut member: Member<T>,
    data: &Dataset,
    inner: Inner,
    cfg: &TrainConfig,
    monitor: Option<&Dataset>,
) -> Result<(Member<T>, History)> {
    cfg.validate()?;
    member.check(plan)?;
    if data.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if data.image_shape() != plan.input_shape() {
        return Err(Error::Training(format!(
            "dataset images {:?} do not match plan input {:?}",
            data.image_shape(),
            plan.input_shape()
        )));
    }
    let norms: Vec<Norm> = match &inner {
        Inner::Single(s) => vec![s.norm],
        Inner::Max(s) | Inner::Avg(s) | Inner::Msd(s, _) => s.norms(),
    };
    let mut sgd = Sgd::new(T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    let mut history = History::default();
    let width = data.image_shape()[2];
    for epoch in 0..cfg.epochs {
        let lr = T::lit(cfg.lr_at(epoch));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::stream(&[cfg.seed, purpose::SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        let mut selected = vec![0usize; norms.len()];
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, y) = data.batch::<T>(idx);
            if cfg.flip {
                for (i, &id) in idx.iter().enumerate() {
                    if seed::stream(&[cfg.seed, purpose::FLIP, epoch as u64, id as u64]).gen::<bool>() {
                        flip_horizontal(x.row_mut(i), width);
                    }
                }
            }
            let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            let ctx = AttackContext {
                clamp: cfg.clamp,
                seed: seed::derive(&[cfg.seed, purpose::ATTACK, epoch as u64, b as u64]),
                example_ids: &ids,
            };
            let bundle = member.materialize(plan)?;
            let target = BundleTarget { plan, params: &bundle, mode: Mode::Train };
            let advs = adversarial_inputs(&inner, &target, &x, &y, &ctx, &mut selected)
                .map_err(|e| e.context(format!("epoch {epoch}, batch {b}")))?;

            let mut tape = Tape::new();
            let bound = member.bind(&mut tape, plan, true)?;
            let mut losses = Vec::with_capacity(advs.len());
            let mut stats = Vec::new();
            for a in advs {
                let xv = tape.constant(a);
                let out = member.forward(&mut tape, plan, &bound, xv, Mode::Train)?;
                correct += count_correct(tape.value(out.logits), &y);
                seen += y.len();
                losses.push(tape.cross_entropy(out.logits, &y)?);
                stats.extend(out.batch_stats);
            }
            let total = match (&inner, losses.as_slice()) {
                (Inner::Avg(_), ls) => {
                    let mut s = ls[0];
                    for &l in &ls[1..] {
                        s = tape.add(s, l)?;
                    }
                    tape.scale(s, T::one() / T::from_usize(ls.len()).unwrap())?
                }
                (_, ls) => ls[0],
            };
            let value = tape.value(total).item()?;
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite loss {value} at epoch {epoch}, batch {b}")));
            }
            loss_sum += value.to_f64().unwrap() * y.len() as f64;
            let mut grads = tape.backward(total)?;
            let g: Vec<Option<Tensor<T>>> = bound.leaves.iter().map(|&v| grads.take(v)).collect();
            sgd.step(member.trainable_mut(), &g, lr)?;
            member.params.update_running_stats(&stats, T::lit(cfg.bn_momentum))?;
        }
        let n = data.len() as f64;
        history.push(epoch, "train", "loss", loss_sum / n);
        history.push(epoch, "train", "adv_acc", 100.0 * correct as f64 / seen.max(1) as f64);
        if matches!(inner, Inner::Max(_)) {
            for (k, norm) in norms.iter().enumerate() {
                history.push(epoch, "train", &format!("selected_{norm}"), selected[k] as f64);
            }
        }
        let mut line = format!("epoch {epoch}: loss {:.4}, adv acc {:.2}%", loss_sum / n, 100.0 * correct as f64 / seen.max(1) as f64);
        if let Some(m) = monitor {
            if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
                let acc = clean_accuracy(plan, &member, m, 256)?;
                history.push(epoch, "test", "acc_clean", acc);
                line.push_str(&format!(", monitor clean {acc:.2}%"));
            }
        }
        info!("{line}");
    }
    Ok((member, history))
}

/// Adversarial training against one ball.
pub fn train_single<T: Scalar>(
    plan: &BackbonePlan,
    member: Member<T>,
    data: &Dataset,
    spec: &PerturbationSpec,
    cfg: &TrainConfig,
    monitor: Option<&Dataset>,
) -> Result<(Member<T>, History)> {
    spec.validate()?;
    train_loop(plan, member, data, Inner::Single(spec), cfg, monitor)
}

/// Trains on the per-example worst of the per-norm PGD perturbations.
pub fn train_max<T: Scalar>(
    plan: &BackbonePlan,
    member: Member<T>,
    data: &Dataset,
    set: &PerturbationSet,
    cfg: &TrainConfig,
    monitor: Option<&Dataset>,
) -> Result<(Member<T>, History)> {
    set.validate()?;
    train_loop(plan, member, data, Inner::Max(set), cfg, monitor)
}

/// Trains on the mean of the per-norm adversarial losses.
pub fn train_avg<T: Scalar>(
    plan: &BackbonePlan,
    member: Member<T>,
    data: &Dataset,
    set: &PerturbationSet,
    cfg: &TrainConfig,
    monitor: Option<&Dataset>,
) -> Result<(Member<T>, History)> {
    for s in set.specs() {
        s.validate()?;
    }
    if set.is_empty() {
        return Err(Error::Config("perturbation set is empty".into()));
    }
    train_loop(plan, member, data, Inner::Avg(set), cfg, monitor)
}

/// Trains on multi-steepest-descent perturbations.
pub fn train_msd<T: Scalar>(
    plan: &BackbonePlan,
    member: Member<T>,
    data: &Dataset,
    set: &PerturbationSet,
    cfg: &TrainConfig,
    monitor: Option<&Dataset>,
) -> Result<(Member<T>, History)> {
    set.validate()?;
    let tau = cfg.msd_tau.unwrap_or_else(|| set.specs().iter().map(|s| s.tau).max().unwrap_or(1));
    train_loop(plan, member, data, Inner::Msd(set, tau), cfg, monitor)
}

/// Seed of the member specialised to `norm`.
pub fn member_seed(seed: u64, norm: Norm) -> u64 {
    seed::derive(&[seed, purpose::MEMBER, norm.id()])
}

/// Initializes and trains the member of one norm.
pub fn train_psat_member<T: Scalar>(
    plan: &BackbonePlan,
    hcfg: &HypernetConfig,
    spec: &PerturbationSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    monitor: Option<&Dataset>,
) -> Result<(Member<T>, History)> {
    let s = member_seed(cfg.seed, spec.norm);
    let member = Member::hyper(plan, hcfg, s)?;
    let cfg = TrainConfig { seed: s, ..cfg.clone() };
    let (m, h) = train_single(plan, member, data, spec, &cfg, monitor)
        .map_err(|e| e.context(format!("member {}", spec.norm)))?;
    Ok((m.with_norm(spec.norm), h))
}

/// Trains one independent hypernetwork member per norm of `set` and
/// aggregates them in set order.
pub fn train_psat<T: Scalar>(
    plan: &BackbonePlan,
    hcfg: &HypernetConfig,
    set: &PerturbationSet,
    data: &Dataset,
    cfg: &TrainConfig,
    monitor: Option<&Dataset>,
) -> Result<(AggregatedModel<T>, Vec<History>)> {
    set.validate()?;
    cfg.validate()?;
    let results: Vec<Result<(Member<T>, History)>> = if cfg.workers > 1 && set.len() > 1 {
        let mut slots: Vec<Option<Result<(Member<T>, History)>>> = (0..set.len()).map(|_| None).collect();
        let per = set.len().div_ceil(cfg.workers);
        std::thread::scope(|s| {
            for (specs, out) in set.specs().chunks(per).zip(slots.chunks_mut(per)) {
                s.spawn(move || {
                    for (spec, o) in specs.iter().zip(out) {
                        *o = Some(train_psat_member(plan, hcfg, spec, data, cfg, monitor));
                    }
                });
            }
        });
        slots.into_iter().map(|r| r.expect("worker finished")).collect()
    } else {
        set.specs().iter().map(|spec| train_psat_member(plan, hcfg, spec, data, cfg, monitor)).collect()
    };
    let mut members = Vec::new();
    let mut histories = Vec::new();
    for r in results {
        let (m, h) = r?;
        members.push(m);
        histories.push(h);
    }
    Ok((AggregatedModel::new(plan.clone(), members)?, histories))
}
