//! Clean, per-norm, worst-case and average adversarial accuracy, the
//! trade-off accuracy and parameter-savings reporting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, AttackContext, AttackTarget, BundleTarget, Norm, PerturbationSet};
use crate::backbone::{forward_bundle, BackbonePlan, Mode, ParamBundle};
use crate::data::Dataset;
use crate::ensemble::{predict, AverageTarget, Inference};
use crate::error::{Error, Result};
use crate::model::{AggregatedModel, Member};
use crate::seed::{self, purpose};
use crate::tensor::{Scalar, Tensor};
use crate::training::argmax;

/// How perturbations against an aggregate are crafted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// PGD against the average-probability ensemble.
    #[default]
    AvgSurrogate,
    /// PGD against each member separately; an example survives a norm only
    /// if the aggregate is right on every member's perturbation.
    PerMemberWorst,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg-surrogate" => Ok(EvalMode::AvgSurrogate),
            "per-member-worst" => Ok(EvalMode::PerMemberWorst),
            _ => Err(Error::Config(format!("unknown eval mode {s:?} (expected avg-surrogate or per-member-worst)"))),
        }
    }
}

fn default_eval_batch() -> usize {
    100
}

fn default_clamp() -> Option<(f64, f64)> {
    Some((0.0, 1.0))
}

fn default_inference() -> Inference {
    Inference::LowestEntropy
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    #[serde(default = "default_clamp")]
    pub clamp: Option<(f64, f64)>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: EvalMode,
    #[serde(default = "default_inference")]
    pub inference: Inference,
    #[serde(default = "one")]
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: default_eval_batch(),
            clamp: default_clamp(),
            seed: 0,
            mode: EvalMode::AvgSurrogate,
            inference: Inference::LowestEntropy,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormAccuracy {
    pub norm: Norm,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
    pub eval_mode: Option<EvalMode>,
    pub inference: Option<Inference>,
}

/// All accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_clean: f64,
    pub acc_per_norm: Vec<NormAccuracy>,
    pub acc_max_adv: f64,
    pub acc_avg_adv: f64,
    pub acc_tradeoff: f64,
    pub param_count_model: usize,
    pub param_count_reference: usize,
    pub savings_percent: f64,
    pub metadata: ReportMeta,
}

/// Mean of the six columns {clean, ℓ∞, ℓ2, ℓ1, max, avg}.
pub fn tradeoff_accuracy(six: &[f64]) -> Result<f64> {
    if six.len() != 6 {
        return Err(Error::Contract(format!("trade-off accuracy takes 6 values, got {}", six.len())));
    }
    if let Some(v) = six.iter().find(|v| !(0.0..=100.0).contains(*v)) {
        return Err(Error::Contract(format!("accuracy {v} outside [0, 100]")));
    }
    Ok(six.iter().sum::<f64>() / 6.0)
}

/// `(1 − model/reference)·100`: positive is a saving, negative an increase.
pub fn param_savings(model_count: f64, reference_count: f64) -> Result<f64> {
    if !(reference_count > 0.0) || !(model_count > 0.0) {
        return Err(Error::Contract(format!(
            "parameter counts must be positive, got {model_count} and {reference_count}"
        )));
    }
    Ok((1.0 - model_count / reference_count) * 100.0)
}

/// Two decimals with a direction marker: `↓79.30%`, `↑0.02%`, `0.00%`.
pub fn format_savings(pct: f64) -> String {
    let s = format!("{:.2}", pct.abs());
    if s == "0.00" {
        "0.00%".into()
    } else if pct > 0.0 {
        format!("↓{s}%")
    } else {
        format!("↑{s}%")
    }
}

impl MetricsReport {
    pub fn acc(&self, norm: Norm) -> Option<f64> {
        self.acc_per_norm.iter().find(|a| a.norm == norm).map(|a| a.acc)
    }

    /// Range, worst-case and averaging invariants.
    pub fn check(&self) -> Result<()> {
        let mut all = vec![self.acc_clean, self.acc_max_adv, self.acc_avg_adv, self.acc_tradeoff];
        all.extend(self.acc_per_norm.iter().map(|a| a.acc));
        if all.iter().any(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::Evaluation("accuracy outside [0, 100]".into()));
        }
        if self.acc_per_norm.iter().any(|a| self.acc_max_adv > a.acc + 1e-9) {
            return Err(Error::Evaluation("worst-case accuracy exceeds a per-norm accuracy".into()));
        }
        let mean = self.acc_per_norm.iter().map(|a| a.acc).sum::<f64>() / self.acc_per_norm.len().max(1) as f64;
        if (mean - self.acc_avg_adv).abs() > 1e-9 {
            return Err(Error::Evaluation("average adversarial accuracy differs from the per-norm mean".into()));
        }
        Ok(())
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["model".to_string(), "acc_clean".into()];
        h.extend(self.acc_per_norm.iter().map(|a| format!("acc_{}", a.norm)));
        h.extend(
            [
                "acc_max_adv",
                "acc_avg_adv",
                "acc_tradeoff",
                "param_count_model",
                "param_count_reference",
                "savings_percent",
                "seed",
                "config_hash",
                "eval_mode",
                "inference",
            ]
            .map(String::from),
        );
        h
    }

    pub fn csv_record(&self) -> Vec<String> {
        let mut r = vec![self.metadata.model.clone(), self.acc_clean.to_string()];
        r.extend(self.acc_per_norm.iter().map(|a| a.acc.to_string()));
        r.extend([
            self.acc_max_adv.to_string(),
            self.acc_avg_adv.to_string(),
            self.acc_tradeoff.to_string(),
            self.param_count_model.to_string(),
            self.param_count_reference.to_string(),
            self.savings_percent.to_string(),
            self.metadata.seed.to_string(),
            self.metadata.config_hash.clone(),
            self.metadata.eval_mode.map(|m| enum_tag(&m)).unwrap_or_default(),
            self.metadata.inference.map(|m| enum_tag(&m)).unwrap_or_default(),
        ]);
        r
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.csv_header()).map_err(|e| Error::Format(e.to_string()))?;
        wr.write_record(self.csv_record()).map_err(|e| Error::Format(e.to_string()))?;
        wr.flush()?;
        Ok(())
    }
}

fn enum_tag<S: Serialize>(v: &S) -> String {
    serde_json::to_value(v).ok().and_then(|j| j.as_str().map(String::from)).unwrap_or_default()
}

/// Per-example outcomes for one model under every norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcomes {
    pub norms: Vec<Norm>,
    pub clean: Vec<bool>,
    /// `adversarial[k][i]`: example `i` survives norm `k`.
    pub adversarial: Vec<Vec<bool>>,
}

fn pct(flags: impl Iterator<Item = bool>, n: usize) -> f64 {
    100.0 * flags.filter(|&b| b).count() as f64 / n as f64
}

impl Outcomes {
    fn empty(norms: Vec<Norm>) -> Self {
        let k = norms.len();
        Self { norms, clean: Vec::new(), adversarial: vec![Vec::new(); k] }
    }

    fn extend(&mut self, other: Outcomes) {
        self.clean.extend(other.clean);
        for (a, b) in self.adversarial.iter_mut().zip(other.adversarial) {
            a.extend(b);
        }
    }

    /// Metrics without parameter counts or metadata.
    pub fn report(&self) -> Result<MetricsReport> {
        let n = self.clean.len();
        if n == 0 {
            return Err(Error::Evaluation("no examples evaluated".into()));
        }
        let acc_clean = pct(self.clean.iter().copied(), n);
        let acc_per_norm: Vec<NormAccuracy> = self
            .norms
            .iter()
            .zip(&self.adversarial)
            .map(|(&norm, v)| NormAccuracy { norm, acc: pct(v.iter().copied(), n) })
            .collect();
        let acc_max_adv = pct((0..n).map(|i| self.adversarial.iter().all(|v| v[i])), n);
        let k = self.norms.len() as f64;
        let acc_avg_adv = acc_per_norm.iter().map(|a| a.acc).sum::<f64>() / k;
        let mut cols = vec![acc_clean];
        cols.extend(acc_per_norm.iter().map(|a| a.acc));
        cols.extend([acc_max_adv, acc_avg_adv]);
        let acc_tradeoff = if cols.len() == 6 {
            tradeoff_accuracy(&cols)?
        } else {
            cols.iter().sum::<f64>() / cols.len() as f64
        };
        let r = MetricsReport {
            acc_clean,
            acc_per_norm,
            acc_max_adv,
            acc_avg_adv,
            acc_tradeoff,
            param_count_model: 0,
            param_count_reference: 0,
            savings_percent: 0.0,
            metadata: ReportMeta::default(),
        };
        r.check()?;
        Ok(r)
    }

    /// Mean over examples of the fraction of norms survived, in percent.
    pub fn survival_average(&self) -> f64 {
        let n = self.clean.len();
        let k = self.norms.len() as f64;
        let per: f64 =
            (0..n).map(|i| self.adversarial.iter().filter(|v| v[i]).count() as f64 / k).sum::<f64>() / n as f64;
        100.0 * per
    }
}

/// What is being evaluated.
pub enum Subject<'a, T> {
    Member { plan: &'a BackbonePlan, member: &'a Member<T> },
    Aggregate(&'a AggregatedModel<T>),
}

impl<T: Scalar> Subject<'_, T> {
    pub fn param_count(&self) -> usize {
        match self {
            Subject::Member { member, .. } => member.param_count(),
            Subject::Aggregate(a) => a.param_count(),
        }
    }

    fn plan(&self) -> &BackbonePlan {
        match self {
            Subject::Member { plan, .. } => plan,
            Subject::Aggregate(a) => &a.plan,
        }
    }

    fn bundles(&self) -> Result<Vec<ParamBundle<T>>> {
        match self {
            Subject::Member { plan, member } => Ok(vec![member.materialize(plan)?]),
            Subject::Aggregate(a) => a.materialize(),
        }
    }
}

/// Predicted labels of a single bundle or of the aggregate under each rule.
fn labels_for<T: Scalar>(
    plan: &BackbonePlan,
    bundles: &[ParamBundle<T>],
    aggregate: bool,
    x: &Tensor<T>,
    rules: &[Inference],
) -> Result<Vec<Vec<usize>>> {
    if !aggregate {
        let logits = forward_bundle(plan, &bundles[0], x, Mode::Eval)?;
        let l: Vec<usize> = (0..x.shape()[0]).map(|i| argmax(logits.row(i))).collect();
        return Ok(vec![l; rules.len()]);
    }
    rules
        .iter()
        .map(|&r| Ok(predict(plan, bundles, x, r)?.into_iter().map(|p| p.label).collect()))
        .collect()
}

fn eval_chunk<T: Scalar>(
    plan: &BackbonePlan,
    bundles: &[ParamBundle<T>],
    aggregate: bool,
    data: &Dataset,
    idx: &[usize],
    set: &PerturbationSet,
    cfg: &EvalConfig,
    rules: &[Inference],
) -> Result<Vec<Outcomes>> {
    let (x, y) = data.batch::<T>(idx);
    let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
    let ctx = AttackContext { clamp: cfg.clamp, seed: seed::derive(&[cfg.seed, purpose::EVAL]), example_ids: &ids };
    let right = |labels: &[usize]| -> Vec<bool> { labels.iter().zip(&y).map(|(a, b)| a == b).collect() };
    let mut out: Vec<Outcomes> = rules.iter().map(|_| Outcomes::empty(set.norms())).collect();
    for (o, l) in out.iter_mut().zip(labels_for(plan, bundles, aggregate, &x, rules)?) {
        o.clean = right(&l);
    }
    for (k, spec) in set.specs().iter().enumerate() {
        let deltas: Vec<Tensor<T>> = if !aggregate {
            let t = BundleTarget { plan, params: &bundles[0], mode: Mode::Eval };
            vec![pgd_attack(&t, &x, &y, spec, &ctx)?]
        } else {
            match cfg.mode {
                EvalMode::AvgSurrogate => {
                    let t = AverageTarget { plan, bundles };
                    vec![pgd_attack(&t as &dyn AttackTarget<T>, &x, &y, spec, &ctx)?]
                }
                EvalMode::PerMemberWorst => bundles
                    .iter()
                    .map(|b| pgd_attack(&BundleTarget { plan, params: b, mode: Mode::Eval }, &x, &y, spec, &ctx))
                    .collect::<Result<_>>()?,
            }
        };
        let mut survive = vec![vec![true; y.len()]; rules.len()];
        for d in deltas {
            let adv = x.add(&d)?;
            for (s, l) in survive.iter_mut().zip(labels_for(plan, bundles, aggregate, &adv, rules)?) {
                for (a, b) in s.iter_mut().zip(right(&l)) {
                    *a &= b;
                }
            }
        }
        for (o, s) in out.iter_mut().zip(survive) {
            o.adversarial[k] = s;
        }
    }
    Ok(out)
}

/// Per-example outcomes for each inference rule, sharing one set of attacks.
///
/// Examples are processed in fixed chunks of `cfg.batch_size`; chunks are
/// spread over `cfg.workers` threads. Random starts derive from the global
/// example index, so results do not depend on the worker count.
pub fn evaluate_outcomes<T: Scalar>(
    subject: &Subject<T>,
    data: &Dataset,
    set: &PerturbationSet,
    cfg: &EvalConfig,
    rules: &[Inference],
) -> Result<Vec<Outcomes>> {
    set.validate()?;
    if data.is_empty() {
        return Err(Error::Evaluation("empty dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.workers == 0 {
        return Err(Error::Config("eval batch_size and workers must be positive".into()));
    }
    let plan = subject.plan();
    let bundles = subject.bundles()?;
    let aggregate = matches!(subject, Subject::Aggregate(_));
    let all: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = all.chunks(cfg.batch_size).collect();
    let run = |c: &[usize]| eval_chunk(plan, &bundles, aggregate, data, c, set, cfg, rules);
    let results: Vec<Result<Vec<Outcomes>>> = if cfg.workers > 1 && chunks.len() > 1 {
        let mut slots: Vec<Option<Result<Vec<Outcomes>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let mut lanes: Vec<Vec<(usize, &mut Option<_>)>> = (0..cfg.workers).map(|_| Vec::new()).collect();
            for (i, slot) in slots.iter_mut().enumerate() {
                lanes[i % cfg.workers].push((i, slot));
            }
            for lane in lanes {
                let (run, chunks) = (&run, &chunks);
                s.spawn(move || {
                    for (i, slot) in lane {
                        *slot = Some(run(chunks[i]));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("chunk evaluated")).collect()
    } else {
        chunks.iter().map(|c| run(c)).collect()
    };
    let mut merged: Vec<Outcomes> = rules.iter().map(|_| Outcomes::empty(set.norms())).collect();
    for r in results {
        for (m, o) in merged.iter_mut().zip(r?) {
            m.extend(o);
        }
    }
    Ok(merged)
}

/// Full metrics report. `reference_count` is the parameter count of the
/// directly parameterized backbone.
pub fn evaluate<T: Scalar>(
    subject: &Subject<T>,
    data: &Dataset,
    set: &PerturbationSet,
    cfg: &EvalConfig,
    reference_count: usize,
    model_name: &str,
) -> Result<MetricsReport> {
    let rule = cfg.inference;
    let outcomes = evaluate_outcomes(subject, data, set, cfg, &[rule])?;
    let mut r = outcomes[0].report()?;
    let model = subject.param_count();
    r.param_count_model = model;
    r.param_count_reference = reference_count;
    r.savings_percent = param_savings(model as f64, reference_count as f64)?;
    let aggregate = matches!(subject, Subject::Aggregate(_));
    r.metadata = ReportMeta {
        model: model_name.into(),
        seed: cfg.seed,
        config_hash: String::new(),
        eval_mode: aggregate.then_some(cfg.mode),
        inference: aggregate.then_some(rule),
    };
    Ok(r)
}

/// One row per (example, norm) of an attack run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackRecord {
    pub example: u64,
    pub norm: Norm,
    pub label: usize,
    pub clean_pred: usize,
    pub adv_pred: usize,
    pub delta_norm: f64,
}

/// Attacks a single member and records per-example outcomes.
pub fn attack_records<T: Scalar>(
    plan: &BackbonePlan,
    member: &Member<T>,
    data: &Dataset,
    set: &PerturbationSet,
    cfg: &EvalConfig,
) -> Result<Vec<AttackRecord>> {
    let bundle = member.materialize(plan)?;
    let target = BundleTarget { plan, params: &bundle, mode: Mode::Eval };
    let mut out = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(cfg.batch_size.max(1)) {
        let (x, y) = data.batch::<T>(idx);
        let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
        let ctx = AttackContext { clamp: cfg.clamp, seed: seed::derive(&[cfg.seed, purpose::EVAL]), example_ids: &ids };
        let clean = forward_bundle(plan, &bundle, &x, Mode::Eval)?;
        for spec in set.specs() {
            let d = pgd_attack(&target, &x, &y, spec, &ctx)?;
            let adv = forward_bundle(plan, &bundle, &x.add(&d)?, Mode::Eval)?;
            for i in 0..y.len() {
                out.push(AttackRecord {
                    example: ids[i],
                    norm: spec.norm,
                    label: y[i],
                    clean_pred: argmax(clean.row(i)),
                    adv_pred: argmax(adv.row(i)),
                    delta_norm: spec.norm.of(d.row(i)).to_f64().unwrap(),
                });
            }
        }
    }
    Ok(out)
}

/// Table-1-shaped text table.
pub fn render_table(rows: &[MetricsReport]) -> String {
    let norms: Vec<Norm> = rows.first().map(|r| r.acc_per_norm.iter().map(|a| a.norm).collect()).unwrap_or_default();
    let mut head = vec!["Method".to_string(), "Acc_clean".into()];
    head.extend(norms.iter().map(|n| format!("Acc_{n}")));
    head.extend(["Acc_max_adv", "Acc_avg_adv", "Acc_trade-off", "# of Paras", "Paras Saving"].map(String::from));
    let mut body = Vec::new();
    for r in rows {
        let mut line = vec![r.metadata.model.clone(), format!("{:.2}%", r.acc_clean)];
        line.extend(norms.iter().map(|&n| r.acc(n).map(|a| format!("{a:.2}%")).unwrap_or_else(|| "-".into())));
        line.extend([
            format!("{:.2}%", r.acc_max_adv),
            format!("{:.2}%", r.acc_avg_adv),
            format!("{:.2}%", r.acc_tradeoff),
            r.param_count_model.to_string(),
            if r.param_count_reference > 0 { format_savings(r.savings_percent) } else { "-".into() },
        ]);
        body.push(line);
    }
    let widths: Vec<usize> = (0..head.len())
        .map(|c| std::iter::once(&head).chain(&body).map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let fmt = |l: &[String]| {
        l.iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, &w))| {
                let pad = w - s.chars().count();
                if c == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = fmt(&head);
    out.push('\n');
    out.push_str(&"-".repeat(out.chars().count() - 1));
    out.push('\n');
    for l in &body {
        out.push_str(&fmt(l));
        out.push('\n');
    }
    out
}
