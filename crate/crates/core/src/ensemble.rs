//! Test-time aggregation of per-norm members.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackTarget;
use crate::backbone::{bind, forward, forward_bundle, BackbonePlan, Mode, ParamBundle};
use crate::error::{Error, Result};
use crate::model::AggregatedModel;
use crate::tape::{softmax_rows, Tape};
use crate::tensor::{Scalar, Tensor};

/// How the aggregate turns member outputs into one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Inference {
    /// The most confident (lowest-entropy) member answers.
    LowestEntropy,
    /// Members' class probabilities are averaged.
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Member(usize),
    Ensemble,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Member(i) => write!(f, "{i}"),
            Source::Ensemble => f.write_str("ensemble"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub probs: Vec<T>,
    pub label: usize,
    pub source: Source,
    /// Entropy of `probs` in nats.
    pub entropy: T,
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy<T: Scalar>(probs: &[T]) -> Result<T> {
    if let Some(p) = probs.iter().find(|&&p| p < T::zero() || !p.is_finite()) {
        return Err(Error::Contract(format!("probability {p} is not a finite nonnegative number")));
    }
    let s: T = probs.iter().copied().sum();
    if (s - T::one()).abs() > T::lit(1e-4) {
        return Err(Error::Contract(format!("probabilities sum to {s}")));
    }
    Ok(probs.iter().filter(|&&p| p > T::zero()).map(|&p| -p * p.ln()).sum())
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    (0..row.len()).fold(0, |a, k| if row[k] > row[a] { k } else { a })
}

/// Softmax outputs of every member (eval mode), one N×|C| tensor each.
pub fn member_probs<T: Scalar>(plan: &BackbonePlan, bundles: &[ParamBundle<T>], x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    bundles
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let logits = forward_bundle(plan, b, x, Mode::Eval).map_err(|e| e.context(format!("member {i}")))?;
            let c = logits.shape()[1];
            Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), c))
        })
        .collect()
}

/// Per example, the prediction of the member with minimal entropy
/// (earliest member on ties).
pub fn select_lowest_entropy<T: Scalar>(probs: &[Tensor<T>]) -> Result<Vec<Prediction<T>>> {
    let first = probs.first().ok_or_else(|| Error::Contract("no members".into()))?;
    let n = first.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best: Option<(usize, T)> = None;
        for (m, p) in probs.iter().enumerate() {
            let h = entropy(p.row(i))?;
            if best.is_none_or(|(_, bh)| h < bh) {
                best = Some((m, h));
            }
        }
        let (m, h) = best.expect("at least one member");
        let row = probs[m].row(i).to_vec();
        out.push(Prediction { label: argmax(&row), probs: row, source: Source::Member(m), entropy: h });
    }
    Ok(out)
}

/// Per example, the mean of the members' probabilities.
pub fn average_predictions<T: Scalar>(probs: &[Tensor<T>]) -> Result<Vec<Prediction<T>>> {
    let first = probs.first().ok_or_else(|| Error::Contract("no members".into()))?;
    let (n, c) = (first.shape()[0], first.shape()[1]);
    let m = T::from_usize(probs.len()).unwrap();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = vec![T::zero(); c];
        for p in probs {
            for (r, &v) in row.iter_mut().zip(p.row(i)) {
                *r += v;
            }
        }
        for r in row.iter_mut() {
            *r /= m;
        }
        let h = entropy(&row)?;
        out.push(Prediction { label: argmax(&row), probs: row, source: Source::Ensemble, entropy: h });
    }
    Ok(out)
}

pub fn predict<T: Scalar>(
    plan: &BackbonePlan,
    bundles: &[ParamBundle<T>],
    x: &Tensor<T>,
    rule: Inference,
) -> Result<Vec<Prediction<T>>> {
    let probs = member_probs(plan, bundles, x)?;
    match rule {
        Inference::LowestEntropy => select_lowest_entropy(&probs),
        Inference::Average => average_predictions(&probs),
    }
}

pub fn predict_lowest_entropy<T: Scalar>(agg: &AggregatedModel<T>, x: &Tensor<T>) -> Result<Vec<Prediction<T>>> {
    predict(&agg.plan, &agg.materialize()?, x, Inference::LowestEntropy)
}

pub fn predict_average<T: Scalar>(agg: &AggregatedModel<T>, x: &Tensor<T>) -> Result<Vec<Prediction<T>>> {
    predict(&agg.plan, &agg.materialize()?, x, Inference::Average)
}

/// Differentiable surrogate of the aggregate: the loss is
/// `−ln mean_m softmax_m(x)[y]`.
pub struct AverageTarget<'a, T> {
    pub plan: &'a BackbonePlan,
    pub bundles: &'a [ParamBundle<T>],
}

impl<T: Scalar> AverageTarget<'_, T> {
    fn mean_probs(&self, tape: &mut Tape<T>, x: crate::tape::Var) -> Result<crate::tape::Var> {
        let mut acc = None;
        for (i, b) in self.bundles.iter().enumerate() {
            let bound = bind(tape, b, false);
            let out = forward(tape, self.plan, &bound, b, x, Mode::Eval).map_err(|e| e.context(format!("member {i}")))?;
            let p = tape.softmax(out.logits)?;
            acc = Some(match acc {
                None => p,
                Some(a) => tape.add(a, p)?,
            });
        }
        let acc = acc.ok_or_else(|| Error::Contract("no members".into()))?;
        tape.scale(acc, T::one() / T::from_usize(self.bundles.len()).unwrap())
    }

    fn per_example(probs: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
        let c = probs.shape()[1];
        let tiny = T::min_positive_value();
        let l: Vec<T> = labels.iter().enumerate().map(|(i, &y)| -probs.row(i)[y].max(tiny).ln()).collect();
        if let Some(i) = l.iter().position(|v| !v.is_finite()) {
            return Err(Error::Attack(format!("non-finite surrogate loss at example {i}")));
        }
        debug_assert!(labels.iter().all(|&y| y < c));
        Ok(l)
    }
}

impl<T: Scalar> AttackTarget<T> for AverageTarget<'_, T> {
    fn loss_and_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(Vec<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let p = self.mean_probs(&mut tape, xv)?;
        let losses = Self::per_example(tape.value(p), labels)?;
        let nll = tape.nll_of_probs(p, labels)?;
        let total = tape.scale(nll, T::from_usize(labels.len()).unwrap())?;
        let g = tape.backward(total)?.wrt(&tape, xv);
        if !g.all_finite() {
            return Err(Error::Attack("non-finite surrogate gradient".into()));
        }
        Ok((losses, g))
    }

    fn losses(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = self.mean_probs(&mut tape, xv)?;
        Self::per_example(tape.value(p), labels)
    }
}

/// CSV dump: example id, selected source, per-member entropies, label.
pub fn write_prediction_dump<T: Scalar, W: Write>(
    w: W,
    ids: &[u64],
    member_probs: &[Tensor<T>],
    preds: &[Prediction<T>],
) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["example".to_string(), "member".to_string()];
    header.extend((0..member_probs.len()).map(|m| format!("entropy_{m}")));
    header.push("label".into());
    wr.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for (i, p) in preds.iter().enumerate() {
        let mut rec = vec![ids[i].to_string(), p.source.to_string()];
        for mp in member_probs {
            rec.push(format!("{}", entropy(mp.row(i))?));
        }
        rec.push(p.label.to_string());
        wr.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}
