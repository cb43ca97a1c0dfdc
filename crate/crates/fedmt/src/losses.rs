//! Training objectives with analytic gradients.
//!
//! Four objectives are supported: plain cross-entropy, forward-corrected
//! cross-entropy (class probabilities projected through a matrix before the
//! log), backward-corrected cross-entropy (per-class log-likelihoods
//! re-weighted by the matrix pseudo-inverse at the observed label), and a
//! class-weighted mean squared error on softmax outputs.
//!
//! All reductions are means over the batch. Gradients are exact analytic
//! derivatives; every public loss is checked against central finite
//! differences in the tests.
//!
//! The three cross-entropy losses intentionally share one arithmetic path
//! (the same softmax, the same clamped log, layout-identical gradient
//! expressions), so that with an identity projection they agree with plain
//! cross-entropy bit for bit, not merely to rounding. The federation module
//! relies on that equivalence.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{MatrixRole, ProjectionMatrix};

/// Probabilities are clamped here before any log.
const LOG_FLOOR: f64 = 1e-300;

/// Which label alphabet a batch is annotated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    /// The fine space with K classes that predictions live in.
    Desired(usize),
    /// The coarse or overlapping space with J classes.
    Other(usize),
}

impl LabelSpace {
    pub fn cardinality(&self) -> usize {
        match *self {
            LabelSpace::Desired(n) | LabelSpace::Other(n) => n,
        }
    }
}

/// A batch of feature vectors with integer labels in one label space.
///
/// Serializes as {inputs: row-major reals, labels: integers, space}; the
/// feature dimension is recovered from the lengths on load.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    inputs: DMatrix<f64>,
    labels: Vec<usize>,
    space: LabelSpace,
}

#[derive(Serialize, Deserialize)]
struct BatchJson {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    space: LabelSpace,
}

impl Serialize for LabeledBatch {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut inputs = Vec::with_capacity(self.inputs.nrows() * self.inputs.ncols());
        for i in 0..self.inputs.nrows() {
            for j in 0..self.inputs.ncols() {
                inputs.push(self.inputs[(i, j)]);
            }
        }
        BatchJson { inputs, labels: self.labels.clone(), space: self.space }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LabeledBatch {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = BatchJson::deserialize(deserializer)?;
        if raw.labels.is_empty() || raw.inputs.len() % raw.labels.len() != 0 {
            return Err(serde::de::Error::custom(
                "batch inputs length must be a positive multiple of the label count",
            ));
        }
        let d = raw.inputs.len() / raw.labels.len();
        if d == 0 {
            return Err(serde::de::Error::custom("batch must have at least one feature"));
        }
        let inputs = DMatrix::from_row_slice(raw.labels.len(), d, &raw.inputs);
        LabeledBatch::new(inputs, raw.labels, raw.space).map_err(serde::de::Error::custom)
    }
}

impl LabeledBatch {
    pub fn new(inputs: DMatrix<f64>, labels: Vec<usize>, space: LabelSpace) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        let card = space.cardinality();
        if card == 0 {
            return Err(Error::ShapeMismatch("label space must have at least one class".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= card) {
            return Err(Error::ShapeMismatch(format!(
                "label {bad} outside space of cardinality {card}"
            )));
        }
        Ok(LabeledBatch { inputs, labels, space })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn space(&self) -> LabelSpace {
        self.space
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension d.
    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// A new batch holding the selected rows (labels copied along).
    pub fn select(&self, idx: &[usize]) -> LabeledBatch {
        let d = self.inputs.ncols();
        let mut inputs = DMatrix::zeros(idx.len(), d);
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            inputs.row_mut(row).copy_from(&self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        LabeledBatch { inputs, labels, space: self.space }
    }
}

/// The objective a participant trains with.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    PlainCe,
    ForwardCorrected(ProjectionMatrix),
    BackwardCorrected(ProjectionMatrix),
    WeightedMse(ProjectionMatrix),
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = logits.shape();
    let mut p = DMatrix::zeros(n, k);
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..k {
            mx = mx.max(logits[(i, j)]);
        }
        let mut sum = 0.0;
        for j in 0..k {
            let e = (logits[(i, j)] - mx).exp();
            p[(i, j)] = e;
            sum += e;
        }
        for j in 0..k {
            p[(i, j)] /= sum;
        }
    }
    p
}

fn check_rows(logits: &DMatrix<f64>, batch: &LabeledBatch) -> Result<()> {
    if logits.nrows() != batch.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            batch.len()
        )));
    }
    if batch.is_empty() {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    Ok(())
}

fn check_projection(logits: &DMatrix<f64>, batch: &LabeledBatch, m: &ProjectionMatrix) -> Result<()> {
    check_rows(logits, batch)?;
    if m.rows() != batch.space().cardinality() {
        return Err(Error::ShapeMismatch(format!(
            "projection has {} rows but labels live in a space of {}",
            m.rows(),
            batch.space().cardinality()
        )));
    }
    if m.cols() != logits.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "projection has {} columns but logits have {}",
            m.cols(),
            logits.ncols()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of softmax(logits) against the labels, with its
/// gradient with respect to the logits.
pub fn plain_ce(logits: &DMatrix<f64>, batch: &LabeledBatch) -> Result<(f64, DMatrix<f64>)> {
    check_rows(logits, batch)?;
    if batch.space().cardinality() != logits.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "labels from a {}-class space scored against {} logits",
            batch.space().cardinality(),
            logits.ncols()
        )));
    }
    let (n, k) = logits.shape();
    let inv_n = 1.0 / n as f64;
    let p = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(n, k);
    for i in 0..n {
        let y = batch.labels()[i];
        loss += -(p[(i, y)].max(LOG_FLOOR)).ln();
        for a in 0..k {
            let target = if a == y { 1.0 } else { 0.0 };
            grad[(i, a)] = (p[(i, a)] - target) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Forward-corrected cross-entropy: the per-sample loss is the negative log
/// of the observed label's row of `m` applied to the softmax probabilities.
pub fn forward_corrected_ce(
    logits: &DMatrix<f64>,
    batch: &LabeledBatch,
    m: &ProjectionMatrix,
) -> Result<(f64, DMatrix<f64>)> {
    check_projection(logits, batch, m)?;
    let (n, k) = logits.shape();
    let inv_n = 1.0 / n as f64;
    let p = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(n, k);
    for i in 0..n {
        let y = batch.labels()[i];
        let mut s = 0.0;
        for a in 0..k {
            s += m.entry(y, a) * p[(i, a)];
        }
        if s <= LOG_FLOOR {
            return Err(Error::NonfiniteLoss(format!(
                "projected probability {s:e} for label {y} leaves no mass to take a log of"
            )));
        }
        loss += -s.ln();
        for a in 0..k {
            // Written as p - (m p) / s so an identity projection reproduces
            // the plain gradient exactly (the a == y term becomes p * (p/p)).
            grad[(i, a)] = (p[(i, a)] - m.entry(y, a) * p[(i, a)] / s) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Backward-corrected cross-entropy: per-class log-likelihoods are weighted
/// by the observed label's column of the pseudo-inverse of `m`. The result
/// may legitimately be negative when the pseudo-inverse has negative entries.
pub fn backward_corrected_ce(
    logits: &DMatrix<f64>,
    batch: &LabeledBatch,
    m: &ProjectionMatrix,
) -> Result<(f64, DMatrix<f64>)> {
    check_projection(logits, batch, m)?;
    let (n, k) = logits.shape();
    let inv_n = 1.0 / n as f64;
    let p = softmax_rows(logits);
    let pinv = m.pinv();
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(n, k);
    for i in 0..n {
        let y = batch.labels()[i];
        let mut li = 0.0;
        let mut wsum = 0.0;
        for a in 0..k {
            let w = pinv[(a, y)];
            li += w * (p[(i, a)].max(LOG_FLOOR)).ln();
            wsum += w;
        }
        loss += -li;
        for a in 0..k {
            grad[(i, a)] = (p[(i, a)] * wsum - pinv[(a, y)]) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Per-class weights of the weighted mean squared error: the mass the
/// pseudo-inverse assigns to each prediction class, summed over the observed
/// label axis. For a noise map that is the column sum of the inverse (which
/// is 1 for every symmetric transition); for a label-space map it is the row
/// sum of the pseudo-inverse.
pub fn mse_class_weights(m: &ProjectionMatrix) -> Vec<f64> {
    let pinv = m.pinv();
    let k = m.cols();
    let mut w = vec![0.0; k];
    match m.role() {
        MatrixRole::LabelSpaceMap => {
            for (a, slot) in w.iter_mut().enumerate() {
                *slot = pinv.row(a).iter().sum();
            }
        }
        MatrixRole::NoiseMap => {
            for (a, slot) in w.iter_mut().enumerate() {
                *slot = pinv.column(a).iter().sum();
            }
        }
    }
    w
}

/// The multi-hot expansion of a batch's labels in the prediction space: a
/// desired-space label is one-hot; an other-space label marks the support of
/// its projection row.
pub fn multi_hot(batch: &LabeledBatch, m: &ProjectionMatrix) -> Result<DMatrix<f64>> {
    let k = m.cols();
    let mut y = DMatrix::zeros(batch.len(), k);
    match batch.space() {
        LabelSpace::Desired(card) => {
            if card != k {
                return Err(Error::ShapeMismatch(format!(
                    "desired-space labels of cardinality {card} cannot expand to {k} classes"
                )));
            }
            for (i, &l) in batch.labels().iter().enumerate() {
                y[(i, l)] = 1.0;
            }
        }
        LabelSpace::Other(card) => {
            if card != m.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "other-space labels of cardinality {card} but projection has {} rows",
                    m.rows()
                )));
            }
            for (i, &l) in batch.labels().iter().enumerate() {
                for a in 0..k {
                    if m.entry(l, a) > 0.0 {
                        y[(i, a)] = 1.0;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Class-weighted mean squared error on softmax outputs, with its gradient
/// with respect to the outputs (not the logits; see [`loss_on_logits`] for
/// the chained version).
pub fn weighted_mse(
    outputs: &DMatrix<f64>,
    batch: &LabeledBatch,
    m: &ProjectionMatrix,
) -> Result<(f64, DMatrix<f64>)> {
    check_rows(outputs, batch)?;
    if m.cols() != outputs.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "projection has {} columns but outputs have {}",
            m.cols(),
            outputs.ncols()
        )));
    }
    let (n, k) = outputs.shape();
    let inv_n = 1.0 / n as f64;
    let w = mse_class_weights(m);
    let y = multi_hot(batch, m)?;
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(n, k);
    for i in 0..n {
        for a in 0..k {
            let diff = y[(i, a)] - outputs[(i, a)];
            loss += w[a] * diff * diff;
            grad[(i, a)] = 2.0 * w[a] * (outputs[(i, a)] - y[(i, a)]) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Evaluates `kind` on raw logits, returning the loss and its gradient with
/// respect to the logits. The weighted MSE is composed with softmax here.
pub fn loss_on_logits(
    kind: &LossKind,
    logits: &DMatrix<f64>,
    batch: &LabeledBatch,
) -> Result<(f64, DMatrix<f64>)> {
    match kind {
        LossKind::PlainCe => plain_ce(logits, batch),
        LossKind::ForwardCorrected(m) => forward_corrected_ce(logits, batch, m),
        LossKind::BackwardCorrected(m) => backward_corrected_ce(logits, batch, m),
        LossKind::WeightedMse(m) => {
            let g = softmax_rows(logits);
            let (loss, dg) = weighted_mse(&g, batch, m)?;
            let (n, k) = logits.shape();
            let mut grad = DMatrix::zeros(n, k);
            for i in 0..n {
                let mut dot = 0.0;
                for a in 0..k {
                    dot += dg[(i, a)] * g[(i, a)];
                }
                for a in 0..k {
                    grad[(i, a)] = g[(i, a)] * (dg[(i, a)] - dot);
                }
            }
            Ok((loss, grad))
        }
    }
}
