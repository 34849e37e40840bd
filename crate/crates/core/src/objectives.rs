//! Classification heads: softmax cross-entropy and one-vs-all linear SVMs.
//!
//! Both SVM variants take raw scores `s = xW + b` and per-class targets
//! `y ∈ {-1, +1}` (see [`TargetEncoding`]). For a batch of `n` samples:
//!
//! ```text
//! L2-SVM: reg·‖W‖²  + (C/n) Σᵢ Σ_c max(0, 1 - y_ic s_ic)²
//! L1-SVM: reg·WᵀW   + (C/n) Σᵢ Σ_c max(0, 1 - y_ic s_ic)
//! ```
//!
//! where `reg` defaults to `1/n`. The regularizer only touches the head
//! weight `W`; the gradient it contributes is returned separately so the
//! caller can add it to that one tensor.
//!
//! The L1-SVM's norm term is `WᵀW` (the sum of squared weights), which is the
//! squared Euclidean norm even though the L1 variant is sometimes described as
//! using the Manhattan norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "softmax")]
    SoftmaxCe,
    #[serde(rename = "svm")]
    L2Svm,
    #[serde(rename = "l1-svm")]
    L1Svm,
}

impl HeadKind {
    pub fn is_svm(self) -> bool {
        matches!(self, HeadKind::L2Svm | HeadKind::L1Svm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::SoftmaxCe => "softmax",
            HeadKind::L2Svm => "svm",
            HeadKind::L1Svm => "l1-svm",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(HeadKind::SoftmaxCe),
            "svm" | "l2-svm" => Ok(HeadKind::L2Svm),
            "l1-svm" => Ok(HeadKind::L1Svm),
            other => Err(Error::Argument(format!("unknown head `{other}` (expected softmax, svm, l2-svm or l1-svm)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossHead {
    pub kind: HeadKind,
    /// Penalty `C` on the hinge sum; ignored by softmax.
    pub penalty: f64,
    /// Weight of the norm term. `None` means `1/n` for a batch of `n`.
    pub reg_coeff: Option<f64>,
}

impl LossHead {
    pub fn softmax() -> Self {
        LossHead { kind: HeadKind::SoftmaxCe, penalty: 1.0, reg_coeff: None }
    }

    pub fn l2svm(penalty: f64) -> Self {
        LossHead { kind: HeadKind::L2Svm, penalty, reg_coeff: None }
    }

    pub fn l1svm(penalty: f64) -> Self {
        LossHead { kind: HeadKind::L1Svm, penalty, reg_coeff: None }
    }

    pub fn with_reg_coeff(self, reg_coeff: f64) -> Self {
        LossHead { reg_coeff: Some(reg_coeff), ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_svm() && !(self.penalty > 0.0 && self.penalty.is_finite()) {
            return Err(Error::Config(format!("SVM penalty C must be positive, got {}", self.penalty)));
        }
        if let Some(r) = self.reg_coeff {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("regularization coefficient must be >= 0, got {r}")));
            }
        }
        Ok(())
    }

    /// Computes loss and gradients for `scores` against integer `labels`.
    /// `head_weight` is the final layer's weight matrix (used by the SVM
    /// regularizer only).
    pub fn evaluate(&self, scores: &Tensor, labels: &[usize], head_weight: &Tensor) -> Result<HeadOutput> {
        match self.kind {
            HeadKind::SoftmaxCe => {
                let (loss, grad_scores) = softmax_ce(scores, labels)?;
                Ok(HeadOutput { loss, grad_scores, grad_head_weight: None })
            }
            HeadKind::L2Svm | HeadKind::L1Svm => {
                let enc = TargetEncoding::new(labels, class_count(scores)?)?;
                let (loss, grad_scores, grad_w) = if self.kind == HeadKind::L2Svm {
                    l2svm_loss(scores, &enc, self, head_weight)?
                } else {
                    l1svm_loss(scores, &enc, self, head_weight)?
                };
                Ok(HeadOutput { loss, grad_scores, grad_head_weight: Some(grad_w) })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub loss: LossValue,
    pub grad_scores: Tensor,
    /// Regularizer gradient for the head weight (SVM heads only).
    pub grad_head_weight: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub data_term: f64,
    pub reg_term: f64,
}

impl LossValue {
    fn new(data_term: f64, reg_term: f64) -> Self {
        LossValue { total: data_term + reg_term, data_term, reg_term }
    }
}

/// Labels together with their one-vs-all `{-1, +1}` target matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetEncoding {
    labels: Vec<usize>,
    targets: Tensor,
}

impl TargetEncoding {
    pub fn new(labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Argument("cannot encode an empty label set".into()));
        }
        let mut targets = vec![-1.0; labels.len() * classes];
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::Argument(format!("label {label} at position {i} is outside 0..{classes}")));
            }
            targets[i * classes + label] = 1.0;
        }
        Ok(TargetEncoding { labels: labels.to_vec(), targets: Tensor::from_vec(&[labels.len(), classes], targets)? })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[n, classes]`: `+1` at the true class, `-1` elsewhere.
    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    /// Recovers labels from a target matrix by locating the `+1` per row.
    pub fn decode(targets: &Tensor) -> Result<Vec<usize>> {
        let classes = class_count(targets)?;
        targets
            .data()
            .chunks_exact(classes)
            .enumerate()
            .map(|(i, row)| {
                let mut hits = row.iter().enumerate().filter(|(_, &v)| v == 1.0);
                match (hits.next(), hits.next()) {
                    (Some((c, _)), None) => Ok(c),
                    _ => Err(Error::Argument(format!("row {i} does not hold exactly one +1"))),
                }
            })
            .collect()
    }
}

fn class_count(scores: &Tensor) -> Result<usize> {
    match *scores.dims() {
        [_, c] => Ok(c),
        _ => Err(Error::Shape(format!("scores must be [n, classes], got {:?}", scores.shape()))),
    }
}

/// Mean cross-entropy of the row-wise softmax; the gradient is
/// `(softmax - onehot) / n`. Each row is shifted by its maximum before
/// exponentiation.
pub fn softmax_ce(scores: &Tensor, labels: &[usize]) -> Result<(LossValue, Tensor)> {
    let classes = class_count(scores)?;
    let n = scores.dims()[0];
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} score rows but {} labels", labels.len())));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Vec::with_capacity(n * classes);
    let mut loss = 0.0;
    for (row, &label) in scores.data().chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::Argument(format!("label {label} is outside 0..{classes}")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() - (row[label] - max);
        for (c, e) in exps.into_iter().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.push((e / sum - onehot) * inv_n);
        }
    }
    Ok((LossValue::new(loss * inv_n, 0.0), Tensor::from_vec(&[n, classes], grad)?))
}

fn svm_loss(
    expected: HeadKind,
    scores: &Tensor,
    enc: &TargetEncoding,
    head: &LossHead,
    w: &Tensor,
) -> Result<(LossValue, Tensor, Tensor)> {
    if head.kind != expected {
        return Err(Error::Config(format!("{:?} loss called with a {:?} head", expected, head.kind)));
    }
    head.validate()?;
    scores.expect_same_shape(enc.targets(), "svm scores vs targets")?;
    let n = scores.dims()[0];
    let scale = head.penalty / n as f64;
    let reg = head.reg_coeff.unwrap_or(1.0 / n as f64);

    let mut data_term = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.data().iter().zip(enc.targets().data()) {
        let slack = (1.0 - y * s).max(0.0);
        match expected {
            HeadKind::L2Svm => {
                data_term += slack * slack;
                grad.push(scale * 2.0 * slack * -y);
            }
            _ => {
                data_term += slack;
                grad.push(if slack > 0.0 { -y * scale } else { 0.0 });
            }
        }
    }
    let loss = LossValue::new(scale * data_term, reg * w.sum_of_squares());
    Ok((loss, Tensor::from_vec(scores.dims(), grad)?, w.scale(2.0 * reg)))
}

/// Squared-hinge one-vs-all SVM loss. Returns the loss, the score gradient
/// and the regularizer's gradient for `w`.
pub fn l2svm_loss(
    scores: &Tensor,
    enc: &TargetEncoding,
    head: &LossHead,
    w: &Tensor,
) -> Result<(LossValue, Tensor, Tensor)> {
    svm_loss(HeadKind::L2Svm, scores, enc, head, w)
}

/// Hinge one-vs-all SVM loss; the subgradient at a margin of exactly 1 is 0.
pub fn l1svm_loss(
    scores: &Tensor,
    enc: &TargetEncoding,
    head: &LossHead,
    w: &Tensor,
) -> Result<(LossValue, Tensor, Tensor)> {
    svm_loss(HeadKind::L1Svm, scores, enc, head, w)
}

/// Row-wise argmax, ties toward the lowest class index.
pub fn predict(scores: &Tensor) -> Result<Vec<usize>> {
    let classes = class_count(scores)?;
    Ok(scores
        .data()
        .chunks_exact(classes)
        .map(|row| {
            row.iter().enumerate().fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
        })
        .collect())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Argument("accuracy of an empty prediction set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Argument(format!("{} predictions vs {} labels", pred.len(), truth.len())));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_is_ln10() {
        let (loss, grad) = softmax_ce(&Tensor::full(&[3, 10], 0.37).unwrap(), &[0, 4, 9]).unwrap();
        assert!((loss.total - 10f64.ln()).abs() < 1e-12);
        assert_eq!(loss.reg_term, 0.0);
        for row in grad.data().chunks(10) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_confident_limit_and_stability() {
        let mut row = vec![0.0; 10];
        row[3] = 800.0;
        let (loss, grad) = softmax_ce(&t(&[1, 10], &row), &[3]).unwrap();
        assert!(loss.total.abs() < 1e-300 && loss.total >= 0.0);
        assert!(grad.all_finite());
    }

    #[test]
    fn softmax_hand_value() {
        // -log(e / (e + 9))
        let mut row = vec![0.0; 10];
        row[0] = 1.0;
        let (loss, _) = softmax_ce(&t(&[1, 10], &row), &[0]).unwrap();
        let e = 1f64.exp();
        assert!((loss.total - (-(e / (e + 9.0)).ln())).abs() < 1e-12);
    }

    #[test]
    fn l2svm_two_class_example() {
        let enc = TargetEncoding::new(&[0], 2).unwrap();
        let w = Tensor::zeros(&[3, 2]).unwrap();
        let (loss, _, gw) = l2svm_loss(&t(&[1, 2], &[0.5, -0.3]), &enc, &LossHead::l2svm(1.0), &w).unwrap();
        assert!((loss.total - 0.74).abs() < 1e-12);
        assert_eq!(loss.reg_term, 0.0);
        assert_eq!(gw, w);
    }

    #[test]
    fn l1svm_two_class_example() {
        let enc = TargetEncoding::new(&[0], 2).unwrap();
        let w = Tensor::zeros(&[3, 2]).unwrap();
        let (loss, _, _) = l1svm_loss(&t(&[1, 2], &[0.5, -0.3]), &enc, &LossHead::l1svm(1.0), &w).unwrap();
        assert!((loss.total - 1.2).abs() < 1e-12);
    }

    #[test]
    fn svm_satisfied_margins_are_free() {
        let enc = TargetEncoding::new(&[1, 0], 3).unwrap();
        let scores = t(&[2, 3], &[-1.0, 2.0, -3.0, 1.0, -1.5, -1.0]);
        let w = Tensor::zeros(&[4, 3]).unwrap();
        for head in [LossHead::l2svm(2.0), LossHead::l1svm(2.0)] {
            let loss = head.evaluate(&scores, enc.labels(), &w).unwrap().loss;
            assert_eq!(loss.total, 0.0);
        }
    }

    #[test]
    fn svm_regularizer_and_penalty() {
        let enc = TargetEncoding::new(&[0, 1], 2).unwrap();
        let w = t(&[1, 2], &[1.0, -2.0]);
        let scores = t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]);
        let (loss, _, gw) = l2svm_loss(&scores, &enc, &LossHead::l2svm(3.0), &w).unwrap();
        // four unit slacks, C/n = 1.5; norm 5 scaled by 1/n
        assert!((loss.data_term - 6.0).abs() < 1e-15);
        assert!((loss.reg_term - 2.5).abs() < 1e-15);
        assert_eq!(gw.data(), &[1.0, -2.0]);
        let (loss, _, gw) = l1svm_loss(&scores, &enc, &LossHead::l1svm(3.0).with_reg_coeff(0.1), &w).unwrap();
        assert!((loss.reg_term - 0.5).abs() < 1e-15);
        assert!((gw.data()[1] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn svm_kind_mismatch_is_config_error() {
        let enc = TargetEncoding::new(&[0], 2).unwrap();
        let w = Tensor::zeros(&[1, 2]).unwrap();
        let s = t(&[1, 2], &[0.0, 0.0]);
        assert!(matches!(l2svm_loss(&s, &enc, &LossHead::l1svm(1.0), &w), Err(Error::Config(_))));
        assert!(matches!(l1svm_loss(&s, &enc, &LossHead::softmax(), &w), Err(Error::Config(_))));
        assert!(matches!(l2svm_loss(&s, &enc, &LossHead::l2svm(0.0), &w), Err(Error::Config(_))));
    }

    #[test]
    fn l1_subgradient_is_zero_on_the_hinge() {
        let enc = TargetEncoding::new(&[0], 2).unwrap();
        let w = Tensor::zeros(&[1, 2]).unwrap();
        let (_, g, _) = l1svm_loss(&t(&[1, 2], &[1.0, -1.0]), &enc, &LossHead::l1svm(1.0), &w).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn encoding_examples() {
        let enc = TargetEncoding::new(&[2, 0], 3).unwrap();
        assert_eq!(enc.targets().data(), &[-1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
        assert!(TargetEncoding::new(&[3], 3).is_err());
        assert!(TargetEncoding::decode(&t(&[1, 2], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn predict_examples() {
        let mut onehot = vec![0.0; 10];
        onehot[6] = 1.0;
        assert_eq!(predict(&t(&[1, 10], &onehot)).unwrap(), vec![6]);
        let mut row = vec![0.0; 10];
        row[0] = 0.1;
        row[1] = 0.9;
        assert_eq!(predict(&t(&[1, 10], &row)).unwrap(), vec![1]);
        assert_eq!(predict(&Tensor::full(&[2, 10], 0.3).unwrap()).unwrap(), vec![0, 0]);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2], &[0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Argument(_))));
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn head_kind_parsing() {
        assert_eq!("svm".parse::<HeadKind>().unwrap(), HeadKind::L2Svm);
        assert_eq!("softmax".parse::<HeadKind>().unwrap(), HeadKind::SoftmaxCe);
        assert_eq!("l1-svm".parse::<HeadKind>().unwrap(), HeadKind::L1Svm);
        assert!("hinge".parse::<HeadKind>().is_err());
    }

    fn scores_and_labels() -> impl Strategy<Value = (Tensor, Vec<usize>)> {
        (1usize..6).prop_flat_map(|n| {
            (prop::collection::vec(-5.0f64..5.0, n * 10), prop::collection::vec(0usize..10, n))
                .prop_map(move |(s, l)| (Tensor::from_vec(&[n, 10], s).unwrap(), l))
        })
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(labels in prop::collection::vec(0usize..10, 1..40)) {
            let enc = TargetEncoding::new(&labels, 10).unwrap();
            prop_assert_eq!(TargetEncoding::decode(enc.targets()).unwrap(), labels);
        }

        #[test]
        fn argmax_is_scale_invariant((scores, _) in scores_and_labels(), k in 0.01f64..100.0) {
            prop_assert_eq!(predict(&scores.scale(k)).unwrap(), predict(&scores).unwrap());
        }

        #[test]
        fn softmax_grad_rows_sum_to_zero((scores, labels) in scores_and_labels()) {
            let (_, grad) = softmax_ce(&scores, &labels).unwrap();
            for row in grad.data().chunks(10) {
                prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
            }
        }

        #[test]
        fn svm_loss_decreases_in_violated_true_score((scores, labels) in scores_and_labels(), bump in 0.01f64..0.5) {
            let w = Tensor::zeros(&[2, 10]).unwrap();
            for head in [LossHead::l2svm(1.0), LossHead::l1svm(1.0)] {
                let before = head.evaluate(&scores, &labels, &w).unwrap().loss.total;
                let mut raised = scores.clone();
                let label = labels[0];
                let s = raised.data()[label];
                // Only meaningful while the true-class margin stays violated.
                prop_assume!(s + bump < 1.0);
                raised.data_mut()[label] = s + bump;
                let after = head.evaluate(&raised, &labels, &w).unwrap().loss.total;
                prop_assert!(after < before);
            }
        }
    }
}
