//! Metric-learning losses with closed-form gradients.
//!
//! Every loss takes up to three embeddings in slots `a`, `b`, `c` and returns
//! the loss value together with the gradient with respect to each slot:
//!
//! | loss           | a        | b            | c          |
//! |----------------|----------|--------------|------------|
//! | SCL genuine    | N of i   | I of i       | I of i     |
//! | SCL imposter   | N of i   | I of j       | I of i     |
//! | contrastive    | first    | second       | -          |
//! | triplet        | anchor   | positive     | negative   |
//!
//! Hinge terms are active only while the distance is strictly below the margin;
//! an inactive hinge contributes exactly zero value and zero gradient.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Margins of the inter-class hinge terms, both strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SclConfig {
    /// Squared-distance margin between a non-injured sample of one subject and
    /// an injured sample of another.
    pub alpha1: f64,
    /// Squared-distance margin between injured samples of different subjects.
    pub alpha2: f64,
}

impl Default for SclConfig {
    fn default() -> Self {
        SclConfig {
            alpha1: 2.0,
            alpha2: 3.1,
        }
    }
}

impl SclConfig {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self> {
        let cfg = SclConfig { alpha1, alpha2 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        validate_margin("alpha1", self.alpha1)?;
        validate_margin("alpha2", self.alpha2)
    }
}

pub(crate) fn validate_margin(name: &str, m: f64) -> Result<()> {
    if m.is_finite() && m > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and > 0, got {m}")))
    }
}

/// Set label `Y`: 0 for genuine, 1 for imposter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SetLabel {
    Genuine,
    Imposter,
}

impl SetLabel {
    pub fn y(self) -> u8 {
        match self {
            SetLabel::Genuine => 0,
            SetLabel::Imposter => 1,
        }
    }

    pub fn from_y(y: u8) -> Option<Self> {
        match y {
            0 => Some(SetLabel::Genuine),
            1 => Some(SetLabel::Imposter),
            _ => None,
        }
    }
}

/// How per-item losses combine over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    /// Scale applied to every item's loss and gradient for a batch of `n`.
    pub fn scale(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean if n > 0 => 1.0 / n as f64,
            Reduction::Mean => 0.0,
        }
    }
}

/// Loss value plus the gradient with respect to each input slot.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
    pub grad_c: Option<Vec<f64>>,
}

impl LossValue {
    fn zero(dim: usize, with_c: bool) -> Self {
        LossValue {
            value: 0.0,
            grad_a: vec![0.0; dim],
            grad_b: vec![0.0; dim],
            grad_c: with_c.then(|| vec![0.0; dim]),
        }
    }

    pub fn grads_are_zero(&self) -> bool {
        self.grad_a
            .iter()
            .chain(&self.grad_b)
            .chain(self.grad_c.iter().flatten())
            .all(|&g| g == 0.0)
    }
}

pub fn squared_euclidean(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dim(u.len(), v.len())?;
    Ok(sq_dist(u, v))
}

pub fn euclidean(u: &[f64], v: &[f64]) -> Result<f64> {
    squared_euclidean(u, v).map(f64::sqrt)
}

#[inline]
pub(crate) fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `g += scale * (u - v)`
#[inline]
fn axpy_diff(g: &mut [f64], scale: f64, u: &[f64], v: &[f64]) {
    for ((g, x), y) in g.iter_mut().zip(u).zip(v) {
        *g += scale * (x - y);
    }
}

fn check_slots(a: &[f64], b: &[f64], c: Option<&[f64]>) -> Result<()> {
    check_dim(a.len(), b.len())?;
    if let Some(c) = c {
        check_dim(a.len(), c.len())?;
    }
    Ok(())
}

/// Genuine-set loss `‖a−b‖² + ‖b−c‖²`; the second term is dropped when `c` is absent.
pub fn scl_intra_loss(a: &[f64], b: &[f64], c: Option<&[f64]>) -> Result<LossValue> {
    check_slots(a, b, c)?;
    let mut out = LossValue::zero(a.len(), c.is_some());
    out.value = sq_dist(a, b);
    axpy_diff(&mut out.grad_a, 2.0, a, b);
    axpy_diff(&mut out.grad_b, 2.0, b, a);
    if let Some(c) = c {
        out.value += sq_dist(b, c);
        axpy_diff(&mut out.grad_b, 2.0, b, c);
        axpy_diff(out.grad_c.as_mut().expect("c slot"), 2.0, c, b);
    }
    Ok(out)
}

/// Imposter-set loss `max(0, α1 − ‖a−b‖²) + max(0, α2 − ‖b−c‖²)`.
pub fn scl_inter_loss(a: &[f64], b: &[f64], c: Option<&[f64]>, cfg: &SclConfig) -> Result<LossValue> {
    cfg.validate()?;
    check_slots(a, b, c)?;
    let mut out = LossValue::zero(a.len(), c.is_some());
    let d1 = sq_dist(a, b);
    if d1 < cfg.alpha1 {
        out.value += cfg.alpha1 - d1;
        axpy_diff(&mut out.grad_a, -2.0, a, b);
        axpy_diff(&mut out.grad_b, -2.0, b, a);
    }
    if let Some(c) = c {
        let d2 = sq_dist(b, c);
        if d2 < cfg.alpha2 {
            out.value += cfg.alpha2 - d2;
            axpy_diff(&mut out.grad_b, -2.0, b, c);
            axpy_diff(out.grad_c.as_mut().expect("c slot"), -2.0, c, b);
        }
    }
    Ok(out)
}

/// `(1−Y)·intra + Y·inter`. With binary `Y` this is exactly one of the two.
pub fn scl_set_loss(
    label: SetLabel,
    a: &[f64],
    b: &[f64],
    c: Option<&[f64]>,
    cfg: &SclConfig,
) -> Result<LossValue> {
    match label {
        SetLabel::Genuine => scl_intra_loss(a, b, c),
        SetLabel::Imposter => scl_inter_loss(a, b, c, cfg),
    }
}

/// Contrastive loss on the Euclidean distance `D`:
/// genuine `½·D²`, imposter `½·max(0, m − D)²`.
///
/// At `D = 0` an imposter pair has no defined direction; its gradient is zero.
pub fn contrastive_loss(x1: &[f64], x2: &[f64], label: SetLabel, margin: f64) -> Result<LossValue> {
    validate_margin("margin", margin)?;
    check_dim(x1.len(), x2.len())?;
    let mut out = LossValue::zero(x1.len(), false);
    let d2 = sq_dist(x1, x2);
    match label {
        SetLabel::Genuine => {
            out.value = 0.5 * d2;
            axpy_diff(&mut out.grad_a, 1.0, x1, x2);
            axpy_diff(&mut out.grad_b, 1.0, x2, x1);
        }
        SetLabel::Imposter => {
            let d = d2.sqrt();
            if d < margin {
                let gap = margin - d;
                out.value = 0.5 * gap * gap;
                if d > 0.0 {
                    let s = -gap / d;
                    axpy_diff(&mut out.grad_a, s, x1, x2);
                    axpy_diff(&mut out.grad_b, s, x2, x1);
                }
            }
        }
    }
    Ok(out)
}

/// Triplet loss `max(0, ‖a−p‖² − ‖a−n‖² + m)` on squared distances.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<LossValue> {
    validate_margin("margin", margin)?;
    check_slots(anchor, positive, Some(negative))?;
    let mut out = LossValue::zero(anchor.len(), true);
    let z = sq_dist(anchor, positive) - sq_dist(anchor, negative) + margin;
    if z > 0.0 {
        out.value = z;
        // d/da = 2(a−p) − 2(a−n) = 2(n−p)
        axpy_diff(&mut out.grad_a, 2.0, negative, positive);
        axpy_diff(&mut out.grad_b, 2.0, positive, anchor);
        axpy_diff(out.grad_c.as_mut().expect("c slot"), 2.0, anchor, negative);
    }
    Ok(out)
}

/// Reduces per-item values in index order.
pub fn reduce(values: &[f64], reduction: Reduction) -> f64 {
    let s = reduction.scale(values.len());
    values.iter().fold(0.0, |acc, v| acc + s * v)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAPER: SclConfig = SclConfig {
        alpha1: 2.0,
        alpha2: 3.1,
    };

    #[test]
    fn squared_distance_by_hand() {
        assert_eq!(squared_euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(squared_euclidean(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(squared_euclidean(&[1.0, 2.0, 3.0], &[2.0, 0.0, 3.0]).unwrap(), 5.0);
        assert!(matches!(
            squared_euclidean(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn intra_by_hand() {
        let x = [0.3, -1.2];
        let l = scl_intra_loss(&x, &x, Some(&x)).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grads_are_zero());

        let l = scl_intra_loss(&[0.0, 0.0], &[1.0, 0.0], Some(&[1.0, 1.0])).unwrap();
        assert_eq!(l.value, 2.0);
        assert_eq!(l.grad_a, vec![-2.0, 0.0]);
        assert_eq!(l.grad_b, vec![2.0, -2.0]);
        assert_eq!(l.grad_c, Some(vec![0.0, 2.0]));
    }

    #[test]
    fn intra_degenerate_set_keeps_first_pair() {
        let l = scl_intra_loss(&[0.0, 0.0], &[1.0, 0.0], None).unwrap();
        assert_eq!(l.value, 1.0);
        assert_eq!(l.grad_b, vec![2.0, 0.0]);
        assert_eq!(l.grad_c, None);
    }

    #[test]
    fn inter_by_hand() {
        let x = [0.7, 0.1, -0.4];
        let l = scl_inter_loss(&x, &x, Some(&x), &PAPER).unwrap();
        assert_eq!(l.value, 5.1);
        assert!(l.grads_are_zero());

        // ‖a−b‖² = 4, ‖b−c‖² = 9: both inactive.
        let l = scl_inter_loss(&[0.0, 0.0], &[2.0, 0.0], Some(&[2.0, 3.0]), &PAPER).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grads_are_zero());

        // ‖a−b‖² = 1 (active), ‖b−c‖² = 4 (inactive).
        let l = scl_inter_loss(&[0.0, 0.0], &[1.0, 0.0], Some(&[1.0, 2.0]), &PAPER).unwrap();
        assert_eq!(l.value, 1.0);
        assert_eq!(l.grad_a, vec![2.0, 0.0]);
        assert_eq!(l.grad_b, vec![-2.0, 0.0]);
        assert_eq!(l.grad_c, Some(vec![0.0, 0.0]));
    }

    #[test]
    fn inter_hinge_boundary_is_inactive() {
        let cfg = SclConfig::new(1.0, 1.0).unwrap();
        let l = scl_inter_loss(&[0.0], &[1.0], Some(&[2.0]), &cfg).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grads_are_zero());
    }

    #[test]
    fn margins_must_be_positive() {
        assert!(matches!(SclConfig::new(0.0, 1.0), Err(Error::Config(_))));
        assert!(SclConfig::new(1.0, -3.0).is_err());
        let bad = SclConfig {
            alpha1: f64::NAN,
            alpha2: 1.0,
        };
        assert!(scl_inter_loss(&[0.0], &[0.0], None, &bad).is_err());
        assert!(contrastive_loss(&[0.0], &[1.0], SetLabel::Imposter, 0.0).is_err());
        assert!(triplet_loss(&[0.0], &[1.0], &[2.0], -0.4).is_err());
    }

    #[test]
    fn set_loss_dispatches_on_label() {
        let (a, b, c) = ([0.1, 0.2], [0.5, -0.3], [1.0, 0.0]);
        assert_eq!(
            scl_set_loss(SetLabel::Genuine, &a, &b, Some(&c), &PAPER).unwrap(),
            scl_intra_loss(&a, &b, Some(&c)).unwrap()
        );
        assert_eq!(
            scl_set_loss(SetLabel::Imposter, &a, &b, Some(&c), &PAPER).unwrap(),
            scl_inter_loss(&a, &b, Some(&c), &PAPER).unwrap()
        );
        assert_eq!(SetLabel::from_y(1), Some(SetLabel::Imposter));
        assert_eq!(SetLabel::Genuine.y(), 0);
    }

    #[test]
    fn contrastive_by_hand() {
        let x = [1.0, 2.0];
        assert_eq!(contrastive_loss(&x, &x, SetLabel::Genuine, 2.0).unwrap().value, 0.0);
        let far = contrastive_loss(&[0.0, 0.0], &[3.0, 0.0], SetLabel::Imposter, 2.0).unwrap();
        assert_eq!(far.value, 0.0);
        assert!(far.grads_are_zero());
        let near = contrastive_loss(&[0.0, 0.0], &[1.0, 0.0], SetLabel::Imposter, 2.0).unwrap();
        assert_eq!(near.value, 0.5);
        assert_eq!(near.grad_a, vec![1.0, 0.0]);
        assert_eq!(near.grad_b, vec![-1.0, 0.0]);
        let coincident = contrastive_loss(&x, &x, SetLabel::Imposter, 2.0).unwrap();
        assert_eq!(coincident.value, 2.0);
        assert!(coincident.grads_are_zero());
    }

    #[test]
    fn triplet_by_hand() {
        let l = triplet_loss(&[5.0, 1.0], &[0.0, 2.0], &[0.0, 2.0], 0.4).unwrap();
        assert_eq!(l.value, 0.4);
        let l = triplet_loss(&[0.0], &[0.0], &[1.0], 0.4).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grads_are_zero());
    }

    #[test]
    fn reduction_sum_and_mean() {
        assert_eq!(reduce(&[1.0, 2.0, 3.0], Reduction::Sum), 6.0);
        assert_eq!(reduce(&[1.0, 2.0, 3.0], Reduction::Mean), 2.0);
        assert_eq!(reduce(&[], Reduction::Mean), 0.0);
    }
}
