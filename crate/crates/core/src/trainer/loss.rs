//! Masked losses and the per-node difficulty score.

use candle_core::Tensor;
use ndarray::{ArrayView3, Zip};

use crate::error::{Error, Result};

/// `sum |pred - target| * mask / sum mask` on plain arrays.
pub fn masked_mae(pred: ArrayView3<f64>, target: ArrayView3<f64>, mask: ArrayView3<bool>) -> Result<f64> {
    if pred.dim() != target.dim() || pred.dim() != mask.dim() {
        return Err(Error::Shape("masked MAE inputs differ in shape".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    Zip::from(&pred).and(&target).and(&mask).for_each(|&p, &t, &m| {
        if m {
            sum += (p - t).abs();
            count += 1;
        }
    });
    if count == 0 {
        return Err(Error::EmptyMask("masked MAE over an empty mask".into()));
    }
    Ok(sum / count as f64)
}

/// Masked MAE on tensors; `mask` holds 0/1 values and `count` is its sum.
pub fn masked_mae_tensor(pred: &Tensor, target: &Tensor, mask: &Tensor, count: f64) -> Result<Tensor> {
    if count <= 0.0 {
        return Err(Error::EmptyMask("masked MAE over an empty mask".into()));
    }
    Ok(((pred - target)?.abs()? * mask)?.sum_all()?.affine(1.0 / count, 0.0)?)
}

/// Weights of the visible and reconstruction terms: `(1 - alpha, alpha)`,
/// with an empty term dropped and the other taking full weight.
pub fn blend_weights(has_visible: bool, has_reconstruction: bool, alpha: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Param(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    match (has_visible, has_reconstruction) {
        (true, true) => Ok((1.0 - alpha, alpha)),
        (true, false) => Ok((1.0, 0.0)),
        (false, true) => Ok((0.0, 1.0)),
        (false, false) => Err(Error::EmptyMask(
            "both the visible and the reconstruction masks are empty".into(),
        )),
    }
}

/// Scalar blend of already computed terms plus the gate penalty.
pub fn blend(
    l_visible: Option<f64>,
    l_reconstruction: Option<f64>,
    alpha: f64,
    gate_l1: f64,
    gate_weight: f64,
) -> Result<f64> {
    let (wv, wr) = blend_weights(l_visible.is_some(), l_reconstruction.is_some(), alpha)?;
    Ok(wv * l_visible.unwrap_or(0.0) + wr * l_reconstruction.unwrap_or(0.0) + gate_weight * gate_l1)
}

/// The training objective split into its parts.
pub struct LossParts {
    pub total: Tensor,
    pub visible: Option<f64>,
    pub reconstruction: Option<f64>,
    pub gate_l1: f64,
}

/// Blended masked MAE on visible and reconstruction entries plus the gate L1 term.
/// Masks are 0/1 tensors shaped like `pred` with their sums precomputed.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    pred: &Tensor,
    target: &Tensor,
    m_visible: (&Tensor, f64),
    m_reconstruction: (&Tensor, f64),
    alpha: f64,
    gate_l1: &Tensor,
    gate_weight: f64,
) -> Result<LossParts> {
    let (wv, wr) = blend_weights(m_visible.1 > 0.0, m_reconstruction.1 > 0.0, alpha)?;
    let mut total = gate_l1.affine(gate_weight, 0.0)?;
    let mut parts = (None, None);
    if m_visible.1 > 0.0 {
        let l = masked_mae_tensor(pred, target, m_visible.0, m_visible.1)?;
        parts.0 = Some(super::scalar(&l)?);
        total = (total + l.affine(wv, 0.0)?)?;
    }
    if m_reconstruction.1 > 0.0 {
        let l = masked_mae_tensor(pred, target, m_reconstruction.0, m_reconstruction.1)?;
        parts.1 = Some(super::scalar(&l)?);
        total = (total + l.affine(wr, 0.0)?)?;
    }
    Ok(LossParts {
        total,
        visible: parts.0,
        reconstruction: parts.1,
        gate_l1: super::scalar(gate_l1)?,
    })
}

/// Mean of `2|p - y| / (|p| + |y| + eps)` over the given pairs; in `[0, 2]`.
pub fn smape_difficulty(pairs: impl IntoIterator<Item = (f64, f64)>, eps: f64) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, y) in pairs {
        sum += 2.0 * (p - y).abs() / (p.abs() + y.abs() + eps);
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}
