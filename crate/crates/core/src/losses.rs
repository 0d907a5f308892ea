//! Segmentation losses and the weighted training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProbMap;
use crate::tensor::{Graph, Tensor, Var};
use crate::volume::RegionMask;

/// Additive smoothing in soft-Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.5,
            alpha: 1.0,
            beta: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.alpha, self.beta];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Parameter(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 && self.lambda3 == 0.0 {
            return Err(Error::Parameter("at least one lambda must be non-zero".into()));
        }
        Ok(())
    }
}

fn check_pair(g: &Graph, y_hat: &ProbMap, y: &RegionMask) -> Result<()> {
    if g.shape(y_hat.var()) != y.values().shape() {
        return Err(Error::Dimension {
            op: "loss",
            lhs: g.shape(y_hat.var()).to_vec(),
            rhs: y.values().shape().to_vec(),
        });
    }
    if !y.is_binarized() {
        return Err(Error::Contract("ground truth must be binarized".into()));
    }
    Ok(())
}

/// `1 − mean_c (2Σŷy + s)/(Σŷ + Σy + s)`, sums restricted to `region` when given.
///
/// Returns `None` when `region` selects no voxel.
pub fn soft_dice_loss(
    g: &mut Graph,
    y_hat: &ProbMap,
    y: &RegionMask,
    region: Option<&[bool]>,
) -> Result<Option<Var>> {
    check_pair(g, y_hat, y)?;
    let n = y.voxels();
    if let Some(r) = region {
        if r.len() != n {
            return Err(Error::Dimension {
                op: "soft_dice_loss",
                lhs: vec![n],
                rhs: vec![r.len()],
            });
        }
        if !r.iter().any(|&b| b) {
            return Ok(None);
        }
    }
    let keep = |v: usize| region.map_or(true, |r| r[v % n]);
    let truth: Vec<f64> = y
        .values()
        .data()
        .iter()
        .enumerate()
        .map(|(v, &t)| if keep(v) { t } else { 0.0 })
        .collect();
    let truth_sum: Vec<f64> = truth.chunks(n).map(|c| c.iter().sum()).collect();
    let pred = g.reshape(y_hat.var(), &[3, n])?;
    let pred = match region {
        Some(_) => {
            let m = g.constant(Tensor::from_fn(&[3, n], |v| f64::from(u8::from(keep(v)))));
            g.mul(pred, m)?
        }
        None => pred,
    };
    let truth = g.constant(Tensor::new(&[3, n], truth)?);
    let inter = g.mul(pred, truth)?;
    let inter = g.sum_axis(inter, 1)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let psum = g.sum_axis(pred, 1)?;
    let tsum = g.constant(Tensor::new(&[3], truth_sum)?);
    let den = g.add(psum, tsum)?;
    let den = g.add_scalar(den, DICE_SMOOTH)?;
    let dice = g.div(num, den)?;
    let mean = g.mean(dice)?;
    let loss = g.scale(mean, -1.0)?;
    Ok(Some(g.add_scalar(loss, 1.0)?))
}

/// Mean binary cross-entropy over all channels and voxels.
pub fn bce(g: &mut Graph, y_hat: &ProbMap, y: &RegionMask) -> Result<Var> {
    check_pair(g, y_hat, y)?;
    let p = g.clamp(y_hat.var(), BCE_EPS, 1.0 - BCE_EPS)?;
    let log_p = g.ln(p)?;
    let q = g.scale(p, -1.0)?;
    let q = g.add_scalar(q, 1.0)?;
    let log_q = g.ln(q)?;
    let t = y.values().clone();
    let not_t = Tensor::from_fn(t.shape(), |i| 1.0 - t.data()[i]);
    let t = g.constant(t);
    let not_t = g.constant(not_t);
    let a = g.mul(t, log_p)?;
    let b = g.mul(not_t, log_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.scale(m, -1.0)
}

/// Mean over regions of `(soft Dice loss + BCE) / 2`.
pub fn seg_loss(g: &mut Graph, y_hat: &ProbMap, y: &RegionMask) -> Result<Var> {
    let dice = soft_dice_loss(g, y_hat, y, None)?.expect("unrestricted region is non-empty");
    let ce = bce(g, y_hat, y)?;
    let s = g.add(dice, ce)?;
    g.scale(s, 0.5)
}

/// Scalar values of the three objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub seg: f64,
    pub tpa: f64,
    pub dur: f64,
}

fn check_finite(parts: &LossParts) -> Result<()> {
    for (name, v) in [("L_seg", parts.seg), ("L_TPA", parts.tpa), ("L_DUR", parts.dur)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v}")));
        }
    }
    Ok(())
}

/// `λ1·L_seg + λ2·L_TPA + λ3·L_DUR` on plain values.
pub fn weighted_total(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    check_finite(parts)?;
    Ok(w.lambda1 * parts.seg + w.lambda2 * parts.tpa + w.lambda3 * parts.dur)
}

/// Graph version of [`weighted_total`]; each part must be a scalar.
pub fn total_loss(g: &mut Graph, seg: Var, tpa: Var, dur: Var, w: &LossWeights) -> Result<Var> {
    check_finite(&LossParts {
        seg: g.item(seg)?,
        tpa: g.item(tpa)?,
        dur: g.item(dur)?,
    })?;
    let a = g.scale(seg, w.lambda1)?;
    let b = g.scale(tpa, w.lambda2)?;
    let c = g.scale(dur, w.lambda3)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}
