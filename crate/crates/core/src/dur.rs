//! Dual-path uncertainty refinement.
//!
//! `T` dropout-active forward passes give a per-voxel population variance,
//! averaged over the three region channels. Voxels with variance at most `δ`
//! form the core, the rest the boundary, and each part gets its own
//! weighted overlap loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::soft_dice_loss;
use crate::model::{ProbMap, TuclModel};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};
use crate::volume::{MultiContrastVolume, RegionMask};

/// How the core/boundary threshold `δ` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum DeltaMode {
    /// `δ` is the `q`-quantile of the field (inverted-CDF convention).
    Quantile { q: f64 },
    Fixed { value: f64 },
}

impl Default for DeltaMode {
    fn default() -> Self {
        DeltaMode::Quantile { q: 0.9 }
    }
}

impl DeltaMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DeltaMode::Quantile { q } if !(q > 0.0 && q <= 1.0) => {
                Err(Error::Parameter(format!("quantile must be in (0, 1], got {q}")))
            }
            DeltaMode::Fixed { value } if !(value >= 0.0 && value.is_finite()) => {
                Err(Error::Parameter(format!("fixed delta must be finite and >= 0, got {value}")))
            }
            _ => Ok(()),
        }
    }
}

/// Core/boundary split of the voxel domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub core: Vec<bool>,
    pub boundary: Vec<bool>,
    pub delta: f64,
}

impl Partition {
    pub fn core_count(&self) -> usize {
        self.core.iter().filter(|&&c| c).count()
    }

    pub fn boundary_count(&self) -> usize {
        self.boundary.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyField {
    /// Variance `[W×H×D]`, non-negative.
    pub u: Tensor,
    pub samples: usize,
    pub partition: Partition,
}

/// `q`-quantile of `values` using the smallest value whose empirical CDF reaches `q`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn partition(u: &[f64], mode: DeltaMode) -> Result<Partition> {
    mode.validate()?;
    if u.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Parameter("uncertainty must be non-negative".into()));
    }
    let delta = match mode {
        DeltaMode::Quantile { q } => quantile(u, q),
        DeltaMode::Fixed { value } => value,
    };
    let core: Vec<bool> = u.iter().map(|&v| v <= delta).collect();
    let boundary = core.iter().map(|c| !c).collect();
    Ok(Partition {
        core,
        boundary,
        delta,
    })
}

/// Running sums for the mean and population variance of equally shaped samples.
///
/// Values are accumulated as offsets from the first sample, so identical
/// samples give exactly zero variance.
#[derive(Debug, Clone)]
pub struct Ensemble {
    shift: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: usize,
}

impl Ensemble {
    pub fn new(first: &[f64]) -> Self {
        Self {
            shift: first.to_vec(),
            sum: vec![0.0; first.len()],
            sum_sq: vec![0.0; first.len()],
            count: 1,
        }
    }

    pub fn push(&mut self, sample: &[f64]) -> Result<()> {
        if sample.len() != self.shift.len() {
            return Err(Error::Dimension {
                op: "ensemble",
                lhs: vec![self.shift.len()],
                rhs: vec![sample.len()],
            });
        }
        for i in 0..sample.len() {
            let d = sample[i] - self.shift[i];
            self.sum[i] += d;
            self.sum_sq[i] += d * d;
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Vec<f64> {
        let t = self.count as f64;
        self.shift.iter().zip(&self.sum).map(|(s, d)| s + d / t).collect()
    }

    /// Population variance (divisor `T`).
    pub fn variance(&self) -> Vec<f64> {
        let t = self.count as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, sq)| (sq / t - (s / t) * (s / t)).max(0.0))
            .collect()
    }
}

/// Averages a `[3×N]` per-channel variance into one value per voxel.
pub fn channel_mean(per_channel: &[f64], voxels: usize) -> Vec<f64> {
    let c = per_channel.len() / voxels;
    (0..voxels)
        .map(|v| (0..c).map(|ch| per_channel[ch * voxels + v]).sum::<f64>() / c as f64)
        .collect()
}

/// Runs `t` stochastic passes; pass `i` draws its dropout masks from `rng.derive_index(i)`.
pub fn mc_uncertainty(
    model: &TuclModel,
    x: &MultiContrastVolume,
    t: usize,
    rng: &RngStream,
    mode: DeltaMode,
) -> Result<(RegionMask, UncertaintyField)> {
    if t < 2 {
        return Err(Error::Parameter(format!("need at least 2 samples, got {t}")));
    }
    let mut ens: Option<Ensemble> = None;
    for i in 0..t {
        let y = model.predict(x, true, &mut rng.derive_index(i as u64))?;
        match ens.as_mut() {
            None => ens = Some(Ensemble::new(y.values().data())),
            Some(e) => e.push(y.values().data())?,
        }
    }
    let ens = ens.expect("t >= 2");
    let [w, h, d] = x.dims();
    let n = w * h * d;
    let mean = RegionMask::new(Tensor::new(&[3, w, h, d], ens.mean())?, false)?;
    let u = channel_mean(&ens.variance(), n);
    let partition = partition(&u, mode)?;
    Ok((
        mean,
        UncertaintyField {
            u: Tensor::new(&[w, h, d], u)?,
            samples: t,
            partition,
        },
    ))
}

/// `α·ℓ(core) + β·ℓ(boundary)` with ℓ the region-restricted soft-Dice loss;
/// an empty part contributes zero.
pub fn dur_loss(
    g: &mut Graph,
    y_hat: &ProbMap,
    y: &RegionMask,
    partition: &Partition,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Parameter(format!(
            "alpha and beta must be >= 0, got {alpha}, {beta}"
        )));
    }
    let core = soft_dice_loss(g, y_hat, y, Some(&partition.core))?;
    let boundary = soft_dice_loss(g, y_hat, y, Some(&partition.boundary))?;
    let terms: Vec<Var> = [(core, alpha), (boundary, beta)]
        .into_iter()
        .filter_map(|(t, w)| t.map(|t| g.scale(t, w)))
        .collect::<Result<_>>()?;
    match terms.as_slice() {
        [] => Ok(g.constant(Tensor::scalar(0.0))),
        [one] => Ok(*one),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}
