//! Held-out evaluation and its CSV outputs.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::{bland_altman, dice, hd95, pearson_r, volume, BlandAltman};
use crate::model::{binarize, TuclModel};
use crate::phantom::DatasetItem;
use crate::volume::{Modality, Region};

/// Conventions stamped into every report header.
pub const CONVENTIONS: &str =
    "hd95=p95 linear interpolation, symmetric max; hd95 with one empty mask=volume diagonal; dice with both empty=100";

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRow {
    pub id: String,
    pub region: Region,
    pub dice: f64,
    pub hd95: f64,
    /// Exactly one of the two masks was empty, so `hd95` is the diagonal penalty.
    pub hd95_penalty: bool,
    pub pred_volume: f64,
    pub true_volume: f64,
}

/// Means over cases; arrays are indexed by [`Region::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub dice: [f64; 3],
    pub dice_ave: f64,
    pub hd95: [f64; 3],
    pub hd95_ave: f64,
    /// `None` with fewer than two cases.
    pub bland_altman: [Option<BlandAltman>; 3],
    /// `None` when undefined (fewer than two cases or a constant volume list).
    pub pearson: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub drop: Option<Modality>,
    pub spacing: f64,
    pub cases: Vec<CaseRow>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn rows(&self, region: Region) -> impl Iterator<Item = &CaseRow> {
        self.cases.iter().filter(move |r| r.region == region)
    }
}

/// Deterministic inference on every labeled item, optionally with one
/// modality zero-filled first.
pub fn evaluate(
    model: &TuclModel,
    items: &[DatasetItem],
    drop: Option<Modality>,
    spacing: f64,
) -> Result<EvalReport> {
    evaluate_with_threads(model, items, drop, spacing, 1)
}

/// [`evaluate`] with cases split over up to `threads` workers. Rows keep item order.
pub fn evaluate_with_threads(
    model: &TuclModel,
    items: &[DatasetItem],
    drop: Option<Modality>,
    spacing: f64,
    threads: usize,
) -> Result<EvalReport> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::Parameter(format!("spacing must be positive, got {spacing}")));
    }
    let labeled: Vec<&DatasetItem> = items.iter().filter(|it| it.mask.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::Config("evaluation needs at least one labeled item".into()));
    }
    let chunk = labeled.len().div_ceil(threads.max(1));
    let parts: Vec<Result<Vec<CaseRow>>> = std::thread::scope(|s| {
        let handles: Vec<_> = labeled
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut rows = Vec::new();
                    for item in part {
                        rows.extend(case_rows(model, item, drop, spacing)?);
                    }
                    Ok(rows)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut cases = Vec::new();
    for p in parts {
        cases.extend(p?);
    }
    let aggregate = aggregate(&cases);
    Ok(EvalReport {
        drop,
        spacing,
        cases,
        aggregate,
    })
}

fn case_rows(
    model: &TuclModel,
    item: &DatasetItem,
    drop: Option<Modality>,
    spacing: f64,
) -> Result<Vec<CaseRow>> {
    let truth = item.mask.as_ref().expect("labeled");
    let x = match drop {
        Some(m) => item.volume.drop(m),
        None => item.volume.clone(),
    };
    let pred = binarize(&model.forward(&x, false, 0)?, 0.5);
    let dims = x.dims();
    Region::ALL
        .iter()
        .map(|&r| {
            let (p, t) = (pred.channel(r), truth.channel(r));
            let (pe, te) = (p.iter().all(|&v| v == 0.0), t.iter().all(|&v| v == 0.0));
            Ok(CaseRow {
                id: item.id.clone(),
                region: r,
                dice: dice(p, t)?,
                hd95: hd95(p, t, dims, spacing)?,
                hd95_penalty: pe != te,
                pred_volume: volume(p, spacing),
                true_volume: volume(t, spacing),
            })
        })
        .collect()
}

fn aggregate(cases: &[CaseRow]) -> Aggregate {
    let mut dice_m = [0.0; 3];
    let mut hd_m = [0.0; 3];
    let mut ba = [None; 3];
    let mut pr = [None; 3];
    for r in Region::ALL {
        let rows: Vec<&CaseRow> = cases.iter().filter(|c| c.region == r).collect();
        let n = rows.len() as f64;
        dice_m[r.index()] = rows.iter().map(|c| c.dice).sum::<f64>() / n;
        hd_m[r.index()] = rows.iter().map(|c| c.hd95).sum::<f64>() / n;
        let pv: Vec<f64> = rows.iter().map(|c| c.pred_volume).collect();
        let tv: Vec<f64> = rows.iter().map(|c| c.true_volume).collect();
        ba[r.index()] = bland_altman(&pv, &tv).ok();
        pr[r.index()] = pearson_r(&tv, &pv).ok();
    }
    Aggregate {
        dice: dice_m,
        dice_ave: dice_m.iter().sum::<f64>() / 3.0,
        hd95: hd_m,
        hd95_ave: hd_m.iter().sum::<f64>() / 3.0,
        bland_altman: ba,
        pearson: pr,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Per-case rows followed by an aggregate block (`case = MEAN`).
pub fn report_csv(report: &EvalReport, comment: &str) -> String {
    let mut s = String::new();
    let drop = report.drop.map_or("none", Modality::name);
    writeln!(s, "# {comment}; drop={drop}; spacing={}; {CONVENTIONS}", report.spacing).unwrap();
    writeln!(s, "case,region,dice,hd95,hd95_empty_penalty,pred_volume,true_volume").unwrap();
    for c in &report.cases {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{},{:.6},{:.6}",
            c.id,
            c.region,
            c.dice,
            c.hd95,
            u8::from(c.hd95_penalty),
            c.pred_volume,
            c.true_volume
        )
        .unwrap();
    }
    let a = &report.aggregate;
    for r in Region::ALL {
        let i = r.index();
        writeln!(s, "MEAN,{r},{:.6},{:.6},,,", a.dice[i], a.hd95[i]).unwrap();
    }
    writeln!(s, "MEAN,Ave,{:.6},{:.6},,,", a.dice_ave, a.hd95_ave).unwrap();
    s
}

/// Volume agreement per region: Bland-Altman bias and limits, Pearson r.
pub fn agreement_csv(report: &EvalReport, comment: &str) -> String {
    let mut s = String::new();
    writeln!(s, "# {comment}").unwrap();
    writeln!(s, "region,bias,lower,upper,pearson_r").unwrap();
    for r in Region::ALL {
        let ba = report.aggregate.bland_altman[r.index()];
        writeln!(
            s,
            "{r},{},{},{},{}",
            opt(ba.map(|b| b.bias)),
            opt(ba.map(|b| b.lower)),
            opt(ba.map(|b| b.upper)),
            opt(report.aggregate.pearson[r.index()])
        )
        .unwrap();
    }
    s
}

/// Plot data: (mean, difference) for agreement plots and (true, predicted) for scatter.
pub fn plot_csv(report: &EvalReport, comment: &str) -> String {
    let mut s = String::new();
    writeln!(s, "# {comment}").unwrap();
    writeln!(s, "case,region,true_volume,pred_volume,mean,difference").unwrap();
    for c in &report.cases {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            c.id,
            c.region,
            c.true_volume,
            c.pred_volume,
            (c.true_volume + c.pred_volume) / 2.0,
            c.pred_volume - c.true_volume
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, region: Region, dice: f64, hd: f64, pv: f64, tv: f64) -> CaseRow {
        CaseRow {
            id: id.into(),
            region,
            dice,
            hd95: hd,
            hd95_penalty: false,
            pred_volume: pv,
            true_volume: tv,
        }
    }

    #[test]
    fn ave_is_mean_of_regions() {
        let mut cases = Vec::new();
        for (k, id) in ["a", "b"].into_iter().enumerate() {
            for r in Region::ALL {
                let i = r.index() as f64;
                cases.push(row(id, r, 50.0 + 10.0 * i + k as f64, i + 1.0, 10.0 + i + k as f64, 9.0 + 2.0 * k as f64));
            }
        }
        let a = aggregate(&cases);
        assert!((a.dice_ave - (a.dice[0] + a.dice[1] + a.dice[2]) / 3.0).abs() < 1e-9);
        assert!((a.hd95_ave - 2.0).abs() < 1e-12);
        assert!(a.bland_altman.iter().all(Option::is_some));
    }

    #[test]
    fn single_case_has_no_agreement_stats() {
        let cases: Vec<CaseRow> = Region::ALL.iter().map(|&r| row("a", r, 90.0, 1.0, 5.0, 6.0)).collect();
        let a = aggregate(&cases);
        assert!(a.bland_altman.iter().all(Option::is_none));
        assert!(a.pearson.iter().all(Option::is_none));
    }
}
