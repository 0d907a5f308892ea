//! Overlap, boundary-distance and agreement statistics.

use crate::error::{Error, Result};

fn check_binary(mask: &[f64], what: &str) -> Result<()> {
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract(format!("{what} must be binary")));
    }
    Ok(())
}

fn check_pair(a: &[f64], b: &[f64], dims: [usize; 3]) -> Result<()> {
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::Dimension {
            op: "metric",
            lhs: vec![a.len(), b.len()],
            rhs: dims.to_vec(),
        });
    }
    check_binary(a, "prediction")?;
    check_binary(b, "ground truth")
}

/// Dice overlap in percent; two empty masks score 100.
pub fn dice(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            op: "dice",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    check_binary(pred, "prediction")?;
    check_binary(truth, "ground truth")?;
    let (mut inter, mut a, mut b) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        inter += p * t;
        a += p;
        b += t;
    }
    if a + b == 0.0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter / (a + b))
}

/// Foreground voxels with a 6-neighbour in the background or outside the volume.
pub fn surface(mask: &[f64], dims: [usize; 3]) -> Vec<bool> {
    let [w, h, d] = dims;
    let at = |i: usize, j: usize, k: usize| mask[(i * h + j) * d + k] != 0.0;
    let mut out = vec![false; mask.len()];
    for i in 0..w {
        for j in 0..h {
            for k in 0..d {
                if !at(i, j, k) {
                    continue;
                }
                let edge = i == 0 || j == 0 || k == 0 || i + 1 == w || j + 1 == h || k + 1 == d;
                out[(i * h + j) * d + k] = edge
                    || !at(i - 1, j, k)
                    || !at(i + 1, j, k)
                    || !at(i, j - 1, k)
                    || !at(i, j + 1, k)
                    || !at(i, j, k - 1)
                    || !at(i, j, k + 1);
            }
        }
    }
    out
}

/// Exact 1-D squared distance transform over the lower envelope of parabolas.
/// `f[q]` is `None` where there is no site.
fn edt_1d(f: &[Option<f64>], out: &mut [Option<f64>]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_some()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = None);
        return;
    }
    let fv = |q: usize| f[q].expect("site");
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    v.push(sites[0]);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for &q in &sites[1..] {
        // z[0] is -inf, so the envelope never empties.
        loop {
            let p = *v.last().expect("non-empty");
            let (qf, pf) = (q as f64, p as f64);
            let s = ((fv(q) + qf * qf) - (fv(p) + pf * pf)) / (2.0 * qf - 2.0 * pf);
            if s <= z[v.len() - 1] {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                *z.last_mut().expect("non-empty") = s;
                z.push(f64::INFINITY);
                break;
            }
        }
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while z[k + 1] < p as f64 {
            k += 1;
        }
        let dq = p as f64 - v[k] as f64;
        *o = Some(dq * dq + fv(v[k]));
    }
}

/// Squared Euclidean distance (in voxels) from every voxel to the nearest site.
pub fn squared_distance_transform(sites: &[bool], dims: [usize; 3]) -> Vec<Option<f64>> {
    let [w, h, d] = dims;
    let mut f: Vec<Option<f64>> = sites.iter().map(|&s| s.then_some(0.0)).collect();
    let idx = |i: usize, j: usize, k: usize| (i * h + j) * d + k;
    let mut line_in = Vec::new();
    let mut line_out = Vec::new();
    let mut pass = |f: &mut Vec<Option<f64>>, len: usize, lines: Vec<Vec<usize>>| {
        for line in lines {
            line_in.clear();
            line_in.extend(line.iter().map(|&i| f[i]));
            line_out.clear();
            line_out.resize(len, None);
            edt_1d(&line_in, &mut line_out);
            for (&i, v) in line.iter().zip(&line_out) {
                f[i] = *v;
            }
        }
    };
    let along_z = (0..w)
        .flat_map(|i| (0..h).map(move |j| (0..d).map(|k| idx(i, j, k)).collect()))
        .collect();
    pass(&mut f, d, along_z);
    let along_y = (0..w)
        .flat_map(|i| (0..d).map(move |k| (0..h).map(|j| idx(i, j, k)).collect()))
        .collect();
    pass(&mut f, h, along_y);
    let along_x = (0..h)
        .flat_map(|j| (0..d).map(move |k| (0..w).map(|i| idx(i, j, k)).collect()))
        .collect();
    pass(&mut f, w, along_x);
    f
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Distances (voxel units) from each surface voxel of `from` to the surface of `to`.
pub fn directed_surface_distances(from: &[f64], to: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let target = surface(to, dims);
    let dt = squared_distance_transform(&target, dims);
    surface(from, dims)
        .iter()
        .zip(&dt)
        .filter(|(s, _)| **s)
        .map(|(_, d)| d.expect("target surface is non-empty").sqrt())
        .collect()
}

/// Length of the volume diagonal in millimetres.
pub fn diagonal(dims: [usize; 3], spacing: f64) -> f64 {
    dims.iter().map(|&d| (d * d) as f64).sum::<f64>().sqrt() * spacing
}

/// Symmetric 95th-percentile surface distance in millimetres.
///
/// Both masks empty gives 0; exactly one empty gives the volume diagonal.
pub fn hd95(pred: &[f64], truth: &[f64], dims: [usize; 3], spacing: f64) -> Result<f64> {
    check_pair(pred, truth, dims)?;
    let (ep, et) = (pred.iter().all(|&v| v == 0.0), truth.iter().all(|&v| v == 0.0));
    match (ep, et) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(diagonal(dims, spacing)),
        _ => {}
    }
    let a = percentile(&directed_surface_distances(pred, truth, dims), 95.0);
    let b = percentile(&directed_surface_distances(truth, pred, dims), 95.0);
    Ok(a.max(b) * spacing)
}

/// Foreground volume in mm³.
pub fn volume(mask: &[f64], spacing: f64) -> f64 {
    mask.iter().filter(|&&v| v != 0.0).count() as f64 * spacing.powi(3)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlandAltman {
    pub bias: f64,
    pub lower: f64,
    pub upper: f64,
    /// Sample standard deviation of the differences.
    pub sd: f64,
}

/// Mean difference and `bias ± 1.96·sd` limits of agreement.
pub fn bland_altman(pred: &[f64], truth: &[f64]) -> Result<BlandAltman> {
    if pred.len() != truth.len() {
        return Err(Error::Parameter(format!(
            "bland-altman needs paired lists, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Parameter("bland-altman needs at least 2 pairs".into()));
    }
    let n = pred.len() as f64;
    let diffs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let bias = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - bias) * (d - bias)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(BlandAltman {
        bias,
        lower: bias - 1.96 * sd,
        upper: bias + 1.96 * sd,
        sd,
    })
}

pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Parameter(format!(
            "pearson_r needs two equal lists of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: [usize; 3] = [8, 8, 8];

    fn single(p: [usize; 3]) -> Vec<f64> {
        let mut m = vec![0.0; 512];
        m[(p[0] * 8 + p[1]) * 8 + p[2]] = 1.0;
        m
    }

    #[test]
    fn dice_examples() {
        let a = single([1, 1, 1]);
        assert_eq!(dice(&a, &a).unwrap(), 100.0);
        assert_eq!(dice(&a, &single([5, 5, 5])).unwrap(), 0.0);
        let mut x = vec![0.0; 4];
        let mut y = vec![0.0; 4];
        x[0] = 1.0;
        x[1] = 1.0;
        y[1] = 1.0;
        y[2] = 1.0;
        assert_eq!(dice(&x, &y).unwrap(), 50.0);
        assert_eq!(dice(&[0.0; 4], &[0.0; 4]).unwrap(), 100.0);
        assert!(matches!(dice(&[0.5], &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn hd95_examples() {
        let a = single([2, 2, 2]);
        assert_eq!(hd95(&a, &a, DIMS, 1.0).unwrap(), 0.0);
        assert_eq!(hd95(&a, &single([2, 2, 5]), DIMS, 1.0).unwrap(), 3.0);
        assert_eq!(hd95(&a, &single([2, 2, 5]), DIMS, 0.5).unwrap(), 1.5);
        assert_eq!(hd95(&[0.0; 512], &[0.0; 512], DIMS, 1.0).unwrap(), 0.0);
        let diag = (3.0f64 * 64.0).sqrt();
        assert_eq!(hd95(&a, &[0.0; 512], DIMS, 1.0).unwrap(), diag);
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert!((percentile(&v, 95.0) - 9.5).abs() < 1e-12);
        assert_eq!(percentile(&[4.0], 95.0), 4.0);
    }

    #[test]
    fn distance_transform_simple() {
        let mut sites = vec![false; 512];
        sites[0] = true;
        let dt = squared_distance_transform(&sites, DIMS);
        assert_eq!(dt[(3 * 8 + 4) * 8 + 5], Some(9.0 + 16.0 + 25.0));
        assert!(squared_distance_transform(&[false; 512], DIMS).iter().all(Option::is_none));
    }

    #[test]
    fn bland_altman_examples() {
        let ba = bland_altman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((ba.bias, ba.lower, ba.upper), (0.0, 0.0, 0.0));
        let ba = bland_altman(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(ba.bias, 0.0);
        assert!((ba.upper - 1.96 * 2f64.sqrt()).abs() < 1e-12);
        assert!((ba.lower + 1.96 * 2f64.sqrt()).abs() < 1e-12);
        assert!(bland_altman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson_r(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson_r(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            pearson_r(&a, &[1.0; 4]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }
}
