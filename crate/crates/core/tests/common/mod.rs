//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod suites;

use std::collections::HashSet;

use tucl::rng::RngStream;
use tucl::tensor::{Graph, Tensor, Var};
use tucl::Result;

pub const FD_STEP: f64 = 1e-5;

/// `Σ x ⊙ R` with a fixed random `R`, so every output element matters.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let r = Tensor::uniform(g.shape(x), -1.0, 1.0, &mut RngStream::new(seed));
    let c = g.constant(r);
    let m = g.mul(x, c)?;
    g.sum(m)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&d) / scale
    }
}

fn eval<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars).expect("forward");
    g.item(out).expect("scalar")
}

/// Analytic gradient of every input element against central differences.
/// Returns the worst norm-wise relative error over the inputs.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    gradcheck_subset(inputs, &all, f)
}

/// Like [`gradcheck`] but only perturbs the listed elements of each input.
pub fn gradcheck_subset<F>(inputs: &[Tensor], subset: &[Vec<usize>], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars).expect("forward");
    g.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, idx) in subset.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let full = g.grad(vars[i]).map_or_else(|| vec![0.0; inputs[i].numel()], <[f64]>::to_vec);
        let analytic: Vec<f64> = idx.iter().map(|&j| full[j]).collect();
        let numeric: Vec<f64> = idx
            .iter()
            .map(|&j| {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += FD_STEP;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= FD_STEP;
                (eval(&plus, &f) - eval(&minus, &f)) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Random binary mask with the given foreground probability.
pub fn random_mask(n: usize, p: f64, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| f64::from(u8::from(rng.uniform() < p))).collect()
}

/// Random axis-aligned box (possibly empty) with a few flipped voxels.
pub fn random_blob(dims: [usize; 3], rng: &mut RngStream) -> Vec<f64> {
    let mut m = vec![0.0; dims.iter().product()];
    if rng.uniform() < 0.05 {
        return m;
    }
    let lo: Vec<usize> = dims.iter().map(|&d| rng.below(d)).collect();
    let hi: Vec<usize> = dims.iter().zip(&lo).map(|(&d, &l)| l + 1 + rng.below(d - l)).collect();
    for i in lo[0]..hi[0] {
        for j in lo[1]..hi[1] {
            for k in lo[2]..hi[2] {
                m[(i * dims[1] + j) * dims[2] + k] = 1.0;
            }
        }
    }
    for _ in 0..rng.below(6) {
        let v = rng.below(m.len());
        m[v] = 1.0 - m[v];
    }
    m
}

/// Dice percentage from index sets.
pub fn dice_oracle(a: &[f64], b: &[f64]) -> f64 {
    let sa: HashSet<usize> = (0..a.len()).filter(|&i| a[i] == 1.0).collect();
    let sb: HashSet<usize> = (0..b.len()).filter(|&i| b[i] == 1.0).collect();
    if sa.is_empty() && sb.is_empty() {
        return 100.0;
    }
    100.0 * 2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

fn coords(v: usize, dims: [usize; 3]) -> [i64; 3] {
    let k = v % dims[2];
    let j = (v / dims[2]) % dims[1];
    let i = v / (dims[1] * dims[2]);
    [i as i64, j as i64, k as i64]
}

fn surface_points(m: &[f64], dims: [usize; 3]) -> Vec<[i64; 3]> {
    let inside = |p: [i64; 3]| {
        (0..3).all(|a| p[a] >= 0 && p[a] < dims[a] as i64)
            && m[((p[0] as usize) * dims[1] + p[1] as usize) * dims[2] + p[2] as usize] == 1.0
    };
    let steps = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
    (0..m.len())
        .filter(|&v| m[v] == 1.0)
        .map(|v| coords(v, dims))
        .filter(|p| steps.iter().any(|s| !inside([p[0] + s[0], p[1] + s[1], p[2] + s[2]])))
        .collect()
}

fn linear_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= v.len() {
        return v[lo];
    }
    v[lo] + (h - lo as f64) * (v[lo + 1] - v[lo])
}

/// All-pairs surface distances, symmetric max of directed 95th percentiles.
pub fn hd95_oracle(a: &[f64], b: &[f64], dims: [usize; 3], spacing: f64) -> f64 {
    let (pa, pb) = (surface_points(a, dims), surface_points(b, dims));
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => {
            return spacing * ((dims[0].pow(2) + dims[1].pow(2) + dims[2].pow(2)) as f64).sqrt()
        }
        _ => {}
    }
    let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let d2: i64 = (0..3).map(|a| (p[a] - q[a]).pow(2)).sum();
                        (d2 as f64).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let ab = linear_percentile(directed(&pa, &pb), 0.95);
    let ba = linear_percentile(directed(&pb, &pa), 0.95);
    spacing * ab.max(ba)
}

/// Mean, then mean squared deviation (divisor `T`), per element.
pub fn two_pass_variance(samples: &[Vec<f64>]) -> Vec<f64> {
    let t = samples.len() as f64;
    let n = samples[0].len();
    (0..n)
        .map(|i| {
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() / t;
            samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / t
        })
        .collect()
}

pub fn bland_altman_oracle(p: &[f64], t: &[f64]) -> (f64, f64, f64) {
    let n = p.len() as f64;
    let d: Vec<f64> = p.iter().zip(t).map(|(a, b)| a - b).collect();
    let bias = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - bias).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    (bias, bias - 1.96 * sd, bias + 1.96 * sd)
}

pub fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Region-restricted soft-Dice loss on `[3 × n]` arrays; `None` for an empty region.
pub fn soft_dice_oracle(p: &[f64], y: &[f64], region: Option<&[bool]>) -> Option<f64> {
    let n = p.len() / 3;
    let keep = |v: usize| region.map_or(true, |r| r[v]);
    if (0..n).all(|v| !keep(v)) {
        return None;
    }
    let mut total = 0.0;
    for c in 0..3 {
        let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
        for v in (0..n).filter(|&v| keep(v)) {
            inter += p[c * n + v] * y[c * n + v];
            ps += p[c * n + v];
            ys += y[c * n + v];
        }
        total += (2.0 * inter + 1e-5) / (ps + ys + 1e-5);
    }
    Some(1.0 - total / 3.0)
}

pub fn bce_oracle(p: &[f64], y: &[f64]) -> f64 {
    let eps = 1e-7;
    let s: f64 = p
        .iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let q = pi.clamp(eps, 1.0 - eps);
            yi * q.ln() + (1.0 - yi) * (1.0 - q).ln()
        })
        .sum();
    -s / p.len() as f64
}

pub fn seg_loss_oracle(p: &[f64], y: &[f64]) -> f64 {
    0.5 * (soft_dice_oracle(p, y, None).unwrap() + bce_oracle(p, y))
}

pub fn dur_loss_oracle(p: &[f64], y: &[f64], core: &[bool], alpha: f64, beta: f64) -> f64 {
    let boundary: Vec<bool> = core.iter().map(|c| !c).collect();
    alpha * soft_dice_oracle(p, y, Some(core)).unwrap_or(0.0)
        + beta * soft_dice_oracle(p, y, Some(&boundary)).unwrap_or(0.0)
}

/// Mean over entries of `(X − ([F | s] W + b))²`, with `s` the pooled statistic per prompt row.
pub fn cycle_loss_oracle(
    prompts: &[f64],
    features: &[f64],
    probs: &[f64],
    weight: &[f64],
    bias: &[f64],
    d: usize,
    dp: usize,
) -> f64 {
    let n = probs.len() / 3;
    let region_mean: Vec<f64> = (0..3).map(|c| probs[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let overall = region_mean.iter().sum::<f64>() / 3.0;
    let mut sq = 0.0;
    for row in 0..7 {
        let stat = if row < 4 { overall } else { region_mean[row - 4] };
        for col in 0..dp {
            let mut z = bias[col];
            for k in 0..d {
                z += features[row * d + k] * weight[k * dp + col];
            }
            z += stat * weight[d * dp + col];
            sq += (prompts[row * dp + col] - z).powi(2);
        }
    }
    sq / (7 * dp) as f64
}
