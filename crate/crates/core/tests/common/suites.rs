//! Gradient-check suites used by both the gradient tests and the acceptance run.

use tucl::losses::{seg_loss, total_loss, LossWeights};
use tucl::dur::{dur_loss, partition, DeltaMode};
use tucl::model::{ModelConfig, TuclModel};
use tucl::phantom::{generate, PhantomSpec};
use tucl::rng::RngStream;
use tucl::tensor::{Graph, Tensor, Var};
use tucl::tpa::{cross_attn, cycle_loss, intra_attn, tpa_forward, AttentionBlock, Phi, PromptSet, TpaBlocks};
use tucl::Result;

use super::{gradcheck, gradcheck_subset, weighted_sum};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut RngStream::new(seed))
}

/// Uniform values with magnitude in `[0.2, 1]`, away from kinks at zero.
fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.2, 1.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, &mut RngStream::new(seed))
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// Worst relative error per differentiable op.
pub fn op_gradients() -> Vec<(&'static str, f64)> {
    let s = [3, 4];
    let cases: Vec<Case> = vec![
        ("add", vec![randn(&s, 1), randn(&s, 2)], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 9)
        })),
        ("sub", vec![randn(&s, 1), randn(&s, 2)], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, 9)
        })),
        ("mul", vec![randn(&s, 1), randn(&s, 2)], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 9)
        })),
        ("div", vec![randn(&s, 1), positive(&s, 2)], Box::new(|g, v| {
            let y = g.div(v[0], v[1])?;
            weighted_sum(g, y, 9)
        })),
        ("scale", vec![randn(&s, 1)], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7)?;
            weighted_sum(g, y, 9)
        })),
        ("add_scalar", vec![randn(&s, 1)], Box::new(|g, v| {
            let y = g.add_scalar(v[0], 0.3)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, 9)
        })),
        ("relu", vec![off_zero(&s, 3)], Box::new(|g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, 9)
        })),
        ("sigmoid", vec![randn(&s, 1)], Box::new(|g, v| {
            let y = g.sigmoid(v[0])?;
            weighted_sum(g, y, 9)
        })),
        ("exp", vec![randn(&s, 1)], Box::new(|g, v| {
            let y = g.exp(v[0])?;
            weighted_sum(g, y, 9)
        })),
        ("ln", vec![positive(&s, 1)], Box::new(|g, v| {
            let y = g.ln(v[0])?;
            weighted_sum(g, y, 9)
        })),
        ("clamp", vec![off_zero(&s, 4)], Box::new(|g, v| {
            // Inputs have |x| >= 0.2, so the bounds at ±0.1 are never hit exactly.
            let y = g.clamp(v[0], -0.1, 0.1)?;
            let z = g.add(y, v[0])?;
            weighted_sum(g, z, 9)
        })),
        ("sum", vec![randn(&s, 1)], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        })),
        ("mean", vec![randn(&s, 1)], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        })),
        ("sum_axis", vec![randn(&[2, 3, 4], 1)], Box::new(|g, v| {
            let y = g.sum_axis(v[0], 1)?;
            weighted_sum(g, y, 9)
        })),
        ("mean_axis", vec![randn(&[2, 3, 4], 1)], Box::new(|g, v| {
            let y = g.mean_axis(v[0], 2)?;
            weighted_sum(g, y, 9)
        })),
        ("reshape", vec![randn(&s, 1)], Box::new(|g, v| {
            let y = g.reshape(v[0], &[2, 6])?;
            weighted_sum(g, y, 9)
        })),
        ("transpose", vec![randn(&s, 1)], Box::new(|g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y, 9)
        })),
        ("concat", vec![randn(&[2, 4], 1), randn(&[3, 4], 2)], Box::new(|g, v| {
            let y = g.concat(&[v[0], v[1]], 0)?;
            weighted_sum(g, y, 9)
        })),
        ("slice", vec![randn(&[3, 5], 1)], Box::new(|g, v| {
            let y = g.slice(v[0], 1, 1, 4)?;
            weighted_sum(g, y, 9)
        })),
        ("matmul", vec![randn(&[3, 4], 1), randn(&[4, 2], 2)], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 9)
        })),
        ("softmax", vec![randn(&[3, 5], 1)], Box::new(|g, v| {
            let y = g.softmax(v[0], 1)?;
            weighted_sum(g, y, 9)
        })),
        ("layer_norm", vec![randn(&[3, 6], 1), randn(&[6], 2), randn(&[6], 3)], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, 9)
        })),
        ("add_bias_rows", vec![randn(&[3, 8], 1), randn(&[3], 2)], Box::new(|g, v| {
            let y = g.add_bias(v[0], v[1], 0)?;
            weighted_sum(g, y, 9)
        })),
        ("add_bias_cols", vec![randn(&[3, 8], 1), randn(&[8], 2)], Box::new(|g, v| {
            let y = g.add_bias(v[0], v[1], 1)?;
            weighted_sum(g, y, 9)
        })),
        ("conv3d_stride1", vec![randn(&[2, 5, 4, 6], 1), randn(&[3, 2, 3, 3, 3], 2)], Box::new(|g, v| {
            let y = g.conv3d(v[0], v[1], 1, 1)?;
            weighted_sum(g, y, 9)
        })),
        ("conv3d_stride2", vec![randn(&[2, 6, 5, 4], 1), randn(&[3, 2, 3, 3, 3], 2)], Box::new(|g, v| {
            let y = g.conv3d(v[0], v[1], 2, 1)?;
            weighted_sum(g, y, 9)
        })),
        ("upsample", vec![randn(&[2, 2, 3, 2], 1)], Box::new(|g, v| {
            let y = g.upsample(v[0], 2)?;
            weighted_sum(g, y, 9)
        })),
        ("dropout", vec![randn(&s, 1)], Box::new(|g, v| {
            // Same stream on every evaluation, so the mask is fixed.
            let y = g.dropout(v[0], 0.3, &mut RngStream::new(5), true)?;
            weighted_sum(g, y, 9)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| (name, gradcheck(&inputs, f)))
        .collect()
}

fn block_inputs(b: &AttentionBlock) -> Vec<Tensor> {
    b.tensors().iter().map(|(_, t)| (*t).clone()).collect()
}

fn bind_block(v: &[Var], heads: usize, width: usize) -> tucl::tpa::BoundAttention {
    tucl::tpa::BoundAttention {
        wq: v[0],
        wk: v[1],
        wv: v[2],
        wo: v[3],
        gamma: v[4],
        beta: v[5],
        heads,
        width,
    }
}

/// Attention blocks and the cycle loss, checked on all inputs and weights.
pub fn attention_gradients() -> Vec<(&'static str, f64)> {
    let d = 16;
    let block = AttentionBlock::new(d, 2, &mut RngStream::new(11)).unwrap();
    let mut out = Vec::new();

    let mut inputs = vec![randn(&[7, d], 12)];
    inputs.extend(block_inputs(&block));
    out.push((
        "intra_attn",
        gradcheck(&inputs, |g, v| {
            let b = bind_block(&v[1..], 2, d);
            let y = intra_attn(g, v[0], &b)?.output;
            weighted_sum(g, y, 13)
        }),
    ));

    let mut inputs = vec![randn(&[5, d], 14), randn(&[7, d], 15)];
    inputs.extend(block_inputs(&block));
    out.push((
        "cross_attn",
        gradcheck(&inputs, |g, v| {
            let b = bind_block(&v[2..], 2, d);
            let y = cross_attn(g, v[0], v[1], &b)?.output;
            weighted_sum(g, y, 16)
        }),
    ));

    let (dp, n) = (8, 8);
    let phi = Phi::new(d, dp, &mut RngStream::new(17));
    let probs = Tensor::uniform(&[3, n, n, n], 0.05, 0.95, &mut RngStream::new(18));
    let inputs = vec![randn(&[7, dp], 19), randn(&[7, d], 20), probs, phi.weight.clone(), randn(&[dp], 21)];
    out.push((
        "cycle_loss",
        gradcheck(&inputs, |g, v| {
            let p = tucl::model::ProbMap::from_var(g, v[2])?;
            let bound = tucl::tpa::BoundPhi {
                weight: v[3],
                bias: v[4],
            };
            cycle_loss(g, v[0], v[1], &p, &bound)
        }),
    ));

    let tpa = TpaBlocks::new(dp, d, 2, &mut RngStream::new(22)).unwrap();
    let prompts = PromptSet::new(dp, &mut RngStream::new(23));
    let mut inputs = vec![randn(&[6, d], 24), prompts.embeddings.clone()];
    inputs.extend(tpa.tensors().into_iter().map(|(_, t)| t.clone()));
    out.push((
        "tpa_forward",
        gradcheck(&inputs, |g, v| {
            let bound = tucl::tpa::BoundTpa {
                prompt_proj: v[2],
                seg_intra: bind_block(&v[3..9], 2, d),
                prompt_intra: bind_block(&v[9..15], 2, d),
                cross: bind_block(&v[15..21], 2, d),
            };
            let o = tpa_forward(g, v[0], v[1], &bound)?;
            let a = weighted_sum(g, o.fused, 25)?;
            let b = weighted_sum(g, o.prompt_features, 26)?;
            g.add(a, b)
        }),
    ));
    out
}

/// Small configuration used for end-to-end checks.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        token_width: 16,
        prompt_width: 8,
        ..ModelConfig::default()
    }
}

/// Full objective on a 12³ phantom, dropout active with a fixed stream;
/// perturbs a seeded 1% sample of all parameters.
pub fn model_gradient(seed: u64) -> f64 {
    let spec = PhantomSpec {
        dims: [12, 12, 12],
        center: [5.5; 3],
        radii: [4.0, 2.5, 1.5],
        seed,
        ..PhantomSpec::default()
    };
    let (x, y) = generate(&spec).unwrap();
    let model = TuclModel::new(small_model_config(), seed).unwrap();
    let tensors: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    let mut rng = RngStream::new(seed).derive("sample");
    let subset: Vec<Vec<usize>> = tensors
        .iter()
        .map(|t| {
            let k = (t.numel() as f64 * 0.01).ceil() as usize;
            let mut idx: Vec<usize> = (0..t.numel()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(k);
            idx
        })
        .collect();
    let u = Tensor::uniform(&[12 * 12 * 12], 0.0, 0.1, &mut RngStream::new(seed + 1));
    let part = partition(u.data(), DeltaMode::default()).unwrap();
    let w = LossWeights::default();
    gradcheck_subset(&tensors, &subset, |g, vars| {
        let bound = model.bind_vars(vars)?;
        let out = model.forward_bound(g, bound.clone(), &x, true, &mut RngStream::new(seed + 2))?;
        let seg = seg_loss(g, &out.probs, &y)?;
        let tpa = cycle_loss(g, bound.prompts, out.prompt_features.expect("tpa on"), &out.probs, &bound.phi)?;
        let dur = dur_loss(g, &out.probs, &y, &part, w.alpha, w.beta)?;
        total_loss(g, seg, tpa, dur, &w)
    })
}
