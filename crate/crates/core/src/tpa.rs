//! Task-oriented prompt attention.
//!
//! Segmentation tokens and the seven prompt embeddings are each refined by
//! their own multi-head self-attention block, then fused by cross-attention
//! with queries from the segmentation stream. The prompt stream's refined
//! features also feed the cycle-consistency loss, which remaps them together
//! with pooled prediction statistics back to prompt space.

use crate::error::{Error, Result};
use crate::model::ProbMap;
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};

pub const PROMPT_NAMES: [&str; 7] = ["T1", "T2", "T1ce", "FLAIR", "WT", "TC", "ET"];
pub const LN_EPS: f64 = 1e-5;

/// Learned contrast and region prompts, one row each in [`PROMPT_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub embeddings: Tensor,
}

impl PromptSet {
    pub fn new(width: usize, rng: &mut RngStream) -> Self {
        Self {
            embeddings: Tensor::randn(&[PROMPT_NAMES.len(), width], 0.02, rng),
        }
    }

    pub fn from_embeddings(embeddings: Tensor) -> Result<Self> {
        let s = embeddings.shape();
        if s.len() != 2 || s[0] != PROMPT_NAMES.len() {
            return Err(Error::Shape(format!("prompt set must be [7, d_p], got {s:?}")));
        }
        if !embeddings.is_finite() {
            return Err(Error::Numeric("prompt embeddings".into()));
        }
        Ok(Self { embeddings })
    }

    pub fn width(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub heads: usize,
}

/// Graph handles for one [`AttentionBlock`].
#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub gamma: Var,
    pub beta: Var,
    pub heads: usize,
    pub width: usize,
}

impl AttentionBlock {
    pub fn new(width: usize, heads: usize, rng: &mut RngStream) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Parameter(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        let std = (1.0 / width as f64).sqrt();
        let mut w = || Tensor::randn(&[width, width], std, rng);
        Ok(Self {
            wq: w(),
            wk: w(),
            wv: w(),
            wo: w(),
            ln_gamma: Tensor::ones(&[width]),
            ln_beta: Tensor::zeros(&[width]),
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln_gamma", &self.ln_gamma),
            ("ln_beta", &self.ln_beta),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln_gamma", &mut self.ln_gamma),
            ("ln_beta", &mut self.ln_beta),
        ]
    }

    /// Inserts the weights as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundAttention {
        BoundAttention {
            wq: g.param(self.wq.clone()),
            wk: g.param(self.wk.clone()),
            wv: g.param(self.wv.clone()),
            wo: g.param(self.wo.clone()),
            gamma: g.param(self.ln_gamma.clone()),
            beta: g.param(self.ln_beta.clone()),
            heads: self.heads,
            width: self.width(),
        }
    }
}

impl BoundAttention {
    pub fn vars(&self) -> [Var; 6] {
        [self.wq, self.wk, self.wv, self.wo, self.gamma, self.beta]
    }
}

/// Result of one attention block.
#[derive(Debug, Clone)]
pub struct Attended {
    /// `LN(queries + mixed · Wo)`.
    pub output: Var,
    /// Attention-weighted values with heads concatenated, before `Wo`.
    pub mixed: Var,
    /// One row-stochastic `[n_q × n_kv]` weight matrix per head.
    pub weights: Vec<Var>,
}

fn check_width(g: &Graph, tokens: Var, block: &BoundAttention) -> Result<()> {
    let s = g.shape(tokens);
    if s.len() != 2 || s[1] != block.width {
        return Err(Error::Dimension {
            op: "attention",
            lhs: s.to_vec(),
            rhs: vec![block.width, block.width],
        });
    }
    Ok(())
}

/// Multi-head scaled dot-product attention with residual and layer norm.
pub fn attention(g: &mut Graph, queries: Var, context: Var, block: &BoundAttention) -> Result<Attended> {
    check_width(g, queries, block)?;
    check_width(g, context, block)?;
    let q = g.matmul(queries, block.wq)?;
    let k = g.matmul(context, block.wk)?;
    let v = g.matmul(context, block.wv)?;
    let head = block.width / block.heads;
    let scale = 1.0 / (head as f64).sqrt();
    let mut outs = Vec::with_capacity(block.heads);
    let mut weights = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let (lo, hi) = (h * head, (h + 1) * head);
        let qh = g.slice(q, 1, lo, hi)?;
        let kh = g.slice(k, 1, lo, hi)?;
        let vh = g.slice(v, 1, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let w = g.softmax(scores, 1)?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let mixed = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let projected = g.matmul(mixed, block.wo)?;
    let residual = g.add(queries, projected)?;
    let output = g.layer_norm(residual, block.gamma, block.beta, LN_EPS)?;
    Ok(Attended {
        output,
        mixed,
        weights,
    })
}

/// Self-attention within one token stream.
pub fn intra_attn(g: &mut Graph, tokens: Var, block: &BoundAttention) -> Result<Attended> {
    attention(g, tokens, tokens, block)
}

/// Segmentation tokens attend to prompt tokens.
pub fn cross_attn(g: &mut Graph, seg: Var, prompts: Var, block: &BoundAttention) -> Result<Attended> {
    attention(g, seg, prompts, block)
}

/// Projection and attention blocks of the prompt-attention module.
#[derive(Debug, Clone, PartialEq)]
pub struct TpaBlocks {
    /// `[d_p × d]` lift of prompt embeddings to token width.
    pub prompt_proj: Tensor,
    pub seg_intra: AttentionBlock,
    pub prompt_intra: AttentionBlock,
    pub cross: AttentionBlock,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundTpa {
    pub prompt_proj: Var,
    pub seg_intra: BoundAttention,
    pub prompt_intra: BoundAttention,
    pub cross: BoundAttention,
}

impl TpaBlocks {
    pub fn new(prompt_width: usize, width: usize, heads: usize, rng: &mut RngStream) -> Result<Self> {
        let std = (1.0 / prompt_width as f64).sqrt();
        Ok(Self {
            prompt_proj: Tensor::randn(&[prompt_width, width], std, rng),
            seg_intra: AttentionBlock::new(width, heads, rng)?,
            prompt_intra: AttentionBlock::new(width, heads, rng)?,
            cross: AttentionBlock::new(width, heads, rng)?,
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("prompt_proj".to_string(), &self.prompt_proj)];
        for (name, b) in [
            ("seg_intra", &self.seg_intra),
            ("prompt_intra", &self.prompt_intra),
            ("cross", &self.cross),
        ] {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("{name}.{n}"), t)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("prompt_proj".to_string(), &mut self.prompt_proj)];
        for (name, b) in [
            ("seg_intra", &mut self.seg_intra),
            ("prompt_intra", &mut self.prompt_intra),
            ("cross", &mut self.cross),
        ] {
            out.extend(b.tensors_mut().into_iter().map(|(n, t)| (format!("{name}.{n}"), t)));
        }
        out
    }

    pub fn bind(&self, g: &mut Graph) -> BoundTpa {
        BoundTpa {
            prompt_proj: g.param(self.prompt_proj.clone()),
            seg_intra: self.seg_intra.bind(g),
            prompt_intra: self.prompt_intra.bind(g),
            cross: self.cross.bind(g),
        }
    }
}

impl BoundTpa {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.prompt_proj];
        for b in [&self.seg_intra, &self.prompt_intra, &self.cross] {
            v.extend(b.vars());
        }
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TpaOutput {
    /// Fused segmentation features `[m × d]`.
    pub fused: Var,
    /// Refined prompt features `[7 × d]`, reused by the cycle loss.
    pub prompt_features: Var,
}

/// `CrossAttn(IntraAttn(f_seg), IntraAttn(prompts · P))`.
pub fn tpa_forward(g: &mut Graph, f_seg: Var, prompts: Var, blocks: &BoundTpa) -> Result<TpaOutput> {
    let prompt_tokens = g.matmul(prompts, blocks.prompt_proj)?;
    let seg = intra_attn(g, f_seg, &blocks.seg_intra)?.output;
    let prompt_features = intra_attn(g, prompt_tokens, &blocks.prompt_intra)?.output;
    let fused = cross_attn(g, seg, prompt_features, &blocks.cross)?.output;
    Ok(TpaOutput {
        fused,
        prompt_features,
    })
}

/// Linear remap from `[prompt features | pooled prediction]` to prompt space.
#[derive(Debug, Clone, PartialEq)]
pub struct Phi {
    /// `[(d + 1) × d_p]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundPhi {
    pub weight: Var,
    pub bias: Var,
}

impl Phi {
    pub fn new(width: usize, prompt_width: usize, rng: &mut RngStream) -> Self {
        let std = (1.0 / (width + 1) as f64).sqrt();
        Self {
            weight: Tensor::randn(&[width + 1, prompt_width], std, rng),
            bias: Tensor::zeros(&[prompt_width]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundPhi {
        BoundPhi {
            weight: g.param(self.weight.clone()),
            bias: g.param(self.bias.clone()),
        }
    }
}

/// Per-prompt pooled prediction statistic `[7 × 1]`: region rows carry the
/// mean probability of their own region, contrast rows the 3-region mean.
pub fn pooled_statistics(g: &mut Graph, y_hat: &ProbMap) -> Result<Var> {
    let s = g.shape(y_hat.var()).to_vec();
    let flat = g.reshape(y_hat.var(), &[3, s[1] * s[2] * s[3]])?;
    let per_region = g.mean_axis(flat, 1)?;
    let overall = g.mean(per_region)?;
    let overall = g.reshape(overall, &[1, 1])?;
    let per_region = g.reshape(per_region, &[3, 1])?;
    g.concat(&[overall, overall, overall, overall, per_region], 0)
}

/// `Φ(F(X_prompt), ŷ)`.
pub fn phi_remap(g: &mut Graph, prompt_features: Var, y_hat: &ProbMap, phi: &BoundPhi) -> Result<Var> {
    let stats = pooled_statistics(g, y_hat)?;
    let z = g.concat(&[prompt_features, stats], 1)?;
    let out = g.matmul(z, phi.weight)?;
    g.add_bias(out, phi.bias, 1)
}

/// Mean squared difference between prompt embeddings and their remap.
pub fn prompt_mse(g: &mut Graph, prompts: Var, remapped: Var) -> Result<Var> {
    let diff = g.sub(prompts, remapped)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

/// Cycle-consistency loss `‖X_prompt − Φ(F(X_prompt), ŷ)‖²`, averaged over entries.
pub fn cycle_loss(
    g: &mut Graph,
    prompts: Var,
    prompt_features: Var,
    y_hat: &ProbMap,
    phi: &BoundPhi,
) -> Result<Var> {
    let remapped = phi_remap(g, prompt_features, y_hat, phi)?;
    prompt_mse(g, prompts, remapped)
}
