//! Two-stage 3-D encoder/decoder with prompt attention at the bottleneck.
//!
//! ```text
//! x[4×W×H×D] ─conv s2─▶ 8 ─conv s2─▶ 16 ─tokens─▶ d ─TPA─▶ d ─▶ 16 ─up,conv─▶ 8 ─up,conv─▶ 3 ─σ─▶ ŷ
//! ```
//! Dropout follows each encoder stage and the first decoder stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};
use crate::tpa::{tpa_forward, BoundAttention, BoundPhi, BoundTpa, Phi, PromptSet, TpaBlocks};
use crate::volume::{
    decode_f64, encode_f64, with_suffix, write_atomic, MultiContrastVolume, RegionMask,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_channels: [usize; 2],
    pub token_width: usize,
    pub heads: usize,
    pub prompt_width: usize,
    pub dropout: f64,
    /// When false the bottleneck tokens bypass the attention module.
    pub use_tpa: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_channels: [8, 16],
            token_width: 64,
            heads: 2,
            prompt_width: 32,
            dropout: 0.1,
            use_tpa: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.enc_channels.contains(&0) || self.token_width == 0 || self.prompt_width == 0 {
            return Err(Error::Parameter("model widths must be positive".into()));
        }
        if self.heads == 0 || self.token_width % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "token width {} not divisible by {} heads",
                self.token_width, self.heads
            )));
        }
        Ok(())
    }
}

/// Sigmoid region probabilities `[3×W×H×D]` held in a graph.
///
/// Only constructible from model outputs or from a probabilistic mask, so the
/// losses that need gradients never see a thresholded prediction.
#[derive(Debug, Clone, Copy)]
pub struct ProbMap(Var);

impl ProbMap {
    pub fn var(&self) -> Var {
        self.0
    }

    pub fn from_mask(g: &mut Graph, mask: &RegionMask, requires_grad: bool) -> Result<Self> {
        if mask.is_binarized() {
            return Err(Error::Contract(
                "prediction must be probabilistic, got a binarized mask".into(),
            ));
        }
        let t = mask.values().clone();
        Ok(Self(if requires_grad { g.param(t) } else { g.constant(t) }))
    }

    /// Wraps a graph value of shape `[3×W×H×D]` with entries in `[0, 1]`.
    pub fn from_var(g: &Graph, v: Var) -> Result<Self> {
        let s = g.shape(v);
        if s.len() != 4 || s[0] != 3 {
            return Err(Error::Dimension {
                op: "ProbMap::from_var",
                lhs: s.to_vec(),
                rhs: vec![3, 0, 0, 0],
            });
        }
        if g.data(v).iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Contract("probabilities must lie in [0, 1]".into()));
        }
        Ok(Self(v))
    }

    pub fn to_mask(&self, g: &Graph) -> Result<RegionMask> {
        RegionMask::new(g.value(self.0).clone(), false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuclModel {
    pub config: ModelConfig,
    pub enc1_w: Tensor,
    pub enc1_b: Tensor,
    pub enc2_w: Tensor,
    pub enc2_b: Tensor,
    pub tok_in_w: Tensor,
    pub tok_in_b: Tensor,
    pub prompts: PromptSet,
    pub tpa: TpaBlocks,
    pub phi: Phi,
    pub tok_out_w: Tensor,
    pub tok_out_b: Tensor,
    pub dec1_w: Tensor,
    pub dec1_b: Tensor,
    pub dec2_w: Tensor,
    pub dec2_b: Tensor,
}

/// Every parameter of a [`TuclModel`] inserted into one graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub enc1_w: Var,
    pub enc1_b: Var,
    pub enc2_w: Var,
    pub enc2_b: Var,
    pub tok_in_w: Var,
    pub tok_in_b: Var,
    pub prompts: Var,
    pub tpa: BoundTpa,
    pub phi: BoundPhi,
    pub tok_out_w: Var,
    pub tok_out_b: Var,
    pub dec1_w: Var,
    pub dec1_b: Var,
    pub dec2_w: Var,
    pub dec2_b: Var,
}

impl BoundModel {
    /// Vars in the same order as [`TuclModel::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![
            self.enc1_w,
            self.enc1_b,
            self.enc2_w,
            self.enc2_b,
            self.tok_in_w,
            self.tok_in_b,
            self.prompts,
        ];
        v.extend(self.tpa.vars());
        v.extend([
            self.phi.weight,
            self.phi.bias,
            self.tok_out_w,
            self.tok_out_b,
            self.dec1_w,
            self.dec1_b,
            self.dec2_w,
            self.dec2_b,
        ]);
        v
    }
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub probs: ProbMap,
    /// Refined prompt features, present when the attention module ran.
    pub prompt_features: Option<Var>,
    pub params: BoundModel,
}

fn conv_init(cout: usize, cin: usize, rng: &mut RngStream) -> Tensor {
    let std = (2.0 / (cin * 27) as f64).sqrt();
    Tensor::randn(&[cout, cin, 3, 3, 3], std, rng)
}

fn linear_init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor {
    let std = (1.0 / fan_in as f64).sqrt();
    Tensor::randn(&[fan_in, fan_out], std, rng)
}

impl TuclModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(seed).derive("init");
        let [c1, c2] = config.enc_channels;
        let d = config.token_width;
        let r = |name: &str| root.derive(name);
        Ok(Self {
            enc1_w: conv_init(c1, 4, &mut r("enc1")),
            enc1_b: Tensor::zeros(&[c1]),
            enc2_w: conv_init(c2, c1, &mut r("enc2")),
            enc2_b: Tensor::zeros(&[c2]),
            tok_in_w: linear_init(c2, d, &mut r("tok_in")),
            tok_in_b: Tensor::zeros(&[d]),
            prompts: PromptSet::new(config.prompt_width, &mut r("prompts")),
            tpa: TpaBlocks::new(config.prompt_width, d, config.heads, &mut r("tpa"))?,
            phi: Phi::new(d, config.prompt_width, &mut r("phi")),
            tok_out_w: linear_init(d, c2, &mut r("tok_out")),
            tok_out_b: Tensor::zeros(&[c2]),
            dec1_w: conv_init(c1, c2, &mut r("dec1")),
            dec1_b: Tensor::zeros(&[c1]),
            dec2_w: conv_init(3, c1, &mut r("dec2")),
            dec2_b: Tensor::zeros(&[3]),
            config,
        })
    }

    /// Named parameters in declaration order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("enc1_w".into(), &self.enc1_w),
            ("enc1_b".into(), &self.enc1_b),
            ("enc2_w".into(), &self.enc2_w),
            ("enc2_b".into(), &self.enc2_b),
            ("tok_in_w".into(), &self.tok_in_w),
            ("tok_in_b".into(), &self.tok_in_b),
            ("prompts".into(), &self.prompts.embeddings),
        ];
        out.extend(self.tpa.tensors().into_iter().map(|(n, t)| (format!("tpa.{n}"), t)));
        out.extend([
            ("phi.weight".to_string(), &self.phi.weight),
            ("phi.bias".to_string(), &self.phi.bias),
            ("tok_out_w".to_string(), &self.tok_out_w),
            ("tok_out_b".to_string(), &self.tok_out_b),
            ("dec1_w".to_string(), &self.dec1_w),
            ("dec1_b".to_string(), &self.dec1_b),
            ("dec2_w".to_string(), &self.dec2_w),
            ("dec2_b".to_string(), &self.dec2_b),
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("enc1_w".into(), &mut self.enc1_w),
            ("enc1_b".into(), &mut self.enc1_b),
            ("enc2_w".into(), &mut self.enc2_w),
            ("enc2_b".into(), &mut self.enc2_b),
            ("tok_in_w".into(), &mut self.tok_in_w),
            ("tok_in_b".into(), &mut self.tok_in_b),
            ("prompts".into(), &mut self.prompts.embeddings),
        ];
        out.extend(self.tpa.tensors_mut().into_iter().map(|(n, t)| (format!("tpa.{n}"), t)));
        out.extend([
            ("phi.weight".to_string(), &mut self.phi.weight),
            ("phi.bias".to_string(), &mut self.phi.bias),
            ("tok_out_w".to_string(), &mut self.tok_out_w),
            ("tok_out_b".to_string(), &mut self.tok_out_b),
            ("dec1_w".to_string(), &mut self.dec1_w),
            ("dec1_b".to_string(), &mut self.dec1_b),
            ("dec2_w".to_string(), &mut self.dec2_w),
            ("dec2_b".to_string(), &mut self.dec2_b),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            enc1_w: g.param(self.enc1_w.clone()),
            enc1_b: g.param(self.enc1_b.clone()),
            enc2_w: g.param(self.enc2_w.clone()),
            enc2_b: g.param(self.enc2_b.clone()),
            tok_in_w: g.param(self.tok_in_w.clone()),
            tok_in_b: g.param(self.tok_in_b.clone()),
            prompts: g.param(self.prompts.embeddings.clone()),
            tpa: self.tpa.bind(g),
            phi: self.phi.bind(g),
            tok_out_w: g.param(self.tok_out_w.clone()),
            tok_out_b: g.param(self.tok_out_b.clone()),
            dec1_w: g.param(self.dec1_w.clone()),
            dec1_b: g.param(self.dec1_b.clone()),
            dec2_w: g.param(self.dec2_w.clone()),
            dec2_b: g.param(self.dec2_b.clone()),
        }
    }

    /// Rebuilds the bound handles from vars listed in [`params`](Self::params) order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let expected = self.params().len();
        if vars.len() != expected {
            return Err(Error::Parameter(format!("expected {expected} vars, got {}", vars.len())));
        }
        let (d, h) = (self.config.token_width, self.config.heads);
        let block = |v: &[Var]| BoundAttention {
            wq: v[0],
            wk: v[1],
            wv: v[2],
            wo: v[3],
            gamma: v[4],
            beta: v[5],
            heads: h,
            width: d,
        };
        Ok(BoundModel {
            enc1_w: vars[0],
            enc1_b: vars[1],
            enc2_w: vars[2],
            enc2_b: vars[3],
            tok_in_w: vars[4],
            tok_in_b: vars[5],
            prompts: vars[6],
            tpa: BoundTpa {
                prompt_proj: vars[7],
                seg_intra: block(&vars[8..14]),
                prompt_intra: block(&vars[14..20]),
                cross: block(&vars[20..26]),
            },
            phi: BoundPhi {
                weight: vars[26],
                bias: vars[27],
            },
            tok_out_w: vars[28],
            tok_out_b: vars[29],
            dec1_w: vars[30],
            dec1_b: vars[31],
            dec2_w: vars[32],
            dec2_b: vars[33],
        })
    }

    /// Records a forward pass; dropout is active only when `stochastic`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: &MultiContrastVolume,
        stochastic: bool,
        rng: &mut RngStream,
    ) -> Result<Forward> {
        let p = self.bind(g);
        self.forward_bound(g, p, x, stochastic, rng)
    }

    /// Like [`forward_graph`](Self::forward_graph) but reuses already bound
    /// parameters, so several passes in one graph share gradients.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        p: BoundModel,
        x: &MultiContrastVolume,
        stochastic: bool,
        rng: &mut RngStream,
    ) -> Result<Forward> {
        let dims = x.dims();
        if dims.iter().any(|d| d % 4 != 0) {
            return Err(Error::Dimension {
                op: "forward (spatial dims must be multiples of 4)",
                lhs: dims.to_vec(),
                rhs: vec![4, 4, 4],
            });
        }
        let rate = self.config.dropout;
        let c2 = self.config.enc_channels[1];
        let bottleneck = [dims[0] / 4, dims[1] / 4, dims[2] / 4];
        let tokens_n: usize = bottleneck.iter().product();

        let input = g.constant(x.intensities().clone());
        let h = g.conv3d(input, p.enc1_w, 2, 1)?;
        let h = g.add_bias(h, p.enc1_b, 0)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, rate, rng, stochastic)?;
        let h = g.conv3d(h, p.enc2_w, 2, 1)?;
        let h = g.add_bias(h, p.enc2_b, 0)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, rate, rng, stochastic)?;

        let flat = g.reshape(h, &[c2, tokens_n])?;
        let tokens = g.transpose(flat)?;
        let tokens = g.matmul(tokens, p.tok_in_w)?;
        let tokens = g.add_bias(tokens, p.tok_in_b, 1)?;
        let (fused, prompt_features) = if self.config.use_tpa {
            let out = tpa_forward(g, tokens, p.prompts, &p.tpa)?;
            (out.fused, Some(out.prompt_features))
        } else {
            (tokens, None)
        };
        let back = g.matmul(fused, p.tok_out_w)?;
        let back = g.add_bias(back, p.tok_out_b, 1)?;
        let back = g.transpose(back)?;
        let back = g.reshape(back, &[c2, bottleneck[0], bottleneck[1], bottleneck[2]])?;
        let h = g.add(back, h)?;

        let h = g.upsample(h, 2)?;
        let h = g.conv3d(h, p.dec1_w, 1, 1)?;
        let h = g.add_bias(h, p.dec1_b, 0)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, rate, rng, stochastic)?;
        let h = g.upsample(h, 2)?;
        let h = g.conv3d(h, p.dec2_w, 1, 1)?;
        let logits = g.add_bias(h, p.dec2_b, 0)?;
        let probs = g.sigmoid(logits)?;
        Ok(Forward {
            probs: ProbMap(probs),
            prompt_features,
            params: p,
        })
    }

    /// Region probabilities for one volume; `seed` only matters when `stochastic`.
    pub fn forward(&self, x: &MultiContrastVolume, stochastic: bool, seed: u64) -> Result<RegionMask> {
        self.predict(x, stochastic, &mut RngStream::new(seed))
    }

    pub fn predict(
        &self,
        x: &MultiContrastVolume,
        stochastic: bool,
        rng: &mut RngStream,
    ) -> Result<RegionMask> {
        let mut g = Graph::no_grad();
        let out = self.forward_graph(&mut g, x, stochastic, rng)?;
        out.probs.to_mask(&g)
    }
}

/// Thresholds each channel, then enforces `ET ≤ TC ≤ WT`.
pub fn binarize(y_hat: &RegionMask, threshold: f64) -> RegionMask {
    let n = y_hat.voxels();
    let d = y_hat.values().data();
    let mut out = vec![0.0; 3 * n];
    for v in 0..n {
        let wt = d[v] > threshold;
        let tc = d[n + v] > threshold && wt;
        let et = d[2 * n + v] > threshold && tc;
        out[v] = f64::from(u8::from(wt));
        out[n + v] = f64::from(u8::from(tc));
        out[2 * n + v] = f64::from(u8::from(et));
    }
    let [w, h, dd] = y_hat.dims();
    let t = Tensor::new(&[3, w, h, dd], out).expect("same dims");
    RegionMask::new(t, true).expect("hierarchy holds by construction")
}

/// Header metadata stored next to a checkpoint payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    config: ModelConfig,
    seed: u64,
    step: u64,
    params: Vec<(String, Vec<usize>)>,
    dtype: String,
    checksum: u32,
}

/// Writes `<path>.json` and `<path>.raw` (parameters in declaration order).
pub fn save_checkpoint(model: &TuclModel, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let params = model.params();
    let mut payload = Vec::with_capacity(model.param_count() * 8);
    for (_, t) in &params {
        payload.extend(encode_f64(t.data()));
    }
    let header = CheckpointHeader {
        kind: "checkpoint".into(),
        config: model.config.clone(),
        seed: meta.seed,
        step: meta.step,
        params: params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
        dtype: "f64le".into(),
        checksum: crc32fast::hash(&payload),
    };
    write_atomic(&with_suffix(path, ".raw"), &payload)?;
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    write_atomic(&with_suffix(path, ".json"), &json)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TuclModel, CheckpointMeta)> {
    let path = path.as_ref();
    let hpath = with_suffix(path, ".json");
    let rpath = with_suffix(path, ".raw");
    let text = std::fs::read(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&text)
        .map_err(|e| Error::corrupt(&hpath, format!("bad header: {e}")))?;
    if header.kind != "checkpoint" || header.dtype != "f64le" {
        return Err(Error::corrupt(&hpath, "not an f64le checkpoint"));
    }
    let payload = std::fs::read(&rpath).map_err(|e| Error::io(&rpath, e))?;
    if crc32fast::hash(&payload) != header.checksum {
        return Err(Error::corrupt(&rpath, "checksum mismatch"));
    }
    let values = decode_f64(&payload);
    let mut model = TuclModel::new(header.config, header.seed)?;
    let mut offset = 0;
    {
        let mut slots = model.params_mut();
        if slots.len() != header.params.len() {
            return Err(Error::corrupt(&hpath, "parameter list does not match architecture"));
        }
        for ((name, tensor), (hname, hshape)) in slots.iter_mut().zip(&header.params) {
            if name != hname || tensor.shape() != hshape.as_slice() {
                return Err(Error::corrupt(
                    &hpath,
                    format!("parameter {hname} {hshape:?} does not match {name} {:?}", tensor.shape()),
                ));
            }
            let n = tensor.numel();
            let chunk = values
                .get(offset..offset + n)
                .ok_or_else(|| Error::corrupt(&rpath, "payload too short"))?;
            tensor.data_mut().copy_from_slice(chunk);
            offset += n;
        }
    }
    if offset != values.len() {
        return Err(Error::corrupt(&rpath, "payload has trailing values"));
    }
    Ok((
        model,
        CheckpointMeta {
            seed: header.seed,
            step: header.step,
        },
    ))
}
