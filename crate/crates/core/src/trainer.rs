//! Training loop on the weighted objective, plus ablation orchestration.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dur::{dur_loss, mc_uncertainty, DeltaMode, Partition};
use crate::error::{Error, Result};
use crate::losses::{seg_loss, total_loss, LossParts, LossWeights};
use crate::model::{ModelConfig, TuclModel};
use crate::phantom::DatasetItem;
use crate::report::{evaluate, EvalReport};
use crate::rng::RngStream;
use crate::tensor::{Adam, Graph, Tensor};
use crate::tpa::cycle_loss;
use crate::volume::{write_atomic, Modality, MultiContrastVolume, RegionMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    /// Architecture, dropout rate and the attention toggle.
    pub model: ModelConfig,
    /// Stochastic passes per uncertainty refresh during training.
    pub t_train: usize,
    /// Stochastic passes for uncertainty at evaluation time.
    pub t_eval: usize,
    /// A cached uncertainty partition is recomputed once it is this many steps old.
    pub refresh: usize,
    pub delta: DeltaMode,
    pub seed: u64,
    pub use_dur: bool,
    /// Applied when the dataset is generated; the trainer uses whichever items carry masks.
    pub labeled_fraction: f64,
    /// Fraction of steps before the refinement loss switches on.
    pub dur_warmup: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch: 2,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            t_train: 4,
            t_eval: 8,
            refresh: 5,
            delta: DeltaMode::default(),
            seed: 0,
            use_dur: true,
            labeled_fraction: 1.0,
            dur_warmup: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn use_tpa(&self) -> bool {
        self.model.use_tpa
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config("adam betas must be in [0, 1) and eps > 0".into()));
        }
        if self.t_train < 2 || self.t_eval < 2 {
            return Err(Error::Config("MC sample counts must be >= 2".into()));
        }
        if self.refresh == 0 {
            return Err(Error::Config("refresh period must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dur_warmup) {
            return Err(Error::Config(format!("dur_warmup must be in [0, 1], got {}", self.dur_warmup)));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction must be in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        self.weights.validate()?;
        self.model.validate()?;
        self.delta.validate()
    }

    /// Loss weights with the toggled-off terms forced to zero.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda2: if self.use_tpa() { self.weights.lambda2 } else { 0.0 },
            lambda3: if self.use_dur { self.weights.lambda3 } else { 0.0 },
            ..self.weights
        }
    }

    /// First step (0-based) at which the refinement loss is active.
    pub fn dur_start(&self) -> usize {
        (self.dur_warmup * self.steps as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub seg: f64,
    pub tpa: f64,
    pub dur: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Mean threshold over the batch; 0 while the refinement loss is inactive.
    pub delta: f64,
    pub dur_active: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// CSV of the loss trajectory. Wall time is left out so reruns are byte-identical.
    pub fn to_csv(&self, comment: &str) -> String {
        let mut s = format!("# {comment}\nstep,l_seg,l_tpa,l_dur,l_total,grad_norm,delta,dur_active\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{}\n",
                r.step,
                r.seg,
                r.tpa,
                r.dur,
                r.total,
                r.grad_norm,
                r.delta,
                u8::from(r.dur_active)
            ));
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("step,wall_ms\n");
        for r in &self.records {
            s.push_str(&format!("{},{:.3}\n", r.step, r.wall_ms));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, comment: &str) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv(comment).as_bytes())
    }
}

struct CachedPartition {
    computed_at: usize,
    partition: Partition,
}

/// Items that carry ground truth.
pub fn labeled(items: &[DatasetItem]) -> Vec<(&MultiContrastVolume, &RegionMask)> {
    items
        .iter()
        .filter_map(|it| it.mask.as_ref().map(|m| (&it.volume, m)))
        .collect()
}

/// Fits `model` on the labeled items. The model's own dropout and attention
/// settings are replaced by those in `cfg.model`.
pub fn train(
    mut model: TuclModel,
    items: &[DatasetItem],
    cfg: &TrainConfig,
) -> Result<(TuclModel, TrainLog)> {
    cfg.validate()?;
    let data = labeled(items);
    if data.is_empty() {
        return Err(Error::Config("training needs at least one labeled item".into()));
    }
    model.config = cfg.model.clone();
    let w = cfg.effective_weights();
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let root = RngStream::new(cfg.seed).derive("train");
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut cache: Vec<Option<CachedPartition>> = (0..data.len()).map(|_| None).collect();
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let started = Instant::now();
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                root.derive("order").derive_index(epoch).shuffle(&mut order);
                order.reverse();
                epoch += 1;
            }
            batch.push(order.pop().expect("refilled"));
        }

        let dur_active = cfg.use_dur && step >= cfg.dur_start();
        let mut deltas = 0.0;
        if dur_active {
            for &i in &batch {
                let stale = cache[i]
                    .as_ref()
                    .is_none_or(|c| step - c.computed_at >= cfg.refresh);
                if stale {
                    let rng = root.derive("mc").derive_index(step as u64).derive_index(i as u64);
                    let (_, field) = mc_uncertainty(&model, data[i].0, cfg.t_train, &rng, cfg.delta)?;
                    cache[i] = Some(CachedPartition {
                        computed_at: step,
                        partition: field.partition,
                    });
                }
                deltas += cache[i].as_ref().expect("filled").partition.delta;
            }
        }

        let mut g = Graph::new();
        let params = model.bind(&mut g);
        let mut sum = None;
        let mut parts = LossParts::default();
        let dropout = root.derive("dropout").derive_index(step as u64);
        for (j, &i) in batch.iter().enumerate() {
            let (x, y) = data[i];
            let mut rng = dropout.derive_index(j as u64);
            let out = model.forward_bound(&mut g, params.clone(), x, true, &mut rng)?;
            let seg = seg_loss(&mut g, &out.probs, y)?;
            let tpa = match out.prompt_features {
                Some(pf) => cycle_loss(&mut g, params.prompts, pf, &out.probs, &params.phi)?,
                None => g.constant(Tensor::scalar(0.0)),
            };
            let dur = if dur_active {
                let p = &cache[i].as_ref().expect("filled").partition;
                dur_loss(&mut g, &out.probs, y, p, w.alpha, w.beta)?
            } else {
                g.constant(Tensor::scalar(0.0))
            };
            parts.seg += g.item(seg)?;
            parts.tpa += g.item(tpa)?;
            parts.dur += g.item(dur)?;
            let t = total_loss(&mut g, seg, tpa, dur, &w)?;
            sum = Some(match sum {
                None => t,
                Some(s) => g.add(s, t)?,
            });
        }
        let b = cfg.batch as f64;
        let loss = g.scale(sum.expect("batch >= 1"), 1.0 / b)?;
        g.backward(loss)?;

        let vars = params.vars();
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(model.params())
            .map(|(&v, (_, t))| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        let grad_norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {grad_norm} at step {}", step + 1)));
        }
        {
            let mut slots: Vec<_> = model.params_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut slots, &grads)?;
        }

        let parts = LossParts {
            seg: parts.seg / b,
            tpa: parts.tpa / b,
            dur: parts.dur / b,
        };
        log.records.push(StepRecord {
            step: step + 1,
            seg: parts.seg,
            tpa: parts.tpa,
            dur: parts.dur,
            total: g.item(loss)?,
            grad_norm,
            delta: if dur_active { deltas / b } else { 0.0 },
            dur_active,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((model, log))
}

/// One trained configuration of an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub label: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub drop: Option<Modality>,
    pub report: EvalReport,
}

/// Trains each setting once and evaluates the same checkpoint under every
/// entry of `drops` (`None` is the full-input evaluation).
pub fn run_ablation(
    grid: &[AblationSetting],
    train_items: &[DatasetItem],
    eval_items: &[DatasetItem],
    drops: &[Option<Modality>],
    spacing: f64,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Parameter("ablation grid is empty".into()));
    }
    if drops.is_empty() {
        return Err(Error::Parameter("ablation needs at least one evaluation input".into()));
    }
    let mut rows = Vec::new();
    for setting in grid {
        let model = TuclModel::new(setting.config.model.clone(), setting.config.seed)?;
        let (model, _) = train(model, train_items, &setting.config)?;
        for &drop in drops {
            rows.push(AblationRow {
                label: setting.label.clone(),
                drop,
                report: evaluate(&model, eval_items, drop, spacing)?,
            });
        }
    }
    Ok(rows)
}

/// Table with Dice and HD95 per region plus their averages, one line per row.
pub fn ablation_csv(rows: &[AblationRow], comment: &str) -> String {
    let mut out = Vec::new();
    writeln!(out, "# {comment}").expect("in-memory write");
    writeln!(
        out,
        "setting,drop,dice_et,dice_wt,dice_tc,dice_ave,hd95_et,hd95_wt,hd95_tc,hd95_ave"
    )
    .expect("in-memory write");
    for r in rows {
        let a = &r.report.aggregate;
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.label,
            r.drop.map_or("none", Modality::name),
            a.dice[2],
            a.dice[0],
            a.dice[1],
            a.dice_ave,
            a.hd95[2],
            a.hd95[0],
            a.hd95[1],
            a.hd95_ave
        )
        .expect("in-memory write");
    }
    String::from_utf8(out).expect("ascii")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_dataset, PhantomSpec};

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            dims: [12, 12, 12],
            center: [5.5; 3],
            radii: [4.0, 2.5, 1.5],
            ..PhantomSpec::default()
        }
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch: 1,
            model: ModelConfig {
                token_width: 16,
                prompt_width: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn no_labels_is_config_error() {
        let mut items = make_dataset(2, &small_spec(), 1.0, 0).unwrap();
        items.iter_mut().for_each(|it| it.mask = None);
        let cfg = quick(1);
        let model = TuclModel::new(cfg.model.clone(), 0).unwrap();
        assert!(matches!(train(model, &items, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn toggles_zero_their_terms() {
        let items = make_dataset(2, &small_spec(), 1.0, 0).unwrap();
        let mut cfg = quick(6);
        cfg.model.use_tpa = false;
        cfg.use_dur = false;
        let model = TuclModel::new(cfg.model.clone(), 0).unwrap();
        let (_, log) = train(model, &items, &cfg).unwrap();
        assert!(log.records.iter().all(|r| r.tpa == 0.0 && r.dur == 0.0));
    }

    #[test]
    fn warmup_delays_refinement() {
        let items = make_dataset(2, &small_spec(), 1.0, 0).unwrap();
        let cfg = quick(5);
        assert_eq!(cfg.dur_start(), 1);
        let model = TuclModel::new(cfg.model.clone(), 0).unwrap();
        let (_, log) = train(model, &items, &cfg).unwrap();
        assert!(!log.records[0].dur_active);
        assert!(log.records[1..].iter().all(|r| r.dur_active && r.delta >= 0.0));
    }

    #[test]
    fn empty_grid_rejected() {
        let items = make_dataset(1, &small_spec(), 1.0, 0).unwrap();
        assert!(run_ablation(&[], &items, &items, &[None], 1.0).is_err());
    }
}
