//! `tucl` command-line front end.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use tucl::dur::mc_uncertainty;
use tucl::model::{load_checkpoint, save_checkpoint, CheckpointMeta, TuclModel};
use tucl::phantom::{load_dataset, make_dataset, write_dataset};
use tucl::report::{agreement_csv, evaluate_with_threads, plot_csv, report_csv};
use tucl::rng::RngStream;
use tucl::tensor::Tensor;
use tucl::trainer::{ablation_csv, run_ablation, train, AblationSetting};
use tucl::volume::{read_volume, write_atomic, write_volume, Modality, ScalarVolume};
use tucl::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tucl", version, about = "Prompt-attention tumor segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        labeled_fraction: Option<f64>,
        #[arg(long, num_args = 3, value_names = ["W", "H", "D"])]
        dims: Option<Vec<usize>>,
    },
    /// Train a model and write a checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        no_tpa: bool,
        #[arg(long)]
        no_dur: bool,
    },
    /// Evaluate a checkpoint on the labeled items of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Zero-fill one modality before inference.
        #[arg(long)]
        drop: Option<Modality>,
        #[arg(long)]
        spacing: Option<f64>,
    },
    /// Monte-Carlo uncertainty map for one case.
    Uncertainty {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Multi-contrast volume path (without the .json/.raw suffix).
        #[arg(long)]
        case: Option<PathBuf>,
        /// Number of stochastic passes.
        #[arg(long = "T")]
        samples: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
    },
    /// Train Base, +TPA, +DUR and the full model, then evaluate each with every modality drop.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Worker cap from `TUCL_THREADS`, else the machine's parallelism.
fn threads() -> Result<usize> {
    match std::env::var("TUCL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("TUCL_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(out) = &common.out {
        cfg.paths.out = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.phantom.seed = seed;
    }
    Ok(cfg)
}

/// Creates the output directory and echoes the resolved config into it.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = RunConfig::require(&cfg.paths.out, "--out")?.to_path_buf();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(out)
}

fn cmd_gen(common: Common, n: Option<usize>, fraction: Option<f64>, dims: Option<Vec<usize>>) -> Result<()> {
    let mut cfg = resolve(&common)?;
    if let Some(n) = n {
        cfg.gen.n = n;
    }
    if let Some(f) = fraction {
        cfg.train.labeled_fraction = f;
    }
    if let Some(d) = dims {
        let d = [d[0], d[1], d[2]];
        let old = *cfg.phantom.dims.iter().min().expect("3 dims") as f64;
        let new = *d.iter().min().expect("3 dims") as f64;
        if new < old {
            cfg.phantom.radii = cfg.phantom.radii.map(|r| r * new / old);
        }
        cfg.phantom.dims = d;
        cfg.phantom.center = d.map(|x| (x as f64 - 1.0) / 2.0);
    }
    let f = cfg.train.labeled_fraction;
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::Parameter(format!("labeled fraction must be in (0, 1], got {f}")));
    }
    cfg.phantom.validate()?;
    let items = make_dataset(cfg.gen.n, &cfg.phantom, f, cfg.train.seed)?;
    let out = prepare_out(&cfg)?;
    let manifest = write_dataset(&out, &items, &cfg.phantom, f, cfg.train.seed)?;
    let labeled = manifest.items.iter().filter(|i| i.mask.is_some()).count();
    println!("wrote {} items ({labeled} labeled) to {}", manifest.items.len(), out.display());
    Ok(())
}

fn cmd_train(common: Common, data: Option<PathBuf>, steps: Option<usize>, no_tpa: bool, no_dur: bool) -> Result<()> {
    let mut cfg = resolve(&common)?;
    if let Some(d) = data {
        cfg.paths.data = Some(d);
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if no_tpa {
        cfg.train.model.use_tpa = false;
    }
    if no_dur {
        cfg.train.use_dur = false;
    }
    cfg.train.validate()?;
    let items = load_dataset(RunConfig::require(&cfg.paths.data, "--data")?)?;
    let out = prepare_out(&cfg)?;
    let model = TuclModel::new(cfg.train.model.clone(), cfg.train.seed)?;
    let (model, log) = train(model, &items, &cfg.train)?;
    let meta = CheckpointMeta {
        seed: cfg.train.seed,
        step: cfg.train.steps as u64,
    };
    save_checkpoint(&model, &meta, out.join("model"))?;
    log.write_csv(out.join("train_log.csv"), &cfg.stamp())?;
    write_atomic(&out.join("timing.csv"), log.timing_csv().as_bytes())?;
    let last = log.records.last().expect("steps >= 1");
    println!(
        "trained {} steps: L_total {:.4} -> {:.4}; checkpoint {}",
        log.records.len(),
        log.records[0].total,
        last.total,
        out.join("model").display()
    );
    Ok(())
}

fn cmd_eval(
    common: Common,
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    drop: Option<Modality>,
    spacing: Option<f64>,
) -> Result<()> {
    let mut cfg = resolve(&common)?;
    if let Some(c) = ckpt {
        cfg.paths.ckpt = Some(c);
    }
    if let Some(d) = data {
        cfg.paths.data = Some(d);
    }
    if let Some(s) = spacing {
        cfg.spacing = s;
    }
    let threads = threads()?;
    let (model, _) = load_checkpoint(RunConfig::require(&cfg.paths.ckpt, "--ckpt")?)?;
    let items = load_dataset(RunConfig::require(&cfg.paths.data, "--data")?)?;
    let report = evaluate_with_threads(&model, &items, drop, cfg.spacing, threads)?;
    let out = prepare_out(&cfg)?;
    let stamp = cfg.stamp();
    write_atomic(&out.join("report.csv"), report_csv(&report, &stamp).as_bytes())?;
    write_atomic(&out.join("agreement.csv"), agreement_csv(&report, &stamp).as_bytes())?;
    write_atomic(&out.join("plot_data.csv"), plot_csv(&report, &stamp).as_bytes())?;
    let a = &report.aggregate;
    println!(
        "dice WT {:.2} TC {:.2} ET {:.2} Ave {:.2}; hd95 Ave {:.3} mm",
        a.dice[0], a.dice[1], a.dice[2], a.dice_ave, a.hd95_ave
    );
    Ok(())
}

fn cmd_uncertainty(
    common: Common,
    ckpt: Option<PathBuf>,
    case: Option<PathBuf>,
    samples: Option<usize>,
    dropout: Option<f64>,
) -> Result<()> {
    let mut cfg = resolve(&common)?;
    if let Some(c) = ckpt {
        cfg.paths.ckpt = Some(c);
    }
    if let Some(c) = case {
        cfg.paths.case = Some(c);
    }
    if let Some(t) = samples {
        cfg.uncertainty.samples = Some(t);
    }
    if let Some(d) = dropout {
        cfg.uncertainty.dropout = Some(d);
    }
    let t = cfg.uncertainty.samples.unwrap_or(cfg.train.t_eval);
    if t < 2 {
        return Err(Error::Parameter(format!("--T must be at least 2, got {t}")));
    }
    let (mut model, _) = load_checkpoint(RunConfig::require(&cfg.paths.ckpt, "--ckpt")?)?;
    if let Some(d) = cfg.uncertainty.dropout {
        model.config.dropout = d;
        model.config.validate()?;
    }
    let x = read_volume(RunConfig::require(&cfg.paths.case, "--case")?)?.into_multi_contrast()?;
    let rng = RngStream::new(cfg.train.seed).derive("uncertainty");
    let (mean, field) = mc_uncertainty(&model, &x, t, &rng, cfg.train.delta)?;
    let out = prepare_out(&cfg)?;
    let [w, h, d] = x.dims();
    let u = field.u.data();
    let map = ScalarVolume::new(vec!["U".into()], Tensor::new(&[1, w, h, d], u.to_vec())?)?;
    write_volume(&map.into(), out.join("uncertainty"))?;
    write_volume(&mean.into(), out.join("mean_prediction"))?;
    let mean_u = u.iter().sum::<f64>() / u.len() as f64;
    let max_u = u.iter().copied().fold(0.0, f64::max);
    let p = &field.partition;
    let summary = format!(
        "# {}\nsamples,voxels,mean_u,max_u,delta,core,boundary\n{},{},{:e},{:e},{:e},{},{}\n",
        cfg.stamp(),
        field.samples,
        u.len(),
        mean_u,
        max_u,
        p.delta,
        p.core_count(),
        p.boundary_count()
    );
    write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
    println!(
        "U mean {mean_u:.3e} max {max_u:.3e}; core {} boundary {} (delta {:.3e})",
        p.core_count(),
        p.boundary_count(),
        p.delta
    );
    Ok(())
}

fn cmd_ablate(common: Common, data: Option<PathBuf>, eval_data: Option<PathBuf>, steps: Option<usize>) -> Result<()> {
    let mut cfg = resolve(&common)?;
    if let Some(d) = data {
        cfg.paths.data = Some(d);
    }
    if let Some(d) = eval_data {
        cfg.paths.eval_data = Some(d);
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.train.validate()?;
    let train_items = load_dataset(RunConfig::require(&cfg.paths.data, "--data")?)?;
    let eval_items = load_dataset(RunConfig::require(&cfg.paths.eval_data, "--eval-data")?)?;
    let out = prepare_out(&cfg)?;
    let grid: Vec<AblationSetting> = [("base", false, false), ("tpa", true, false), ("dur", false, true), ("full", true, true)]
        .into_iter()
        .map(|(label, tpa, dur)| {
            let mut config = cfg.train.clone();
            config.model.use_tpa = tpa;
            config.use_dur = dur;
            AblationSetting {
                label: label.into(),
                config,
            }
        })
        .collect();
    let mut drops = vec![None];
    drops.extend(Modality::ALL.map(Some));
    let rows = run_ablation(&grid, &train_items, &eval_items, &drops, cfg.spacing)?;
    write_atomic(&out.join("ablation.csv"), ablation_csv(&rows, &cfg.stamp()).as_bytes())?;
    println!("wrote {} rows to {}", rows.len(), out.join("ablation.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            common,
            n,
            labeled_fraction,
            dims,
        } => cmd_gen(common, n, labeled_fraction, dims),
        Command::Train {
            common,
            data,
            steps,
            no_tpa,
            no_dur,
        } => cmd_train(common, data, steps, no_tpa, no_dur),
        Command::Eval {
            common,
            ckpt,
            data,
            drop,
            spacing,
        } => cmd_eval(common, ckpt, data, drop, spacing),
        Command::Uncertainty {
            common,
            ckpt,
            case,
            samples,
            dropout,
        } => cmd_uncertainty(common, ckpt, case, samples, dropout),
        Command::Ablate {
            common,
            data,
            eval_data,
            steps,
        } => cmd_ablate(common, data, eval_data, steps),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
