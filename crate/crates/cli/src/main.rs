//! `ldlb`: pretrain, train, sample and evaluate latent score-based models.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ldlb_core::data::{write_pgm, Dataset, DatasetKind};
use ldlb_core::experiment::{sample_decoded, ExperimentConfig, SamplerKind};
use ldlb_core::nn::gradcheck::randn_matrix;
use ldlb_core::nn::{Checkpoint, Tensor};
use ldlb_core::objectives::{fixed_point_residual, normal_prior_nelbo, variance_diagnostic};
use ldlb_core::rng::{stream, Purpose};
use ldlb_core::samplers::{eval_nelbo, iw_bias_probe};
use ldlb_core::trainer::{Metrics, Phase, Trainer};
use ldlb_core::{TSamplingStrategy, TimeSampler, WeightingMechanism};

#[derive(Parser)]
#[command(name = "ldlb", version, about = "Latent score-based generative models at desk scale")]
struct Cli {
    /// Experiment config (JSON). Defaults to the built-in toy8gauss setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results are bitwise
    /// reproducible only with --workers 1.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the VAE backbone under a standard Normal prior.
    Pretrain,
    /// Joint training of VAE and score prior.
    Train {
        /// Pretraining checkpoint to start from (default: latest under
        /// <out>/pretrain, else pretrain first).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Draw and decode samples.
    Sample {
        #[command(flatten)]
        ck: CkArg,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_parser = ["ode", "ancestral"])]
        method: Option<String>,
    },
    /// NELBO on the held-out split with ODE likelihoods.
    EvalNelbo {
        #[command(flatten)]
        ck: CkArg,
        /// Hutchinson probes (0 = exact trace).
        #[arg(long)]
        probes: Option<usize>,
    },
    /// Per-t integrand and single-draw objective spread at the Gaussian
    /// fixed point, for every supported weighting and t-sampling.
    VarianceReport {
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long, default_value_t = 1)]
        latent_dim: usize,
    },
    /// Schedule quantities on a uniform time grid.
    ScheduleDump {
        #[arg(long, default_value_t = 101)]
        grid: usize,
    },
    /// Bias of the importance-weighted bound under noisy log-weights.
    IwBias {
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.05,0.1,0.25")]
        s2: Vec<f64>,
        /// Std of the true log-weights around 0.
        #[arg(long, default_value_t = 0.0)]
        spread: f64,
    },
}

#[derive(Args)]
struct CkArg {
    /// Trainer checkpoint (default: latest under <out>/train).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LDLB_LOG", "info"))
        .format_timestamp_millis()
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::toy(DatasetKind::Toy8Gauss),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    if let Some(w) = cli.workers {
        if w == 0 {
            bail!("configuration error in `--workers`: must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global()?;
    }
    match cli.cmd {
        Cmd::Pretrain => pretrain(&cfg),
        Cmd::Train { checkpoint } => train(&cfg, checkpoint),
        Cmd::Sample { ck, n, method } => sample(&cfg, ck.checkpoint, n, method),
        Cmd::EvalNelbo { ck, probes } => eval(&cfg, ck.checkpoint, probes),
        Cmd::VarianceReport { draws, grid, latent_dim } => variance_report(&cfg, draws, grid, latent_dim),
        Cmd::ScheduleDump { grid } => schedule_dump(&cfg, grid),
        Cmd::IwBias { k, trials, s2, spread } => iw_bias(&cfg, k, trials, &s2, spread),
    }
}

/// Creates the next unused `<out>/<name>/vNNN` directory.
fn versioned_dir(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    let base = cfg.output_dir.join(name);
    fs::create_dir_all(&base).with_context(|| format!("creating {}", base.display()))?;
    let next = versions(&base)?.last().map_or(1, |(v, _)| v + 1);
    let dir = base.join(format!("v{next:03}"));
    fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    info!("writing to {}", dir.display());
    Ok(dir)
}

fn versions(base: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    if !base.is_dir() {
        return Ok(out);
    }
    for e in fs::read_dir(base)? {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(v) = name.strip_prefix('v').and_then(|s| s.parse::<u32>().ok()) {
            out.push((v, e.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn latest_checkpoint(cfg: &ExperimentConfig, stage: &str) -> Result<Option<PathBuf>> {
    Ok(versions(&cfg.output_dir.join(stage))?
        .into_iter()
        .rev()
        .map(|(_, p)| p.join("checkpoint.ldlb"))
        .find(|p| p.is_file()))
}

fn load_trainer(path: &Path) -> Result<Trainer> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Trainer::from_checkpoint(&ck)?)
}

fn trained(cfg: &ExperimentConfig, explicit: Option<PathBuf>) -> Result<(Trainer, PathBuf)> {
    let path = match explicit {
        Some(p) => p,
        None => latest_checkpoint(cfg, "train")?
            .with_context(|| format!("no trained checkpoint under {}; run `train` first", cfg.output_dir.display()))?,
    };
    Ok((load_trainer(&path)?, path))
}

struct MetricsLog(BufWriter<File>);

impl MetricsLog {
    fn create(dir: &Path) -> Result<Self> {
        Ok(MetricsLog(BufWriter::new(File::create(dir.join("metrics.jsonl"))?)))
    }

    fn sink(&mut self) -> impl FnMut(&Metrics) + '_ {
        move |m: &Metrics| {
            info!(
                "{:?} step {}: nelbo {:.4} recon {:.4} ce {:.4} alpha_max {:.3}",
                m.phase, m.step, m.nelbo, m.recon, m.ce, m.alpha_max
            );
            if let Ok(line) = serde_json::to_string(m) {
                let _ = writeln!(self.0, "{line}");
            }
        }
    }
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn run_pretrain(cfg: &ExperimentConfig, train: &Dataset, held_out: &Dataset) -> Result<Trainer> {
    let dir = versioned_dir(cfg, "pretrain")?;
    let mut t = Trainer::new(cfg.train.clone(), cfg.models.clone())?;
    t.dump_dir = Some(dir.clone());
    let mut log = MetricsLog::create(&dir)?;
    t.run_pretrain(train, &mut log.sink())?;
    t.checkpoint().save(&dir.join("checkpoint.ldlb"))?;
    let nelbo = normal_prior_nelbo(&t.vae.cast::<f64>(), held_out, 4, cfg.seed)?;
    write_json(&dir.join("summary.json"), &json!({ "steps": t.step, "held_out_normal_prior": nelbo }))?;
    info!("pretrained: held-out NELBO under N(0, I) {:.4}", nelbo.nelbo);
    Ok(t)
}

fn pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let (train, held_out) = cfg.load_data()?;
    run_pretrain(cfg, &train, &held_out).map(|_| ())
}

fn train(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let (data, held_out) = cfg.load_data()?;
    let source = match checkpoint {
        Some(p) => Some(p),
        None => latest_checkpoint(cfg, "pretrain")?,
    };
    let mut t = match source {
        Some(p) => {
            info!("resuming from {}", p.display());
            let mut t = load_trainer(&p)?;
            if t.phase == Phase::Pretrain {
                t.run_pretrain(&data, &mut |_| {})?;
            }
            t
        }
        None => run_pretrain(cfg, &data, &held_out)?,
    };
    let dir = versioned_dir(cfg, "train")?;
    t.dump_dir = Some(dir.clone());
    let mut log = MetricsLog::create(&dir)?;
    t.run_main(&data, &mut log.sink())?;
    t.checkpoint().save(&dir.join("checkpoint.ldlb"))?;
    let est = t.estimate_nelbo(&held_out, 4, cfg.seed)?;
    write_json(
        &dir.join("summary.json"),
        &json!({ "steps": t.step, "dsm_evals": t.dsm_evals, "held_out_mc": est, "alpha_max": t.prior.alpha_max() }),
    )?;
    info!("trained: held-out Monte-Carlo NELBO {:.4}", est.nelbo);
    Ok(())
}

fn sample(cfg: &ExperimentConfig, ck: Option<PathBuf>, n: Option<usize>, method: Option<String>) -> Result<()> {
    let (t, ck) = trained(cfg, ck)?;
    let mut eval = cfg.eval;
    if let Some(m) = method {
        eval.sampler = if m == "ode" { SamplerKind::Ode } else { SamplerKind::Ancestral };
    }
    let n = n.unwrap_or(eval.n_samples);
    let d = sample_decoded(&t.vae, &t.prior, &t.cfg.schedule, n, &eval, &cfg.solver, cfg.seed)?;
    let dir = versioned_dir(cfg, "sample")?;
    let mut files = Vec::new();
    if cfg.dataset.kind == DatasetKind::MnistBinarized {
        for i in 0..n {
            let name = format!("sample_{i:05}.pgm");
            let px: Vec<f32> = d.x.row(i).iter().map(|&v| v as f32).collect();
            write_pgm(&dir.join(&name), 28, 28, &px)?;
            files.push(name);
        }
    } else {
        let mut w = BufWriter::new(File::create(dir.join("samples.csv"))?);
        writeln!(w, "x,y")?;
        for i in 0..n {
            let r = d.x.row(i);
            writeln!(w, "{},{}", r[0], r[1])?;
        }
        w.flush()?;
        files.push("samples.csv".into());
    }
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "checkpoint": ck,
            "n": n,
            "method": eval.sampler,
            "solver": cfg.solver,
            "nfe": d.stats.map(|s| s.nfe),
            "accepted": d.stats.map(|s| s.accepted),
            "rejected": d.stats.map(|s| s.rejected),
            "files": files,
        }),
    )?;
    info!("wrote {n} samples to {}", dir.display());
    Ok(())
}

fn eval(cfg: &ExperimentConfig, ck: Option<PathBuf>, probes: Option<usize>) -> Result<()> {
    let (t, ck) = trained(cfg, ck)?;
    let (_, held_out) = cfg.load_data()?;
    let probes = probes.unwrap_or(cfg.eval.n_probes);
    let r = eval_nelbo(&t.vae, &t.prior, &t.cfg.schedule, &held_out, &cfg.solver, probes, cfg.seed)?;
    let dir = versioned_dir(cfg, "eval")?;
    write_json(&dir.join("nelbo.json"), &json!({ "checkpoint": ck, "probes": probes, "report": r }))?;
    info!("NELBO {:.4} +- {:.4} nats ({} points, {} NFE)", r.nelbo, r.std_err, r.n, r.nfe);
    println!("{}", serde_json::to_string(&r)?);
    Ok(())
}

fn variance_report(cfg: &ExperimentConfig, draws: usize, grid: usize, latent_dim: usize) -> Result<()> {
    if grid < 2 {
        bail!("configuration error in `--grid`: need at least two points");
    }
    let schedule = cfg.train.schedule;
    let dir = versioned_dir(cfg, "variance")?;
    let mut w = BufWriter::new(File::create(dir.join("variance.csv"))?);
    writeln!(w, "mechanism,strategy,t,integrand,mean,empirical_std,std_err,analytic")?;
    for mech in [WeightingMechanism::Wll, WeightingMechanism::Wun, WeightingMechanism::Wre] {
        for strat in [TSamplingStrategy::Uniform, TSamplingStrategy::ImportanceSampled] {
            let Ok(sampler) = TimeSampler::new(schedule, mech, strat) else {
                info!("skipping unsupported {} / {}", mech.name(), strat.name());
                continue;
            };
            let rep = variance_diagnostic(&schedule, mech, strat, draws, latent_dim, cfg.seed)?;
            let eps = schedule.t_cutoff();
            for i in 0..grid {
                let t = eps + (1.0 - eps) * i as f64 / (grid - 1) as f64;
                let g = mech.weight(&schedule, t)? / (2.0 * sampler.pdf(t)?)
                    * fixed_point_residual(&schedule, t, latent_dim)?;
                writeln!(
                    w,
                    "{},{},{t},{g},{},{},{},{}",
                    mech.name(),
                    strat.name(),
                    rep.mean,
                    rep.std,
                    rep.se,
                    rep.analytic
                )?;
            }
            info!("{} / {}: mean {:.5} std {:.5}", mech.name(), strat.name(), rep.mean, rep.std);
        }
    }
    w.flush()?;
    Ok(())
}

fn schedule_dump(cfg: &ExperimentConfig, grid: usize) -> Result<()> {
    if grid < 2 {
        bail!("configuration error in `--grid`: need at least two points");
    }
    let s = cfg.train.schedule;
    let dir = versioned_dir(cfg, "schedule")?;
    let mut w = BufWriter::new(File::create(dir.join("schedule.csv"))?);
    writeln!(w, "t,beta,g2,mean_coeff,var,ring_var")?;
    for i in 0..grid {
        let t = i as f64 / (grid - 1) as f64;
        let k = s.kernel(t)?;
        writeln!(w, "{t},{},{},{},{},{}", s.beta(t)?, s.g2(t)?, k.mean_coeff, k.var, k.ring_var)?;
    }
    w.flush()?;
    info!("wrote {grid} rows");
    Ok(())
}

fn iw_bias(cfg: &ExperimentConfig, k: usize, trials: usize, s2: &[f64], spread: f64) -> Result<()> {
    let draws: Tensor<f64> = randn_matrix(k, 1, &mut stream(cfg.seed, Purpose::Data, 7));
    let logps: Vec<f64> = draws.data().iter().map(|v| v * spread).collect();
    let dir = versioned_dir(cfg, "iw_bias")?;
    let mut w = BufWriter::new(File::create(dir.join("iw_bias.csv"))?);
    writeln!(w, "s2,k,bias,std_err,predicted")?;
    for (i, &v) in s2.iter().enumerate() {
        let r = iw_bias_probe(&logps, v, k, trials, &mut stream(cfg.seed, Purpose::Diagnostic, i as u64))?;
        writeln!(w, "{v},{k},{},{},{}", r.bias, r.std_err, r.predicted)?;
        info!("s2 {v}: bias {:.5} +- {:.5} (predicted {:.5})", r.bias, r.std_err, r.predicted);
    }
    w.flush()?;
    Ok(())
}
