use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DVector, Vector3};

use latent_hri::data::{
    convert_long_csv, load_dataset, read_csv_matrix, save_dataset, split, synth_generate, Dataset, FeatureKind,
    SynthMode, SynthSpec, HUMAN_COLUMNS,
};
use latent_hri::eval::{experiment_datasets, run_experiment, select_best, state_summaries, ExperimentConfig};
use latent_hri::infer::{rollout, RolloutOptions, StepOptions};
use latent_hri::train::{fit_transition_states, train_hhi, train_hri, write_trace, Stage, Trained};
use latent_hri::{rng_from_seed, Error, KinematicChain, ModelBundle, Result, TransitionStateModel, Variant};

#[derive(Parser)]
#[command(name = "latent-hri", version, about = "Train and run HMM-regularised VAE interaction models")]
struct Cli {
    /// Experiment config (JSON). Defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Positions,
    Joints,
}

impl From<Kind> for FeatureKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Positions => FeatureKind::Positions,
            Kind::Joints => FeatureKind::Joints,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate matching synthetic HHI and HRI datasets under <out>/hhi and <out>/hri.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Train human-human models for every seed and keep the best as <out>/hhi.json.
    TrainHhi {
        /// Dataset directory (default: the config's HHI dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from an existing bundle.
        #[arg(long)]
        warm: Option<PathBuf>,
    },
    /// Train human-robot models on top of an HHI bundle.
    TrainHri {
        #[arg(long)]
        hhi: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Variant to train (default: the config's).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Full experiment: train all seeds and variants, evaluate, write reports.
    Eval,
    /// Run the reactive loop over one recorded human trajectory.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        /// CSV of human frames with the standard joint-position header.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        label: String,
        /// CSV `x,y,z` of hand positions, one row per input frame.
        #[arg(long)]
        hand: Option<PathBuf>,
        #[arg(long, default_value_t = latent_hri::infer::LAMBDA_Q)]
        lambda_q: f64,
    },
    /// Compare plain and prior-regularised IK on random reachable targets.
    IkDemo {
        #[arg(long, default_value_t = 10)]
        targets: usize,
        #[arg(long, default_value_t = latent_hri::infer::LAMBDA_Q)]
        lambda_q: f64,
    },
    /// Print per-state summaries of an interaction HMM; optionally relabel
    /// contact and reach states.
    InspectHmm {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        label: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        contact: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        reach: Option<Vec<usize>>,
        /// Where to save the relabelled bundle.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Convert a long-format recording CSV into a dataset directory.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        source_hz: f64,
        #[arg(long, default_value_t = 20.0)]
        target_hz: f64,
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[arg(long, value_enum, default_value = "joints")]
        partner: Kind,
        #[arg(long, default_value_t = 0.8)]
        split_fraction: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => serde_json::from_str("{}").map_err(|e| Error::Config(e.to_string()))?,
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = cli.seed {
        cfg.train.seeds = vec![s];
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn chain_of(cfg: &ExperimentConfig) -> Result<KinematicChain> {
    match &cfg.chain {
        Some(p) => KinematicChain::load(p),
        None => Ok(KinematicChain::humanoid_arm(0.181, 0.15)),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.display().to_string(),
        source: e,
    })
}

fn stage_dataset(cfg: &ExperimentConfig, explicit: Option<&PathBuf>, stage: Stage) -> Result<Dataset> {
    if let Some(p) = explicit {
        let ds = load_dataset(p)?;
        return if ds.indices(latent_hri::data::Split::Test).is_empty() {
            split(&ds, cfg.split_fraction, cfg.split_seed)
        } else {
            Ok(ds)
        };
    }
    let configured = match stage {
        Stage::Hhi => &cfg.hhi_dataset,
        Stage::Hri => &cfg.hri_dataset,
    };
    if configured.is_none() && cfg.synth.is_none() {
        return Err(Error::Config("no dataset given: pass --dataset or set one in the config".into()));
    }
    if let Some(p) = configured {
        return stage_dataset(cfg, Some(p), stage);
    }
    let (hhi, hri) = experiment_datasets(cfg)?;
    Ok(match stage {
        Stage::Hhi => hhi,
        Stage::Hri => hri,
    })
}

/// Save every seed's bundle and trace, then copy the best to `<name>.json`.
fn save_runs(out: &Path, name: &str, runs: &[Trained]) -> Result<()> {
    create_dir(out)?;
    for run in runs {
        let stem = format!("{name}_seed{}", run.bundle.seed);
        run.bundle.save(out.join(format!("{stem}.json")))?;
        write_trace(out.join(format!("{stem}_trace.csv")), &run.trace)?;
        if let Some(last) = run.trace.last() {
            println!("seed {}: final loss {:.6}, validation MSE {:.6}", run.bundle.seed, last.total, last.val_mse);
        }
    }
    let best = select_best(runs).ok_or_else(|| Error::Config("no seeds configured".into()))?;
    let path = out.join(format!("{name}.json"));
    runs[best].bundle.save(&path)?;
    println!("selected seed {} -> {}", runs[best].bundle.seed, path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cfg.out_dir.clone();
    match &cli.command {
        Command::Synth {
            count,
            label,
            noise,
            length,
        } => {
            let mut spec = cfg.synth.clone().unwrap_or_else(|| SynthSpec::single("reach", 40, SynthMode::Hri));
            if let Some(l) = label {
                for s in &mut spec.interactions {
                    s.label = l.clone();
                }
            }
            if let Some(c) = count {
                for s in &mut spec.interactions {
                    s.count = *c;
                }
            }
            if let Some(n) = noise {
                spec.noise = *n;
            }
            if let Some(t) = length {
                spec.length = *t;
            }
            let seed = cli.seed.unwrap_or(cfg.synth_seed);
            for (mode, dir) in [(SynthMode::Hhi, "hhi"), (SynthMode::Hri, "hri")] {
                spec.mode = mode;
                let ds = synth_generate(&spec, &mut rng_from_seed(seed))?;
                let ds = split(&ds, cfg.split_fraction, cfg.split_seed)?;
                save_dataset(&ds, out.join(dir))?;
                println!("wrote {} trajectories to {}", ds.pairs.len(), out.join(dir).display());
            }
        }
        Command::TrainHhi { dataset, warm } => {
            let ds = stage_dataset(&cfg, dataset.as_ref(), Stage::Hhi)?;
            let warm = warm.as_ref().map(ModelBundle::load).transpose()?;
            let runs = cfg
                .train
                .seeds
                .iter()
                .map(|&s| train_hhi(&ds, &cfg.train, s, warm.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            save_runs(&out, "hhi", &runs)?;
        }
        Command::TrainHri { hhi, dataset, variant } => {
            let base = ModelBundle::load(hhi)?;
            let ds = stage_dataset(&cfg, dataset.as_ref(), Stage::Hri)?;
            let mut tc = cfg.train.clone();
            if let Some(v) = variant {
                tc.variant = serde_json::from_value(serde_json::Value::String(v.clone()))
                    .map_err(|_| Error::Config(format!("unknown variant '{v}' (expected v1, v2.1, v2.2, v3.1 or v3.2)")))?;
            }
            let runs = tc
                .seeds
                .iter()
                .map(|&s| train_hri(&ds, &base, &tc, s))
                .collect::<Result<Vec<_>>>()?;
            save_runs(&out, &format!("hri_{}", tc.variant.as_str().replace('.', "_")), &runs)?;
        }
        Command::Eval => {
            let mut cfg = cfg;
            cfg.validate()?;
            if cfg.variants.is_empty() {
                cfg.variants = Variant::ALL.to_vec();
            }
            let report = run_experiment(&cfg)?;
            print!("{}", report.to_markdown());
            println!("\nreports written to {}", cfg.out_dir.display());
        }
        Command::Rollout {
            model,
            input,
            label,
            hand,
            lambda_q,
        } => {
            let bundle = ModelBundle::load(model)?;
            let chain = chain_of(&cfg)?;
            let cols: Vec<String> = HUMAN_COLUMNS.iter().map(|s| s.to_string()).collect();
            let frames = read_csv_matrix(input, &cols)?;
            let w = bundle.features.window;
            let hand_positions = match hand {
                Some(p) => {
                    let m = read_csv_matrix(p, &["x".into(), "y".into(), "z".into()])?;
                    if m.nrows() != frames.nrows() {
                        return Err(Error::Data(format!(
                            "{}: {} hand rows for {} human frames",
                            p.display(),
                            m.nrows(),
                            frames.nrows()
                        )));
                    }
                    // Window t ends at frame t + w − 1.
                    Some((w - 1..m.nrows()).map(|r| Vector3::new(m[(r, 0)], m[(r, 1)], m[(r, 2)])).collect())
                }
                None => None,
            };
            let options = RolloutOptions {
                step: StepOptions {
                    lambda_q: *lambda_q,
                    ..StepOptions::default()
                },
                hand_positions,
            };
            let r = rollout(&bundle, label, &frames, &chain, &options)?;
            create_dir(&out)?;
            let path = out.join("rollout.csv");
            r.write_csv(&path)?;
            let fired = r.gate.iter().position(|g| *g);
            println!(
                "{} steps written to {}; contact gate {}",
                r.len(),
                path.display(),
                fired.map_or("never fired".to_string(), |t| format!("fired at step {t}"))
            );
        }
        Command::IkDemo { targets, lambda_q } => {
            let chain = chain_of(&cfg)?;
            let mut rng = rng_from_seed(cli.seed.unwrap_or(0));
            println!("{:>3} {:>12} {:>12} {:>12} {:>12}", "#", "ik residual", "prior resid", "|q-mu| ik", "|q-mu| prior");
            for k in 0..*targets {
                let q_true = chain.random_configuration(&mut rng);
                let target = chain.fk(&q_true)?;
                let mu: DVector<f64> = chain.clamp(&(&q_true + DVector::from_fn(chain.dof(), |_, _| 0.2)));
                let plain = chain.ik_baseline(&target, &mu)?;
                let prior = chain.ik_with_prior(&target, &mu, latent_hri::infer::LAMBDA_X, *lambda_q)?;
                println!(
                    "{k:>3} {:>12.2e} {:>12.2e} {:>12.4} {:>12.4}",
                    plain.residual,
                    prior.residual,
                    (&plain.q - &mu).norm(),
                    (&prior.q - &mu).norm()
                );
            }
        }
        Command::InspectHmm {
            model,
            label,
            dataset,
            contact,
            reach,
            write,
        } => {
            let mut bundle = ModelBundle::load(model)?;
            let ds = dataset.as_ref().map(load_dataset).transpose()?;
            println!("interaction '{label}' ({} stage, variant {})", stage_name(bundle.stage), bundle.variant);
            println!(
                "{:>5} {:>8} {:>8} {:>9} {:>8} {:>8} {:>9} {:>7} {:>8}",
                "state", "initial", "stay", "duration", "|mu_h|", "|mu_r|", "occupancy", "phase", "role"
            );
            for s in state_summaries(&bundle, label, ds.as_ref())? {
                println!(
                    "{:>5} {:>8.4} {:>8.4} {:>9.2} {:>8.4} {:>8.4} {:>9.3} {:>7} {:>8}",
                    s.state,
                    s.initial,
                    s.self_transition,
                    s.expected_duration,
                    s.human_mean_norm,
                    s.robot_mean_norm,
                    s.occupancy,
                    s.mean_phase.map_or("-".to_string(), |p| format!("{p:.3}")),
                    s.role
                );
            }
            if contact.is_some() || reach.is_some() {
                let m = bundle
                    .interactions
                    .get_mut(label)
                    .ok_or_else(|| Error::Config(format!("unknown interaction '{label}'")))?;
                let c = contact.clone().unwrap_or_else(|| m.transitions.contact_states.clone());
                let r = reach.clone().unwrap_or_else(|| m.transitions.reach_states.clone());
                m.transitions = TransitionStateModel::new(c, r)?;
                m.transitions.validate(m.hmm.n_states())?;
                match &ds {
                    Some(ds) => fit_transition_states(&mut bundle, ds)?,
                    None => log::warn!("no dataset given; transition-state gate cleared until refitted"),
                }
                let path = write.clone().unwrap_or_else(|| model.clone());
                bundle.save(&path)?;
                println!("relabelled bundle saved to {}", path.display());
            }
        }
        Command::Convert {
            input,
            source_hz,
            target_hz,
            window,
            partner,
            split_fraction,
        } => {
            let ds = convert_long_csv(input, HUMAN_COLUMNS.len(), (*partner).into(), *source_hz, *target_hz, *window)?;
            let ds = split(&ds, *split_fraction, cfg.split_seed)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} trajectories to {}", ds.pairs.len(), out.display());
        }
    }
    Ok(())
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Hhi => "HHI",
        Stage::Hri => "HRI",
    }
}
