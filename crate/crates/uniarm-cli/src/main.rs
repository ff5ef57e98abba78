//! Command-line front end: data generation, training, preference sweeps,
//! evaluation, and adapter merging.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use uniarm_core::checkpoint::Checkpoint;
use uniarm_core::config::{derive_seed, ExperimentConfig};
use uniarm_core::datasynth::{
    generate_dataset, oracle_score, read_records, split_dataset, write_records,
};
use uniarm_core::decoding::{generate, write_generations, GenerationRecord, RewardSpec};
use uniarm_core::metrics::{
    hypervolume, mip, read_points, write_points, MethodMetrics, ParetoPoint, ReferencePoint,
};
use uniarm_core::model::{AdapterState, TokenSequence};
use uniarm_core::preference::{sweep_grid, PreferenceVector};
use uniarm_core::training::{train, write_loss_csv};

#[derive(Parser)]
#[command(
    name = "uniarm",
    about = "Preference-conditioned reward modeling: synthetic data, training, sweeps, evaluation, merging",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic preference dataset (train/val/test files).
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the config's paths.out_dir or ".").
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the reward model's adapters; writes a checkpoint and a loss CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode every sweep preference on the test prompts; writes generations,
    /// points, and Pareto plots.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute hypervolume and mean inner product for one or more points
    /// files under a shared reference point.
    Eval {
        /// Points files (one method each).
        #[arg(long = "points", num_args = 1.., required = true)]
        points: Vec<PathBuf>,
        /// Reference-point margin below the componentwise minimum.
        #[arg(long, default_value_t = 1.0)]
        margin: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collapse the adapters for one preference vector into plain weights;
    /// the merged checkpoint only decodes that preference.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated simplex weights, e.g. "0.3,0.7".
        #[arg(long)]
        alpha: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, seed, out } => cmd_gen_data(&config, seed, out),
        Command::Train { config, seed, out } => cmd_train(&config, seed, out),
        Command::Sweep {
            checkpoint,
            config,
            seed,
            out,
        } => cmd_sweep(&checkpoint, &config, seed, out),
        Command::Eval {
            points,
            margin,
            out,
        } => cmd_eval(&points, margin, out),
        Command::Merge {
            checkpoint,
            alpha,
            out,
        } => cmd_merge(&checkpoint, &alpha, out),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn resolve_out(config: Option<&ExperimentConfig>, out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out
        .or_else(|| {
            config
                .and_then(|c| c.paths.as_ref())
                .map(|p| PathBuf::from(&p.out_dir))
        })
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn worker_threads() -> Result<usize> {
    match std::env::var("UNIARM_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .with_context(|| format!("UNIARM_THREADS must be a positive integer, got {v:?}"))?;
            if n == 0 {
                bail!("UNIARM_THREADS must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}

fn cmd_gen_data(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let config = load_config(config_path)?;
    let out_dir = resolve_out(Some(&config), out)?;
    let seed = seed.unwrap_or(config.seed);
    let task = config.synth_task();
    let records = generate_dataset(&task, config.model.vocab_size, derive_seed(seed, "data"))?;
    let (train_split, val_split, test_split) = split_dataset(&records, config.split_fractions());
    write_records(&out_dir.join("train.ndjson"), &train_split)?;
    write_records(&out_dir.join("val.ndjson"), &val_split)?;
    write_records(&out_dir.join("test.ndjson"), &test_split)?;
    println!(
        "wrote {} train / {} val / {} test records to {}",
        train_split.len(),
        val_split.len(),
        test_split.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_train(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let config = load_config(config_path)?;
    let out_dir = resolve_out(Some(&config), out)?;
    let seed = seed.unwrap_or(config.seed);
    let train_path = out_dir.join("train.ndjson");
    let records = read_records(&train_path).with_context(|| {
        format!(
            "reading {} (run `uniarm gen-data` first)",
            train_path.display()
        )
    })?;

    let descriptions: Vec<&str> = config.task.descriptions.iter().map(String::as_str).collect();
    let mut checkpoint = Checkpoint::fresh(
        &config.model_config(),
        &descriptions,
        derive_seed(seed, "model"),
    )?;
    let datasets: Vec<&[_]> = (0..config.task.k).map(|_| records.as_slice()).collect();
    let history = train(
        &mut checkpoint,
        &datasets,
        &config.train_config(derive_seed(seed, "train")),
    )?;

    let ckpt_path = out_dir.join("uniarm.ckpt");
    checkpoint.save(&ckpt_path)?;
    write_loss_csv(&out_dir.join("loss.csv"), &history)?;
    let last = history.last().expect("at least one step");
    println!(
        "trained {} steps ({} adapter parameters); final combined loss {:.6}; checkpoint {}",
        history.len(),
        checkpoint.model.adapter_param_count(),
        last.combined,
        ckpt_path.display()
    );
    Ok(())
}

fn reward_spec<'a>(checkpoint: &'a Checkpoint) -> RewardSpec<'a> {
    match checkpoint.model.adapter_state() {
        AdapterState::None => RewardSpec::None,
        AdapterState::PbLora => RewardSpec::PbLora(checkpoint),
        AdapterState::MoSLora | AdapterState::Merged => RewardSpec::UniArm(checkpoint),
    }
}

fn cmd_sweep(
    checkpoint_path: &Path,
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let config = load_config(config_path)?;
    let out_dir = resolve_out(Some(&config), out)?;
    let seed = seed.unwrap_or(config.seed);
    let checkpoint = Checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
    let k = config.task.k;
    if checkpoint.k() != 0 && checkpoint.k() != k {
        bail!(
            "checkpoint has {} objectives but the config declares {k}",
            checkpoint.k()
        );
    }

    let test_path = out_dir.join("test.ndjson");
    let test_records = read_records(&test_path).with_context(|| {
        format!(
            "reading {} (run `uniarm gen-data` first)",
            test_path.display()
        )
    })?;
    let prompts: Vec<TokenSequence> = test_records
        .iter()
        .take(config.sweep.num_prompts)
        .map(|r| r.prompt.clone())
        .collect();
    if prompts.is_empty() {
        bail!("test split has no prompts");
    }

    let grid = sweep_grid(k, config.sweep.scheme)?;
    let task = config.synth_task();
    let n_workers = worker_threads()?.min(grid.len()).max(1);

    // Each sweep vector is independent; per-(vector, prompt) seeds keep the
    // output identical for any worker count.
    let mut slots: Vec<Option<(ParetoPoint, Vec<GenerationRecord>)>> = vec![None; grid.len()];
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for worker in 0..n_workers {
            let grid = &grid;
            let prompts = &prompts;
            let task = &task;
            let config = &config;
            let checkpoint = &checkpoint;
            handles.push(scope.spawn(move || -> Result<Vec<(usize, ParetoPoint, Vec<GenerationRecord>)>> {
                let mut results = Vec::new();
                for (i, alpha) in grid.iter().enumerate() {
                    if i % n_workers != worker {
                        continue;
                    }
                    let spec = reward_spec(checkpoint);
                    let mut gen_records = Vec::with_capacity(prompts.len());
                    let mut mean_q = vec![0.0f64; task.k];
                    for (j, prompt) in prompts.iter().enumerate() {
                        let decode =
                            config.decode_config(derive_seed(seed, &format!("sweep.{i}.{j}")));
                        let response =
                            generate(&checkpoint.model, &spec, prompt, alpha, &decode)?;
                        let scores: Vec<f64> =
                            (0..task.k).map(|o| oracle_score(&response, o, task)).collect();
                        for (m, s) in mean_q.iter_mut().zip(&scores) {
                            *m += s;
                        }
                        gen_records.push(GenerationRecord {
                            prompt: prompt.tokens.clone(),
                            alpha: alpha.components().to_vec(),
                            tokens: response.tokens,
                            scores,
                        });
                    }
                    for m in mean_q.iter_mut() {
                        *m /= prompts.len() as f64;
                    }
                    results.push((
                        i,
                        ParetoPoint {
                            alpha: alpha.clone(),
                            q: mean_q,
                        },
                        gen_records,
                    ));
                }
                Ok(results)
            }));
        }
        for handle in handles {
            let results = handle.join().expect("sweep worker panicked")?;
            for (i, point, gens) in results {
                slots[i] = Some((point, gens));
            }
        }
        Ok(())
    })?;

    let mut points = Vec::with_capacity(grid.len());
    let mut generations = Vec::new();
    for slot in slots {
        let (point, gens) = slot.expect("all sweep vectors processed");
        points.push(point);
        generations.extend(gens);
    }

    write_generations(&out_dir.join("generations.ndjson"), &generations)?;
    write_points(&out_dir.join("points.ndjson"), &points)?;
    fs::write(
        out_dir.join("pareto.svg"),
        plot::pareto_svg(&points, k, "preference sweep"),
    )?;
    fs::write(out_dir.join("pareto.csv"), plot::pareto_csv(&points, k))?;
    println!(
        "swept {} preference vectors x {} prompts; points and plots in {}",
        points.len(),
        prompts.len(),
        out_dir.display()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalReport {
    k: usize,
    #[serde(rename = "ref")]
    reference: Vec<f64>,
    margin: f64,
    methods: Vec<MethodMetrics>,
}

fn cmd_eval(points_files: &[PathBuf], margin: f64, out: Option<PathBuf>) -> Result<()> {
    let out_dir = resolve_out(None, out)?;
    let mut methods_points = Vec::new();
    for path in points_files {
        let pts =
            read_points(path).with_context(|| format!("reading points {}", path.display()))?;
        if pts.is_empty() {
            bail!("points file {} is empty", path.display());
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        methods_points.push((name, pts));
    }
    let k = methods_points[0].1[0].q.len();
    for (name, pts) in &methods_points {
        if pts.iter().any(|p| p.q.len() != k) {
            bail!("method {name} has inconsistent objective dimension (expected {k})");
        }
    }

    // Shared reference: componentwise minimum across every method, minus the
    // margin, so all methods are measured against the same origin.
    let mut reference = vec![f64::INFINITY; k];
    for (_, pts) in &methods_points {
        for p in pts {
            for (r, &q) in reference.iter_mut().zip(&p.q) {
                *r = r.min(q);
            }
        }
    }
    for r in reference.iter_mut() {
        *r -= margin;
    }
    let ref_point = ReferencePoint(reference.clone());

    let mut methods = Vec::new();
    for (name, pts) in &methods_points {
        let qs: Vec<Vec<f64>> = pts.iter().map(|p| p.q.clone()).collect();
        let hv = hypervolume(&qs, &ref_point)?;
        let mip_value = mip(pts)?;
        println!("{name}: hv {hv:.6} mip {mip_value:.6}");
        methods.push(MethodMetrics {
            method: name.clone(),
            k,
            reference: reference.clone(),
            hv,
            mip: mip_value,
            points: pts.clone(),
        });
    }
    let report = EvalReport {
        k,
        reference,
        margin,
        methods,
    };
    let path = out_dir.join("metrics.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!("metrics written to {}", path.display());
    Ok(())
}

fn cmd_merge(checkpoint_path: &Path, alpha: &str, out: Option<PathBuf>) -> Result<()> {
    let out_dir = resolve_out(None, out)?;
    let checkpoint = Checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
    let weights: Vec<f64> = alpha
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing preference weights {alpha:?}"))?;
    let alpha = PreferenceVector::new(weights).context("preference weights must lie on the simplex")?;
    let merged = checkpoint.merge(&alpha)?;
    let path = out_dir.join("merged.ckpt");
    merged.save(&path)?;
    println!(
        "merged checkpoint locked to alpha ({}) written to {}",
        alpha
            .components()
            .iter()
            .map(|a| a.to_string())
            .collect::<Vec<_>>()
            .join(","),
        path.display()
    );
    Ok(())
}
