use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use p2sc_core::checkpoint::Checkpoint;
use p2sc_core::config::{Ablation, ModelConfig};
use p2sc_core::data::{half_space_parts, load_cloud, load_dataset, save_cloud, synthetic_dataset, write_dataset, Dataset, DatasetManifest, Sample, ShapeFamily};
use p2sc_core::model::{CapsuleChoice, Model};
use p2sc_core::par::Execution;
use p2sc_core::points::PointCloud;
use p2sc_core::train::{
    evaluate, evaluate_retrieval, evaluate_segmentation, prepare_samples, routing_sweep, run_training, sweep_csv, write_file, Trainer,
};
use p2sc_core::Error;

#[derive(Parser)]
#[command(name = "p2sc", version, about = "Train and evaluate point-cloud capsule networks")]
struct Cli {
    /// Run per-sample work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, checkpoint.p2sc and config.json.
    Train {
        /// Model configuration JSON; defaults to the toy preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training manifest.
        #[arg(long)]
        data: PathBuf,
        /// Optional held-out manifest evaluated after every epoch.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_parser = parse_ablation)]
        ablate: Option<Ablation>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a metrics CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset with a manifest.
    Synth {
        /// Comma-separated shape families.
        #[arg(long, value_delimiter = ',', default_value = "sphere,cube,torus,plane")]
        families: Vec<String>,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 0.01)]
        jitter: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Label two parts per cloud by the sign of x.
        #[arg(long)]
        parts: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full model loss.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        probes: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decode a cloud through its longest digit capsule.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per routing-iteration count and write a comparison CSV.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        iters: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Cls,
    Retrieval,
    Seg,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config(_) => 2,
            Error::Divergence(_) | Error::NonFinite(_) => 4,
            Error::Parse { .. } | Error::Format(_) | Error::Io { .. } | Error::Json(_) | Error::InvalidArgument(_) => 3,
            Error::Shape { .. } => 1,
        };
        Self { code, error }
    }
}

trait Stage<T> {
    /// Forces the exit code for failures of one stage (config or data loading).
    fn stage(self, code: u8) -> Result<T, Failure>;
}

impl<T> Stage<T> for p2sc_core::Result<T> {
    fn stage(self, code: u8) -> Result<T, Failure> {
        self.map_err(|error| Failure { code, error })
    }
}

const CONFIG: u8 = 2;
const DATA: u8 = 3;

fn load_config(path: Option<&Path>, classes: usize) -> Result<ModelConfig, Failure> {
    let mut cfg = match path {
        Some(p) => ModelConfig::from_path(p).stage(CONFIG)?,
        None => ModelConfig::toy(classes),
    };
    if cfg.num_classes != classes {
        log::warn!("config has {} classes, data has {classes}; using {classes}", cfg.num_classes);
        cfg.num_classes = classes;
    }
    cfg.validate().stage(CONFIG)?;
    Ok(cfg)
}

fn load_data(path: &Path, cfg: &ModelConfig) -> Result<Dataset, Failure> {
    let manifest = DatasetManifest::load(path).stage(DATA)?;
    let data = load_dataset(&manifest).stage(DATA)?;
    if data.is_empty() {
        return Err(Failure { code: DATA, error: Error::InvalidArgument(format!("{} lists no clouds", path.display())) });
    }
    data.prepared(cfg.input_points, cfg.seed).stage(DATA)
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::available()
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let exec = exec(cli.sequential);
    match cli.command {
        Command::Train { config, data, test, out, seed, epochs, ablate, resume } => {
            let mut trainer = match resume {
                Some(path) => Trainer::resume(&Checkpoint::load(&path).stage(DATA)?, exec)?,
                None => {
                    let classes = DatasetManifest::load(&data).stage(DATA)?.classes.len();
                    let mut cfg = load_config(config.as_deref(), classes)?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    if let Some(a) = ablate {
                        cfg = cfg.ablation(a).stage(CONFIG)?;
                    }
                    Trainer::new(Model::new(cfg).stage(CONFIG)?, exec)
                }
            };
            if let Some(e) = epochs {
                trainer.model.config.optimizer.epochs = e;
            }
            let cfg = trainer.model.config.clone();
            let train = prepare_samples(&trainer.model, &load_data(&data, &cfg)?, exec).stage(DATA)?;
            let test = match test {
                Some(p) => Some(prepare_samples(&trainer.model, &load_data(&p, &cfg)?, exec).stage(DATA)?),
                None => None,
            };
            write_file(&out.join("config.json"), &serde_json::to_string_pretty(&cfg).map_err(Error::from)?)?;
            let outcome = run_training(&mut trainer, &train, test.as_deref(), Some(&out))?;
            if let Some(acc) = outcome.final_test_accuracy {
                println!("test accuracy {acc:.4}");
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { ckpt, data, task, out } => {
            let model = Checkpoint::load(&ckpt).stage(DATA)?.to_model().stage(CONFIG)?;
            if matches!(task, Task::Seg) && model.segmentation.is_none() {
                return Err(Failure { code: CONFIG, error: Error::Config("checkpoint has no segmentation head".into()) });
            }
            let samples = prepare_samples(&model, &load_data(&data, &model.config)?, exec).stage(DATA)?;
            let mut csv = String::from("metric,value\n");
            match task {
                Task::Cls => {
                    let e = evaluate(&model, &samples, exec)?;
                    csv.push_str(&format!("accuracy,{:.6}\nsamples,{}\n", e.accuracy, samples.len()));
                    println!("accuracy {:.4} over {} clouds", e.accuracy, samples.len());
                }
                Task::Retrieval => {
                    let r = evaluate_retrieval(&model, &samples, exec)?;
                    csv.push_str(&format!("map,{:.6}\nqueries,{}\nskipped,{}\n", r.map, r.queries, r.skipped));
                    let mut pr = String::from("rank,recall,precision\n");
                    for (k, (rec, prec)) in r.pr_curve.iter().enumerate() {
                        pr.push_str(&format!("{},{rec:.6},{prec:.6}\n", k + 1));
                    }
                    write_file(&pr_path(&out), &pr)?;
                    println!("mAP {:.4} over {} queries", r.map, r.queries);
                }
                Task::Seg => {
                    let s = evaluate_segmentation(&model, &samples, Some(CapsuleChoice::Predicted), exec)?;
                    csv.push_str(&format!("mean_iou,{:.6}\n", s.mean_iou));
                    for (p, v) in s.per_part.iter().enumerate() {
                        csv.push_str(&format!("part_{p}_iou,{v:.6}\n"));
                    }
                    println!("mIoU {:.4}", s.mean_iou);
                }
            }
            write_file(&out, &csv)?;
        }
        Command::Synth { families, per_class, points, jitter, seed, parts, out } => {
            let families: Vec<ShapeFamily> = families.iter().map(|f| f.trim().parse()).collect::<p2sc_core::Result<_>>().stage(CONFIG)?;
            let mut data = synthetic_dataset(&families, per_class, points, jitter, seed).stage(CONFIG)?;
            if parts {
                for s in &mut data.samples {
                    s.cloud = half_space_parts(&s.cloud)?;
                }
            }
            let manifest = write_dataset(&data, &out)?;
            println!("wrote {} clouds to {}", manifest.len(), out.display());
        }
        Command::Gradcheck { config, probes, eps, tolerance, seed } => {
            let mut cfg = load_config(config.as_deref(), 4)?;
            cfg.seed = seed;
            let model = Model::new(cfg).stage(CONFIG)?;
            let data = synthetic_dataset(&[ShapeFamily::Torus], 1, model.config.input_points, 0.01, seed)?.prepared(model.config.input_points, seed)?;
            let x = model.prepare(&data.samples[0].cloud)?;
            let (err, at) = model.gradient_check(&x, 0, probes, eps)?;
            println!("worst relative error {err:.3e} at {at}");
            if err > tolerance {
                return Err(Failure { code: 1, error: Error::InvalidArgument(format!("gradient error {err:e} exceeds {tolerance:e}")) });
            }
        }
        Command::Reconstruct { ckpt, input, out } => {
            let model = Checkpoint::load(&ckpt).stage(DATA)?.to_model().stage(CONFIG)?;
            let cloud = load_cloud(&input).stage(DATA)?;
            let one = Dataset { classes: vec![String::new()], samples: vec![Sample { id: input.display().to_string(), cloud, label: 0 }] };
            let cloud = one.prepared(model.config.input_points, model.config.seed)?.samples.remove(0).cloud;
            let x = model.prepare(&cloud)?;
            let flat = model.reconstruct(&x, CapsuleChoice::Predicted).stage(CONFIG)?;
            let decoded = PointCloud::new(flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())?;
            save_cloud(&out, &decoded)?;
            println!("wrote {} points to {}", decoded.len(), out.display());
        }
        Command::Sweep { config, data, test, iters, epochs, out } => {
            let classes = DatasetManifest::load(&data).stage(DATA)?.classes.len();
            let mut cfg = load_config(config.as_deref(), classes)?;
            if let Some(e) = epochs {
                cfg.optimizer.epochs = e;
            }
            let base = Model::new(cfg).stage(CONFIG)?;
            let train = prepare_samples(&base, &load_data(&data, &base.config)?, exec).stage(DATA)?;
            let test = prepare_samples(&base, &load_data(&test, &base.config)?, exec).stage(DATA)?;
            let rows = routing_sweep(&base, &iters, &train, &test, exec)?;
            write_file(&out, &sweep_csv(&rows))?;
            print!("{}", sweep_csv(&rows));
        }
    }
    Ok(())
}

fn pr_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "metrics".into());
    out.with_file_name(format!("{stem}_pr.csv"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
