use std::fs::{self, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rgbt_count::checkpoint::Checkpoint;
use rgbt_count::config::{RunConfig, Variant};
use rgbt_count::error::{Error, Result};
use rgbt_count::gradcheck::{gradcheck_model, Tolerance};
use rgbt_count::metrics::MetricReport;
use rgbt_count::model::CrowdCounter;
use rgbt_count::render::render_density;
use rgbt_count::synth::{generate_dataset, load_manifest_samples, read_manifest, Sample, SceneConfig};
use rgbt_count::train::{ablate, ablation_table, evaluate, predict_all, train, Adam};

#[derive(Parser)]
#[command(name = "rgbt-count", version, about = "RGB-T crowd counting: generate, train, evaluate, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (`key = value` lines); defaults apply to missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the ablation flags
    #[arg(long)]
    variant: Option<Variant>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg = cfg.with_variant(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with train/val/test manifests
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        train: usize,
        #[arg(long, default_value_t = 16)]
        val: usize,
        #[arg(long, default_value_t = 32)]
        test: usize,
        #[arg(long, default_value_t = 10)]
        min_people: usize,
        #[arg(long, default_value_t = 30)]
        max_people: usize,
    },
    /// Train from scratch; writes checkpoint.bin, train.log and config.txt
    Train {
        #[command(flatten)]
        common: Common,
        /// Training manifest, or a directory holding train.tsv / val.tsv
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes metrics.txt and metrics.kv
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation manifest, or a directory holding test.tsv
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every variant with a shared seed
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.tsv / val.tsv / test.tsv (or one of them)
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of all parameter gradients
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check at most this many entries per tensor
        #[arg(long)]
        per_tensor: Option<usize>,
        /// Use the tiny desk config instead of --config
        #[arg(long)]
        tiny: bool,
    },
    /// Render predicted density maps for a manifest
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Resolves `split` from a manifest file (its siblings) or a directory.
fn split_manifest(path: &Path, split: &str) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{split}.tsv"))
    } else {
        path.with_file_name(format!("{split}.tsv"))
    }
}

fn load_split(path: &Path, split: &str, required: bool) -> Result<Vec<Sample>> {
    let p = split_manifest(path, split);
    if !p.exists() {
        if required {
            return Err(Error::Config(format!("manifest {} not found", p.display())));
        }
        return Ok(Vec::new());
    }
    load_manifest_samples(&read_manifest(&p)?)
}

fn load_given(path: &Path, default_split: &str) -> Result<Vec<Sample>> {
    let p = if path.is_dir() {
        split_manifest(path, default_split)
    } else {
        path.to_path_buf()
    };
    load_manifest_samples(&read_manifest(&p)?)
}

fn write_metrics(out: &Path, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.txt"), report.table())?;
    fs::write(out.join("metrics.kv"), report.key_values())?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate {
            common,
            out,
            train,
            val,
            test,
            min_people,
            max_people,
        } => {
            let cfg = common.run_config()?;
            let scene = SceneConfig {
                height: cfg.image_size,
                width: cfg.image_size,
                min_people,
                max_people,
                ..Default::default()
            };
            let paths = generate_dataset(&out, cfg.seed, &[("train", train), ("val", val), ("test", test)], &scene)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Train { common, manifest, out } => {
            let cfg = common.run_config()?;
            let train_set = load_given(&manifest, "train")?;
            let val = load_split(&manifest, "val", false)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            let (model, mut store) = CrowdCounter::new(&cfg)?;
            let mut adam = Adam::new(&cfg.optim);
            let log_file = OpenOptions::new().create(true).append(true).open(out.join("train.log"))?;
            let mut log = BufWriter::new(log_file);
            let outcome = train(&model, &mut store, &mut adam, &train_set, &val, Some(&mut log))?;
            drop(log);
            Checkpoint::new(&cfg, &store, &adam).save(&out.join("checkpoint.bin"))?;
            println!(
                "trained {} steps{}; best val GAME(0) {}",
                outcome.steps,
                if outcome.stopped_early { " (early stop)" } else { "" },
                outcome.best_val_game0.map_or("n/a".to_string(), |v| format!("{v:.3}"))
            );
        }
        Command::Eval {
            common,
            checkpoint,
            manifest,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.model()?;
            let samples = load_given(&manifest, "test")?;
            let report = evaluate(&model, &ck.params, &samples, common.run_config()?.threads)?;
            write_metrics(&out, &report)?;
            print!("{}", report.table());
        }
        Command::Ablate { common, manifest, out } => {
            let cfg = common.run_config()?;
            let train_set = load_split(&manifest, "train", true)?;
            let val = load_split(&manifest, "val", false)?;
            let test = load_split(&manifest, "test", true)?;
            let rows = ablate(&cfg, &Variant::ALL, &train_set, &val, &test)?;
            let table = ablation_table(&rows);
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::Gradcheck {
            common,
            per_tensor,
            tiny,
        } => {
            let cfg = if tiny {
                let mut c = RunConfig::tiny();
                if let Some(s) = common.seed {
                    c.seed = s;
                }
                if let Some(v) = common.variant {
                    c = c.with_variant(v);
                }
                c
            } else {
                common.run_config()?
            };
            let report = gradcheck_model(&cfg, per_tensor, Tolerance::default())?;
            println!("{report}");
            return Ok(report.passed());
        }
        Command::Render {
            common,
            checkpoint,
            manifest,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.model()?;
            let samples = load_given(&manifest, "test")?;
            let preds = predict_all(&model, &ck.params, &samples, common.run_config()?.threads)?;
            for (i, (p, s)) in preds.iter().zip(&samples).enumerate() {
                let path = out.join(format!("density_{i:04}.pgm"));
                render_density(&p.density, &path, Some(&s.points))?;
                println!("{}\t{:.3}\t{}", path.display(), p.density.predicted_count(), s.points.len());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
