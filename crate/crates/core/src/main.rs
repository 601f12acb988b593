use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mfn::commands::{Task, 
    cmd_benchmark, cmd_classify, cmd_eval, cmd_infer, cmd_synth, cmd_train, load_config, load_model_dir,
    BenchmarkOptions, CliError, Dataset, InferOptions, MaskSpec, RunConfig, SynthOptions,
};
use mfn::engine::Schedule;
use mfn::layouts::Region;

#[derive(Parser)]
#[command(name = "mfn", version, about = "Memory factor networks with proactive message passing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    Synth {
        kind: DatasetArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 8000)]
        rate: u32,
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
    },
    /// Train factor payloads from a directory of examples.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        hidden_p: Option<usize>,
        #[arg(long)]
        subsample_prob: Option<f64>,
        #[arg(long)]
        factor_weight: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct an image or spectrogram from partial evidence.
    Infer {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Gray image whose zero pixels carry no evidence.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Rectangle x,y,w,h with no evidence; repeatable.
        #[arg(long, value_parser = parse_region)]
        erase: Vec<Region>,
        /// Erase a random connected blob of this many pixels at the center.
        #[arg(long)]
        blob: Option<usize>,
        /// Spectrogram frames start:end with no evidence.
        #[arg(long, value_parser = parse_range)]
        drop_frames: Option<(usize, usize)>,
        #[arg(long)]
        original: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Per-iteration cost trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Rerun from the first pass's votes with this evidence weight.
        #[arg(long, num_args = 0..=1, default_missing_value = "0.01")]
        two_pass: Option<f64>,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Classify digit images with a trained hierarchy.
    Classify {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Restore stored images from noisy, partly erased copies.
    Benchmark {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Gaussian noise standard deviation on the 0-255 scale.
        #[arg(long, default_value_t = 40.0)]
        noise: f64,
        #[arg(long, default_value_t = 144)]
        blob: usize,
        #[arg(long, default_value_t = 1.0)]
        tolerance: f64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Compare a reconstruction with the original image.
    Eval {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        reconstruction: PathBuf,
        #[arg(long, value_parser = parse_region)]
        region: Option<Region>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Textures,
    Faces,
    Digits,
    Music,
}

/// Inference settings; unset flags keep the model's configuration.
#[derive(Args)]
struct Knobs {
    /// Run config whose engine and weight settings replace the model's.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    evidence_weight: Option<f64>,
    /// serial or simul:<fraction>
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<Schedule>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_rollback: bool,
    #[arg(long)]
    max_iterations: Option<usize>,
}

impl Knobs {
    fn resolve(&self, model_dir: &std::path::Path) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => load_model_dir(model_dir)?.config,
        };
        if let Some(w) = self.evidence_weight {
            cfg.evidence_weight = w;
        }
        if let Some(s) = self.schedule {
            cfg.engine.schedule = s;
        }
        if let Some(l) = self.lambda {
            cfg.engine.subspace.lambda = l;
        }
        if self.alpha.is_some() {
            cfg.engine.subspace.alpha = self.alpha;
        }
        if let Some(s) = self.seed {
            cfg.engine.seed = s;
        }
        if self.no_rollback {
            cfg.engine.rollback = false;
        }
        if self.max_iterations.is_some() {
            cfg.engine.max_iterations = self.max_iterations;
        }
        Ok(cfg)
    }
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    if s == "serial" {
        return Ok(Schedule::Serial);
    }
    let f = s
        .strip_prefix("simul:")
        .ok_or_else(|| format!("expected serial or simul:<fraction>, got {s:?}"))?;
    let fraction: f64 = f.parse().map_err(|_| format!("bad fraction {f:?}"))?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(format!("fraction {fraction} outside (0, 1]"));
    }
    Ok(Schedule::Simultaneous { fraction })
}

fn parse_region(s: &str) -> Result<Region, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad region {s:?}, expected x,y,w,h")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x0, y0, w, h] => Ok(Region { x0, y0, w, h }),
        _ => Err(format!("bad region {s:?}, expected x,y,w,h")),
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected start:end, got {s:?}"))?;
    let a: usize = a.parse().map_err(|_| format!("bad start {a:?}"))?;
    let b: usize = b.parse().map_err(|_| format!("bad end {b:?}"))?;
    if a > b {
        return Err(format!("empty range {s:?}"));
    }
    Ok((a, b))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            kind,
            out,
            count,
            seed,
            width,
            height,
            rate,
            seconds,
        } => {
            let kind = match kind {
                DatasetArg::Textures => Dataset::Textures,
                DatasetArg::Faces => Dataset::Faces,
                DatasetArg::Digits => Dataset::Digits,
                DatasetArg::Music => Dataset::Music,
            };
            let o = SynthOptions {
                count,
                seed,
                width,
                height,
                rate,
                seconds,
            };
            let paths = cmd_synth(kind, &out, &o)?;
            println!("wrote {} files to {}", paths.len(), out.display());
        }
        Command::Train {
            config,
            train_dir,
            model_dir,
            hidden_p,
            subsample_prob,
            factor_weight,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if hidden_p.is_some() {
                cfg.factor.hidden_p = hidden_p;
            }
            if let Some(p) = subsample_prob {
                cfg.factor.subsample_prob = p;
            }
            if let Some(w) = factor_weight {
                cfg.factor_weight = w;
            }
            if let Some(s) = seed {
                cfg.factor.seed = s;
                cfg.engine.seed = s;
            }
            let s = cmd_train(&cfg, &train_dir, &model_dir)?;
            for d in &s.factors {
                println!(
                    "factor {:>4} {:<10} width {:>5} rows {:>6}{}{}",
                    d.factor,
                    d.group,
                    d.width,
                    d.rows,
                    d.relative_residual.map(|r| format!(" residual {r:.3e}")).unwrap_or_default(),
                    d.top_eigenvalue.map(|e| format!(" top eigenvalue {e:.4e} filled {}", d.filled)).unwrap_or_default(),
                );
            }
            println!("trained {} payload(s) from {} samples into {}", s.payloads, s.samples, model_dir.display());
        }
        Command::Infer {
            model_dir,
            input,
            output,
            mask,
            erase,
            blob,
            drop_frames,
            original,
            metrics,
            trace,
            two_pass,
            knobs,
        } => {
            let mut cfg = knobs.resolve(&model_dir)?;
            cfg.engine.trace |= trace.is_some();
            let opts = InferOptions {
                mask: MaskSpec {
                    mask_image: mask,
                    erase,
                    blob,
                    blob_seed: cfg.engine.seed,
                    drop_frames,
                },
                original,
                output,
                metrics,
                trace,
                second_pass_weight: two_pass,
            };
            let out = cmd_infer(&model_dir, Some(&cfg), &input, &opts)?;
            let m = &out.metrics;
            println!(
                "iterations {} opinion updates {} rollbacks {} cost ({}, {:.6e})",
                m.iterations, m.opinion_updates, m.rollbacks, out.result.tuple.abstain_count, out.result.tuple.active_cost
            );
            if opts.original.is_some() && out.task == Task::Spectrogram {
                println!("mse {:.6e}", m.mse);
            } else if opts.original.is_some() {
                println!(
                    "mse {:.6e} l1 total {} l1 per pixel-channel {:.4} perfect {}",
                    m.mse, m.l1_total, m.l1_per_pixel_channel, m.perfect_restore
                );
            }
            println!("wrote {}", opts.output.display());
            if !m.converged {
                return Err(CliError::NonConverged(m.iterations));
            }
        }
        Command::Classify {
            model_dir,
            input_dir,
            output,
            jobs,
            knobs,
        } => {
            let cfg = knobs.resolve(&model_dir)?;
            let s = cmd_classify(&model_dir, Some(&cfg), &input_dir, &output, jobs)?;
            match s.accuracy {
                Some(a) => println!("accuracy {:.4} over {} images", a, s.rows.len()),
                None => println!("classified {} unlabeled images", s.rows.len()),
            }
            println!(
                "mean iterations {:.2} mean opinion updates {:.2}",
                s.mean_iterations, s.mean_opinion_updates
            );
        }
        Command::Benchmark {
            model_dir,
            images,
            output,
            trials,
            noise,
            blob,
            tolerance,
            jobs,
            knobs,
        } => {
            let cfg = knobs.resolve(&model_dir)?;
            let opts = BenchmarkOptions {
                trials,
                seed: cfg.engine.seed,
                noise,
                blob,
                tolerance,
                jobs,
            };
            let s = cmd_benchmark(&model_dir, Some(&cfg), &images, &opts, &output)?;
            println!(
                "{} trials: perfect {:.3} within tolerance {:.3} mean L1 {:.2} ({:.4} per pixel-channel) rollback rate {:.4}",
                s.trials,
                s.perfect_fraction,
                s.within_tolerance_fraction,
                s.mean_l1_total,
                s.mean_l1_per_pixel_channel,
                s.rollback_rate
            );
        }
        Command::Eval {
            original,
            reconstruction,
            region,
            output,
        } => {
            let m = cmd_eval(&original, &reconstruction, region, output.as_deref())?;
            println!(
                "mse {:.6e} l1 total {} l1 per pixel-channel {:.4}",
                m.mse, m.l1_total, m.l1_per_pixel_channel
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("MFN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // the global pool can only be configured once; failure means it already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
