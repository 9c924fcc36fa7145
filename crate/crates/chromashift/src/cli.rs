//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chromashift_core::analysis::{pca_color_shift, DEFAULT_TAU};
use chromashift_core::data::{synthetic_pairs, DegradationSpec, Pair};
use chromashift_core::metrics::evaluate_pair;
use chromashift_core::selftest::{self, Hooks};
use chromashift_core::train::Trainer;
use clap::{CommandFactory, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, CONFIG_ENV};
use crate::dataset::{list_images, scan_dataset, write_pairs};
use crate::error::{Error, Result};
use crate::io::{load_image, quantize, save_image};
use crate::report::{write_eval, write_shift, TrainLog};

#[derive(Parser, Debug)]
#[command(name = "chromashift", version, about = "Mixed over-/under-exposure correction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from a TOML run config.
    Train {
        /// Run config; defaults to $CHROMASHIFT_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train.iterations`.
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from a checkpoint of the same model config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance one image or every image of a directory.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output directory; files keep their stem and become PNG.
        #[arg(long)]
        output: PathBuf,
    },
    /// Per-image and mean PSNR / SSIM / RMSE-LAB on a paired dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Tab-separated `input<TAB>gt` list relative to the dataset root.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Reject checkpoints whose model config differs from this run config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score the float output instead of its 8-bit PNG quantisation.
        #[arg(long)]
        no_quantize: bool,
    },
    /// PCA of input-minus-reference colour differences.
    AnalyzeShift {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Pixels sampled per image.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Point CSV; the summary goes next to it as JSON.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
    },
    /// Operator oracles, identities, metrics and gradient checks.
    Selftest {
        /// Debug hook: corrupt one deformable-convolution kernel tap.
        #[arg(long, hide = true)]
        perturb_kernel: Option<f32>,
    },
    /// Write a synthetic mixed-exposure dataset (`input/`, `gt/`).
    Synthesize {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train {
            config,
            seed,
            iterations,
            resume,
        } => {
            let Some(path) = config.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from)) else {
                let mut c = Cli::command();
                let usage = c.find_subcommand_mut("train").expect("train").render_usage();
                eprintln!("error: no config given (use --config or set {CONFIG_ENV})\n\n{usage}");
                return Ok(2);
            };
            let mut cfg = RunConfig::load(&path)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            cfg.validate(&path)?;
            train(&cfg, resume.as_deref())?;
            Ok(0)
        }
        Command::Enhance {
            checkpoint,
            input,
            output,
        } => {
            let n = enhance(&checkpoint, &input, &output)?;
            println!("wrote {n} image(s) to {}", output.display());
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            dataset,
            manifest,
            report,
            config,
            no_quantize,
        } => {
            let expected = config.map(|p| RunConfig::load(&p)).transpose()?.map(|c| c.model);
            let ck = Checkpoint::load(&checkpoint, expected.as_ref())?;
            let model = ck.model()?;
            let ds = scan_dataset(&dataset, manifest.as_deref())?;
            let names: Vec<String> = ds.records.iter().map(|r| r.name()).collect();
            let mut rows = Vec::new();
            for pair in ds.load()? {
                let mut out = model.enhance(&ck.params, &pair.input)?;
                if !no_quantize {
                    out = quantize(&out)?;
                }
                rows.push(evaluate_pair(&out, &pair.gt)?);
            }
            let mean = write_eval(&report, &names, &rows)?;
            println!(
                "images {}  psnr {:.4}  ssim {:.4}  rmse_lab {:.4}",
                rows.len(),
                mean.psnr,
                mean.ssim,
                mean.rmse_lab
            );
            Ok(0)
        }
        Command::AnalyzeShift {
            dataset,
            manifest,
            samples,
            out,
            seed,
            tau,
        } => {
            if samples == 0 {
                return Err(Error::Config {
                    path: out,
                    message: "--samples must be positive".into(),
                });
            }
            let pairs = scan_dataset(&dataset, manifest.as_deref())?.load()?;
            let pca = pca_color_shift(&pairs, samples, seed, tau)?;
            let json = out.with_extension("json");
            let s = write_shift(&out, &json, &pca)?;
            println!("points {}  rank {}  eigenvalues {:?}", s.points, s.rank, s.eigenvalues);
            for m in &s.label_means {
                println!(
                    "{:>6}: n={} mean=({:.5}, {:.5})",
                    m.label, m.count, m.mean[0], m.mean[1]
                );
            }
            match s.over_under_dot {
                Some(d) => println!("over/under mean dot product {d:.6e}"),
                None => println!("over/under mean dot product undefined (a label has no pixels)"),
            }
            Ok(0)
        }
        Command::Selftest { perturb_kernel } => {
            let hooks = Hooks {
                kernel_perturbation: perturb_kernel.unwrap_or(0.0),
            };
            let start = Instant::now();
            let results = selftest::run(&hooks, |o| {
                let tag = if o.passed { "PASS" } else { "FAIL" };
                println!("{tag} {:<44} {}", o.name, o.detail);
            })?;
            let failed = results.iter().filter(|o| !o.passed).count();
            println!(
                "{} checks, {} failed, {:.1}s",
                results.len(),
                failed,
                start.elapsed().as_secs_f64()
            );
            Ok(if failed == 0 { 0 } else { 1 })
        }
        Command::Synthesize { out, count, size, seed } => {
            let spec = DegradationSpec {
                seed,
                ..DegradationSpec::default()
            };
            let pairs = synthetic_pairs(count, size, &spec)?;
            let ds = write_pairs(&out, &pairs)?;
            println!("wrote {} pairs to {}", ds.len(), out.display());
            Ok(0)
        }
    }
}

fn training_pairs(cfg: &RunConfig) -> Result<(Vec<Pair>, Vec<Pair>)> {
    let d = &cfg.data;
    let synth = |count: usize, seed: u64| -> Result<Vec<Pair>> {
        let spec = DegradationSpec {
            seed,
            ..d.synthetic.degradation.clone()
        };
        Ok(synthetic_pairs(count, d.synthetic.size, &spec)?
            .into_iter()
            .map(|p| p.pair)
            .collect())
    };
    let train = match &d.root {
        Some(root) => scan_dataset(root, d.manifest.as_deref())?.load()?,
        None => synth(d.synthetic.count, d.synthetic.degradation.seed)?,
    };
    let val = match (&d.val_root, &d.root) {
        (Some(root), _) => scan_dataset(root, d.val_manifest.as_deref())?.load()?,
        (None, None) => synth(d.synthetic.val_count, d.synthetic.degradation.seed.wrapping_add(1))?,
        (None, Some(_)) => Vec::new(),
    };
    if train.is_empty() {
        return Err(Error::Dataset("no training pairs".into()));
    }
    Ok((train, val))
}

/// Runs a training job, writing `config.toml`, `train_log.csv`, periodic
/// `ckpt_NNNNNN.ckpt` files and `final.ckpt` under the output directory.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<Trainer> {
    let (pairs, val) = training_pairs(cfg)?;
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.perceptual_extractor()?)?;
    if let Some(p) = resume {
        let ck = Checkpoint::load(p, Some(&cfg.model))?;
        ck.model()?;
        trainer.params = ck.params;
        trainer.adam = ck.adam;
        trainer.iteration = ck.iteration as usize;
        trainer.rng = ck.rng.restore();
    }
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let echo = dir.join("config.toml");
    std::fs::write(&echo, cfg.to_toml()).map_err(Error::io(&echo))?;
    let mut log = TrainLog::create(&dir.join("train_log.csv"))?;
    let (total, every, keep) = (
        cfg.train.iterations,
        cfg.train.log_interval.max(1),
        cfg.train.checkpoint_interval,
    );
    let start = Instant::now();
    let mut failure = None;
    let res = trainer.run(&pairs, |t, r| {
        let last = r.iteration == total;
        if r.iteration % every == 0 || last {
            let val_psnr = if val.is_empty() {
                None
            } else {
                let rows = t.evaluate(&val)?;
                Some(rows.iter().map(|m| m.psnr).sum::<f64>() / rows.len() as f64)
            };
            if let Err(e) = log.row(r, val_psnr) {
                failure = Some(e);
                return Err(chromashift_core::error::Error::Invalid("log write failed".into()));
            }
            let v = val_psnr.map(|v| format!(" val_psnr={v:.3}")).unwrap_or_default();
            eprintln!(
                "[{:>6}/{total}] {}{v} ({:.0}s)",
                r.iteration,
                r.loss,
                start.elapsed().as_secs_f64()
            );
        }
        if keep > 0 && r.iteration % keep == 0 && !last {
            let p = dir.join(format!("ckpt_{:06}.ckpt", r.iteration));
            if let Err(e) = Checkpoint::of(t).save(&p) {
                failure = Some(e);
                return Err(chromashift_core::error::Error::Invalid(
                    "checkpoint write failed".into(),
                ));
            }
        }
        Ok(())
    });
    if let Some(e) = failure {
        return Err(e);
    }
    res?;
    Checkpoint::of(&trainer).save(&dir.join("final.ckpt"))?;
    Ok(trainer)
}

fn enhance(checkpoint: &Path, input: &Path, output: &Path) -> Result<usize> {
    let ck = Checkpoint::load(checkpoint, None)?;
    let model = ck.model()?;
    let files = if input.is_dir() {
        let f = list_images(input)?;
        if f.is_empty() {
            return Err(Error::Dataset(format!("{}: no images", input.display())));
        }
        f
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(Error::Dataset(format!(
            "{}: no such file or directory",
            input.display()
        )));
    };
    std::fs::create_dir_all(output).map_err(Error::io(output))?;
    for f in &files {
        let img = load_image(f)?;
        let out = model.enhance(&ck.params, &img)?;
        let stem = f.file_stem().unwrap_or_default().to_string_lossy();
        save_image(&out, &output.join(format!("{stem}.png")))?;
    }
    Ok(files.len())
}
