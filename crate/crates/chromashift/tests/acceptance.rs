//! Acceptance criteria, one PASS/FAIL line each.
//!
//! The 30-minute held-out run (7b) only executes when
//! `CHROMASHIFT_ACCEPT_LONG=1`; otherwise it reports DEFERRED.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use chromashift::checkpoint::Checkpoint;
use chromashift::dataset::write_pairs;
use chromashift_core::analysis::{pca_color_shift, DEFAULT_TAU};
use chromashift_core::como::AttentionMode;
use chromashift_core::cose::DeformMode;
use chromashift_core::data::{synthetic_pairs, Augment, DegradationSpec, Pair};
use chromashift_core::losses::{LossWeights, PerceptualExtractor};
use chromashift_core::metrics::{evaluate_pair, mean_metrics};
use chromashift_core::model::{Model, ModelConfig};
use chromashift_core::selftest::{self, Group, Hooks, Outcome};
use chromashift_core::train::{TrainConfig, Trainer};

type Verdict = Result<String, String>;

struct Sheet {
    failed: usize,
}

impl Sheet {
    fn line(&mut self, id: &str, title: &str, v: Verdict) {
        match v {
            Ok(d) => println!("PASS {id:<3} {title}: {d}"),
            Err(d) => {
                self.failed += 1;
                println!("FAIL {id:<3} {title}: {d}");
            }
        }
    }
}

fn group(all: &[Outcome], g: Group) -> Verdict {
    let mine: Vec<&Outcome> = all.iter().filter(|o| o.group == g).collect();
    if mine.is_empty() {
        return Err("no checks ran".into());
    }
    let bad: Vec<String> = mine
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{} ({})", o.name, o.detail))
        .collect();
    if bad.is_empty() {
        Ok(format!("{} checks", mine.len()))
    } else {
        Err(bad.join("; "))
    }
}

fn pairs(count: usize, size: usize, spec: &DegradationSpec) -> Vec<Pair> {
    synthetic_pairs(count, size, spec)
        .unwrap()
        .into_iter()
        .map(|s| s.pair)
        .collect()
}

fn identity_psnr(pairs: &[Pair]) -> f64 {
    let rows: Vec<_> = pairs.iter().map(|p| evaluate_pair(&p.input, &p.gt).unwrap()).collect();
    mean_metrics(&rows).psnr
}

fn parameter_budget() -> Verdict {
    let (_, params) = Model::build::<f32>(ModelConfig::default(), 0).map_err(|e| e.to_string())?;
    let n = params.trainable_count();
    let d = format!("{n} trainable parameters");
    if (200_000..=450_000).contains(&n) {
        Ok(d)
    } else {
        Err(d)
    }
}

/// Trains on four noise-free 64x64 pairs, without augmentation, until the
/// train set reaches 30 dB. Only optimisation steps count towards the time
/// budget.
fn overfit() -> Verdict {
    const ITERS: usize = 500;
    let spec = DegradationSpec {
        noise_sigma: 0.0,
        ..Default::default()
    };
    let set = pairs(4, 64, &spec);
    let lr = 3e-3;
    let cfg = TrainConfig {
        iterations: ITERS,
        batch_size: 4,
        patch_size: 64,
        lr,
        lr_min: lr * 0.01,
        augment: Augment::default(),
        ..Default::default()
    };
    let mut t =
        Trainer::new(ModelConfig::default(), cfg, PerceptualExtractor::fallback(0)).map_err(|e| e.to_string())?;
    let base = identity_psnr(&set);
    let (mut spent, mut best) = (Duration::ZERO, f64::NEG_INFINITY);
    while t.iteration < ITERS {
        let start = Instant::now();
        t.step(&set).map_err(|e| e.to_string())?;
        spent += start.elapsed();
        if t.iteration % 10 == 0 || t.iteration == ITERS {
            let psnr = mean_metrics(&t.evaluate(&set).map_err(|e| e.to_string())?).psnr;
            best = best.max(psnr);
            let d = format!(
                "{psnr:.2} dB after {} iterations, {:.0} s (identity {base:.2} dB)",
                t.iteration,
                spent.as_secs_f64()
            );
            if psnr >= 30.0 {
                return if spent <= Duration::from_secs(600) {
                    Ok(d)
                } else {
                    Err(d)
                };
            }
            if spent > Duration::from_secs(600) {
                return Err(format!("{d}; time budget exhausted"));
            }
        }
    }
    Err(format!(
        "best {best:.2} dB in {ITERS} iterations, {:.0} s",
        spent.as_secs_f64()
    ))
}

/// Thirty minutes of training on one synthetic set, scored on another.
fn held_out() -> Verdict {
    let train = pairs(64, 96, &DegradationSpec::default());
    let test = pairs(
        20,
        96,
        &DegradationSpec {
            seed: 1,
            ..Default::default()
        },
    );
    let budget = Duration::from_secs(30 * 60);
    let cfg = TrainConfig {
        iterations: usize::MAX,
        batch_size: 4,
        patch_size: 64,
        lr: 1e-3,
        lr_min: 1e-3,
        augment: Augment {
            hflip: true,
            rot90: true,
        },
        ..Default::default()
    };
    let mut t =
        Trainer::new(ModelConfig::default(), cfg, PerceptualExtractor::fallback(0)).map_err(|e| e.to_string())?;
    let start = Instant::now();
    while start.elapsed() < budget {
        t.step(&train).map_err(|e| e.to_string())?;
    }
    let base = identity_psnr(&test);
    let got = mean_metrics(&t.evaluate(&test).map_err(|e| e.to_string())?).psnr;
    let d = format!("{got:.2} dB vs identity {base:.2} dB after {} iterations", t.iteration);
    if got - base >= 2.0 {
        Ok(d)
    } else {
        Err(d)
    }
}

fn color_shift() -> Verdict {
    let set = pairs(20, 64, &DegradationSpec::default());
    let pca = pca_color_shift(&set, 1000, 0, DEFAULT_TAU).map_err(|e| e.to_string())?;
    let dot = pca.over_under_dot().map_err(|e| e.to_string())?;
    let d = format!("over/under dot product {dot:.4e} on {} pairs", set.len());
    if dot < 0.0 {
        Ok(d)
    } else {
        Err(d)
    }
}

/// The README states what is not reproduced, and `eval` writes the
/// per-image and mean PSNR / SSIM / RMSE-LAB table.
fn eval_protocol() -> Verdict {
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = std::fs::read_to_string(&readme).map_err(|e| format!("README: {e}"))?;
    for needle in ["23.627", "0.855", "6.105", "not reproduced"] {
        if !text.contains(needle) {
            return Err(format!("README does not mention {needle:?}"));
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("data");
    write_pairs(
        &root,
        &synthetic_pairs(3, 32, &DegradationSpec::default()).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let (_, params) = Model::build::<f32>(ModelConfig::default(), 0).map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("m.ckpt");
    Checkpoint::from_weights(ModelConfig::default(), params)
        .save(&ckpt)
        .map_err(|e| e.to_string())?;
    let report = dir.path().join("eval.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_chromashift"))
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--dataset")
        .arg(&root)
        .arg("--report")
        .arg(&report)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "eval exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    let mut rd = csv::Reader::from_path(&report).map_err(|e| e.to_string())?;
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(String::from)
        .collect();
    if header != ["image", "psnr", "ssim", "rmse_lab"] {
        return Err(format!("unexpected columns {header:?}"));
    }
    let rows: Vec<csv::StringRecord> = rd.records().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    if rows.len() != 4 || &rows[3][0] != "mean" {
        return Err(format!("expected 3 image rows and a mean row, got {}", rows.len()));
    }
    Ok("README documents the published numbers; eval emits image,psnr,ssim,rmse_lab with a mean row".into())
}

fn ablations() -> Vec<(String, ModelConfig, LossWeights)> {
    let m = ModelConfig::default;
    let l = LossWeights::default;
    let mut v = Vec::new();
    for mode in [
        DeformMode::None,
        DeformMode::Spatial,
        DeformMode::SpatialModulation,
        DeformMode::SpatialColor,
    ] {
        v.push((
            format!("deform_mode={mode:?}"),
            ModelConfig {
                deform_mode: mode,
                ..m()
            },
            l(),
        ));
    }
    v.push((
        "attention_mode=NonlocalConcat".into(),
        ModelConfig {
            attention_mode: AttentionMode::NonlocalConcat,
            ..m()
        },
        l(),
    ));
    v.push((
        "opposed_maps".into(),
        ModelConfig {
            opposed_maps: true,
            ..m()
        },
        l(),
    ));
    v.push((
        "illum_channels=3".into(),
        ModelConfig {
            illum_channels: 3,
            ..m()
        },
        l(),
    ));
    v.push((
        "share_generator=false".into(),
        ModelConfig {
            share_generator: false,
            ..m()
        },
        l(),
    ));
    v.push((
        "separate_extractors".into(),
        ModelConfig {
            separate_extractors: true,
            ..m()
        },
        l(),
    ));
    v.push(("use_ssim=false".into(), m(), LossWeights { use_ssim: false, ..l() }));
    v.push(("use_vgg=false".into(), m(), LossWeights { use_vgg: false, ..l() }));
    v.push((
        "use_pseudo=false".into(),
        m(),
        LossWeights {
            use_pseudo: false,
            ..l()
        },
    ));
    v
}

fn ablation_plumbing() -> Verdict {
    let set = pairs(2, 32, &DegradationSpec::default());
    let variants = ablations();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (name, model, loss) in &variants {
        let fail = |e: String| format!("{name}: {e}");
        let cfg = TrainConfig {
            iterations: 10,
            batch_size: 2,
            patch_size: 32,
            lr: 1e-3,
            loss: loss.clone(),
            ..Default::default()
        };
        let mut t =
            Trainer::new(model.clone(), cfg, PerceptualExtractor::fallback(0)).map_err(|e| fail(e.to_string()))?;
        t.run(&set, |_, r| {
            assert!(r.loss.is_finite() && r.grad_norm.is_finite());
            Ok(())
        })
        .map_err(|e| fail(e.to_string()))?;
        let path = dir.path().join("v.ckpt");
        let saved = Checkpoint::of(&t);
        saved.save(&path).map_err(|e| fail(e.to_string()))?;
        let back = Checkpoint::load(&path, Some(model)).map_err(|e| fail(e.to_string()))?;
        if back != saved {
            return Err(fail("checkpoint changed on reload".into()));
        }
        let rebuilt = back.model().map_err(|e| fail(e.to_string()))?;
        let a = t.enhance(&set[0].input).map_err(|e| fail(e.to_string()))?;
        let b = rebuilt
            .enhance(&back.params, &set[0].input)
            .map_err(|e| fail(e.to_string()))?;
        if a != b {
            return Err(fail("reloaded model gives a different output".into()));
        }
    }
    Ok(format!(
        "{} variants trained 10 iterations and reloaded",
        variants.len()
    ))
}

fn main() -> ExitCode {
    let mut sheet = Sheet { failed: 0 };

    let start = Instant::now();
    let mut all = Vec::new();
    let fast = (|| -> chromashift_core::Result<()> {
        all.push(selftest::conv_equivalence(&Hooks::default())?);
        all.extend(selftest::oracle_checks()?);
        all.extend(selftest::identity_checks()?);
        all.extend(selftest::metric_checks()?);
        Ok(())
    })();
    if let Err(e) = fast {
        sheet.line("1-5", "operator self-tests", Err(e.to_string()));
    }
    sheet.line("1", "deformable degeneracy", group(&all, Group::Degeneracy));
    sheet.line("2", "oracle equivalence", group(&all, Group::Oracles));
    let grad_start = Instant::now();
    let grads = selftest::gradient_checks(|_| {}).map(|g| {
        let took = grad_start.elapsed();
        let v = group(&g, Group::Gradients);
        match v {
            Ok(d) if took <= Duration::from_secs(300) => Ok(format!("{d} in {:.1} s", took.as_secs_f64())),
            Ok(d) => Err(format!("{d} but took {:.1} s", took.as_secs_f64())),
            e => e,
        }
    });
    sheet.line("3", "gradient suite", grads.unwrap_or_else(|e| Err(e.to_string())));
    sheet.line("4", "identities", group(&all, Group::Identities));
    sheet.line("5", "metric correctness", group(&all, Group::Metrics));
    sheet.line("6", "parameter budget", parameter_budget());
    sheet.line("7a", "overfit four pairs", overfit());
    if std::env::var("CHROMASHIFT_ACCEPT_LONG").as_deref() == Ok("1") {
        sheet.line("7b", "held-out 30 minute run", held_out());
    } else {
        println!("DEFERRED 7b held-out 30 minute run: set CHROMASHIFT_ACCEPT_LONG=1");
    }
    sheet.line("8", "colour-shift PCA", color_shift());
    sheet.line("9", "non-reproduction and eval protocol", eval_protocol());
    sheet.line("10", "ablation plumbing", ablation_plumbing());

    println!("{} failed, total {:.0} s", sheet.failed, start.elapsed().as_secs_f64());
    if sheet.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
