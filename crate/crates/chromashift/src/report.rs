//! CSV and JSON outputs.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use chromashift_core::analysis::ShiftPca;
use chromashift_core::losses::LossBreakdown;
use chromashift_core::metrics::{mean_metrics, ImageMetrics};
use chromashift_core::train::StepReport;
use serde::Serialize;

use crate::error::{Error, Result};

fn create(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let f = File::create(path).map_err(Error::io(path))?;
    Ok(csv::Writer::from_writer(f))
}

/// Fixed-precision text; `inf` for the PSNR of identical images.
fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.6}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub struct TrainLog {
    out: csv::Writer<File>,
}

impl TrainLog {
    pub const HEADER: [&'static str; 10] = [
        "iteration",
        "lr",
        "total",
        "pseudo",
        "l1",
        "cos",
        "ssim",
        "vgg",
        "grad_norm",
        "val_psnr",
    ];

    pub fn create(path: &Path) -> Result<Self> {
        let mut out = create(path)?;
        out.write_record(Self::HEADER)?;
        Ok(Self { out })
    }

    pub fn row(&mut self, r: &StepReport, val_psnr: Option<f64>) -> Result<()> {
        let LossBreakdown {
            pseudo,
            l1,
            cos,
            ssim,
            vgg,
            total,
        } = r.loss;
        self.out.write_record([
            r.iteration.to_string(),
            format!("{:.6e}", r.lr),
            num(total),
            opt(pseudo),
            opt(l1),
            opt(cos),
            opt(ssim),
            opt(vgg),
            num(r.grad_norm),
            opt(val_psnr),
        ])?;
        self.out.flush().map_err(|e| Error::Csv(e.into()))
    }
}

/// One row per image, then a `mean` row.
pub fn write_eval(path: &Path, names: &[String], rows: &[ImageMetrics]) -> Result<ImageMetrics> {
    let mut out = create(path)?;
    out.write_record(["image", "psnr", "ssim", "rmse_lab"])?;
    for (n, m) in names.iter().zip(rows) {
        out.write_record([n.clone(), num(m.psnr), num(m.ssim), num(m.rmse_lab)])?;
    }
    let mean = mean_metrics(rows);
    out.write_record(["mean".into(), num(mean.psnr), num(mean.ssim), num(mean.rmse_lab)])?;
    out.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(mean)
}

#[derive(Serialize)]
pub struct ShiftSummary {
    pub points: usize,
    pub rank: usize,
    pub eigenvalues: [f64; 3],
    pub components: [[f64; 3]; 2],
    pub centre: [f64; 3],
    pub label_means: Vec<LabelSummary>,
    /// Dot product of the over- and under-exposed mean projections.
    pub over_under_dot: Option<f64>,
}

#[derive(Serialize)]
pub struct LabelSummary {
    pub label: &'static str,
    pub count: usize,
    pub mean: [f64; 2],
}

impl ShiftSummary {
    pub fn of(pca: &ShiftPca) -> Self {
        Self {
            points: pca.points.len(),
            rank: pca.rank,
            eigenvalues: pca.eigenvalues,
            components: pca.components,
            centre: pca.centre,
            label_means: pca
                .label_means
                .iter()
                .map(|m| LabelSummary {
                    label: m.label.as_str(),
                    count: m.count,
                    mean: m.mean,
                })
                .collect(),
            over_under_dot: pca.over_under_dot().ok(),
        }
    }
}

/// `x,y,label` points plus a JSON summary.
pub fn write_shift(csv_path: &Path, json_path: &Path, pca: &ShiftPca) -> Result<ShiftSummary> {
    let mut out = create(csv_path)?;
    out.write_record(["x", "y", "label"])?;
    for p in &pca.points {
        out.write_record([
            format!("{:.9}", p.x),
            format!("{:.9}", p.y),
            p.label.as_str().to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::Csv(e.into()))?;
    let summary = ShiftSummary::of(pca);
    let mut f = File::create(json_path).map_err(Error::io(json_path))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f).map_err(Error::io(json_path))?;
    Ok(summary)
}
