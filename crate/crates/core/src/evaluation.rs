//! Benchmark harness over a manifest, plus single-image inference.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CrrnError, Result};
use crate::image_model::{load_image, resize, save_image, GradientMap, ImagePlane};
use crate::io_util::write_atomic;
use crate::metrics::{evaluate_pair, loss_si, MetricReport, MetricRow, SsimConfig};
use crate::model::{Ablation, Crrn};
use crate::synthesis::{DatasetManifest, MixtureTriplet};
use crate::training::Checkpoint;

pub const METRICS_FILE: &str = "metrics.csv";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const PREDICTIONS_DIR: &str = "predictions";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub manifest: PathBuf,
    pub ssim: SsimConfig,
    pub ablation: Ablation,
    pub out: PathBuf,
    /// Write per-image background / reflection PNGs under `out/predictions`.
    pub emit_predictions: bool,
    /// Score a stand-in that returns the ground-truth background.
    pub oracle_stub: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            manifest: PathBuf::from("data"),
            ssim: SsimConfig::default(),
            ablation: Ablation::Full,
            out: PathBuf::from("eval"),
            emit_predictions: false,
            oracle_stub: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.ssim.validate()?;
        if !self.manifest.exists() {
            return Err(CrrnError::NotFound(self.manifest.clone()));
        }
        match &self.checkpoint {
            Some(p) if !p.exists() => Err(CrrnError::NotFound(p.clone())),
            None if !self.oracle_stub => Err(CrrnError::Config(
                "evaluation needs a checkpoint (or the oracle stub)".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Source of background / reflection estimates.
#[derive(Clone, Debug)]
pub enum Predictor {
    Model { model: Crrn, ablation: Ablation },
    /// Returns the stored background and reflection unchanged.
    Oracle,
}

impl Predictor {
    pub fn predict(&self, t: &MixtureTriplet) -> Result<(ImagePlane, ImagePlane)> {
        match self {
            Predictor::Model { model, ablation } => {
                let p = model.ablation_forward(&t.mixture, *ablation)?;
                Ok((p.background, p.reflection))
            }
            Predictor::Oracle => Ok((t.background.clone(), t.reflection.clone())),
        }
    }
}

/// Per-triplet rows for `predictor` plus the `B* = I` baseline.
pub fn evaluate_triplets(predictor: &Predictor, triplets: &[MixtureTriplet], cfg: &SsimConfig) -> Result<MetricReport> {
    evaluate_with(predictor, triplets, cfg, |_, _, _| Ok(()))
}

fn evaluate_with(
    predictor: &Predictor,
    triplets: &[MixtureTriplet],
    cfg: &SsimConfig,
    sink: impl Fn(&MixtureTriplet, &ImagePlane, &ImagePlane) -> Result<()> + Sync,
) -> Result<MetricReport> {
    let scored = triplets
        .par_iter()
        .map(|t| {
            let (background, reflection) = predictor.predict(t)?;
            sink(t, &background, &reflection)?;
            let row = evaluate_pair(&t.id, &t.mixture, &t.background, &background, &t.mask, cfg)?;
            let base = evaluate_pair(&t.id, &t.mixture, &t.background, &t.mixture, &t.mask, cfg)?;
            Ok((row, base))
        })
        .collect::<Result<Vec<(MetricRow, MetricRow)>>>()?;
    let (rows, base): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    Ok(MetricReport::new(rows).with_baseline_rows(&base))
}

/// Load the manifest and checkpoint named by `cfg`, score every entry and
/// write `metrics.csv` and `aggregate.json` under `cfg.out`.
pub fn evaluate(cfg: &EvalConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(&cfg.manifest)?;
    for e in &manifest.entries {
        e.resolution().require_network_compatible().map_err(|err| {
            CrrnError::Dimension(format!("manifest entry {}: {err}", e.id))
        })?;
    }
    let predictor = match (&cfg.checkpoint, cfg.oracle_stub) {
        (_, true) => Predictor::Oracle,
        (Some(path), false) => Predictor::Model {
            model: Checkpoint::load(path)?.model()?,
            ablation: cfg.ablation,
        },
        (None, false) => unreachable!("validated above"),
    };
    let triplets = manifest.load_all()?;
    let pred_dir = cfg.out.join(PREDICTIONS_DIR);
    if cfg.emit_predictions {
        fs::create_dir_all(&pred_dir).map_err(|e| CrrnError::io(&pred_dir, e))?;
    }
    let report = evaluate_with(&predictor, &triplets, &cfg.ssim, |t, b, r| {
        if cfg.emit_predictions {
            save_image(b, pred_dir.join(format!("{}_background.png", t.id)))?;
            save_image(r, pred_dir.join(format!("{}_reflection.png", t.id)))?;
        }
        Ok(())
    })?;
    write_report(&report, &cfg.out)?;
    Ok(report)
}

pub fn write_report(report: &MetricReport, out: &Path) -> Result<()> {
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_atomic(&out.join(METRICS_FILE), &csv)?;
    let mut json = serde_json::to_string_pretty(&report.aggregate_json()).expect("aggregate serialises");
    json.push('\n');
    write_atomic(&out.join(AGGREGATE_FILE), json.as_bytes())
}

/// Mean gradient loss of the gradient network on `triplets`, and of the
/// do-nothing estimate that takes the mixture's own gradient.
pub fn gradient_losses(model: &crate::gin::Gin, triplets: &[MixtureTriplet], cfg: &SsimConfig) -> Result<(f64, f64)> {
    let pairs = triplets
        .par_iter()
        .map(|t| {
            let pred = model.forward(&t.mixture)?.gradient;
            let own = crate::image_model::gradient_magnitude(&t.mixture);
            Ok((
                loss_si(&t.background_gradient, &pred, cfg)?.value,
                loss_si(&t.background_gradient, &own, cfg)?.value,
            ))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let n = pairs.len().max(1) as f64;
    Ok((
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

pub const BACKGROUND_FILE: &str = "background.png";
pub const REFLECTION_FILE: &str = "reflection.png";
pub const GRADIENT_FILE: &str = "gradient.png";

#[derive(Clone, Debug)]
pub struct InferOutputs {
    pub background: PathBuf,
    pub reflection: PathBuf,
    pub gradient: PathBuf,
}

/// Run `model` on one image. With `auto_resize` an incompatible input is
/// resized to the nearest multiple of 32 and the outputs back again.
pub fn infer_image(model: &Crrn, image: &ImagePlane, auto_resize: bool) -> Result<(ImagePlane, ImagePlane, GradientMap)> {
    let rgb = image.to_rgb();
    let res = rgb.resolution();
    if res.is_network_compatible() {
        let p = model.predict(&rgb)?;
        return Ok((p.background, p.reflection, p.gradient));
    }
    if !auto_resize {
        return Err(CrrnError::Dimension(format!(
            "input {res} is not divisible by 32; resize it (e.g. to {}) or enable auto-resize",
            res.nearest_network_compatible()
        )));
    }
    let p = model.predict(&resize(&rgb, res.nearest_network_compatible()))?;
    let g = resize(&ImagePlane::new(p.gradient.height(), p.gradient.width(), 1, p.gradient.data().to_vec())?, res);
    Ok((
        resize(&p.background, res),
        resize(&p.reflection, res),
        GradientMap::new(res.height, res.width, g.data().to_vec())?,
    ))
}

/// Checkpoint + PNG in, three PNGs out.
pub fn infer(checkpoint: &Path, image: &Path, out: &Path, auto_resize: bool) -> Result<InferOutputs> {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let input = load_image(image)?;
    let (background, reflection, gradient) = infer_image(&model, &input, auto_resize)?;
    fs::create_dir_all(out).map_err(|e| CrrnError::io(out, e))?;
    let outputs = InferOutputs {
        background: out.join(BACKGROUND_FILE),
        reflection: out.join(REFLECTION_FILE),
        gradient: out.join(GRADIENT_FILE),
    };
    save_image(&background, &outputs.background)?;
    save_image(&reflection, &outputs.reflection)?;
    let gray = ImagePlane::new(
        gradient.height(),
        gradient.width(),
        1,
        gradient.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )?;
    save_image(&gray, &outputs.gradient)?;
    Ok(outputs)
}
