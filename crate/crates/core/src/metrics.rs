//! Structural similarity (SSIM), structure index (SI), their losses, the L1
//! loss, the combined training objective and region-restricted variants.
//!
//! Similarity maps are computed in "valid" mode: map position `(i, j)` is the
//! window centred on image pixel `(i + r, j + r)` where `r` is the window
//! radius. Multichannel inputs are handled per channel and averaged.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{CrrnError, Result};
use crate::image_model::{GradientMap, ImagePlane};
use crate::synthesis::RegionMask;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window_size: usize,
    pub window_sigma: f64,
    pub c1: f64,
    pub c2: f64,
    /// Stabiliser of the structure index.
    pub c: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        let c2 = 0.03f64 * 0.03;
        Self {
            window_size: 11,
            window_sigma: 1.5,
            c1: 0.01 * 0.01,
            c2,
            c: c2,
        }
    }
}

impl SsimConfig {
    pub fn with_window(window_size: usize, window_sigma: f64) -> Self {
        Self {
            window_size,
            window_sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(CrrnError::Config(format!(
                "SSIM window must be odd and >= 3, got {}",
                self.window_size
            )));
        }
        let positive = [self.window_sigma, self.c1, self.c2, self.c];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(CrrnError::Config("SSIM sigma and constants must be > 0".into()));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.window_size / 2
    }

    /// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn kernel<T: Element>(&self) -> Arc<Vec<T>> {
        let r = self.radius() as f64;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.window_sigma * self.window_sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        Arc::new(raw.iter().map(|v| T::from_f64_lossy(v / total)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 0.8 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(CrrnError::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// `gamma * ssim_b + l1_b + ssim_r + si_grad`.
    pub fn combine(&self, ssim_b: f64, l1_b: f64, ssim_r: f64, si_grad: f64) -> f64 {
        self.gamma * ssim_b + l1_b + ssim_r + si_grad
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Ssim,
    Si,
}

impl std::str::FromStr for MetricKind {
    type Err = CrrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssim" => Ok(MetricKind::Ssim),
            "si" => Ok(MetricKind::Si),
            other => Err(CrrnError::Argument(format!("unknown metric {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Differentiable building blocks

struct Moments {
    mu_x: Var,
    mu_y: Var,
    var_x: Var,
    var_y: Var,
    cov: Var,
}

fn local_moments<T: Element>(g: &Graph<T>, x: Var, y: Var, kernel: &Arc<Vec<T>>) -> Moments {
    let mu_x = g.gaussian_valid(x, kernel.clone());
    let mu_y = g.gaussian_valid(y, kernel.clone());
    let ex2 = g.gaussian_valid(g.mul(x, x), kernel.clone());
    let ey2 = g.gaussian_valid(g.mul(y, y), kernel.clone());
    let exy = g.gaussian_valid(g.mul(x, y), kernel.clone());
    Moments {
        var_x: g.sub(ex2, g.mul(mu_x, mu_x)),
        var_y: g.sub(ey2, g.mul(mu_y, mu_y)),
        cov: g.sub(exy, g.mul(mu_x, mu_y)),
        mu_x,
        mu_y,
    }
}

/// Per-window SSIM map (`N x C x H' x W'`).
pub fn ssim_map_var<T: Element>(g: &Graph<T>, x: Var, y: Var, cfg: &SsimConfig) -> Var {
    let m = local_moments(g, x, y, &cfg.kernel());
    let two = T::from_f64_lossy(2.0);
    let c1 = T::from_f64_lossy(cfg.c1);
    let c2 = T::from_f64_lossy(cfg.c2);
    let luminance_num = g.add_scalar(g.mul_scalar(g.mul(m.mu_x, m.mu_y), two), c1);
    let structure_num = g.add_scalar(g.mul_scalar(m.cov, two), c2);
    let luminance_den = g.add_scalar(g.add(g.mul(m.mu_x, m.mu_x), g.mul(m.mu_y, m.mu_y)), c1);
    let structure_den = g.add_scalar(g.add(m.var_x, m.var_y), c2);
    g.div(
        g.mul(luminance_num, structure_num),
        g.mul(luminance_den, structure_den),
    )
}

/// Per-window structure-index map: `(2 cov + c) / (var_x + var_y + c)`.
pub fn si_map_var<T: Element>(g: &Graph<T>, x: Var, y: Var, cfg: &SsimConfig) -> Var {
    let m = local_moments(g, x, y, &cfg.kernel());
    let c = T::from_f64_lossy(cfg.c);
    let num = g.add_scalar(g.mul_scalar(m.cov, T::from_f64_lossy(2.0)), c);
    let den = g.add_scalar(g.add(m.var_x, m.var_y), c);
    g.div(num, den)
}

fn one_minus_mean<T: Element>(g: &Graph<T>, map: Var) -> Var {
    g.add_scalar(g.mul_scalar(g.mean(map), -T::one()), T::one())
}

/// `1 - SSIM(target, pred)`.
pub fn loss_ssim_var<T: Element>(g: &Graph<T>, target: Var, pred: Var, cfg: &SsimConfig) -> Var {
    one_minus_mean(g, ssim_map_var(g, target, pred, cfg))
}

/// `1 - SI(target, pred)`.
pub fn loss_si_var<T: Element>(g: &Graph<T>, target: Var, pred: Var, cfg: &SsimConfig) -> Var {
    one_minus_mean(g, si_map_var(g, target, pred, cfg))
}

/// Mean absolute difference.
pub fn l1_var<T: Element>(g: &Graph<T>, target: Var, pred: Var) -> Var {
    g.mean(g.abs(g.sub(pred, target)))
}

/// Component losses and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<V> {
    pub ssim_b: V,
    pub l1_b: V,
    pub ssim_r: V,
    pub si_grad: V,
    pub total: V,
}

/// Targets and predictions entering the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    pub background: Var,
    pub background_pred: Var,
    pub reflection: Var,
    pub reflection_pred: Var,
    pub gradient: Var,
    pub gradient_pred: Var,
}

/// `gamma * L_ssim(B, B*) + L1(B, B*) + L_ssim(R, R*) + L_si(gB, gB*)`.
pub fn total_loss_var<T: Element>(
    g: &Graph<T>,
    inputs: &LossInputs,
    weights: &LossWeights,
    cfg: &SsimConfig,
) -> LossTerms<Var> {
    let ssim_b = loss_ssim_var(g, inputs.background, inputs.background_pred, cfg);
    let l1_b = l1_var(g, inputs.background, inputs.background_pred);
    let ssim_r = loss_ssim_var(g, inputs.reflection, inputs.reflection_pred, cfg);
    let si_grad = loss_si_var(g, inputs.gradient, inputs.gradient_pred, cfg);
    let weighted = g.mul_scalar(ssim_b, T::from_f64_lossy(weights.gamma));
    let total = g.add(g.add(weighted, l1_b), g.add(ssim_r, si_grad));
    LossTerms {
        ssim_b,
        l1_b,
        ssim_r,
        si_grad,
        total,
    }
}

// ---------------------------------------------------------------------------
// Plain metrics on images

/// Channel-averaged similarity map plus its mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub value: f64,
    pub map: Vec<f64>,
    pub map_height: usize,
    pub map_width: usize,
    /// Image coordinate of map position (0, 0) along each axis.
    pub offset: usize,
}

impl SimilarityMap {
    /// Mean of the map over positions whose window centre is flagged in
    /// `mask`.
    pub fn masked_mean(&self, mask: &RegionMask) -> Result<f64> {
        let (h, w) = (self.map_height + 2 * self.offset, self.map_width + 2 * self.offset);
        if mask.height() != h || mask.width() != w {
            return Err(CrrnError::Dimension(format!(
                "mask {}x{} does not match image {h}x{w}",
                mask.height(),
                mask.width()
            )));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..self.map_height {
            for j in 0..self.map_width {
                if mask.get(i + self.offset, j + self.offset) {
                    total += self.map[i * self.map_width + j];
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(CrrnError::Argument(
                "region mask has no pixels at least one window radius from the border".into(),
            ));
        }
        Ok(total / count as f64)
    }
}

fn check_pair(h1: usize, w1: usize, c1: usize, h2: usize, w2: usize, c2: usize, cfg: &SsimConfig) -> Result<()> {
    cfg.validate()?;
    if (h1, w1, c1) != (h2, w2, c2) {
        return Err(CrrnError::Dimension(format!(
            "{h1}x{w1}x{c1} vs {h2}x{w2}x{c2}"
        )));
    }
    if cfg.window_size > h1 || cfg.window_size > w1 {
        return Err(CrrnError::Argument(format!(
            "window {} larger than image {h1}x{w1}",
            cfg.window_size
        )));
    }
    Ok(())
}

fn similarity(x: Tensor<f64>, y: Tensor<f64>, cfg: &SsimConfig, kind: MetricKind) -> SimilarityMap {
    let g = Graph::<f64>::new();
    let (xv, yv) = (g.constant(x), g.constant(y));
    let map = match kind {
        MetricKind::Ssim => ssim_map_var(&g, xv, yv, cfg),
        MetricKind::Si => si_map_var(&g, xv, yv, cfg),
    };
    let value = g.value(map);
    let [_, c, mh, mw] = value.shape();
    let mut avg = vec![0.0; mh * mw];
    for ch in 0..c {
        for (a, &v) in avg.iter_mut().zip(&value.data()[ch * mh * mw..(ch + 1) * mh * mw]) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= c as f64);
    SimilarityMap {
        value: value.sum() / value.numel() as f64,
        map: avg,
        map_height: mh,
        map_width: mw,
        offset: cfg.radius(),
    }
}

/// SSIM of two images (mean over map and channels) and its map.
pub fn ssim(x: &ImagePlane, x_star: &ImagePlane, cfg: &SsimConfig) -> Result<SimilarityMap> {
    check_pair(x.height(), x.width(), x.channels(), x_star.height(), x_star.width(), x_star.channels(), cfg)?;
    Ok(similarity(x.to_tensor(), x_star.to_tensor(), cfg, MetricKind::Ssim))
}

/// Structure index of two images.
pub fn si(x: &ImagePlane, x_star: &ImagePlane, cfg: &SsimConfig) -> Result<SimilarityMap> {
    check_pair(x.height(), x.width(), x.channels(), x_star.height(), x_star.width(), x_star.channels(), cfg)?;
    Ok(similarity(x.to_tensor(), x_star.to_tensor(), cfg, MetricKind::Si))
}

/// Structure index of two gradient maps.
pub fn si_gradient(x: &GradientMap, x_star: &GradientMap, cfg: &SsimConfig) -> Result<SimilarityMap> {
    check_pair(x.height(), x.width(), 1, x_star.height(), x_star.width(), 1, cfg)?;
    Ok(similarity(x.to_tensor(), x_star.to_tensor(), cfg, MetricKind::Si))
}

/// Similarity averaged over the flagged region only.
pub fn regional(
    x: &ImagePlane,
    x_star: &ImagePlane,
    mask: &RegionMask,
    which: MetricKind,
    cfg: &SsimConfig,
) -> Result<f64> {
    if mask.count() == 0 {
        return Err(CrrnError::Argument("region mask is empty".into()));
    }
    let map = match which {
        MetricKind::Ssim => ssim(x, x_star, cfg)?,
        MetricKind::Si => si(x, x_star, cfg)?,
    };
    map.masked_mean(mask)
}

/// Loss value and its gradient with respect to the prediction (planar
/// `C x H x W` layout, `f64`).
#[derive(Clone, Debug)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn with_grad(target: Tensor<f64>, pred: Tensor<f64>, f: impl Fn(&Graph<f64>, Var, Var) -> Var) -> LossWithGrad {
    let g = Graph::<f64>::new();
    let t = g.constant(target);
    let p = g.param(pred);
    let loss = f(&g, t, p);
    let value = g.value(loss).item();
    let mut grads = g.backward(loss);
    LossWithGrad {
        value,
        grad: grads.take(p).map(Tensor::into_vec).unwrap_or_default(),
    }
}

pub fn loss_ssim(x: &ImagePlane, x_star: &ImagePlane, cfg: &SsimConfig) -> Result<LossWithGrad> {
    check_pair(x.height(), x.width(), x.channels(), x_star.height(), x_star.width(), x_star.channels(), cfg)?;
    Ok(with_grad(x.to_tensor(), x_star.to_tensor(), |g, t, p| {
        loss_ssim_var(g, t, p, cfg)
    }))
}

pub fn loss_si(x: &GradientMap, x_star: &GradientMap, cfg: &SsimConfig) -> Result<LossWithGrad> {
    check_pair(x.height(), x.width(), 1, x_star.height(), x_star.width(), 1, cfg)?;
    Ok(with_grad(x.to_tensor(), x_star.to_tensor(), |g, t, p| {
        loss_si_var(g, t, p, cfg)
    }))
}

pub fn l1_loss(x: &ImagePlane, x_star: &ImagePlane) -> Result<LossWithGrad> {
    if !x.same_shape(x_star) {
        return Err(CrrnError::Dimension(format!(
            "{}x{} vs {}x{}",
            x.resolution(),
            x.channels(),
            x_star.resolution(),
            x_star.channels()
        )));
    }
    Ok(with_grad(x.to_tensor(), x_star.to_tensor(), |g, t, p| l1_var(g, t, p)))
}

/// Gradients of the combined objective with respect to each prediction.
#[derive(Clone, Debug)]
pub struct TotalLossWithGrad {
    pub terms: LossTerms<f64>,
    pub grad_background: Vec<f64>,
    pub grad_reflection: Vec<f64>,
    pub grad_gradient: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    background: &ImagePlane,
    background_pred: &ImagePlane,
    reflection: &ImagePlane,
    reflection_pred: &ImagePlane,
    gradient: &GradientMap,
    gradient_pred: &GradientMap,
    weights: &LossWeights,
    cfg: &SsimConfig,
) -> Result<TotalLossWithGrad> {
    weights.validate()?;
    let b = background;
    let r = reflection;
    check_pair(b.height(), b.width(), b.channels(), background_pred.height(), background_pred.width(), background_pred.channels(), cfg)?;
    check_pair(r.height(), r.width(), r.channels(), reflection_pred.height(), reflection_pred.width(), reflection_pred.channels(), cfg)?;
    check_pair(gradient.height(), gradient.width(), 1, gradient_pred.height(), gradient_pred.width(), 1, cfg)?;

    let g = Graph::<f64>::new();
    let inputs = LossInputs {
        background: g.constant(b.to_tensor()),
        background_pred: g.param(background_pred.to_tensor()),
        reflection: g.constant(r.to_tensor()),
        reflection_pred: g.param(reflection_pred.to_tensor()),
        gradient: g.constant(gradient.to_tensor()),
        gradient_pred: g.param(gradient_pred.to_tensor()),
    };
    let terms = total_loss_var(&g, &inputs, weights, cfg);
    let read = |v: Var| g.value(v).item();
    let values = LossTerms {
        ssim_b: read(terms.ssim_b),
        l1_b: read(terms.l1_b),
        ssim_r: read(terms.ssim_r),
        si_grad: read(terms.si_grad),
        total: read(terms.total),
    };
    let mut grads = g.backward(terms.total);
    let mut take = |v: Var| grads.take(v).map(Tensor::into_vec).unwrap_or_default();
    Ok(TotalLossWithGrad {
        terms: values,
        grad_background: take(inputs.background_pred),
        grad_reflection: take(inputs.reflection_pred),
        grad_gradient: take(inputs.gradient_pred),
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub ssim: f64,
    pub si: f64,
    pub ssim_r: f64,
    pub si_r: f64,
}

impl MetricRow {
    pub fn values(&self) -> [f64; 4] {
        [self.ssim, self.si, self.ssim_r, self.si_r]
    }
}

/// The four metrics of a recovered background `B*` against `B`.
pub fn evaluate_pair(
    id: &str,
    mixture: &ImagePlane,
    background: &ImagePlane,
    background_pred: &ImagePlane,
    mask: &RegionMask,
    cfg: &SsimConfig,
) -> Result<MetricRow> {
    if !mixture.same_shape(background) {
        return Err(CrrnError::Dimension("mixture and background differ in shape".into()));
    }
    let s = ssim(background, background_pred, cfg)?;
    let t = si(background, background_pred, cfg)?;
    Ok(MetricRow {
        id: id.to_string(),
        ssim: s.value,
        si: t.value,
        ssim_r: s.masked_mean(mask)?,
        si_r: t.masked_mean(mask)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub count: usize,
    pub ssim: f64,
    pub si: f64,
    pub ssim_r: f64,
    pub si_r: f64,
}

/// Per-image rows, their means and the do-nothing baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub baseline: Option<MetricRow>,
}

pub const REPORT_HEADER: [&str; 5] = ["id", "ssim", "si", "ssim_r", "si_r"];
pub const BASELINE_ID: &str = "baseline";

fn mean_row(id: &str, rows: &[MetricRow]) -> MetricRow {
    let n = rows.len().max(1) as f64;
    let sum = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    MetricRow {
        id: id.to_string(),
        ssim: sum(|r| r.ssim),
        si: sum(|r| r.si),
        ssim_r: sum(|r| r.ssim_r),
        si_r: sum(|r| r.si_r),
    }
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> Self {
        Self { rows, baseline: None }
    }

    /// Collapse per-image baseline rows into the single baseline row.
    pub fn with_baseline_rows(mut self, baseline_rows: &[MetricRow]) -> Self {
        self.baseline = Some(mean_row(BASELINE_ID, baseline_rows));
        self
    }

    pub fn aggregate(&self) -> MetricAggregate {
        let m = mean_row("mean", &self.rows);
        MetricAggregate {
            count: self.rows.len(),
            ssim: m.ssim,
            si: m.si,
            ssim_r: m.ssim_r,
            si_r: m.si_r,
        }
    }

    /// Per-image rows followed by the baseline row.
    pub fn all_rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().chain(self.baseline.iter())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| CrrnError::Format(e.to_string());
        w.write_record(REPORT_HEADER).map_err(to_err)?;
        for row in self.all_rows() {
            w.write_record([
                row.id.clone(),
                row.ssim.to_string(),
                row.si.to_string(),
                row.ssim_r.to_string(),
                row.si_r.to_string(),
            ])
            .map_err(to_err)?;
        }
        w.flush().map_err(|e| CrrnError::Io {
            path: "<report>".into(),
            source: e,
        })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| CrrnError::Format(format!("{}: {e}", path.display())))?;
        let header = r.headers().map_err(|e| CrrnError::Format(e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != REPORT_HEADER {
            return Err(CrrnError::Format(format!("unexpected report header {header:?}")));
        }
        let mut report = MetricReport::new(Vec::new());
        for rec in r.deserialize::<MetricRow>() {
            let row = rec.map_err(|e| CrrnError::Format(e.to_string()))?;
            if row.id == BASELINE_ID {
                report.baseline = Some(row);
            } else {
                report.rows.push(row);
            }
        }
        Ok(report)
    }

    /// Aggregate block as a JSON document.
    pub fn aggregate_json(&self) -> serde_json::Value {
        serde_json::json!({
            "aggregate": self.aggregate(),
            "baseline": self.baseline,
        })
    }
}
