//! Mixture-image synthesis: `I = clamp(alpha * B + beta * R)` with sampled
//! weights, exact rotation/flip augmentation, optional reflection blur and
//! automatically derived reflection-dominant masks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CrrnError, Result};
use crate::image_model::{gradient_magnitude, load_image, resize, save_image, GradientMap, ImagePlane, Resolution};
use crate::io_util::write_atomic;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub const ALPHA_RANGE: (f64, f64) = (0.8, 1.0);
pub const BETA_RANGE: (f64, f64) = (0.1, 0.5);

/// Dilation radius applied to thresholded reflection masks.
pub const MASK_DILATION: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl MixWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(ALPHA_RANGE.0..=ALPHA_RANGE.1).contains(&alpha) || !(BETA_RANGE.0..=BETA_RANGE.1).contains(&beta) {
            return Err(CrrnError::Argument(format!(
                "weights ({alpha}, {beta}) outside [0.8,1] x [0.1,0.5]"
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// Independent uniform draws of alpha and beta.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            alpha: rng.gen_range(ALPHA_RANGE.0..=ALPHA_RANGE.1),
            beta: rng.gen_range(BETA_RANGE.0..=BETA_RANGE.1),
        }
    }
}

/// `clamp(alpha * B + beta * R, 0, 1)` pixelwise.
pub fn mix(background: &ImagePlane, reflection: &ImagePlane, w: MixWeights) -> Result<ImagePlane> {
    if !background.same_shape(reflection) {
        return Err(CrrnError::Dimension(format!(
            "background {}x{} vs reflection {}x{}",
            background.resolution(),
            background.channels(),
            reflection.resolution(),
            reflection.channels()
        )));
    }
    let (a, b) = (w.alpha as f32, w.beta as f32);
    let data = background
        .data()
        .iter()
        .zip(reflection.data())
        .map(|(&bg, &rf)| (a * bg + b * rf).clamp(0.0, 1.0))
        .collect();
    ImagePlane::new(background.height(), background.width(), background.channels(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Rotate90,
    Rotate180,
    Rotate270,
    FlipH,
    FlipV,
}

impl Augmentation {
    pub const ALL: [Augmentation; 5] = [
        Augmentation::Rotate90,
        Augmentation::Rotate180,
        Augmentation::Rotate270,
        Augmentation::FlipH,
        Augmentation::FlipV,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Augmentation::Rotate90 => "rotate90",
            Augmentation::Rotate180 => "rotate180",
            Augmentation::Rotate270 => "rotate270",
            Augmentation::FlipH => "flip_h",
            Augmentation::FlipV => "flip_v",
        }
    }
}

impl std::str::FromStr for Augmentation {
    type Err = CrrnError;

    fn from_str(s: &str) -> Result<Self> {
        Augmentation::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| CrrnError::Argument(format!("unknown augmentation {s:?}")))
    }
}

impl std::fmt::Display for Augmentation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Exact pixel permutation; rotations are clockwise.
pub fn augment(img: &ImagePlane, op: Augmentation) -> ImagePlane {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (oh, ow) = match op {
        Augmentation::Rotate90 | Augmentation::Rotate270 => (w, h),
        _ => (h, w),
    };
    let mut data = vec![0.0f32; h * w * c];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = match op {
                    Augmentation::Rotate90 => (h - 1 - x, y),
                    Augmentation::Rotate180 => (h - 1 - y, w - 1 - x),
                    Augmentation::Rotate270 => (x, w - 1 - y),
                    Augmentation::FlipH => (y, w - 1 - x),
                    Augmentation::FlipV => (h - 1 - y, x),
                };
                data[(ch * oh + y) * ow + x] = img.get(ch, sy, sx);
            }
        }
    }
    ImagePlane::from_raw_unchecked(oh, ow, c, data)
}

/// Symmetric ("half-sample") reflection of an index into `0..n`.
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Normalised Gaussian taps with radius `ceil(4 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with reflective borders; `sigma == 0` is the
/// identity.
pub fn reflection_blur(reflection: &ImagePlane, sigma: f64) -> Result<ImagePlane> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(CrrnError::Argument(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(reflection.clone());
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let (h, w, c) = (reflection.height(), reflection.width(), reflection.channels());
    let mut out = vec![0.0f32; h * w * c];
    let mut tmp = vec![0.0f64; h * w];
    for ch in 0..c {
        let plane = reflection.plane(ch);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| t * plane[y * w + reflect_index(x as isize + k as isize - r, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| t * tmp[reflect_index(y as isize + k as isize - r, h) * w + x])
                    .sum();
                out[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    ImagePlane::new(h, w, c, out)
}

/// Binary per-pixel flags marking reflection-dominant pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CrrnError::Dimension(format!(
                "{} flags for a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Number of flagged pixels at least `margin` away from every border.
    pub fn interior_count(&self, margin: usize) -> usize {
        if self.height <= 2 * margin || self.width <= 2 * margin {
            return 0;
        }
        (margin..self.height - margin)
            .map(|y| (margin..self.width - margin).filter(|&x| self.get(y, x)).count())
            .sum()
    }

    /// Square (Chebyshev) dilation.
    pub fn dilate(&self, radius: usize) -> RegionMask {
        let (h, w) = (self.height, self.width);
        let mut horiz = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                if self.data[y * w + x] {
                    for xx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                        horiz[y * w + xx] = true;
                    }
                }
            }
        }
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                if horiz[y * w + x] {
                    for yy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                        out[yy * w + x] = true;
                    }
                }
            }
        }
        RegionMask { height: h, width: w, data: out }
    }

    /// Alternating run lengths, starting with a (possibly empty) run of
    /// `false`.
    pub fn to_runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &v in &self.data {
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(height: usize, width: usize, runs: &[u32]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        let mut value = false;
        for &r in runs {
            data.extend(std::iter::repeat(value).take(r as usize));
            value = !value;
        }
        Self::new(height, width, data)
    }

    pub fn to_image(&self) -> ImagePlane {
        ImagePlane::from_raw_unchecked(
            self.height,
            self.width,
            1,
            self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )
    }
}

/// Pixels where `beta * luminance(R) >= tau`, dilated by [`MASK_DILATION`].
pub fn region_mask(reflection: &ImagePlane, w: MixWeights, tau: f64) -> Result<RegionMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CrrnError::Argument(format!("mask threshold must be in (0,1), got {tau}")));
    }
    Ok(threshold_mask(reflection, w, tau).dilate(MASK_DILATION))
}

fn threshold_mask(reflection: &ImagePlane, w: MixWeights, tau: f64) -> RegionMask {
    let data = reflection
        .luminance()
        .iter()
        .map(|&l| w.beta * l as f64 >= tau)
        .collect();
    RegionMask {
        height: reflection.height(),
        width: reflection.width(),
        data,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub seed: u64,
    pub count: usize,
    pub resolutions: Vec<Resolution>,
    pub blur_sigma_range: [f64; 2],
    pub mask_threshold: f64,
    pub augmentations: Vec<Augmentation>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 64,
            resolutions: vec![Resolution { height: 96, width: 160 }],
            blur_sigma_range: [0.0, 3.0],
            mask_threshold: 0.08,
            augmentations: Augmentation::ALL.to_vec(),
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(CrrnError::Config("count must be >= 1".into()));
        }
        if self.resolutions.is_empty() {
            return Err(CrrnError::Config("at least one resolution is required".into()));
        }
        if self.resolutions.iter().any(|r| r.height == 0 || r.width == 0) {
            return Err(CrrnError::Config("resolutions must be positive".into()));
        }
        let [lo, hi] = self.blur_sigma_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi >= lo) {
            return Err(CrrnError::Config(format!("invalid blur sigma range [{lo}, {hi}]")));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(CrrnError::Config(format!(
                "mask threshold must be in (0,1), got {}",
                self.mask_threshold
            )));
        }
        Ok(())
    }
}

/// Reflection mask stored inline in the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub encoding: String,
    pub runs: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub mixture: String,
    pub background: String,
    pub reflection: String,
    pub mask: MaskRecord,
    pub alpha: f64,
    pub beta: f64,
    pub blur_sigma: f64,
    pub augmentation: Option<Augmentation>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn weights(&self) -> MixWeights {
        MixWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn resolution(&self) -> Resolution {
        Resolution {
            height: self.height,
            width: self.width,
        }
    }

    pub fn region_mask(&self) -> Result<RegionMask> {
        if self.mask.encoding != "rle" {
            return Err(CrrnError::Format(format!("unknown mask encoding {:?}", self.mask.encoding)));
        }
        RegionMask::from_runs(self.height, self.width, &self.mask.runs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: SynthesisConfig,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry file names are relative to; not serialised.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| CrrnError::io(&path, e))?;
        let probe: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CrrnError::Format(format!("{}: {e}", path.display())))?;
        let version = probe
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CrrnError::Format(format!("{}: missing schema_version", path.display())))?;
        if version as u32 > MANIFEST_SCHEMA_VERSION {
            return Err(CrrnError::Version {
                found: version as u32,
                supported: MANIFEST_SCHEMA_VERSION,
            });
        }
        let mut manifest: DatasetManifest =
            serde_json::from_value(probe).map_err(|e| CrrnError::Format(format!("{}: {e}", path.display())))?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn file_path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Every referenced file exists and the entry count matches the config.
    pub fn validate(&self) -> Result<()> {
        if self.entries.len() != self.config.count {
            return Err(CrrnError::Integrity(format!(
                "manifest lists {} entries but its config asks for {}",
                self.entries.len(),
                self.config.count
            )));
        }
        for e in &self.entries {
            for f in [&e.mixture, &e.background, &e.reflection] {
                let p = self.file_path(f);
                if !p.is_file() {
                    return Err(CrrnError::NotFound(p));
                }
            }
        }
        Ok(())
    }

    pub fn load_triplet(&self, index: usize) -> Result<MixtureTriplet> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| CrrnError::Argument(format!("no manifest entry {index}")))?;
        let mixture = load_image(self.file_path(&e.mixture))?;
        let background = load_image(self.file_path(&e.background))?;
        let reflection = load_image(self.file_path(&e.reflection))?;
        if !mixture.same_shape(&background) || !mixture.same_shape(&reflection) {
            return Err(CrrnError::Dimension(format!("entry {} has inconsistent image shapes", e.id)));
        }
        if mixture.resolution() != e.resolution() {
            return Err(CrrnError::Integrity(format!(
                "entry {} is {} but the manifest records {}",
                e.id,
                mixture.resolution(),
                e.resolution()
            )));
        }
        Ok(MixtureTriplet {
            id: e.id.clone(),
            background_gradient: gradient_magnitude(&background),
            mask: e.region_mask()?,
            weights: e.weights(),
            mixture,
            background,
            reflection,
        })
    }

    pub fn load_all(&self) -> Result<Vec<MixtureTriplet>> {
        (0..self.entries.len()).map(|i| self.load_triplet(i)).collect()
    }
}

/// One training / evaluation sample.
#[derive(Clone, Debug)]
pub struct MixtureTriplet {
    pub id: String,
    pub mixture: ImagePlane,
    pub background: ImagePlane,
    pub reflection: ImagePlane,
    pub weights: MixWeights,
    pub background_gradient: GradientMap,
    pub mask: RegionMask,
}

/// Seed for entry `index`, independent of processing order.
pub fn entry_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sorted PNG files of a pool directory.
pub fn list_pool(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CrrnError::NotFound(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CrrnError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    if files.is_empty() {
        return Err(CrrnError::Config(format!("image pool {} has no PNG files", dir.display())));
    }
    files.sort();
    Ok(files)
}

struct EntryPlan {
    background: usize,
    reflection: usize,
    resolution: Resolution,
    augmentation: Option<Augmentation>,
    weights: MixWeights,
    blur_sigma: f64,
}

fn plan_entry(cfg: &SynthesisConfig, seed: u64, n_bg: usize, n_rf: usize) -> EntryPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = rng.gen_range(0..n_bg);
    let reflection = rng.gen_range(0..n_rf);
    let resolution = *cfg.resolutions.choose(&mut rng).expect("validated non-empty");
    let mut choices: Vec<Option<Augmentation>> = vec![None];
    choices.extend(cfg.augmentations.iter().copied().map(Some));
    let augmentation = *choices.choose(&mut rng).expect("non-empty");
    let weights = MixWeights::sample(&mut rng);
    let [lo, hi] = cfg.blur_sigma_range;
    let blur_sigma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    EntryPlan {
        background,
        reflection,
        resolution,
        augmentation,
        weights,
        blur_sigma,
    }
}

/// Mask for a generated triplet. Falls back to the brighter half of the
/// weighted reflection when the threshold leaves no pixel away from the
/// border, so regional metrics are always defined.
fn dataset_mask(reflection: &ImagePlane, w: MixWeights, tau: f64, margin: usize) -> Result<RegionMask> {
    let mask = region_mask(reflection, w, tau)?;
    if mask.interior_count(margin) > 0 {
        return Ok(mask);
    }
    let peak = reflection.luminance().iter().fold(0.0f32, |m, &v| m.max(v)) as f64 * w.beta;
    if peak > 0.0 {
        let fallback = threshold_mask(reflection, w, 0.5 * peak).dilate(MASK_DILATION);
        if fallback.interior_count(margin) > 0 {
            return Ok(fallback);
        }
    }
    Ok(RegionMask::filled(reflection.height(), reflection.width(), true))
}

/// Write `cfg.count` triplets plus `manifest.json` into `out`.
pub fn generate_dataset(
    cfg: &SynthesisConfig,
    background_pool: &Path,
    reflection_pool: &Path,
    out: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let backgrounds = list_pool(background_pool)?;
    let reflections = list_pool(reflection_pool)?;
    fs::create_dir_all(out).map_err(|e| CrrnError::io(out, e))?;
    let margin = crate::metrics::SsimConfig::default().radius();

    let entries: Vec<ManifestEntry> = (0..cfg.count)
        .into_par_iter()
        .map(|index| -> Result<ManifestEntry> {
            let seed = entry_seed(cfg.seed, index);
            let plan = plan_entry(cfg, seed, backgrounds.len(), reflections.len());
            let prepare = |path: &Path| -> Result<ImagePlane> {
                let img = load_image(path)?.to_rgb();
                let img = match plan.augmentation {
                    Some(op) => augment(&img, op),
                    None => img,
                };
                Ok(resize(&img, plan.resolution))
            };
            let background = prepare(&backgrounds[plan.background])?.quantized();
            let reflection = reflection_blur(&prepare(&reflections[plan.reflection])?, plan.blur_sigma)?.quantized();
            let mixture = mix(&background, &reflection, plan.weights)?;
            let mask = dataset_mask(&reflection, plan.weights, cfg.mask_threshold, margin)?;

            let id = format!("{index:05}");
            let names = [
                format!("{id}_mixture.png"),
                format!("{id}_background.png"),
                format!("{id}_reflection.png"),
            ];
            for (img, name) in [&mixture, &background, &reflection].into_iter().zip(&names) {
                save_image(img, out.join(name))?;
            }
            let [mixture_name, background_name, reflection_name] = names;
            Ok(ManifestEntry {
                id,
                mixture: mixture_name,
                background: background_name,
                reflection: reflection_name,
                mask: MaskRecord {
                    encoding: "rle".into(),
                    runs: mask.to_runs(),
                },
                alpha: plan.weights.alpha,
                beta: plan.weights.beta,
                blur_sigma: plan.blur_sigma,
                augmentation: plan.augmentation,
                height: plan.resolution.height,
                width: plan.resolution.width,
                seed,
            })
        })
        .collect::<Result<_>>()?;

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: cfg.clone(),
        entries,
        root: out.to_path_buf(),
    };
    manifest.save(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Procedurally generated stand-ins for photographic image pools.
pub mod procedural {
    use super::*;

    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum PoolKind {
        /// Sharp piecewise-constant scenes.
        Background,
        /// Smooth, low-frequency scenes.
        Reflection,
    }

    fn random_colour(rng: &mut ChaCha8Rng) -> [f32; 3] {
        [rng.gen(), rng.gen(), rng.gen()]
    }

    pub fn background_image(res: Resolution, rng: &mut ChaCha8Rng) -> ImagePlane {
        let (h, w) = (res.height, res.width);
        let top = random_colour(rng);
        let bottom = random_colour(rng);
        let mut px = vec![[0.0f32; 3]; h * w];
        for y in 0..h {
            let t = y as f32 / (h.max(2) - 1) as f32;
            for x in 0..w {
                for c in 0..3 {
                    px[y * w + x][c] = top[c] * (1.0 - t) + bottom[c] * t;
                }
            }
        }
        let shapes = rng.gen_range(4..9);
        for _ in 0..shapes {
            let colour = random_colour(rng);
            let cy = rng.gen_range(0.0..h as f32);
            let cx = rng.gen_range(0.0..w as f32);
            let sy = rng.gen_range(0.08..0.4) * h as f32;
            let sx = rng.gen_range(0.08..0.4) * w as f32;
            let kind = rng.gen_range(0..3);
            let period = rng.gen_range(3.0..8.0f32);
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f32 - cy) / sy;
                    let dx = (x as f32 - cx) / sx;
                    let inside = match kind {
                        0 => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                        1 => dy * dy + dx * dx <= 1.0,
                        _ => dy.abs() <= 1.0 && dx.abs() <= 1.0 && ((x as f32 / period) as i32) % 2 == 0,
                    };
                    if inside {
                        px[y * w + x] = colour;
                    }
                }
            }
        }
        planar(h, w, &px)
    }

    pub fn reflection_image(res: Resolution, rng: &mut ChaCha8Rng) -> ImagePlane {
        let (h, w) = (res.height, res.width);
        let base = random_colour(rng);
        let waves: Vec<([f32; 3], f32, f32, f32)> = (0..3)
            .map(|_| {
                (
                    random_colour(rng),
                    rng.gen_range(0.5..3.0) * std::f32::consts::TAU / h as f32,
                    rng.gen_range(0.5..3.0) * std::f32::consts::TAU / w as f32,
                    rng.gen_range(0.0..std::f32::consts::TAU),
                )
            })
            .collect();
        let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..rng.gen_range(2..5))
            .map(|_| {
                (
                    rng.gen_range(0.0..h as f32),
                    rng.gen_range(0.0..w as f32),
                    rng.gen_range(0.1..0.35) * h.min(w) as f32,
                    random_colour(rng),
                )
            })
            .collect();
        let mut px = vec![[0.0f32; 3]; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut v = [base[0] * 0.4, base[1] * 0.4, base[2] * 0.4];
                for (colour, fy, fx, phase) in &waves {
                    let s = 0.5 + 0.5 * (fy * y as f32 + fx * x as f32 + phase).sin();
                    for c in 0..3 {
                        v[c] += 0.25 * s * colour[c];
                    }
                }
                for (cy, cx, r, colour) in &blobs {
                    let d2 = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)) / (r * r);
                    let a = (-d2).exp();
                    for c in 0..3 {
                        v[c] = v[c] * (1.0 - a) + colour[c] * a;
                    }
                }
                px[y * w + x] = v.map(|c| c.clamp(0.0, 1.0));
            }
        }
        planar(h, w, &px)
    }

    fn planar(h: usize, w: usize, px: &[[f32; 3]]) -> ImagePlane {
        let mut data = vec![0.0f32; 3 * h * w];
        for (i, p) in px.iter().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = p[c];
            }
        }
        ImagePlane::from_raw_unchecked(h, w, 3, data)
    }

    /// Write `count` images named `pool_00000.png`, ... into `dir`.
    pub fn write_pool(dir: &Path, kind: PoolKind, count: usize, res: Resolution, seed: u64) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| CrrnError::io(dir, e))?;
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(entry_seed(seed ^ kind as u64, i));
                let img = match kind {
                    PoolKind::Background => background_image(res, &mut rng),
                    PoolKind::Reflection => reflection_image(res, &mut rng),
                };
                let path = dir.join(format!("pool_{i:05}.png"));
                save_image(&img, &path)?;
                Ok(path)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::new(h, w, c, (0..h * w * c).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn mix_examples() {
        let b = random_image(4, 5, 3, 1);
        let zero = ImagePlane::constant(4, 5, 3, 0.0).unwrap();
        assert_eq!(mix(&b, &zero, MixWeights::new(1.0, 0.1).unwrap()).unwrap(), b);

        let half = ImagePlane::constant(4, 5, 3, 0.5).unwrap();
        let out = mix(&half, &half, MixWeights::new(0.8, 0.2).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));

        let b = ImagePlane::constant(4, 5, 3, 0.4).unwrap();
        let r = ImagePlane::constant(4, 5, 3, 0.2).unwrap();
        let out = mix(&b, &r, MixWeights::new(0.9, 0.3).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.42).abs() < 1e-6));

        let bright = ImagePlane::constant(4, 5, 3, 1.0).unwrap();
        let out = mix(&bright, &bright, MixWeights::new(1.0, 0.5).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mix_shape_mismatch() {
        let a = random_image(4, 5, 3, 1);
        let b = random_image(4, 5, 1, 2);
        assert!(matches!(
            mix(&a, &b, MixWeights::new(0.9, 0.2).unwrap()),
            Err(CrrnError::Dimension(_))
        ));
    }

    #[test]
    fn weight_sampling_range_determinism_and_means() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10_000).map(|_| MixWeights::sample(&mut rng)).collect::<Vec<_>>()
        };
        let a = draw(11);
        assert_eq!(a, draw(11));
        assert!(a.iter().all(|w| (0.8..=1.0).contains(&w.alpha) && (0.1..=0.5).contains(&w.beta)));
        let mean_a = a.iter().map(|w| w.alpha).sum::<f64>() / a.len() as f64;
        let mean_b = a.iter().map(|w| w.beta).sum::<f64>() / a.len() as f64;
        assert!((mean_a - 0.9).abs() <= 0.01, "{mean_a}");
        assert!((mean_b - 0.3).abs() <= 0.01, "{mean_b}");
    }

    #[test]
    fn augment_group_identities() {
        let img = random_image(2, 3, 3, 5);
        let twice = augment(&augment(&img, Augmentation::FlipH), Augmentation::FlipH);
        assert_eq!(twice, img);
        let mut r = img.clone();
        for _ in 0..4 {
            r = augment(&r, Augmentation::Rotate90);
        }
        assert_eq!(r, img);
        let rot = augment(&img, Augmentation::Rotate90);
        assert_eq!((rot.height(), rot.width()), (3, 2));
        assert_eq!(
            augment(&augment(&img, Augmentation::Rotate90), Augmentation::Rotate270),
            img
        );
        assert_eq!(
            augment(&augment(&img, Augmentation::Rotate90), Augmentation::Rotate90),
            augment(&img, Augmentation::Rotate180)
        );
        assert!("rotate45".parse::<Augmentation>().is_err());
        assert_eq!("flip_v".parse::<Augmentation>().unwrap(), Augmentation::FlipV);
    }

    #[test]
    fn blur_identity_constant_and_impulse() {
        let img = random_image(9, 9, 3, 6);
        assert_eq!(reflection_blur(&img, 0.0).unwrap(), img);
        assert!(reflection_blur(&img, -1.0).is_err());
        let c = ImagePlane::constant(10, 7, 1, 0.6).unwrap();
        let bc = reflection_blur(&c, 2.5).unwrap();
        assert!(bc.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));

        let mut data = vec![0.0f32; 33 * 33];
        data[16 * 33 + 16] = 1.0;
        let impulse = ImagePlane::new(33, 33, 1, data).unwrap();
        let blurred = reflection_blur(&impulse, 2.0).unwrap();
        // Peak of the normalised 2-D kernel, evaluated directly.
        let radius = 8i32;
        let total: f64 = (-radius..=radius)
            .flat_map(|y| (-radius..=radius).map(move |x| (y, x)))
            .map(|(y, x)| (-((x * x + y * y) as f64) / 8.0).exp())
            .sum();
        assert!((blurred.get(0, 16, 16) as f64 - 1.0 / total).abs() < 1e-6);
    }

    #[test]
    fn mask_examples() {
        let w = MixWeights::new(0.9, 0.5).unwrap();
        let zero = ImagePlane::constant(8, 8, 3, 0.0).unwrap();
        assert_eq!(region_mask(&zero, w, 0.08).unwrap().count(), 0);
        let bright = ImagePlane::constant(8, 8, 3, 0.9).unwrap();
        assert_eq!(region_mask(&bright, w, 0.08).unwrap().count(), 64);

        let (h, wd) = (6, 12);
        let data: Vec<f32> = (0..h * wd).map(|i| if i % wd < 6 { 1.0 } else { 0.0 }).collect();
        let half = ImagePlane::new(h, wd, 1, data).unwrap();
        let m = region_mask(&half, w, 0.3).unwrap();
        for y in 0..h {
            for x in 0..wd {
                assert_eq!(m.get(y, x), x < 6 + MASK_DILATION, "({y},{x})");
            }
        }
        assert!(region_mask(&half, w, 1.0).is_err());
    }

    #[test]
    fn mask_run_length_round_trip() {
        let img = random_image(7, 9, 1, 8);
        let m = region_mask(&img, MixWeights::new(0.9, 0.3).unwrap(), 0.15).unwrap();
        let back = RegionMask::from_runs(7, 9, &m.to_runs()).unwrap();
        assert_eq!(back, m);
        let all = RegionMask::filled(3, 3, true);
        assert_eq!(all.to_runs(), vec![0, 9]);
    }

    #[test]
    fn config_validation() {
        assert!(SynthesisConfig::default().validate().is_ok());
        let bad = SynthesisConfig { count: 0, ..SynthesisConfig::default() };
        assert!(matches!(bad.validate(), Err(CrrnError::Config(_))));
        let bad = SynthesisConfig { mask_threshold: 1.0, ..SynthesisConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SynthesisConfig { blur_sigma_range: [2.0, 1.0], ..SynthesisConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_or_missing_pool() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(list_pool(dir.path()), Err(CrrnError::Config(_))));
        assert!(matches!(list_pool(&dir.path().join("nope")), Err(CrrnError::NotFound(_))));
    }

    proptest! {
        #[test]
        fn augmentations_preserve_pixel_multiset(seed in 0u64..500, op in 0usize..5) {
            let img = random_image(3, 5, 3, seed);
            let out = augment(&img, Augmentation::ALL[op]);
            let mut a: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = out.data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn raising_tau_never_adds_pixels(seed in 0u64..500, t1 in 0.01f64..0.5, dt in 0.0f64..0.4) {
            let img = random_image(6, 6, 3, seed);
            let w = MixWeights::new(0.9, 0.4).unwrap();
            let low = threshold_mask(&img, w, t1);
            let high = threshold_mask(&img, w, t1 + dt);
            for (h, l) in high.data().iter().zip(low.data()) {
                prop_assert!(!*h || *l);
            }
        }
    }
}
