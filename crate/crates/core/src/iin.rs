//! Image inference network: VGG-style backbone, two stride-1 reduction-style
//! feature-extraction blocks and a five-stage parallel transposed-convolution
//! decoder guided by the gradient network's pyramid. The background is
//! recovered through a residual, `B* = clamp(I - r)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{CrrnError, Result};
use crate::gin::{GinOutput, GIN_LEVELS};
use crate::image_model::{ImagePlane, Resolution};
use crate::nn::{check_channels, Conv, ConvT, Init, ParamSet};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const BACKBONE_STAGES: usize = 5;
const BACKBONE_CONVS: [usize; BACKBONE_STAGES] = [2, 2, 3, 3, 3];
const BACKBONE_WIDTHS: [usize; BACKBONE_STAGES] = [1, 2, 4, 8, 8];
const DECODER_WIDTHS: [usize; GIN_LEVELS] = [8, 8, 4, 2, 1];
const DECODER_KERNELS: [usize; 3] = [1, 3, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IinConfig {
    pub backbone_depth: usize,
    pub base_channels: usize,
    pub use_pretrained_backbone: bool,
}

impl Default for IinConfig {
    fn default() -> Self {
        Self {
            backbone_depth: BACKBONE_STAGES,
            base_channels: 16,
            use_pretrained_backbone: false,
        }
    }
}

impl IinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_depth != BACKBONE_STAGES {
            return Err(CrrnError::Config(format!(
                "iin backbone_depth must be {BACKBONE_STAGES} to pair with the guidance pyramid, got {}",
                self.backbone_depth
            )));
        }
        if self.base_channels < 4 {
            return Err(CrrnError::Config(format!(
                "iin base_channels must be >= 4, got {}",
                self.base_channels
            )));
        }
        if self.use_pretrained_backbone {
            return Err(CrrnError::Config(
                "no pretrained backbone weights are bundled; set use_pretrained_backbone = false".into(),
            ));
        }
        Ok(())
    }

    pub fn decoder_widths(&self) -> [usize; GIN_LEVELS] {
        DECODER_WIDTHS.map(|m| m * self.base_channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureVariant {
    A,
    B,
}

/// Branch layout `(kernel, width)` per conv, widths in units of
/// `base_channels`.
fn branch_layout(variant: FeatureVariant) -> Vec<Vec<(usize, usize)>> {
    match variant {
        FeatureVariant::A => vec![
            vec![(1, 8), (7, 8)],
            vec![(3, 12)],
            vec![(1, 8), (3, 8), (3, 12)],
        ],
        FeatureVariant::B => vec![
            vec![(1, 8), (7, 8)],
            vec![(1, 8), (3, 12)],
            vec![(1, 8), (3, 9)],
            vec![(1, 8), (3, 9), (3, 10)],
        ],
    }
}

/// Multi-branch block; every conv has stride 1 so the spatial size is kept,
/// and branch outputs are concatenated.
#[derive(Clone, Debug)]
pub struct FeatureBlock {
    pub variant: FeatureVariant,
    pub in_channels: usize,
    branches: Vec<Vec<Conv>>,
}

impl FeatureBlock {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        variant: FeatureVariant,
        in_channels: usize,
        base_channels: usize,
        init: &mut Init,
    ) -> Self {
        let branches = branch_layout(variant)
            .into_iter()
            .enumerate()
            .map(|(b, convs)| {
                let mut cin = in_channels;
                convs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (k, units))| {
                        let cout = units * base_channels;
                        let conv = Conv::new(ps, &format!("{name}.b{b}.{i}"), cin, cout, k, 1, init);
                        cin = cout;
                        conv
                    })
                    .collect()
            })
            .collect();
        Self {
            variant,
            in_channels,
            branches,
        }
    }

    pub fn branch_channels(&self) -> Vec<usize> {
        self.branches
            .iter()
            .map(|b| b.last().expect("non-empty branch").out_channels)
            .collect()
    }

    pub fn out_channels(&self) -> usize {
        self.branch_channels().iter().sum()
    }

    /// Last conv of each branch.
    pub fn branch_outputs(&self) -> Vec<Conv> {
        self.branches.iter().map(|b| *b.last().expect("non-empty branch")).collect()
    }

    pub fn forward(&self, g: &Graph<f32>, vars: &[Var], x: Var) -> Result<Var> {
        check_channels(g, x, self.in_channels, "feature extraction block")?;
        let outs: Vec<Var> = self
            .branches
            .iter()
            .map(|branch| branch.iter().fold(x, |h, conv| conv.forward_relu(g, vars, h)))
            .collect();
        Ok(g.concat(&outs))
    }
}

/// Apply a block with its own parameter set; convenience for standalone use.
pub fn feature_extraction_block(
    block: &FeatureBlock,
    params: &ParamSet,
    input: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let g = Graph::new();
    let vars = params.bind(&g, false);
    let x = g.constant(input.clone());
    let y = block.forward(&g, &vars, x)?;
    Ok((*g.value(y)).clone())
}

/// Three stride-2 transposed convolutions (kernels 1, 3, 5) whose outputs
/// are summed.
#[derive(Clone, Debug)]
struct DecoderStage {
    branches: Vec<ConvT>,
}

impl DecoderStage {
    fn forward(&self, g: &Graph<f32>, vars: &[Var], x: Var) -> Var {
        let mut acc = self.branches[0].forward(g, vars, x);
        for b in &self.branches[1..] {
            acc = g.add(acc, b.forward(g, vars, x));
        }
        g.relu(acc)
    }
}

#[derive(Clone, Debug)]
pub struct IinOutput {
    pub background: ImagePlane,
    pub reflection: ImagePlane,
    /// Predicted `I - B` before clamping, `1 x 3 x H x W`.
    pub residual: Tensor<f32>,
}

#[derive(Clone, Copy, Debug)]
pub struct IinVars {
    pub background: Var,
    pub reflection: Var,
    pub residual: Var,
}

#[derive(Clone, Debug)]
pub struct Iin {
    cfg: IinConfig,
    guidance_channels: [usize; GIN_LEVELS],
    params: ParamSet,
    backbone: Vec<Vec<Conv>>,
    classifier: Conv,
    block_a: FeatureBlock,
    block_b: FeatureBlock,
    decoder: Vec<DecoderStage>,
    residual_head: Conv,
    reflection_head: Conv,
}

impl Iin {
    pub fn new(cfg: IinConfig, guidance_channels: [usize; GIN_LEVELS], seed: u64) -> Result<Self> {
        Self::build(cfg, guidance_channels, &mut Init::kaiming(seed))
    }

    pub fn build(cfg: IinConfig, guidance_channels: [usize; GIN_LEVELS], init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let mut params = ParamSet::new();
        let mut cin = IMAGE_CHANNELS;
        let mut backbone = Vec::with_capacity(BACKBONE_STAGES);
        for s in 0..BACKBONE_STAGES {
            let width = BACKBONE_WIDTHS[s] * b;
            let convs = (0..BACKBONE_CONVS[s])
                .map(|i| {
                    let conv = Conv::new(&mut params, &format!("iin.backbone{s}.{i}"), cin, width, 3, 1, init);
                    cin = width;
                    conv
                })
                .collect();
            backbone.push(convs);
        }
        let classifier = Conv::new(&mut params, "iin.classifier", cin, 16 * b, 3, 1, init);
        let block_a = FeatureBlock::new(&mut params, "iin.fe_a", FeatureVariant::A, 16 * b, b, init);
        let block_b = FeatureBlock::new(&mut params, "iin.fe_b", FeatureVariant::B, block_a.out_channels(), b, init);

        let widths = cfg.decoder_widths();
        let mut cin = block_b.out_channels();
        let mut decoder = Vec::with_capacity(GIN_LEVELS);
        for (k, &width) in widths.iter().enumerate() {
            let branches = DECODER_KERNELS
                .iter()
                .map(|&kernel| {
                    ConvT::new(
                        &mut params,
                        &format!("iin.dec{k}.k{kernel}"),
                        cin,
                        width,
                        kernel,
                        DECODER_KERNELS.len() as f64,
                        init,
                    )
                })
                .collect();
            decoder.push(DecoderStage { branches });
            cin = width + guidance_channels[k];
        }
        let residual_head = Conv::new(&mut params, "iin.residual_head", cin, IMAGE_CHANNELS, 3, 1, &mut Init::Zeros);
        let reflection_head = Conv::new(&mut params, "iin.reflection_head", cin, IMAGE_CHANNELS, 3, 1, init);
        Ok(Self {
            cfg,
            guidance_channels,
            params,
            backbone,
            classifier,
            block_a,
            block_b,
            decoder,
            residual_head,
            reflection_head,
        })
    }

    pub fn config(&self) -> &IinConfig {
        &self.cfg
    }

    pub fn guidance_channels(&self) -> [usize; GIN_LEVELS] {
        self.guidance_channels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn feature_blocks(&self) -> [&FeatureBlock; 2] {
        [&self.block_a, &self.block_b]
    }

    pub fn residual_head(&self) -> Conv {
        self.residual_head
    }

    /// Zero tensors shaped like the guidance pyramid for an `N x H x W`
    /// batch.
    pub fn zero_guidance(&self, n: usize, height: usize, width: usize) -> Vec<Tensor<f32>> {
        (0..GIN_LEVELS)
            .map(|k| {
                let f = 1 << (GIN_LEVELS - 1 - k);
                Tensor::zeros([n, self.guidance_channels[k], height / f, width / f])
            })
            .collect()
    }

    /// Forward pass over an `N x 3 x H x W` mixture with a pyramid of
    /// guidance features, coarsest first.
    pub fn forward_vars(&self, g: &Graph<f32>, vars: &[Var], mixture: Var, guidance: &[Var]) -> Result<IinVars> {
        check_channels(g, mixture, IMAGE_CHANNELS, "iin input")?;
        let [n, _, h, w] = g.shape(mixture);
        Resolution { height: h, width: w }.require_network_compatible()?;
        if guidance.len() != GIN_LEVELS {
            return Err(CrrnError::Dimension(format!(
                "guidance pyramid has {} levels, expected {GIN_LEVELS}",
                guidance.len()
            )));
        }

        let mut x = mixture;
        for stage in &self.backbone {
            for conv in stage {
                x = conv.forward_relu(g, vars, x);
            }
            x = g.max_pool2(x);
        }
        x = self.classifier.forward_relu(g, vars, x);
        x = self.block_a.forward(g, vars, x)?;
        x = self.block_b.forward(g, vars, x)?;

        for (k, stage) in self.decoder.iter().enumerate() {
            x = stage.forward(g, vars, x);
            let f = 1 << (GIN_LEVELS - 1 - k);
            let expected = [n, self.guidance_channels[k], h / f, w / f];
            let got = g.shape(guidance[k]);
            if got != expected {
                return Err(CrrnError::Dimension(format!(
                    "guidance level {k} is {got:?}, expected {expected:?}"
                )));
            }
            x = g.concat(&[x, guidance[k]]);
        }
        let residual = self.residual_head.forward(g, vars, x);
        let reflection = g.sigmoid(self.reflection_head.forward(g, vars, x));
        let background = g.clamp(g.sub(mixture, residual), 0.0, 1.0);
        Ok(IinVars {
            background,
            reflection,
            residual,
        })
    }

    /// Inference on one image with the given guidance.
    pub fn forward(&self, mixture: &ImagePlane, guidance: &GinOutput) -> Result<IinOutput> {
        self.forward_tensors(mixture, &guidance.pyramid)
    }

    /// Inference with all guidance features replaced by zeros.
    pub fn forward_unguided(&self, mixture: &ImagePlane) -> Result<IinOutput> {
        let zeros = self.zero_guidance(1, mixture.height(), mixture.width());
        self.forward_tensors(mixture, &zeros)
    }

    fn forward_tensors(&self, mixture: &ImagePlane, pyramid: &[Tensor<f32>]) -> Result<IinOutput> {
        if mixture.channels() != IMAGE_CHANNELS {
            return Err(CrrnError::Dimension(format!(
                "iin expects an RGB image, got {} channels",
                mixture.channels()
            )));
        }
        let g = Graph::new();
        let vars = self.params.bind(&g, false);
        let m = g.constant(mixture.to_tensor());
        let guide: Vec<Var> = pyramid.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward_vars(&g, &vars, m, &guide)?;
        Ok(IinOutput {
            background: ImagePlane::from_tensor(&g.value(out.background), 0)?,
            reflection: ImagePlane::from_tensor(&g.value(out.reflection), 0)?,
            residual: (*g.value(out.residual)).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gin::GinConfig;

    fn small() -> Iin {
        let gin_cfg = GinConfig { base_channels: 4, ..GinConfig::default() };
        let cfg = IinConfig { base_channels: 4, ..IinConfig::default() };
        Iin::new(cfg, gin_cfg.pyramid_channels(), 3).unwrap()
    }

    fn image(h: usize, w: usize) -> ImagePlane {
        let data = (0..3 * h * w).map(|i| ((i * 53) % 97) as f32 / 96.0).collect();
        ImagePlane::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn block_widths() {
        let iin = small();
        let [a, b] = iin.feature_blocks();
        assert_eq!(a.branch_channels(), vec![32, 48, 48]);
        assert_eq!(a.out_channels(), 128);
        assert_eq!(b.branch_channels(), vec![32, 48, 36, 40]);
        assert_eq!(b.in_channels, 128);
    }

    #[test]
    fn zero_residual_head_is_identity() {
        let iin = small();
        let img = image(32, 32);
        let out = iin.forward_unguided(&img).unwrap();
        assert!(out.residual.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.background, img);
        assert_eq!(out.reflection.resolution(), img.resolution());
    }

    #[test]
    fn guidance_shape_mismatch() {
        let iin = small();
        let mut guide = iin.zero_guidance(1, 32, 32);
        guide[2] = Tensor::zeros([1, 3, 8, 8]);
        let img = image(32, 32);
        let err = iin.forward_tensors(&img, &guide).unwrap_err();
        assert!(matches!(err, CrrnError::Dimension(_)));
        assert!(iin.forward_tensors(&img, &guide[..4]).is_err());
    }

    #[test]
    fn pretrained_flag_rejected() {
        let cfg = IinConfig { use_pretrained_backbone: true, ..IinConfig::default() };
        assert!(matches!(cfg.validate(), Err(CrrnError::Config(_))));
        let cfg = IinConfig { backbone_depth: 4, ..IinConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
