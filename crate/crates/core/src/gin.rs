//! Gradient inference network: a five-level mirror-link encoder-decoder
//! mapping image + gradient to the background gradient, whose decoder
//! features double as multi-scale guidance.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{CrrnError, Result};
use crate::image_model::{gradient_magnitude, GradientMap, ImagePlane, Resolution};
use crate::nn::{check_channels, Conv, ConvT, Init, ParamSet};
use crate::tensor::Tensor;

pub const GIN_LEVELS: usize = 5;
pub const GIN_INPUT_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GinConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub input_channels: usize,
}

impl Default for GinConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            levels: GIN_LEVELS,
            input_channels: GIN_INPUT_CHANNELS,
        }
    }
}

impl GinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels != GIN_LEVELS {
            return Err(CrrnError::Config(format!("gin levels must be {GIN_LEVELS}, got {}", self.levels)));
        }
        if self.input_channels != GIN_INPUT_CHANNELS {
            return Err(CrrnError::Config(format!(
                "gin input channels must be {GIN_INPUT_CHANNELS}, got {}",
                self.input_channels
            )));
        }
        if self.base_channels < 4 {
            return Err(CrrnError::Config(format!(
                "gin base_channels must be >= 4, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// Encoder width per level: doubling from the base, capped at 8x.
    pub fn widths(&self) -> [usize; GIN_LEVELS] {
        std::array::from_fn(|k| (self.base_channels << k).min(8 * self.base_channels))
    }

    /// Channels of the pyramid levels, coarsest (H/16) first.
    pub fn pyramid_channels(&self) -> [usize; GIN_LEVELS] {
        let w = self.widths();
        std::array::from_fn(|j| w[GIN_LEVELS - 1 - j])
    }
}

/// Predicted background gradient and the decoder feature pyramid
/// (H/16, H/8, H/4, H/2, H).
#[derive(Clone, Debug)]
pub struct GinOutput {
    pub gradient: GradientMap,
    pub pyramid: Vec<Tensor<f32>>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct GinVars {
    pub gradient: Var,
    pub pyramid: Vec<Var>,
    /// Encoder bottleneck at H/32.
    pub bottleneck: Var,
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    same: Conv,
    down: Conv,
}

#[derive(Clone, Debug)]
pub struct Gin {
    cfg: GinConfig,
    params: ParamSet,
    encoder: Vec<EncoderLevel>,
    decoder: Vec<ConvT>,
    head: Conv,
}

impl Gin {
    /// He-initialised network.
    pub fn new(cfg: GinConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, &mut Init::kaiming(seed))
    }

    pub fn build(cfg: GinConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths();
        let mut params = ParamSet::new();
        let mut encoder = Vec::with_capacity(GIN_LEVELS);
        let mut cin = cfg.input_channels;
        for (k, &wk) in w.iter().enumerate() {
            let same = Conv::new(&mut params, &format!("gin.enc{k}.same"), cin, wk, 3, 1, init);
            let down = Conv::new(&mut params, &format!("gin.enc{k}.down"), wk, wk, 3, 2, init);
            encoder.push(EncoderLevel { same, down });
            cin = wk;
        }
        let mut decoder = Vec::with_capacity(GIN_LEVELS);
        for j in 0..GIN_LEVELS {
            // Block 0 reads the bottleneck; later blocks read the previous
            // decoder output joined with the mirrored encoder feature.
            let cin = if j == 0 { w[GIN_LEVELS - 1] } else { w[GIN_LEVELS - j] + w[GIN_LEVELS - j] };
            let cout = w[GIN_LEVELS - 1 - j];
            decoder.push(ConvT::new(&mut params, &format!("gin.dec{j}"), cin, cout, 3, 1.0, init));
        }
        let head = Conv::new(&mut params, "gin.head", 2 * w[0], 1, 3, 1, init);
        Ok(Self {
            cfg,
            params,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &GinConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Channels entering each mirror link as (decoder, encoder) pairs; the
    /// last pair feeds the output head.
    pub fn mirror_links(&self) -> Vec<(usize, usize)> {
        let w = self.cfg.widths();
        (1..=GIN_LEVELS).map(|j| (w[GIN_LEVELS - j], w[GIN_LEVELS - j])).collect()
    }

    /// Forward pass over an `N x 4 x H x W` input already in the graph.
    pub fn forward_vars(&self, g: &Graph<f32>, vars: &[Var], input: Var) -> Result<GinVars> {
        check_channels(g, input, self.cfg.input_channels, "gin input")?;
        let [_, _, h, w] = g.shape(input);
        Resolution { height: h, width: w }.require_network_compatible()?;

        let mut skips = Vec::with_capacity(GIN_LEVELS);
        let mut x = input;
        for level in &self.encoder {
            let e = level.same.forward_relu(g, vars, x);
            skips.push(e);
            x = level.down.forward_relu(g, vars, e);
        }
        let bottleneck = x;
        let mut pyramid = Vec::with_capacity(GIN_LEVELS);
        for (j, block) in self.decoder.iter().enumerate() {
            let input = if j == 0 { x } else { g.concat(&[x, skips[GIN_LEVELS - j]]) };
            x = g.relu(block.forward(g, vars, input));
            pyramid.push(x);
        }
        let joined = g.concat(&[x, skips[0]]);
        let gradient = g.softplus(self.head.forward(g, vars, joined));
        Ok(GinVars {
            gradient,
            pyramid,
            bottleneck,
        })
    }

    /// Inference on a single image.
    pub fn forward(&self, image: &ImagePlane) -> Result<GinOutput> {
        let g = Graph::new();
        let vars = self.params.bind(&g, false);
        let input = g.constant(gin_input(image)?);
        let out = self.forward_vars(&g, &vars, input)?;
        Ok(GinOutput {
            gradient: GradientMap::from_tensor(&g.value(out.gradient), 0)?,
            pyramid: out.pyramid.iter().map(|&v| (*g.value(v)).clone()).collect(),
        })
    }
}

/// The 4-channel network input: RGB mixture plus its gradient magnitude.
pub fn gin_input(image: &ImagePlane) -> Result<Tensor<f32>> {
    if image.channels() != 3 {
        return Err(CrrnError::Dimension(format!(
            "gin expects an RGB image, got {} channels",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let mut data = Vec::with_capacity(4 * h * w);
    data.extend_from_slice(image.data());
    data.extend_from_slice(gradient_magnitude(image).data());
    Ok(Tensor::from_vec([1, 4, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> ImagePlane {
        let data = (0..3 * h * w).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        ImagePlane::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn widths_double_then_cap() {
        let cfg = GinConfig::default();
        assert_eq!(cfg.widths(), [16, 32, 64, 128, 128]);
        assert_eq!(cfg.pyramid_channels(), [128, 128, 64, 32, 16]);
        let narrow = GinConfig { base_channels: 4, ..cfg };
        assert_eq!(narrow.widths(), [4, 8, 16, 32, 32]);
    }

    #[test]
    fn config_validation() {
        assert!(GinConfig { levels: 4, ..GinConfig::default() }.validate().is_err());
        assert!(GinConfig { base_channels: 3, ..GinConfig::default() }.validate().is_err());
        assert!(matches!(
            Gin::new(GinConfig { input_channels: 3, ..GinConfig::default() }, 0),
            Err(CrrnError::Config(_))
        ));
    }

    #[test]
    fn shapes_at_small_resolution() {
        let gin = Gin::new(GinConfig { base_channels: 4, ..GinConfig::default() }, 1).unwrap();
        let out = gin.forward(&image(32, 64)).unwrap();
        assert_eq!((out.gradient.height(), out.gradient.width()), (32, 64));
        let sizes: Vec<_> = out.pyramid.iter().map(|t| t.shape()).collect();
        assert_eq!(
            sizes,
            vec![[1, 32, 2, 4], [1, 32, 4, 8], [1, 16, 8, 16], [1, 8, 16, 32], [1, 4, 32, 64]]
        );
        assert!(out.gradient.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_indivisible_resolution() {
        let gin = Gin::new(GinConfig { base_channels: 4, ..GinConfig::default() }, 1).unwrap();
        assert!(matches!(gin.forward(&image(40, 64)), Err(CrrnError::Dimension(_))));
    }

    #[test]
    fn deterministic_inference() {
        let gin = Gin::new(GinConfig { base_channels: 4, ..GinConfig::default() }, 2).unwrap();
        let img = image(32, 32);
        let a = gin.forward(&img).unwrap();
        let b = gin.forward(&img).unwrap();
        assert_eq!(a.gradient, b.gradient);
        assert_eq!(a.pyramid, b.pyramid);
    }
}
