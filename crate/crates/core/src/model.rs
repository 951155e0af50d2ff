//! The two networks wired together, plus the ablation variants.

use serde::{Deserialize, Serialize};

use crate::error::{CrrnError, Result};
use crate::gin::{Gin, GinConfig, GinOutput};
use crate::iin::{Iin, IinConfig, IinOutput};
use crate::image_model::{GradientMap, ImagePlane};

/// Which network variant / objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Guided image network trained on the full objective.
    #[default]
    Full,
    /// Image network with every guidance feature zeroed; no gradient term.
    IinOnly,
    /// Guided image network trained with the L1 background term only.
    L1Only,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::IinOnly, Ablation::L1Only];

    pub fn tag(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::IinOnly => "iin_only",
            Ablation::L1Only => "l1_only",
        }
    }

    pub fn uses_guidance(&self) -> bool {
        !matches!(self, Ablation::IinOnly)
    }
}

impl std::str::FromStr for Ablation {
    type Err = CrrnError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| CrrnError::Argument(format!("unknown ablation tag {s:?} (full, iin_only, l1_only)")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Everything one inference produces.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub background: ImagePlane,
    pub reflection: ImagePlane,
    pub gradient: GradientMap,
    pub image: IinOutput,
}

#[derive(Clone, Debug)]
pub struct Crrn {
    pub gin: Gin,
    pub iin: Iin,
    /// Variant the weights were trained as.
    pub trained_as: Ablation,
}

impl Crrn {
    pub fn new(gin_cfg: GinConfig, iin_cfg: IinConfig, seed: u64) -> Result<Self> {
        let gin = Gin::new(gin_cfg, seed)?;
        let iin = Iin::new(iin_cfg, gin_cfg.pyramid_channels(), seed.wrapping_add(1))?;
        Ok(Self {
            gin,
            iin,
            trained_as: Ablation::Full,
        })
    }

    /// Run the networks under `tag`. `l1_only` requires weights trained that
    /// way; `iin_only` may be applied to any guided model.
    pub fn ablation_forward(&self, mixture: &ImagePlane, tag: Ablation) -> Result<Prediction> {
        let compatible = match tag {
            Ablation::IinOnly => matches!(self.trained_as, Ablation::Full | Ablation::IinOnly),
            other => other == self.trained_as,
        };
        if !compatible {
            return Err(CrrnError::Argument(format!(
                "ablation {tag} cannot be run on weights trained as {}",
                self.trained_as
            )));
        }
        let guidance: GinOutput = self.gin.forward(mixture)?;
        let image = if tag.uses_guidance() && self.trained_as.uses_guidance() {
            self.iin.forward(mixture, &guidance)?
        } else {
            self.iin.forward_unguided(mixture)?
        };
        Ok(Prediction {
            background: image.background.clone(),
            reflection: image.reflection.clone(),
            gradient: guidance.gradient,
            image,
        })
    }

    /// Inference under the variant the weights were trained as.
    pub fn predict(&self, mixture: &ImagePlane) -> Result<Prediction> {
        self.ablation_forward(mixture, self.trained_as)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_parse() {
        for a in Ablation::ALL {
            assert_eq!(a.tag().parse::<Ablation>().unwrap(), a);
        }
        assert!(matches!("guided".parse::<Ablation>(), Err(CrrnError::Argument(_))));
    }

    #[test]
    fn tag_compatibility() {
        let gin = GinConfig { base_channels: 4, ..GinConfig::default() };
        let iin = IinConfig { base_channels: 4, ..IinConfig::default() };
        let mut m = Crrn::new(gin, iin, 0).unwrap();
        let img = ImagePlane::constant(32, 32, 3, 0.3).unwrap();
        let full = m.ablation_forward(&img, Ablation::Full).unwrap();
        let bare = m.ablation_forward(&img, Ablation::IinOnly).unwrap();
        assert_eq!(full.background.resolution(), bare.background.resolution());
        assert!(m.ablation_forward(&img, Ablation::L1Only).is_err());
        m.trained_as = Ablation::L1Only;
        assert!(m.ablation_forward(&img, Ablation::L1Only).is_ok());
        assert!(m.ablation_forward(&img, Ablation::Full).is_err());
    }
}
