use crate::error::{Error, Result};

/// Vision transformer over square patches.
///
/// Paper scale: 224×224×3 images, 16×16 patches (196 tokens), width 768.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 1,
            patch_size: 8,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 128,
        }
    }
}

impl VisionEncoderConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        check_heads("vision", self.hidden_dim, self.num_heads)?;
        if self.channels == 0 || self.ff_dim == 0 {
            return Err(Error::Config("vision channels and ff_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Token transformer with `[CLS] body [SEP] [PAD]…` framing.
///
/// Paper scale: sequences of 256 tokens, width 768.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub pad_id: u32,
    pub cls_id: u32,
    pub sep_id: u32,
}

impl Default for LanguageEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_len: 32,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 128,
            pad_id: 0,
            cls_id: 1,
            sep_id: 2,
        }
    }
}

impl LanguageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for [CLS] and [SEP]".into()));
        }
        for (name, id) in [("pad", self.pad_id), ("cls", self.cls_id), ("sep", self.sep_id)] {
            if id as usize >= self.vocab_size {
                return Err(Error::Config(format!("{name} id {id} outside vocabulary")));
            }
        }
        check_heads("language", self.hidden_dim, self.num_heads)?;
        if self.ff_dim == 0 {
            return Err(Error::Config("language ff_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmaeConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ff_dim: usize,
    /// Vision and language branches use one weight set.
    pub shared_parameters: bool,
}

impl Default for CmaeConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_heads: 4,
            num_layers: 1,
            ff_dim: 128,
            shared_parameters: true,
        }
    }
}

impl CmaeConfig {
    pub fn key_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        check_heads("cmae", self.hidden_dim, self.num_heads)?;
        if self.ff_dim == 0 {
            return Err(Error::Config("cmae ff_dim must be positive".into()));
        }
        Ok(())
    }
}

/// One-hidden-layer MLP from encoder width to the contrastive space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionConfig {
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            output_dim: 32,
        }
    }
}

/// Which representation feeds the clustering heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// L2-normalized projection-head output.
    Projection,
    /// CMAE output (pooled, L2-normalized).
    Fused,
}

impl std::str::FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(Self::Projection),
            "fused" => Ok(Self::Fused),
            other => Err(Error::Config(format!("unknown feature source '{other}'"))),
        }
    }
}

impl std::fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Projection => "projection",
            Self::Fused => "fused",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vision: VisionEncoderConfig,
    pub language: LanguageEncoderConfig,
    pub cmae: CmaeConfig,
    pub projection: ProjectionConfig,
    /// Clusters per modality for the reorganization heads.
    pub num_clusters: usize,
    pub cluster_input: FeatureSource,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision: VisionEncoderConfig::default(),
            language: LanguageEncoderConfig::default(),
            cmae: CmaeConfig::default(),
            projection: ProjectionConfig::default(),
            num_clusters: 16,
            cluster_input: FeatureSource::Fused,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Very small configuration for finite-difference checks.
    pub fn tiny(dim: usize) -> Self {
        let heads = if dim % 2 == 0 { 2 } else { 1 };
        Self {
            vision: VisionEncoderConfig {
                image_height: 8,
                image_width: 8,
                channels: 1,
                patch_size: 4,
                hidden_dim: dim,
                num_layers: 1,
                num_heads: heads,
                ff_dim: dim,
            },
            language: LanguageEncoderConfig {
                vocab_size: 12,
                max_len: 6,
                hidden_dim: dim,
                num_layers: 1,
                num_heads: heads,
                ff_dim: dim,
                ..LanguageEncoderConfig::default()
            },
            cmae: CmaeConfig {
                hidden_dim: dim,
                num_heads: heads,
                num_layers: 1,
                ff_dim: dim,
                shared_parameters: true,
            },
            projection: ProjectionConfig {
                hidden_dim: dim,
                output_dim: dim,
            },
            num_clusters: 3,
            cluster_input: FeatureSource::Fused,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.language.validate()?;
        self.cmae.validate()?;
        if self.vision.hidden_dim != self.cmae.hidden_dim
            || self.language.hidden_dim != self.cmae.hidden_dim
        {
            return Err(Error::Config(format!(
                "encoder widths ({}, {}) must equal the cmae width {}",
                self.vision.hidden_dim, self.language.hidden_dim, self.cmae.hidden_dim
            )));
        }
        if self.projection.hidden_dim == 0 || self.projection.output_dim == 0 {
            return Err(Error::Config("projection dims must be positive".into()));
        }
        if self.num_clusters < 2 {
            return Err(Error::Config("need at least two clusters".into()));
        }
        Ok(())
    }

    pub fn cluster_input_dim(&self) -> usize {
        match self.cluster_input {
            FeatureSource::Projection => self.projection.output_dim,
            FeatureSource::Fused => self.cmae.hidden_dim,
        }
    }

    /// Canonical `key=value` rendering; its hash identifies checkpoints.
    pub fn canonical(&self) -> String {
        let v = &self.vision;
        let l = &self.language;
        let c = &self.cmae;
        let p = &self.projection;
        format!(
            "vision.image_height={}\nvision.image_width={}\nvision.channels={}\nvision.patch_size={}\n\
             vision.hidden_dim={}\nvision.num_layers={}\nvision.num_heads={}\nvision.ff_dim={}\n\
             language.vocab_size={}\nlanguage.max_len={}\nlanguage.hidden_dim={}\nlanguage.num_layers={}\n\
             language.num_heads={}\nlanguage.ff_dim={}\nlanguage.pad_id={}\nlanguage.cls_id={}\nlanguage.sep_id={}\n\
             cmae.hidden_dim={}\ncmae.num_heads={}\ncmae.num_layers={}\ncmae.ff_dim={}\ncmae.shared_parameters={}\n\
             projection.hidden_dim={}\nprojection.output_dim={}\nnum_clusters={}\ncluster_input={}\n",
            v.image_height, v.image_width, v.channels, v.patch_size, v.hidden_dim, v.num_layers,
            v.num_heads, v.ff_dim, l.vocab_size, l.max_len, l.hidden_dim, l.num_layers, l.num_heads,
            l.ff_dim, l.pad_id, l.cls_id, l.sep_id, c.hidden_dim, c.num_heads, c.num_layers, c.ff_dim,
            c.shared_parameters, p.hidden_dim, p.output_dim, self.num_clusters, self.cluster_input,
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let out = Sha256::digest(self.canonical().as_bytes());
        let mut d = [0u8; 32];
        d.copy_from_slice(&out);
        d
    }
}

fn check_heads(what: &str, dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "{what} width {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        let desk = VisionEncoderConfig::default();
        assert_eq!(desk.num_patches(), 16);
        let paper = VisionEncoderConfig {
            image_height: 224,
            image_width: 224,
            channels: 3,
            patch_size: 16,
            hidden_dim: 768,
            num_heads: 12,
            ..desk
        };
        paper.validate().unwrap();
        assert_eq!(paper.num_patches(), 196);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut v = VisionEncoderConfig::default();
        v.patch_size = 7;
        assert!(v.validate().is_err());
        let mut c = CmaeConfig::default();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut m = ModelConfig::default();
        m.language.hidden_dim = 32;
        assert!(m.validate().is_err());
    }

    #[test]
    fn digest_tracks_config() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.cmae.num_layers = 2;
        assert_ne!(a.digest(), b.digest());
    }
}
