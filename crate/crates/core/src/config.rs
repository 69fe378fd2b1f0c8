//! Flat `key = value` run configuration covering every module.
//!
//! Resolution order is defaults, then a config file, then command-line
//! overrides; later sources win. Unknown keys are rejected. The resolved
//! configuration serializes back to the same format, so any run can be
//! repeated from its echoed config alone.

use std::collections::BTreeMap;
use std::path::Path;

use crate::datagen::GeneratorConfig;
use crate::document::Modality;
use crate::encoders::{
    CmaeConfig, EmbedSpec, LanguageEncoderConfig, ModelConfig, ProjectionConfig, UnimodalPath, VisionEncoderConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{EpisodeConfig, MetaConfig, ProbeConfig};
use crate::objectives::ObjectiveConfig;
use crate::trainer::TrainConfig;

/// `(key, default, description)` for every recognized key, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "corpus generator and training seed"),
    ("classes", "16", "number of document categories"),
    ("per_class", "50", "documents generated per category"),
    ("separability", "1", "class distinguishability in [0, 1]"),
    ("image_size", "32", "square image side in pixels"),
    ("channels", "1", "image channels"),
    ("vocab", "64", "vocabulary size including the three special tokens"),
    ("min_body_len", "8", "shortest generated token body"),
    ("max_body_len", "24", "longest generated token body"),
    ("test_fraction", "0.2", "held-out fraction per class"),
    ("noise_std", "0.15", "pixel noise standard deviation"),
    ("patch_size", "8", "vision patch side"),
    ("dim", "64", "hidden width of every encoder"),
    ("layers", "2", "transformer layers per unimodal encoder"),
    ("heads", "4", "attention heads"),
    ("ff_dim", "128", "feed-forward width"),
    ("max_len", "32", "framed token sequence length"),
    ("cmae_layers", "1", "cross-modal attention encoder layers"),
    ("shared_cmae", "true", "share CMAE weights between modalities"),
    ("proj_dim", "32", "projection-head output width"),
    ("clusters", "16", "clusters per modality for L2R"),
    ("cluster_input", "fused", "features fed to the cluster heads: fused|projection"),
    ("init_seed", "0", "parameter initialization seed"),
    ("setting", "S2", "objective setting: S1|S2|S3"),
    ("batch_size", "16", "pairs per step"),
    ("total_steps", "2000", "optimizer steps"),
    ("warmup_fraction", "0.1", "fraction of steps in linear warmup"),
    ("peak_lr", "0.001", "learning rate at the end of warmup"),
    ("final_lr", "0.0005", "learning rate at the last step"),
    ("weight_decay", "0.01", "decoupled weight decay"),
    ("temperature", "0.07", "L2M temperature"),
    ("queue_capacity", "512", "support queue capacity per modality"),
    ("k_mine", "5", "neighbors mined per document for L2R"),
    ("lambda", "2", "L2R entropy weight"),
    ("entropy_sign", "maximize", "L2R entropy direction: maximize|minimize"),
    ("nn_in_denominator", "false", "use the neighbor in L2M denominators"),
    ("l2m_input", "projection", "L2M embeddings: projection|fused"),
    ("l2u_input", "fused", "L2U embeddings: fused|projection"),
    ("l2u_target", "hard", "L2U targets: hard|soft"),
    ("l2u_temperature", "1", "L2U similarity temperature"),
    ("stage2_start_step", "1500", "first step with L2R (S3)"),
    ("freeze_backbones_stage2", "true", "train only the cluster heads in stage 2"),
    ("grad_clip", "5", "global gradient norm cap"),
    ("deterministic", "true", "single-worker batch assembly"),
    ("checkpoint_every", "0", "checkpoint interval in steps (0 = final only)"),
    ("way", "5", "classes per episode"),
    ("shot", "1", "support samples per class"),
    ("queries", "15", "query samples per class"),
    ("episodes", "600", "evaluation episodes"),
    ("distance", "squared_euclidean", "prototype distance: squared_euclidean|euclidean"),
    ("unimodal_path", "projection", "single-modality embedding: projection|cmae_self"),
    ("base_classes", "auto", "comma-separated meta-training classes, or auto"),
    ("novel_classes", "auto", "comma-separated evaluation classes, or auto"),
    ("meta_steps", "0", "meta fine-tuning episodes before few-shot evaluation"),
    ("meta_lr", "0.0001", "meta fine-tuning learning rate"),
    ("meta_loss", "as_printed", "meta loss: as_printed|logsumexp"),
    ("probe_steps", "300", "linear probe optimizer steps"),
    ("probe_lr", "0.05", "linear probe learning rate"),
    ("modality", "multimodal", "embedding modality for export: vision|language|multimodal"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Set one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        if !known(&key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        self.values.insert(key, value.trim().to_string());
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Defaults, then `file`, then `overrides`; the result is validated.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.values[*k])).collect()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key).ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
    }

    fn parse_with<T>(&self, key: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<T> {
        let v = self.get(key).ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        f(v).map_err(|e| Error::Config(format!("invalid value '{v}' for '{key}': {e}")))
    }

    /// Check every typed view.
    pub fn validate(&self) -> Result<()> {
        self.generator()?.validate()?;
        self.model()?.validate()?;
        self.train()?.validate()?;
        self.episode()?;
        self.meta()?;
        self.probe()?;
        self.modality()?;
        self.class_split()?;
        Ok(())
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        Ok(GeneratorConfig {
            seed: self.parse("seed")?,
            num_categories: self.parse("classes")?,
            per_class: self.parse("per_class")?,
            separability: self.parse("separability")?,
            image_size: self.parse("image_size")?,
            channels: self.parse("channels")?,
            vocab_size: self.parse("vocab")?,
            min_body_len: self.parse("min_body_len")?,
            max_body_len: self.parse("max_body_len")?,
            test_fraction: self.parse("test_fraction")?,
            noise_std: self.parse("noise_std")?,
        })
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let dim = self.parse("dim")?;
        let heads = self.parse("heads")?;
        let ff = self.parse("ff_dim")?;
        let layers = self.parse("layers")?;
        let size = self.parse("image_size")?;
        Ok(ModelConfig {
            vision: VisionEncoderConfig {
                image_height: size,
                image_width: size,
                channels: self.parse("channels")?,
                patch_size: self.parse("patch_size")?,
                hidden_dim: dim,
                num_layers: layers,
                num_heads: heads,
                ff_dim: ff,
            },
            language: LanguageEncoderConfig {
                vocab_size: self.parse("vocab")?,
                max_len: self.parse("max_len")?,
                hidden_dim: dim,
                num_layers: layers,
                num_heads: heads,
                ff_dim: ff,
                ..LanguageEncoderConfig::default()
            },
            cmae: CmaeConfig {
                hidden_dim: dim,
                num_heads: heads,
                num_layers: self.parse("cmae_layers")?,
                ff_dim: ff,
                shared_parameters: self.parse("shared_cmae")?,
            },
            projection: ProjectionConfig {
                hidden_dim: dim,
                output_dim: self.parse("proj_dim")?,
            },
            num_clusters: self.parse("clusters")?,
            cluster_input: self.parse_with("cluster_input", str::parse)?,
            init_seed: self.parse("init_seed")?,
        })
    }

    pub fn objective(&self) -> Result<ObjectiveConfig> {
        Ok(ObjectiveConfig {
            temperature: self.parse("temperature")?,
            nn_in_denominator: self.parse("nn_in_denominator")?,
            l2m_input: self.parse_with("l2m_input", str::parse)?,
            l2u_input: self.parse_with("l2u_input", str::parse)?,
            l2u_target: self.parse_with("l2u_target", str::parse)?,
            l2u_temperature: self.parse("l2u_temperature")?,
            lambda: self.parse("lambda")?,
            entropy_sign: self.parse_with("entropy_sign", str::parse)?,
            k_mine: self.parse("k_mine")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            setting: self.parse_with("setting", str::parse)?,
            batch_size: self.parse("batch_size")?,
            total_steps: self.parse("total_steps")?,
            warmup_fraction: self.parse("warmup_fraction")?,
            peak_lr: self.parse("peak_lr")?,
            final_lr: self.parse("final_lr")?,
            weight_decay: self.parse("weight_decay")?,
            objective: self.objective()?,
            queue_capacity: self.parse("queue_capacity")?,
            stage2_start_step: self.parse("stage2_start_step")?,
            freeze_backbones_stage2: self.parse("freeze_backbones_stage2")?,
            grad_clip: self.parse("grad_clip")?,
            seed: self.parse("seed")?,
            deterministic: self.parse("deterministic")?,
            checkpoint_every: self.parse("checkpoint_every")?,
        })
    }

    pub fn embed_spec(&self) -> Result<EmbedSpec> {
        let setting: crate::objectives::Setting = self.parse_with("setting", str::parse)?;
        Ok(EmbedSpec {
            use_cmae: setting.uses_cmae(),
            unimodal_path: self.parse_with::<UnimodalPath>("unimodal_path", str::parse)?,
        })
    }

    pub fn episode(&self) -> Result<EpisodeConfig> {
        Ok(EpisodeConfig {
            way: self.parse("way")?,
            shot: self.parse("shot")?,
            queries_per_class: self.parse("queries")?,
            episodes: self.parse("episodes")?,
            seed: self.parse("seed")?,
            distance: self.parse_with("distance", str::parse)?,
        })
    }

    pub fn meta(&self) -> Result<MetaConfig> {
        Ok(MetaConfig {
            episode: self.episode()?,
            steps: self.parse("meta_steps")?,
            lr: self.parse("meta_lr")?,
            loss: self.parse_with("meta_loss", str::parse)?,
            modality: Modality::Multimodal,
            spec: self.embed_spec()?,
        })
    }

    pub fn probe(&self) -> Result<ProbeConfig> {
        Ok(ProbeConfig {
            steps: self.parse("probe_steps")?,
            lr: self.parse("probe_lr")?,
            seed: self.parse("seed")?,
        })
    }

    pub fn modality(&self) -> Result<Modality> {
        self.parse_with("modality", str::parse)
    }

    /// Base and novel class lists. `auto` takes the first
    /// `round(9·classes/16)` classes as base and the rest as novel, which
    /// gives 9/7 for 16 classes and 3/3 for 6.
    pub fn class_split(&self) -> Result<(Vec<u32>, Vec<u32>)> {
        let classes: usize = self.parse("classes")?;
        let auto_base = ((9 * classes) as f64 / 16.0).round() as usize;
        let list = |key: &str, auto: Vec<u32>| -> Result<Vec<u32>> {
            self.parse_with(key, |v| {
                if v == "auto" {
                    return Ok(auto);
                }
                let ids = v
                    .split(',')
                    .map(|s| s.trim().parse::<u32>().map_err(|_| Error::Config(format!("'{s}' is not a class id"))))
                    .collect::<Result<Vec<_>>>()?;
                if let Some(bad) = ids.iter().find(|&&c| c as usize >= classes) {
                    return Err(Error::Config(format!("class {bad} outside 0..{classes}")));
                }
                Ok(ids)
            })
        };
        let base = list("base_classes", (0..auto_base as u32).collect())?;
        let novel = list("novel_classes", (auto_base as u32..classes as u32).collect())?;
        if base.iter().any(|c| novel.contains(c)) {
            return Err(Error::Config("base_classes and novel_classes overlap".into()));
        }
        Ok((base, novel))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        let (base, novel) = cfg.class_split().unwrap();
        assert_eq!((base.len(), novel.len()), (9, 7));
        let model = cfg.model().unwrap();
        assert_eq!(model.vision.num_patches(), 16);
    }

    #[test]
    fn precedence_and_echo() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("seed = 3 # comment\n\nclasses=6\n").unwrap();
        cfg.set("seed", "7").unwrap();
        assert_eq!(cfg.get("seed"), Some("7"));
        let (base, novel) = cfg.class_split().unwrap();
        assert_eq!((base, novel), (vec![0, 1, 2], vec![3, 4, 5]));
        let mut again = RunConfig::default();
        again.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("colour", "red").is_err());
        cfg.set("setting", "S9").unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("setting"), "{err}");
        assert!(RunConfig::default().apply_text("no equals sign").is_err());
    }
}
