use std::fmt;

use crate::error::{Error, Result};

/// `H×W×C` grid of intensities in `[0, 1]`, channel-last, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl DocumentImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height * width * channels != pixels.len() || pixels.is_empty() {
            return Err(Error::Shape {
                op: "document_image",
                lhs: vec![height, width, channels],
                rhs: vec![pixels.len()],
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// One synthetic page: an image, its (unframed) token body and a category.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentPair {
    pub doc_id: String,
    pub image: DocumentImage,
    pub tokens: Vec<u32>,
    pub label: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Vision,
    Language,
    /// Renormalized mean of the vision and language embeddings.
    Multimodal,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Vision => 0,
            Modality::Language => 1,
            Modality::Multimodal => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Vision),
            1 => Some(Modality::Language),
            2 => Some(Modality::Multimodal),
            _ => None,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Vision => "V",
            Modality::Language => "L",
            Modality::Multimodal => "M",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Vision => "vision",
            Modality::Language => "language",
            Modality::Multimodal => "multimodal",
        })
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vision" | "v" => Ok(Modality::Vision),
            "language" | "l" | "text" => Ok(Modality::Language),
            "multimodal" | "m" | "both" => Ok(Modality::Multimodal),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// Unit-norm embedding of one document in one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub vector: Vec<f32>,
    pub modality: Modality,
    pub label: Option<u32>,
    pub doc_id: String,
}

impl EmbeddingRecord {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }
}

/// Normalize in `f64` and round back, for embeddings computed outside the tape.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(Error::Degenerate {
            op: "normalize",
            detail: format!("norm {norm:e}"),
        });
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}
