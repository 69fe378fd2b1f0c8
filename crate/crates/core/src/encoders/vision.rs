use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::document::DocumentImage;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

use super::config::VisionEncoderConfig;
use super::layers::{sinusoidal_positions, Linear, TransformerBlock};
use super::params::{Binding, ParamGroup, ParamStore};

/// Sequence output of an encoder plus its pooled page vector.
#[derive(Debug, Clone, Copy)]
pub struct EncodedSequence {
    /// `[len × d]`
    pub sequence: Var,
    /// `[d]`
    pub pooled: Var,
    pub len: usize,
    /// Leading positions that carry content; the rest are padding.
    pub valid: usize,
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub config: VisionEncoderConfig,
    pub patch_projection: Linear,
    pub blocks: Vec<TransformerBlock>,
}

impl VisionEncoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, config: &VisionEncoderConfig, rng: &mut SplitMix64) -> Self {
        let g = ParamGroup::Vision;
        let patch_projection = Linear::new(store, "vision.patch", g, config.patch_dim(), config.hidden_dim, rng);
        let blocks = (0..config.num_layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("vision.block{i}"),
                    g,
                    config.hidden_dim,
                    config.num_heads,
                    config.ff_dim,
                    rng,
                )
            })
            .collect();
        Self {
            config: config.clone(),
            patch_projection,
            blocks,
        }
    }

    /// `[N × P²C]` matrix of flattened patches. Patches are taken in
    /// row-major order over the patch grid; each patch is flattened
    /// row-major over (y, x, channel).
    pub fn patchify<S: Scalar>(&self, image: &DocumentImage) -> Result<Tensor<S>> {
        let c = &self.config;
        if image.height != c.image_height || image.width != c.image_width || image.channels != c.channels {
            return Err(Error::Shape {
                op: "encode_vision",
                lhs: vec![image.height, image.width, image.channels],
                rhs: vec![c.image_height, c.image_width, c.channels],
            });
        }
        let p = c.patch_size;
        let grid_w = c.image_width / p;
        let n = c.num_patches();
        let mut data = Vec::with_capacity(n * c.patch_dim());
        for patch in 0..n {
            let (py, px) = (patch / grid_w, patch % grid_w);
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c.channels {
                        data.push(S::of(image.at(py * p + y, px * p + x, ch) as f64));
                    }
                }
            }
        }
        Tensor::new(vec![n, c.patch_dim()], data)
    }

    pub fn positions<S: Scalar>(&self) -> Tensor<S> {
        sinusoidal_positions(self.config.num_patches(), self.config.hidden_dim)
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        image: &DocumentImage,
        positions: Var,
    ) -> Result<EncodedSequence> {
        let patches = tape.constant(self.patchify(image)?);
        let x = self.patch_projection.forward(tape, p, patches)?;
        let mut x = tape.add(x, positions)?;
        for block in &self.blocks {
            x = block.forward(tape, p, x, None)?;
        }
        let pooled = tape.mean_pool(x)?;
        let n = self.config.num_patches();
        Ok(EncodedSequence {
            sequence: x,
            pooled,
            len: n,
            valid: n,
        })
    }
}
