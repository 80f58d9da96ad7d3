use serde::{Deserialize, Serialize};

use super::layers::{self, BlockDims, BlockScratch};
use super::weights::sinusoidal_table;
use super::{ModelError, ModelRuntime};
use crate::substrate::{BufferId, Op, OpCommand, View};

pub const CAMERAS: usize = 4;
pub const TIMESTEPS: usize = 4;

/// Camera frames laid out `[camera, timestep, height, width, 3]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSet {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FrameSet {
    pub const FRAMES: usize = CAMERAS * TIMESTEPS;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ModelError> {
        let expected = Self::FRAMES * height * width * 3;
        if data.len() != expected {
            return Err(ModelError::Shape(format!(
                "frames hold {} values, expected {expected} for {}x{height}x{width}x3",
                data.len(),
                Self::FRAMES
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; Self::FRAMES * height * width * 3],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }
}

/// Image patches ready for projection, `[frames * per_frame, features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub data: Vec<f32>,
    pub frames: usize,
    pub per_frame: usize,
    pub features: usize,
}

/// Cuts every frame into `patch x patch` tiles, row-major over tiles, each
/// flattened as `(dy, dx, channel)`.
pub fn patchify(frames: &FrameSet, patch: usize) -> Result<Patches, ModelError> {
    if patch == 0 || !frames.height.is_multiple_of(patch) || !frames.width.is_multiple_of(patch) {
        return Err(ModelError::Shape(format!(
            "frame {}x{} is not divisible by patch size {patch}",
            frames.height, frames.width
        )));
    }
    let (ph, pw) = (frames.height / patch, frames.width / patch);
    let mut out = Vec::with_capacity(frames.data.len());
    for frame in frames.data.chunks_exact(frames.frame_len()) {
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..patch {
                    let row = (py * patch + dy) * frames.width + px * patch;
                    out.extend_from_slice(&frame[row * 3..(row + patch) * 3]);
                }
            }
        }
    }
    Ok(Patches {
        data: out,
        frames: FrameSet::FRAMES,
        per_frame: ph * pw,
        features: super::patch_features(patch),
    })
}

/// Visual embeddings resident in the substrate, `[lanes, tokens, hidden]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visual {
    pub buffer: BufferId,
    pub lanes: usize,
    pub tokens: usize,
}

impl ModelRuntime {
    /// Uploads patches and applies the patch projection for `lanes` copies
    /// of the same frames. Returns `[lanes * frames * patches, hidden]`.
    pub fn patch_embed(&mut self, patches: &Patches, lanes: usize) -> Result<Visual, ModelError> {
        let cfg = self.config().clone();
        let features = super::patch_features(cfg.patch_size);
        if patches.features != features {
            return Err(ModelError::Shape(format!(
                "patches carry {} features, model expects {features}",
                patches.features
            )));
        }
        let per_lane = patches.frames * patches.per_frame;
        let host = self.sub.alloc_from(&[per_lane, features], &patches.data)?;
        let tokens = lanes * per_lane;
        let replicated = self.sub.alloc(&[tokens, features])?;
        self.sub.dispatch(OpCommand::new(
            Op::ReadSlice {
                src: View {
                    offset: 0,
                    batches: lanes,
                    batch_stride: 0,
                    rows: per_lane,
                    row_stride: features,
                    cols: features,
                },
            },
            vec![host],
            replicated,
        ))?;
        self.sub.free(host)?;
        let out = self.sub.alloc(&[lanes, per_lane, cfg.hidden_dim])?;
        layers::linear(
            &mut self.sub,
            replicated,
            tokens,
            &self.bound.patch_w,
            Some(&self.bound.patch_b),
            out,
        )?;
        self.sub.free(replicated)?;
        Ok(Visual {
            buffer: out,
            lanes,
            tokens: per_lane,
        })
    }

    /// Vision encoder: patch projection, per-frame patch positions, then
    /// blocks attending within each frame, and a final norm.
    pub fn vision_encode(&mut self, patches: &Patches, lanes: usize) -> Result<Visual, ModelError> {
        let cfg = self.config().clone();
        let visual = self.patch_embed(patches, lanes)?;
        let frames = patches.frames;
        let patches = patches.per_frame;
        let h = cfg.hidden_dim;
        let pos = self.sub.alloc_from(&[patches, h], &sinusoidal_table(patches, h))?;
        layers::add_in_place(&mut self.sub, visual.buffer, pos)?;
        self.sub.free(pos)?;

        let dims = BlockDims {
            groups: lanes * frames,
            rows: patches,
            hidden: h,
            kv_dim: cfg.kv_dim,
            heads: cfg.heads,
            tokens: patches,
        };
        let scratch = BlockScratch::alloc(&mut self.sub, dims)?;
        for blk in &self.bound.vision_blocks {
            layers::project_qkv(&mut self.sub, blk, visual.buffer, &scratch)?;
            let src = layers::own_source(&scratch);
            layers::attend_and_mlp(&mut self.sub, blk, visual.buffer, &scratch, src, None)?;
        }
        let normed = scratch.normed;
        layers::layer_norm(
            &mut self.sub,
            visual.buffer,
            &self.bound.vision_ln_gamma,
            &self.bound.vision_ln_beta,
            normed,
        )?;
        self.sub
            .dispatch(OpCommand::new(Op::Copy, vec![normed], visual.buffer))?;
        scratch.free(&mut self.sub)?;
        Ok(visual)
    }

    pub fn read_visual(&self, visual: &Visual) -> Result<Vec<f32>, ModelError> {
        self.read_rows(visual.buffer, visual.lanes * visual.tokens, self.config().hidden_dim)
    }
}
