use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsca::{Gsca, GscaConfig, Normalization};
use crate::nn::{Bindings, Conv, ParamStore};
use crate::tensor::{Tape, Var};

/// Shape of the two networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared feature channels.
    pub channels: usize,
    /// Attention groups; 0 swaps the attention block for two 1×1 convolutions.
    pub groups: usize,
    pub normalization: Normalization,
    /// Hidden channels of the FOX head's last stage.
    pub head_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            groups: 4,
            normalization: Normalization::Softmax,
            head_channels: 16,
        }
    }
}

/// Context block at the coarsest scale.
#[derive(Clone, Debug)]
pub enum ContextBlock {
    Gsca(Gsca),
    /// `x + conv₂(relu(conv₁(x)))` with 1×1 kernels.
    Pointwise(Conv, Conv),
}

/// First stage: a small FCN with two 2× downsamplings, skip fusion and a
/// context block, ending in a one-channel text-region head.
#[derive(Clone, Debug)]
pub struct TisModel {
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
    pub conv4: Conv,
    pub context: ContextBlock,
    pub fuse: Conv,
    pub tr_head: Conv,
}

impl TisModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        if c < 2 {
            return Err(Error::Config(format!("need at least 2 feature channels, got {c}")));
        }
        let half = c / 2;
        let conv1 = Conv::new(store, "tis.conv1", 3, half, 3, true, 1.0, rng);
        let conv2 = Conv::new(store, "tis.conv2", half, c, 3, true, 1.0, rng);
        let conv3 = Conv::new(store, "tis.conv3", c, c, 3, true, 1.0, rng);
        let conv4 = Conv::new(store, "tis.conv4", c, c, 3, true, 1.0, rng);
        let context = if cfg.groups == 0 {
            ContextBlock::Pointwise(
                Conv::new(store, "tis.ctx1", c, c, 1, true, 1.0, rng),
                Conv::new(store, "tis.ctx2", c, c, 1, true, 0.25, rng),
            )
        } else {
            let mut gc = GscaConfig::new(c, cfg.groups)?;
            gc.normalization = cfg.normalization;
            ContextBlock::Gsca(Gsca::new(store, "tis.gsca", gc, rng)?)
        };
        let fuse = Conv::new(store, "tis.fuse", 2 * c, c, 1, true, 1.0, rng);
        let tr_head = Conv::new(store, "tis.tr", c, 1, 1, true, 1.0, rng);
        Ok(Self {
            conv1,
            conv2,
            conv3,
            conv4,
            context,
            fuse,
            tr_head,
        })
    }

    /// `image: [3, H, W]` with `H, W` divisible by 4 → (features
    /// `[C, H/4, W/4]`, text-region probabilities `[1, H/4, W/4]`).
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, image: Var) -> Result<(Var, Var)> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Dimension(format!("image must be [3,h,w], got {s:?}")));
        }
        if s[1] % 4 != 0 || s[2] % 4 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Config(format!("image size {}×{} is not divisible by 4", s[1], s[2])));
        }
        let x = self.conv1.forward(tape, b, image)?;
        let x = tape.relu(x);
        let x = tape.avg_pool2(x)?;
        let x = self.conv2.forward(tape, b, x)?;
        let x = tape.relu(x);
        let skip = tape.avg_pool2(x)?;
        let x = self.conv3.forward(tape, b, skip)?;
        let x = tape.relu(x);
        let x = self.conv4.forward(tape, b, x)?;
        let x = tape.relu(x);
        let x = match &self.context {
            ContextBlock::Gsca(g) => g.forward(tape, b, x)?,
            ContextBlock::Pointwise(c1, c2) => {
                let y = c1.forward(tape, b, x)?;
                let y = tape.relu(y);
                let y = c2.forward(tape, b, y)?;
                tape.add(x, y)?
            }
        };
        let cat = tape.concat(&[x, skip])?;
        let f = self.fuse.forward(tape, b, cat)?;
        let f = tape.relu(f);
        let tr = self.tr_head.forward(tape, b, f)?;
        let tr = tape.sigmoid(tr);
        Ok((f, tr))
    }
}

/// Second stage: two ×2 upsampling stages and a 1×1 convolution to six
/// channels (tcl, s, sin θ, cos θ, sin φ, cos φ). The tcl channel passes
/// through a sigmoid.
#[derive(Clone, Debug)]
pub struct FoxHead {
    pub up1: Conv,
    pub up2: Conv,
    pub out: Conv,
}

impl FoxHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let up1 = Conv::new(store, "fox.up1", c, c, 3, true, 1.0, rng);
        let up2 = Conv::new(store, "fox.up2", c, cfg.head_channels, 3, true, 1.0, rng);
        let out = Conv::new(store, "fox.out", cfg.head_channels, 6, 1, true, 0.1, rng);
        Self { up1, up2, out }
    }

    /// `[C, h, w] → [6, 4h, 4w]`.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let x = tape.upsample2(x)?;
        let x = self.up1.forward(tape, b, x)?;
        let x = tape.relu(x);
        let x = tape.upsample2(x)?;
        let x = self.up2.forward(tape, b, x)?;
        let x = tape.relu(x);
        let y = self.out.forward(tape, b, x)?;
        let tcl = tape.slice_channels(y, 0, 1)?;
        let tcl = tape.sigmoid(tcl);
        let rest = tape.slice_channels(y, 1, 5)?;
        tape.concat(&[tcl, rest])
    }
}
