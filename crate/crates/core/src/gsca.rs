//! Group spatial and channel attention.
//!
//! The `C` input channels are split into `G` contiguous groups of
//! `C' = C/G`. Inside a group, 1×1 projections Θ, Φ and g are reshaped to
//! `(HW)×C'`, `C'×(HW)` and `(HW)×C'`; the `(HW)×(HW)` affinity `ΘΦ` is
//! (optionally) row-softmaxed and applied to g. A separate branch of two
//! 3×3 convolutions, global pooling and a fully connected layer produces one
//! sigmoid weight per channel. The weighted group outputs are concatenated
//! and added back onto the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal_init, Bindings, Conv, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Softmax,
    /// Plain matrix product, no normalization of the affinity map.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GscaConfig {
    pub groups: usize,
    pub channels: usize,
    pub normalization: Normalization,
}

impl GscaConfig {
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        let cfg = Self {
            groups,
            channels,
            normalization: Normalization::Softmax,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.channels == 0 || self.channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "{} channels cannot be split into {} groups",
                self.channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn group_width(&self) -> usize {
        self.channels / self.groups
    }
}

/// Parameter handles of one block.
#[derive(Clone, Copy, Debug)]
pub struct GscaParams {
    pub theta: Conv,
    pub phi: Conv,
    pub g: Conv,
    pub lambda_conv1: Conv,
    pub lambda_conv2: Conv,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Gsca {
    pub config: GscaConfig,
    pub params: GscaParams,
    /// Forces every channel weight to zero, so the block reduces to `Z = X`.
    pub bypass_channel_weights: bool,
}

impl Gsca {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: GscaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        // small projections keep the initial affinity map close to uniform
        let proj = |store: &mut ParamStore, tag: &str, rng: &mut R| {
            Conv::new(store, &format!("{name}.{tag}"), c, c, 1, false, 0.25, rng)
        };
        let theta = proj(store, "theta", rng);
        let phi = proj(store, "phi", rng);
        let g = proj(store, "g", rng);
        let lambda_conv1 = Conv::new(store, &format!("{name}.lambda1"), c, c, 3, true, 1.0, rng);
        let lambda_conv2 = Conv::new(store, &format!("{name}.lambda2"), c, c, 3, true, 1.0, rng);
        let fc_weight = store.add(
            format!("{name}.fc.w"),
            normal_init(rng, &[c, c], (1.0 / c as f64).sqrt()),
        );
        let fc_bias = store.add(format!("{name}.fc.b"), Tensor::zeros(&[c]));
        Ok(Self {
            config,
            params: GscaParams {
                theta,
                phi,
                g,
                lambda_conv1,
                lambda_conv2,
                fc_weight,
                fc_bias,
            },
            bypass_channel_weights: false,
        })
    }

    /// Per-channel weights `λ ∈ (0,1)^C` from the global branch.
    pub fn global_channel_weights(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let p = &self.params;
        let h = p.lambda_conv1.forward(tape, b, x)?;
        let h = tape.relu(h);
        let h = p.lambda_conv2.forward(tape, b, h)?;
        let h = tape.relu(h);
        let pooled = tape.global_avg_pool(h)?;
        let c = self.config.channels;
        let col = tape.reshape(pooled, &[c, 1])?;
        let fc = tape.matmul(b.var(p.fc_weight), col)?;
        let fc = tape.reshape(fc, &[c])?;
        let fc = tape.add(fc, b.var(p.fc_bias))?;
        Ok(tape.sigmoid(fc))
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.config.channels {
            return Err(Error::Dimension(format!(
                "gsca expects [{}, h, w], got {shape:?}",
                self.config.channels
            )));
        }
        let y = self.attend(tape, b, x)?;
        let lambda = if self.bypass_channel_weights {
            tape.constant(Tensor::zeros(&[self.config.channels]))
        } else {
            self.global_channel_weights(tape, b, x)?
        };
        let y = tape.channel_scale(y, lambda)?;
        tape.add(x, y)
    }

    /// Concatenated per-group attention outputs, before channel weighting.
    pub fn attend(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let p = &self.params;
        let theta = p.theta.forward(tape, b, x)?;
        let phi = p.phi.forward(tape, b, x)?;
        let g = p.g.forward(tape, b, x)?;
        let cw = self.config.group_width();
        let mut groups = Vec::with_capacity(self.config.groups);
        for k in 0..self.config.groups {
            let t = tape.slice_channels(theta, k * cw, cw)?;
            let f = tape.slice_channels(phi, k * cw, cw)?;
            let v = tape.slice_channels(g, k * cw, cw)?;
            groups.push(group_attention(tape, t, f, v, self.config.normalization)?);
        }
        tape.concat(&groups)
    }
}

/// Attention inside one group: all inputs are `[c'×h×w]`.
pub fn group_attention(
    tape: &mut Tape,
    theta: Var,
    phi: Var,
    g: Var,
    normalization: Normalization,
) -> Result<Var> {
    let shape = tape.shape(theta).to_vec();
    if shape.len() != 3 || tape.shape(phi) != shape.as_slice() || tape.shape(g) != shape.as_slice() {
        return Err(Error::Dimension(format!(
            "group_attention operands differ: {:?}, {:?}, {:?}",
            shape,
            tape.shape(phi),
            tape.shape(g)
        )));
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let t = tape.reshape(theta, &[c, hw])?;
    let t = tape.transpose(t)?; // (HW)×C'
    let f = tape.reshape(phi, &[c, hw])?; // C'×(HW)
    let affinity = tape.matmul(t, f)?; // (HW)×(HW)
    let affinity = match normalization {
        Normalization::Softmax => tape.softmax(affinity, 1)?,
        Normalization::Linear => affinity,
    };
    let v = tape.reshape(g, &[c, hw])?;
    let v = tape.transpose(v)?; // (HW)×C'
    let out = tape.matmul(affinity, v)?;
    let out = tape.transpose(out)?;
    tape.reshape(out, &shape)
}

/// Which multiply-accumulate count [`attention_cost`] reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostModel {
    /// `(H·W·C)² / G`: an affinity over every scalar of a group.
    Paper,
    /// `2·G·(HW)²·C'`, the two matrix products actually executed here.
    Implemented,
}

pub fn attention_cost(h: usize, w: usize, c: usize, g: usize, model: CostModel) -> Result<u128> {
    if g == 0 || c % g != 0 {
        return Err(Error::Config(format!("{c} channels cannot be split into {g} groups")));
    }
    let hw = (h * w) as u128;
    let c = c as u128;
    Ok(match model {
        CostModel::Paper => (hw * c) * (hw * c) / g as u128,
        CostModel::Implemented => 2 * g as u128 * hw * hw * (c / g as u128),
    })
}
