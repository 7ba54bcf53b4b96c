//! Two-stage detector: text-region segmentation with rectangle proposals,
//! RoI pooling and the fiducial-point head, plus training.

mod model;
mod roi;
mod train;

pub use model::{ContextBlock, FoxHead, ModelConfig, TisModel};
pub use roi::{extract_proposals, roi_grid, text_roi_pool, RoiBox};
pub use train::{
    evaluate_loss, jitter_targets, prepare_targets, train, train_step, Adam, BoxTarget, Phase, SampleTargets, TrainConfig,
    TrainLogEntry,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::intersection_area;
use crate::fox::{decode, AttributeFrame, DecodeConfig, GeometryMaps};
use crate::geometry::{Affine, Point, Polygon};
use crate::nn::{Bindings, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Downsampling factor between the image and the shared features.
pub const FEATURE_STRIDE: usize = 4;

/// Inference and target-layout settings shared by training and detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Pooled RoI size at feature resolution; the head output is 4× larger.
    pub roi_h: usize,
    pub roi_w: usize,
    pub margin_ratio: f64,
    /// Smallest proposal component, in feature pixels.
    pub proposal_min_area: usize,
    /// With the first stage off, the head runs on the whole feature map and
    /// no text-region gating is applied.
    pub first_stage: bool,
    /// Detections overlapping a better one by more than this fraction of
    /// the smaller area are dropped.
    pub nms_overlap: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            roi_h: 8,
            roi_w: 32,
            margin_ratio: 0.1,
            proposal_min_area: 16,
            first_stage: true,
            nms_overlap: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub polygon: Polygon,
    pub score: f64,
    pub fiducials: Vec<Point>,
}

#[derive(Clone, Debug, Default)]
pub struct Inference {
    pub detections: Vec<Detection>,
    pub proposals: Vec<RoiBox>,
    /// Text-region probabilities at feature resolution.
    pub tr: Vec<f64>,
    pub diagnostics: Vec<String>,
}

/// Parameters and layer handles of both stages.
#[derive(Clone, Debug)]
pub struct Nask {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tis: TisModel,
    pub fox: FoxHead,
}

/// Image coordinates → feature-map coordinates.
pub fn image_to_feature() -> Affine {
    let k = 1.0 / FEATURE_STRIDE as f64;
    let off = (FEATURE_STRIDE as f64 - 1.0) / 2.0;
    Affine {
        sx: k,
        tx: -off * k,
        sy: k,
        ty: -off * k,
    }
}

impl Nask {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tis = TisModel::new(&mut store, &config, &mut rng)?;
        let fox = FoxHead::new(&mut store, &config, &mut rng);
        Ok(Self { config, store, tis, fox })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    /// Rebuilds the model described by `dir/model.json` and loads its weights.
    pub fn load(dir: &Path) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
        let mut m = Self::new(config, 0)?;
        m.store.load(dir)?;
        Ok(m)
    }

    /// First stage on a taped image.
    pub fn tis_forward_tape(&self, tape: &mut Tape, b: &Bindings, image: Var) -> Result<(Var, Var)> {
        self.tis.forward(tape, b, image)
    }

    /// First stage: features `[C, H/4, W/4]` and `tr` `[H/4, W/4]`.
    pub fn tis_forward(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let x = tape.constant(image.clone());
        let (f, tr) = self.tis.forward(&mut tape, &b, x)?;
        let s = tape.shape(tr).to_vec();
        Ok((tape.value(f).clone(), tape.value(tr).reshape(&s[1..])?))
    }

    /// Full detection: proposals from the text-region map, the head on each
    /// pooled RoI, decoding, and suppression of overlapping duplicates.
    /// With the first stage off, the head runs once on the whole map.
    pub fn detect(&self, image: &Tensor, pcfg: &PipelineConfig, dcfg: &DecodeConfig) -> Result<Inference> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let x = tape.constant(image.clone());
        let (features, tr_var) = self.tis.forward(&mut tape, &b, x)?;
        let fs = tape.shape(features).to_vec();
        let (fh, fw) = (fs[1], fs[2]);
        let tr = tape.value(tr_var).data().to_vec();
        let mut out = Inference {
            tr: tr.clone(),
            ..Default::default()
        };
        let mut found = Vec::new();
        if pcfg.first_stage {
            out.proposals =
                extract_proposals(&tr, fh, fw, dcfg.t_tr, pcfg.proposal_min_area, pcfg.margin_ratio)?;
            for (k, bx) in out.proposals.iter().enumerate() {
                let pooled = text_roi_pool(&mut tape, features, bx, pcfg.roi_h, pcfg.roi_w)?;
                let head = self.fox.forward(&mut tape, &b, pooled)?;
                let to_image = bx.patch_to_image(pcfg.roi_h, pcfg.roi_w, FEATURE_STRIDE);
                let maps = head_maps(tape.value(head), to_image, Some((&tr, fh, fw)))?;
                collect(&maps, dcfg, &format!("roi {k}"), &mut found, &mut out.diagnostics)?;
            }
        } else {
            let head = self.fox.forward(&mut tape, &b, features)?;
            let maps = head_maps(tape.value(head), Affine::IDENTITY, None)?;
            collect(&maps, dcfg, "image", &mut found, &mut out.diagnostics)?;
        }
        out.detections = suppress(found, pcfg.nms_overlap);
        Ok(out)
    }
}

/// Named entry point for the full two-stage forward pass.
pub fn nask_forward(image: &Tensor, model: &Nask, pcfg: &PipelineConfig, dcfg: &DecodeConfig) -> Result<Inference> {
    model.detect(image, pcfg, dcfg)
}

/// Wraps a `[6, H, W]` head output as geometry maps with image-frame
/// attributes. `tr` is resampled from the first-stage map when given, else
/// set to 1.
pub fn head_maps(head: &Tensor, to_image: Affine, tr: Option<(&[f64], usize, usize)>) -> Result<GeometryMaps> {
    let [6, h, w] = *head.shape() else {
        return Err(Error::Dimension(format!("head output must be [6,h,w], got {:?}", head.shape())));
    };
    let d = head.data();
    let plane = |k: usize| d[k * h * w..(k + 1) * h * w].to_vec();
    let mut maps = GeometryMaps::zeros(h, w);
    maps.tcl = plane(0);
    maps.scale = plane(1);
    maps.sin_t = plane(2);
    maps.cos_t = plane(3);
    maps.sin_p = plane(4);
    maps.cos_p = plane(5);
    maps.to_image = to_image;
    maps.frame = AttributeFrame::Image;
    match tr {
        None => maps.tr.fill(1.0),
        Some((tr, fh, fw)) => {
            let to_feat = image_to_feature().compose(&to_image);
            for r in 0..h {
                for c in 0..w {
                    let p = to_feat.apply(Point::new(c as f64, r as f64));
                    maps.tr[r * w + c] = sample_bilinear(tr, fh, fw, p.y, p.x);
                }
            }
        }
    }
    Ok(maps)
}

fn sample_bilinear(m: &[f64], h: usize, w: usize, r: f64, c: f64) -> f64 {
    let r = r.clamp(0.0, (h - 1) as f64);
    let c = c.clamp(0.0, (w - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let top = m[r0 * w + c0] * (1.0 - fc) + m[r0 * w + c1] * fc;
    let bot = m[r1 * w + c0] * (1.0 - fc) + m[r1 * w + c1] * fc;
    top * (1.0 - fr) + bot * fr
}

fn collect(
    maps: &GeometryMaps,
    dcfg: &DecodeConfig,
    tag: &str,
    found: &mut Vec<Detection>,
    diagnostics: &mut Vec<String>,
) -> Result<()> {
    let dec = decode(maps, dcfg)?;
    diagnostics.extend(dec.diagnostics.into_iter().map(|d| format!("{tag}: {d}")));
    found.extend(dec.instances.into_iter().map(|i| Detection {
        polygon: i.polygon,
        score: i.score,
        fiducials: i.fiducials.points,
    }));
    Ok(())
}

/// Greedy suppression by score: a detection is dropped when its overlap
/// with an already kept one exceeds `overlap` of the smaller area.
pub fn suppress(mut dets: Vec<Detection>, overlap: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let area = d.polygon.area();
        let clash = kept.iter().any(|k| {
            let small = area.min(k.polygon.area());
            small > 0.0 && intersection_area(&d.polygon.vertices, &k.polygon.vertices) > overlap * small
        });
        if !clash {
            kept.push(d);
        }
    }
    kept
}
