use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{image_to_feature, Nask, PipelineConfig, RoiBox, FEATURE_STRIDE};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fox::{encode_geometry, encode_geometry_framed, EncodeConfig, GeometryMaps};
use crate::geometry::for_each_inside;
use crate::losses::{fox_losses_tape, ohem_cross_entropy_tape, LossReport, LossWeights, NEG_POS_RATIO};
use crate::nn::{Bindings, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

use super::roi::text_roi_pool;

/// Ground truth for one head application.
#[derive(Clone, Debug)]
pub struct BoxTarget {
    pub roi: RoiBox,
    /// Targets at head resolution; `to_image` maps them back.
    pub maps: GeometryMaps,
}

#[derive(Clone, Debug)]
pub struct SampleTargets {
    /// Text-region labels at feature resolution.
    pub tr: Vec<f64>,
    pub boxes: Vec<BoxTarget>,
    /// Whole-image targets for the head when the first stage is off; the
    /// text region covers the whole image so tcl is supervised everywhere.
    pub full: Option<GeometryMaps>,
    /// Label settings, kept for re-encoding jittered boxes.
    pub encode: EncodeConfig,
}

/// Rasterizes the targets of one sample. With the first stage on, each
/// non-ignored instance gets a box built like a proposal around its
/// feature-resolution footprint.
pub fn prepare_targets(s: &Sample, pcfg: &PipelineConfig, ecfg: &EncodeConfig) -> Result<SampleTargets> {
    let (h, w) = (s.height(), s.width());
    if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(Error::Config(format!("image size {h}×{w} is not divisible by {FEATURE_STRIDE}")));
    }
    let (fh, fw) = (h / FEATURE_STRIDE, w / FEATURE_STRIDE);
    let to_feat = image_to_feature();
    let mut tr = vec![0.0; fh * fw];
    let mut boxes = Vec::new();
    for ann in &s.annotations {
        let poly: Vec<_> = ann.boundary.vertices.iter().map(|&p| to_feat.apply(p)).collect();
        let mut pixels = Vec::new();
        for_each_inside(&poly, fh, fw, |r, c| {
            tr[r * fw + c] = 1.0;
            pixels.push(r * fw + c);
        });
        if ann.ignore || !pcfg.first_stage {
            continue;
        }
        let Some(roi) = RoiBox::around(&pixels, fh, fw, pcfg.margin_ratio, 1.0) else {
            continue;
        };
        let to_image = roi.patch_to_image(pcfg.roi_h, pcfg.roi_w, FEATURE_STRIDE);
        let maps = encode_geometry_framed(
            &s.annotations,
            FEATURE_STRIDE * pcfg.roi_h,
            FEATURE_STRIDE * pcfg.roi_w,
            to_image,
            ecfg,
        )?;
        boxes.push(BoxTarget { roi, maps });
    }
    let full = if pcfg.first_stage {
        None
    } else {
        let mut maps = encode_geometry(&s.annotations, h, w, ecfg)?;
        maps.tr.fill(1.0);
        Some(maps)
    };
    Ok(SampleTargets {
        tr,
        boxes,
        full,
        encode: *ecfg,
    })
}

/// Copy of `tg` whose boxes have each edge moved by up to `amount` of the
/// box side, clamped to the feature map, with head targets re-encoded.
pub fn jitter_targets<R: Rng + ?Sized>(
    s: &Sample,
    tg: &SampleTargets,
    pcfg: &PipelineConfig,
    amount: f64,
    rng: &mut R,
) -> Result<SampleTargets> {
    let (fh, fw) = ((s.height() / FEATURE_STRIDE) as f64, (s.width() / FEATURE_STRIDE) as f64);
    let mut out = SampleTargets {
        tr: tg.tr.clone(),
        boxes: Vec::with_capacity(tg.boxes.len()),
        full: tg.full.clone(),
        encode: tg.encode,
    };
    for bt in &tg.boxes {
        let r = bt.roi;
        let mut shift = |side: f64| rng.random_range(-amount..=amount) * side;
        let (w, h) = (r.width(), r.height());
        let roi = RoiBox {
            x0: (r.x0 + shift(w)).clamp(0.0, fw),
            y0: (r.y0 + shift(h)).clamp(0.0, fh),
            x1: (r.x1 + shift(w)).clamp(0.0, fw),
            y1: (r.y1 + shift(h)).clamp(0.0, fh),
            score: r.score,
        };
        if roi.width() < 1.0 || roi.height() < 1.0 {
            out.boxes.push(bt.clone());
            continue;
        }
        let to_image = roi.patch_to_image(pcfg.roi_h, pcfg.roi_w, FEATURE_STRIDE);
        let maps = encode_geometry_framed(
            &s.annotations,
            FEATURE_STRIDE * pcfg.roi_h,
            FEATURE_STRIDE * pcfg.roi_w,
            to_image,
            &tg.encode,
        )?;
        out.boxes.push(BoxTarget { roi, maps });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Warm-up: the text-region term only.
    TisOnly,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Leading steps that train the first stage alone.
    pub warmup_steps: usize,
    pub lr: f64,
    /// The rate follows a cosine from `lr` down to `lr·final_lr_ratio`.
    pub final_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub seed: u64,
    /// Stops second-stage gradients at the pooled features.
    pub detach_roi: bool,
    /// Each training box edge moves by up to this fraction of the box side,
    /// drawn afresh every step, with targets re-encoded for the moved box.
    pub box_jitter: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            warmup_steps: 100,
            lr: 2e-3,
            final_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 1,
            seed: 0,
            detach_roi: false,
            box_jitter: 0.15,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps.max(1) as f64;
        let k = self.final_lr_ratio + (1.0 - self.final_lr_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * k
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.box_jitter) {
            return Err(Error::Config(format!("box jitter {} outside [0, 0.5)", self.box_jitter)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "invalid optimizer settings lr={} β1={} β2={}",
                self.lr, self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

/// Adaptive-moment gradient descent over every tensor of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, t) in store.tensors_mut().iter_mut().enumerate() {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *p -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Records the objective of one sample. FOX terms are averaged over the
/// sample's boxes.
#[allow(clippy::too_many_arguments)]
fn sample_loss(
    model: &Nask,
    tape: &mut Tape,
    b: &Bindings,
    s: &Sample,
    tg: &SampleTargets,
    weights: &LossWeights,
    phase: Phase,
    pcfg: &PipelineConfig,
    detach_roi: bool,
) -> Result<(Var, LossReport)> {
    let x = tape.constant(s.image.clone());
    let (feat, tr) = model.tis.forward(tape, b, x)?;
    let mut terms = Vec::new();
    let mut coeffs = Vec::new();
    let mut tis_val = 0.0;
    if pcfg.first_stage {
        let t = ohem_cross_entropy_tape(tape, tr, &tg.tr, NEG_POS_RATIO)?;
        tis_val = tape.value(t).data()[0];
        terms.push(t);
        coeffs.push(weights.tis);
    }
    let mut fox_vals = [0.0; 6];
    let mut excluded = 0;
    if phase == Phase::Joint {
        let fw = weights.fox();
        if pcfg.first_stage {
            let src = if detach_roi {
                let v = tape.value(feat).clone();
                tape.constant(v)
            } else {
                feat
            };
            let nb = tg.boxes.len() as f64;
            for bt in &tg.boxes {
                let pooled = text_roi_pool(tape, src, &bt.roi, pcfg.roi_h, pcfg.roi_w)?;
                let head = model.fox.forward(tape, b, pooled)?;
                let (vars, ex) = fox_losses_tape(tape, head, &bt.maps)?;
                excluded += ex;
                for k in 0..6 {
                    fox_vals[k] += tape.value(vars[k]).data()[0] / nb;
                    terms.push(vars[k]);
                    coeffs.push(fw[k] / nb);
                }
            }
        } else if let Some(full) = &tg.full {
            let head = model.fox.forward(tape, b, feat)?;
            let (vars, ex) = fox_losses_tape(tape, head, full)?;
            excluded += ex;
            for k in 0..6 {
                fox_vals[k] = tape.value(vars[k]).data()[0];
                terms.push(vars[k]);
                coeffs.push(fw[k]);
            }
        }
    }
    if terms.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok((zero, LossReport::default()));
    }
    let total = tape.weighted_sum(&terms, &coeffs)?;
    let w = if pcfg.first_stage {
        *weights
    } else {
        LossWeights { tis: 0.0, ..*weights }
    };
    Ok((total, LossReport::from_terms(tis_val, fox_vals, &w, excluded)))
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut m = LossReport::default();
    for r in reports {
        m.tis += r.tis / n;
        m.tcl += r.tcl / n;
        m.s += r.s / n;
        m.sin_t += r.sin_t / n;
        m.cos_t += r.cos_t / n;
        m.sin_p += r.sin_p / n;
        m.cos_p += r.cos_p / n;
        m.total += r.total / n;
        m.scale_excluded += r.scale_excluded;
    }
    m
}

/// One optimizer update on a batch; the objective is the batch mean.
pub fn train_step(
    model: &mut Nask,
    adam: &mut Adam,
    batch: &[(&Sample, &SampleTargets)],
    weights: &LossWeights,
    phase: Phase,
    pcfg: &PipelineConfig,
    detach_roi: bool,
) -> Result<LossReport> {
    model.store.zero_grads();
    let mut reports = Vec::with_capacity(batch.len());
    for (s, tg) in batch {
        let mut tape = Tape::new();
        let b = model.store.bind(&mut tape);
        let (loss, rep) = sample_loss(model, &mut tape, &b, s, tg, weights, phase, pcfg, detach_roi)?;
        if !rep.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss, terms {}",
                serde_json::to_string(&rep).unwrap_or_default()
            )));
        }
        let loss = tape.scale(loss, 1.0 / batch.len() as f64);
        tape.backward(loss)?;
        model.store.accumulate_grads(&tape, &b)?;
        reports.push(rep);
    }
    adam.step(&mut model.store);
    Ok(mean_report(&reports))
}

/// Mean objective over a set, both stages included, without updates.
pub fn evaluate_loss(
    model: &Nask,
    samples: &[Sample],
    targets: &[SampleTargets],
    weights: &LossWeights,
    pcfg: &PipelineConfig,
) -> Result<LossReport> {
    let mut reports = Vec::with_capacity(samples.len());
    for (s, tg) in samples.iter().zip(targets) {
        let mut tape = Tape::new();
        let b = model.store.bind(&mut tape);
        reports.push(sample_loss(model, &mut tape, &b, s, tg, weights, Phase::Joint, pcfg, false)?.1);
    }
    Ok(mean_report(&reports))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// Runs the schedule: `warmup_steps` of first-stage training, then joint
/// training, cycling through the samples in a seeded shuffled order.
pub fn train(
    model: &mut Nask,
    samples: &[Sample],
    targets: &[SampleTargets],
    tcfg: &TrainConfig,
    pcfg: &PipelineConfig,
    mut on_step: impl FnMut(&TrainLogEntry) -> Result<()>,
) -> Result<Vec<TrainLogEntry>> {
    tcfg.validate()?;
    if samples.is_empty() || samples.len() != targets.len() {
        return Err(Error::Config(format!(
            "{} samples with {} target sets",
            samples.len(),
            targets.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut adam = Adam::new(&model.store, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let mut order_batch = Vec::with_capacity(tcfg.batch);
        let mut batch = Vec::with_capacity(tcfg.batch);
        while order_batch.len() < tcfg.batch {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            order_batch.push(order.pop().expect("refilled above"));
        }
        let phase = if pcfg.first_stage && step < tcfg.warmup_steps {
            Phase::TisOnly
        } else {
            Phase::Joint
        };
        let jittered = if pcfg.first_stage && phase == Phase::Joint && tcfg.box_jitter > 0.0 {
            order_batch
                .iter()
                .map(|&k| jitter_targets(&samples[k], &targets[k], pcfg, tcfg.box_jitter, &mut rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        for (i, &k) in order_batch.iter().enumerate() {
            batch.push((&samples[k], jittered.get(i).unwrap_or(&targets[k])));
        }
        adam.lr = tcfg.lr_at(step);
        let losses = train_step(model, &mut adam, &batch, &tcfg.weights, phase, pcfg, tcfg.detach_roi)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                other => other,
            })?;
        let entry = TrainLogEntry {
            step,
            phase,
            lr: adam.lr,
            losses,
        };
        on_step(&entry)?;
        log.push(entry);
    }
    Ok(log)
}
