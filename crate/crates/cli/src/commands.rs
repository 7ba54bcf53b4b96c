use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use nask::config::RunConfig;
use nask::data::{augment, load_image, load_samples, read_manifest, resolve, synthetic_set, Sample};
use nask::eval::{match_and_score, measure_fps, EvalReport, GtInstance};
use nask::fox::{decode, encode_geometry, GeometryMaps, TextAnnotation};
use nask::geometry::{Point, Polygon};
use nask::gsca::{attention_cost, CostModel, Gsca, GscaConfig};
use nask::nn::ParamStore;
use nask::pipeline::{evaluate_loss, prepare_targets, train, Nask, TrainLogEntry};
use nask::tensor::{macs, read_tensor_file, write_tensor_file, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{AblationAxis, Cli, Command, Common, Failure, ReportFormat};

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Defaults, then the `--config` file, the preset and the explicit flags.
pub fn resolve_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(p) = c.preset {
        cfg.apply_preset(p.into());
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.n {
        cfg.n = v;
    }
    if let Some(v) = c.groups {
        cfg.groups = v;
    }
    if let Some(v) = c.t_tr {
        cfg.t_tr = v;
    }
    if let Some(v) = c.t_tcl {
        cfg.t_tcl = v;
    }
    if let Some(v) = &c.out {
        cfg.paths.out = v.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> CmdResult {
    let mut cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::EncodeLabels { manifest } | Command::TrainToy { manifest, .. } | Command::Ablate { manifest, .. } => {
            if manifest.is_some() {
                cfg.paths.manifest = manifest.clone();
            }
        }
        Command::Eval { manifest, checkpoint, .. } | Command::Render { manifest, checkpoint, .. } => {
            if manifest.is_some() {
                cfg.paths.manifest = manifest.clone();
            }
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint.clone();
            }
        }
        Command::Decode { .. } | Command::BenchAttention { .. } => {}
    }
    if let Command::TrainToy { steps: Some(s), .. } | Command::Ablate { steps: Some(s), .. } = cli.command {
        cfg.schedule.steps = s;
    }
    cfg.validate()?;
    let out = cfg.paths.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), cfg.to_json() + "\n").context("writing resolved config")?;
    match cli.command {
        Command::EncodeLabels { .. } => encode_labels(&cfg),
        Command::Decode { maps } => decode_maps(&cfg, &maps),
        Command::TrainToy { .. } => train_toy(&cfg),
        Command::Eval {
            detections, format, fps, ..
        } => eval(&cfg, detections.as_deref(), format, fps),
        Command::BenchAttention {
            sizes,
            channels,
            group_counts,
            repeats,
        } => bench_attention(&cfg, &sizes, channels, &group_counts, repeats),
        Command::Ablate { axis, values, .. } => ablate(&cfg, axis, &values),
        Command::Render { detections, .. } => render(&cfg, detections.as_deref()),
    }
}

fn write_json_lines<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut f, &r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct IndexEntry {
    image_path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    maps: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    height: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    instances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn encode_labels(cfg: &RunConfig) -> CmdResult {
    let manifest = cfg
        .paths
        .manifest
        .as_deref()
        .ok_or_else(|| usage("encode-labels needs --manifest"))?;
    let entries = read_manifest(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let ecfg = cfg.encode_config();
    let mut index = Vec::with_capacity(entries.len());
    let mut failed = 0;
    for (k, e) in entries.iter().enumerate() {
        let name = format!("maps_{k:05}.tensor");
        let result = (|| -> nask::Result<(usize, usize, usize)> {
            let img = load_image(resolve(manifest, &e.image_path))?;
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let anns = e.annotations.iter().map(|a| a.to_annotation()).collect::<nask::Result<Vec<_>>>()?;
            let maps = encode_geometry(&anns, h, w, &ecfg)?;
            write_tensor_file(cfg.paths.out.join(&name), "geometry", &maps.to_tensor())?;
            Ok((h, w, anns.len()))
        })();
        index.push(match result {
            Ok((h, w, count)) => IndexEntry {
                image_path: e.image_path.clone(),
                maps: Some(name),
                height: Some(h),
                width: Some(w),
                instances: Some(count),
                error: None,
            },
            Err(err) => {
                failed += 1;
                eprintln!("sample {} ({}): {err}", k + 1, e.image_path);
                IndexEntry {
                    image_path: e.image_path.clone(),
                    maps: None,
                    height: None,
                    width: None,
                    instances: None,
                    error: Some(err.to_string()),
                }
            }
        });
    }
    let text = serde_json::to_string_pretty(&index).map_err(anyhow::Error::from)?;
    fs::write(cfg.paths.out.join("index.json"), text + "\n").context("writing index")?;
    println!("encoded {} of {} samples", entries.len() - failed, entries.len());
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} sample(s) failed to encode")));
    }
    Ok(())
}

#[derive(Serialize)]
pub struct DetectionLine {
    pub points: Vec<[f64; 2]>,
    pub score: f64,
}

fn decode_maps(cfg: &RunConfig, files: &[PathBuf]) -> CmdResult {
    let dcfg = cfg.decode_config();
    for path in files {
        let (_, t) = read_tensor_file(path).with_context(|| format!("reading {}", path.display()))?;
        let maps = GeometryMaps::from_tensor(&t).with_context(|| format!("{}", path.display()))?;
        let decoded = decode(&maps, &dcfg).with_context(|| format!("decoding {}", path.display()))?;
        for d in &decoded.diagnostics {
            eprintln!("{}: {d}", path.display());
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("maps");
        let target = cfg.paths.out.join(format!("{stem}.detections.jsonl"));
        write_json_lines(
            &target,
            decoded.instances.iter().map(|d| DetectionLine {
                points: d.polygon.vertices.iter().map(|p| [p.x, p.y]).collect(),
                score: d.score,
            }),
        )?;
        println!("{}: {} instance(s) -> {}", path.display(), decoded.instances.len(), target.display());
    }
    Ok(())
}

/// Training samples: the manifest, each cropped and rotated once, or a
/// synthetic set.
fn training_samples(cfg: &RunConfig) -> anyhow::Result<Vec<Sample>> {
    match &cfg.paths.manifest {
        Some(m) => {
            let raw = load_samples(m).with_context(|| format!("loading {}", m.display()))?;
            let acfg = cfg.augment_config();
            Ok(raw
                .iter()
                .enumerate()
                .map(|(k, s)| augment(s, cfg.seed.wrapping_add(k as u64), &acfg))
                .collect())
        }
        None => Ok(synthetic_set(&cfg.synth_config(), cfg.train_count, cfg.seed)?),
    }
}

fn held_out_samples(cfg: &RunConfig) -> anyhow::Result<Vec<Sample>> {
    match &cfg.paths.manifest {
        Some(m) => Ok(load_samples(m).with_context(|| format!("loading {}", m.display()))?),
        None => Ok(synthetic_set(&cfg.synth_config(), cfg.eval_count, cfg.held_out_seed())?),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    samples: usize,
    initial_loss: f64,
    final_loss: f64,
    seconds: f64,
}

fn fit(cfg: &RunConfig, samples: &[Sample], log: Option<&Path>) -> anyhow::Result<(Nask, TrainSummary)> {
    let pcfg = cfg.pipeline;
    let ecfg = cfg.encode_config();
    let targets = samples
        .iter()
        .map(|s| prepare_targets(s, &pcfg, &ecfg))
        .collect::<nask::Result<Vec<_>>>()?;
    let mut model = Nask::new(cfg.model_config(), cfg.seed)?;
    let initial = evaluate_loss(&model, samples, &targets, &cfg.weights, &pcfg)?;
    let mut writer = match log {
        Some(p) => Some(std::io::BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    let start = Instant::now();
    train(&mut model, samples, &targets, &cfg.train_config(), &pcfg, |e: &TrainLogEntry| {
        if let Some(w) = writer.as_mut() {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    if let Some(mut w) = writer {
        w.flush()?;
    }
    let seconds = start.elapsed().as_secs_f64();
    let fin = evaluate_loss(&model, samples, &targets, &cfg.weights, &pcfg)?;
    Ok((
        model,
        TrainSummary {
            steps: cfg.schedule.steps,
            samples: samples.len(),
            initial_loss: initial.total,
            final_loss: fin.total,
            seconds,
        },
    ))
}

fn train_toy(cfg: &RunConfig) -> CmdResult {
    let samples = training_samples(cfg)?;
    let out = &cfg.paths.out;
    let (model, summary) = fit(cfg, &samples, Some(&out.join("train_log.jsonl")))?;
    let ckpt = out.join("checkpoint");
    fs::create_dir_all(&ckpt).context("creating checkpoint directory")?;
    model.save(&ckpt).context("saving checkpoint")?;
    fs::write(
        out.join("train_summary.json"),
        serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)? + "\n",
    )
    .context("writing summary")?;
    println!(
        "trained {} steps on {} images: loss {:.4} -> {:.4}; checkpoint at {}",
        summary.steps,
        summary.samples,
        summary.initial_loss,
        summary.final_loss,
        ckpt.display()
    );
    Ok(())
}

fn ground_truth(s: &[TextAnnotation]) -> Vec<GtInstance> {
    s.iter()
        .map(|a| GtInstance {
            polygon: a.boundary.clone(),
            ignore: a.ignore,
        })
        .collect()
}

/// Detections per image from a manifest-format file, matched by line order.
fn detections_file(path: &Path, images: usize) -> anyhow::Result<Vec<Vec<Polygon>>> {
    let entries = read_manifest(path).with_context(|| format!("reading {}", path.display()))?;
    if entries.len() != images {
        bail!("{} lists {} images but the ground truth has {images}", path.display(), entries.len());
    }
    entries
        .iter()
        .map(|e| Ok(e.annotations.iter().map(|a| a.polygon()).collect::<nask::Result<Vec<_>>>()?))
        .collect()
}

/// Runs the checkpoint on every image and returns polygons with fiducials.
fn detect_all(cfg: &RunConfig, samples: &[Sample]) -> anyhow::Result<Vec<Vec<(Polygon, Vec<Point>)>>> {
    let model = load_checkpoint(cfg)?;
    let dcfg = cfg.decode_config();
    samples
        .iter()
        .map(|s| {
            let inf = model.detect(&s.image, &cfg.pipeline, &dcfg)?;
            Ok(inf.detections.into_iter().map(|d| (d.polygon, d.fiducials)).collect())
        })
        .collect()
}

fn load_checkpoint(cfg: &RunConfig) -> anyhow::Result<Nask> {
    let dir = cfg
        .paths
        .checkpoint
        .as_deref()
        .ok_or_else(|| anyhow!("a checkpoint or a detections file is required"))?;
    Nask::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn eval(cfg: &RunConfig, detections: Option<&Path>, format: ReportFormat, fps: bool) -> CmdResult {
    if detections.is_none() && cfg.paths.checkpoint.is_none() {
        return Err(usage("eval needs --checkpoint or --detections"));
    }
    let samples = held_out_samples(cfg)?;
    let dets: Vec<Vec<Polygon>> = match detections {
        Some(p) => detections_file(p, samples.len())?,
        None => detect_all(cfg, &samples)?
            .into_iter()
            .map(|v| v.into_iter().map(|(p, _)| p).collect())
            .collect(),
    };
    let per_image = samples
        .iter()
        .zip(&dets)
        .map(|(s, d)| match_and_score(&ground_truth(&s.annotations), d, cfg.iou_threshold).1)
        .collect();
    let fps = if fps && detections.is_none() {
        let model = load_checkpoint(cfg)?;
        let dcfg = cfg.decode_config();
        let warmup = usize::from(samples.len() > 1);
        Some(measure_fps(&samples, warmup, |s| {
            let _ = model.detect(&s.image, &cfg.pipeline, &dcfg);
        })?)
    } else {
        None
    };
    let report = EvalReport::from_images(per_image, fps);
    let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    fs::write(cfg.paths.out.join("eval.json"), json.clone() + "\n").context("writing report")?;
    match format {
        ReportFormat::Json => println!("{json}"),
        ReportFormat::Table => print!("{}", report.table("NASK")),
    }
    Ok(())
}

fn bench_attention(cfg: &RunConfig, sizes: &[usize], channels: usize, groups: &[usize], repeats: usize) -> CmdResult {
    if sizes.is_empty() || groups.is_empty() || sizes.contains(&0) {
        return Err(usage("bench-attention needs positive sizes and at least one group count"));
    }
    let mut rows = vec!["H,W,C,G,paper_cost,implemented_cost,wall_ns,counted_macs".to_string()];
    for &side in sizes {
        for &g in groups {
            let gcfg = GscaConfig {
                normalization: cfg.model.normalization,
                ..GscaConfig::new(channels, g)?
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut store = ParamStore::new();
            let block = Gsca::new(&mut store, "gsca", gcfg, &mut rng)?;
            let data = (0..channels * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Tensor::new(&[channels, side, side], data)?;
            let mut counted = 0;
            let mut wall = Vec::with_capacity(repeats.max(1));
            for _ in 0..repeats.max(1) {
                let mut tape = Tape::new();
                let b = store.bind(&mut tape);
                let xv = tape.constant(x.clone());
                macs::reset();
                let t = Instant::now();
                block.attend(&mut tape, &b, xv)?;
                wall.push(t.elapsed().as_nanos());
                counted = macs::count();
            }
            wall.sort_unstable();
            let paper = attention_cost(side, side, channels, g, CostModel::Paper)?;
            let implemented = attention_cost(side, side, channels, g, CostModel::Implemented)?;
            rows.push(format!(
                "{side},{side},{channels},{g},{paper},{implemented},{},{counted}",
                wall[wall.len() / 2]
            ));
        }
    }
    let csv = rows.join("\n") + "\n";
    fs::write(cfg.paths.out.join("bench_attention.csv"), &csv).context("writing CSV")?;
    print!("{csv}");
    Ok(())
}

fn score(cfg: &RunConfig, model: &Nask, held: &[Sample]) -> anyhow::Result<EvalReport> {
    let dcfg = cfg.decode_config();
    let per_image = held
        .iter()
        .map(|s| {
            let inf = model.detect(&s.image, &cfg.pipeline, &dcfg)?;
            let dets: Vec<Polygon> = inf.detections.into_iter().map(|d| d.polygon).collect();
            Ok(match_and_score(&ground_truth(&s.annotations), &dets, cfg.iou_threshold).1)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(EvalReport::from_images(per_image, None))
}

fn ablate(cfg: &RunConfig, axis: AblationAxis, values: &[String]) -> CmdResult {
    let mut variants = Vec::with_capacity(values.len());
    for v in values {
        let mut c = cfg.clone();
        match axis {
            AblationAxis::Groups => {
                c.groups = v.parse().map_err(|_| usage(format!("group count {v:?} is not an integer")))?;
            }
            AblationAxis::FirstStage => {
                c.pipeline.first_stage = match v.as_str() {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => return Err(usage(format!("first-stage value {v:?} is not on/off"))),
                };
            }
            AblationAxis::N => {
                c.n = v.parse().map_err(|_| usage(format!("n value {v:?} is not an integer")))?;
            }
        }
        c.validate()?;
        variants.push((v.clone(), c));
    }
    let train_set = training_samples(cfg)?;
    let held = if cfg.paths.manifest.is_some() {
        synthetic_set(&cfg.synth_config(), cfg.eval_count, cfg.held_out_seed()).map_err(anyhow::Error::from)?
    } else {
        held_out_samples(cfg)?
    };
    let axis_name = match axis {
        AblationAxis::Groups => "G",
        AblationAxis::FirstStage => "first-stage",
        AblationAxis::N => "n",
    };
    let mut rows = vec!["axis,value,precision,recall,hmean,final_loss".to_string()];
    // n only changes decoding, so one model serves the whole sweep
    let shared = if axis == AblationAxis::N {
        Some(fit(cfg, &train_set, None)?)
    } else {
        None
    };
    for (v, c) in &variants {
        let trained;
        let (model, summary) = match &shared {
            Some((m, s)) => (m, s),
            None => {
                trained = fit(c, &train_set, None)?;
                (&trained.0, &trained.1)
            }
        };
        let r = score(c, model, &held)?;
        eprintln!("{axis_name}={v}: H-mean {:.4}", r.hmean);
        rows.push(format!(
            "{axis_name},{v},{:.6},{:.6},{:.6},{:.6}",
            r.precision, r.recall, r.hmean, summary.final_loss
        ));
    }
    let csv = rows.join("\n") + "\n";
    let file = format!("ablate_{}.csv", axis_name.to_lowercase());
    fs::write(cfg.paths.out.join(file), &csv).context("writing CSV")?;
    print!("{csv}");
    Ok(())
}

fn render(cfg: &RunConfig, detections: Option<&Path>) -> CmdResult {
    let samples = held_out_samples(cfg)?;
    let dets: Vec<Vec<(Polygon, Vec<Point>)>> = match (detections, &cfg.paths.checkpoint) {
        (Some(p), _) => detections_file(p, samples.len())?
            .into_iter()
            .map(|v| v.into_iter().map(|p| (p, Vec::new())).collect())
            .collect(),
        (None, Some(_)) => detect_all(cfg, &samples)?,
        (None, None) => vec![Vec::new(); samples.len()],
    };
    for (k, (s, d)) in samples.iter().zip(&dets).enumerate() {
        let png = format!("image_{k:04}.png");
        nask::data::save_image(cfg.paths.out.join(&png), &s.image)?;
        let svg = crate::render::svg(s, &png, d);
        fs::write(cfg.paths.out.join(format!("image_{k:04}.svg")), svg).context("writing SVG")?;
    }
    println!("rendered {} image(s) to {}", samples.len(), cfg.paths.out.display());
    Ok(())
}
