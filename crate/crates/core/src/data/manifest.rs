//! JSON-lines dataset manifests and image files.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::fox::TextAnnotation;
use crate::geometry::{Point, Polygon};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestAnnotation {
    pub points: Vec<[f64; 2]>,
    #[serde(default)]
    pub ignore: bool,
}

impl ManifestAnnotation {
    pub fn from_annotation(a: &TextAnnotation) -> Self {
        Self {
            points: a.boundary.vertices.iter().map(|p| [p.x, p.y]).collect(),
            ignore: a.ignore,
        }
    }

    pub fn polygon(&self) -> Result<Polygon> {
        Polygon::new(self.points.iter().map(|&[x, y]| Point::new(x, y)).collect())
    }

    pub fn to_annotation(&self) -> Result<TextAnnotation> {
        TextAnnotation::from_polygon(self.polygon()?, self.ignore)
    }
}

/// One manifest line. Relative image paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    #[serde(default)]
    pub annotations: Vec<ManifestAnnotation>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(e);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn resolve(manifest: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Reads a `[3, h, w]` image in `[0, 1]` from a PNG, or any tensor from a
/// `.tensor` file.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "tensor") {
        return Ok(read_tensor_file(path)?.1);
    }
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes a `.tensor` file losslessly, anything else as an 8-bit PNG.
pub fn save_image(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "tensor") {
        return write_tensor_file(path, "image", img);
    }
    let [3, h, w] = *img.shape() else {
        return Err(Error::Dimension(format!("PNG output needs [3,h,w], got {:?}", img.shape())));
    };
    let d = img.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Loads every entry's image and annotations.
pub fn load_samples(manifest: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let manifest = manifest.as_ref();
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            Ok(Sample {
                image: load_image(resolve(manifest, &e.image_path))?,
                annotations: e.annotations.iter().map(|a| a.to_annotation()).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Writes `samples` as `<stem>_<k>.tensor` images next to a manifest.
pub fn save_samples(manifest: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let manifest = manifest.as_ref();
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
    let mut entries = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let name = format!("{stem}_{k:04}.tensor");
        save_image(resolve(manifest, &name), &s.image)?;
        entries.push(ManifestEntry {
            image_path: name,
            annotations: s.annotations.iter().map(ManifestAnnotation::from_annotation).collect(),
        });
    }
    write_manifest(manifest, &entries)
}
