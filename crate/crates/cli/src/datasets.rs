//! On-disk dataset trees written by `gen-data` and read back by the
//! training commands.
//!
//! ```text
//! synthetic_shapes: image_00000.png ... + labels.json
//! synthetic_motion: clip_00000/frame_000.png ... + labels.json
//! ```
//!
//! `labels.json` holds `{"kind", "classes", "items": [{"name", "label"}]}`.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use bimm::data::{
    load_frames_dir, motion_dataset_params, read_image, render_motion_raw, write_image,
    ClipDataset, ImageDataset, ImageSpec, MotionSpec, MOTION_CLASSES, SHAPE_CLASSES,
};
use bimm::data::gen_synthetic_shapes_dataset;
use bimm::Error;
use serde_json::{json, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DataKind {
    #[value(name = "synthetic_motion")]
    SyntheticMotion,
    #[value(name = "synthetic_shapes")]
    SyntheticShapes,
}

impl DataKind {
    fn name(self) -> &'static str {
        match self {
            DataKind::SyntheticMotion => "synthetic_motion",
            DataKind::SyntheticShapes => "synthetic_shapes",
        }
    }
}

fn write_labels(out: &Path, kind: DataKind, classes: &[&str], items: Vec<Value>) -> Result<()> {
    let doc = json!({ "kind": kind.name(), "classes": classes, "items": items });
    let path = out.join("labels.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

pub fn write_dataset(
    out: &Path,
    kind: DataKind,
    n: usize,
    seed: u64,
    image: &ImageSpec,
    motion: &MotionSpec,
) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Data(format!("creating {}: {e}", out.display())))?;
    let mut items = Vec::with_capacity(n);
    match kind {
        DataKind::SyntheticMotion => {
            let params = motion_dataset_params(motion, n, seed)?;
            for (i, p) in params.iter().enumerate() {
                let name = format!("clip_{i:05}");
                let dir = out.join(&name);
                fs::create_dir_all(&dir)
                    .map_err(|e| Error::Data(format!("creating {}: {e}", dir.display())))?;
                for (r, frame) in render_motion_raw(p, &motion.clip)?.iter().enumerate() {
                    write_image(&dir.join(format!("frame_{r:03}.png")), frame)?;
                }
                items.push(json!({ "name": name, "label": p.label }));
            }
            write_labels(out, kind, &MOTION_CLASSES, items)
        }
        DataKind::SyntheticShapes => {
            let ds = gen_synthetic_shapes_dataset(image, n, seed)?;
            for (i, (img, label)) in ds.images.iter().zip(&ds.labels).enumerate() {
                let name = format!("image_{i:05}.png");
                write_image(&out.join(&name), img)?;
                items.push(json!({ "name": name, "label": label }));
            }
            write_labels(out, kind, &SHAPE_CLASSES, items)
        }
    }
}

fn read_labels(dir: &Path, kind: DataKind) -> Result<Vec<(String, usize)>> {
    let path = dir.join("labels.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if doc["kind"] != kind.name() {
        return Err(Error::Data(format!("{} describes {}, expected {}", path.display(), doc["kind"], kind.name())).into());
    }
    let items = doc["items"]
        .as_array()
        .ok_or_else(|| Error::Data(format!("{}: missing items", path.display())))?;
    items
        .iter()
        .map(|it| match (it["name"].as_str(), it["label"].as_u64()) {
            (Some(n), Some(l)) => Ok((n.to_string(), l as usize)),
            _ => Err(Error::Data(format!("{}: malformed item {it}", path.display())).into()),
        })
        .collect()
}

pub fn read_shapes(dir: &Path) -> Result<ImageDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (name, label) in read_labels(dir, DataKind::SyntheticShapes)? {
        images.push(read_image(&dir.join(&name)).with_context(|| format!("image {name}"))?);
        labels.push(label);
    }
    Ok(ImageDataset { images, labels })
}

/// Clips are read with the configured temporal sampling; each keeps the
/// label recorded under its directory name.
pub fn read_motion(dir: &Path, spec: &MotionSpec, seed: u64) -> Result<ClipDataset> {
    let labels = read_labels(dir, DataKind::SyntheticMotion)?;
    let mut loaded = load_frames_dir(dir, &spec.clip, seed)?;
    loaded.sort_by(|a, b| a.name.cmp(&b.name));
    let mut clips = Vec::with_capacity(labels.len());
    let mut out_labels = Vec::with_capacity(labels.len());
    for (name, label) in labels {
        let i = loaded
            .binary_search_by(|c| c.name.as_str().cmp(&name))
            .map_err(|_| Error::Data(format!("clip {name} listed in labels.json is missing")))?;
        clips.push(loaded[i].clip.clone());
        out_labels.push(label);
    }
    Ok(ClipDataset {
        clips,
        labels: out_labels,
    })
}
