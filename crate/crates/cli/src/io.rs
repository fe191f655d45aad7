use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use idpp::evaluation::EvalImage;
use idpp::geometry::{BoundingBox, GroundTruthObject};

/// Parses a file holding either one `T` or a JSON array of them.
pub fn read_one_or_many<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        let one = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(vec![one])
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Pretty JSON to `path`, or stdout when `path` is `None`.
pub fn write_json<T: Serialize + ?Sized>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    /// `[x, y, width, height]`.
    bbox: [f64; 4],
    category_id: u32,
    #[serde(default)]
    iscrowd: u8,
}

/// Converts COCO-style annotations. Crowd regions (`iscrowd = 1`) are
/// dropped since the evaluator has no ignore regions.
pub fn coco_to_eval_images(path: &Path) -> Result<Vec<EvalImage>> {
    let coco: CocoFile = read_json(path)?;
    let mut images: Vec<EvalImage> = coco
        .images
        .iter()
        .map(|im| EvalImage { image_id: im.id, ground_truth: vec![] })
        .collect();
    images.sort_by_key(|im| im.image_id);
    for ann in coco.annotations.iter().filter(|a| a.iscrowd == 0) {
        let [x, y, w, h] = ann.bbox;
        let bbox = BoundingBox::from_xywh(x, y, w, h)
            .with_context(|| format!("annotation {} in {}", ann.id, path.display()))?;
        let slot = images
            .binary_search_by_key(&ann.image_id, |im| im.image_id)
            .map_err(|_| anyhow::anyhow!("annotation {} refers to unknown image {}", ann.id, ann.image_id))?;
        images[slot].ground_truth.push(GroundTruthObject {
            bbox,
            class_id: ann.category_id,
            instance_id: ann.id,
        });
    }
    Ok(images)
}
