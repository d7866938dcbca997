//! Ground-truth annotation readers.
//!
//! Three formats are understood: the internal line-delimited JSON schema, the
//! PASCAL v1.00 text files shipped with Penn-Fudan and INRIA Person, and
//! PASCAL VOC XML.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;

/// One line of the internal annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    /// `[x, y, w, h]` in pixels.
    pub boxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_factor: Option<f64>,
}

impl AnnotationRecord {
    pub fn rects(&self) -> Vec<Rect> {
        self.boxes
            .iter()
            .map(|b| Rect::new(b[0], b[1], b[2], b[3]))
            .collect()
    }

    pub fn from_rects(image_id: impl Into<String>, rects: &[Rect]) -> Self {
        Self {
            image_id: image_id.into(),
            boxes: rects.iter().map(|r| [r.x, r.y, r.w, r.h]).collect(),
            scale_factor: None,
        }
    }
}

/// Reads an internal annotation file into a map keyed by image id.
pub fn read_jsonl(path: &Path) -> Result<BTreeMap<String, AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| {
            Error::parse("annotation line", path, format!("line {}: {e}", lineno + 1))
        })?;
        out.insert(rec.image_id.clone(), rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for rec in records {
        let line = serde_json::to_string(rec).expect("annotation records always serialize");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Parses a PASCAL v1.00 text annotation (Penn-Fudan, INRIA Person).
///
/// Boxes are written as `(Xmin, Ymin) - (Xmax, Ymax)` with a 1-based,
/// inclusive pixel convention; they are returned 0-based with exclusive
/// extent, so `w = Xmax - Xmin + 1`.
pub fn parse_pascal_text(text: &str, path: &Path) -> Result<Vec<Rect>> {
    let mut boxes = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if !line.starts_with("Bounding box for object") {
            continue;
        }
        let (_, coords) = line
            .rsplit_once(':')
            .ok_or_else(|| Error::parse("PASCAL text annotation", path, line.to_string()))?;
        let nums: Vec<f64> = coords
            .split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
            .filter(|t| !t.is_empty() && *t != "-")
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse("PASCAL text annotation", path, format!("{line}: {e}")))?;
        if nums.len() != 4 {
            return Err(Error::parse(
                "PASCAL text annotation",
                path,
                format!("expected 4 coordinates in `{line}`"),
            ));
        }
        let (x0, y0, x1, y1) = (nums[0], nums[1], nums[2], nums[3]);
        boxes.push(Rect::new(x0 - 1.0, y0 - 1.0, x1 - x0 + 1.0, y1 - y0 + 1.0));
    }
    Ok(boxes)
}

/// Parses a PASCAL VOC XML annotation. Same 1-based inclusive convention as
/// the text format. Only `person` objects are kept when `class` is given.
pub fn parse_voc_xml(text: &str, path: &Path, class: Option<&str>) -> Result<Vec<Rect>> {
    let doc = roxmltree::Document::parse(text)
        .map_err(|e| Error::parse("VOC XML annotation", path, e.to_string()))?;
    let mut boxes = Vec::new();
    for obj in doc.descendants().filter(|n| n.has_tag_name("object")) {
        if let Some(want) = class {
            let name = obj
                .children()
                .find(|n| n.has_tag_name("name"))
                .and_then(|n| n.text())
                .unwrap_or("")
                .trim();
            if name != want {
                continue;
            }
        }
        let Some(bb) = obj.children().find(|n| n.has_tag_name("bndbox")) else {
            continue;
        };
        let field = |tag: &str| -> Result<f64> {
            bb.children()
                .find(|n| n.has_tag_name(tag))
                .and_then(|n| n.text())
                .and_then(|t| t.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::parse("VOC XML annotation", path, format!("missing or bad <{tag}>")))
        };
        let (x0, y0, x1, y1) = (field("xmin")?, field("ymin")?, field("xmax")?, field("ymax")?);
        boxes.push(Rect::new(x0 - 1.0, y0 - 1.0, x1 - x0 + 1.0, y1 - y0 + 1.0));
    }
    Ok(boxes)
}
