//! File formats: binary PPM images, the `Y11W` weights container, COCO-style
//! annotation sets and detection dumps.
//!
//! Weights layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "Y11W"
//! version    u32      1
//! count      u32      number of entries
//! entry*     name_len u16, name UTF-8, dtype u8 (0 = f32), rank u8,
//!            dims u32 × rank, payload f32 × ∏dims
//! ```
//!
//! The file must end exactly after the last entry.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"Y11W";
pub const WEIGHTS_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Reads a binary (`P6`) PPM with maxval 255 into a `1×3×h×w` tensor in
/// `[0, 1]`, RGB channel order.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::format(0, "unsupported magic (expected binary P6)"));
    }
    let width = parse_header_int(bytes, &mut pos, "width")?;
    let height = parse_header_int(bytes, &mut pos, "height")?;
    let maxval_at = pos;
    let maxval = parse_header_int(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(maxval_at, format!("unsupported maxval {maxval} (expected 255)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(0, "image has zero width or height"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "missing whitespace after maxval")),
    }
    let plane = width * height;
    let needed = plane * 3;
    let raster = &bytes[pos..];
    if raster.len() < needed {
        return Err(Error::format(
            bytes.len(),
            format!("truncated pixel data: need {needed} bytes, found {}", raster.len()),
        ));
    }
    if raster.len() > needed {
        return Err(Error::format(pos + needed, "trailing bytes after pixel data"));
    }
    let mut data = vec![0.0f32; needed];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new([1, 3, height, width], data)
}

/// Encodes a `1×3×h×w` tensor in `[0, 1]` as binary PPM (values rounded and clamped).
pub fn write_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.dims();
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("PPM needs a 1×3×h×w tensor, got {:?}", image.dims())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..3 {
            let v = image.data()[ch * plane + i];
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

fn skip_ws_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    skip_ws_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(start, "unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_int(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let start = *pos;
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(start, format!("invalid {what}")))
}

/// One named tensor of a weights file.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_weights(entries: &[WeightEntry]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::Weights("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Weights(format!("duplicate entry name '{}'", e.name)));
        }
        let name_len = u16::try_from(e.name.len())
            .map_err(|_| Error::Weights(format!("entry name too long: '{}'", e.name)))?;
        let rank = u8::try_from(e.dims.len())
            .map_err(|_| Error::Weights(format!("entry '{}' has too many dims", e.name)))?;
        if e.data.len() != e.dims.iter().product::<usize>() {
            return Err(Error::Weights(format!(
                "entry '{}' has {} values for dims {:?}",
                e.name,
                e.data.len(),
                e.dims
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in &e.dims {
            let d = u32::try_from(d).map_err(|_| Error::Weights(format!("entry '{}' dim too large", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn read_weights(bytes: &[u8]) -> Result<Vec<WeightEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != WEIGHTS_MAGIC {
        return Err(Error::format(0, "bad magic (expected Y11W)"));
    }
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let start = r.pos;
        let name_len = r.u16(&format!("name length of entry {i}"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &format!("name of entry {i}"))?)
            .map_err(|_| Error::format(start + 2, format!("entry {i} name is not UTF-8")))?
            .to_string();
        let dtype_at = r.pos;
        let dtype = r.u8(&format!("dtype of '{name}'"))?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(dtype_at, format!("unknown dtype {dtype} for '{name}'")));
        }
        let rank = r.u8(&format!("rank of '{name}'"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&format!("dims of '{name}'"))? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(start, format!("entry '{name}' is too large")))?;
        let payload = r.take(n, &format!("payload of '{name}'"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(Error::format(start, format!("duplicate entry name '{name}'")));
        }
        entries.push(WeightEntry { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after last entry"));
    }
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// Ground-truth annotations: a subset of the COCO detection schema.
/// Unknown fields are ignored.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        let mut images = HashSet::new();
        for im in &self.images {
            if !images.insert(im.id) {
                return Err(Error::Annotations(format!("duplicate image id {}", im.id)));
            }
        }
        let mut cats = HashSet::new();
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(Error::Annotations(format!("duplicate category id {}", c.id)));
            }
        }
        let mut ids = HashSet::new();
        for a in &self.annotations {
            if !ids.insert(a.id) {
                return Err(Error::Annotations(format!("duplicate annotation id {}", a.id)));
            }
            if !images.contains(&a.image_id) {
                return Err(Error::Annotations(format!(
                    "annotation {} references unknown image_id {}",
                    a.id, a.image_id
                )));
            }
            if !cats.contains(&a.category_id) {
                return Err(Error::Annotations(format!(
                    "annotation {} references unknown category_id {}",
                    a.id, a.category_id
                )));
            }
            let [x, y, w, h] = a.bbox;
            if !(x.is_finite() && y.is_finite() && w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
                return Err(Error::Annotations(format!(
                    "annotation {} has invalid bbox {:?} (width and height must be positive)",
                    a.id, a.bbox
                )));
            }
        }
        Ok(())
    }
}

pub fn read_annotations(text: &str) -> Result<AnnotationSet> {
    let set: AnnotationSet = serde_json::from_str(text)?;
    set.validate()?;
    Ok(set)
}

pub fn write_annotations(set: &AnnotationSet) -> Result<String> {
    Ok(serde_json::to_string_pretty(set)?)
}

/// One detection in COCO result format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

impl DumpEntry {
    /// From corner coordinates `(x1, y1, x2, y2)`.
    pub fn from_xyxy(image_id: u64, category_id: u64, xyxy: [f64; 4], score: f64) -> Self {
        DumpEntry {
            image_id,
            category_id,
            bbox: [xyxy[0], xyxy[1], xyxy[2] - xyxy[0], xyxy[3] - xyxy[1]],
            score,
        }
    }

    pub fn xyxy(&self) -> [f64; 4] {
        let [x, y, w, h] = self.bbox;
        [x, y, x + w, y + h]
    }
}

/// JSON array with one detection per line and six fixed decimals on every
/// real value, so output is byte-stable.
pub fn write_detections(dets: &[DumpEntry]) -> String {
    let mut out = String::from("[");
    for (i, d) in dets.iter().enumerate() {
        out.push_str(if i == 0 { "\n  " } else { ",\n  " });
        let _ = write!(
            out,
            "{{\"image_id\": {}, \"category_id\": {}, \"bbox\": [{:.6}, {:.6}, {:.6}, {:.6}], \"score\": {:.6}}}",
            d.image_id, d.category_id, d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3], d.score
        );
    }
    if !dets.is_empty() {
        out.push('\n');
    }
    out.push_str("]\n");
    out
}

pub fn read_detections(text: &str) -> Result<Vec<DumpEntry>> {
    let dets: Vec<DumpEntry> = serde_json::from_str(text)?;
    for (i, d) in dets.iter().enumerate() {
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::Annotations(format!("detection {i} has score {} outside [0, 1]", d.score)));
        }
        if !(d.bbox[2] >= 0.0 && d.bbox[3] >= 0.0) {
            return Err(Error::Annotations(format!("detection {i} has negative box size")));
        }
    }
    Ok(dets)
}
