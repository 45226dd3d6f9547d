//! Region proposals: a deterministic multi-scale grid generator and a reader
//! for externally computed proposals.
//!
//! File format, one region per line, whitespace separated:
//!
//! ```text
//! <image_id> <x1> <y1> <x2> <y2>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Extent, ProposalSet, Region};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Box side lengths in pixels (geometric mean of width and height).
    pub scales: Vec<f64>,
    /// Width / height ratios.
    pub aspect_ratios: Vec<f64>,
    /// Grid stride as a fraction of the box side.
    pub stride_fraction: f64,
    /// When set, every box is displaced by a seeded offset of up to a quarter
    /// stride before clipping. `None` keeps the exact grid.
    pub jitter_seed: Option<u64>,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            scales: vec![16.0, 24.0, 32.0, 48.0, 64.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            stride_fraction: 0.5,
            jitter_seed: None,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("proposal scales must be positive".into()));
        }
        if self.aspect_ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::Config("aspect ratios must be positive".into()));
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return Err(Error::Config("stride_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Grid offsets `0, stride, 2*stride, ...` that keep a box of `size` inside
/// `limit`, plus one flush-right offset when the grid stops short of the edge.
fn grid_offsets(size: f64, limit: f64, stride: f64) -> Vec<f64> {
    if size >= limit {
        return vec![0.0];
    }
    let last = limit - size;
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let o = k as f64 * stride;
        if o > last {
            break;
        }
        out.push(o);
        k += 1;
    }
    if out.last().is_none_or(|&o| o < last) {
        out.push(last);
    }
    out
}

/// Deterministic multi-scale grid of boxes covering the image.
///
/// Boxes are emitted scale by scale, then ratio by ratio, then row-major;
/// boxes are clipped to the image and exact duplicates dropped.
pub fn generate(image_id: &str, extent: Extent, cfg: &ProposalConfig) -> Result<ProposalSet> {
    cfg.validate()?;
    if extent.width == 0 || extent.height == 0 {
        return Err(Error::Config("image extent must be positive".into()));
    }
    let (w_img, h_img) = (extent.width as f64, extent.height as f64);
    let mut rng = cfg.jitter_seed.map(ChaCha8Rng::seed_from_u64);
    let mut boxes = Vec::new();
    for &scale in &cfg.scales {
        for &ratio in &cfg.aspect_ratios {
            let w = scale * ratio.sqrt();
            let h = scale / ratio.sqrt();
            let xs = grid_offsets(w, w_img, cfg.stride_fraction * w);
            let ys = grid_offsets(h, h_img, cfg.stride_fraction * h);
            for &y in &ys {
                for &x in &xs {
                    let (mut dx, mut dy) = (0.0, 0.0);
                    if let Some(rng) = rng.as_mut() {
                        let jx = 0.25 * cfg.stride_fraction * w;
                        let jy = 0.25 * cfg.stride_fraction * h;
                        dx = rng.gen_range(-jx..=jx);
                        dy = rng.gen_range(-jy..=jy);
                    }
                    let raw = Region::new(x + dx, y + dy, x + dx + w, y + dy + h)?;
                    if let Ok(clipped) = raw.clip(extent) {
                        boxes.push(clipped);
                    }
                }
            }
        }
    }
    if boxes.is_empty() {
        return Err(Error::NoProposals);
    }
    Ok(ProposalSet::new(image_id, extent, boxes))
}

/// Reads a proposals file. `extent_of` supplies each image's size; regions
/// poking outside it are clipped with a warning.
pub fn load_proposals(
    path: impl AsRef<Path>,
    extent_of: impl Fn(&str) -> Option<Extent>,
) -> Result<BTreeMap<String, ProposalSet>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_proposals(&text, path, extent_of)
}

pub(crate) fn parse_proposals(
    text: &str,
    path: &Path,
    extent_of: impl Fn(&str) -> Option<Extent>,
) -> Result<BTreeMap<String, ProposalSet>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    // insertion order of images is irrelevant; region order within an image is kept
    let mut per_image: BTreeMap<String, (Extent, Vec<Region>)> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(parse_err(lineno, format!("expected 5 fields, found {}", fields.len())));
        }
        let mut c = [0.0f64; 4];
        for (slot, f) in c.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse::<f64>()
                .map_err(|_| parse_err(lineno, format!("invalid number {f:?}")))?;
        }
        let region = Region::new(c[0], c[1], c[2], c[3]).map_err(|e| parse_err(lineno, e.to_string()))?;
        let id = fields[0];
        let extent = extent_of(id).ok_or_else(|| parse_err(lineno, format!("unknown image {id:?}")))?;
        let region = if region.is_within(extent) {
            region
        } else {
            let clipped = region.clip(extent).map_err(|e| parse_err(lineno, e.to_string()))?;
            warn!("{}:{}: region {} clipped to {}", path.display(), lineno, region, clipped);
            clipped
        };
        per_image
            .entry(id.to_string())
            .or_insert_with(|| (extent, Vec::new()))
            .1
            .push(region);
    }
    if per_image.is_empty() {
        return Err(Error::NoProposals);
    }
    Ok(per_image
        .into_iter()
        .map(|(id, (extent, regions))| {
            let n = regions.len();
            let set = ProposalSet::new(id.clone(), extent, regions);
            if set.len() != n {
                warn!("{}: image {id}: dropped {} duplicate regions", path.display(), n - set.len());
            }
            (id, set)
        })
        .collect())
}

/// Renders proposal sets in the file format. Numbers use the shortest
/// representation that parses back to the identical `f64`.
pub fn format_proposals<'a>(sets: impl IntoIterator<Item = &'a ProposalSet>) -> String {
    let mut out = String::new();
    for set in sets {
        for r in set.iter() {
            let _ = writeln!(out, "{} {} {} {} {}", set.image_id(), r.x1(), r.y1(), r.x2(), r.y2());
        }
    }
    out
}

pub fn save_proposals<'a>(path: impl AsRef<Path>, sets: impl IntoIterator<Item = &'a ProposalSet>) -> Result<()> {
    let path = path.as_ref();
    crate::data::io::write_atomic(path, format_proposals(sets).as_bytes())
}
