//! Images, annotations and datasets.

pub mod io;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{Extent, Region};

/// 8-bit RGB image stored as three planes (`[3, H, W]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != 3 * width * height {
            return Err(Error::invalid(
                "image",
                format!("{width}x{height} needs {} bytes, got {}", 3 * width * height, pixels.len()),
            ));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn extent(&self) -> Extent {
        Extent::new(self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Value of channel `c` at `(x, y)`.
    pub fn get(&self, c: usize, x: usize, y: usize) -> u8 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// `[3, H, W]` tensor scaled to `[-0.5, 0.5]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![3, self.height, self.width],
            self.pixels.iter().map(|&p| p as f64 / 255.0 - 0.5).collect(),
        )
        .expect("pixel count matches extent")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Class(usize),
    Attributes(Vec<bool>),
}

impl Label {
    /// Whether the label marks `class` positive.
    pub fn is_positive(&self, class: usize) -> bool {
        match self {
            Label::Class(c) => *c == class,
            Label::Attributes(bits) => bits.get(class).copied().unwrap_or(false),
        }
    }
}

/// A contextual cue planted near a person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cue {
    pub class: usize,
    pub region: Region,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub region: Region,
    pub label: Label,
    /// Planted cues that define this instance's label.
    #[serde(default)]
    pub cues: Vec<Cue>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// Frame grouping id for frame-level evaluation.
    pub frame: String,
    pub image: Image,
    pub instances: Vec<Instance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub multilabel: bool,
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    pub fn num_instances(&self) -> usize {
        self.images.iter().map(|r| r.instances.len()).sum()
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.id == id)
    }

    /// Checks labels, regions and ids for internal consistency.
    pub fn validate(&self) -> Result<()> {
        let a = self.classes.len();
        let mut ids = std::collections::HashSet::new();
        for rec in &self.images {
            if !ids.insert(rec.id.as_str()) {
                return Err(Error::Config(format!("duplicate image id {:?}", rec.id)));
            }
            if rec.id.is_empty() || rec.id.contains(char::is_whitespace) {
                return Err(Error::Config(format!("image id {:?} must be non-empty without whitespace", rec.id)));
            }
            let extent = rec.image.extent();
            for inst in &rec.instances {
                if !inst.region.is_within(extent) {
                    return Err(Error::Config(format!("{}: instance {} lies outside the image", rec.id, inst.region)));
                }
                let ok = match (&inst.label, self.multilabel) {
                    (Label::Class(c), false) => *c < a,
                    (Label::Attributes(bits), true) => bits.len() == a,
                    _ => false,
                };
                if !ok {
                    return Err(Error::Config(format!("{}: label {:?} does not fit {a} classes", rec.id, inst.label)));
                }
            }
        }
        Ok(())
    }
}
