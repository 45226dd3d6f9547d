//! Procedural datasets whose labels can only be read from context.
//!
//! Each image holds one to three "person" rectangles whose appearance is
//! independent of the label. The label is carried by a small glyph planted
//! near the first person, far enough from every person box that features
//! pooled over a person box alone cannot see it. Low-contrast glyphs of
//! other classes act as distractors. Images labelled with the final
//! ("other") class have no cue.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cue, Dataset, Image, ImageRecord, Instance, Label};
use crate::error::{Error, Result};
use crate::geometry::{Region, RegionSource};

pub const GLYPHS: [&str; 7] = ["disk", "cross", "bar", "ring", "diamond", "frame", "checker"];

const GLYPH_COLORS: [[f64; 3]; 7] = [
    [0.95, 0.15, 0.15],
    [0.15, 0.9, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.9, 0.15],
    [0.9, 0.2, 0.9],
    [0.15, 0.9, 0.9],
    [1.0, 1.0, 1.0],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    /// Action classes including the trailing cue-less class.
    pub classes: usize,
    /// When set, a multi-label variant with this many independent attributes.
    pub attributes: Option<usize>,
    pub instances_per_image: (usize, usize),
    pub person_width: (usize, usize),
    pub person_height: (usize, usize),
    pub glyph_size: usize,
    /// Allowed box gap between a cue and its anchor person.
    pub cue_gap: (usize, usize),
    /// Minimum gap between any glyph and any person.
    pub clearance: usize,
    pub distractors: usize,
    pub distractor_contrast: f64,
    /// Half-width of the uniform per-pixel noise.
    pub noise: f64,
    pub train_instances: usize,
    pub test_instances: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            width: 64,
            height: 64,
            classes: 5,
            attributes: None,
            instances_per_image: (1, 3),
            person_width: (8, 14),
            person_height: (14, 24),
            glyph_size: 16,
            cue_gap: (10, 18),
            clearance: 10,
            distractors: 1,
            distractor_contrast: 0.35,
            noise: 0.05,
            train_instances: 500,
            test_instances: 200,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn class_names(&self) -> Vec<String> {
        match self.attributes {
            Some(k) => GLYPHS[..k].iter().map(|g| g.to_string()).collect(),
            None => GLYPHS[..self.classes - 1]
                .iter()
                .map(|g| g.to_string())
                .chain(std::iter::once("other".to_string()))
                .collect(),
        }
    }

    fn glyph_classes(&self) -> usize {
        self.attributes.unwrap_or(self.classes - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match self.attributes {
            Some(k) if !(1..=GLYPHS.len()).contains(&k) => return bad("attributes must be between 1 and 7"),
            None if !(2..=GLYPHS.len() + 1).contains(&self.classes) => return bad("classes must be between 2 and 8"),
            _ => {}
        }
        let (lo, hi) = self.instances_per_image;
        if lo == 0 || lo > hi {
            return bad("instances_per_image must satisfy 1 <= min <= max");
        }
        for (a, b) in [self.person_width, self.person_height, self.cue_gap] {
            if a > b {
                return bad("ranges must satisfy min <= max");
            }
        }
        if self.person_width.0 == 0 || self.person_height.0 == 0 || self.glyph_size < 4 {
            return bad("persons need positive size and glyphs at least 4 pixels");
        }
        if self.person_width.1 > self.width || self.person_height.1 > self.height || self.glyph_size > self.width.min(self.height) {
            return bad("objects must fit the image");
        }
        if self.cue_gap.0 < self.clearance {
            return bad("cue_gap minimum must be at least the clearance");
        }
        if !(0.0..=1.0).contains(&self.distractor_contrast) || !(0.0..=0.5).contains(&self.noise) {
            return bad("distractor_contrast must lie in [0, 1] and noise in [0, 0.5]");
        }
        Ok(())
    }
}

/// Pixel box with exclusive upper corner.
#[derive(Clone, Copy, Debug)]
struct PBox {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
}

impl PBox {
    /// Chebyshev distance between the boxes; 0 when they touch or overlap.
    fn gap(&self, o: &PBox) -> i64 {
        let gx = (o.x - (self.x + self.w)).max(self.x - (o.x + o.w)).max(0);
        let gy = (o.y - (self.y + self.h)).max(self.y - (o.y + o.h)).max(0);
        gx.max(gy)
    }

    fn overlaps(&self, o: &PBox) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }

    fn region(&self, source: RegionSource) -> Region {
        Region::with_source(
            self.x as f64,
            self.y as f64,
            (self.x + self.w) as f64,
            (self.y + self.h) as f64,
            source,
        )
        .expect("positive box")
    }
}

/// Glyph shape of `class` on a `size x size` grid, row-major.
pub fn glyph_mask(class: usize, size: usize) -> Vec<bool> {
    let c = (size as f64 - 1.0) / 2.0;
    let r = size as f64 / 2.0;
    let t = (size / 6).max(1) as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let d2 = dx * dx + dy * dy;
            let on = match class % GLYPHS.len() {
                0 => d2 <= r * r,
                1 => dx.abs() <= t || dy.abs() <= t,
                2 => dx.abs() <= 1.5 * t,
                3 => d2 <= r * r && d2 >= (r - 2.0 * t) * (r - 2.0 * t),
                4 => dx.abs() + dy.abs() <= r,
                5 => {
                    let e = 2 * t as usize;
                    x < e || y < e || x + e >= size || y + e >= size
                }
                _ => ((x * 3 / size) + (y * 3 / size)) % 2 == 0,
            };
            out.push(on);
        }
    }
    out
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(w: usize, h: usize, bg: [f64; 3]) -> Self {
        let mut px = vec![0.0; 3 * w * h];
        for (c, &v) in bg.iter().enumerate() {
            px[c * w * h..(c + 1) * w * h].fill(v);
        }
        Canvas { w, h, px }
    }

    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        for (c, &v) in color.iter().enumerate() {
            let p = &mut self.px[(c * self.h + y) * self.w + x];
            *p = (1.0 - alpha) * *p + alpha * v;
        }
    }

    fn fill(&mut self, b: &PBox, color: [f64; 3]) {
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                self.blend(x as usize, y as usize, color, 1.0);
            }
        }
    }

    fn glyph(&mut self, b: &PBox, class: usize, alpha: f64) {
        let size = b.w as usize;
        for (i, on) in glyph_mask(class, size).into_iter().enumerate() {
            if on {
                let (gx, gy) = (i % size, i / size);
                self.blend(b.x as usize + gx, b.y as usize + gy, GLYPH_COLORS[class % GLYPHS.len()], alpha);
            }
        }
    }

    fn finish(mut self, noise: f64, rng: &mut ChaCha8Rng) -> Image {
        if noise > 0.0 {
            for p in &mut self.px {
                *p += rng.gen_range(-noise..=noise);
            }
        }
        let bytes = self.px.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Image::new(self.w, self.h, bytes).expect("canvas size")
    }
}

const MAX_ATTEMPTS: usize = 500;

struct Layout {
    persons: Vec<PBox>,
    cues: Vec<(usize, PBox)>,
    distractors: Vec<(usize, PBox)>,
}

fn place_persons(cfg: &SyntheticConfig, n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<PBox>> {
    let mut persons: Vec<PBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..50 {
            let w = rng.gen_range(cfg.person_width.0..=cfg.person_width.1) as i64;
            let h = rng.gen_range(cfg.person_height.0..=cfg.person_height.1) as i64;
            let b = PBox {
                x: rng.gen_range(0..=cfg.width as i64 - w),
                y: rng.gen_range(0..=cfg.height as i64 - h),
                w,
                h,
            };
            if persons.iter().all(|p| p.gap(&b) >= 2) {
                persons.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(persons)
}

/// Every glyph position satisfying `ok`, in row-major order.
fn glyph_positions(cfg: &SyntheticConfig, ok: impl Fn(&PBox) -> bool) -> Vec<PBox> {
    let g = cfg.glyph_size as i64;
    let mut out = Vec::new();
    for y in 0..=cfg.height as i64 - g {
        for x in 0..=cfg.width as i64 - g {
            let b = PBox { x, y, w: g, h: g };
            if ok(&b) {
                out.push(b);
            }
        }
    }
    out
}

fn layout(cfg: &SyntheticConfig, n: usize, cue_classes: &[usize], rng: &mut ChaCha8Rng) -> Result<Layout> {
    let clear = cfg.clearance as i64;
    let (gmin, gmax) = (cfg.cue_gap.0 as i64, cfg.cue_gap.1 as i64);
    'attempt: for _ in 0..MAX_ATTEMPTS {
        let Some(persons) = place_persons(cfg, n, rng) else {
            continue;
        };
        let anchor = persons[0];
        let mut cues: Vec<(usize, PBox)> = Vec::new();
        for &class in cue_classes {
            let spots = glyph_positions(cfg, |b| {
                let d = anchor.gap(b);
                (gmin..=gmax).contains(&d)
                    && persons.iter().all(|p| p.gap(b) >= clear)
                    && cues.iter().all(|(_, c)| c.gap(b) >= 2)
            });
            match spots.choose(rng) {
                Some(&b) => cues.push((class, b)),
                None => continue 'attempt,
            }
        }
        let label_set: Vec<usize> = cue_classes.to_vec();
        let pool: Vec<usize> = (0..cfg.glyph_classes()).filter(|c| !label_set.contains(c)).collect();
        let mut distractors: Vec<(usize, PBox)> = Vec::new();
        for _ in 0..cfg.distractors {
            let Some(&class) = pool.choose(rng) else { break };
            let spots = glyph_positions(cfg, |b| {
                persons.iter().all(|p| p.gap(b) >= clear)
                    && cues.iter().chain(&distractors).all(|(_, c)| c.gap(b) >= 2 && !c.overlaps(b))
            });
            if let Some(&b) = spots.choose(rng) {
                distractors.push((class, b));
            }
        }
        return Ok(Layout {
            persons,
            cues,
            distractors,
        });
    }
    Err(Error::Placement(format!(
        "could not place {n} persons and {} cues in a {}x{} image after {MAX_ATTEMPTS} attempts",
        cue_classes.len(),
        cfg.width,
        cfg.height
    )))
}

fn render(cfg: &SyntheticConfig, lay: &Layout, rng: &mut ChaCha8Rng) -> Image {
    let base = rng.gen_range(0.3..0.45);
    let bg = [0, 1, 2].map(|_| base + rng.gen_range(-0.03..0.03));
    let mut canvas = Canvas::new(cfg.width, cfg.height, bg);
    for p in &lay.persons {
        let body = [rng.gen_range(0.55..0.8), rng.gen_range(0.45..0.65), rng.gen_range(0.35..0.55)];
        canvas.fill(p, body.map(|v| v * 0.6));
        if p.w > 2 && p.h > 2 {
            canvas.fill(
                &PBox {
                    x: p.x + 1,
                    y: p.y + 1,
                    w: p.w - 2,
                    h: p.h - 2,
                },
                body,
            );
        }
    }
    for (class, b) in &lay.distractors {
        canvas.glyph(b, *class, cfg.distractor_contrast);
    }
    for (class, b) in &lay.cues {
        canvas.glyph(b, *class, 1.0);
    }
    canvas.finish(cfg.noise, rng)
}

fn generate_split(cfg: &SyntheticConfig, prefix: &str, target: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let classes = cfg.class_names();
    let a = classes.len();
    let mut counts = vec![0usize; a];
    let mut images = Vec::new();
    let mut total = 0;
    while total < target {
        let n = rng
            .gen_range(cfg.instances_per_image.0..=cfg.instances_per_image.1)
            .min(target - total);
        let (label, cue_classes) = match cfg.attributes {
            Some(k) => {
                let bits: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
                let on = (0..k).filter(|&j| bits[j]).collect();
                (Label::Attributes(bits), on)
            }
            None => {
                let low = *counts.iter().min().unwrap();
                let tied: Vec<usize> = (0..a).filter(|&c| counts[c] == low).collect();
                let c = *tied.choose(rng).unwrap();
                counts[c] += n;
                let cues = if c + 1 == a { vec![] } else { vec![c] };
                (Label::Class(c), cues)
            }
        };
        let lay = layout(cfg, n, &cue_classes, rng)?;
        let image = render(cfg, &lay, rng);
        let cues: Vec<Cue> = lay
            .cues
            .iter()
            .map(|(class, b)| Cue {
                class: *class,
                region: b.region(RegionSource::GroundTruth),
            })
            .collect();
        let instances = lay
            .persons
            .iter()
            .map(|p| Instance {
                region: p.region(RegionSource::GroundTruth),
                label: label.clone(),
                cues: cues.clone(),
            })
            .collect();
        let id = format!("{prefix}-{:04}", images.len());
        images.push(ImageRecord {
            frame: id.clone(),
            id,
            image,
            instances,
        });
        total += n;
    }
    Ok(Dataset {
        classes,
        multilabel: cfg.attributes.is_some(),
        images,
    })
}

/// Train and test splits, deterministic per seed.
pub fn synth_generate(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = generate_split(cfg, "train", cfg.train_instances, &mut rng)?;
    let test = generate_split(cfg, "test", cfg.test_instances, &mut rng)?;
    Ok((train, test))
}

/// Label each glyph class decodes to, or `None` when the patch under
/// `region` does not match any glyph template.
pub fn decode_glyph(image: &Image, region: &Region) -> Option<usize> {
    let size = region.width() as usize;
    let (x0, y0) = (region.x1() as usize, region.y1() as usize);
    let mut best = None;
    let mut best_err = f64::INFINITY;
    for class in 0..GLYPHS.len() {
        let mask = glyph_mask(class, size);
        let color = GLYPH_COLORS[class];
        let mut err = 0.0;
        let mut n = 0.0;
        for (i, &on) in mask.iter().enumerate() {
            if !on {
                continue;
            }
            let (x, y) = (x0 + i % size, y0 + i / size);
            for (c, &v) in color.iter().enumerate() {
                let d = image.get(c, x, y) as f64 / 255.0 - v;
                err += d * d;
                n += 1.0;
            }
        }
        // penalize templates that leave glyph-colored pixels uncovered
        for (i, &on) in mask.iter().enumerate() {
            if on {
                continue;
            }
            let (x, y) = (x0 + i % size, y0 + i / size);
            let d: f64 = color
                .iter()
                .enumerate()
                .map(|(c, &v)| (image.get(c, x, y) as f64 / 255.0 - v).powi(2))
                .sum();
            if d < 0.03 {
                err += 1.0;
            }
        }
        let score = err / n;
        if score < best_err {
            best_err = score;
            best = Some(class);
        }
    }
    best.filter(|_| best_err < 0.05)
}
