//! Axis-aligned regions, overlap, and candidate-set construction.
//!
//! Coordinates are continuous: a region `(x1, y1, x2, y2)` covers
//! `[x1, x2) x [y1, y2)` and has area `(x2 - x1) * (y2 - y1)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a region came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum RegionSource {
    GroundTruth,
    #[default]
    Proposal,
    WholeImage,
}

/// Integer image size in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Extent {
    pub width: usize,
    pub height: usize,
}

impl Extent {
    pub fn new(width: usize, height: usize) -> Self {
        Extent { width, height }
    }

    /// The region covering the whole image.
    pub fn whole(&self) -> Region {
        Region {
            x1: 0.0,
            y1: 0.0,
            x2: self.width as f64,
            y2: self.height as f64,
            source: RegionSource::WholeImage,
        }
    }
}

/// Axis-aligned box with strictly positive area.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawRegion", into = "RawRegion")]
pub struct Region {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    source: RegionSource,
}

#[derive(Serialize, Deserialize)]
struct RawRegion {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    #[serde(default)]
    source: RegionSource,
}

impl TryFrom<RawRegion> for Region {
    type Error = Error;

    fn try_from(r: RawRegion) -> Result<Self> {
        Region::with_source(r.x1, r.y1, r.x2, r.y2, r.source)
    }
}

impl From<Region> for RawRegion {
    fn from(r: Region) -> Self {
        RawRegion {
            x1: r.x1,
            y1: r.y1,
            x2: r.x2,
            y2: r.y2,
            source: r.source,
        }
    }
}

/// Coordinate equality; the source tag is ignored.
impl PartialEq for Region {
    fn eq(&self, other: &Self) -> bool {
        self.coords() == other.coords()
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

impl Region {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::with_source(x1, y1, x2, y2, RegionSource::Proposal)
    }

    pub fn with_source(x1: f64, y1: f64, x2: f64, y2: f64, source: RegionSource) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::DegenerateRegion { x1, y1, x2, y2 });
        }
        Ok(Region {
            x1,
            y1,
            x2,
            y2,
            source,
        })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }
    pub fn source(&self) -> RegionSource {
        self.source
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Exact bit pattern of the coordinates, usable as a hash key.
    pub fn key(&self) -> [u64; 4] {
        self.coords().map(f64::to_bits)
    }

    pub fn tagged(mut self, source: RegionSource) -> Self {
        self.source = source;
        self
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &Region) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union, in `[0, 1]`.
    pub fn iou(&self, other: &Region) -> f64 {
        if self == other {
            return 1.0;
        }
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    pub fn is_within(&self, extent: Extent) -> bool {
        self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= extent.width as f64
            && self.y2 <= extent.height as f64
    }

    /// Clip to the image; errors when nothing of the region remains inside.
    pub fn clip(&self, extent: Extent) -> Result<Region> {
        let x1 = self.x1.max(0.0);
        let y1 = self.y1.max(0.0);
        let x2 = self.x2.min(extent.width as f64);
        let y2 = self.y2.min(extent.height as f64);
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::RegionOutsideImage {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
                width: extent.width,
                height: extent.height,
            });
        }
        Region::with_source(x1, y1, x2, y2, self.source)
    }
}

/// Intersection over union between two regions.
pub fn iou(a: &Region, b: &Region) -> f64 {
    a.iou(b)
}

/// The proposals of one image, in a fixed order and without duplicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    image_id: String,
    extent: Extent,
    regions: Vec<Region>,
}

impl ProposalSet {
    /// Builds a set, keeping the first occurrence of coordinate-identical regions.
    pub fn new(image_id: impl Into<String>, extent: Extent, regions: Vec<Region>) -> Self {
        let mut seen = std::collections::HashSet::with_capacity(regions.len());
        let regions = regions
            .into_iter()
            .filter(|r| seen.insert(r.key()))
            .collect();
        ProposalSet {
            image_id: image_id.into(),
            extent,
            regions,
        }
    }

    fn whole_image_fallback(image_id: &str, extent: Extent) -> Self {
        ProposalSet {
            image_id: image_id.to_string(),
            extent,
            regions: vec![extent.whole()],
        }
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }
    pub fn extent(&self) -> Extent {
        self.extent
    }
    pub fn regions(&self) -> &[Region] {
        &self.regions
    }
    pub fn len(&self) -> usize {
        self.regions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
    pub fn iter(&self) -> std::slice::Iter<'_, Region> {
        self.regions.iter()
    }

    /// True when the set is exactly the whole-image fallback.
    pub fn is_fallback(&self) -> bool {
        self.regions.len() == 1 && self.regions[0].source == RegionSource::WholeImage
    }
}

/// Closed overlap interval `[l, u]` used to admit secondary candidates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct OverlapBounds {
    lower: f64,
    upper: f64,
}

impl TryFrom<(f64, f64)> for OverlapBounds {
    type Error = Error;
    fn try_from((l, u): (f64, f64)) -> Result<Self> {
        OverlapBounds::new(l, u)
    }
}

impl From<OverlapBounds> for (f64, f64) {
    fn from(b: OverlapBounds) -> Self {
        (b.lower, b.upper)
    }
}

impl OverlapBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lower) || !(0.0..=1.0).contains(&upper) || lower > upper {
            return Err(Error::InvalidBounds { lower, upper });
        }
        Ok(OverlapBounds { lower, upper })
    }

    /// `(0, 1)`: every proposal is a candidate.
    pub fn unconstrained() -> Self {
        OverlapBounds {
            lower: 0.0,
            upper: 1.0,
        }
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }
    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn contains(&self, overlap: f64) -> bool {
        overlap >= self.lower && overlap <= self.upper
    }
}

impl Default for OverlapBounds {
    fn default() -> Self {
        OverlapBounds {
            lower: 0.2,
            upper: 0.75,
        }
    }
}

/// Proposals whose overlap with `primary` lies in `bounds`, in proposal order.
///
/// An empty result is replaced by the single whole-image region so the
/// latent max always has at least one candidate.
pub fn candidate_set(primary: &Region, proposals: &ProposalSet, bounds: OverlapBounds) -> ProposalSet {
    greedy_restrict(std::slice::from_ref(primary), proposals, bounds)
}

/// Proposals whose overlap with every region in `selected` lies in `bounds`.
pub fn greedy_restrict(selected: &[Region], proposals: &ProposalSet, bounds: OverlapBounds) -> ProposalSet {
    let regions: Vec<Region> = proposals
        .regions
        .iter()
        .filter(|s| selected.iter().all(|x| bounds.contains(s.iou(x))))
        .copied()
        .collect();
    if regions.is_empty() {
        return ProposalSet::whole_image_fallback(&proposals.image_id, proposals.extent);
    }
    ProposalSet {
        image_id: proposals.image_id.clone(),
        extent: proposals.extent,
        regions,
    }
}

/// Ground-truth pairs plus every proposal overlapping some ground truth by
/// more than 0.5, labeled by its best-overlapping ground truth.
pub fn augment_primaries<L: Clone>(ground_truth: &[(Region, L)], proposals: &ProposalSet) -> Vec<(Region, L)> {
    let mut out: Vec<(Region, L)> = ground_truth
        .iter()
        .map(|(r, l)| (r.tagged(RegionSource::GroundTruth), l.clone()))
        .collect();
    for s in proposals.iter() {
        let mut best: Option<(usize, f64)> = None;
        for (i, (g, _)) in ground_truth.iter().enumerate() {
            let o = s.iou(g);
            // strict comparison keeps the lowest index on ties
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((i, o));
            }
        }
        if let Some((i, o)) = best {
            if o > 0.5 {
                out.push((*s, ground_truth[i].1.clone()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(x1: f64, y1: f64, x2: f64, y2: f64) -> Region {
        Region::new(x1, y1, x2, y2).unwrap()
    }

    fn set(regions: Vec<Region>) -> ProposalSet {
        ProposalSet::new("img", Extent::new(100, 100), regions)
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&r(0., 0., 10., 10.), &r(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&r(0., 0., 10., 10.), &r(20., 20., 30., 30.)), 0.0);
        // inter 50, union 150
        assert!((iou(&r(0., 0., 10., 10.), &r(5., 0., 15., 10.)) - 1.0 / 3.0).abs() < 1e-15);
        // touching edges are disjoint
        assert_eq!(iou(&r(0., 0., 10., 10.), &r(10., 0., 20., 10.)), 0.0);
    }

    #[test]
    fn degenerate_region_rejected() {
        assert!(matches!(Region::new(5., 0., 5., 10.), Err(Error::DegenerateRegion { .. })));
        assert!(Region::new(0., 3., 1., 2.).is_err());
        assert!(Region::new(0., 0., f64::NAN, 2.).is_err());
    }

    #[test]
    fn bounds_validation() {
        assert!(OverlapBounds::new(0.5, 0.2).is_err());
        assert!(OverlapBounds::new(-0.1, 0.2).is_err());
        assert!(OverlapBounds::new(0.0, 1.5).is_err());
        assert!(OverlapBounds::new(0.3, 0.3).is_ok());
    }

    #[test]
    fn candidate_set_closed_interval() {
        let primary = r(0., 0., 10., 10.);
        // iou 0.2 exactly: (0,0,10,10) vs (0,0,10,50): inter 100, union 500
        let exact = r(0., 0., 10., 50.);
        assert_eq!(primary.iou(&exact), 0.2);
        // iou 0.1: inter 100, union 1000
        let low = r(0., 0., 10., 100.);
        let s = set(vec![low, exact]);
        let b = OverlapBounds::new(0.2, 0.75).unwrap();
        let c = candidate_set(&primary, &s, b);
        assert_eq!(c.regions(), &[exact]);
    }

    #[test]
    fn candidate_set_fallback_is_whole_image() {
        let primary = r(0., 0., 10., 10.);
        let s = set(vec![r(50., 50., 60., 60.)]);
        let c = candidate_set(&primary, &s, OverlapBounds::new(0.2, 0.75).unwrap());
        assert!(c.is_fallback());
        assert_eq!(c.regions()[0], r(0., 0., 100., 100.));
    }

    #[test]
    fn unconstrained_candidates_are_everything() {
        let s = set(vec![r(50., 50., 60., 60.), r(0., 0., 10., 10.), r(1., 1., 3., 3.)]);
        let c = candidate_set(&r(0., 0., 10., 10.), &s, OverlapBounds::unconstrained());
        assert_eq!(c, s);
        let g = greedy_restrict(&[r(0., 0., 10., 10.), r(70., 0., 80., 5.)], &s, OverlapBounds::unconstrained());
        assert_eq!(g, s);
    }

    #[test]
    fn greedy_restrict_requires_all() {
        let b = OverlapBounds::new(0.2, 0.75).unwrap();
        let a = r(0., 0., 10., 10.);
        let c = r(5., 0., 15., 10.);
        // overlaps a by 1/3, c by 0
        let p = r(0., 0., 5., 10.);
        // overlaps both by 1/3
        let q = r(3., 0., 12., 10.);
        let s = set(vec![p, q]);
        assert_eq!(greedy_restrict(&[a], &s, b).regions(), &[p, q]);
        let g = greedy_restrict(&[a, c], &s, b);
        assert_eq!(g.regions(), &[q]);
    }

    #[test]
    fn augmentation_rules() {
        let a = r(0., 0., 10., 10.);
        let b = r(20., 0., 30., 10.);
        let gt = vec![(a, 0usize), (b, 1usize)];
        // iou with a exactly 0.5: inter 50+..., (0,0,10,5) inter 50 union 100
        let half = r(0., 0., 10., 5.);
        assert_eq!(half.iou(&a), 0.5);
        let same = a;
        let s = set(vec![half, same, r(21., 0., 30., 10.)]);
        let out = augment_primaries(&gt, &s);
        assert_eq!(out.len(), 4);
        assert_eq!(out[0], (a, 0));
        assert_eq!(out[1], (b, 1));
        assert_eq!(out[2], (a, 0));
        assert_eq!(out[3].1, 1);
        assert_eq!(out[0].0.source(), RegionSource::GroundTruth);
    }

    #[test]
    fn augmentation_uses_best_ground_truth() {
        // A proposal with iou 0.6 to gt A and 0.7 to gt B, A listed first
        // A = (0,0,10,10) area 100; B overlapping
        let p = r(0., 0., 10., 10.);
        // gt_a: iou 0.6 -> area(a) with p inside? use p ⊂ a: iou = 100/area(a) = 0.6
        let gt_a = r(0., 0., 10., 100.0 / 6.0);
        // gt_b: p ⊂ b, iou = 100/area(b) = 0.7 -> area 142.857..
        let gt_b = r(0., 0., 100.0 / 7.0, 10.);
        assert!((p.iou(&gt_a) - 0.6).abs() < 1e-12);
        assert!((p.iou(&gt_b) - 0.7).abs() < 1e-12);
        let out = augment_primaries(&[(gt_a, "A"), (gt_b, "B")], &set(vec![p]));
        assert_eq!(out.last().unwrap().1, "B");
    }

    #[test]
    fn proposal_set_dedup_keeps_first() {
        let a = r(0., 0., 10., 10.);
        let s = set(vec![a, r(1., 1., 2., 2.), a]);
        assert_eq!(s.len(), 2);
        assert_eq!(s.regions()[0], a);
    }

    #[test]
    fn clip_behaviour() {
        let e = Extent::new(64, 64);
        let c = r(-5., 10., 70., 20.).clip(e).unwrap();
        assert_eq!(c.coords(), [0., 10., 64., 20.]);
        assert!(r(70., 0., 80., 10.).clip(e).is_err());
    }
}
