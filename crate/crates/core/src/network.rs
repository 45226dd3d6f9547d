//! The region classifier: shared convolutional trunk, ROI pooling, a tied
//! two-layer fully connected stack, and separate primary / secondary scoring
//! heads combined through a latent max over candidate regions.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax, Graph, NodeId, Tensor};
use crate::data::Label;
use crate::error::{Error, Result};
use crate::geometry::{candidate_set, greedy_restrict, Extent, OverlapBounds, ProposalSet, Region};

/// How the secondary term of the score is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Max over candidate secondary regions (greedy for more than one).
    #[default]
    Rstar,
    /// Primary region only.
    Rcnn,
    /// One candidate drawn uniformly per forward pass.
    Random,
    /// The whole image, no max.
    Scene,
}

impl Mode {
    pub fn uses_candidates(self) -> bool {
        matches!(self, Mode::Rstar | Mode::Random)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Rstar => "rstar",
            Mode::Rcnn => "rcnn",
            Mode::Random => "random",
            Mode::Scene => "scene",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rstar" => Ok(Mode::Rstar),
            "rcnn" => Ok(Mode::Rcnn),
            "random" => Ok(Mode::Random),
            "scene" => Ok(Mode::Scene),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mutually exclusive classes, softmax log loss.
    #[default]
    Softmax,
    /// Independent attributes, logistic cross-entropy.
    Multilabel,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(LossKind::Softmax),
            "multilabel" => Ok(LossKind::Multilabel),
            _ => Err(Error::Config(format!("unknown loss {s:?}"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Softmax => "softmax",
            LossKind::Multilabel => "multilabel",
        })
    }
}

/// One trunk stage. Every convolution is followed by a ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrunkLayer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub trunk: Vec<TrunkLayer>,
    /// ROI pooling output is `roi_bins x roi_bins` per channel.
    pub roi_bins: usize,
    /// Widths of the two tied fully connected layers.
    pub fc_widths: [usize; 2],
    pub classes: Vec<String>,
    pub loss: LossKind,
    pub mode: Mode,
    /// Number of greedily selected secondary regions (rstar only).
    pub secondary_count: usize,
    pub bounds: OverlapBounds,
}

impl ModelConfig {
    /// Desk-scale default: 64x64x3 input, two padded 3x3 conv + 2x2 pool
    /// stages (8 and 16 channels), 4x4 ROI bins, fc widths 64 and 64.
    pub fn new(classes: Vec<String>) -> Self {
        ModelConfig {
            width: 64,
            height: 64,
            channels: 3,
            trunk: vec![
                TrunkLayer::Conv {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                TrunkLayer::MaxPool { window: 2, stride: 2 },
                TrunkLayer::Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                TrunkLayer::MaxPool { window: 2, stride: 2 },
            ],
            roi_bins: 4,
            fc_widths: [64, 64],
            classes,
            loss: LossKind::Softmax,
            mode: Mode::Rstar,
            secondary_count: 1,
            bounds: OverlapBounds::default(),
        }
    }

    pub fn extent(&self) -> Extent {
        Extent::new(self.width, self.height)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// `[C, H, W]` of the trunk output.
    pub fn trunk_output(&self) -> Result<[usize; 3]> {
        let (mut c, mut h, mut w) = (self.channels, self.height, self.width);
        for layer in &self.trunk {
            let (k, s, p) = match *layer {
                TrunkLayer::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    c = out_channels;
                    (kernel, stride, padding)
                }
                TrunkLayer::MaxPool { window, stride } => (window, stride, 0),
            };
            if k == 0 || s == 0 || h + 2 * p < k || w + 2 * p < k {
                return Err(Error::Config(format!("trunk layer {layer:?} does not fit a {h}x{w} input")));
            }
            h = (h + 2 * p - k) / s + 1;
            w = (w + 2 * p - k) / s + 1;
        }
        Ok([c, h, w])
    }

    /// Feature cells per input pixel: the inverse of the trunk's total stride.
    pub fn spatial_scale(&self) -> f64 {
        let stride: usize = self
            .trunk
            .iter()
            .map(|l| match *l {
                TrunkLayer::Conv { stride, .. } | TrunkLayer::MaxPool { stride, .. } => stride,
            })
            .product();
        1.0 / stride as f64
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let [c, _, _] = self.trunk_output()?;
        Ok(c * self.roi_bins * self.roi_bins)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return Err(Error::Config("input extent must be positive".into()));
        }
        if self.classes.len() < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes.len())));
        }
        if self.roi_bins == 0 || self.fc_widths.contains(&0) {
            return Err(Error::Config("roi bins and fc widths must be positive".into()));
        }
        if self.secondary_count == 0 {
            return Err(Error::Config("secondary_count must be at least 1".into()));
        }
        let [_, h, w] = self.trunk_output()?;
        if h < self.roi_bins || w < self.roi_bins {
            return Err(Error::Config(format!(
                "trunk output {h}x{w} is smaller than the {0}x{0} ROI grid",
                self.roi_bins
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes, in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = Vec::new();
        let mut c = self.channels;
        let mut conv = 0;
        for layer in &self.trunk {
            if let TrunkLayer::Conv {
                out_channels, kernel, ..
            } = *layer
            {
                out.push((format!("trunk.conv{conv}.weight"), vec![out_channels, c, kernel, kernel]));
                out.push((format!("trunk.conv{conv}.bias"), vec![out_channels]));
                c = out_channels;
                conv += 1;
            }
        }
        let d = self.feature_dim()?;
        let [f6, f7] = self.fc_widths;
        let a = self.num_classes();
        out.push(("fc6.weight".into(), vec![f6, d]));
        out.push(("fc6.bias".into(), vec![f6]));
        out.push(("fc7.weight".into(), vec![f7, f6]));
        out.push(("fc7.bias".into(), vec![f7]));
        out.push(("primary.weight".into(), vec![a, f7]));
        out.push(("primary.bias".into(), vec![a]));
        out.push(("secondary.weight".into(), vec![a, f7]));
        out.push(("secondary.bias".into(), vec![a]));
        Ok(out)
    }
}

/// Weight matrix plus bias vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All learnable weights. The fully connected layers exist once and are
/// used by both the primary and secondary streams; only the heads differ.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub trunk: Vec<Dense>,
    pub fc6: Dense,
    pub fc7: Dense,
    pub primary: Dense,
    pub secondary: Dense,
}

/// Graph handles of a [`ModelParams`] bound into one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    nodes: Vec<NodeId>,
}

impl BoundParams {
    /// Wraps node ids given in [`ModelParams::tensors`] order.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        BoundParams { nodes }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    fn pair(&self, i: usize) -> (NodeId, NodeId) {
        (self.nodes[2 * i], self.nodes[2 * i + 1])
    }

    fn conv(&self, i: usize) -> (NodeId, NodeId) {
        self.pair(i)
    }

    fn tail(&self, from_end: usize) -> (NodeId, NodeId) {
        let n = self.nodes.len() / 2;
        self.pair(n - from_end)
    }

    fn fc6(&self) -> (NodeId, NodeId) {
        self.tail(4)
    }
    fn fc7(&self) -> (NodeId, NodeId) {
        self.tail(3)
    }
    fn primary(&self) -> (NodeId, NodeId) {
        self.tail(2)
    }
    fn secondary(&self) -> (NodeId, NodeId) {
        self.tail(1)
    }
}

impl ModelParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for d in self.trunk.iter().chain([&self.fc6, &self.fc7, &self.primary, &self.secondary]) {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for d in self
            .trunk
            .iter_mut()
            .chain([&mut self.fc6, &mut self.fc7, &mut self.primary, &mut self.secondary])
        {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    /// `(name, tensor)` pairs in storage order.
    pub fn named_tensors(&self, cfg: &ModelConfig) -> Result<Vec<(String, &Tensor)>> {
        let names = cfg.param_shapes()?;
        let tensors = self.tensors();
        if names.len() != tensors.len() {
            return Err(Error::Config(format!(
                "config describes {} tensors, params hold {}",
                names.len(),
                tensors.len()
            )));
        }
        Ok(names.into_iter().map(|(n, _)| n).zip(tensors).collect())
    }

    /// Rebuilds params from tensors in storage order, checking every shape.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = cfg.param_shapes()?;
        if shapes.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    left: t.shape().to_vec(),
                    right: shape.clone(),
                })
                .map_err(|e| Error::Config(format!("{name}: {e}")));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || Dense {
            weight: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        let convs = shapes.len() / 2 - 4;
        let trunk = (0..convs).map(|_| next()).collect();
        Ok(ModelParams {
            trunk,
            fc6: next(),
            fc7: next(),
            primary: next(),
            secondary: next(),
        })
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Inserts every tensor as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            nodes: self.tensors().into_iter().map(|t| graph.variable(t)).collect(),
        }
    }

    /// Adds the gradients of the last backward sweep into each tensor.
    pub fn accumulate_grads(&mut self, graph: &Graph, bound: &BoundParams) -> Result<()> {
        for (t, &id) in self.tensors_mut().into_iter().zip(bound.nodes()) {
            if let Some(g) = graph.grad(id) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }
}

/// Uniform `±sqrt(6 / (fan_in + fan_out))` weights and zero biases.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for (name, shape) in cfg.param_shapes()? {
        if name.ends_with(".bias") {
            tensors.push(Tensor::zeros(shape));
            continue;
        }
        let bound = init_bound(&shape);
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        tensors.push(Tensor::new(shape, values)?);
    }
    ModelParams::from_tensors(cfg, tensors)
}

/// Glorot-uniform limit for a `[out, in]` matrix or `[out, in, k, k]` kernel.
pub fn init_bound(shape: &[usize]) -> f64 {
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// One primary region and the candidate secondary regions available to it.
#[derive(Clone, Debug)]
pub struct RegionQuery<'a> {
    pub primary: Region,
    pub candidates: &'a [Region],
}

/// Scores of one primary region inside an image graph.
#[derive(Clone, Debug)]
pub struct InstanceScores {
    /// `[A]` action scores.
    pub scores: NodeId,
    /// Per action, the secondary regions that contributed (empty for rcnn).
    pub selected: Vec<Vec<Region>>,
    /// The max / pick nodes that formed the secondary terms.
    pub reductions: Vec<NodeId>,
}

/// Output of one image's forward pass.
#[derive(Clone, Debug)]
pub struct ImageForward {
    pub instances: Vec<InstanceScores>,
    /// `[K, A]` secondary head scores over all pooled regions, when computed.
    pub secondary_scores: Option<NodeId>,
    /// Pooled regions, in row order.
    pub regions: Vec<Region>,
}

fn check_inside(r: &Region, extent: Extent) -> Result<()> {
    if r.is_within(extent) {
        Ok(())
    } else {
        Err(Error::RegionOutsideImage {
            x1: r.x1(),
            y1: r.y1(),
            x2: r.x2(),
            y2: r.y2(),
            width: extent.width,
            height: extent.height,
        })
    }
}

/// Runs the trunk once on `image [C, H, W]`, pools every distinct region
/// from the shared feature map, and scores each query.
///
/// For `Mode::Rstar` the score of action `a` is the primary head on the
/// primary region plus, for each of `secondary_count` greedy rounds, the max
/// of the secondary head over the round's candidates. Round `i > 1` only
/// admits candidates whose overlap with every region already chosen for `a`
/// lies within the bounds, falling back to the whole image when none do.
pub fn forward_image(
    graph: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    image: NodeId,
    queries: &[RegionQuery<'_>],
    rng: &mut dyn RngCore,
) -> Result<ImageForward> {
    let extent = cfg.extent();
    let expected = [cfg.channels, cfg.height, cfg.width];
    if graph.shape(image) != expected {
        return Err(Error::ShapeMismatch {
            op: "forward_image",
            left: graph.shape(image).to_vec(),
            right: expected.to_vec(),
        });
    }
    let a = cfg.num_classes();
    let whole = extent.whole();
    let need_whole = match cfg.mode {
        Mode::Scene => true,
        Mode::Rstar => cfg.secondary_count > 1,
        _ => false,
    };

    // distinct regions, in first-seen order
    let mut regions: Vec<Region> = Vec::new();
    let mut rows: HashMap<[u64; 4], usize> = HashMap::new();
    let mut row_of = |r: &Region| -> usize {
        *rows.entry(r.key()).or_insert_with(|| {
            regions.push(*r);
            regions.len() - 1
        })
    };
    let mut primary_rows = Vec::with_capacity(queries.len());
    let mut candidate_rows: Vec<Vec<usize>> = Vec::with_capacity(queries.len());
    for q in queries {
        check_inside(&q.primary, extent)?;
        primary_rows.push(row_of(&q.primary));
        let mut cr = Vec::new();
        if cfg.mode.uses_candidates() {
            if q.candidates.is_empty() {
                return Err(Error::invalid("forward_image", format!("no candidates for primary {}", q.primary)));
            }
            for c in q.candidates {
                check_inside(c, extent)?;
                cr.push(row_of(c));
            }
        }
        candidate_rows.push(cr);
    }
    let whole_row = if need_whole { Some(row_of(&whole)) } else { None };

    // shared trunk
    let mut x = image;
    let mut conv = 0;
    for layer in &cfg.trunk {
        x = match *layer {
            TrunkLayer::Conv { stride, padding, .. } => {
                let (w, b) = bound.conv(conv);
                conv += 1;
                let y = graph.conv2d(x, w, b, stride, padding)?;
                graph.relu(y)
            }
            TrunkLayer::MaxPool { window, stride } => graph.max_pool2d(x, window, stride)?,
        };
    }

    // per-region features through the tied fc stack
    let pooled = graph.roi_max_pool(x, &regions, cfg.spatial_scale(), cfg.roi_bins)?;
    let flat = graph.reshape(pooled, vec![regions.len(), cfg.feature_dim()?])?;
    let (w6, b6) = bound.fc6();
    let h6 = graph.linear(flat, w6, b6)?;
    let h6 = graph.relu(h6);
    let (w7, b7) = bound.fc7();
    let h7 = graph.linear(h6, w7, b7)?;
    let phi = graph.relu(h7);

    let (wp, bp) = bound.primary();
    let prim_feats = graph.gather_rows(phi, &primary_rows)?;
    let prim_scores = graph.linear(prim_feats, wp, bp)?;

    let secondary_scores = if cfg.mode == Mode::Rcnn {
        None
    } else {
        let (ws, bs) = bound.secondary();
        Some(graph.linear(phi, ws, bs)?)
    };

    let mut instances = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let row = graph.gather_rows(prim_scores, &[qi])?;
        let mut score = graph.reshape(row, vec![a])?;
        let mut selected: Vec<Vec<Region>> = vec![Vec::new(); a];
        let mut reductions = Vec::new();
        if let Some(sec) = secondary_scores {
            let mut rounds: Vec<Vec<Vec<usize>>> = Vec::new();
            match cfg.mode {
                Mode::Rstar => rounds.push(vec![candidate_rows[qi].clone(); a]),
                Mode::Random => {
                    let pick = candidate_rows[qi][rng.gen_range(0..candidate_rows[qi].len())];
                    rounds.push(vec![vec![pick]; a]);
                }
                Mode::Scene => rounds.push(vec![vec![whole_row.expect("scene mode pools the whole image")]; a]),
                Mode::Rcnn => unreachable!(),
            }
            let candidates = ProposalSet::new("", extent, q.candidates.to_vec());
            let total_rounds = if cfg.mode == Mode::Rstar { cfg.secondary_count } else { 1 };
            for round in 0..total_rounds {
                let allowed = if round == 0 {
                    rounds[0].clone()
                } else {
                    (0..a)
                        .map(|col| {
                            let restricted = greedy_restrict(&selected[col], &candidates, cfg.bounds);
                            if restricted.is_fallback() {
                                vec![whole_row.expect("greedy rounds pool the whole image")]
                            } else {
                                restricted.iter().map(|r| rows_lookup(&regions, r)).collect()
                            }
                        })
                        .collect()
                };
                let m = graph.reduce_max_rows_among(sec, &allowed)?;
                for (col, &r) in graph.argmax(m).expect("reduce node").iter().enumerate() {
                    selected[col].push(regions[r]);
                }
                reductions.push(m);
                score = graph.add(score, m)?;
            }
        }
        instances.push(InstanceScores {
            scores: score,
            selected,
            reductions,
        });
    }
    Ok(ImageForward {
        instances,
        secondary_scores,
        regions,
    })
}

fn rows_lookup(regions: &[Region], r: &Region) -> usize {
    regions
        .iter()
        .position(|x| x.key() == r.key())
        .expect("restricted candidates were pooled")
}

/// Loss of one instance: softmax log loss or mean logistic cross-entropy.
pub fn instance_loss(graph: &mut Graph, scores: NodeId, label: &Label, kind: LossKind) -> Result<NodeId> {
    match (kind, label) {
        (LossKind::Softmax, Label::Class(c)) => graph.softmax_logloss(scores, *c),
        (LossKind::Multilabel, Label::Attributes(bits)) => graph.sigmoid_cross_entropy(scores, bits),
        (LossKind::Multilabel, Label::Class(c)) => {
            let mut bits = vec![false; graph.shape(scores)[0]];
            *bits
                .get_mut(*c)
                .ok_or_else(|| Error::invalid("instance_loss", format!("label {c} out of range")))? = true;
            graph.sigmoid_cross_entropy(scores, &bits)
        }
        (LossKind::Softmax, Label::Attributes(_)) => Err(Error::invalid(
            "instance_loss",
            "attribute labels need the multilabel loss",
        )),
    }
}

/// Softmax over actions, or independent logistics for multilabel.
pub fn probabilities(scores: &[f64], kind: LossKind) -> Result<Vec<f64>> {
    match kind {
        LossKind::Softmax => softmax(scores),
        LossKind::Multilabel => {
            if scores.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("probabilities", "non-finite score"));
            }
            Ok(scores.iter().map(|&x| sigmoid(x)).collect())
        }
    }
}

/// Result of [`forward_scores`]: the score vector, the chosen regions and
/// the graph they were computed in (ready for `backward`).
pub struct ScoredRegion {
    pub scores: Tensor,
    pub selected: Vec<Vec<Region>>,
    pub graph: Graph,
    pub scores_node: NodeId,
    pub bound: BoundParams,
}

/// Scores one primary region against an already-built candidate set.
pub fn forward_scores(
    image: &Tensor,
    primary: &Region,
    candidates: &ProposalSet,
    params: &ModelParams,
    cfg: &ModelConfig,
    rng: &mut dyn RngCore,
) -> Result<ScoredRegion> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let img = graph.constant(image);
    let q = RegionQuery {
        primary: *primary,
        candidates: candidates.regions(),
    };
    let out = forward_image(&mut graph, &bound, cfg, img, std::slice::from_ref(&q), rng)?;
    let inst = out.instances.into_iter().next().expect("one query");
    Ok(ScoredRegion {
        scores: graph.tensor(inst.scores),
        selected: inst.selected,
        scores_node: inst.scores,
        graph,
        bound,
    })
}

/// Per-instance prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Per action, the contributing secondary regions.
    pub selected: Vec<Vec<Region>>,
}

/// Scores every primary of one image, building each candidate set from
/// `proposals` with the configured bounds.
pub fn predict(
    image: &Tensor,
    primaries: &[Region],
    proposals: &ProposalSet,
    params: &ModelParams,
    cfg: &ModelConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<Prediction>> {
    if primaries.is_empty() {
        return Ok(Vec::new());
    }
    let sets: Vec<ProposalSet> = primaries
        .iter()
        .map(|p| candidate_set(p, proposals, cfg.bounds))
        .collect();
    let queries: Vec<RegionQuery> = primaries
        .iter()
        .zip(&sets)
        .map(|(p, s)| RegionQuery {
            primary: *p,
            candidates: s.regions(),
        })
        .collect();
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let img = graph.constant(image);
    let out = forward_image(&mut graph, &bound, cfg, img, &queries, rng)?;
    out.instances
        .into_iter()
        .map(|inst| {
            let scores = graph.value(inst.scores).to_vec();
            Ok(Prediction {
                probabilities: probabilities(&scores, cfg.loss)?,
                scores,
                selected: inst.selected,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OpKind;
    use crate::proposals::{generate, ProposalConfig};

    fn classes(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn small_cfg(mode: Mode) -> ModelConfig {
        ModelConfig {
            width: 24,
            height: 24,
            channels: 3,
            trunk: vec![
                TrunkLayer::Conv {
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                TrunkLayer::MaxPool { window: 2, stride: 2 },
            ],
            roi_bins: 2,
            fc_widths: [8, 6],
            classes: classes(3),
            loss: LossKind::Softmax,
            mode,
            secondary_count: 1,
            bounds: OverlapBounds::unconstrained(),
        }
    }

    fn image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.channels * cfg.width * cfg.height;
        Tensor::new(
            vec![cfg.channels, cfg.height, cfg.width],
            (0..n).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap()
    }

    fn r(x1: f64, y1: f64, x2: f64, y2: f64) -> Region {
        Region::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::new(classes(5));
        cfg.validate().unwrap();
        assert_eq!(cfg.trunk_output().unwrap(), [16, 16, 16]);
        assert_eq!(cfg.feature_dim().unwrap(), 256);
        assert_eq!(cfg.spatial_scale(), 0.25);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(classes(1));
        assert!(cfg.validate().is_err());
        cfg.classes = classes(2);
        cfg.roi_bins = 20;
        assert!(cfg.validate().is_err());
        cfg.roi_bins = 4;
        cfg.secondary_count = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::new(classes(5));
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        let bits = |p: &ModelParams| p.tensors().iter().flat_map(|t| t.values().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&init_params(&cfg, 8).unwrap()));
        for (name, t) in a.named_tensors(&cfg).unwrap() {
            if name.ends_with(".bias") {
                assert!(t.values().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let limit = init_bound(t.shape());
                assert!(t.values().iter().all(|v| v.abs() <= limit), "{name}");
            }
        }
    }

    #[test]
    fn from_tensors_rejects_wrong_shapes() {
        let cfg = small_cfg(Mode::Rstar);
        let p = init_params(&cfg, 1).unwrap();
        let mut ts: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        ts[2] = Tensor::zeros(vec![3, 3]);
        assert!(ModelParams::from_tensors(&cfg, ts).is_err());
    }

    #[test]
    fn rcnn_equals_rstar_with_zero_secondary_head() {
        let cfg = small_cfg(Mode::Rstar);
        let mut p = init_params(&cfg, 3).unwrap();
        p.secondary.weight.values_mut().fill(0.0);
        let img = image(&cfg, 1);
        let props = generate("i", cfg.extent(), &ProposalConfig { scales: vec![8.0, 12.0], ..Default::default() }).unwrap();
        let prim = r(4., 4., 14., 18.);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cands = candidate_set(&prim, &props, cfg.bounds);
        let a = forward_scores(&img, &prim, &cands, &p, &cfg, &mut rng).unwrap();
        let rcnn = ModelConfig { mode: Mode::Rcnn, ..cfg.clone() };
        let b = forward_scores(&img, &prim, &cands, &p, &rcnn, &mut rng).unwrap();
        assert_eq!(a.scores.values(), b.scores.values());
        assert!(b.selected.iter().all(Vec::is_empty));
    }

    #[test]
    fn single_candidate_adds_secondary_term() {
        let cfg = small_cfg(Mode::Rstar);
        let p = init_params(&cfg, 5).unwrap();
        let img = image(&cfg, 2);
        let prim = r(2., 2., 12., 20.);
        let cand = r(10., 6., 22., 16.);
        let set = ProposalSet::new("i", cfg.extent(), vec![cand]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rstar = forward_scores(&img, &prim, &set, &p, &cfg, &mut rng).unwrap();
        let rcnn_cfg = ModelConfig { mode: Mode::Rcnn, ..cfg.clone() };
        let rcnn = forward_scores(&img, &prim, &set, &p, &rcnn_cfg, &mut rng).unwrap();
        // secondary head on the candidate evaluated through a primary-only pass
        // with the heads swapped
        let mut swapped = p.clone();
        std::mem::swap(&mut swapped.primary, &mut swapped.secondary);
        let sec = forward_scores(&img, &cand, &set, &swapped, &rcnn_cfg, &mut rng).unwrap();
        for i in 0..3 {
            let expect = rcnn.scores.values()[i] + sec.scores.values()[i];
            assert!((rstar.scores.values()[i] - expect).abs() < 1e-12);
        }
        assert!(rstar.selected.iter().all(|s| s == &vec![cand]));
    }

    #[test]
    fn max_dominates_any_other_candidate() {
        let cfg = small_cfg(Mode::Rstar);
        let p = init_params(&cfg, 9).unwrap();
        let img = image(&cfg, 3);
        let prim = r(6., 6., 16., 20.);
        let cands = vec![r(0., 0., 8., 8.), r(12., 0., 24., 10.), r(4., 12., 20., 24.), r(0., 10., 10., 24.)];
        let set = ProposalSet::new("i", cfg.extent(), cands.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let best = forward_scores(&img, &prim, &set, &p, &cfg, &mut rng).unwrap();
        for c in &cands {
            let one = ProposalSet::new("i", cfg.extent(), vec![*c]);
            let alt = forward_scores(&img, &prim, &one, &p, &cfg, &mut rng).unwrap();
            for a in 0..3 {
                assert!(best.scores.values()[a] >= alt.scores.values()[a]);
            }
        }
    }

    #[test]
    fn trunk_runs_once_per_image() {
        let cfg = small_cfg(Mode::Rstar);
        let p = init_params(&cfg, 1).unwrap();
        let img = image(&cfg, 4);
        let props = generate("i", cfg.extent(), &ProposalConfig { scales: vec![8.0, 12.0, 16.0], ..Default::default() }).unwrap();
        let convs = cfg.trunk.iter().filter(|l| matches!(l, TrunkLayer::Conv { .. })).count();
        for n in [1usize, 3, 7] {
            let prims: Vec<Region> = (0..n).map(|i| r(i as f64, 2., 10. + i as f64, 20.)).collect();
            let sets: Vec<ProposalSet> = prims.iter().map(|pr| candidate_set(pr, &props, cfg.bounds)).collect();
            let qs: Vec<RegionQuery> = prims.iter().zip(&sets).map(|(pr, s)| RegionQuery { primary: *pr, candidates: s.regions() }).collect();
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let x = g.constant(&img);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            forward_image(&mut g, &b, &cfg, x, &qs, &mut rng).unwrap();
            assert_eq!(g.count(OpKind::Conv2d), convs);
            assert_eq!(g.count(OpKind::RoiMaxPool), 1);
        }
    }

    #[test]
    fn scene_mode_selects_whole_image() {
        let cfg = small_cfg(Mode::Scene);
        let p = init_params(&cfg, 1).unwrap();
        let img = image(&cfg, 5);
        let props = generate("i", cfg.extent(), &ProposalConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let preds = predict(&img, &[r(2., 2., 10., 20.)], &props, &p, &cfg, &mut rng).unwrap();
        for sel in &preds[0].selected {
            assert_eq!(sel, &vec![cfg.extent().whole()]);
        }
    }

    #[test]
    fn predictions_select_from_candidate_set() {
        for (l, u) in [(0.0, 1.0), (0.1, 0.5), (0.9, 1.0)] {
            let cfg = ModelConfig { bounds: OverlapBounds::new(l, u).unwrap(), ..small_cfg(Mode::Rstar) };
            let p = init_params(&cfg, 2).unwrap();
            let img = image(&cfg, 6);
            let props = generate("i", cfg.extent(), &ProposalConfig { scales: vec![8.0, 12.0, 16.0], ..Default::default() }).unwrap();
            let prims = vec![r(2., 2., 10., 20.), r(2., 2., 10., 20.), r(12., 4., 22., 14.)];
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let preds = predict(&img, &prims, &props, &p, &cfg, &mut rng).unwrap();
            assert_eq!(preds[0], preds[1]);
            for (pr, pred) in prims.iter().zip(&preds) {
                let allowed = candidate_set(pr, &props, cfg.bounds);
                for sel in &pred.selected {
                    assert_eq!(sel.len(), 1);
                    assert!(allowed.regions().contains(&sel[0]));
                }
            }
        }
    }

    #[test]
    fn greedy_second_round_respects_bounds() {
        let cfg = ModelConfig {
            secondary_count: 2,
            bounds: OverlapBounds::new(0.0, 0.5).unwrap(),
            ..small_cfg(Mode::Rstar)
        };
        let p = init_params(&cfg, 4).unwrap();
        let img = image(&cfg, 7);
        let props = generate("i", cfg.extent(), &ProposalConfig { scales: vec![8.0, 12.0], ..Default::default() }).unwrap();
        let prim = r(6., 6., 14., 18.);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let preds = predict(&img, &[prim], &props, &p, &cfg, &mut rng).unwrap();
        for sel in &preds[0].selected {
            assert_eq!(sel.len(), 2);
            let s2 = sel[1];
            if s2.source() != crate::geometry::RegionSource::WholeImage || !props.regions().contains(&s2) {
                assert!(cfg.bounds.contains(s2.iou(&sel[0])));
                assert!(cfg.bounds.contains(s2.iou(&prim)));
            }
        }
    }

    #[test]
    fn probabilities_examples() {
        let p = probabilities(&[2.0; 4], LossKind::Softmax).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let base = [0.3, -1.2, 2.5];
        let shifted: Vec<f64> = base.iter().map(|x| x + 123.0).collect();
        let a = probabilities(&base, LossKind::Softmax).unwrap();
        let b = probabilities(&shifted, LossKind::Softmax).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(probabilities(&[0.0, 0.0], LossKind::Multilabel).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn region_outside_image_is_rejected() {
        let cfg = small_cfg(Mode::Rcnn);
        let p = init_params(&cfg, 1).unwrap();
        let img = image(&cfg, 1);
        let set = ProposalSet::new("i", cfg.extent(), vec![r(0., 0., 4., 4.)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(forward_scores(&img, &r(20., 20., 30., 30.), &set, &p, &cfg, &mut rng).is_err());
    }

    #[test]
    fn empty_primaries_give_empty_predictions() {
        let cfg = small_cfg(Mode::Rstar);
        let p = init_params(&cfg, 1).unwrap();
        let img = image(&cfg, 1);
        let set = ProposalSet::new("i", cfg.extent(), vec![r(0., 0., 4., 4.)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(predict(&img, &[], &set, &p, &cfg, &mut rng).unwrap().is_empty());
    }
}
