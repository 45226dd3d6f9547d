//! Finite-difference verification of every differentiable operator and of
//! the composite network.
//!
//! Each case builds a scalar function of some input tensors. Analytic
//! gradients come from the graph's backward sweep; numeric ones from central
//! differences. Points where a perturbation changes a discrete decision (a
//! max-type argmax or a ReLU sign) are resampled, since the function is not
//! differentiable across such a boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::data::Label;
use crate::error::{Error, Result};
use crate::geometry::{OverlapBounds, Region};
use crate::network::{forward_image, init_params, instance_loss, LossKind, Mode, ModelConfig, RegionQuery, TrunkLayer};

pub const STEP: f64 = 1e-5;
pub const SMOOTH_TOLERANCE: f64 = 1e-6;
pub const PIECEWISE_TOLERANCE: f64 = 1e-4;
const MAX_RESAMPLES: usize = 50;

/// A scalar function of sampled input tensors.
pub trait GradCase: Sync {
    fn name(&self) -> String;

    /// Whether the function is smooth everywhere (tighter tolerance).
    fn smooth(&self) -> bool;

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor>;

    /// Builds the function on leaves holding the inputs; returns a scalar node.
    fn build(&self, graph: &mut Graph, inputs: &[NodeId]) -> Result<NodeId>;

    /// Analytic gradient with respect to each input.
    fn analytic(&self, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let (mut g, leaves, out) = evaluate(self, inputs)?;
        g.backward(out)?;
        Ok(leaves.iter().map(|&l| g.grad_or_zero(l)).collect())
    }

    /// Coordinates to check per input tensor (all when fewer exist).
    fn coordinates(&self) -> usize {
        usize::MAX
    }
}

fn evaluate<C: GradCase + ?Sized>(case: &C, inputs: &[Tensor]) -> Result<(Graph, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| g.variable(t)).collect();
    let out = case.build(&mut g, &leaves)?;
    if g.value(out).len() != 1 {
        return Err(Error::invalid("gradcheck", format!("{} does not produce a scalar", case.name())));
    }
    Ok((g, leaves, out))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    /// Largest per-tensor `max|a - n| / max(max|a|, max|n|)`.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub resamples: usize,
    pub passed: bool,
}

/// Checks one case at one seed.
pub fn check<C: GradCase + ?Sized>(case: &C, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resamples = 0;
    'sample: loop {
        if resamples > MAX_RESAMPLES {
            return Err(Error::invalid(
                "gradcheck",
                format!("{}: no point away from decision boundaries after {MAX_RESAMPLES} resamples", case.name()),
            ));
        }
        let inputs = case.sample(&mut rng);
        let (base, _, _) = evaluate(case, &inputs)?;
        let signature = base.decision_signature();
        let analytic = case.analytic(&inputs)?;

        let mut worst: f64 = 0.0;
        let mut count = 0;
        for (t, grad) in analytic.iter().enumerate() {
            let n = inputs[t].len();
            let coords: Vec<usize> = if n <= case.coordinates() {
                (0..n).collect()
            } else {
                rand::seq::index::sample(&mut rng, n, case.coordinates()).into_vec()
            };
            let mut max_diff: f64 = 0.0;
            let mut max_mag: f64 = 0.0;
            for &i in &coords {
                let at = |delta: f64| -> Result<Option<f64>> {
                    let mut shifted = inputs.to_vec();
                    shifted[t].values_mut()[i] += delta;
                    let (g, _, out) = evaluate(case, &shifted)?;
                    Ok((g.decision_signature() == signature).then(|| g.value(out)[0]))
                };
                let (Some(plus), Some(minus)) = (at(STEP)?, at(-STEP)?) else {
                    resamples += 1;
                    continue 'sample;
                };
                let numeric = (plus - minus) / (2.0 * STEP);
                max_diff = max_diff.max((grad[i] - numeric).abs());
                max_mag = max_mag.max(grad[i].abs()).max(numeric.abs());
            }
            let rel = if max_mag > 0.0 { max_diff / max_mag } else { max_diff };
            worst = worst.max(rel);
            count += coords.len();
        }
        let tolerance = if case.smooth() { SMOOTH_TOLERANCE } else { PIECEWISE_TOLERANCE };
        return Ok(CheckResult {
            name: case.name(),
            seed,
            max_rel_error: worst,
            tolerance,
            coordinates: count,
            resamples,
            passed: worst <= tolerance,
        });
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("sized")
}

/// `sum_i w_i y_i` with fixed pseudo-random weights, turning any tensor into
/// a scalar that depends on every element.
fn contract(g: &mut Graph, y: NodeId) -> Result<NodeId> {
    let n = g.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let w = g.constant(&Tensor::new(vec![1, n], w)?);
    let b = g.constant(&Tensor::zeros(vec![1]));
    let flat = g.reshape(y, vec![n])?;
    let out = g.linear(flat, w, b)?;
    g.reshape(out, vec![])
}

type Builder = fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

/// A case defined by input shapes and a builder function.
pub struct OpCase {
    pub name: &'static str,
    pub smooth: bool,
    pub shapes: Vec<Vec<usize>>,
    pub scale: f64,
    pub build: Builder,
}

impl GradCase for OpCase {
    fn name(&self) -> String {
        self.name.to_string()
    }
    fn smooth(&self) -> bool {
        self.smooth
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        self.shapes.iter().map(|s| uniform(rng, s.clone(), self.scale)).collect()
    }
    fn build(&self, g: &mut Graph, x: &[NodeId]) -> Result<NodeId> {
        (self.build)(g, x)
    }
}

fn roi_regions() -> Vec<Region> {
    vec![
        Region::new(0.0, 0.0, 12.0, 12.0).unwrap(),
        Region::new(3.0, 5.0, 21.0, 17.0).unwrap(),
        Region::new(10.0, 2.0, 24.0, 24.0).unwrap(),
    ]
}

/// One case per differentiable operator.
pub fn operator_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv2d",
            smooth: true,
            shapes: vec![vec![2, 6, 7], vec![3, 2, 3, 3], vec![3]],
            scale: 1.0,
            build: |g, x| {
                let y = g.conv2d(x[0], x[1], x[2], 1, 0)?;
                contract(g, y)
            },
        },
        OpCase {
            name: "conv2d_strided_padded",
            smooth: true,
            shapes: vec![vec![2, 7, 6], vec![2, 2, 3, 3], vec![2]],
            scale: 1.0,
            build: |g, x| {
                let y = g.conv2d(x[0], x[1], x[2], 2, 1)?;
                contract(g, y)
            },
        },
        OpCase {
            name: "relu",
            smooth: false,
            shapes: vec![vec![4, 5]],
            scale: 1.0,
            build: |g, x| {
                let y = g.relu(x[0]);
                contract(g, y)
            },
        },
        OpCase {
            name: "max_pool2d",
            smooth: false,
            shapes: vec![vec![2, 6, 6]],
            scale: 1.0,
            build: |g, x| {
                let y = g.max_pool2d(x[0], 2, 2)?;
                contract(g, y)
            },
        },
        OpCase {
            name: "max_pool2d_overlapping",
            smooth: false,
            shapes: vec![vec![1, 7, 7]],
            scale: 1.0,
            build: |g, x| {
                let y = g.max_pool2d(x[0], 3, 2)?;
                contract(g, y)
            },
        },
        OpCase {
            name: "roi_max_pool",
            smooth: false,
            shapes: vec![vec![2, 6, 6]],
            scale: 1.0,
            build: |g, x| {
                let y = g.roi_max_pool(x[0], &roi_regions(), 0.25, 2)?;
                contract(g, y)
            },
        },
        OpCase {
            name: "linear",
            smooth: true,
            shapes: vec![vec![5], vec![3, 5], vec![3]],
            scale: 1.0,
            build: |g, x| {
                let y = g.linear(x[0], x[1], x[2])?;
                contract(g, y)
            },
        },
        OpCase {
            name: "linear_batched",
            smooth: true,
            shapes: vec![vec![4, 5], vec![3, 5], vec![3]],
            scale: 1.0,
            build: |g, x| {
                let y = g.linear(x[0], x[1], x[2])?;
                contract(g, y)
            },
        },
        OpCase {
            name: "gather_rows",
            smooth: true,
            shapes: vec![vec![4, 3]],
            scale: 1.0,
            build: |g, x| {
                let y = g.gather_rows(x[0], &[2, 0, 2])?;
                contract(g, y)
            },
        },
        OpCase {
            name: "reduce_max_rows",
            smooth: false,
            shapes: vec![vec![5, 3]],
            scale: 1.0,
            build: |g, x| {
                let y = g.reduce_max_rows(x[0])?;
                contract(g, y)
            },
        },
        OpCase {
            name: "reduce_max_rows_among",
            smooth: false,
            shapes: vec![vec![5, 3]],
            scale: 1.0,
            build: |g, x| {
                let y = g.reduce_max_rows_among(x[0], &[vec![0, 1], vec![2, 3, 4], vec![4]])?;
                contract(g, y)
            },
        },
        OpCase {
            name: "add_sum_scale",
            smooth: true,
            shapes: vec![vec![4], vec![4]],
            scale: 1.0,
            build: |g, x| {
                let y = g.add(x[0], x[1])?;
                let a = contract(g, y)?;
                let b = contract(g, x[0])?;
                let s = g.sum(&[a, b])?;
                Ok(g.scale(s, 0.37))
            },
        },
        OpCase {
            name: "softmax_logloss",
            smooth: true,
            shapes: vec![vec![5]],
            scale: 3.0,
            build: |g, x| g.softmax_logloss(x[0], 2),
        },
        OpCase {
            name: "sigmoid_cross_entropy",
            smooth: true,
            shapes: vec![vec![4]],
            scale: 3.0,
            build: |g, x| g.sigmoid_cross_entropy(x[0], &[true, false, false, true]),
        },
    ]
}

/// The full network loss as a function of every parameter tensor.
pub struct NetworkCase {
    pub label: &'static str,
    pub cfg: ModelConfig,
    pub coordinates: usize,
}

impl NetworkCase {
    pub fn small(mode: Mode, secondary_count: usize, loss: LossKind) -> Self {
        let cfg = ModelConfig {
            width: 20,
            height: 20,
            channels: 3,
            trunk: vec![
                TrunkLayer::Conv {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                TrunkLayer::MaxPool { window: 2, stride: 2 },
                TrunkLayer::Conv {
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                },
            ],
            roi_bins: 2,
            fc_widths: [6, 5],
            classes: vec!["a".into(), "b".into(), "c".into()],
            loss,
            mode,
            secondary_count,
            bounds: OverlapBounds::new(0.0, 0.6).expect("valid bounds"),
        };
        let label = match (mode, secondary_count, loss) {
            (_, _, LossKind::Multilabel) => "network_multilabel",
            (Mode::Rstar, 1, _) => "network_rstar",
            (Mode::Rstar, _, _) => "network_rstar_greedy",
            (Mode::Rcnn, _, _) => "network_rcnn",
            (Mode::Random, _, _) => "network_random",
            (Mode::Scene, _, _) => "network_scene",
        };
        NetworkCase {
            label,
            cfg,
            coordinates: 20,
        }
    }

    fn regions() -> (Vec<Region>, Vec<Region>) {
        let r = |a: f64, b: f64, c: f64, d: f64| Region::new(a, b, c, d).unwrap();
        (
            vec![r(2., 2., 10., 16.), r(9., 4., 18., 18.)],
            vec![r(0., 0., 8., 8.), r(10., 0., 20., 10.), r(4., 10., 16., 20.), r(0., 6., 12., 14.), r(12., 8., 20., 20.)],
        )
    }
}

impl GradCase for NetworkCase {
    fn name(&self) -> String {
        self.label.to_string()
    }
    fn smooth(&self) -> bool {
        false
    }
    fn coordinates(&self) -> usize {
        self.coordinates
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let params = init_params(&self.cfg, rng.gen()).expect("valid config");
        // nonzero biases so every bias gradient is exercised
        let mut ts: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        for t in ts.iter_mut().skip(1).step_by(2) {
            t.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
        ts.push(uniform(rng, vec![3, self.cfg.height, self.cfg.width], 1.0));
        ts
    }
    fn build(&self, g: &mut Graph, x: &[NodeId]) -> Result<NodeId> {
        let (prims, cands) = Self::regions();
        let (params, image) = x.split_at(x.len() - 1);
        let bound = crate::network::BoundParams::from_nodes(params.to_vec());
        let queries: Vec<RegionQuery> = prims
            .iter()
            .map(|p| RegionQuery {
                primary: *p,
                candidates: &cands,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward_image(g, &bound, &self.cfg, image[0], &queries, &mut rng)?;
        let labels = match self.cfg.loss {
            LossKind::Softmax => vec![Label::Class(1), Label::Class(2)],
            LossKind::Multilabel => vec![Label::Attributes(vec![true, false, true]), Label::Attributes(vec![false, true, false])],
        };
        let mut losses = Vec::new();
        for (inst, l) in out.instances.iter().zip(&labels) {
            losses.push(instance_loss(g, inst.scores, l, self.cfg.loss)?);
        }
        let s = g.sum(&losses)?;
        Ok(g.scale(s, 0.5))
    }
}

/// Every operator and network case.
pub fn all_cases() -> Vec<Box<dyn GradCase>> {
    let mut cases: Vec<Box<dyn GradCase>> = operator_cases().into_iter().map(|c| Box::new(c) as Box<dyn GradCase>).collect();
    for (mode, ns, loss) in [
        (Mode::Rstar, 1, LossKind::Softmax),
        (Mode::Rstar, 2, LossKind::Softmax),
        (Mode::Rcnn, 1, LossKind::Softmax),
        (Mode::Random, 1, LossKind::Softmax),
        (Mode::Scene, 1, LossKind::Softmax),
        (Mode::Rstar, 1, LossKind::Multilabel),
    ] {
        cases.push(Box::new(NetworkCase::small(mode, ns, loss)));
    }
    cases
}

/// Runs every case at `seeds` consecutive seeds starting from `base_seed`.
pub fn run_suite(base_seed: u64, seeds: usize) -> Result<Vec<CheckResult>> {
    use rayon::prelude::*;
    let cases = all_cases();
    let jobs: Vec<(usize, u64)> = (0..cases.len())
        .flat_map(|c| (0..seeds as u64).map(move |s| (c, base_seed + s)))
        .collect();
    jobs.par_iter().map(|&(c, s)| check(cases[c].as_ref(), s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SignFlip(OpCase);

    impl GradCase for SignFlip {
        fn name(&self) -> String {
            format!("{}_flipped", self.0.name)
        }
        fn smooth(&self) -> bool {
            self.0.smooth
        }
        fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
            self.0.sample(rng)
        }
        fn build(&self, g: &mut Graph, x: &[NodeId]) -> Result<NodeId> {
            self.0.build(g, x)
        }
        fn analytic(&self, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
            let mut g = self.0.analytic(inputs)?;
            let worst = (0..g[0].len()).max_by(|&a, &b| g[0][a].abs().total_cmp(&g[0][b].abs())).unwrap();
            g[0][worst] = -g[0][worst];
            Ok(g)
        }
    }

    #[test]
    fn every_operator_passes() {
        for case in operator_cases() {
            for seed in 0..5 {
                let r = check(&case, seed).unwrap();
                assert!(r.passed, "{r:?}");
            }
        }
    }

    #[test]
    fn network_cases_pass() {
        for case in all_cases().iter().filter(|c| c.name().starts_with("network")) {
            let r = check(case.as_ref(), 0).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn injected_sign_error_is_caught() {
        for case in operator_cases() {
            let name = case.name;
            let flipped = SignFlip(case);
            let r = check(&flipped, 1).unwrap();
            assert!(!r.passed, "{name}: {r:?}");
        }
    }

    #[test]
    fn suite_is_deterministic() {
        let a = run_suite(3, 1).unwrap();
        let b = run_suite(3, 1).unwrap();
        assert_eq!(a, b);
    }
}
