//! Mini-batch SGD over sampled primary regions.

use log::{debug, info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::geometry::{augment_primaries, candidate_set, OverlapBounds, ProposalSet, Region};
use crate::network::{forward_image, init_params, instance_loss, LossKind, Mode, ModelConfig, ModelParams, RegionQuery};
use crate::proposals::{generate, ProposalConfig};

const INIT_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;
const RANDOM_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Primary regions per batch (`M`).
    pub batch_primaries: usize,
    pub images_per_batch: usize,
    /// Candidate secondary regions sampled per primary (`N`).
    pub secondary_samples: usize,
    pub iterations: usize,
    pub bounds: OverlapBounds,
    pub mode: Mode,
    pub secondary_count: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Save a checkpoint every this many iterations.
    pub checkpoint_interval: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_primaries: 30,
            images_per_batch: 2,
            secondary_samples: 10,
            iterations: 2000,
            bounds: OverlapBounds::default(),
            mode: Mode::Rstar,
            secondary_count: 1,
            loss: LossKind::Softmax,
            seed: 0,
            momentum: 0.0,
            weight_decay: 0.0,
            checkpoint_interval: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_primaries == 0 || self.images_per_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.secondary_samples == 0 {
            return bad("secondary_samples must be positive");
        }
        if self.secondary_count == 0 {
            return bad("secondary_count must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative");
        }
        if self.checkpoint_interval == Some(0) {
            return bad("checkpoint_interval must be positive");
        }
        Ok(())
    }

    /// Copies the mode, bounds, greedy count and loss into a model config.
    pub fn apply_to(&self, model: &mut ModelConfig) {
        model.mode = self.mode;
        model.bounds = self.bounds;
        model.secondary_count = self.secondary_count;
        model.loss = self.loss;
    }
}

/// Per-image data precomputed once before training.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub id: String,
    pub tensor: Tensor,
    /// Ground-truth instances followed by overlapping proposals.
    pub primaries: Vec<(Region, Label)>,
    /// Candidate set of every primary.
    pub candidates: Vec<Vec<Region>>,
}

/// Augments each image's primaries and precomputes their candidate sets.
/// Images without instances are skipped with a warning.
pub fn prepare(ds: &Dataset, proposals: &dyn Fn(&str) -> Result<ProposalSet>, bounds: OverlapBounds) -> Result<Vec<PreparedImage>> {
    let mut out = Vec::new();
    for rec in &ds.images {
        if rec.instances.is_empty() {
            warn!("image {} has no annotated instances; skipped", rec.id);
            continue;
        }
        let props = proposals(&rec.id)?;
        let gt: Vec<(Region, Label)> = rec.instances.iter().map(|i| (i.region, i.label.clone())).collect();
        let primaries = augment_primaries(&gt, &props);
        let candidates = primaries
            .iter()
            .map(|(r, _)| candidate_set(r, &props, bounds).regions().to_vec())
            .collect();
        out.push(PreparedImage {
            id: rec.id.clone(),
            tensor: rec.image.to_tensor(),
            primaries,
            candidates,
        });
    }
    if out.is_empty() {
        return Err(Error::Config("dataset has no annotated instances".into()));
    }
    Ok(out)
}

/// Default proposal source: the grid generator on each image's extent.
pub fn grid_proposals<'a>(ds: &'a Dataset, cfg: &'a ProposalConfig) -> impl Fn(&str) -> Result<ProposalSet> + Sync + 'a {
    move |id| {
        let rec = ds
            .image(id)
            .ok_or_else(|| Error::Config(format!("unknown image {id:?}")))?;
        generate(id, rec.image.extent(), cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchExample {
    /// Index into the prepared images.
    pub image: usize,
    pub primary: Region,
    pub label: Label,
    pub candidates: Vec<Region>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub examples: Vec<BatchExample>,
}

/// Picks `images_per_batch` distinct images, `M` primaries from them
/// (without replacement when enough exist), and up to `N` candidates per
/// primary without replacement.
pub fn sample_batch(images: &[PreparedImage], cfg: &TrainConfig, rng: &mut impl Rng) -> Batch {
    let k = cfg.images_per_batch.min(images.len());
    let mut chosen: Vec<usize> = sample(rng, images.len(), k).into_vec();
    chosen.sort_unstable();
    let pool: Vec<(usize, usize)> = chosen
        .iter()
        .flat_map(|&i| (0..images[i].primaries.len()).map(move |j| (i, j)))
        .collect();
    let m = cfg.batch_primaries;
    let picks: Vec<(usize, usize)> = if pool.len() >= m {
        sample(rng, pool.len(), m).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..m).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    };
    let examples = picks
        .into_iter()
        .map(|(i, j)| {
            let img = &images[i];
            let cands = &img.candidates[j];
            let candidates = if cfg.mode.uses_candidates() {
                let n = cfg.secondary_samples.min(cands.len());
                let mut idx = sample(rng, cands.len(), n).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|c| cands[c]).collect()
            } else {
                Vec::new()
            };
            BatchExample {
                image: i,
                primary: img.primaries[j].0,
                label: img.primaries[j].1.clone(),
                candidates,
            }
        })
        .collect();
    Batch { examples }
}

/// Mean loss and gradients of a batch, without touching the parameters.
/// Each image gets one graph; per-image gradients are summed in image order.
pub fn batch_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    images: &[PreparedImage],
    batch: &Batch,
    random_seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut order: Vec<usize> = Vec::new();
    for ex in &batch.examples {
        if !order.contains(&ex.image) {
            order.push(ex.image);
        }
    }
    let scale = 1.0 / batch.examples.len() as f64;
    let per_image = |slot: usize| -> Result<(f64, Vec<Vec<f64>>)> {
        let image = order[slot];
        let members: Vec<(usize, &BatchExample)> = batch
            .examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.image == image)
            .collect();
        let mut graph = Graph::new();
        let bound = params.bind(&mut graph);
        let x = graph.constant(&images[image].tensor);
        let queries: Vec<RegionQuery> = members
            .iter()
            .map(|(_, e)| RegionQuery {
                primary: e.primary,
                candidates: &e.candidates,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(random_seed.wrapping_add(slot as u64));
        let out = forward_image(&mut graph, &bound, cfg, x, &queries, &mut rng)?;
        let mut losses = Vec::with_capacity(members.len());
        for ((idx, ex), inst) in members.iter().zip(&out.instances) {
            let l = instance_loss(&mut graph, inst.scores, &ex.label, cfg.loss)?;
            if !graph.value(l)[0].is_finite() {
                return Err(Error::NonFiniteLoss {
                    example: *idx,
                    image: images[image].id.clone(),
                    region: ex.primary.to_string(),
                });
            }
            losses.push(l);
        }
        let total = graph.sum(&losses)?;
        let loss = graph.scale(total, scale);
        graph.backward(loss)?;
        let grads = bound.nodes().iter().map(|&n| graph.grad_or_zero(n)).collect();
        Ok((graph.value(loss)[0], grads))
    };
    let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = (0..order.len()).into_par_iter().map(per_image).collect();
    let mut loss = 0.0;
    let mut grads: Option<Vec<Vec<f64>>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    Ok((loss, grads.unwrap_or_default()))
}

/// SGD with optional momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Sgd {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) {
        let plain = self.momentum == 0.0 && self.weight_decay == 0.0;
        if !plain && self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for (k, (t, g)) in params.tensors_mut().into_iter().zip(grads).enumerate() {
            let values = t.values_mut();
            if plain {
                values.iter_mut().zip(g).for_each(|(p, &d)| *p -= self.learning_rate * d);
                continue;
            }
            let v = &mut self.velocity[k];
            for ((p, &d), vi) in values.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + d + self.weight_decay * *p;
                *p -= self.learning_rate * *vi;
            }
        }
    }
}

/// Random streams of one training run, all derived from the seed.
pub struct TrainRngs {
    pub sampling: ChaCha8Rng,
    pub random_mode: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        let mut sampling = ChaCha8Rng::seed_from_u64(seed);
        sampling.set_stream(SAMPLE_STREAM);
        let mut random_mode = ChaCha8Rng::seed_from_u64(seed);
        random_mode.set_stream(RANDOM_STREAM);
        TrainRngs { sampling, random_mode }
    }
}

/// Samples a batch, computes its loss and gradients, and applies one update.
/// Returns the batch loss measured before the update.
pub fn train_step(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    images: &[PreparedImage],
    opt: &mut Sgd,
    rngs: &mut TrainRngs,
) -> Result<f64> {
    let batch = sample_batch(images, tcfg, &mut rngs.sampling);
    let random_seed = rngs.random_mode.gen();
    let (loss, grads) = batch_gradients(params, cfg, images, &batch, random_seed)?;
    opt.step(params, &grads);
    Ok(loss)
}

pub struct TrainOutcome {
    pub model: ModelConfig,
    pub params: ModelParams,
    /// Batch loss at every iteration.
    pub losses: Vec<f64>,
}

/// Full training run. The model config's mode, bounds, greedy count and
/// loss are overridden by `tcfg`. `on_checkpoint` is called every
/// `checkpoint_interval` iterations with the iteration count.
pub fn train(
    images: &[PreparedImage],
    model: &ModelConfig,
    tcfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &ModelConfig, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let mut model = model.clone();
    tcfg.apply_to(&mut model);
    model.validate()?;
    let init_seed = {
        let mut r = ChaCha8Rng::seed_from_u64(tcfg.seed);
        r.set_stream(INIT_STREAM);
        r.gen()
    };
    let mut params = init_params(&model, init_seed)?;
    let mut opt = Sgd::new(tcfg);
    let mut rngs = TrainRngs::new(tcfg.seed);
    let mut losses = Vec::with_capacity(tcfg.iterations);
    for it in 0..tcfg.iterations {
        let loss = train_step(&mut params, &model, tcfg, images, &mut opt, &mut rngs)?;
        losses.push(loss);
        if (it + 1) % 100 == 0 {
            info!("iteration {}: loss {:.5}", it + 1, loss);
        } else {
            debug!("iteration {}: loss {:.5}", it + 1, loss);
        }
        if let Some(k) = tcfg.checkpoint_interval {
            if (it + 1) % k == 0 {
                on_checkpoint(it + 1, &model, &params)?;
            }
        }
    }
    Ok(TrainOutcome { model, params, losses })
}
