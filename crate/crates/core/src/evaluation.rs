//! Per-class average precision, precision/recall curves and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{ProposalSet, Region};
use crate::network::{predict, ModelConfig, ModelParams};

/// Indices sorted by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(
            "average_precision",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("average_precision", "NaN score"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::ApUndefined);
    }
    Ok(positives)
}

/// Uninterpolated AP: mean precision at the rank of each positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let positives = check_inputs(scores, labels)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// 11-point interpolated AP: mean over recall levels 0, 0.1, .., 1 of the
/// best precision at recall at least that level.
pub fn average_precision_11pt(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let curve = pr_curve(scores, labels)?;
    let mut total = 0.0;
    for k in 0..=10 {
        let level = k as f64 / 10.0;
        let best = curve
            .iter()
            .filter(|p| p.recall >= level - 1e-12)
            .map(|p| p.precision)
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(total / 11.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall after each item of the ranking.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    let positives = check_inputs(scores, labels)?;
    let mut hits = 0usize;
    Ok(ranking(scores)
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            hits += labels[i] as usize;
            PrPoint {
                threshold: scores[i],
                precision: hits as f64 / (rank + 1) as f64,
                recall: hits as f64 / positives as f64,
            }
        })
        .collect())
}

/// Per-frame, per-action max over the frame's instance scores.
pub fn frame_level(instances: &[(String, Vec<f64>)]) -> Vec<(String, Vec<f64>)> {
    let mut frames: Vec<(String, Vec<f64>)> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (frame, scores) in instances {
        match index.get(frame.as_str()) {
            Some(&k) => {
                for (a, &s) in frames[k].1.iter_mut().zip(scores) {
                    *a = a.max(s);
                }
            }
            None => {
                index.insert(frame, frames.len());
                frames.push((frame.clone(), scores.clone()));
            }
        }
    }
    frames
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceResult {
    pub image: String,
    pub frame: String,
    pub instance: usize,
    pub region: Region,
    pub probabilities: Vec<f64>,
    /// Per action, the contributing secondary regions.
    pub selected: Vec<Vec<Region>>,
    /// Per action, whether the instance is positive.
    pub positives: Vec<bool>,
    /// Planted cue regions, when known.
    pub cues: Vec<Region>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassResult {
    pub name: String,
    pub positives: usize,
    /// `None` when the class has no positives.
    pub ap: Option<f64>,
    pub ap_11pt: Option<f64>,
    pub pr: Vec<PrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Keys of the scored units: instance ids or frame ids.
    pub keys: Vec<String>,
    pub frame_level: bool,
    pub classes: Vec<ClassResult>,
    /// Mean AP over classes with at least one positive.
    pub mean_ap: f64,
    pub instances: Vec<InstanceResult>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub frame_level: bool,
    pub seed: u64,
}

/// Scores every annotated instance and computes per-class AP.
pub fn evaluate(
    ds: &Dataset,
    proposals: &(dyn Fn(&str) -> Result<ProposalSet> + Sync),
    params: &ModelParams,
    cfg: &ModelConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if ds.classes.len() != cfg.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            ds.classes.len(),
            cfg.num_classes()
        )));
    }
    let per_image: Vec<Result<Vec<InstanceResult>>> = ds
        .images
        .par_iter()
        .enumerate()
        .map(|(k, rec)| {
            if rec.instances.is_empty() {
                return Ok(Vec::new());
            }
            let props = proposals(&rec.id)?;
            let prims: Vec<Region> = rec.instances.iter().map(|i| i.region).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64));
            let preds = predict(&rec.image.to_tensor(), &prims, &props, params, cfg, &mut rng)?;
            Ok(rec
                .instances
                .iter()
                .zip(preds)
                .enumerate()
                .map(|(j, (inst, p))| InstanceResult {
                    image: rec.id.clone(),
                    frame: rec.frame.clone(),
                    instance: j,
                    region: inst.region,
                    probabilities: p.probabilities,
                    selected: p.selected,
                    positives: (0..cfg.num_classes()).map(|c| inst.label.is_positive(c)).collect(),
                    cues: inst.cues.iter().map(|c| c.region).collect(),
                })
                .collect())
        })
        .collect();
    let mut instances = Vec::new();
    for r in per_image {
        instances.extend(r?);
    }
    report_from(&ds.classes, instances, opts.frame_level)
}

/// Builds the AP report from scored instances.
pub fn report_from(classes: &[String], instances: Vec<InstanceResult>, frame_level_mode: bool) -> Result<EvalReport> {
    let (keys, scores, labels): (Vec<String>, Vec<Vec<f64>>, Vec<Vec<bool>>) = if frame_level_mode {
        let scored: Vec<(String, Vec<f64>)> = instances.iter().map(|i| (i.frame.clone(), i.probabilities.clone())).collect();
        let frames = frame_level(&scored);
        let mut pos: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
        for i in &instances {
            let e = pos.entry(i.frame.as_str()).or_insert_with(|| vec![false; classes.len()]);
            for (a, &b) in e.iter_mut().zip(&i.positives) {
                *a |= b;
            }
        }
        let labels = frames.iter().map(|(f, _)| pos[f.as_str()].clone()).collect();
        let (k, s) = frames.into_iter().unzip();
        (k, s, labels)
    } else {
        (
            instances.iter().map(|i| format!("{}:{}", i.image, i.instance)).collect(),
            instances.iter().map(|i| i.probabilities.clone()).collect(),
            instances.iter().map(|i| i.positives.clone()).collect(),
        )
    };
    let mut results = Vec::with_capacity(classes.len());
    for (c, name) in classes.iter().enumerate() {
        let s: Vec<f64> = scores.iter().map(|v| v[c]).collect();
        let l: Vec<bool> = labels.iter().map(|v| v[c]).collect();
        let positives = l.iter().filter(|&&b| b).count();
        let (ap, ap_11pt, pr) = if positives == 0 {
            (None, None, Vec::new())
        } else {
            (
                Some(average_precision(&s, &l)?),
                Some(average_precision_11pt(&s, &l)?),
                pr_curve(&s, &l)?,
            )
        };
        results.push(ClassResult {
            name: name.clone(),
            positives,
            ap,
            ap_11pt,
            pr,
        });
    }
    let present: Vec<f64> = results.iter().filter_map(|r| r.ap).collect();
    if present.is_empty() {
        return Err(Error::ApUndefined);
    }
    let mean_ap = present.iter().sum::<f64>() / present.len() as f64;
    Ok(EvalReport {
        keys,
        frame_level: frame_level_mode,
        classes: results,
        mean_ap,
        instances,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SelectionQuality {
    /// Correctly classified positive instances with a planted cue.
    pub eligible: usize,
    /// Of those, how many selected a region overlapping a cue by the threshold.
    pub hits: usize,
    pub fraction: f64,
}

fn argmax(v: &[f64]) -> Option<usize> {
    v.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &x)| match best {
            Some((_, b)) if b >= x => best,
            _ => Some((i, x)),
        })
        .map(|(i, _)| i)
}

/// Fraction of correctly classified cue-bearing instances whose selected
/// secondary region overlaps a planted cue by at least `threshold`.
pub fn selection_quality(report: &EvalReport, threshold: f64) -> SelectionQuality {
    let mut eligible = 0;
    let mut hits = 0;
    for inst in &report.instances {
        if inst.cues.is_empty() {
            continue;
        }
        let n_pos = inst.positives.iter().filter(|&&p| p).count();
        let top = argmax(&inst.probabilities);
        for (a, &pos) in inst.positives.iter().enumerate() {
            // only correctly classified actions count; single-label uses the
            // argmax, attribute labels a 0.5 threshold
            let correct = if n_pos == 1 { top == Some(a) } else { inst.probabilities[a] >= 0.5 };
            if !pos || !correct {
                continue;
            }
            eligible += 1;
            if let Some(sel) = inst.selected.get(a).and_then(|s| s.first()) {
                if inst.cues.iter().any(|c| c.iou(sel) >= threshold) {
                    hits += 1;
                }
            }
        }
    }
    SelectionQuality {
        eligible,
        hits,
        fraction: if eligible == 0 { 0.0 } else { hits as f64 / eligible as f64 },
    }
}

impl EvalReport {
    /// `key: value` summary.
    pub fn to_text(&self, interpolated: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "units: {}", if self.frame_level { "frames" } else { "instances" });
        let _ = writeln!(out, "count: {}", self.keys.len());
        let _ = writeln!(out, "ap_kind: {}", if interpolated { "11-point" } else { "uninterpolated" });
        for c in &self.classes {
            let ap = if interpolated { c.ap_11pt } else { c.ap };
            match ap {
                Some(v) => {
                    let _ = writeln!(out, "ap.{}: {:.6}", c.name, v);
                }
                None => {
                    let _ = writeln!(out, "ap.{}: absent", c.name);
                }
            }
        }
        let mean = if interpolated {
            let v: Vec<f64> = self.classes.iter().filter_map(|c| c.ap_11pt).collect();
            v.iter().sum::<f64>() / v.len() as f64
        } else {
            self.mean_ap
        };
        let _ = writeln!(out, "mean_ap: {mean:.6}");
        out
    }

    /// `class,threshold,precision,recall` rows.
    pub fn pr_csv(&self) -> String {
        let mut out = String::from("class,threshold,precision,recall\n");
        for c in &self.classes {
            for p in &c.pr {
                let _ = writeln!(out, "{},{},{},{}", c.name, p.threshold, p.precision, p.recall);
            }
        }
        out
    }

    /// One row per scored unit with its per-class probabilities.
    pub fn scores_csv(&self) -> String {
        let key = if self.frame_level { "frame" } else { "instance" };
        let mut out = key.to_string();
        for c in &self.classes {
            let _ = write!(out, ",{}", c.name);
        }
        out.push('\n');
        if self.frame_level {
            let scored: Vec<(String, Vec<f64>)> = self.instances.iter().map(|i| (i.frame.clone(), i.probabilities.clone())).collect();
            for (k, s) in frame_level(&scored) {
                out.push_str(&k);
                for v in s {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        } else {
            for (k, i) in self.keys.iter().zip(&self.instances) {
                out.push_str(k);
                for v in &i.probabilities {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// One row per (instance, action, greedy round); with `cue_overlap`,
    /// the best IoU of the region with a planted cue is appended.
    pub fn selections_csv(&self, cue_overlap: bool) -> String {
        let mut out = String::from("image,instance,action,round,x1,y1,x2,y2");
        if cue_overlap {
            out.push_str(",cue_iou");
        }
        out.push('\n');
        for inst in &self.instances {
            for (a, sel) in inst.selected.iter().enumerate() {
                for (k, r) in sel.iter().enumerate() {
                    let _ = write!(
                        out,
                        "{},{},{},{},{},{},{},{}",
                        inst.image,
                        inst.instance,
                        self.classes[a].name,
                        k + 1,
                        r.x1(),
                        r.y1(),
                        r.x2(),
                        r.y2()
                    );
                    if cue_overlap {
                        let best = inst.cues.iter().map(|c| c.iou(r)).fold(0.0, f64::max);
                        let _ = write!(out, ",{best}");
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force AP: precision at positive `i` counts items ranked at or
    /// above it under the descending-score, ascending-index order.
    fn brute_ap(scores: &[f64], labels: &[bool]) -> f64 {
        let n = scores.len();
        let above = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
        let pos: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
        pos.iter()
            .map(|&i| {
                let rank = (0..n).filter(|&j| above(i, j)).count();
                let hits = pos.iter().filter(|&&j| above(i, j)).count();
                hits as f64 / rank as f64
            })
            .sum::<f64>()
            / pos.len() as f64
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.1], &[false, false, true]).unwrap();
        assert!((ap - 1.0 / 3.0).abs() < 1e-15);
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(matches!(average_precision(&[0.5, 0.4], &[false, false]), Err(Error::ApUndefined)));
    }

    #[test]
    fn ties_break_by_index() {
        let s = [0.5, 0.5, 0.5];
        assert!((average_precision(&s, &[true, false, false]).unwrap() - 1.0).abs() < 1e-15);
        assert!((average_precision(&s, &[false, false, true]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((average_precision(&s, &[true, false, true]).unwrap() - brute_ap(&s, &[true, false, true])).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) / 5.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            labels[0] = true;
            let a = average_precision(&scores, &labels).unwrap();
            assert!((a - brute_ap(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn eleven_point() {
        let ap = average_precision_11pt(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap();
        assert!((ap - 1.0).abs() < 1e-15);
        // one positive ranked second: precision 0.5 at every recall level
        let ap = average_precision_11pt(&[0.9, 0.8], &[false, true]).unwrap();
        assert!((ap - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pr_curve_is_monotone_in_recall() {
        let c = pr_curve(&[0.3, 0.9, 0.5, 0.1], &[true, false, true, false]).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c[0].threshold, 0.9);
        assert!(c.windows(2).all(|w| w[0].recall <= w[1].recall));
        assert_eq!(c.last().unwrap().recall, 1.0);
    }

    #[test]
    fn frame_max() {
        let f = frame_level(&[
            ("f".into(), vec![0.2, 0.9]),
            ("f".into(), vec![0.7, 0.1]),
            ("g".into(), vec![0.5, 0.5]),
        ]);
        assert_eq!(f, vec![("f".to_string(), vec![0.7, 0.9]), ("g".to_string(), vec![0.5, 0.5])]);
    }

    fn inst(frame: &str, p: Vec<f64>, pos: Vec<bool>) -> InstanceResult {
        InstanceResult {
            image: frame.into(),
            frame: frame.into(),
            instance: 0,
            region: Region::new(0., 0., 1., 1.).unwrap(),
            probabilities: p,
            selected: vec![],
            positives: pos,
            cues: vec![],
        }
    }

    #[test]
    fn absent_class_is_excluded_from_mean() {
        let classes = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let insts = vec![
            inst("x", vec![0.9, 0.1, 0.0], vec![true, false, false]),
            inst("y", vec![0.2, 0.8, 0.0], vec![false, true, false]),
        ];
        let r = report_from(&classes, insts, false).unwrap();
        assert_eq!(r.classes[2].ap, None);
        assert_eq!(r.mean_ap, 1.0);
        assert!(r.to_text(false).contains("ap.c: absent"));
    }

    #[test]
    fn frame_level_report_keys() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let mut i2 = inst("x", vec![0.6, 0.4], vec![true, false]);
        i2.instance = 1;
        let insts = vec![inst("x", vec![0.9, 0.1], vec![true, false]), i2, inst("y", vec![0.1, 0.9], vec![false, true])];
        let r = report_from(&classes, insts, true).unwrap();
        assert_eq!(r.keys, vec!["x", "y"]);
        assert!(r.scores_csv().starts_with("frame,a,b\nx,0.9,0.4\n"));
    }
}
