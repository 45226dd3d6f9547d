use proptest::prelude::*;
use rstarcnn::autodiff::{binary_cross_entropy, softmax, Graph, Tensor};
use rstarcnn::evaluation::{average_precision, average_precision_11pt, pr_curve};
use rstarcnn::{augment_primaries, candidate_set, greedy_restrict, iou, Extent, OverlapBounds, ProposalSet, Region};

fn region() -> impl Strategy<Value = Region> {
    (0u32..60, 0u32..60, 1u32..40, 1u32..40).prop_map(|(x, y, w, h)| {
        Region::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap()
    })
}

fn proposals() -> impl Strategy<Value = ProposalSet> {
    prop::collection::vec(region(), 0..40).prop_map(|rs| ProposalSet::new("img", Extent::new(100, 100), rs))
}

fn bounds() -> impl Strategy<Value = OverlapBounds> {
    (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b)| OverlapBounds::new(a.min(b), a.max(b)).unwrap())
}

/// Overlap from integer areas, written out independently of `Region::iou`.
fn oracle_iou(a: &Region, b: &Region) -> f64 {
    let c = |r: &Region| r.coords().map(|v| v as i64);
    let (p, q) = (c(a), c(b));
    let iw = (p[2].min(q[2]) - p[0].max(q[0])).max(0);
    let ih = (p[3].min(q[3]) - p[1].max(q[1])).max(0);
    let inter = iw * ih;
    let area = |r: [i64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(p) + area(q) - inter;
    inter as f64 / union as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in region(), b in region()) {
        let x = iou(&a, &b);
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou(&a, &a), 1.0);
        prop_assert_eq!(x, oracle_iou(&a, &b));
    }

    #[test]
    fn candidate_set_matches_brute_force(r in region(), s in proposals(), b in bounds()) {
        let got = candidate_set(&r, &s, b);
        let want: Vec<Region> = s
            .iter()
            .filter(|p| {
                let o = oracle_iou(p, &r);
                b.lower() <= o && o <= b.upper()
            })
            .copied()
            .collect();
        if want.is_empty() {
            prop_assert_eq!(got.regions(), &[Extent::new(100, 100).whole()][..]);
            prop_assert!(got.is_fallback());
        } else {
            prop_assert_eq!(got.regions(), &want[..]);
        }
    }

    #[test]
    fn unconstrained_bounds_keep_everything(r in region(), s in proposals()) {
        prop_assume!(!s.is_empty());
        let got = candidate_set(&r, &s, OverlapBounds::new(0.0, 1.0).unwrap());
        prop_assert_eq!(got.regions(), s.regions());
    }

    #[test]
    fn greedy_restriction_narrows(r in region(), x in region(), s in proposals(), b in bounds()) {
        let first = candidate_set(&r, &s, b);
        let both = greedy_restrict(&[r, x], &s, b);
        if !both.is_fallback() {
            for p in both.iter() {
                prop_assert!(first.regions().contains(p));
                prop_assert!(b.contains(p.iou(&x)));
            }
        }
    }

    #[test]
    fn augmentation_keeps_ground_truth(gt in prop::collection::vec(region(), 1..4), s in proposals()) {
        let pairs: Vec<(Region, usize)> = gt.iter().copied().enumerate().map(|(i, r)| (r, i)).collect();
        let out = augment_primaries(&pairs, &s);
        for (i, (r, l)) in pairs.iter().enumerate() {
            prop_assert_eq!(out[i].0.coords(), r.coords());
            prop_assert_eq!(out[i].1, *l);
        }
        for (r, l) in &out[pairs.len()..] {
            let best = gt.iter().map(|g| g.iou(r)).fold(0.0, f64::max);
            prop_assert!(best > 0.5);
            prop_assert_eq!(gt[*l].iou(r), best);
        }
    }

    #[test]
    fn softmax_lies_on_the_simplex(v in prop::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
        let p = softmax(&v).unwrap();
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_scores_cost_log_classes(a in 2usize..20, c in -5.0f64..5.0, label in 0usize..20) {
        let mut g = Graph::new();
        let s = g.variable(&Tensor::from_vec(vec![c; a]));
        let l = g.softmax_logloss(s, label % a).unwrap();
        prop_assert!((g.value(l)[0] - (a as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_loss_is_mean_of_binary_losses(v in prop::collection::vec((-30.0f64..30.0, any::<bool>()), 1..10)) {
        let (x, t): (Vec<f64>, Vec<bool>) = v.into_iter().unzip();
        let mut g = Graph::new();
        let s = g.variable(&Tensor::from_vec(x.clone()));
        let l = g.sigmoid_cross_entropy(s, &t).unwrap();
        // independent per-term form: -[t log σ(x) + (1-t) log(1-σ(x))]
        let want = x
            .iter()
            .zip(&t)
            .map(|(&x, &t)| if t { (1.0 + (-x).exp()).ln() } else { (1.0 + x.exp()).ln() })
            .sum::<f64>()
            / x.len() as f64;
        prop_assert!((g.value(l)[0] - want).abs() < 1e-12);
        let direct = x.iter().zip(&t).map(|(&x, &t)| binary_cross_entropy(x, t as u8 as f64)).sum::<f64>() / x.len() as f64;
        prop_assert!((g.value(l)[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn ap_is_bounded_and_perfect_when_sorted(v in prop::collection::vec((0u8..8, any::<bool>()), 1..60)) {
        let scores: Vec<f64> = v.iter().map(|&(s, _)| s as f64).collect();
        let labels: Vec<bool> = v.iter().map(|&(_, l)| l).collect();
        prop_assume!(labels.iter().any(|&l| l));
        let ap = average_precision(&scores, &labels).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
        let ap11 = average_precision_11pt(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap11));
        let ideal: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        prop_assert_eq!(average_precision(&ideal, &labels).unwrap(), 1.0);
        let curve = pr_curve(&scores, &labels).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[0].recall <= w[1].recall));
    }

    #[test]
    fn clip_lands_inside(r in region(), w in 1usize..100, h in 1usize..100) {
        let e = Extent::new(w, h);
        if let Ok(c) = r.clip(e) {
            prop_assert!(c.is_within(e));
        }
    }
}
