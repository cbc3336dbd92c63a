use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scene::{ClassCatalog, OpenSetLabel, Point};

#[test]
fn iou_hand_counts() {
    assert_eq!(segment_iou(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    assert_eq!(segment_iou(&[1, 2], &[3, 4]).unwrap(), 0.0);
    assert!((segment_iou(&[1, 2, 3, 4], &[3, 4, 5]).unwrap() - 0.4).abs() < 1e-15);
    assert!(segment_iou(&[], &[]).is_err());
    assert_eq!(segment_iou(&[], &[1]).unwrap(), 0.0);
}

#[test]
fn split_prediction_matches_nothing() {
    // halves of one ground truth each reach IoU 0.4
    let gt = vec![vec![0, 1, 2, 3, 4]];
    let preds = vec![vec![0, 1], vec![2, 3]];
    let m = match_instances(&preds, &gt);
    assert!(m.tp.is_empty());
    assert_eq!((m.fp.len(), m.fn_.len()), (2, 1));
    let exact = match_instances(&gt, &gt);
    assert_eq!(exact.tp, vec![(0, 0, 1.0)]);
}

#[test]
fn quality_hand_values() {
    let c = Counts {
        tp: 1,
        fp: 1,
        fn_: 1,
        iou_sum: 0.8,
    };
    let q = c.panoptic().unwrap();
    assert!((q.sq - 0.8).abs() < 1e-15 && (q.rq - 0.5).abs() < 1e-15 && (q.value - 0.4).abs() < 1e-15);
    let u = Counts {
        tp: 1,
        fp: 3,
        fn_: 1,
        iou_sum: 0.8,
    };
    let q = u.unknown().unwrap();
    assert!((q.value - 0.4).abs() < 1e-15 && (q.rq - 0.5).abs() < 1e-15);
    let none = Counts {
        fn_: 2,
        ..Default::default()
    };
    assert_eq!(none.panoptic().unwrap().value, 0.0);
    assert_eq!(none.unknown().unwrap().value, 0.0);
    assert!(Counts::default().panoptic().is_none());
    assert!(Counts {
        fp: 4,
        ..Default::default()
    }
    .unknown()
    .is_none());
}

// every pred x gt pair, IoU from set operations
fn brute_matches(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> MatchSet {
    let mut m = MatchSet::default();
    let mut used = vec![false; gts.len()];
    for (p, ps) in preds.iter().enumerate() {
        let mut hit = None;
        for (g, gs) in gts.iter().enumerate() {
            let inter = ps.iter().filter(|x| gs.contains(x)).count();
            let union = ps.len() + gs.len() - inter;
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                assert!(hit.is_none(), "second match at IoU > 0.5");
                hit = Some((g, iou));
            }
        }
        match hit {
            Some((g, iou)) => {
                assert!(!used[g], "ground truth matched twice");
                used[g] = true;
                m.tp.push((p, g, iou));
            }
            None => m.fp.push(p),
        }
    }
    m.fn_ = (0..gts.len()).filter(|&g| !used[g]).collect();
    m
}

fn random_partition(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut segs = vec![Vec::new(); k];
    for i in 0..n {
        let s = rng.random_range(0..=k);
        if s < k {
            segs[s].push(i);
        }
    }
    segs.retain(|s| !s.is_empty());
    segs
}

#[test]
fn matching_agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let n = rng.random_range(1..30);
        let (kg, kp) = (rng.random_range(1..5), rng.random_range(1..6));
        let gts = random_partition(&mut rng, n, kg);
        let preds = random_partition(&mut rng, n, kp);
        let want = brute_matches(&preds, &gts);
        let got = match_instances(&preds, &gts);
        assert_eq!(got.fp, want.fp);
        assert_eq!(got.fn_, want.fn_);
        assert_eq!(got.tp.len(), want.tp.len());
        for (a, b) in got.tp.iter().zip(&want.tp) {
            assert_eq!((a.0, a.1), (b.0, b.1));
            assert!((a.2 - b.2).abs() < 1e-15);
        }
    }
}

fn tiny_scene() -> Scene {
    let mut s = Scene::empty(ClassCatalog::desk());
    let labels = [
        OpenSetLabel::stuff(3),
        OpenSetLabel::stuff(3),
        OpenSetLabel::thing(0, 0),
        OpenSetLabel::thing(0, 0),
        OpenSetLabel::thing(1, 1),
        OpenSetLabel::unknown(Some(5)),
        OpenSetLabel::unknown(Some(5)),
        OpenSetLabel::unknown(Some(6)),
    ];
    for (i, l) in labels.into_iter().enumerate() {
        s.points.push(Point::new(i as f64, 0.0, 0.0));
        s.labels.push(l);
    }
    s
}

#[test]
fn ground_truth_scores_perfectly() {
    let s = tiny_scene();
    let e = evaluate_scene(&s, &ground_truth_result(&s)).unwrap();
    let r = PanopticReport::new(&e, &s.catalog);
    assert_eq!(r.uq(), 1.0);
    assert_eq!(r.thing_pq(), 1.0);
    assert_eq!(r.known_stuff.unwrap().value, 1.0);
    // cyclist has no segments and drops out of the mean
    assert!(r.rows[2].quality.is_none());
    assert!(r.to_csv().starts_with("class,kind,quality,RQ,SQ,TP,FP,FN\nvehicle,thing,1.000000,1.000000,1.000000,1,0,0\n"));
}

#[test]
fn unknown_false_positives_do_not_change_uq() {
    let mut s = tiny_scene();
    for i in 0..4 {
        s.points.push(Point::new(10.0 + i as f64, 0.0, 0.0));
        s.labels.push(OpenSetLabel::stuff(3));
    }
    let mut pred = ground_truth_result(&s);
    let base = evaluate_scene(&s, &pred).unwrap().unknown.unknown().unwrap();
    for (k, i) in (8..12).enumerate() {
        let id = 100 + k as u32;
        pred.instance[i] = Some(id);
        pred.semantic[i] = Semantic::Unknown;
        pred.provenance[i] = Provenance::Clustered;
        pred.instances.insert(
            id,
            InstanceInfo {
                semantic: Semantic::Unknown,
                provenance: Provenance::Clustered,
            },
        );
    }
    pred.validate().unwrap();
    let e = evaluate_scene(&s, &pred).unwrap();
    assert_eq!(e.unknown.fp, 4);
    assert_eq!(e.unknown.unknown().unwrap(), base);
}

#[test]
fn pooling_equals_evaluating_concatenated_counts() {
    let s = tiny_scene();
    let mut pred = ground_truth_result(&s);
    pred.instance[7] = Some(5); // unknown 6 swallowed into 5
    let a = evaluate_scene(&s, &pred).unwrap();
    let b = evaluate_scene(&s, &ground_truth_result(&s)).unwrap();
    let pooled = Evaluation::pooled([&a, &b]);
    assert_eq!(pooled.scenes, 2);
    assert_eq!(pooled.unknown.tp, a.unknown.tp + b.unknown.tp);
    assert_eq!(pooled.unknown.fn_, a.unknown.fn_ + b.unknown.fn_);
    let q = pooled.unknown.unknown().unwrap();
    assert!((q.value - q.sq * q.rq).abs() < 1e-15);
}

#[test]
fn qualities_are_ordered_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n = rng.random_range(1..25);
        let gts = random_partition(&mut rng, n, 3);
        let preds = random_partition(&mut rng, n, 4);
        let m = match_instances(&preds, &gts);
        if let Some(q) = panoptic_quality(&m) {
            assert!(0.0 <= q.value && q.value <= q.sq && q.sq <= 1.0 && q.rq <= 1.0);
            assert_eq!(q.value, q.sq * q.rq);
        }
    }
}
