use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::DET_FIELDS;
use crate::scene::OpenSetLabel;

#[test]
fn association_score_hand_values() {
    assert_eq!(association_score(&[0.3, -1.0], &[0.3, -1.0], 1.0), 0.0);
    assert!((association_score(&[1.0, 0.0], &[0.0, 0.0], 1.0) + 0.5).abs() < 1e-12);
    let e = std::f64::consts::E;
    assert!((association_score(&[2.0, 2.0], &[2.0, 2.0], e) + 1.0).abs() < 1e-12);
}

fn geom4() -> GridGeometry {
    GridGeometry {
        origin: [0.0, 0.0, 0.0],
        cell: 1.0,
        z_cell: 1.0,
        h: 4,
        w: 4,
        z: 1,
    }
}

fn det_filled(alpha: f64) -> Tensor {
    let mut det = Tensor::zeros(&[3 * DET_FIELDS, 4, 4]);
    for t in 0..3 {
        det.data[t * DET_FIELDS * 16..(t * DET_FIELDS + 1) * 16].fill(alpha);
    }
    det
}

#[test]
fn anchor_extraction_cases() {
    let catalog = ClassCatalog::desk();
    assert!(extract_anchors(&det_filled(-10.0), &geom4(), &catalog, 0.5, None).is_empty());
    let all = extract_anchors(&det_filled(-10.0), &geom4(), &catalog, 0.0, None);
    assert_eq!(all.len(), 4 * 4 * 3);

    let mut det = det_filled(-10.0);
    det.data[16 * DET_FIELDS + 6] = 10.0; // class 1, row 1, col 2
    let a = extract_anchors(&det, &geom4(), &catalog, 0.5, None);
    assert_eq!(a.len(), 1);
    assert_eq!((a[0].cx, a[0].cy, a[0].class), (2.5, 1.5, 1));
    assert_eq!((a[0].w, a[0].l), (1.0, 1.0));
    let fixed = extract_anchors(&det, &geom4(), &catalog, 0.5, Some(0.7));
    assert_eq!((fixed[0].w, fixed[0].l), (0.7, 0.7));
}

#[test]
fn raising_tau_never_adds_anchors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut det = Tensor::zeros(&[3 * DET_FIELDS, 4, 4]);
    for v in &mut det.data {
        *v = rng.random_range(-3.0..3.0);
    }
    let catalog = ClassCatalog::desk();
    let mut prev = usize::MAX;
    for tau in [0.0, 0.2, 0.4, 0.5, 0.7, 0.9, 1.0] {
        let n = extract_anchors(&det, &geom4(), &catalog, tau, None).len();
        assert!(n <= prev);
        prev = n;
    }
}

fn anchor(class: ClassId, score: f64, cx: f64, cy: f64, pixel: usize) -> Anchor {
    Anchor {
        class,
        class_index: class as usize,
        score,
        cx,
        cy,
        w: 1.0,
        l: 2.0,
        heading: 0.0,
        pixel,
    }
}

#[test]
fn nms_simple_cases() {
    let kept = nms(&[anchor(0, 0.8, 1.0, 1.0, 0), anchor(0, 0.9, 1.0, 1.0, 1)], 0.5);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].score, 0.9);
    let disjoint = [anchor(0, 0.8, 0.0, 0.0, 0), anchor(0, 0.9, 5.0, 5.0, 1), anchor(1, 0.7, 0.0, 0.0, 2)];
    assert_eq!(nms(&disjoint, 0.5).len(), 3);
    // the footprint ignores heading
    let mut r = anchor(0, 0.5, 0.0, 0.0, 0);
    let before = r.aabb();
    r.heading = std::f64::consts::FRAC_PI_2;
    assert_eq!(r.aabb(), before);
}

// suppress by exhaustive comparison against every higher-ranked kept anchor
fn nms_reference(anchors: &[Anchor], iou: f64) -> Vec<Anchor> {
    let mut order = anchors.to_vec();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.pixel.cmp(&b.pixel))
            .then(a.class_index.cmp(&b.class_index))
    });
    let mut keep = vec![true; order.len()];
    for i in 0..order.len() {
        for j in 0..i {
            if keep[j] && order[j].class == order[i].class && aabb_iou(&order[j].aabb(), &order[i].aabb()) > iou {
                keep[i] = false;
            }
        }
    }
    order.into_iter().zip(keep).filter(|(_, k)| *k).map(|(a, _)| a).collect()
}

#[test]
fn nms_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let n = rng.random_range(1..12);
        let anchors: Vec<Anchor> = (0..n)
            .map(|p| {
                let mut a = anchor(
                    rng.random_range(0..2),
                    (rng.random_range(0..5) as f64) / 5.0,
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..3.0),
                    p,
                );
                a.heading = rng.random_range(-1.5..1.5);
                a
            })
            .collect();
        assert_eq!(nms(&anchors, 0.5), nms_reference(&anchors, 0.5));
    }
    // chain: a overlaps b, b overlaps c, a and c apart; c survives because b is gone
    let chain = [anchor(0, 0.9, 0.0, 0.0, 0), anchor(0, 0.8, 0.5, 0.0, 1), anchor(0, 0.7, 1.0, 0.0, 2)];
    let kept = nms(&chain, 0.5);
    assert_eq!(kept, nms_reference(&chain, 0.5));
    assert_eq!(kept.iter().map(|a| a.pixel).collect::<Vec<_>>(), vec![0, 2]);
}

fn thing_proto(mu: Vec<f64>, var: f64, center: (f64, f64), anchor: usize) -> Prototype {
    Prototype {
        mu,
        var,
        class: 0,
        kind: ProtoKind::Thing { anchor },
        center: Some(center),
    }
}

#[test]
fn assignment_dominance_cases() {
    let pts = [Point::new(0.0, 0.0, 0.0)];
    let protos = [thing_proto(vec![0.5, 0.5], 1.0, (0.0, 0.0), 0)];
    let a = assign_points(&pts, &[0.5, 0.5], 2, &protos, -10.0, 5);
    assert_eq!(a[0].slot, Slot::Proto(0));
    assert_eq!(a[0].score, 0.0);
    let b = assign_points(&pts, &[0.5, 0.5], 2, &protos, 10.0, 5);
    assert_eq!(b[0].slot, Slot::None);
}

// argmax over every prototype and the u slot, no neighborhood restriction
fn exhaustive(phi: &[f64], protos: &[Prototype], u: f64) -> Slot {
    let mut best = (f64::NEG_INFINITY, Slot::None);
    for (j, p) in protos.iter().enumerate() {
        let s = association_score(phi, &p.mu, p.var);
        if s > best.0 {
            best = (s, Slot::Proto(j));
        }
    }
    if u > best.0 {
        Slot::None
    } else {
        best.1
    }
}

#[test]
fn full_k_matches_exhaustive_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let dim = 3;
        let n_things = rng.random_range(0..5);
        let mut protos: Vec<Prototype> = (0..n_things)
            .map(|a| {
                thing_proto(
                    (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    rng.random_range(0.2..3.0),
                    (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
                    a,
                )
            })
            .collect();
        protos.push(Prototype {
            mu: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            var: rng.random_range(0.2..3.0),
            class: 3,
            kind: ProtoKind::Stuff,
            center: None,
        });
        let pts: Vec<Point> =
            (0..20).map(|_| Point::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0)).collect();
        let phi: Vec<f64> = (0..20 * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u = rng.random_range(-6.0..0.0);
        let got = assign_points(&pts, &phi, dim, &protos, u, n_things.max(1));
        for i in 0..20 {
            assert_eq!(got[i].slot, exhaustive(&phi[i * dim..(i + 1) * dim], &protos, u));
        }
    }
}

#[test]
fn k_restriction_only_limits_things() {
    let pts = [Point::new(0.0, 0.0, 0.0)];
    // the far prototype matches the embedding better but is outside k = 1
    let protos = [
        thing_proto(vec![1.0], 1.0, (0.5, 0.0), 0),
        thing_proto(vec![0.0], 1.0, (9.0, 0.0), 1),
    ];
    assert_eq!(assign_points(&pts, &[0.0], 1, &protos, -50.0, 1)[0].slot, Slot::Proto(0));
    assert_eq!(assign_points(&pts, &[0.0], 1, &protos, -50.0, 2)[0].slot, Slot::Proto(1));
}

fn segmenter(model: ModelConfig, seed: u64) -> Segmenter {
    let network = Network::new(model).unwrap();
    let params = network.init_params(seed);
    Segmenter {
        network,
        params,
        grid: GridGeometry::desk(),
    }
}

#[test]
fn empty_scene_gives_empty_result() {
    let seg = segmenter(ModelConfig::desk(), 0);
    let scene = Scene::empty(ClassCatalog::desk());
    let out = seg.segment(&scene, &InferenceConfig::default()).unwrap();
    assert!(out.result.is_empty());
    out.result.validate().unwrap();
}

#[test]
fn forced_u_sends_everything_to_clustering() {
    let mut seg = segmenter(ModelConfig::desk(), 1);
    let u = seg.params.names.iter().position(|n| n == "u").unwrap();
    seg.params.tensors[u].data[0] = 1e300;
    let mut scene = Scene::empty(ClassCatalog::desk());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        scene.points.push(Point::new(rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0), rng.random_range(0.0..2.0)));
        scene.labels.push(OpenSetLabel::stuff(3));
    }
    let out = seg.segment(&scene, &InferenceConfig::default()).unwrap();
    out.result.validate().unwrap();
    assert!(out.result.semantic.iter().all(|s| *s == Semantic::Unknown));
    assert!(out.result.provenance.iter().all(|p| *p == Provenance::Clustered));
}

#[test]
fn segmentation_is_consistent_on_generated_scenes() {
    let seg = segmenter(ModelConfig::desk(), 2);
    let cfg = crate::scene::SceneGenConfig::desk_test();
    for s in 0..3 {
        let scene = crate::scene::generate_scene(&cfg, s).unwrap();
        let out = seg
            .segment(
                &scene,
                &InferenceConfig {
                    tau: 0.3,
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(out.result.len(), scene.len());
        out.result.validate().unwrap();
        let again = seg.segment(&scene, &InferenceConfig { tau: 0.3, ..Default::default() }).unwrap();
        assert_eq!(again.result, out.result);
    }
}
