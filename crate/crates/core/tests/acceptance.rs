//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Property criteria (gradients, clustering, metrics, association,
//! reproducibility) fail the run when violated. The empirical desk
//! criteria are measured and reported; their outcome depends on what ten
//! epochs of training reach, so a FAIL there is printed, not asserted.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osis::harness::{
    ablate, ablation_table, curve_csv, evaluate_all, run_baseline, segment_all, sweep_beta, train_model, Dataset,
    ExperimentConfig,
};
use osis::infer::{
    assign_points, association_score, dbscan, ClusterInput, ClusteringConfig, InstanceInfo, ProtoKind, Prototype,
    Provenance, SegmentationResult, Segmenter, Slot,
};
use osis::metrics::{evaluate_scene, PanopticReport};
use osis::model::{Network, ModelConfig};
use osis::scene::{ClassCatalog, InstanceId, OpenSetLabel, Point, Scene, Semantic};
use osis::train::{gradient_check, miniature_scene, LossConfig, LossTerm};

struct Outcome {
    name: &'static str,
    pass: bool,
    asserted: bool,
    detail: String,
}

fn line(o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let kind = if o.asserted { "" } else { " (reported)" };
    println!("{tag} {}{kind}: {}", o.name, o.detail);
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let (geom, scene) = miniature_scene(4);
    let model = ModelConfig::miniature();
    let params = Network::new(model.clone()).unwrap().init_params(8);
    let mut worst: f64 = 0.0;
    let mut ok = params.count() <= 5000 && geom.h == 8 && geom.w == 8;
    let mut parts = Vec::new();
    for term in LossTerm::ALL {
        let r = gradient_check(&model, &params, &scene, &geom, &LossConfig::default(), term, 1e-5, 1e-6).unwrap();
        ok &= r.checked > params.count() / 2 && r.max_rel_error < 1e-4;
        worst = worst.max(r.max_rel_error);
        parts.push(format!("{term:?} {:.1e} ({} checked)", r.max_rel_error, r.checked));
    }
    let elapsed = t.elapsed();
    ok &= elapsed < Duration::from_secs(60);
    Outcome {
        name: "gradient fidelity",
        pass: ok,
        asserted: true,
        detail: format!(
            "{} params, max rel error {worst:.2e} [{}], {:.1}s",
            params.count(),
            parts.join(", "),
            elapsed.as_secs_f64()
        ),
    }
}

// Independent DBSCAN: union-find over core points, then each border point
// joins the cluster with the smallest core index among its core neighbors,
// which is the cluster a sequential scan discovers first.
fn reference_dbscan(input: &ClusterInput<'_>, cfg: &ClusteringConfig) -> Vec<BTreeSet<usize>> {
    let n = input.len();
    let eps2 = cfg.eps * cfg.eps;
    let near: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| input.dist2(i, j, cfg) <= eps2).collect())
        .collect();
    let core: Vec<bool> = near.iter().map(|v| v.len() >= cfg.min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for i in 0..n {
        for &j in &near[i] {
            if core[i] && core[j] {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    // smallest core index per component identifies and orders clusters
    let mut first: BTreeMap<usize, usize> = BTreeMap::new();
    for i in (0..n).filter(|&i| core[i]) {
        let r = find(&mut parent, i);
        first.entry(r).or_insert(i);
    }
    let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for i in 0..n {
        let key = if core[i] {
            Some(first[&find(&mut parent, i)])
        } else {
            near[i]
                .iter()
                .filter(|&&j| core[j])
                .map(|&j| first[&find(&mut parent, j)])
                .min()
        };
        match key {
            Some(k) => groups.entry(k).or_default().insert(i),
            None => groups.entry(n + i).or_default().insert(i),
        };
    }
    groups.into_values().collect()
}

fn clustering_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut runs = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=200);
        let dim = rng.random_range(1..=4);
        let blobs: Vec<([f64; 3], Vec<f64>)> = (0..rng.random_range(1..6))
            .map(|_| {
                let c = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..2.0)];
                (c, (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            })
            .collect();
        let mut xyz = Vec::with_capacity(n);
        let mut phi = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let (c, e) = &blobs[rng.random_range(0..blobs.len())];
            let s = rng.random_range(0.1..1.0);
            xyz.push([
                c[0] + rng.random_range(-s..s),
                c[1] + rng.random_range(-s..s),
                c[2] + rng.random_range(-s..s),
            ]);
            phi.extend(e.iter().map(|v| v + rng.random_range(-s..s)));
        }
        let input = ClusterInput { xyz: &xyz, phi: &phi, dim };
        let eps = rng.random_range(0.2..1.5);
        let min_pts = rng.random_range(1..6);
        for beta in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let cfg = ClusteringConfig {
                beta,
                eps,
                min_pts,
                planar: false,
            };
            let labels = dbscan(&input, &cfg);
            let mut got: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
            for (i, &l) in labels.iter().enumerate() {
                got.entry(l).or_default().insert(i);
            }
            let got: BTreeSet<BTreeSet<usize>> = got.into_values().collect();
            let want: BTreeSet<BTreeSet<usize>> = reference_dbscan(&input, &cfg).into_iter().collect();
            runs += 1;
            if got != want {
                mismatches += 1;
            }
        }
    }
    let elapsed = t.elapsed();
    Outcome {
        name: "clustering oracle",
        pass: mismatches == 0 && elapsed < Duration::from_secs(60),
        asserted: true,
        detail: format!("{mismatches} mismatches over {runs} runs, {:.1}s", elapsed.as_secs_f64()),
    }
}

// Random labels over a handful of instances, and a prediction made by
// perturbing them: relabeling points, merging and splitting instances.
fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let mut scene = Scene::empty(ClassCatalog::desk());
    let n = rng.random_range(1..60);
    let things: Vec<(InstanceId, u16)> = (0..rng.random_range(0..5)).map(|i| (i, rng.random_range(0..3))).collect();
    let unknowns: Vec<InstanceId> = (0..rng.random_range(0..4)).map(|i| 100 + i).collect();
    for _ in 0..n {
        scene.points.push(Point::new(0.0, 0.0, 0.0));
        let r = rng.random_range(0..10);
        let label = if r < 4 && !things.is_empty() {
            let (id, c) = things[rng.random_range(0..things.len())];
            OpenSetLabel::thing(id, c)
        } else if r < 7 && !unknowns.is_empty() {
            OpenSetLabel::unknown(Some(unknowns[rng.random_range(0..unknowns.len())]))
        } else if r == 7 {
            OpenSetLabel::unknown(None)
        } else {
            OpenSetLabel::stuff(3)
        };
        scene.labels.push(label);
    }
    scene
}

fn random_prediction(scene: &Scene, rng: &mut ChaCha8Rng) -> SegmentationResult {
    // (semantic, group) per point; group ids are remapped to instances below
    let semantics = [Semantic::Class(0), Semantic::Class(1), Semantic::Class(2), Semantic::Class(3), Semantic::Unknown];
    let mut keys: Vec<(Semantic, u64)> = scene
        .labels
        .iter()
        .map(|l| {
            let g = l.instance.map_or(1000, u64::from);
            (l.semantic, g)
        })
        .collect();
    let split = rng.random_range(0..4);
    for (i, k) in keys.iter_mut().enumerate() {
        match rng.random_range(0..10) {
            0 => k.0 = semantics[rng.random_range(0..semantics.len())],
            1 => k.1 = rng.random_range(0..3),
            2 if split > 0 => k.1 += 500 + (i as u64 % split),
            _ => {}
        }
    }
    let mut r = SegmentationResult::default();
    let mut ids: BTreeMap<(Semantic, u64), InstanceId> = BTreeMap::new();
    for &(sem, g) in &keys {
        let inst = match sem {
            Semantic::Class(3) => None,
            _ => {
                let next = ids.len() as InstanceId;
                Some(*ids.entry((sem, g)).or_insert(next))
            }
        };
        let prov = if sem == Semantic::Unknown {
            Provenance::Clustered
        } else {
            Provenance::ClosedSet
        };
        if let Some(id) = inst {
            r.instances.insert(id, InstanceInfo { semantic: sem, provenance: prov });
        }
        r.instance.push(inst);
        r.semantic.push(sem);
        r.provenance.push(prov);
    }
    r
}

// Exhaustive per-class tallies: every prediction against every ground
// truth segment with set IoU.
fn oracle_counts(segs_p: &[HashSet<usize>], segs_g: &[HashSet<usize>]) -> (usize, usize, usize, f64) {
    let mut tp = 0;
    let mut iou_sum = 0.0;
    let mut gt_hit = vec![false; segs_g.len()];
    let mut pred_hit = vec![false; segs_p.len()];
    for (pi, p) in segs_p.iter().enumerate() {
        for (gi, g) in segs_g.iter().enumerate() {
            let inter = p.intersection(g).count();
            let iou = inter as f64 / p.union(g).count() as f64;
            if iou > 0.5 {
                tp += 1;
                iou_sum += iou;
                gt_hit[gi] = true;
                pred_hit[pi] = true;
            }
        }
    }
    let fp = pred_hit.iter().filter(|h| !**h).count();
    let fn_ = gt_hit.iter().filter(|h| !**h).count();
    (tp, fp, fn_, iou_sum)
}

fn segments(sem: &[Semantic], inst: &[Option<InstanceId>], want: Semantic, stuff: bool) -> Vec<HashSet<usize>> {
    let mut groups: BTreeMap<Option<InstanceId>, HashSet<usize>> = BTreeMap::new();
    for i in 0..sem.len() {
        if sem[i] != want {
            continue;
        }
        match (stuff, inst[i]) {
            (true, _) => groups.entry(None).or_default().insert(i),
            (false, Some(id)) => groups.entry(Some(id)).or_default().insert(i),
            (false, None) => false,
        };
    }
    groups.into_values().collect()
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() < 1e-12,
        (None, None) => true,
        _ => false,
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut mismatches, mut uq_changed, mut scored) = (0, 0, 0);
    for _ in 0..100 {
        let scene = random_scene(&mut rng);
        let pred = random_prediction(&scene, &mut rng);
        pred.validate().unwrap();
        let eval = evaluate_scene(&scene, &pred).unwrap();
        let report = PanopticReport::new(&eval, &scene.catalog);
        let gt_sem: Vec<Semantic> = scene.labels.iter().map(|l| l.semantic).collect();
        let gt_inst: Vec<Option<InstanceId>> = scene.labels.iter().map(|l| l.instance).collect();
        let classes = [(Semantic::Class(0), false), (Semantic::Class(1), false), (Semantic::Class(2), false), (Semantic::Class(3), true)];
        for (row, &(want, stuff)) in report.rows.iter().zip(&classes) {
            let (tp, fp, fn_, s) = oracle_counts(
                &segments(&pred.semantic, &pred.instance, want, stuff),
                &segments(&gt_sem, &gt_inst, want, stuff),
            );
            let expect = (tp + fp + fn_ > 0).then(|| s / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64));
            if !close(row.quality.map(|q| q.value), expect) {
                mismatches += 1;
            }
        }
        let (tp, _, fn_, s) = oracle_counts(
            &segments(&pred.semantic, &pred.instance, Semantic::Unknown, false),
            &segments(&gt_sem, &gt_inst, Semantic::Unknown, false),
        );
        let expect = (tp + fn_ > 0).then(|| s / (tp + fn_) as f64);
        if !close(report.unknown.map(|q| q.value), expect) {
            mismatches += 1;
        }
        scored += 1;

        // new points that are ground in the labels but a fresh unknown
        // instance in the prediction
        let mut scene2 = scene.clone();
        let mut pred2 = pred.clone();
        let id = pred.instances.keys().last().map_or(0, |m| m + 1);
        pred2.instances.insert(
            id,
            InstanceInfo {
                semantic: Semantic::Unknown,
                provenance: Provenance::Clustered,
            },
        );
        for _ in 0..rng.random_range(1..10) {
            scene2.points.push(Point::new(0.0, 0.0, 0.0));
            scene2.labels.push(OpenSetLabel::stuff(3));
            pred2.instance.push(Some(id));
            pred2.semantic.push(Semantic::Unknown);
            pred2.provenance.push(Provenance::Clustered);
        }
        let report2 = PanopticReport::new(&evaluate_scene(&scene2, &pred2).unwrap(), &scene2.catalog);
        if report2.unknown.map(|q| q.value.to_bits()) != report.unknown.map(|q| q.value.to_bits()) {
            uq_changed += 1;
        }
    }
    Outcome {
        name: "metric oracle",
        pass: mismatches == 0 && uq_changed == 0,
        asserted: true,
        detail: format!("{scored} scenes, {mismatches} quality mismatches, UQ changed by injected false positives in {uq_changed}"),
    }
}

fn association_soundness() -> Outcome {
    let e = std::f64::consts::E;
    let hand = [
        (association_score(&[0.3, -1.0], &[0.3, -1.0], 1.0), 0.0),
        (association_score(&[1.0, 0.0], &[0.0, 0.0], 1.0), -0.5),
        (association_score(&[2.0, 2.0], &[2.0, 2.0], e), -1.0),
    ];
    let hand_ok = hand.iter().all(|(a, b)| (a - b).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..100 {
        let dim = rng.random_range(1..5);
        let n_things = rng.random_range(0..8);
        let n_stuff = rng.random_range(1..3);
        let mut protos = Vec::new();
        for i in 0..n_things + n_stuff {
            let thing = i < n_things;
            protos.push(Prototype {
                mu: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                var: rng.random_range(0.2..3.0),
                class: if thing { 0 } else { 3 },
                kind: if thing { ProtoKind::Thing { anchor: i } } else { ProtoKind::Stuff },
                center: thing.then(|| (rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0))),
            });
        }
        let n = rng.random_range(1..40);
        let points: Vec<Point> = (0..n)
            .map(|_| Point::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), 0.0))
            .collect();
        let phi: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let u = rng.random_range(-8.0..0.0);
        let got = assign_points(&points, &phi, dim, &protos, u, n_things.max(1));
        for i in 0..n {
            let x = &phi[i * dim..(i + 1) * dim];
            let mut best = (f64::NEG_INFINITY, Slot::None);
            for (j, p) in protos.iter().enumerate() {
                let s = association_score(x, &p.mu, p.var);
                if s > best.0 {
                    best = (s, Slot::Proto(j));
                }
            }
            if u > best.0 {
                best = (u, Slot::None);
            }
            if got[i].slot != best.1 {
                mismatches += 1;
            }
        }
    }
    Outcome {
        name: "association soundness",
        pass: hand_ok && mismatches == 0,
        asserted: true,
        detail: format!("hand values {}, {mismatches} argmax mismatches over 100 cases", if hand_ok { "exact" } else { "off" }),
    }
}

/// Everything the desk run produces, as text.
struct DeskRun {
    osis: PanopticReport,
    bottomup: PanopticReport,
    reports: String,
    seg: Segmenter,
    data: Dataset,
    elapsed: Duration,
}

fn desk_run(cfg: &ExperimentConfig) -> DeskRun {
    let t = Instant::now();
    let data = Dataset::generate(cfg).unwrap();
    let (ckpt, log) = train_model(cfg, &data).unwrap();
    let seg = Segmenter::new(&ckpt).unwrap();
    let osis = evaluate_all(&data.test, &segment_all(&seg, &data.test, &cfg.infer).unwrap()).unwrap();
    let bottomup = evaluate_all(&data.test, &run_baseline(&cfg.baseline, &data.test, Some(&seg)).unwrap()).unwrap();
    let reports = format!("{}{}{}", log.to_csv().unwrap(), osis.to_csv(), bottomup.to_csv());
    DeskRun {
        osis,
        bottomup,
        reports,
        seg,
        data,
        elapsed: t.elapsed(),
    }
}

fn main() {
    let mut outcomes = vec![gradient_fidelity(), clustering_oracle(), metric_oracle(), association_soundness()];
    for o in &outcomes {
        line(o);
    }

    let cfg = ExperimentConfig::desk();
    let run = desk_run(&cfg);
    println!("{}", run.osis.to_table("osis"));
    println!("{}", run.bottomup.to_table("bottomup"));
    let (pq, uq, uq_b) = (run.osis.thing_pq(), run.osis.uq(), run.bottomup.uq());
    let o = Outcome {
        name: "end-to-end desk run",
        pass: pq >= 0.5 && uq > uq_b && run.elapsed < Duration::from_secs(1800),
        asserted: false,
        detail: format!(
            "known-thing PQ {pq:.3} (need >= 0.5), UQ {uq:.3} vs BottomUp {uq_b:.3}, {:.0}s",
            run.elapsed.as_secs_f64()
        ),
    };
    line(&o);
    outcomes.push(o);

    let curve = sweep_beta(&run.seg, &run.data.test, &cfg.infer, &cfg.sweep_betas).unwrap();
    print!("{}", curve_csv(&curve));
    let at = |b: f64| curve.iter().find(|r| r.beta == b).map_or(0.0, |r| r.uq);
    let ends = at(0.0).max(at(1.0));
    let interior = curve
        .iter()
        .filter(|r| r.beta > 0.0 && r.beta < 1.0)
        .max_by(|a, b| a.uq.total_cmp(&b.uq))
        .expect("sweep has interior betas");
    let o = Outcome {
        name: "beta sweep",
        pass: interior.uq >= ends - 0.02,
        asserted: false,
        detail: format!(
            "best interior beta {} UQ {:.3}, endpoints 0: {:.3}, 1: {:.3}",
            interior.beta,
            interior.uq,
            at(0.0),
            at(1.0)
        ),
    };
    line(&o);
    outcomes.push(o);

    let rows = ablate(&cfg, &run.data).unwrap();
    print!("{}", ablation_table(&rows));
    let (off, on) = (rows[0].report.uq(), rows[1].report.uq());
    let o = Outcome {
        name: "ablation trend",
        pass: on >= off,
        asserted: false,
        detail: format!(
            "UQ without DL {off:.3}, with DL {on:.3}{}",
            rows.iter()
                .filter(|r| r.report.thing_pq() == 0.0)
                .map(|r| format!("; no known thing found in row {}, its UQ comes from clustering everything", r.toggles.label()))
                .collect::<String>()
        ),
    };
    line(&o);
    outcomes.push(o);

    let again = desk_run(&cfg);
    let o = Outcome {
        name: "reproducibility",
        pass: again.reports == run.reports,
        asserted: true,
        detail: format!("{} report bytes compared", run.reports.len()),
    };
    line(&o);
    outcomes.push(o);

    println!();
    for o in &outcomes {
        line(o);
    }
    if outcomes.iter().any(|o| o.asserted && !o.pass) {
        std::process::exit(1);
    }
}
