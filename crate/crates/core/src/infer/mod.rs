//! Two-stage open-set inference. Closed-set: anchors above `tau` survive
//! non-maximum suppression and become thing prototypes; every point is
//! associated with its `k` nearest thing prototypes, all stuff prototypes,
//! or the no-prototype slot. Open-set: points left in the no-prototype slot
//! are grouped by DBSCAN into unknown instances.

mod dbscan;
mod result;

use serde::{Deserialize, Serialize};

pub use dbscan::{dbscan, ClusterInput, ClusteringConfig};
pub use result::{InstanceInfo, Provenance, SegmentationResult, SEGMENTATION_VERSION};

use crate::error::{Error, Result};
use crate::model::{
    variance_from_raw, Checkpoint, ModelConfig, Network, NetworkOutput, NetworkParams, Tensor, DET_ALPHA, DET_COS,
    DET_DX, DET_DY, DET_FIELDS, DET_L, DET_SIN, DET_W,
};
use crate::raster::{bilinear_sample, trilinear_sample_into, voxelize, GridGeometry};
use crate::scene::{ClassCatalog, ClassId, InstanceId, Point, Scene, Semantic};
use crate::train::{sigmoid, SIZE_LOGIT_CLAMP};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Anchor score threshold.
    pub tau: f64,
    /// Thing prototypes considered per point.
    pub k: usize,
    /// Suppression threshold on footprint IoU.
    pub nms_iou: f64,
    /// Side of the square footprint used when boxes are not regressed.
    pub fixed_footprint: f64,
    pub clustering: ClusteringConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            k: 5,
            nms_iou: 0.5,
            fixed_footprint: 1.0,
            clustering: ClusteringConfig::default(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(self.fixed_footprint > 0.0) {
            return Err(Error::Config("fixed_footprint must be > 0".into()));
        }
        self.clustering.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub class: ClassId,
    /// Position of `class` among the catalog's thing classes.
    pub class_index: usize,
    /// Sigmoid of the anchor logit.
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub heading: f64,
    /// Row-major pixel of the output grid the anchor came from.
    pub pixel: usize,
}

impl Anchor {
    /// Axis-aligned footprint `[x1, x2, y1, y2]`: the regressed `l` spans x
    /// and `w` spans y, matching the box the regression loss trains.
    pub fn aabb(&self) -> [f64; 4] {
        let (hx, hy) = (0.5 * self.l, 0.5 * self.w);
        [self.cx - hx, self.cx + hx, self.cy - hy, self.cy + hy]
    }
}

pub fn aabb_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[2].max(b[2])).max(0.0);
    let inter = iw * ih;
    let union = (a[1] - a[0]) * (a[3] - a[2]) + (b[1] - b[0]) * (b[3] - b[2]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// One candidate per (pixel, class) with score at least `tau`. With
/// `fixed_footprint` set, regressed sizes are ignored and every anchor gets
/// that square footprint.
pub fn extract_anchors(
    det: &Tensor,
    geom: &GridGeometry,
    catalog: &ClassCatalog,
    tau: f64,
    fixed_footprint: Option<f64>,
) -> Vec<Anchor> {
    let plane = geom.h * geom.w;
    let mut out = Vec::new();
    for (t, class) in catalog.things().iter().enumerate() {
        let at = |f: usize, p: usize| det.data[(t * DET_FIELDS + f) * plane + p];
        for p in 0..plane {
            let score = sigmoid(at(DET_ALPHA, p));
            if score < tau {
                continue;
            }
            let (x, y) = geom.cell_center(p / geom.w, p % geom.w);
            let (w, l) = match fixed_footprint {
                None => (
                    at(DET_W, p).clamp(-SIZE_LOGIT_CLAMP, SIZE_LOGIT_CLAMP).exp(),
                    at(DET_L, p).clamp(-SIZE_LOGIT_CLAMP, SIZE_LOGIT_CLAMP).exp(),
                ),
                Some(fixed) => (fixed, fixed),
            };
            out.push(Anchor {
                class: class.id,
                class_index: t,
                score,
                cx: x + at(DET_DX, p),
                cy: y + at(DET_DY, p),
                w,
                l,
                heading: 0.5 * at(DET_SIN, p).atan2(at(DET_COS, p)),
                pixel: p,
            });
        }
    }
    out
}

/// Greedy suppression in descending score order (ties by pixel, then
/// class). An anchor is dropped when its footprint IoU with an already kept
/// anchor of the same class exceeds `iou`.
pub fn nms(anchors: &[Anchor], iou: f64) -> Vec<Anchor> {
    let mut order: Vec<&Anchor> = anchors.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.pixel.cmp(&b.pixel))
            .then(a.class_index.cmp(&b.class_index))
    });
    let mut kept: Vec<Anchor> = Vec::new();
    for a in order {
        let boxed = a.aabb();
        if kept.iter().all(|k| k.class != a.class || aabb_iou(&k.aabb(), &boxed) <= iou) {
            kept.push(*a);
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtoKind {
    /// Index into the kept anchors.
    Thing { anchor: usize },
    Stuff,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub mu: Vec<f64>,
    pub var: f64,
    pub class: ClassId,
    pub kind: ProtoKind,
    /// BEV center; stuff prototypes have none.
    pub center: Option<(f64, f64)>,
}

/// Association score of an embedding with a prototype:
/// `-|phi - mu|^2 / (2 var) - (F / 2) ln var`.
pub fn association_score(phi: &[f64], mu: &[f64], var: f64) -> f64 {
    let d2: f64 = phi.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    -d2 / (2.0 * var) - 0.5 * phi.len() as f64 * var.ln()
}

/// Winning slot for one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Slot {
    /// Index into the prototype list.
    Proto(usize),
    None,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub slot: Slot,
    pub score: f64,
}

/// Assigns each point to the best of: its `k` nearest thing prototypes by
/// BEV center distance, every stuff prototype, and the `u` slot. Ties go to
/// the lower prototype index; the `u` slot wins only when strictly better.
pub fn assign_points(points: &[Point], phi: &[f64], dim: usize, protos: &[Prototype], u: f64, k: usize) -> Vec<Assignment> {
    let things: Vec<(usize, (f64, f64))> = protos
        .iter()
        .enumerate()
        .filter_map(|(i, p)| match p.kind {
            ProtoKind::Thing { .. } => p.center.map(|c| (i, c)),
            ProtoKind::Stuff => None,
        })
        .collect();
    let stuff: Vec<usize> = (0..protos.len()).filter(|&i| protos[i].kind == ProtoKind::Stuff).collect();
    let mut near: Vec<(f64, usize)> = Vec::with_capacity(things.len());
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let x = &phi[i * dim..(i + 1) * dim];
            near.clear();
            near.extend(things.iter().map(|&(j, (cx, cy))| ((p.x - cx).powi(2) + (p.y - cy).powi(2), j)));
            if near.len() > k {
                near.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                near.truncate(k);
            }
            let mut best = Assignment {
                slot: Slot::None,
                score: f64::NEG_INFINITY,
            };
            let mut best_idx = usize::MAX;
            for j in near.iter().map(|&(_, j)| j).chain(stuff.iter().copied()) {
                let s = association_score(x, &protos[j].mu, protos[j].var);
                if s > best.score || (s == best.score && j < best_idx) {
                    best = Assignment {
                        slot: Slot::Proto(j),
                        score: s,
                    };
                    best_idx = j;
                }
            }
            if u > best.score {
                best = Assignment { slot: Slot::None, score: u };
            }
            best
        })
        .collect()
}

/// Samples every point's embedding from the point-embedding volume.
pub fn point_embeddings(out: &NetworkOutput, model: &ModelConfig, points: &[Point]) -> Vec<f64> {
    let dim = model.embed_dim;
    let geom = GridGeometry {
        z: model.z_bins,
        ..out.geom
    };
    let mut phi = vec![0.0; points.len() * dim];
    for (i, p) in points.iter().enumerate() {
        trilinear_sample_into(&out.point.data, dim, &geom, p.x, p.y, p.z, &mut phi[i * dim..(i + 1) * dim]);
    }
    phi
}

/// Per-point argmax of the semantic branch: thing classes, then stuff
/// classes, then unknown. `None` when the network has no semantic branch.
pub fn semantic_predictions(out: &NetworkOutput, model: &ModelConfig, catalog: &ClassCatalog, points: &[Point]) -> Option<Vec<Semantic>> {
    let map = out.semantic.as_ref()?;
    let classes = model.semantic_classes;
    let geom = GridGeometry {
        z: model.z_bins,
        ..out.geom
    };
    let labels: Vec<ClassId> = catalog.things().iter().chain(catalog.stuff()).map(|c| c.id).collect();
    let mut logits = vec![0.0; classes];
    Some(
        points
            .iter()
            .map(|p| {
                trilinear_sample_into(&map.data, classes, &geom, p.x, p.y, p.z, &mut logits);
                let best = (0..classes).fold(0, |b, c| if logits[c] > logits[b] { c } else { b });
                labels.get(best).map_or(Semantic::Unknown, |&c| Semantic::Class(c))
            })
            .collect(),
    )
}

/// Thing prototypes at kept anchors followed by one prototype per stuff
/// class.
pub fn gather_prototypes(out: &NetworkOutput, model: &ModelConfig, catalog: &ClassCatalog, anchors: &[Anchor]) -> Vec<Prototype> {
    let dim = model.embed_dim;
    let var = |s: f64| if model.predict_variance { variance_from_raw(s).0 } else { 1.0 };
    let mut protos = Vec::with_capacity(anchors.len() + out.stuff.len());
    for (i, a) in anchors.iter().enumerate() {
        let v = bilinear_sample(&out.thing.data, dim + 1, &out.geom, a.cx, a.cy);
        protos.push(Prototype {
            mu: v[..dim].to_vec(),
            var: var(v[dim]),
            class: a.class,
            kind: ProtoKind::Thing { anchor: i },
            center: Some((a.cx, a.cy)),
        });
    }
    for (s, class) in catalog.stuff().iter().enumerate() {
        protos.push(Prototype {
            mu: out.stuff[s][..dim].to_vec(),
            var: var(out.stuff[s][dim]),
            class: class.id,
            kind: ProtoKind::Stuff,
            center: None,
        });
    }
    protos
}

/// Intermediate products of [`segment_scene`], kept for diagnostics.
pub struct Segmentation {
    pub result: SegmentationResult,
    pub anchors: Vec<Anchor>,
    pub prototypes: Vec<Prototype>,
    pub assignments: Vec<Assignment>,
    pub embeddings: Vec<f64>,
    pub output: NetworkOutput,
}

/// A trained network ready to segment scenes.
pub struct Segmenter {
    pub network: Network,
    pub params: NetworkParams,
    pub grid: GridGeometry,
}

impl Segmenter {
    pub fn new(ckpt: &Checkpoint) -> Result<Self> {
        let network = Network::new(ckpt.model.clone())?;
        network.check_params(&ckpt.params)?;
        Ok(Self {
            network,
            params: ckpt.params.clone(),
            grid: ckpt.grid,
        })
    }

    pub fn forward(&self, points: &[Point]) -> Result<NetworkOutput> {
        let input = voxelize(points, &self.grid).tensor;
        Ok(self.network.forward(&input, &self.params)?.output)
    }

    /// Full two-stage pipeline on one scene's points. Labels in `scene` are
    /// ignored apart from its class catalog.
    pub fn segment(&self, scene: &Scene, cfg: &InferenceConfig) -> Result<Segmentation> {
        cfg.validate()?;
        let model = &self.network.config;
        if scene.catalog.things().len() != model.thing_classes || scene.catalog.stuff().len() != model.stuff_classes {
            return Err(Error::Shape("scene catalog does not match the model".into()));
        }
        let out = self.forward(&scene.points)?;
        let fixed = (!model.box_regression).then_some(cfg.fixed_footprint);
        let candidates = extract_anchors(&out.det, &out.geom, &scene.catalog, cfg.tau, fixed);
        let anchors = nms(&candidates, cfg.nms_iou);
        let prototypes = gather_prototypes(&out, model, &scene.catalog, &anchors);
        let phi = point_embeddings(&out, model, &scene.points);
        let assignments = assign_points(&scene.points, &phi, model.embed_dim, &prototypes, out.u, cfg.k);
        let result = compose_result(scene, &phi, model.embed_dim, &prototypes, &assignments, &cfg.clustering);
        Ok(Segmentation {
            result,
            anchors,
            prototypes,
            assignments,
            embeddings: phi,
            output: out,
        })
    }
}

/// Turns assignments into a [`SegmentationResult`]: thing prototypes become
/// instances numbered by anchor, stuff points keep only their class, and the
/// no-prototype points are clustered into unknown instances numbered after
/// the things.
pub fn compose_result(
    scene: &Scene,
    phi: &[f64],
    dim: usize,
    prototypes: &[Prototype],
    assignments: &[Assignment],
    clustering: &ClusteringConfig,
) -> SegmentationResult {
    let n = scene.len();
    let mut r = SegmentationResult {
        instance: vec![None; n],
        semantic: vec![Semantic::Unknown; n],
        provenance: vec![Provenance::ClosedSet; n],
        instances: Default::default(),
    };
    let mut open = Vec::new();
    for (i, a) in assignments.iter().enumerate() {
        match a.slot {
            Slot::Proto(j) => {
                let p = &prototypes[j];
                r.semantic[i] = Semantic::Class(p.class);
                if let ProtoKind::Thing { anchor } = p.kind {
                    let id = anchor as InstanceId;
                    r.instance[i] = Some(id);
                    r.instances.insert(
                        id,
                        InstanceInfo {
                            semantic: Semantic::Class(p.class),
                            provenance: Provenance::ClosedSet,
                        },
                    );
                }
            }
            Slot::None => open.push(i),
        }
    }
    let base = prototypes.iter().filter(|p| matches!(p.kind, ProtoKind::Thing { .. })).count() as InstanceId;
    let xyz: Vec<[f64; 3]> = open.iter().map(|&i| scene.points[i].xyz()).collect();
    let sub: Vec<f64> = open.iter().flat_map(|&i| phi[i * dim..(i + 1) * dim].iter().copied()).collect();
    let labels = dbscan(&ClusterInput { xyz: &xyz, phi: &sub, dim }, clustering);
    for (&i, &c) in open.iter().zip(&labels) {
        let id = base + c as InstanceId;
        r.instance[i] = Some(id);
        r.provenance[i] = Provenance::Clustered;
        r.instances.insert(
            id,
            InstanceInfo {
                semantic: Semantic::Unknown,
                provenance: Provenance::Clustered,
            },
        );
    }
    r
}

#[cfg(test)]
mod tests;
