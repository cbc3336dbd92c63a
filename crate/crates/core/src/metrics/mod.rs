//! Panoptic quality for known classes and recall-based unknown quality.
//!
//! A prediction matches a ground-truth segment of the same class when their
//! IoU exceeds 0.5, which makes matches unique. Scores across scenes are
//! computed from pooled counts: true positives, false positives, false
//! negatives, and the sum of matched IoUs.

mod report;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use report::{ClassKind, ClassRow, PanopticReport, Quality};

use crate::error::{Error, Result};
use crate::infer::{InstanceInfo, Provenance, SegmentationResult};
use crate::scene::{ClassId, InstanceId, Scene, Semantic};

/// `|a ∩ b| / |a ∪ b|` for sorted, duplicate-free index lists.
pub fn segment_iou(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::Invalid("IoU of two empty segments".into()));
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(inter as f64 / (a.len() + b.len() - inter) as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    /// `(prediction, ground truth, IoU)` index triples.
    pub tp: Vec<(usize, usize, f64)>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

/// Matches segments of one class. Segments within each list must be
/// disjoint, as they are when taken from a single labeling.
pub fn match_instances(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> MatchSet {
    let mut owner: HashMap<usize, usize> = HashMap::new();
    for (g, seg) in gts.iter().enumerate() {
        for &p in seg {
            owner.insert(p, g);
        }
    }
    let mut gt_taken = vec![false; gts.len()];
    let mut out = MatchSet::default();
    for (pi, seg) in preds.iter().enumerate() {
        let mut inter: BTreeMap<usize, usize> = BTreeMap::new();
        for p in seg {
            if let Some(&g) = owner.get(p) {
                *inter.entry(g).or_default() += 1;
            }
        }
        let best = inter
            .iter()
            .map(|(&g, &i)| (g, i as f64 / (seg.len() + gts[g].len() - i) as f64))
            .find(|&(_, iou)| iou > 0.5);
        match best {
            Some((g, iou)) => {
                gt_taken[g] = true;
                out.tp.push((pi, g, iou));
            }
            None => out.fp.push(pi),
        }
    }
    out.fn_ = (0..gts.len()).filter(|&g| !gt_taken[g]).collect();
    out
}

/// Additive per-class tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

impl Counts {
    pub fn from_matches(m: &MatchSet) -> Self {
        Self {
            tp: m.tp.len(),
            fp: m.fp.len(),
            fn_: m.fn_.len(),
            iou_sum: m.tp.iter().map(|t| t.2).sum(),
        }
    }

    pub fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    /// `(PQ, RQ, SQ)`; `None` when the class has no segments at all.
    pub fn panoptic(&self) -> Option<Quality> {
        if self.is_empty() {
            return None;
        }
        let rq = self.tp as f64 / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64);
        Some(Quality::new(rq, self.sq()))
    }

    /// `(UQ, RQ, SQ)` with recall in place of RQ; false positives are
    /// ignored. `None` without annotated segments.
    pub fn unknown(&self) -> Option<Quality> {
        if self.tp + self.fn_ == 0 {
            return None;
        }
        let rq = self.tp as f64 / (self.tp + self.fn_) as f64;
        Some(Quality::new(rq, self.sq()))
    }
}

pub fn panoptic_quality(m: &MatchSet) -> Option<Quality> {
    Counts::from_matches(m).panoptic()
}

pub fn unknown_quality(m: &MatchSet) -> Option<Quality> {
    Counts::from_matches(m).unknown()
}

/// Tallies for one scene, or pooled over many.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub known: BTreeMap<ClassId, Counts>,
    pub unknown: Counts,
    pub scenes: usize,
    /// Scenes without annotated unknown instances.
    pub scenes_without_unknowns: usize,
}

impl Evaluation {
    pub fn merge(&mut self, o: &Evaluation) {
        for (c, v) in &o.known {
            self.known.entry(*c).or_default().add(v);
        }
        self.unknown.add(&o.unknown);
        self.scenes += o.scenes;
        self.scenes_without_unknowns += o.scenes_without_unknowns;
    }

    pub fn pooled<'a>(evals: impl IntoIterator<Item = &'a Evaluation>) -> Evaluation {
        let mut total = Evaluation::default();
        for e in evals {
            total.merge(e);
        }
        total
    }
}

fn sorted_groups(keys: impl Iterator<Item = Option<u64>>) -> BTreeMap<u64, Vec<usize>> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.enumerate() {
        if let Some(k) = k {
            groups.entry(k).or_default().push(i);
        }
    }
    groups
}

/// Compares a prediction against the scene's labels. Thing classes and the
/// unknown class are matched instance by instance; each stuff class is one
/// segment per scene. Unknown points without an instance in the ground
/// truth take part in no unknown segment.
pub fn evaluate_scene(gt: &Scene, pred: &SegmentationResult) -> Result<Evaluation> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction covers {} points, scene has {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut eval = Evaluation {
        scenes: 1,
        ..Default::default()
    };
    let gt_sem: Vec<Semantic> = gt.labels.iter().map(|l| l.semantic).collect();
    let gt_inst: Vec<Option<InstanceId>> = gt.labels.iter().map(|l| l.instance).collect();

    let thing_segments = |sem: &[Semantic], inst: &[Option<InstanceId>], want: Semantic| {
        sorted_groups(
            sem.iter()
                .zip(inst)
                .map(|(s, i)| if *s == want { i.map(u64::from) } else { None }),
        )
        .into_values()
        .collect::<Vec<_>>()
    };
    for c in gt.catalog.things() {
        let want = Semantic::Class(c.id);
        let g = thing_segments(&gt_sem, &gt_inst, want);
        let p = thing_segments(&pred.semantic, &pred.instance, want);
        eval.known.insert(c.id, Counts::from_matches(&match_instances(&p, &g)));
    }
    for c in gt.catalog.stuff() {
        let want = Semantic::Class(c.id);
        let seg = |sem: &[Semantic]| -> Vec<Vec<usize>> {
            let s: Vec<usize> = (0..sem.len()).filter(|&i| sem[i] == want).collect();
            if s.is_empty() {
                vec![]
            } else {
                vec![s]
            }
        };
        eval.known
            .insert(c.id, Counts::from_matches(&match_instances(&seg(&pred.semantic), &seg(&gt_sem))));
    }
    let g = thing_segments(&gt_sem, &gt_inst, Semantic::Unknown);
    let p = thing_segments(&pred.semantic, &pred.instance, Semantic::Unknown);
    if g.is_empty() {
        eval.scenes_without_unknowns = 1;
    }
    eval.unknown = Counts::from_matches(&match_instances(&p, &g));
    Ok(eval)
}

/// The scene's own labels as a prediction. Unknown points without an
/// instance each become a singleton.
pub fn ground_truth_result(scene: &Scene) -> SegmentationResult {
    let mut r = SegmentationResult::default();
    let mut next = scene.instance_ids().last().map_or(0, |m| m + 1);
    for l in &scene.labels {
        let (inst, prov) = match (l.semantic, l.instance) {
            (Semantic::Unknown, Some(i)) => (Some(i), Provenance::Clustered),
            (Semantic::Unknown, None) => {
                next += 1;
                (Some(next - 1), Provenance::Clustered)
            }
            (_, i) => (i, Provenance::ClosedSet),
        };
        r.instance.push(inst);
        r.semantic.push(l.semantic);
        r.provenance.push(prov);
        if let Some(i) = inst {
            r.instances.insert(
                i,
                InstanceInfo {
                    semantic: l.semantic,
                    provenance: prov,
                },
            );
        }
    }
    r
}

#[cfg(test)]
mod tests;
