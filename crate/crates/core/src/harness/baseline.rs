//! Bottom-up baselines: per-point semantics first, then DBSCAN inside each
//! predicted thing class and the unknown class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{
    dbscan, point_embeddings, semantic_predictions, ClusterInput, ClusteringConfig, InstanceInfo, Provenance,
    SegmentationResult, Segmenter,
};
use crate::scene::{InstanceId, Scene, Semantic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    /// Clusters on 3D point locations.
    #[serde(rename = "bottomup")]
    BottomUp,
    /// Clusters on learned point embeddings.
    #[serde(rename = "bottomup_e")]
    BottomUpE,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub variant: BaselineVariant,
    /// DBSCAN radius, in meters for `bottomup` and embedding units for
    /// `bottomup_e`.
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            variant: BaselineVariant::BottomUp,
            eps: ClusteringConfig::default().eps,
            min_pts: ClusteringConfig::default().min_pts,
        }
    }
}

impl BaselineSpec {
    /// The variant fixes the feature source: location only or embedding only.
    pub fn clustering(&self) -> ClusteringConfig {
        ClusteringConfig {
            beta: match self.variant {
                BaselineVariant::BottomUp => 1.0,
                BaselineVariant::BottomUpE => 0.0,
            },
            eps: self.eps,
            min_pts: self.min_pts,
            planar: false,
        }
    }
}

fn segment_one(scene: &Scene, semantic: &[Semantic], phi: &[f64], dim: usize, cfg: &ClusteringConfig) -> SegmentationResult {
    let n = scene.len();
    let mut r = SegmentationResult {
        instance: vec![None; n],
        semantic: semantic.to_vec(),
        provenance: vec![Provenance::ClosedSet; n],
        instances: Default::default(),
    };
    let groups = scene
        .catalog
        .things()
        .iter()
        .map(|c| Semantic::Class(c.id))
        .chain(std::iter::once(Semantic::Unknown));
    let mut next: InstanceId = 0;
    for want in groups {
        let members: Vec<usize> = (0..n).filter(|&i| semantic[i] == want).collect();
        if members.is_empty() {
            continue;
        }
        let xyz: Vec<[f64; 3]> = members.iter().map(|&i| scene.points[i].xyz()).collect();
        let sub: Vec<f64> = members.iter().flat_map(|&i| phi[i * dim..(i + 1) * dim].iter().copied()).collect();
        let labels = dbscan(&ClusterInput { xyz: &xyz, phi: &sub, dim }, cfg);
        let provenance = if want == Semantic::Unknown {
            Provenance::Clustered
        } else {
            Provenance::ClosedSet
        };
        let count = labels.iter().max().map_or(0, |m| m + 1) as InstanceId;
        for (&i, &c) in members.iter().zip(&labels) {
            r.instance[i] = Some(next + c as InstanceId);
            r.provenance[i] = provenance;
        }
        for c in 0..count {
            r.instances.insert(
                next + c,
                InstanceInfo {
                    semantic: want,
                    provenance,
                },
            );
        }
        next += count;
    }
    r
}

/// Runs a baseline over `scenes`. Semantics come from the checkpoint's
/// semantic branch; `bottomup` without a checkpoint uses the scenes' own
/// semantic labels instead. `bottomup_e` needs a checkpoint for its
/// embeddings.
pub fn run_baseline(spec: &BaselineSpec, scenes: &[Scene], seg: Option<&Segmenter>) -> Result<Vec<SegmentationResult>> {
    let cfg = spec.clustering();
    cfg.validate()?;
    if spec.variant == BaselineVariant::BottomUpE && seg.is_none() {
        return Err(Error::Invalid("bottomup_e needs a checkpoint trained with the discriminative loss".into()));
    }
    scenes
        .par_iter()
        .map(|scene| {
            let (semantic, phi, dim) = match seg {
                Some(seg) => {
                    let model = &seg.network.config;
                    let out = seg.forward(&scene.points)?;
                    let semantic = semantic_predictions(&out, model, &scene.catalog, &scene.points)
                        .ok_or_else(|| Error::Invalid("checkpoint has no semantic branch".into()))?;
                    let phi = point_embeddings(&out, model, &scene.points);
                    (semantic, phi, model.embed_dim)
                }
                None => (scene.labels.iter().map(|l| l.semantic).collect(), Vec::new(), 0),
            };
            Ok(segment_one(scene, &semantic, &phi, dim, &cfg))
        })
        .collect()
}
