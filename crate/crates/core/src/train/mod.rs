//! Losses, the optimizer, and the training loop.
//!
//! The total objective for one frame is
//! `lambda_det * det + lambda_emb * (lambda_proto * proto + lambda_disc * disc) + lambda_sem * sem`,
//! where `sem` only exists when the network has a semantic branch.

mod adam;
mod detection;
mod discriminative;
mod embedding;
mod gradcheck;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub(crate) use detection::sigmoid;
pub use detection::{detection_loss, giou_loss, Aabb, DetectionLoss, SIZE_LOGIT_CLAMP};
pub use discriminative::{discriminative_loss, DiscriminativeLoss};
pub use gradcheck::{gradient_check, miniature_scene, GradCheckReport, LossTerm};
pub use embedding::{
    embedding_loss, semantic_loss, EmbeddingLoss, ProtoParams, ProtoSource, PrototypeTargets,
    SemanticLoss,
};

use crate::error::{Error, Result};
use crate::model::{variance_from_raw, Checkpoint, Fnv, ModelConfig, Network, NetworkOutput, NetworkParams, OutputGrad};
use crate::raster::{bilinear_sample, bilinear_scatter, trilinear_sample_into, trilinear_scatter, voxelize, GridGeometry};
use crate::scene::{Scene, Semantic};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_det: f64,
    pub lambda_emb: f64,
    pub lambda_disc: f64,
    /// Weight of the prototype cross-entropy inside the embedding term.
    pub lambda_proto: f64,
    /// Weight of the per-point semantic cross-entropy (semantic branch only).
    pub lambda_sem: f64,
    /// Pixels within this many output cells of a same-class center are positive.
    pub pos_radius: f64,
    /// Pixels farther than this many output cells from every same-class center are negative.
    pub neg_radius: f64,
    /// Mined negatives per positive.
    pub neg_ratio: f64,
    pub min_negatives: usize,
    pub delta_v: f64,
    pub delta_d: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_det: 1.0,
            lambda_emb: 1.0,
            lambda_disc: 1.0,
            lambda_proto: 1.0,
            lambda_sem: 1.0,
            pos_radius: 2.0,
            neg_radius: 4.0,
            neg_ratio: 3.0,
            min_negatives: 32,
            delta_v: 0.5,
            delta_d: 1.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_det", self.lambda_det),
            ("lambda_emb", self.lambda_emb),
            ("lambda_disc", self.lambda_disc),
            ("lambda_proto", self.lambda_proto),
            ("lambda_sem", self.lambda_sem),
            ("neg_ratio", self.neg_ratio),
            ("delta_v", self.delta_v),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0")));
            }
        }
        if !(self.pos_radius > 0.0 && self.neg_radius >= self.pos_radius) {
            return Err(Error::Config("loss radii must satisfy 0 < pos_radius <= neg_radius".into()));
        }
        if !(self.delta_d > 0.0) {
            return Err(Error::Config("loss.delta_d must be > 0".into()));
        }
        Ok(())
    }

    /// Push margin is no wider than the pull margin, so instances may never separate.
    pub fn margins_overlap(&self) -> bool {
        self.delta_d <= 2.0 * self.delta_v
    }
}

/// Loss terms for one frame, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub det: f64,
    pub proto: f64,
    pub disc: f64,
    pub sem: f64,
    pub total: f64,
}

pub struct SceneLoss {
    pub terms: LossTerms,
    pub grad: OutputGrad,
    /// Fingerprint of the loss's discrete decisions (mining, clamps, overlaps).
    pub signature: u64,
}

/// Semantic target of a label for the semantic branch: thing classes, then
/// stuff classes, then one unknown slot.
pub fn semantic_target(scene: &Scene, semantic: Semantic) -> usize {
    let t = scene.catalog.things().len();
    let s = scene.catalog.stuff().len();
    match semantic {
        Semantic::Class(c) => scene
            .catalog
            .thing_index(c)
            .or_else(|| scene.catalog.stuff_index(c).map(|i| t + i))
            .unwrap_or(t + s),
        Semantic::Unknown => t + s,
    }
}

/// Evaluates every loss term on a forward output and returns the weighted
/// total with its cotangent.
pub fn scene_loss(out: &NetworkOutput, scene: &Scene, model: &ModelConfig, cfg: &LossConfig) -> Result<SceneLoss> {
    let things = scene.catalog.things().len();
    let stuffs = scene.catalog.stuff().len();
    if things != model.thing_classes || stuffs != model.stuff_classes {
        return Err(Error::Shape(format!(
            "scene has {things} thing / {stuffs} stuff classes, model expects {} / {}",
            model.thing_classes, model.stuff_classes
        )));
    }
    let mut grad = OutputGrad::zeros_like(out);
    let mut sig = Fnv::new();
    let mut terms = LossTerms::default();

    if cfg.lambda_det > 0.0 {
        let det = detection_loss(&out.det, scene, &out.geom, cfg, model.box_regression);
        terms.det = det.total();
        for (g, d) in grad.det.data.iter_mut().zip(&det.grad.data) {
            *g += cfg.lambda_det * d;
        }
        let s = det.signature;
        for k in 0..64 {
            sig.bit((s >> k) & 1 == 1);
        }
    }

    let dim = model.embed_dim;
    let geom = GridGeometry {
        z: model.z_bins,
        ..out.geom
    };
    let n = scene.len();
    let mut phi = vec![0.0; n * dim];
    if cfg.lambda_emb > 0.0 {
        for (i, p) in scene.points.iter().enumerate() {
            trilinear_sample_into(&out.point.data, dim, &geom, p.x, p.y, p.z, &mut phi[i * dim..(i + 1) * dim]);
        }
    }
    let mut d_phi = vec![0.0; n * dim];

    if cfg.lambda_emb > 0.0 {
        let targets = PrototypeTargets::from_scene(scene);
        let mut raw = Vec::with_capacity(targets.prototypes.len());
        for src in &targets.prototypes {
            raw.push(match *src {
                ProtoSource::Thing { cx, cy, .. } => bilinear_sample(&out.thing.data, dim + 1, &geom, cx, cy),
                ProtoSource::Stuff { index } => out.stuff[index].clone(),
            });
        }
        let mut dvar_ds = Vec::with_capacity(raw.len());
        let protos: Vec<ProtoParams> = raw
            .iter()
            .map(|r| {
                let (var, dv) = if model.predict_variance {
                    variance_from_raw(r[dim])
                } else {
                    (1.0, 0.0)
                };
                sig.bit(dv == 0.0);
                dvar_ds.push(dv);
                ProtoParams {
                    mu: r[..dim].to_vec(),
                    var,
                }
            })
            .collect();
        let emb = embedding_loss(&phi, dim, &protos, &targets.targets, out.u)?;
        terms.proto = emb.loss;
        let w = cfg.lambda_emb * cfg.lambda_proto;
        for (d, e) in d_phi.iter_mut().zip(&emb.d_phi) {
            *d += w * e;
        }
        for (k, src) in targets.prototypes.iter().enumerate() {
            let mut g: Vec<f64> = emb.d_mu[k].iter().map(|v| w * v).collect();
            g.push(w * emb.d_var[k] * dvar_ds[k]);
            match *src {
                ProtoSource::Thing { cx, cy, .. } => bilinear_scatter(&mut grad.thing.data, dim + 1, &geom, cx, cy, &g),
                ProtoSource::Stuff { index } => {
                    for (a, b) in grad.stuff[index].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
            }
        }
        grad.u += w * emb.d_u;

        if cfg.lambda_disc > 0.0 {
            let ids: Vec<u32> = scene.boxes.keys().copied().collect();
            let inst: Vec<Option<usize>> = scene
                .labels
                .iter()
                .map(|l| l.instance.and_then(|id| ids.binary_search(&id).ok()))
                .collect();
            let disc = discriminative_loss(&phi, dim, &inst, ids.len(), cfg.delta_v, cfg.delta_d);
            terms.disc = disc.total();
            let w = cfg.lambda_emb * cfg.lambda_disc;
            for (d, e) in d_phi.iter_mut().zip(&disc.d_phi) {
                *d += w * e;
            }
        }
        for (i, p) in scene.points.iter().enumerate() {
            trilinear_scatter(&mut grad.point.data, dim, &geom, p.x, p.y, p.z, &d_phi[i * dim..(i + 1) * dim]);
        }
    }

    if let (Some(logits_map), Some(g_map)) = (&out.semantic, grad.semantic.as_mut()) {
        if cfg.lambda_sem > 0.0 {
            let classes = model.semantic_classes;
            if classes != things + stuffs + 1 {
                return Err(Error::Shape(format!(
                    "semantic branch has {classes} classes, scene needs {}",
                    things + stuffs + 1
                )));
            }
            let mut logits = vec![0.0; n * classes];
            for (i, p) in scene.points.iter().enumerate() {
                trilinear_sample_into(&logits_map.data, classes, &geom, p.x, p.y, p.z, &mut logits[i * classes..(i + 1) * classes]);
            }
            let targets: Vec<usize> = scene.labels.iter().map(|l| semantic_target(scene, l.semantic)).collect();
            let sem = semantic_loss(&logits, classes, &targets);
            terms.sem = sem.loss;
            for (i, p) in scene.points.iter().enumerate() {
                let g: Vec<f64> = sem.d_logits[i * classes..(i + 1) * classes].iter().map(|v| cfg.lambda_sem * v).collect();
                trilinear_scatter(&mut g_map.data, classes, &geom, p.x, p.y, p.z, &g);
            }
        }
    }

    terms.total = cfg.lambda_det * terms.det
        + cfg.lambda_emb * (cfg.lambda_proto * terms.proto + cfg.lambda_disc * terms.disc)
        + if out.semantic.is_some() { cfg.lambda_sem * terms.sem } else { 0.0 };
    if !terms.total.is_finite() {
        return Err(Error::NonFinite(format!("loss on scene seed {}: {terms:?}", scene.seed)));
    }
    Ok(SceneLoss {
        terms,
        grad,
        signature: sig.finish(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate is multiplied by `decay` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 4e-3,
            decay_every: 5,
            decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        if self.decay_every == 0 || !(self.decay > 0.0) {
            return Err(Error::Config("train.decay_every and train.decay must be > 0".into()));
        }
        self.loss.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub scene_seed: u64,
    pub det: f64,
    pub proto: f64,
    pub disc: f64,
    pub sem: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::at(path, e))?;
        f.write_all(self.to_csv()?.as_bytes()).map_err(|e| Error::at(path, e))
    }

    /// Mean total loss over the steps of one epoch.
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.epoch == epoch).map(|r| r.total).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub struct Trained {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Trains from scratch with batch size 1. Scene order is reshuffled every
/// epoch from `seed`; initialization also derives from `seed`.
pub fn train(scenes: &[Scene], grid: &GridGeometry, model: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    if scenes.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    grid.validate()?;
    cfg.validate()?;
    if grid.z != model.z_bins * model.frames {
        return Err(Error::Config(format!(
            "grid has {} vertical bins, model expects {}",
            grid.z,
            model.z_bins * model.frames
        )));
    }
    let net = Network::new(model.clone())?;
    let mut params = net.init_params(seed);
    let inputs: Vec<_> = scenes.iter().map(|s| voxelize(&s.points, grid).tensor).collect();
    let mut opt = Adam::new(&params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_0d3e);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        for &i in &order {
            let pass = net.forward(&inputs[i], &params)?;
            let loss = scene_loss(&pass.output, &scenes[i], model, &cfg.loss)?;
            let grads = net.backward(&pass, &params, &loss.grad)?;
            opt.step(&mut params, &grads, lr)?;
            let t = loss.terms;
            log.rows.push(LogRow {
                step: log.rows.len(),
                epoch,
                scene_seed: scenes[i].seed,
                det: t.det,
                proto: t.proto,
                disc: t.disc,
                sem: t.sem,
                total: t.total,
                lr,
            });
        }
    }
    Ok(Trained {
        checkpoint: Checkpoint {
            model: model.clone(),
            grid: *grid,
            params,
        },
        log,
    })
}

/// Total loss of `params` on one scene, for evaluation and gradient checks.
pub fn evaluate_loss(
    net: &Network,
    params: &NetworkParams,
    scene: &Scene,
    grid: &GridGeometry,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let pass = net.forward(&voxelize(&scene.points, grid).tensor, params)?;
    Ok(scene_loss(&pass.output, scene, &net.config, cfg)?.terms)
}
