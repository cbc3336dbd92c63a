//! Finite-difference verification of the analytic gradients of the full
//! network plus loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{scene_loss, LossConfig};
use crate::error::Result;
use crate::model::{ModelConfig, Network, NetworkParams};
use crate::raster::{voxelize, BevTensor, GridGeometry};
use crate::scene::{ClassCatalog, ClassDef, InstanceBox, OpenSetLabel, Point, Scene};

/// Which term of the objective to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Detection,
    Prototype,
    Discriminative,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [Self::Detection, Self::Prototype, Self::Discriminative, Self::Total];

    /// Loss weights that isolate this term.
    pub fn weights(self, base: &LossConfig) -> LossConfig {
        let mut c = base.clone();
        match self {
            Self::Detection => {
                c.lambda_emb = 0.0;
                c.lambda_sem = 0.0;
            }
            Self::Prototype => {
                c.lambda_det = 0.0;
                c.lambda_disc = 0.0;
                c.lambda_sem = 0.0;
            }
            Self::Discriminative => {
                c.lambda_det = 0.0;
                c.lambda_proto = 0.0;
                c.lambda_sem = 0.0;
            }
            Self::Total => {}
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub term: LossTerm,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Block name and offset of the worst coordinate.
    pub worst: (String, usize),
}

/// Grid and scene used by the gradient checks: an 8 x 8 x 2 grid over
/// 4 m x 4 m with two thing classes and one stuff class.
pub fn miniature_scene(seed: u64) -> (GridGeometry, Scene) {
    let geom = GridGeometry {
        origin: [0.0, 0.0, 0.0],
        cell: 0.5,
        z_cell: 1.0,
        h: 8,
        w: 8,
        z: 2,
    };
    let def = |id, name: &str| ClassDef {
        id,
        name: name.to_string(),
    };
    let catalog = ClassCatalog::new(vec![def(0, "car"), def(1, "person")], vec![def(3, "ground")])
        .expect("static catalog");
    let mut scene = Scene::empty(catalog);
    scene.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..40 {
        scene
            .points
            .push(Point::new(rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), rng.random_range(0.0..0.2)));
        scene.labels.push(OpenSetLabel::stuff(3));
    }
    let objects = [(0u32, 0u16, 1.1, 1.2, 1.2, 0.8), (1, 1, 2.9, 2.8, 0.6, 0.6), (2, 0, 2.9, 0.9, 1.0, 0.7)];
    for &(id, class, cx, cy, l, w) in &objects {
        scene.boxes.insert(
            id,
            InstanceBox {
                cx,
                cy,
                w,
                l,
                heading: rng.random_range(-1.0..1.0),
                class,
            },
        );
        for _ in 0..12 {
            scene.points.push(Point::new(
                cx + rng.random_range(-l / 2.0..l / 2.0),
                cy + rng.random_range(-w / 2.0..w / 2.0),
                rng.random_range(0.2..1.8),
            ));
            scene.labels.push(OpenSetLabel::thing(id, class));
        }
    }
    for _ in 0..10 {
        scene
            .points
            .push(Point::new(rng.random_range(0.6..1.4), rng.random_range(2.8..3.6), rng.random_range(0.2..1.0)));
        scene.labels.push(OpenSetLabel::unknown(None));
    }
    (geom, scene)
}

fn loss_and_signature(
    net: &Network,
    params: &NetworkParams,
    input: &BevTensor,
    scene: &Scene,
    cfg: &LossConfig,
) -> Result<(f64, (u64, u64))> {
    let pass = net.forward(input, params)?;
    let loss = scene_loss(&pass.output, scene, &net.config, cfg)?;
    Ok((loss.terms.total, (pass.kink_signature(), loss.signature)))
}

/// Compares the analytic gradient of `term` with central differences at
/// every parameter. Relative error is `|a - n| / max(|a|, |n|, floor)`.
/// Coordinates whose perturbation changes any ReLU mask or discrete loss
/// decision are skipped and counted.
pub fn gradient_check(
    model: &ModelConfig,
    params: &NetworkParams,
    scene: &Scene,
    geom: &GridGeometry,
    base: &LossConfig,
    term: LossTerm,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let cfg = term.weights(base);
    let net = Network::new(model.clone())?;
    let input = voxelize(&scene.points, geom).tensor;
    let pass = net.forward(&input, params)?;
    let loss = scene_loss(&pass.output, scene, model, &cfg)?;
    let base_sig = (pass.kink_signature(), loss.signature);
    let grads = net.backward(&pass, params, &loss.grad)?;

    let mut report = GradCheckReport {
        term,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
    };
    let mut probe = params.clone();
    for (b, name) in params.names.iter().enumerate() {
        for k in 0..params.tensors[b].len() {
            let orig = params.tensors[b].data[k];
            probe.tensors[b].data[k] = orig + step;
            let (lp, sp) = loss_and_signature(&net, &probe, &input, scene, &cfg)?;
            probe.tensors[b].data[k] = orig - step;
            let (lm, sm) = loss_and_signature(&net, &probe, &input, scene, &cfg)?;
            probe.tensors[b].data[k] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * step);
            let analytic = grads.tensors[b].data[k];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.clone(), k);
            }
        }
    }
    Ok(report)
}
