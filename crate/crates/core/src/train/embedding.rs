//! Prototype cross-entropy over point-to-prototype association scores, with
//! the learnable "no prototype" slot `U` as an extra logit.

use crate::error::{Error, Result};
use crate::infer::association_score;
use crate::scene::{InstanceId, Scene, Semantic};

/// Where a ground-truth prototype is read from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProtoSource {
    /// The thing map sampled at an instance's box center.
    Thing { instance: InstanceId, cx: f64, cy: f64 },
    /// The pooled prototype of a stuff class (index into the stuff list).
    Stuff { index: usize },
}

/// Ground-truth prototypes for one scene and every point's target slot.
/// Target `prototypes.len()` is the `U` slot.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeTargets {
    pub prototypes: Vec<ProtoSource>,
    pub targets: Vec<usize>,
}

impl PrototypeTargets {
    pub fn from_scene(scene: &Scene) -> Self {
        let mut prototypes = Vec::new();
        let mut thing_slot = std::collections::BTreeMap::new();
        for (&id, b) in &scene.boxes {
            thing_slot.insert(id, prototypes.len());
            prototypes.push(ProtoSource::Thing {
                instance: id,
                cx: b.cx,
                cy: b.cy,
            });
        }
        let stuff_base = prototypes.len();
        for index in 0..scene.catalog.stuff().len() {
            prototypes.push(ProtoSource::Stuff { index });
        }
        let none = prototypes.len();
        let targets = scene
            .labels
            .iter()
            .map(|l| match (l.semantic, l.instance) {
                (Semantic::Class(c), Some(id)) if scene.catalog.is_thing(c) => thing_slot[&id],
                (Semantic::Class(c), _) => scene.catalog.stuff_index(c).map_or(none, |s| stuff_base + s),
                (Semantic::Unknown, _) => none,
            })
            .collect();
        Self { prototypes, targets }
    }

    pub fn none_slot(&self) -> usize {
        self.prototypes.len()
    }
}

/// One prototype's parameters as seen by the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoParams {
    pub mu: Vec<f64>,
    /// Variance after the clamp.
    pub var: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingLoss {
    pub loss: f64,
    /// `N x F`, row-major.
    pub d_phi: Vec<f64>,
    pub d_mu: Vec<Vec<f64>>,
    pub d_var: Vec<f64>,
    pub d_u: f64,
}

/// Mean softmax cross-entropy over `N` points. `phi` is `N x F` row-major;
/// `targets[i] == protos.len()` selects the `U` slot.
pub fn embedding_loss(phi: &[f64], dim: usize, protos: &[ProtoParams], targets: &[usize], u: f64) -> Result<EmbeddingLoss> {
    let n = targets.len();
    if phi.len() != n * dim || protos.iter().any(|p| p.mu.len() != dim) {
        return Err(Error::Shape("embedding and prototype dimensions disagree".into()));
    }
    let k = protos.len();
    if targets.iter().any(|&t| t > k) {
        return Err(Error::Invalid("target slot out of range".into()));
    }
    if k == 0 && targets.iter().any(|&t| t != k) {
        return Err(Error::Invalid("no prototypes to associate with".into()));
    }
    let mut out = EmbeddingLoss {
        loss: 0.0,
        d_phi: vec![0.0; n * dim],
        d_mu: vec![vec![0.0; dim]; k],
        d_var: vec![0.0; k],
        d_u: 0.0,
    };
    if n == 0 {
        return Ok(out);
    }
    let inv_n = 1.0 / n as f64;
    let half_f = 0.5 * dim as f64;
    let mut scores = vec![0.0; k + 1];
    for (i, &t) in targets.iter().enumerate() {
        let x = &phi[i * dim..(i + 1) * dim];
        for (s, p) in scores.iter_mut().zip(protos) {
            *s = association_score(x, &p.mu, p.var);
        }
        scores[k] = u;
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        let lse = m + z.ln();
        out.loss += (lse - scores[t]) * inv_n;
        for (j, p) in protos.iter().enumerate() {
            let g = ((scores[j] - lse).exp() - f64::from(j == t)) * inv_n;
            if g == 0.0 {
                continue;
            }
            let mut d2 = 0.0;
            for f in 0..dim {
                let diff = x[f] - p.mu[f];
                d2 += diff * diff;
                let dscore_dphi = -diff / p.var;
                out.d_phi[i * dim + f] += g * dscore_dphi;
                out.d_mu[j][f] -= g * dscore_dphi;
            }
            out.d_var[j] += g * (d2 / (2.0 * p.var * p.var) - half_f / p.var);
        }
        out.d_u += ((scores[k] - lse).exp() - f64::from(k == t)) * inv_n;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticLoss {
    pub loss: f64,
    /// `N x S`, row-major.
    pub d_logits: Vec<f64>,
}

/// Mean softmax cross-entropy of per-point class logits (`N x S`).
pub fn semantic_loss(logits: &[f64], classes: usize, targets: &[usize]) -> SemanticLoss {
    let n = targets.len();
    let mut d_logits = vec![0.0; n * classes];
    let mut loss = 0.0;
    if n == 0 {
        return SemanticLoss { loss, d_logits };
    }
    let inv_n = 1.0 / n as f64;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        loss += (lse - row[t]) * inv_n;
        for c in 0..classes {
            d_logits[i * classes + c] = ((row[c] - lse).exp() - f64::from(c == t)) * inv_n;
        }
    }
    SemanticLoss { loss, d_logits }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_scores_give_log_slot_count() {
        // phi = mu at unit variance scores 0 for every prototype, and U = 0
        let protos = vec![
            ProtoParams {
                mu: vec![0.0, 0.0],
                var: 1.0
            };
            3
        ];
        let out = embedding_loss(&[0.0, 0.0, 0.0, 0.0], 2, &protos, &[0, 3], 0.0).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_drops_as_competitors_move_away() {
        let eval = |dist: f64| {
            let protos = vec![
                ProtoParams { mu: vec![0.0, 0.0], var: 1.0 },
                ProtoParams { mu: vec![dist, 0.0], var: 1.0 },
            ];
            embedding_loss(&[0.0, 0.0], 2, &protos, &[0], -5.0).unwrap().loss
        };
        let k = 2f64;
        assert!(eval(1.0) < (k + 1.0).ln());
        assert!(eval(2.0) < eval(1.0));
        assert!(eval(4.0) < eval(2.0));
        // hand evaluation: scores (0, -d^2/2, -5)
        let d: f64 = 2.0;
        let want = (1.0 + (-d * d / 2.0).exp() + (-5f64).exp()).ln();
        assert!((eval(d) - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 3;
        let n = 10;
        let mut phi: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut protos: Vec<ProtoParams> = (0..4)
            .map(|_| ProtoParams {
                mu: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                var: rng.random_range(0.3..2.0),
            })
            .collect();
        let targets: Vec<usize> = (0..n).map(|i| i % 5).collect();
        let mut u = 0.2;
        let base = embedding_loss(&phi, dim, &protos, &targets, u).unwrap();
        let h = 1e-6;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
        for i in 0..phi.len() {
            let o = phi[i];
            phi[i] = o + h;
            let p = embedding_loss(&phi, dim, &protos, &targets, u).unwrap().loss;
            phi[i] = o - h;
            let m = embedding_loss(&phi, dim, &protos, &targets, u).unwrap().loss;
            phi[i] = o;
            assert!(rel((p - m) / (2.0 * h), base.d_phi[i]) < 1e-6);
        }
        for j in 0..protos.len() {
            for f in 0..dim {
                let o = protos[j].mu[f];
                protos[j].mu[f] = o + h;
                let p = embedding_loss(&phi, dim, &protos, &targets, u).unwrap().loss;
                protos[j].mu[f] = o - h;
                let m = embedding_loss(&phi, dim, &protos, &targets, u).unwrap().loss;
                protos[j].mu[f] = o;
                assert!(rel((p - m) / (2.0 * h), base.d_mu[j][f]) < 1e-6);
            }
            let o = protos[j].var;
            protos[j].var = o + h;
            let p = embedding_loss(&phi, dim, &protos, &targets, u).unwrap().loss;
            protos[j].var = o - h;
            let m = embedding_loss(&phi, dim, &protos, &targets, u).unwrap().loss;
            protos[j].var = o;
            assert!(rel((p - m) / (2.0 * h), base.d_var[j]) < 1e-6);
        }
        let o = u;
        u = o + h;
        let p = embedding_loss(&phi, dim, &protos, &targets, u).unwrap().loss;
        u = o - h;
        let m = embedding_loss(&phi, dim, &protos, &targets, u).unwrap().loss;
        assert!(rel((p - m) / (2.0 * h), base.d_u) < 1e-6);
    }

    #[test]
    fn empty_prototypes_without_unknowns_is_rejected() {
        assert!(embedding_loss(&[0.0], 1, &[], &[0], 0.0).is_ok());
        let protos = [ProtoParams { mu: vec![0.0], var: 1.0 }];
        assert!(embedding_loss(&[0.0], 1, &protos, &[2], 0.0).is_err());
    }

    #[test]
    fn semantic_loss_is_uniform_at_zero() {
        let out = semantic_loss(&[0.0; 10], 5, &[0, 4]);
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
        assert!((out.d_logits.iter().sum::<f64>()).abs() < 1e-12);
    }
}
