//! Detection loss: mined binary cross-entropy on anchor logits plus box
//! regression at positive pixels.

use crate::model::{
    Fnv, Tensor, DET_ALPHA, DET_COS, DET_DX, DET_DY, DET_FIELDS, DET_L, DET_SIN, DET_W,
};
use crate::raster::GridGeometry;
use crate::scene::Scene;

use super::LossConfig;

/// Raw size outputs are clamped to this range before `exp`.
pub const SIZE_LOGIT_CLAMP: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionLoss {
    pub classification: f64,
    pub box_iou: f64,
    pub rotation: f64,
    pub positives: usize,
    pub mined_negatives: usize,
    /// Cotangent of the detection map.
    pub grad: Tensor,
    /// Fingerprint of every discrete choice (mining, clamps, box overlaps).
    pub signature: u64,
}

impl DetectionLoss {
    pub fn total(&self) -> f64 {
        self.classification + self.box_iou + self.rotation
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Axis-aligned box as `[x1, x2, y1, y2]`.
pub type Aabb = [f64; 4];

/// `1 - GIoU` between a predicted and a target box, with its gradient with
/// respect to the predicted corners. Non-overlapping boxes still get a
/// gradient through the enclosing-box term.
pub fn giou_loss(a: &Aabb, b: &Aabb) -> (f64, [f64; 4]) {
    giou_loss_traced(a, b, None)
}

fn giou_loss_traced(a: &Aabb, b: &Aabb, sig: Option<&mut Fnv>) -> (f64, [f64; 4]) {
    let iw_raw = a[1].min(b[1]) - a[0].max(b[0]);
    let ih_raw = a[3].min(b[3]) - a[2].max(b[2]);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let area_a = (a[1] - a[0]) * (a[3] - a[2]);
    let area_b = (b[1] - b[0]) * (b[3] - b[2]);
    let union = area_a + area_b - inter;
    let cw = a[1].max(b[1]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[2].min(b[2]);
    let c = cw * ch;
    let loss = 2.0 - inter / union - union / c;

    let d_inter = -(1.0 / union + inter / (union * union)) + 1.0 / c;
    let d_area = inter / (union * union) - 1.0 / c;
    let d_c = union / (c * c);

    let mut g = [0.0; 4];
    // own area
    g[0] -= d_area * (a[3] - a[2]);
    g[1] += d_area * (a[3] - a[2]);
    g[2] -= d_area * (a[1] - a[0]);
    g[3] += d_area * (a[1] - a[0]);
    // intersection
    let x2_in = a[1] < b[1];
    let x1_in = a[0] > b[0];
    let y2_in = a[3] < b[3];
    let y1_in = a[2] > b[2];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if x2_in {
            g[1] += d_inter * ih;
        }
        if x1_in {
            g[0] -= d_inter * ih;
        }
        if y2_in {
            g[3] += d_inter * iw;
        }
        if y1_in {
            g[2] -= d_inter * iw;
        }
    }
    // enclosing box
    let x2_out = a[1] >= b[1];
    let x1_out = a[0] <= b[0];
    let y2_out = a[3] >= b[3];
    let y1_out = a[2] <= b[2];
    if x2_out {
        g[1] += d_c * ch;
    }
    if x1_out {
        g[0] -= d_c * ch;
    }
    if y2_out {
        g[3] += d_c * cw;
    }
    if y1_out {
        g[2] -= d_c * cw;
    }
    if let Some(h) = sig {
        for b in [iw_raw > 0.0, ih_raw > 0.0, x2_in, x1_in, y2_in, y1_in, x2_out, x1_out, y2_out, y1_out] {
            h.bit(b);
        }
    }
    (loss, g)
}

/// Pixel roles for one class plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    /// Positive, matched to the box with this instance id.
    Positive(u32),
    Negative,
    Ignore,
}

fn pixel_roles(scene: &Scene, geom: &GridGeometry, class: u16, cfg: &LossConfig) -> Vec<Role> {
    let centers: Vec<(u32, f64, f64)> = scene
        .boxes
        .iter()
        .filter(|(_, b)| b.class == class)
        .map(|(&id, b)| (id, b.cx, b.cy))
        .collect();
    let mut roles = Vec::with_capacity(geom.h * geom.w);
    for r in 0..geom.h {
        for c in 0..geom.w {
            let (x, y) = geom.cell_center(r, c);
            let nearest = centers
                .iter()
                .map(|&(id, cx, cy)| (id, ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / geom.cell))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            roles.push(match nearest {
                Some((id, d)) if d <= cfg.pos_radius => Role::Positive(id),
                Some((_, d)) if d <= cfg.neg_radius => Role::Ignore,
                _ => Role::Negative,
            });
        }
    }
    roles
}

/// Detection loss for one frame. `det` is the head output over `geom`.
/// Box regression is skipped when `box_regression` is false.
pub fn detection_loss(
    det: &Tensor,
    scene: &Scene,
    geom: &GridGeometry,
    cfg: &LossConfig,
    box_regression: bool,
) -> DetectionLoss {
    let things = scene.catalog.things();
    let plane = geom.h * geom.w;
    debug_assert_eq!(det.shape, vec![DET_FIELDS * things.len(), geom.h, geom.w]);
    let mut grad = Tensor::zeros(&det.shape);
    let mut sig = Fnv::new();
    let ch = |t: usize, f: usize| (t * DET_FIELDS + f) * plane;

    let mut positives: Vec<(usize, usize, u32)> = Vec::new();
    let mut negatives: Vec<(usize, usize)> = Vec::new();
    for (t, class) in things.iter().enumerate() {
        for (pix, role) in pixel_roles(scene, geom, class.id, cfg).into_iter().enumerate() {
            match role {
                Role::Positive(id) => positives.push((t, pix, id)),
                Role::Negative => negatives.push((t, pix)),
                Role::Ignore => {}
            }
        }
    }
    // hardest negatives are those with the largest logits
    negatives.sort_by(|a, b| {
        let la = det.data[ch(a.0, DET_ALPHA) + a.1];
        let lb = det.data[ch(b.0, DET_ALPHA) + b.1];
        lb.total_cmp(&la).then(a.cmp(b))
    });
    let quota = ((cfg.neg_ratio * positives.len() as f64).ceil() as usize).max(cfg.min_negatives);
    negatives.truncate(quota);
    let mut mined: Vec<(usize, usize)> = negatives.clone();
    mined.sort();
    for &(t, p) in &mined {
        sig.bit(t % 2 == 1);
        for k in 0..20 {
            sig.bit((p >> k) & 1 == 1);
        }
    }

    let n_cls = positives.len() + mined.len();
    let mut classification = 0.0;
    if n_cls > 0 {
        let norm = 1.0 / n_cls as f64;
        for &(t, p, _) in &positives {
            let i = ch(t, DET_ALPHA) + p;
            let a = det.data[i];
            classification += softplus(-a) * norm;
            grad.data[i] += (sigmoid(a) - 1.0) * norm;
        }
        for &(t, p) in &mined {
            let i = ch(t, DET_ALPHA) + p;
            let a = det.data[i];
            classification += softplus(a) * norm;
            grad.data[i] += sigmoid(a) * norm;
        }
    }

    let mut box_iou = 0.0;
    let mut rotation = 0.0;
    if box_regression && !positives.is_empty() {
        let norm = 1.0 / positives.len() as f64;
        for &(t, p, id) in &positives {
            let b = &scene.boxes[&id];
            let (px, py) = geom.cell_center(p / geom.w, p % geom.w);
            let get = |f: usize| det.data[ch(t, f) + p];
            let cx = px + get(DET_DX);
            let cy = py + get(DET_DY);
            let raw_w = get(DET_W);
            let raw_l = get(DET_L);
            let cw = raw_w.clamp(-SIZE_LOGIT_CLAMP, SIZE_LOGIT_CLAMP);
            let cl = raw_l.clamp(-SIZE_LOGIT_CLAMP, SIZE_LOGIT_CLAMP);
            sig.bit(cw == raw_w);
            sig.bit(cl == raw_l);
            let (w, l) = (cw.exp(), cl.exp());
            // predicted footprint spans l along x and w along y; the target
            // is the axis-aligned bounds of the rotated box
            let pred = [cx - l / 2.0, cx + l / 2.0, cy - w / 2.0, cy + w / 2.0];
            let target = b.footprint();
            let (loss, g) = giou_loss_traced(&pred, &target, Some(&mut sig));
            box_iou += loss * norm;
            grad.data[ch(t, DET_DX) + p] += (g[0] + g[1]) * norm;
            grad.data[ch(t, DET_DY) + p] += (g[2] + g[3]) * norm;
            if cl == raw_l {
                grad.data[ch(t, DET_L) + p] += (g[1] - g[0]) * 0.5 * l * norm;
            }
            if cw == raw_w {
                grad.data[ch(t, DET_W) + p] += (g[3] - g[2]) * 0.5 * w * norm;
            }
            for (f, target) in [(DET_SIN, (2.0 * b.heading).sin()), (DET_COS, (2.0 * b.heading).cos())] {
                let d = get(f) - target;
                sig.bit(d.abs() < 1.0);
                let (v, dv) = smooth_l1(d);
                rotation += v * norm;
                grad.data[ch(t, f) + p] += dv * norm;
            }
        }
    }

    DetectionLoss {
        classification,
        box_iou,
        rotation,
        positives: positives.len(),
        mined_negatives: mined.len(),
        grad,
        signature: sig.finish(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ClassCatalog, InstanceBox, OpenSetLabel, Point, Scene};

    fn geom() -> GridGeometry {
        GridGeometry {
            origin: [0.0, 0.0, 0.0],
            cell: 1.0,
            z_cell: 1.0,
            h: 8,
            w: 8,
            z: 1,
        }
    }

    fn scene_with(boxes: &[(u32, InstanceBox)]) -> Scene {
        let mut s = Scene::empty(ClassCatalog::desk());
        for (id, b) in boxes {
            s.points.push(Point::new(b.cx, b.cy, 0.5));
            s.labels.push(OpenSetLabel::thing(*id, b.class));
            s.boxes.insert(*id, *b);
        }
        s
    }

    #[test]
    fn no_things_uniform_logits_cost_ln2_per_pixel() {
        let s = Scene::empty(ClassCatalog::desk());
        let det = Tensor::zeros(&[21, 8, 8]);
        let out = detection_loss(&det, &s, &geom(), &LossConfig::default(), true);
        assert_eq!(out.positives, 0);
        assert_eq!(out.mined_negatives, 32);
        assert!((out.classification - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(out.box_iou, 0.0);
    }

    #[test]
    fn exact_boxes_and_saturated_logits_cost_nothing() {
        let b = InstanceBox {
            cx: 4.0,
            cy: 4.0,
            w: 2.0,
            l: 3.0,
            heading: 0.4,
            class: 0,
        };
        let s = scene_with(&[(0, b)]);
        let g = geom();
        let cfg = LossConfig::default();
        let mut det = Tensor::zeros(&[21, 8, 8]);
        let plane = 64;
        let f = b.footprint();
        det.data[..].fill(0.0);
        for t in 0..3 {
            det.data[t * 7 * plane..(t * 7 + 1) * plane].fill(-60.0);
        }
        for r in 0..8 {
            for c in 0..8 {
                let p = r * 8 + c;
                let (x, y) = g.cell_center(r, c);
                if ((x - 4.0).powi(2) + (y - 4.0).powi(2)).sqrt() <= cfg.pos_radius {
                    det.data[p] = 60.0;
                    det.data[DET_DX * plane + p] = 4.0 - x;
                    det.data[DET_DY * plane + p] = 4.0 - y;
                    det.data[DET_W * plane + p] = (f[3] - f[2]).ln();
                    det.data[DET_L * plane + p] = (f[1] - f[0]).ln();
                    det.data[DET_SIN * plane + p] = 0.8f64.sin();
                    det.data[DET_COS * plane + p] = 0.8f64.cos();
                }
            }
        }
        let out = detection_loss(&det, &s, &g, &cfg, true);
        assert!(out.positives > 0);
        assert!(out.total() < 1e-12, "{}", out.total());
    }

    #[test]
    fn giou_of_identical_boxes_is_zero() {
        let a = [0.0, 2.0, 1.0, 4.0];
        assert!(giou_loss(&a, &a).0.abs() < 1e-15);
        // disjoint: IoU 0, enclosing box 4 x 1 holds union 2
        let (l, _) = giou_loss(&[0.0, 1.0, 0.0, 1.0], &[3.0, 4.0, 0.0, 1.0]);
        assert!((l - 1.5).abs() < 1e-12);
    }

    #[test]
    fn giou_gradient_matches_finite_difference() {
        let b = [0.3, 2.1, -0.4, 1.5];
        for a in [[0.0, 2.0, 0.0, 1.0], [2.5, 3.0, 0.1, 0.9], [-1.0, 3.0, -1.0, 2.0], [0.5, 1.5, -2.0, -1.0]] {
            let (_, g) = giou_loss(&a, &b);
            for k in 0..4 {
                let h = 1e-6;
                let mut p = a;
                p[k] += h;
                let mut m = a;
                m[k] -= h;
                let fd = (giou_loss(&p, &b).0 - giou_loss(&m, &b).0) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6, "{a:?} corner {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn roles_respect_radii() {
        let b = InstanceBox {
            cx: 0.5,
            cy: 0.5,
            w: 1.0,
            l: 1.0,
            heading: 0.0,
            class: 1,
        };
        let s = scene_with(&[(3, b)]);
        let roles = pixel_roles(&s, &geom(), 1, &LossConfig::default());
        assert_eq!(roles[0], Role::Positive(3));
        assert_eq!(roles[2], Role::Positive(3));
        assert_eq!(roles[3], Role::Ignore);
        assert_eq!(roles[5], Role::Negative);
        let other = pixel_roles(&s, &geom(), 0, &LossConfig::default());
        assert!(other.iter().all(|r| *r == Role::Negative));
    }
}
