//! Synthetic LiDAR-like frames with exact open-set ground truth.
//!
//! Objects are sampled as surface point sets. Known things come from a fixed
//! shape library (one shape per thing class); unknown objects come from a
//! disjoint library. Placement is rejection-sampled on oriented footprints so
//! objects never interpenetrate, with an optional "adjacent" mode that parks
//! an object next to an earlier one of the same group with a small gap.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassCatalog, ClassId, InstanceBox, InstanceId, OpenSetLabel, Point, Scene};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    // known-thing library
    VehicleBox,
    PedestrianColumn,
    CyclistSlab,
    // unknown library
    LShape,
    Ellipsoid,
    Cone,
    Blob,
    Table,
}

impl ShapeKind {
    pub const KNOWN: [ShapeKind; 3] = [ShapeKind::VehicleBox, ShapeKind::PedestrianColumn, ShapeKind::CyclistSlab];
    pub const UNKNOWN: [ShapeKind; 5] = [
        ShapeKind::LShape,
        ShapeKind::Ellipsoid,
        ShapeKind::Cone,
        ShapeKind::Blob,
        ShapeKind::Table,
    ];

    pub fn in_known_library(self) -> bool {
        Self::KNOWN.contains(&self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThingKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl ThingKind {
    pub fn class(self) -> ClassId {
        match self {
            ThingKind::Vehicle => 0,
            ThingKind::Pedestrian => 1,
            ThingKind::Cyclist => 2,
        }
    }

    pub fn shape(self) -> ShapeKind {
        match self {
            ThingKind::Vehicle => ShapeKind::VehicleBox,
            ThingKind::Pedestrian => ShapeKind::PedestrianColumn,
            ThingKind::Cyclist => ShapeKind::CyclistSlab,
        }
    }
}

pub const GROUND_CLASS: ClassId = 3;

/// Inclusive `[min, max]` count. Signed so that negative values in a config
/// file are caught by validation rather than by the parser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange(pub i64, pub i64);

impl CountRange {
    pub fn exactly(n: i64) -> Self {
        Self(n, n)
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.0 < 0 || self.1 < 0 {
            return Err(Error::Config(format!("{what}: negative count")));
        }
        if self.0 > self.1 {
            return Err(Error::Config(format!("{what}: min {} exceeds max {}", self.0, self.1)));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(self.0..=self.1) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThingSpawn {
    pub kind: ThingKind,
    pub count: CountRange,
    /// Surface sampling density range, points per square meter.
    pub density: [f64; 2],
    /// Probability that an instance is parked next to an earlier one.
    #[serde(default)]
    pub adjacent_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnknownSpawn {
    pub count: CountRange,
    pub shapes: Vec<ShapeKind>,
    pub density: [f64; 2],
    #[serde(default)]
    pub adjacent_prob: f64,
    /// Whether unknown objects get instance ids. Training data leaves them
    /// unlabeled; evaluation data annotates them.
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGenConfig {
    /// `[x_min, x_max, y_min, y_max, z_min, z_max]` in meters.
    pub roi: [f64; 6],
    pub ground_density: f64,
    pub things: Vec<ThingSpawn>,
    pub unknowns: UnknownSpawn,
    pub noise_sigma: f64,
    /// Minimum clearance between independently placed objects.
    pub min_gap: f64,
    /// Gap range used for adjacent placements.
    pub adjacent_gap: [f64; 2],
    #[serde(default)]
    pub with_intensity: bool,
}

impl SceneGenConfig {
    /// Desk-scale frames: a 16 m square around the ego car with a handful of
    /// things and unlabeled unknown clutter.
    pub fn desk_train() -> Self {
        Self {
            roi: [-8.0, 8.0, -8.0, 8.0, -0.5, 3.5],
            ground_density: 3.0,
            things: vec![
                ThingSpawn {
                    kind: ThingKind::Vehicle,
                    count: CountRange(2, 4),
                    density: [12.0, 18.0],
                    adjacent_prob: 0.4,
                },
                ThingSpawn {
                    kind: ThingKind::Pedestrian,
                    count: CountRange(1, 3),
                    density: [30.0, 40.0],
                    adjacent_prob: 0.0,
                },
                ThingSpawn {
                    kind: ThingKind::Cyclist,
                    count: CountRange(1, 2),
                    density: [20.0, 28.0],
                    adjacent_prob: 0.0,
                },
            ],
            unknowns: UnknownSpawn {
                count: CountRange(2, 4),
                shapes: vec![ShapeKind::Ellipsoid, ShapeKind::Cone, ShapeKind::Table],
                density: [14.0, 22.0],
                adjacent_prob: 0.5,
                labeled: false,
            },
            noise_sigma: 0.02,
            min_gap: 1.0,
            adjacent_gap: [0.25, 0.5],
            with_intensity: false,
        }
    }

    /// Evaluation frames: annotated unknowns drawn from the whole unknown
    /// library, including shapes that never appear in training frames.
    pub fn desk_test() -> Self {
        let mut c = Self::desk_train();
        c.unknowns.shapes = ShapeKind::UNKNOWN.to_vec();
        c.unknowns.labeled = true;
        c
    }

    /// Only ground, no objects.
    pub fn empty_ground() -> Self {
        let mut c = Self::desk_train();
        for t in &mut c.things {
            t.count = CountRange::exactly(0);
        }
        c.unknowns.count = CountRange::exactly(0);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let [x0, x1, y0, y1, z0, z1] = self.roi;
        if !(x1 > x0 && y1 > y0 && z1 > z0) || self.roi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("roi {:?} has zero volume", self.roi)));
        }
        if z0 > 0.0 || z1 <= 0.0 {
            return Err(Error::Config("roi must contain the ground plane z = 0".into()));
        }
        if !(self.ground_density >= 0.0) {
            return Err(Error::Config("ground_density must be >= 0".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.min_gap >= 0.0) {
            return Err(Error::Config("noise_sigma and min_gap must be >= 0".into()));
        }
        let [g0, g1] = self.adjacent_gap;
        if !(g0 >= 0.0 && g1 >= g0) {
            return Err(Error::Config("adjacent_gap must satisfy 0 <= min <= max".into()));
        }
        for t in &self.things {
            t.count.check(&format!("things.{:?}.count", t.kind))?;
            check_density(t.density)?;
            check_prob(t.adjacent_prob)?;
        }
        self.unknowns.count.check("unknowns.count")?;
        check_density(self.unknowns.density)?;
        check_prob(self.unknowns.adjacent_prob)?;
        if self.unknowns.count.1 > 0 && self.unknowns.shapes.is_empty() {
            return Err(Error::Config("unknowns.shapes is empty".into()));
        }
        if let Some(s) = self.unknowns.shapes.iter().find(|s| s.in_known_library()) {
            return Err(Error::Config(format!(
                "unknowns.shapes: {s:?} belongs to the known-thing library"
            )));
        }
        Ok(())
    }
}

fn check_density(d: [f64; 2]) -> Result<()> {
    if !(d[0] > 0.0 && d[1] >= d[0]) {
        return Err(Error::Config(format!("density range {d:?} is invalid")));
    }
    Ok(())
}

fn check_prob(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Oriented rectangle on the ground plane.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    cx: f64,
    cy: f64,
    half_l: f64,
    half_w: f64,
    heading: f64,
}

impl Footprint {
    fn corners(&self, pad: f64) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (self.half_l + pad, self.half_w + pad);
        let mut out = [[0.0; 2]; 4];
        for (k, (a, b)) in [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].into_iter().enumerate() {
            out[k] = [self.cx + a * c - b * s, self.cy + a * s + b * c];
        }
        out
    }

    /// Separating-axis test on the rectangles grown by `pad` each.
    fn overlaps(&self, other: &Footprint, pad: f64) -> bool {
        let a = self.corners(pad);
        let b = other.corners(pad);
        for rect in [&a, &b] {
            for k in 0..2 {
                let e = [rect[k + 1][0] - rect[k][0], rect[k + 1][1] - rect[k][1]];
                let axis = [-e[1], e[0]];
                let proj = |pts: &[[f64; 2]; 4]| {
                    pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                        let d = p[0] * axis[0] + p[1] * axis[1];
                        (lo.min(d), hi.max(d))
                    })
                };
                let (a0, a1) = proj(&a);
                let (b0, b1) = proj(&b);
                if a1 < b0 || b1 < a0 {
                    return false;
                }
            }
        }
        true
    }
}

/// An object body in its local frame (x along heading, z up from ground).
struct Body {
    shape: ShapeKind,
    half_l: f64,
    half_w: f64,
    params: Vec<f64>,
}

fn u(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn make_body(shape: ShapeKind, rng: &mut ChaCha8Rng) -> Body {
    match shape {
        ShapeKind::VehicleBox => {
            let (l, w, h) = (u(rng, 3.8, 4.8), u(rng, 1.7, 2.0), u(rng, 1.4, 1.8));
            Body { shape, half_l: l / 2.0, half_w: w / 2.0, params: vec![h] }
        }
        ShapeKind::PedestrianColumn => {
            let (r, h) = (u(rng, 0.25, 0.35), u(rng, 1.6, 1.9));
            Body { shape, half_l: r, half_w: r, params: vec![h] }
        }
        ShapeKind::CyclistSlab => {
            let (l, w, h) = (u(rng, 1.6, 1.9), u(rng, 0.5, 0.7), u(rng, 1.4, 1.7));
            Body { shape, half_l: l / 2.0, half_w: w / 2.0, params: vec![h] }
        }
        ShapeKind::LShape => {
            let (a, b, t, h) = (u(rng, 1.4, 2.4), u(rng, 1.0, 2.0), u(rng, 0.4, 0.7), u(rng, 0.6, 1.5));
            Body { shape, half_l: a / 2.0, half_w: b / 2.0, params: vec![t, h] }
        }
        ShapeKind::Ellipsoid => {
            let (a, b, c) = (u(rng, 0.5, 1.1), u(rng, 0.4, 0.9), u(rng, 0.4, 0.9));
            Body { shape, half_l: a, half_w: b, params: vec![c] }
        }
        ShapeKind::Cone => {
            let (r, h) = (u(rng, 0.35, 0.8), u(rng, 0.7, 1.6));
            Body { shape, half_l: r, half_w: r, params: vec![h] }
        }
        ShapeKind::Blob => {
            let r = u(rng, 0.5, 1.0);
            // low-order radial harmonics: amplitude and phase per mode
            let mut params = vec![r];
            for _ in 0..4 {
                params.push(u(rng, -0.18, 0.18));
                params.push(u(rng, 0.0, 2.0 * PI));
            }
            Body { shape, half_l: r * 1.2, half_w: r * 1.2, params }
        }
        ShapeKind::Table => {
            let (l, w, h) = (u(rng, 1.2, 2.2), u(rng, 0.8, 1.4), u(rng, 0.7, 1.1));
            Body { shape, half_l: l / 2.0, half_w: w / 2.0, params: vec![h] }
        }
    }
}

/// Points on an axis-aligned box surface (four sides and top) in local frame.
fn sample_box(rng: &mut ChaCha8Rng, c: [f64; 3], half: [f64; 3], density: f64, out: &mut Vec<[f64; 3]>) {
    let [hx, hy, hz] = half;
    // faces: +x, -x, +y, -y, top
    let areas = [4.0 * hy * hz, 4.0 * hy * hz, 4.0 * hx * hz, 4.0 * hx * hz, 4.0 * hx * hy];
    for (face, &area) in areas.iter().enumerate() {
        let n = (area * density).round() as usize;
        for _ in 0..n {
            let a = u(rng, -1.0, 1.0);
            let b = u(rng, -1.0, 1.0);
            let p = match face {
                0 => [hx, a * hy, b * hz],
                1 => [-hx, a * hy, b * hz],
                2 => [a * hx, hy, b * hz],
                3 => [a * hx, -hy, b * hz],
                _ => [a * hx, b * hy, hz],
            };
            out.push([c[0] + p[0], c[1] + p[1], c[2] + p[2]]);
        }
    }
}

fn sample_body(body: &Body, density: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    let (hl, hw) = (body.half_l, body.half_w);
    match body.shape {
        ShapeKind::VehicleBox | ShapeKind::CyclistSlab => {
            let h = body.params[0];
            sample_box(rng, [0.0, 0.0, h / 2.0], [hl, hw, h / 2.0], density, &mut out);
        }
        ShapeKind::PedestrianColumn => {
            let h = body.params[0];
            let side = 2.0 * PI * hl * h;
            let top = PI * hl * hl;
            for _ in 0..(side * density).round() as usize {
                let t = u(rng, 0.0, 2.0 * PI);
                out.push([hl * t.cos(), hl * t.sin(), u(rng, 0.0, h)]);
            }
            for _ in 0..(top * density).round() as usize {
                let t = u(rng, 0.0, 2.0 * PI);
                let r = hl * u(rng, 0.0, 1.0).sqrt();
                out.push([r * t.cos(), r * t.sin(), h]);
            }
        }
        ShapeKind::LShape => {
            let (t, h) = (body.params[0], body.params[1]);
            // long arm along x at y = -hw, short arm along y at x = -hl
            sample_box(rng, [0.0, -hw + t / 2.0, h / 2.0], [hl, t / 2.0, h / 2.0], density, &mut out);
            sample_box(
                rng,
                [-hl + t / 2.0, t / 2.0, h / 2.0],
                [t / 2.0, hw - t / 2.0, h / 2.0],
                density,
                &mut out,
            );
        }
        ShapeKind::Ellipsoid => {
            let c = body.params[0];
            let area = 4.0 * PI * ((hl * hw).powf(1.6) + (hl * c).powf(1.6) + (hw * c).powf(1.6)) / 3.0;
            let area = area.powf(1.0 / 1.6);
            for _ in 0..(area * density).round() as usize {
                let d = unit_vector(rng);
                out.push([hl * d[0], hw * d[1], c + c * d[2]]);
            }
        }
        ShapeKind::Cone => {
            let h = body.params[0];
            let slant = (hl * hl + h * h).sqrt();
            let area = PI * hl * slant;
            for _ in 0..(area * density).round() as usize {
                // area-uniform along the slant: radius fraction ~ sqrt
                let f = u(rng, 0.0, 1.0).sqrt();
                let t = u(rng, 0.0, 2.0 * PI);
                out.push([hl * f * t.cos(), hl * f * t.sin(), h * (1.0 - f)]);
            }
        }
        ShapeKind::Blob => {
            let r = body.params[0];
            let area = 4.0 * PI * r * r;
            for _ in 0..(area * density).round() as usize {
                let d = unit_vector(rng);
                let az = d[1].atan2(d[0]);
                let el = d[2].asin();
                let mut scale = 1.0;
                for m in 0..4 {
                    let (amp, ph) = (body.params[1 + 2 * m], body.params[2 + 2 * m]);
                    scale += amp * ((m as f64 + 2.0) * az + ph).sin() * (1.0 + el.sin()) * 0.5;
                }
                let rr = r * scale;
                out.push([rr * d[0], rr * d[1], r + rr * d[2]]);
            }
        }
        ShapeKind::Table => {
            let h = body.params[0];
            let top_t = 0.06;
            sample_box(rng, [0.0, 0.0, h - top_t / 2.0], [hl, hw, top_t / 2.0], density, &mut out);
            let leg = 0.05;
            for (sx, sy) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
                let c = [sx * (hl - leg), sy * (hw - leg), (h - top_t) / 2.0];
                // legs are thin; sample them denser so they stay visible
                sample_box(rng, c, [leg, leg, (h - top_t) / 2.0], density * 3.0, &mut out);
            }
        }
    }
    out
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z = u(rng, -1.0, 1.0);
    let t = u(rng, 0.0, 2.0 * PI);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * t.cos(), r * t.sin(), z]
}

enum Group {
    Thing(ThingKind),
    Unknown,
}

struct Placed {
    fp: Footprint,
    group: usize,
}

struct Placer<'a> {
    cfg: &'a SceneGenConfig,
    placed: Vec<Placed>,
}

impl Placer<'_> {
    fn inside_roi(&self, fp: &Footprint) -> bool {
        let [x0, x1, y0, y1, ..] = self.cfg.roi;
        let m = 0.15;
        fp.corners(0.0)
            .iter()
            .all(|p| p[0] > x0 + m && p[0] < x1 - m && p[1] > y0 + m && p[1] < y1 - m)
    }

    fn free(&self, fp: &Footprint, pad: f64) -> bool {
        self.placed.iter().all(|o| !o.fp.overlaps(fp, pad))
    }

    fn try_adjacent(&self, body: &Body, group: usize, rng: &mut ChaCha8Rng) -> Option<Footprint> {
        let mates: Vec<&Placed> = self.placed.iter().filter(|p| p.group == group).collect();
        if mates.is_empty() {
            return None;
        }
        let [g0, g1] = self.cfg.adjacent_gap;
        for _ in 0..40 {
            let mate = mates[rng.random_range(0..mates.len())].fp;
            let gap = u(rng, g0, g1);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let slide = u(rng, -0.3, 0.3) * mate.half_l;
            let off = mate.half_w + body.half_w + gap;
            let (s, c) = mate.heading.sin_cos();
            // normal to the mate's heading, plus a small slide along it
            let fp = Footprint {
                cx: mate.cx - side * off * s + slide * c,
                cy: mate.cy + side * off * c + slide * s,
                half_l: body.half_l,
                half_w: body.half_w,
                heading: mate.heading,
            };
            if self.inside_roi(&fp) && self.free(&fp, g0 * 0.45) {
                return Some(fp);
            }
        }
        None
    }

    fn try_free(&self, body: &Body, rng: &mut ChaCha8Rng) -> Option<Footprint> {
        let [x0, x1, y0, y1, ..] = self.cfg.roi;
        for _ in 0..400 {
            let fp = Footprint {
                cx: u(rng, x0, x1),
                cy: u(rng, y0, y1),
                half_l: body.half_l,
                half_w: body.half_w,
                heading: u(rng, -PI, PI),
            };
            if self.inside_roi(&fp) && self.free(&fp, self.cfg.min_gap / 2.0) {
                return Some(fp);
            }
        }
        None
    }
}

/// Generates one frame. The output is a pure function of `(config, seed)`.
pub fn generate_scene(config: &SceneGenConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let catalog = ClassCatalog::desk();
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let [x0, x1, y0, y1, z0, z1] = config.roi;
    let clampv = |v: f64, lo: f64, hi: f64| v.clamp(lo, hi - 1e-9 * (hi - lo));

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut boxes = BTreeMap::new();
    let mut push = |p: [f64; 3], label: OpenSetLabel, rng: &mut ChaCha8Rng, points: &mut Vec<Point>| {
        let mut q = Point::new(
            clampv(p[0] + noise.sample(rng), x0, x1),
            clampv(p[1] + noise.sample(rng), y0, y1),
            clampv(p[2] + noise.sample(rng), z0, z1),
        );
        if config.with_intensity {
            q.intensity = Some(u(rng, 0.0, 1.0));
        }
        points.push(q);
        labels.push(label);
    };

    let ground_n = ((x1 - x0) * (y1 - y0) * config.ground_density).round() as usize;
    for _ in 0..ground_n {
        let p = [u(&mut rng, x0, x1), u(&mut rng, y0, y1), 0.0];
        push(p, OpenSetLabel::stuff(GROUND_CLASS), &mut rng, &mut points);
    }

    // spawn plan: things first (ids 0..), then unknowns
    let mut plan: Vec<(Group, usize, [f64; 2], f64)> = Vec::new();
    for (g, t) in config.things.iter().enumerate() {
        for _ in 0..t.count.sample(&mut rng) {
            plan.push((Group::Thing(t.kind), g, t.density, t.adjacent_prob));
        }
    }
    let unk_group = config.things.len();
    for _ in 0..config.unknowns.count.sample(&mut rng) {
        plan.push((Group::Unknown, unk_group, config.unknowns.density, config.unknowns.adjacent_prob));
    }

    let mut placer = Placer {
        cfg: config,
        placed: Vec::new(),
    };
    let mut next_id: InstanceId = 0;
    let mut thing_count: InstanceId = 0;
    let n_things = plan.iter().filter(|p| matches!(p.0, Group::Thing(_))).count() as InstanceId;
    for (group, gidx, density, adj) in plan {
        let shape = match group {
            Group::Thing(k) => k.shape(),
            Group::Unknown => config.unknowns.shapes[rng.random_range(0..config.unknowns.shapes.len())],
        };
        let body = make_body(shape, &mut rng);
        let want_adjacent = adj > 0.0 && rng.random_bool(adj);
        let fp = want_adjacent
            .then(|| placer.try_adjacent(&body, gidx, &mut rng))
            .flatten()
            .or_else(|| placer.try_free(&body, &mut rng))
            .ok_or_else(|| Error::Config(format!("could not place a {shape:?}; the ROI is too crowded")))?;
        placer.placed.push(Placed { fp, group: gidx });

        let label = match group {
            Group::Thing(kind) => {
                let id = thing_count;
                thing_count += 1;
                boxes.insert(
                    id,
                    InstanceBox {
                        cx: fp.cx,
                        cy: fp.cy,
                        w: 2.0 * fp.half_w,
                        l: 2.0 * fp.half_l,
                        heading: wrap_angle(fp.heading),
                        class: kind.class(),
                    },
                );
                OpenSetLabel::thing(id, kind.class())
            }
            Group::Unknown if config.unknowns.labeled => {
                let id = n_things + next_id;
                next_id += 1;
                OpenSetLabel::unknown(Some(id))
            }
            Group::Unknown => OpenSetLabel::unknown(None),
        };
        let d = u(&mut rng, density[0], density[1]);
        let (s, c) = fp.heading.sin_cos();
        for p in sample_body(&body, d, &mut rng) {
            let w = [fp.cx + p[0] * c - p[1] * s, fp.cy + p[0] * s + p[1] * c, p[2]];
            push(w, label, &mut rng, &mut points);
        }
    }

    Ok(Scene {
        points,
        labels,
        boxes,
        catalog,
        seed,
    })
}

/// Wraps an angle into `[-pi, pi)`.
pub(crate) fn wrap_angle(a: f64) -> f64 {
    let t = (a + PI).rem_euclid(2.0 * PI) - PI;
    if t >= PI {
        -PI
    } else {
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{validate_scene, Semantic};

    #[test]
    fn empty_config_gives_only_ground() {
        let s = generate_scene(&SceneGenConfig::empty_ground(), 3).unwrap();
        assert!(!s.is_empty());
        assert!(s.labels.iter().all(|l| *l == OpenSetLabel::stuff(GROUND_CLASS)));
        assert!(s.boxes.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let c = SceneGenConfig::desk_test();
        assert_eq!(generate_scene(&c, 17).unwrap(), generate_scene(&c, 17).unwrap());
        assert_ne!(generate_scene(&c, 17).unwrap(), generate_scene(&c, 18).unwrap());
    }

    #[test]
    fn two_vehicles_one_unknown() {
        let mut c = SceneGenConfig::empty_ground();
        c.things[0].count = CountRange::exactly(2);
        c.unknowns.count = CountRange::exactly(1);
        c.unknowns.labeled = true;
        let s = generate_scene(&c, 5).unwrap();
        assert_eq!(s.instance_ids().len(), 3);
        assert_eq!(s.boxes.len(), 2);
        let unk: Vec<_> = s.labels.iter().filter(|l| l.semantic == Semantic::Unknown).collect();
        assert!(!unk.is_empty());
        assert!(unk.iter().all(|l| l.instance == Some(2)));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = SceneGenConfig::desk_train();
        c.roi[1] = c.roi[0];
        assert!(matches!(generate_scene(&c, 0), Err(Error::Config(_))));
        let mut c = SceneGenConfig::desk_train();
        c.things[1].count = CountRange(-1, 2);
        assert!(matches!(generate_scene(&c, 0), Err(Error::Config(_))));
        let mut c = SceneGenConfig::desk_train();
        c.unknowns.shapes.push(ShapeKind::VehicleBox);
        assert!(c.validate().is_err());
    }

    #[test]
    fn libraries_are_disjoint() {
        for s in ShapeKind::UNKNOWN {
            assert!(!s.in_known_library());
        }
        for s in ShapeKind::KNOWN {
            assert!(s.in_known_library());
        }
    }

    #[test]
    fn generated_scenes_validate_and_stay_in_roi() {
        for seed in 0..20 {
            for cfg in [SceneGenConfig::desk_train(), SceneGenConfig::desk_test()] {
                let s = generate_scene(&cfg, seed).unwrap();
                assert_eq!(validate_scene(&s), vec![], "seed {seed}");
                let [x0, x1, y0, y1, z0, z1] = cfg.roi;
                for p in &s.points {
                    assert!(p.x >= x0 && p.x < x1 && p.y >= y0 && p.y < y1 && p.z >= z0 && p.z < z1);
                }
            }
        }
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -PI, 0.0, PI, 3.5, 100.0] {
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w));
            assert!((w.sin() - a.sin()).abs() < 1e-9 && (w.cos() - a.cos()).abs() < 1e-9);
        }
    }
}
