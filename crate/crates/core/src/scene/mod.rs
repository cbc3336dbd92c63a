//! Label space, point clouds with open-set ground truth, and scene files.
//!
//! A [`Scene`] is one LiDAR frame: points in the ego frame, one
//! [`OpenSetLabel`] per point, and a box for every known thing instance. The
//! label space is fixed by a [`ClassCatalog`] that splits the known classes
//! into things (countable, carry instance ids) and stuff (amorphous, never
//! carry instance ids). Everything else is [`Semantic::Unknown`].

mod generate;
mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{generate_scene, CountRange, SceneGenConfig, ShapeKind, ThingKind, ThingSpawn, UnknownSpawn};
pub use io::{export_text, load_scene, save_scene, scene_from_bytes, scene_to_bytes, SCENE_VERSION};

pub type ClassId = u16;
pub type InstanceId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: ClassId,
    pub name: String,
}

/// Known thing and stuff classes. The unknown label is not a member of
/// either list and has no id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCatalog {
    things: Vec<ClassDef>,
    stuff: Vec<ClassDef>,
}

impl ClassCatalog {
    pub fn new(things: Vec<ClassDef>, stuff: Vec<ClassDef>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in things.iter().chain(&stuff) {
            if !seen.insert(c.id) {
                return Err(Error::Config(format!("class id {} listed twice", c.id)));
            }
            if c.name.eq_ignore_ascii_case("unknown") {
                return Err(Error::Config("`unknown` is reserved".into()));
            }
        }
        Ok(Self { things, stuff })
    }

    /// Vehicle, pedestrian and cyclist things over a single ground stuff class.
    pub fn desk() -> Self {
        let def = |id, name: &str| ClassDef {
            id,
            name: name.to_string(),
        };
        Self::new(
            vec![def(0, "vehicle"), def(1, "pedestrian"), def(2, "cyclist")],
            vec![def(3, "ground")],
        )
        .expect("desk catalog is valid")
    }

    pub fn things(&self) -> &[ClassDef] {
        &self.things
    }

    pub fn stuff(&self) -> &[ClassDef] {
        &self.stuff
    }

    pub fn thing_index(&self, id: ClassId) -> Option<usize> {
        self.things.iter().position(|c| c.id == id)
    }

    pub fn stuff_index(&self, id: ClassId) -> Option<usize> {
        self.stuff.iter().position(|c| c.id == id)
    }

    pub fn is_thing(&self, id: ClassId) -> bool {
        self.thing_index(id).is_some()
    }

    pub fn is_stuff(&self, id: ClassId) -> bool {
        self.stuff_index(id).is_some()
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.is_thing(id) || self.is_stuff(id)
    }

    pub fn name(&self, sem: Semantic) -> &str {
        match sem {
            Semantic::Unknown => "unknown",
            Semantic::Class(id) => self
                .things
                .iter()
                .chain(&self.stuff)
                .find(|c| c.id == id)
                .map(|c| c.name.as_str())
                .unwrap_or("?"),
        }
    }

    /// Resolves a class name (or `unknown`) back to a semantic label.
    pub fn parse(&self, name: &str) -> Option<Semantic> {
        if name == "unknown" {
            return Some(Semantic::Unknown);
        }
        self.things
            .iter()
            .chain(&self.stuff)
            .find(|c| c.name == name)
            .map(|c| Semantic::Class(c.id))
    }
}

/// Open-set semantic label: a known class or unknown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Semantic {
    Class(ClassId),
    Unknown,
}

impl Semantic {
    pub fn is_unknown(self) -> bool {
        matches!(self, Semantic::Unknown)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: Option<f64>,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            intensity: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.intensity.is_none_or(f64::is_finite)
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpenSetLabel {
    pub instance: Option<InstanceId>,
    pub semantic: Semantic,
}

impl OpenSetLabel {
    pub fn stuff(class: ClassId) -> Self {
        Self {
            instance: None,
            semantic: Semantic::Class(class),
        }
    }

    pub fn thing(instance: InstanceId, class: ClassId) -> Self {
        Self {
            instance: Some(instance),
            semantic: Semantic::Class(class),
        }
    }

    pub fn unknown(instance: Option<InstanceId>) -> Self {
        Self {
            instance,
            semantic: Semantic::Unknown,
        }
    }
}

/// BEV box of a known thing. `l` runs along the heading, `w` across it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub heading: f64,
    pub class: ClassId,
}

impl InstanceBox {
    /// Axis-aligned bounds `[x1, x2, y1, y2]` of the rotated footprint.
    pub fn footprint(&self) -> [f64; 4] {
        let (s, c) = self.heading.sin_cos();
        let hx = 0.5 * (self.l * c.abs() + self.w * s.abs());
        let hy = 0.5 * (self.l * s.abs() + self.w * c.abs());
        [self.cx - hx, self.cx + hx, self.cy - hy, self.cy + hy]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub points: Vec<Point>,
    pub labels: Vec<OpenSetLabel>,
    pub boxes: BTreeMap<InstanceId, InstanceBox>,
    pub catalog: ClassCatalog,
    pub seed: u64,
}

impl Scene {
    pub fn empty(catalog: ClassCatalog) -> Self {
        Self {
            points: Vec::new(),
            labels: Vec::new(),
            boxes: BTreeMap::new(),
            catalog,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Instance ids present in the labels, in ascending order.
    pub fn instance_ids(&self) -> BTreeSet<InstanceId> {
        self.labels.iter().filter_map(|l| l.instance).collect()
    }
}

/// One broken scene invariant, tied to the point (or instance) that shows it.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    LengthMismatch { points: usize, labels: usize },
    NonFinitePoint { index: usize },
    UnknownClass { index: usize, class: ClassId },
    StuffWithInstance { index: usize },
    ThingWithoutInstance { index: usize },
    MixedSemantics { instance: InstanceId, index: usize },
    MissingBox { instance: InstanceId, index: usize },
    UnknownReusesThingId { instance: InstanceId, index: usize },
    BadBox { instance: InstanceId },
    OrphanBox { instance: InstanceId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch { points, labels } => {
                write!(f, "{points} points but {labels} labels")
            }
            Violation::NonFinitePoint { index } => write!(f, "point {index}: non-finite coordinate"),
            Violation::UnknownClass { index, class } => {
                write!(f, "point {index}: class {class} is not in the catalog")
            }
            Violation::StuffWithInstance { index } => {
                write!(f, "point {index}: stuff point carries an instance id")
            }
            Violation::ThingWithoutInstance { index } => {
                write!(f, "point {index}: thing point has no instance id")
            }
            Violation::MixedSemantics { instance, index } => write!(
                f,
                "point {index}: instance {instance} spans more than one semantic label"
            ),
            Violation::MissingBox { instance, index } => {
                write!(f, "point {index}: thing instance {instance} has no box")
            }
            Violation::UnknownReusesThingId { instance, index } => write!(
                f,
                "point {index}: unknown instance {instance} reuses a known instance id"
            ),
            Violation::BadBox { instance } => {
                write!(f, "box {instance}: non-positive size or non-thing class")
            }
            Violation::OrphanBox { instance } => {
                write!(f, "box {instance}: no point carries this instance id")
            }
        }
    }
}

/// Checks every scene invariant. An empty list means the scene is consistent.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut out = Vec::new();
    if scene.points.len() != scene.labels.len() {
        out.push(Violation::LengthMismatch {
            points: scene.points.len(),
            labels: scene.labels.len(),
        });
    }
    let cat = &scene.catalog;
    // first semantic seen per instance; instances already reported
    let mut first: BTreeMap<InstanceId, Semantic> = BTreeMap::new();
    let mut reported_mixed = BTreeSet::new();
    let mut reported_box = BTreeSet::new();
    let mut reported_reuse = BTreeSet::new();
    let thing_ids: BTreeSet<InstanceId> = scene
        .labels
        .iter()
        .filter(|l| matches!(l.semantic, Semantic::Class(c) if cat.is_thing(c)))
        .filter_map(|l| l.instance)
        .collect();

    for (index, (p, l)) in scene.points.iter().zip(&scene.labels).enumerate() {
        if !p.is_finite() {
            out.push(Violation::NonFinitePoint { index });
        }
        match l.semantic {
            Semantic::Class(c) if !cat.contains(c) => {
                out.push(Violation::UnknownClass { index, class: c });
            }
            Semantic::Class(c) if cat.is_stuff(c) && l.instance.is_some() => {
                out.push(Violation::StuffWithInstance { index });
            }
            Semantic::Class(c) if cat.is_thing(c) && l.instance.is_none() => {
                out.push(Violation::ThingWithoutInstance { index });
            }
            _ => {}
        }
        let Some(id) = l.instance else { continue };
        match first.get(&id) {
            None => {
                first.insert(id, l.semantic);
            }
            Some(&s) if s != l.semantic => {
                if reported_mixed.insert(id) {
                    out.push(Violation::MixedSemantics { instance: id, index });
                }
            }
            _ => {}
        }
        match l.semantic {
            Semantic::Class(c) if cat.is_thing(c) => {
                if !scene.boxes.contains_key(&id) && reported_box.insert(id) {
                    out.push(Violation::MissingBox { instance: id, index });
                }
            }
            Semantic::Unknown => {
                if (thing_ids.contains(&id) || scene.boxes.contains_key(&id))
                    && reported_reuse.insert(id)
                    && !reported_mixed.contains(&id)
                {
                    out.push(Violation::UnknownReusesThingId { instance: id, index });
                }
            }
            _ => {}
        }
    }
    for (&id, b) in &scene.boxes {
        let sane = b.w > 0.0
            && b.l > 0.0
            && b.cx.is_finite()
            && b.cy.is_finite()
            && b.heading.is_finite()
            && cat.is_thing(b.class);
        if !sane {
            out.push(Violation::BadBox { instance: id });
        }
        if !first.contains_key(&id) {
            out.push(Violation::OrphanBox { instance: id });
        }
    }
    out
}
