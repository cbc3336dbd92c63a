//! Binary scene files and the plain-text debug export.
//!
//! Layout (little-endian): `"OSISSCN\0" | u32 version | u64 body length |
//! body | u32 crc32`. The body holds the seed, the catalog, then the point,
//! label, and box blocks in that order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{ClassCatalog, ClassDef, InstanceBox, OpenSetLabel, Point, Scene, Semantic};
use crate::codec::{open_frame, write_frame, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const SCENE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OSISSCN\0";
const UNKNOWN_TAG: u16 = u16::MAX;

pub fn scene_to_bytes(scene: &Scene) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u64(scene.seed);
    for list in [scene.catalog.things(), scene.catalog.stuff()] {
        w.u32(list.len() as u32);
        for c in list {
            w.u16(c.id);
            w.str(&c.name);
        }
    }

    w.u64(scene.points.len() as u64);
    for p in &scene.points {
        w.f64(p.x);
        w.f64(p.y);
        w.f64(p.z);
        match p.intensity {
            Some(i) => {
                w.u8(1);
                w.f64(i);
            }
            None => w.u8(0),
        }
    }

    w.u64(scene.labels.len() as u64);
    for l in &scene.labels {
        match l.instance {
            Some(id) => {
                w.u8(1);
                w.u32(id);
            }
            None => w.u8(0),
        }
        w.u16(match l.semantic {
            Semantic::Class(c) => c,
            Semantic::Unknown => UNKNOWN_TAG,
        });
    }

    w.u32(scene.boxes.len() as u32);
    for (&id, b) in &scene.boxes {
        w.u32(id);
        w.u16(b.class);
        for v in [b.cx, b.cy, b.w, b.l, b.heading] {
            w.f64(v);
        }
    }
    write_frame(MAGIC, SCENE_VERSION, &w.into_inner())
}

fn read_classes(r: &mut ByteReader<'_>) -> Result<Vec<ClassDef>> {
    let n = r.u32("catalog")? as usize;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let id = r.u16("catalog")?;
        let name = r.str("catalog")?;
        out.push(ClassDef { id, name });
    }
    Ok(out)
}

pub fn scene_from_bytes(data: &[u8]) -> Result<Scene> {
    let mut r = open_frame(data, MAGIC, "scene", SCENE_VERSION)?;
    let seed = r.u64("seed")?;
    let things = read_classes(&mut r)?;
    let stuff = read_classes(&mut r)?;
    let catalog = ClassCatalog::new(things, stuff).map_err(|e| Error::Format(e.to_string()))?;

    let n = r.u64("point block")? as usize;
    // every point needs at least 25 bytes; refuse absurd counts up front
    if n > r.remaining() / 25 {
        return Err(Error::Truncated("point block"));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, y, z) = (r.f64("point block")?, r.f64("point block")?, r.f64("point block")?);
        let intensity = match r.u8("point block")? {
            0 => None,
            1 => Some(r.f64("point block")?),
            t => return Err(Error::Format(format!("bad intensity flag {t}"))),
        };
        points.push(Point { x, y, z, intensity });
    }

    let n = r.u64("label block")? as usize;
    if n > r.remaining() / 3 {
        return Err(Error::Truncated("label block"));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let instance = match r.u8("label block")? {
            0 => None,
            1 => Some(r.u32("label block")?),
            t => return Err(Error::Format(format!("bad instance flag {t}"))),
        };
        let semantic = match r.u16("label block")? {
            UNKNOWN_TAG => Semantic::Unknown,
            c => Semantic::Class(c),
        };
        labels.push(OpenSetLabel { instance, semantic });
    }

    let n = r.u32("box block")? as usize;
    let mut boxes = BTreeMap::new();
    for _ in 0..n {
        let id = r.u32("box block")?;
        let class = r.u16("box block")?;
        let mut v = [0.0; 5];
        for x in &mut v {
            *x = r.f64("box block")?;
        }
        boxes.insert(
            id,
            InstanceBox {
                cx: v[0],
                cy: v[1],
                w: v[2],
                l: v[3],
                heading: v[4],
                class,
            },
        );
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} unread bytes in scene body", r.remaining())));
    }
    Ok(Scene {
        points,
        labels,
        boxes,
        catalog,
        seed,
    })
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_bytes(scene)).map_err(|e| Error::at(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let data = std::fs::read(path).map_err(|e| Error::at(path, e))?;
    scene_from_bytes(&data)
}

/// One point per line: `x y z instance semantic`, `-` for no instance.
pub fn export_text(scene: &Scene) -> String {
    let mut s = String::with_capacity(scene.len() * 40);
    for (p, l) in scene.points.iter().zip(&scene.labels) {
        let inst = l.instance.map_or_else(|| "-".to_string(), |i| i.to_string());
        let _ = writeln!(
            s,
            "{:.6} {:.6} {:.6} {} {}",
            p.x,
            p.y,
            p.z,
            inst,
            scene.catalog.name(l.semantic)
        );
    }
    s
}
