//! Per-point segmentation output and its versioned text form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{ClassId, InstanceId, Semantic};

pub const SEGMENTATION_VERSION: u32 = 1;
const HEADER: &str = "osis-segmentation";

/// How a point or instance got its label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Provenance {
    /// Associated with a thing or stuff prototype.
    ClosedSet,
    /// Left to the no-prototype slot and grouped by clustering.
    Clustered,
}

impl Provenance {
    fn tag(self) -> &'static str {
        match self {
            Self::ClosedSet => "closed",
            Self::Clustered => "open",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "closed" => Some(Self::ClosedSet),
            "open" => Some(Self::Clustered),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceInfo {
    pub semantic: Semantic,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentationResult {
    pub instance: Vec<Option<InstanceId>>,
    pub semantic: Vec<Semantic>,
    pub provenance: Vec<Provenance>,
    pub instances: BTreeMap<InstanceId, InstanceInfo>,
}

fn section_count<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, key: &str) -> Result<usize> {
    let (ln, l) = lines.next().ok_or(Error::Truncated("segmentation section"))?;
    l.strip_prefix(key)
        .and_then(|r| r.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("segmentation line {}: expected `{key} <count>`", ln + 1)))
}

fn semantic_tag(s: Semantic) -> String {
    match s {
        Semantic::Class(c) => c.to_string(),
        Semantic::Unknown => "unknown".into(),
    }
}

fn parse_semantic(s: &str) -> Option<Semantic> {
    if s == "unknown" {
        Some(Semantic::Unknown)
    } else {
        s.parse::<ClassId>().ok().map(Semantic::Class)
    }
}

impl SegmentationResult {
    pub fn len(&self) -> usize {
        self.instance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance.is_empty()
    }

    /// Checks the per-point arrays agree with the instance table: every
    /// instance id is declared, points carry their instance's semantic, and
    /// unknown instances are always `Unknown`.
    pub fn validate(&self) -> Result<()> {
        let n = self.instance.len();
        if self.semantic.len() != n || self.provenance.len() != n {
            return Err(Error::Invalid("segmentation arrays differ in length".into()));
        }
        for (i, inst) in self.instance.iter().enumerate() {
            match inst {
                Some(id) => {
                    let info = self
                        .instances
                        .get(id)
                        .ok_or_else(|| Error::Invalid(format!("point {i} uses undeclared instance {id}")))?;
                    if info.semantic != self.semantic[i] || info.provenance != self.provenance[i] {
                        return Err(Error::Invalid(format!("point {i} disagrees with instance {id}")));
                    }
                }
                None if self.semantic[i] == Semantic::Unknown => {
                    return Err(Error::Invalid(format!("unknown point {i} has no instance")));
                }
                None => {}
            }
        }
        for (id, info) in &self.instances {
            if (info.semantic == Semantic::Unknown) != (info.provenance == Provenance::Clustered) {
                return Err(Error::Invalid(format!("instance {id} mixes unknown and closed-set labels")));
            }
        }
        Ok(())
    }

    /// Versioned text export: a header, one line per point
    /// (`index instance semantic provenance`), then one line per instance
    /// (`id semantic provenance points`).
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.len() * 24);
        let _ = writeln!(s, "{HEADER} {SEGMENTATION_VERSION}");
        let _ = writeln!(s, "points {}", self.len());
        for i in 0..self.len() {
            let inst = self.instance[i].map_or_else(|| "-".to_string(), |v| v.to_string());
            let _ = writeln!(s, "{i} {inst} {} {}", semantic_tag(self.semantic[i]), self.provenance[i].tag());
        }
        let mut counts: BTreeMap<InstanceId, usize> = BTreeMap::new();
        for id in self.instance.iter().flatten() {
            *counts.entry(*id).or_default() += 1;
        }
        let _ = writeln!(s, "instances {}", self.instances.len());
        for (id, info) in &self.instances {
            let _ = writeln!(
                s,
                "{id} {} {} {}",
                semantic_tag(info.semantic),
                info.provenance.tag(),
                counts.get(id).copied().unwrap_or(0)
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Format(format!("segmentation line {}: {what}", line + 1));
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Truncated("segmentation header"))?;
        let version = header
            .strip_prefix(HEADER)
            .map(str::trim)
            .ok_or(Error::BadMagic { expected: "segmentation" })?
            .parse::<u32>()
            .map_err(|_| bad(0, "bad version"))?;
        if version != SEGMENTATION_VERSION {
            return Err(Error::Version {
                what: "segmentation",
                found: version,
                supported: SEGMENTATION_VERSION,
            });
        }
        let n = section_count(&mut lines, "points")?;
        let mut out = SegmentationResult::default();
        for i in 0..n {
            let (ln, l) = lines.next().ok_or(Error::Truncated("segmentation points"))?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 4 || f[0].parse::<usize>().ok() != Some(i) {
                return Err(bad(ln, "expected `index instance semantic provenance`"));
            }
            out.instance.push(if f[1] == "-" {
                None
            } else {
                Some(f[1].parse().map_err(|_| bad(ln, "bad instance id"))?)
            });
            out.semantic.push(parse_semantic(f[2]).ok_or_else(|| bad(ln, "bad semantic"))?);
            out.provenance.push(Provenance::parse(f[3]).ok_or_else(|| bad(ln, "bad provenance"))?);
        }
        let m = section_count(&mut lines, "instances")?;
        for _ in 0..m {
            let (ln, l) = lines.next().ok_or(Error::Truncated("segmentation instances"))?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad(ln, "expected `id semantic provenance points`"));
            }
            let id = f[0].parse().map_err(|_| bad(ln, "bad instance id"))?;
            let info = InstanceInfo {
                semantic: parse_semantic(f[1]).ok_or_else(|| bad(ln, "bad semantic"))?,
                provenance: Provenance::parse(f[2]).ok_or_else(|| bad(ln, "bad provenance"))?,
            };
            if out.instances.insert(id, info).is_some() {
                return Err(bad(ln, "duplicate instance"));
            }
        }
        if let Some((ln, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(bad(ln, "trailing content"));
        }
        out.validate()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::at(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::at(path, e))?;
        Self::from_text(&text)
    }
}
