use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{Counts, Evaluation};
use crate::error::{Error, Result};
use crate::scene::ClassCatalog;

/// A quality score with its decomposition; `value = sq * rq` exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Quality {
    pub value: f64,
    pub rq: f64,
    pub sq: f64,
}

impl Quality {
    pub fn new(rq: f64, sq: f64) -> Self {
        Self { value: sq * rq, rq, sq }
    }

    /// Component-wise mean; `value` is the mean of the member values, so
    /// it need not equal the product of the mean components.
    fn mean(qs: &[Quality]) -> Option<Quality> {
        if qs.is_empty() {
            return None;
        }
        let n = qs.len() as f64;
        Some(Quality {
            value: qs.iter().map(|q| q.value).sum::<f64>() / n,
            rq: qs.iter().map(|q| q.rq).sum::<f64>() / n,
            sq: qs.iter().map(|q| q.sq).sum::<f64>() / n,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Thing,
    Stuff,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassRow {
    pub name: String,
    pub kind: ClassKind,
    pub counts: Counts,
    /// `None` when the class has nothing to score.
    pub quality: Option<Quality>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanopticReport {
    pub rows: Vec<ClassRow>,
    /// Mean over scored thing classes.
    pub known_thing: Option<Quality>,
    /// Mean over scored stuff classes.
    pub known_stuff: Option<Quality>,
    pub unknown: Option<Quality>,
    pub scenes: usize,
    pub scenes_without_unknowns: usize,
}

fn fmt_opt(q: Option<Quality>) -> [String; 3] {
    match q {
        Some(q) => [format!("{:.6}", q.value), format!("{:.6}", q.rq), format!("{:.6}", q.sq)],
        None => [String::new(), String::new(), String::new()],
    }
}

impl PanopticReport {
    pub fn new(eval: &Evaluation, catalog: &ClassCatalog) -> Self {
        let mut rows = Vec::new();
        let mut things = Vec::new();
        let mut stuff = Vec::new();
        for (defs, kind) in [(catalog.things(), ClassKind::Thing), (catalog.stuff(), ClassKind::Stuff)] {
            for c in defs {
                let counts = eval.known.get(&c.id).copied().unwrap_or_default();
                let quality = counts.panoptic();
                if let Some(q) = quality {
                    match kind {
                        ClassKind::Thing => things.push(q),
                        _ => stuff.push(q),
                    }
                }
                rows.push(ClassRow {
                    name: c.name.clone(),
                    kind,
                    counts,
                    quality,
                });
            }
        }
        let unknown = eval.unknown.unknown();
        rows.push(ClassRow {
            name: "unknown".into(),
            kind: ClassKind::Unknown,
            counts: eval.unknown,
            quality: unknown,
        });
        Self {
            rows,
            known_thing: Quality::mean(&things),
            known_stuff: Quality::mean(&stuff),
            unknown,
            scenes: eval.scenes,
            scenes_without_unknowns: eval.scenes_without_unknowns,
        }
    }

    /// One row per class plus the thing and stuff means. The quality column
    /// is PQ for known classes and UQ for the unknown class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,kind,quality,RQ,SQ,TP,FP,FN\n");
        for r in &self.rows {
            let [q, rq, sq] = fmt_opt(r.quality);
            let kind = match r.kind {
                ClassKind::Thing => "thing",
                ClassKind::Stuff => "stuff",
                ClassKind::Unknown => "unknown",
            };
            let _ = writeln!(s, "{},{kind},{q},{rq},{sq},{},{},{}", r.name, r.counts.tp, r.counts.fp, r.counts.fn_);
        }
        for (name, q) in [("known_thing", self.known_thing), ("known_stuff", self.known_stuff)] {
            let [q, rq, sq] = fmt_opt(q);
            let _ = writeln!(s, "{name},mean,{q},{rq},{sq},,,");
        }
        s
    }

    /// Fixed-width table: unknown UQ/RQ/SQ, known-thing and known-stuff
    /// PQ/RQ/SQ, in percent.
    pub fn to_table(&self, label: &str) -> String {
        let pct = |q: Option<Quality>| match q {
            Some(q) => format!("{:>6.1} {:>6.1} {:>6.1}", 100.0 * q.value, 100.0 * q.rq, 100.0 * q.sq),
            None => format!("{:>6} {:>6} {:>6}", "-", "-", "-"),
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} | {:^20} | {:^20} | {:^20}",
            "", "Unknown", "Known Thing", "Known Stuff"
        );
        let _ = writeln!(
            s,
            "{:<16} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}",
            "", "UQ", "RQ", "SQ", "PQ", "RQ", "SQ", "PQ", "RQ", "SQ"
        );
        let _ = writeln!(
            s,
            "{label:<16} | {} | {} | {}",
            pct(self.unknown),
            pct(self.known_thing),
            pct(self.known_stuff)
        );
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::at(path, e))
    }

    /// Unknown UQ, or 0 when no unknowns were annotated.
    pub fn uq(&self) -> f64 {
        self.unknown.map_or(0.0, |q| q.value)
    }

    pub fn thing_pq(&self) -> f64 {
        self.known_thing.map_or(0.0, |q| q.value)
    }
}
