//! Experiment orchestration: configuration, datasets, the OSIS and baseline
//! pipelines, the beta sweep, and the ablation matrix.

mod baseline;
mod chart;
pub mod cli;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use baseline::{run_baseline, BaselineSpec, BaselineVariant};
pub use chart::{curve_csv, curve_svg, CurveRow};

use crate::error::{Error, Result};
use crate::infer::{InferenceConfig, SegmentationResult, Segmenter};
use crate::metrics::{evaluate_scene, Evaluation, PanopticReport};
use crate::model::{Checkpoint, ModelConfig};
use crate::raster::GridGeometry;
use crate::scene::{generate_scene, load_scene, save_scene, Scene, SceneGenConfig};
use crate::train::{train, TrainConfig, TrainLog};

/// Component switches studied by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    /// Discriminative loss on point embeddings.
    pub dl: bool,
    /// Box regression.
    pub br: bool,
    /// Per-prototype variance.
    pub var: bool,
}

impl Toggles {
    pub const ALL_ON: Toggles = Toggles {
        dl: true,
        br: true,
        var: true,
    };

    /// The ablation rows, in order: nothing, DL, DL + BR, DL + BR + variance.
    pub const ABLATION: [Toggles; 4] = [
        Toggles {
            dl: false,
            br: false,
            var: false,
        },
        Toggles {
            dl: true,
            br: false,
            var: false,
        },
        Toggles {
            dl: true,
            br: true,
            var: false,
        },
        Toggles::ALL_ON,
    ];

    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "-" };
        format!("DL{} BR{} VAR{}", mark(self.dl), mark(self.br), mark(self.var))
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL_ON
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene_train: SceneGenConfig,
    pub scene_test: SceneGenConfig,
    pub grid: GridGeometry,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub toggles: Toggles,
    pub baseline: BaselineSpec,
    /// Beta values visited by `sweep`.
    pub sweep_betas: Vec<f64>,
}

impl ExperimentConfig {
    /// 60 training and 20 test scenes on a 128 x 128 grid, ten epochs.
    pub fn desk() -> Self {
        let model = ModelConfig {
            semantic_classes: 5,
            ..ModelConfig::desk()
        };
        Self {
            seed: 7,
            train_scenes: 60,
            test_scenes: 20,
            scene_train: SceneGenConfig::desk_train(),
            scene_test: SceneGenConfig::desk_test(),
            grid: GridGeometry::desk_fine(),
            model,
            train: TrainConfig::default(),
            infer: InferenceConfig::default(),
            toggles: Toggles::ALL_ON,
            baseline: BaselineSpec::default(),
            sweep_betas: (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::at(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_train.validate()?;
        self.scene_test.validate()?;
        self.grid.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        self.baseline.clustering().validate()?;
        if self.grid.z != self.model.z_bins * self.model.frames {
            return Err(Error::Config(format!(
                "grid.z = {} but model expects {} vertical bins",
                self.grid.z,
                self.model.z_bins * self.model.frames
            )));
        }
        if let Some(b) = self.sweep_betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::Config(format!("sweep_betas entry {b} outside [0, 1]")));
        }
        Ok(())
    }

    /// Model config with the toggles applied.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            box_regression: self.toggles.br,
            predict_variance: self.toggles.var,
            ..self.model.clone()
        }
    }

    /// Training config with the toggles applied.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if !self.toggles.dl {
            t.loss.lambda_disc = 0.0;
        }
        t
    }
}

/// Independent seed for item `index` of stream `stream` (SplitMix64 mix).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Dataset {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let make = |gen: &SceneGenConfig, stream: u64, n: usize| -> Result<Vec<Scene>> {
            (0..n)
                .into_par_iter()
                .map(|i| generate_scene(gen, derive_seed(cfg.seed, stream, i as u64)))
                .collect()
        };
        Ok(Self {
            train: make(&cfg.scene_train, TRAIN_STREAM, cfg.train_scenes)?,
            test: make(&cfg.scene_test, TEST_STREAM, cfg.test_scenes)?,
        })
    }

    /// Writes `train/NNNN.scene` and `test/NNNN.scene` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (split, scenes) in [("train", &self.train), ("test", &self.test)] {
            let sub = dir.join(split);
            std::fs::create_dir_all(&sub).map_err(|e| Error::at(&sub, e))?;
            for (i, s) in scenes.iter().enumerate() {
                save_scene(s, &sub.join(format!("{i:04}.scene")))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |split: &str| -> Result<Vec<Scene>> {
            let sub = dir.join(split);
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&sub)
                .map_err(|e| Error::at(&sub, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "scene"))
                .collect();
            paths.sort();
            paths.iter().map(|p| load_scene(p)).collect()
        };
        Ok(Self {
            train: read("train")?,
            test: read("test")?,
        })
    }
}

/// Trains the OSIS model described by `cfg` (toggles applied).
pub fn train_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Checkpoint, TrainLog)> {
    let out = train(
        &data.train,
        &cfg.grid,
        &cfg.effective_model(),
        &cfg.effective_train(),
        derive_seed(cfg.seed, INIT_STREAM, 0),
    )?;
    Ok((out.checkpoint, out.log))
}

/// Segments every scene in parallel; results keep scene order.
pub fn segment_all(seg: &Segmenter, scenes: &[Scene], cfg: &InferenceConfig) -> Result<Vec<SegmentationResult>> {
    scenes.par_iter().map(|s| Ok(seg.segment(s, cfg)?.result)).collect()
}

pub fn evaluate_all(scenes: &[Scene], results: &[SegmentationResult]) -> Result<PanopticReport> {
    if scenes.len() != results.len() {
        return Err(Error::Invalid(format!(
            "{} scenes but {} results",
            scenes.len(),
            results.len()
        )));
    }
    let evals: Vec<Evaluation> = scenes
        .par_iter()
        .zip(results)
        .map(|(s, r)| evaluate_scene(s, r))
        .collect::<Result<_>>()?;
    let catalog = scenes.first().map(|s| s.catalog.clone()).unwrap_or_else(crate::scene::ClassCatalog::desk);
    Ok(PanopticReport::new(&Evaluation::pooled(&evals), &catalog))
}

/// UQ/RQ/SQ of the unknown class at each beta.
pub fn sweep_beta(seg: &Segmenter, scenes: &[Scene], cfg: &InferenceConfig, betas: &[f64]) -> Result<Vec<CurveRow>> {
    betas
        .iter()
        .map(|&beta| {
            let mut c = *cfg;
            c.clustering.beta = beta;
            let report = evaluate_all(scenes, &segment_all(seg, scenes, &c)?)?;
            let q = report.unknown.unwrap_or(crate::metrics::Quality::new(0.0, 0.0));
            Ok(CurveRow {
                beta,
                uq: q.value,
                rq: q.rq,
                sq: q.sq,
            })
        })
        .collect()
}

/// One trained-and-evaluated row of the ablation matrix.
pub struct AblationRow {
    pub toggles: Toggles,
    pub report: PanopticReport,
}

pub fn ablate(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    Toggles::ABLATION
        .iter()
        .map(|&toggles| {
            let c = ExperimentConfig {
                toggles,
                ..cfg.clone()
            };
            let (ckpt, _) = train_model(&c, data)?;
            let seg = Segmenter::new(&ckpt)?;
            let report = evaluate_all(&data.test, &segment_all(&seg, &data.test, &c.infer)?)?;
            Ok(AblationRow { toggles, report })
        })
        .collect()
}

/// Ablation rows as a table mirroring the toggle matrix layout.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    for (i, r) in rows.iter().enumerate() {
        let table = r.report.to_table(&r.toggles.label());
        // keep the two header lines only once
        let skip = if i == 0 { 0 } else { 2 };
        for line in table.lines().skip(skip) {
            s.push_str(line);
            s.push('\n');
        }
    }
    s
}

/// CSV of the ablation: one row per toggle combination.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("dl,br,var,UQ,unknown_RQ,unknown_SQ,thing_PQ,thing_RQ,thing_SQ,stuff_PQ,stuff_RQ,stuff_SQ\n");
    let f = |q: Option<crate::metrics::Quality>| match q {
        Some(q) => format!("{:.6},{:.6},{:.6}", q.value, q.rq, q.sq),
        None => ",,".into(),
    };
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.toggles.dl as u8,
            r.toggles.br as u8,
            r.toggles.var as u8,
            f(r.report.unknown),
            f(r.report.known_thing),
            f(r.report.known_stuff)
        ));
    }
    s
}
