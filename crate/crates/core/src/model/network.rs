//! The segmentation network: a three-scale residual pyramid backbone, a
//! detection head, and an embedding head with point, thing, stuff (and
//! optionally per-point semantic) branches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, ValueId};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::raster::{BevTensor, GridGeometry};

/// Per-class detection channels, in order.
pub const DET_FIELDS: usize = 7;
pub const DET_ALPHA: usize = 0;
pub const DET_DX: usize = 1;
pub const DET_DY: usize = 2;
pub const DET_W: usize = 3;
pub const DET_L: usize = 4;
pub const DET_SIN: usize = 5;
pub const DET_COS: usize = 6;

/// Grids smaller than this on either side run the pyramid at stride 1.
pub const TINY_GRID: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels `C` throughout the backbone and heads.
    pub width: usize,
    /// Embedding dimension `F`.
    pub embed_dim: usize,
    /// Vertical bins `Z`; also the depth of the point-embedding volume.
    pub z_bins: usize,
    /// Stacked input frames; the input has `z_bins * frames` channels.
    pub frames: usize,
    pub thing_classes: usize,
    pub stuff_classes: usize,
    /// Classes of the per-point semantic branch, 0 to disable it.
    #[serde(default)]
    pub semantic_classes: usize,
    pub det_layers: usize,
    pub emb_layers: usize,
    /// When false, every prototype uses unit variance.
    pub predict_variance: bool,
    /// When false, box regression is not trained and inference uses fixed
    /// footprints.
    pub box_regression: bool,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            width: 16,
            embed_dim: 8,
            z_bins: 8,
            frames: 1,
            thing_classes: 3,
            stuff_classes: 1,
            semantic_classes: 0,
            det_layers: 4,
            emb_layers: 4,
            predict_variance: true,
            box_regression: true,
        }
    }

    /// A network small enough for exhaustive finite-difference checks.
    pub fn miniature() -> Self {
        Self {
            width: 4,
            embed_dim: 3,
            z_bins: 2,
            frames: 1,
            thing_classes: 2,
            stuff_classes: 1,
            semantic_classes: 0,
            det_layers: 4,
            emb_layers: 4,
            predict_variance: true,
            box_regression: true,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.z_bins * self.frames
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("embed_dim", self.embed_dim),
            ("z_bins", self.z_bins),
            ("frames", self.frames),
            ("det_layers", self.det_layers),
            ("emb_layers", self.emb_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// `(stem strides, pyramid strides)` for an input grid.
    fn strides(h: usize, w: usize) -> ([usize; 2], [usize; 2]) {
        if h < TINY_GRID || w < TINY_GRID {
            ([1, 1], [1, 1])
        } else {
            ([2, 2], [2, 2])
        }
    }

    /// Downsampling factor between the input grid and the head outputs.
    pub fn output_stride(h: usize, w: usize) -> usize {
        let (stem, _) = Self::strides(h, w);
        stem[0] * stem[1]
    }

    /// Geometry of the head outputs for a given input geometry.
    pub fn output_geometry(input: &GridGeometry) -> GridGeometry {
        input.downsample(Self::output_stride(input.h, input.w))
    }
}

/// Kernel scale of the prediction layers relative to hidden layers.
pub const HEAD_INIT_SCALE: f64 = 0.1;

const HEAD_OUTPUTS: [&str; 4] = ["det.out.w", "emb.point.w", "emb.thing.w", "emb.semantic.w"];

#[derive(Clone, Copy, Debug)]
struct Ix {
    w: usize,
    b: usize,
}

/// Parameter block indices for every layer, derived from a config.
#[derive(Clone, Debug)]
struct Layout {
    stem: [Ix; 2],
    res: [[Ix; 2]; 3],
    down: [Ix; 2],
    det: Vec<Ix>,
    det_out: Ix,
    emb: Vec<Ix>,
    point: Ix,
    thing: Ix,
    stuff: Vec<Ix>,
    semantic: Option<Ix>,
    u: usize,
    blocks: Vec<(String, Vec<usize>, usize)>,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut blocks: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            let fan_in = cin * k * k;
            blocks.push((format!("{name}.w"), vec![cout, cin, k, k], fan_in));
            blocks.push((format!("{name}.b"), vec![cout], 0));
            Ix {
                w: blocks.len() - 2,
                b: blocks.len() - 1,
            }
        };
        let c = cfg.width;
        let f = cfg.embed_dim;
        let stem = [conv("stem0".into(), cfg.in_channels(), c, 3), conv("stem1".into(), c, c, 3)];
        let r0 = [conv("res0.a".into(), c, c, 3), conv("res0.b".into(), c, c, 3)];
        let d0 = conv("down0".into(), c, c, 3);
        let r1 = [conv("res1.a".into(), c, c, 3), conv("res1.b".into(), c, c, 3)];
        let d1 = conv("down1".into(), c, c, 3);
        let r2 = [conv("res2.a".into(), c, c, 3), conv("res2.b".into(), c, c, 3)];
        let det = (0..cfg.det_layers).map(|i| conv(format!("det{i}"), c, c, 3)).collect();
        let det_out = conv("det.out".into(), c, DET_FIELDS * cfg.thing_classes, 1);
        let emb = (0..cfg.emb_layers).map(|i| conv(format!("emb{i}"), c, c, 3)).collect();
        let point = conv("emb.point".into(), c, f * cfg.z_bins, 1);
        let thing = conv("emb.thing".into(), c, f + 1, 1);
        let semantic = (cfg.semantic_classes > 0)
            .then(|| conv("emb.semantic".into(), c, cfg.semantic_classes * cfg.z_bins, 1));
        let mut stuff = Vec::new();
        for s in 0..cfg.stuff_classes {
            blocks.push((format!("emb.stuff{s}.w"), vec![f + 1, c], c));
            blocks.push((format!("emb.stuff{s}.b"), vec![f + 1], 0));
            stuff.push(Ix {
                w: blocks.len() - 2,
                b: blocks.len() - 1,
            });
        }
        blocks.push(("u".into(), vec![1], 0));
        let u = blocks.len() - 1;
        Self {
            stem,
            res: [r0, r1, r2],
            down: [d0, d1],
            det,
            det_out,
            emb,
            point,
            thing,
            stuff,
            semantic,
            u,
            blocks,
        }
    }
}

/// Named parameter blocks. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl NetworkParams {
    pub fn zeros_like(other: &NetworkParams) -> Self {
        Self {
            names: other.names.clone(),
            tensors: other.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Flat read of parameter `k` in block order.
    pub fn flat(&self, mut k: usize) -> f64 {
        for t in &self.tensors {
            if k < t.len() {
                return t.data[k];
            }
            k -= t.len();
        }
        panic!("flat index out of range")
    }

    pub fn flat_mut(&mut self, mut k: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if k < t.len() {
                return &mut t.data[k];
            }
            k -= t.len();
        }
        panic!("flat index out of range")
    }

    pub fn add_scaled(&mut self, other: &NetworkParams, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }
}

/// Everything the heads produce for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutput {
    /// `(7 * things) x H' x W'`, per class `(alpha, dx, dy, w, l, sin 2t, cos 2t)`.
    pub det: Tensor,
    /// `(F * Z) x H' x W'`, channel `f * Z + z`.
    pub point: Tensor,
    /// `(F + 1) x H' x W'`: prototype mean then raw log-variance.
    pub thing: Tensor,
    /// Per stuff class: `F` mean entries then raw log-variance.
    pub stuff: Vec<Vec<f64>>,
    /// `(S * Z) x H' x W'` semantic logits when the branch is enabled.
    pub semantic: Option<Tensor>,
    /// Score of the "no prototype" slot.
    pub u: f64,
    /// Geometry of the head output grids.
    pub geom: GridGeometry,
}

impl NetworkOutput {
    pub fn all_finite(&self) -> bool {
        self.det.all_finite()
            && self.point.all_finite()
            && self.thing.all_finite()
            && self.stuff.iter().flatten().all(|v| v.is_finite())
            && self.semantic.as_ref().is_none_or(Tensor::all_finite)
            && self.u.is_finite()
    }
}

/// Cotangents for every [`NetworkOutput`] field.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub det: Tensor,
    pub point: Tensor,
    pub thing: Tensor,
    pub stuff: Vec<Vec<f64>>,
    pub semantic: Option<Tensor>,
    pub u: f64,
}

impl OutputGrad {
    pub fn zeros_like(out: &NetworkOutput) -> Self {
        Self {
            det: Tensor::zeros(&out.det.shape),
            point: Tensor::zeros(&out.point.shape),
            thing: Tensor::zeros(&out.thing.shape),
            stuff: out.stuff.iter().map(|s| vec![0.0; s.len()]).collect(),
            semantic: out.semantic.as_ref().map(|t| Tensor::zeros(&t.shape)),
            u: 0.0,
        }
    }
}

struct OutputIds {
    det: ValueId,
    point: ValueId,
    thing: ValueId,
    stuff: Vec<ValueId>,
    semantic: Option<ValueId>,
}

/// A recorded forward pass, kept for [`Network::backward`].
pub struct ForwardPass {
    pub output: NetworkOutput,
    tape: Tape,
    ids: OutputIds,
}

impl ForwardPass {
    pub fn kink_signature(&self) -> u64 {
        self.tape.kink_signature()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    layout: Layout,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Self { config, layout })
    }

    /// Fan-in scaled uniform kernels (variance `2 / fan_in`), zero biases,
    /// and `u = 0`. The 1x1 prediction layers start `HEAD_INIT_SCALE` times
    /// smaller so early losses and gradients stay moderate.
    pub fn init_params(&self, seed: u64) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, fan_in) in &self.layout.blocks {
            let mut t = Tensor::zeros(shape);
            if *fan_in > 0 {
                let mut a = (6.0 / *fan_in as f64).sqrt();
                if HEAD_OUTPUTS.contains(&name.as_str()) {
                    a *= HEAD_INIT_SCALE;
                }
                for v in &mut t.data {
                    *v = rng.random_range(-a..a);
                }
            }
            names.push(name.clone());
            tensors.push(t);
        }
        NetworkParams { names, tensors }
    }

    /// Checks that `params` has exactly the blocks this network expects.
    pub fn check_params(&self, params: &NetworkParams) -> Result<()> {
        if params.tensors.len() != self.layout.blocks.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter blocks, got {}",
                self.layout.blocks.len(),
                params.tensors.len()
            )));
        }
        for ((name, shape, _), (pn, pt)) in self.layout.blocks.iter().zip(params.names.iter().zip(&params.tensors)) {
            if name != pn || shape != &pt.shape {
                return Err(Error::Shape(format!(
                    "block {name} {shape:?} does not match {pn} {:?}",
                    pt.shape
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &BevTensor, params: &NetworkParams) -> Result<ForwardPass> {
        if input.channels != self.config.in_channels() {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {}",
                input.channels,
                self.config.in_channels()
            )));
        }
        self.check_params(params)?;
        let l = &self.layout;
        let p = &params.tensors;
        let (geo_h, geo_w) = (input.geom.h, input.geom.w);
        let (stem, down) = ModelConfig::strides(geo_h, geo_w);

        let mut t = Tape::new();
        let x = t.input(Tensor {
            shape: vec![input.channels, geo_h, geo_w],
            data: input.data.clone(),
        });
        let conv_relu = |t: &mut Tape, x: ValueId, ix: Ix, stride: usize| {
            let y = t.conv(p, x, ix.w, ix.b, stride);
            t.relu(y)
        };
        let residual = |t: &mut Tape, x: ValueId, ix: [Ix; 2]| {
            let a = conv_relu(t, x, ix[0], 1);
            let b = t.conv(p, a, ix[1].w, ix[1].b, 1);
            let s = t.add(x, b);
            t.relu(s)
        };

        let s0 = conv_relu(&mut t, x, l.stem[0], stem[0]);
        let s1 = conv_relu(&mut t, s0, l.stem[1], stem[1]);
        let r4 = residual(&mut t, s1, l.res[0]);
        let d8 = conv_relu(&mut t, r4, l.down[0], down[0]);
        let r8 = residual(&mut t, d8, l.res[1]);
        let d16 = conv_relu(&mut t, r8, l.down[1], down[1]);
        let r16 = residual(&mut t, d16, l.res[2]);
        let (_, h8, w8) = t.value(r8).chw();
        let (_, h4, w4) = t.value(r4).chw();
        let up16 = t.upsample(r16, h8, w8);
        let f8 = t.add(r8, up16);
        let up8 = t.upsample(f8, h4, w4);
        let feat = t.add(r4, up8);

        let mut d = feat;
        for &ix in &l.det {
            d = conv_relu(&mut t, d, ix, 1);
        }
        let det = t.conv(p, d, l.det_out.w, l.det_out.b, 1);

        let mut e = feat;
        for &ix in &l.emb {
            e = conv_relu(&mut t, e, ix, 1);
        }
        let point = t.conv(p, e, l.point.w, l.point.b, 1);
        let thing = t.conv(p, e, l.thing.w, l.thing.b, 1);
        let semantic = l.semantic.map(|ix| t.conv(p, e, ix.w, ix.b, 1));
        let pooled = t.global_avg_pool(e);
        let stuff: Vec<ValueId> = l.stuff.iter().map(|ix| t.linear(p, pooled, ix.w, ix.b)).collect();

        let geom = ModelConfig::output_geometry(&input.geom);
        debug_assert_eq!((geom.h, geom.w), (h4, w4));
        let output = NetworkOutput {
            det: t.value(det).clone(),
            point: t.value(point).clone(),
            thing: t.value(thing).clone(),
            stuff: stuff.iter().map(|&s| t.value(s).data.clone()).collect(),
            semantic: semantic.map(|s| t.value(s).clone()),
            u: p[l.u].data[0],
            geom,
        };
        Ok(ForwardPass {
            output,
            tape: t,
            ids: OutputIds {
                det,
                point,
                thing,
                stuff,
                semantic,
            },
        })
    }

    pub fn backward(&self, pass: &ForwardPass, params: &NetworkParams, grad: &OutputGrad) -> Result<NetworkParams> {
        let out = &pass.output;
        let same = grad.det.shape == out.det.shape
            && grad.point.shape == out.point.shape
            && grad.thing.shape == out.thing.shape
            && grad.stuff.len() == out.stuff.len()
            && grad.stuff.iter().zip(&out.stuff).all(|(a, b)| a.len() == b.len())
            && grad.semantic.as_ref().map(|t| &t.shape) == out.semantic.as_ref().map(|t| &t.shape);
        if !same {
            return Err(Error::Shape("output cotangent does not match forward output".into()));
        }
        let mut seeds = vec![
            (pass.ids.det, grad.det.clone()),
            (pass.ids.point, grad.point.clone()),
            (pass.ids.thing, grad.thing.clone()),
        ];
        for (&id, g) in pass.ids.stuff.iter().zip(&grad.stuff) {
            seeds.push((id, Tensor { shape: vec![g.len()], data: g.clone() }));
        }
        if let (Some(id), Some(g)) = (pass.ids.semantic, &grad.semantic) {
            seeds.push((id, g.clone()));
        }
        let mut grads = NetworkParams::zeros_like(params);
        pass.tape.backward(&params.tensors, seeds, &mut grads.tensors);
        grads.tensors[self.layout.u].data[0] += grad.u;
        Ok(grads)
    }
}

/// Prototype variance from its raw head output: `clamp(exp(s), 1e-3, 1e3)`.
/// Returns the variance and its derivative with respect to `s`.
pub fn variance_from_raw(s: f64) -> (f64, f64) {
    let v = s.exp();
    if v < 1e-3 {
        (1e-3, 0.0)
    } else if v > 1e3 {
        (1e3, 0.0)
    } else {
        (v, v)
    }
}
