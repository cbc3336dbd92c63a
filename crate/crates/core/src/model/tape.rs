//! Minimal reverse-mode differentiation over the handful of ops the network
//! needs. A [`Tape`] records values and ops in execution order; `backward`
//! walks the ops in reverse and accumulates cotangents into value and
//! parameter gradients.

use super::tensor::Tensor;

pub type ValueId = usize;

#[derive(Clone, Debug)]
enum Op {
    Conv {
        input: ValueId,
        out: ValueId,
        weight: usize,
        bias: usize,
        stride: usize,
    },
    Relu {
        input: ValueId,
        out: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    Upsample {
        input: ValueId,
        out: ValueId,
    },
    GlobalAvgPool {
        input: ValueId,
        out: ValueId,
    },
    Linear {
        input: ValueId,
        out: ValueId,
        weight: usize,
        bias: usize,
    },
}

/// Records a forward pass. Parameters are referenced by block index into the
/// slice handed to each op.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, t: Tensor) -> ValueId {
        self.values.push(t);
        self.values.len() - 1
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id]
    }

    fn push(&mut self, t: Tensor) -> ValueId {
        self.values.push(t);
        self.values.len() - 1
    }

    pub fn conv(&mut self, params: &[Tensor], input: ValueId, weight: usize, bias: usize, stride: usize) -> ValueId {
        let out = conv2d(&self.values[input], &params[weight], &params[bias], stride);
        let out = self.push(out);
        self.ops.push(Op::Conv {
            input,
            out,
            weight,
            bias,
            stride,
        });
        out
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let mut t = self.values[input].clone();
        for v in &mut t.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let out = self.push(t);
        self.ops.push(Op::Relu { input, out });
        out
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let mut t = self.values[a].clone();
        t.add_assign(&self.values[b]);
        let out = self.push(t);
        self.ops.push(Op::Add { a, b, out });
        out
    }

    /// Nearest-neighbor resize to `(h, w)`.
    pub fn upsample(&mut self, input: ValueId, h: usize, w: usize) -> ValueId {
        let src = &self.values[input];
        let (c, hs, ws) = src.chw();
        let mut t = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for r in 0..h {
                let sr = r * hs / h;
                for col in 0..w {
                    t.data[(ch * h + r) * w + col] = src.data[(ch * hs + sr) * ws + col * ws / w];
                }
            }
        }
        let out = self.push(t);
        self.ops.push(Op::Upsample { input, out });
        out
    }

    pub fn global_avg_pool(&mut self, input: ValueId) -> ValueId {
        let src = &self.values[input];
        let (c, h, w) = src.chw();
        let n = (h * w) as f64;
        let data = (0..c)
            .map(|ch| src.data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / n)
            .collect();
        let out = self.push(Tensor { shape: vec![c], data });
        self.ops.push(Op::GlobalAvgPool { input, out });
        out
    }

    pub fn linear(&mut self, params: &[Tensor], input: ValueId, weight: usize, bias: usize) -> ValueId {
        let x = &self.values[input];
        let w = &params[weight];
        let b = &params[bias];
        let (o, i) = (w.shape[0], w.shape[1]);
        let data = (0..o)
            .map(|r| b.data[r] + (0..i).map(|k| w.data[r * i + k] * x.data[k]).sum::<f64>())
            .collect();
        let out = self.push(Tensor { shape: vec![o], data });
        self.ops.push(Op::Linear {
            input,
            out,
            weight,
            bias,
        });
        out
    }

    /// Hash of every ReLU on/off decision. Two forward passes with the same
    /// signature are on the same linear piece of the network.
    pub fn kink_signature(&self) -> u64 {
        let mut h = Fnv::new();
        for op in &self.ops {
            if let Op::Relu { input, .. } = op {
                for &v in &self.values[*input].data {
                    h.bit(v > 0.0);
                }
            }
        }
        h.finish()
    }

    /// Propagates `seeds` (value id, cotangent) backwards and adds parameter
    /// gradients into `param_grads`. Returns the cotangents left on values
    /// no op produced, i.e. the tape inputs.
    pub fn backward(
        &self,
        params: &[Tensor],
        seeds: Vec<(ValueId, Tensor)>,
        param_grads: &mut [Tensor],
    ) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        for (id, g) in seeds {
            accumulate(&mut grads[id], g);
        }
        for op in self.ops.iter().rev() {
            match *op {
                Op::Conv {
                    input,
                    out,
                    weight,
                    bias,
                    stride,
                } => {
                    let Some(gout) = grads[out].take() else { continue };
                    let gin = conv2d_backward(
                        &self.values[input],
                        &params[weight],
                        stride,
                        &gout,
                        param_grads,
                        weight,
                        bias,
                    );
                    accumulate(&mut grads[input], gin);
                }
                Op::Relu { input, out } => {
                    let Some(mut g) = grads[out].take() else { continue };
                    for (gv, &x) in g.data.iter_mut().zip(&self.values[input].data) {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads[input], g);
                }
                Op::Add { a, b, out } => {
                    let Some(g) = grads[out].take() else { continue };
                    accumulate(&mut grads[a], g.clone());
                    accumulate(&mut grads[b], g);
                }
                Op::Upsample { input, out } => {
                    let Some(g) = grads[out].take() else { continue };
                    let (c, hs, ws) = self.values[input].chw();
                    let (_, h, w) = g.chw();
                    let mut gin = Tensor::zeros(&[c, hs, ws]);
                    for ch in 0..c {
                        for r in 0..h {
                            let sr = r * hs / h;
                            for col in 0..w {
                                gin.data[(ch * hs + sr) * ws + col * ws / w] += g.data[(ch * h + r) * w + col];
                            }
                        }
                    }
                    accumulate(&mut grads[input], gin);
                }
                Op::GlobalAvgPool { input, out } => {
                    let Some(g) = grads[out].take() else { continue };
                    let (c, h, w) = self.values[input].chw();
                    let n = (h * w) as f64;
                    let mut gin = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        let v = g.data[ch] / n;
                        gin.data[ch * h * w..(ch + 1) * h * w].fill(v);
                    }
                    accumulate(&mut grads[input], gin);
                }
                Op::Linear {
                    input,
                    out,
                    weight,
                    bias,
                } => {
                    let Some(g) = grads[out].take() else { continue };
                    let x = &self.values[input];
                    let w = &params[weight];
                    let (o, i) = (w.shape[0], w.shape[1]);
                    let mut gin = Tensor::zeros(&[i]);
                    for r in 0..o {
                        let gr = g.data[r];
                        param_grads[bias].data[r] += gr;
                        for k in 0..i {
                            param_grads[weight].data[r * i + k] += gr * x.data[k];
                            gin.data[k] += gr * w.data[r * i + k];
                        }
                    }
                    accumulate(&mut grads[input], gin);
                }
            }
        }
        grads
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// FNV-1a over a stream of bits, used to fingerprint branch decisions.
pub(crate) struct Fnv(u64, u8, u32);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325, 0, 0)
    }

    pub(crate) fn bit(&mut self, b: bool) {
        self.1 = (self.1 << 1) | b as u8;
        self.2 += 1;
        if self.2 == 8 {
            self.flush();
        }
    }

    fn flush(&mut self) {
        self.0 ^= self.1 as u64;
        self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        self.1 = 0;
        self.2 = 0;
    }

    pub(crate) fn finish(mut self) -> u64 {
        if self.2 > 0 {
            self.flush();
        }
        self.0
    }
}

/// Output range `[lo, hi)` of positions whose input index
/// `o * stride + tap - pad` falls inside `[0, n)`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    // largest o with o * stride + tap - pad <= n_in - 1
    let top = n_in + pad;
    let hi = if top > tap { ((top - tap - 1) / stride + 1).min(n_out) } else { 0 };
    (lo.min(hi), hi)
}

/// Same-padded 2D convolution. `weight` is `[out, in, k, k]` with odd `k`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
    let (cin, h, w) = input.chw();
    let (cout, k) = (weight.shape[0], weight.shape[2]);
    debug_assert_eq!(weight.shape[1], cin);
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    for oc in 0..cout {
        let plane = &mut out.data[oc * ho * wo..(oc + 1) * ho * wo];
        plane.fill(bias.data[oc]);
        for ic in 0..cin {
            let src = &input.data[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ho, h, stride, ky, pad);
                for kx in 0..k {
                    let wv = weight.data[((oc * cin + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(wo, w, stride, kx, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &src[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let ix0 = ox0 + kx - pad;
                            let n = ox1 - ox0;
                            for (o, &i) in orow[ox0..ox1].iter_mut().zip(&row[ix0..ix0 + n]) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv2d`]. Adds weight and bias gradients into
/// `param_grads[weight_idx]` / `param_grads[bias_idx]` and returns the input
/// cotangent.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    gout: &Tensor,
    param_grads: &mut [Tensor],
    weight_idx: usize,
    bias_idx: usize,
) -> Tensor {
    let (cin, h, w) = input.chw();
    let (cout, k) = (weight.shape[0], weight.shape[2]);
    let (_, ho, wo) = gout.chw();
    let pad = k / 2;
    let mut gin = Tensor::zeros(&[cin, h, w]);
    for oc in 0..cout {
        let gplane = &gout.data[oc * ho * wo..(oc + 1) * ho * wo];
        param_grads[bias_idx].data[oc] += gplane.iter().sum::<f64>();
        for ic in 0..cin {
            let src = &input.data[ic * h * w..(ic + 1) * h * w];
            let dst = &mut gin.data[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ho, h, stride, ky, pad);
                for kx in 0..k {
                    let widx = ((oc * cin + ic) * k + ky) * k + kx;
                    let wv = weight.data[widx];
                    let (ox0, ox1) = valid_range(wo, w, stride, kx, pad);
                    let mut gw = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let ix0 = ox0 + kx - pad;
                            let n = ox1 - ox0;
                            let srow = &src[iy * w + ix0..iy * w + ix0 + n];
                            let drow = &mut dst[iy * w + ix0..iy * w + ix0 + n];
                            for ((d, &s), &g) in drow.iter_mut().zip(srow).zip(&grow[ox0..ox1]) {
                                gw += g * s;
                                *d += wv * g;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * stride + kx - pad;
                                let g = grow[ox];
                                gw += g * src[iy * w + ix];
                                dst[iy * w + ix] += wv * g;
                            }
                        }
                    }
                    param_grads[weight_idx].data[widx] += gw;
                }
            }
        }
    }
    gin
}
