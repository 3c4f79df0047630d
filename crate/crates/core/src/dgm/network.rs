//! The gated DGM network and its point-wise evaluation.
//!
//! ```text
//! S1    = tanh(W1 x + b1)
//! Z     = tanh(Uz x + Wz S + bz)
//! G     = tanh(Ug x + Wg S + bg)
//! R     = tanh(Ur x + Wr S + br)
//! H     = tanh(Uh x + Wh (S * R) + bh)
//! S_new = (1 - G) * H + Z * S
//! u     = w . S_last + b
//! ```
//!
//! Parameters live in one flat vector. Construction order fixes the index
//! map: input weights (row-major, `width x input_dim`) and bias, then for
//! each gated layer the G, Z, R, H gates as `(U, W, b)` triples, then the
//! output weights and bias.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dual::{Dual, Scalar};
use crate::rng::{child_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub width: usize,
    pub layers: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 5,
            width: 64,
            layers: 3,
        }
    }
}

impl Architecture {
    pub fn param_count(&self) -> usize {
        let (d, w, k) = (self.input_dim, self.width, self.layers);
        w * d + w + k * 4 * (w * d + w * w + w) + w + 1
    }

    pub fn layout(&self) -> Layout {
        Layout::new(*self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    G = 0,
    Z = 1,
    R = 2,
    H = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::G, Gate::Z, Gate::R, Gate::H];
}

/// Offsets of one gate's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateOffsets {
    /// `width x input_dim`
    pub u: usize,
    /// `width x width`
    pub w: usize,
    /// `width`
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub arch: Architecture,
    pub input_w: usize,
    pub input_b: usize,
    pub gates: Vec<[GateOffsets; 4]>,
    pub output_w: usize,
    pub output_b: usize,
    pub len: usize,
}

impl Layout {
    fn new(arch: Architecture) -> Self {
        let (d, w) = (arch.input_dim, arch.width);
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let input_w = take(w * d);
        let input_b = take(w);
        let gates = (0..arch.layers)
            .map(|_| {
                let mut g = [GateOffsets { u: 0, w: 0, b: 0 }; 4];
                for slot in &mut g {
                    *slot = GateOffsets {
                        u: take(w * d),
                        w: take(w * w),
                        b: take(w),
                    };
                }
                g
            })
            .collect();
        let output_w = take(w);
        let output_b = take(1);
        Self {
            arch,
            input_w,
            input_b,
            gates,
            output_w,
            output_b,
            len: off,
        }
    }

    /// Every weight matrix as `(offset, rows, cols)`, in index order.
    pub fn matrices(&self) -> Vec<(usize, usize, usize)> {
        let (d, w) = (self.arch.input_dim, self.arch.width);
        let mut out = vec![(self.input_w, w, d)];
        for layer in &self.gates {
            for g in layer {
                out.push((g.u, w, d));
                out.push((g.w, w, w));
            }
        }
        out.push((self.output_w, 1, w));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(arch: Architecture) -> Self {
        let layout = arch.layout();
        let values = vec![0.0; layout.len];
        Self { arch, layout, values }
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Option<Self> {
        let layout = arch.layout();
        (values.len() == layout.len).then_some(Self { arch, layout, values })
    }

    /// Xavier-uniform weights (gain 1), zero biases.
    pub fn xavier(arch: Architecture, seed: u64) -> Self {
        let mut p = Self::zeros(arch);
        let mut rng = child_rng(seed, Stream::Init, 0);
        for (off, rows, cols) in p.layout.matrices() {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            for v in &mut p.values[off..off + rows * cols] {
                *v = rng.gen_range(-limit..limit);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Output-layer weights and bias, for building constant networks.
    pub fn set_output(&mut self, weight: f64, bias: f64) {
        let (o, w) = (self.layout.output_w, self.arch.width);
        self.values[o..o + w].fill(weight);
        self.values[self.layout.output_b] = bias;
    }

    /// Network value at one point.
    pub fn forward(&self, p: &[f64]) -> f64 {
        debug_assert_eq!(p.len(), self.arch.input_dim);
        forward_generic::<f64>(self, p)
    }

    /// Value and exact derivative in the first input coordinate, by dual
    /// numbers. The value is bitwise equal to [`Self::forward`].
    pub fn time_derivative(&self, p: &[f64]) -> (f64, f64) {
        debug_assert_eq!(p.len(), self.arch.input_dim);
        let out = forward_generic::<Dual>(self, p);
        (out.v, out.d)
    }
}

/// `tanh(bias + sum_k W_k input_k)` row by row. Four interleaved
/// accumulators per row; the same order is used for every scalar type so the
/// dual-number value matches the plain pass bit for bit.
fn affine<T: Scalar>(
    values: &[f64],
    bias: usize,
    blocks: &[(usize, &[T])],
    width: usize,
    out: &mut [T],
) {
    for i in 0..width {
        let mut acc = [T::constant(0.0); 4];
        for (off, input) in blocks {
            let n = input.len();
            let row = &values[off + i * n..off + (i + 1) * n];
            let mut wc = row.chunks_exact(4);
            let mut xc = input.chunks_exact(4);
            for (w, x) in (&mut wc).zip(&mut xc) {
                for l in 0..4 {
                    acc[l] = acc[l] + x[l].scale(w[l]);
                }
            }
            for (l, (w, x)) in wc.remainder().iter().zip(xc.remainder()).enumerate() {
                acc[l] = acc[l] + x.scale(*w);
            }
        }
        let sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        out[i] = (T::constant(values[bias + i]) + sum).tanh();
    }
}

fn forward_generic<T: Scalar>(net: &NetworkParams, p: &[f64]) -> T {
    let width = net.arch.width;
    let v = &net.values;
    let lay = &net.layout;
    let x: Vec<T> = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| {
            if i == 0 {
                T::variable(pi)
            } else {
                T::constant(pi)
            }
        })
        .collect();

    let mut s = vec![T::constant(0.0); width];
    affine(v, lay.input_b, &[(lay.input_w, &x)], width, &mut s);

    let mut z = s.clone();
    let mut g = s.clone();
    let mut r = s.clone();
    let mut h = s.clone();
    let mut sr = s.clone();
    for gates in &lay.gates {
        let [og, oz, or, oh] = *gates;
        affine(v, oz.b, &[(oz.u, &x), (oz.w, &s)], width, &mut z);
        affine(v, og.b, &[(og.u, &x), (og.w, &s)], width, &mut g);
        affine(v, or.b, &[(or.u, &x), (or.w, &s)], width, &mut r);
        for i in 0..width {
            sr[i] = s[i] * r[i];
        }
        affine(v, oh.b, &[(oh.u, &x), (oh.w, &sr)], width, &mut h);
        for i in 0..width {
            s[i] = (T::constant(1.0) - g[i]) * h[i] + z[i] * s[i];
        }
    }

    let mut out = T::constant(v[lay.output_b]);
    for (w, si) in v[lay.output_w..lay.output_w + width].iter().zip(&s) {
        out = out + si.scale(*w);
    }
    out
}
