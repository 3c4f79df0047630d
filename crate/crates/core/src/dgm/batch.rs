//! Batched network evaluation on the tape.
//!
//! Rows are points. The tangent pass carries, next to every activation, its
//! derivative in the first input coordinate; both streams are tape nodes, so
//! a reverse sweep through them differentiates the time derivative with
//! respect to the parameters.

use super::network::NetworkParams;
use super::tape::{gemm, tanh_in_place, Mat, Tape, Var};

struct GateVars {
    u: Var,
    w: Var,
    b: Var,
}

/// The parameters registered as tape leaves.
pub struct BoundParams {
    input_w: Var,
    input_b: Var,
    gates: Vec<[GateVars; 4]>,
    output_w: Var,
    output_b: Var,
}

impl BoundParams {
    /// Registers every block. `track` decides whether adjoints are kept.
    pub fn bind(tape: &mut Tape, net: &NetworkParams, track: bool) -> Self {
        let (d, w) = (net.arch.input_dim, net.arch.width);
        let v = &net.values;
        let lay = &net.layout;
        let mut leaf = |off: usize, rows: usize, cols: usize| {
            let m = Mat::from_vec(rows, cols, v[off..off + rows * cols].to_vec());
            if track {
                tape.parameter(m)
            } else {
                tape.constant(m)
            }
        };
        let input_w = leaf(lay.input_w, w, d);
        let input_b = leaf(lay.input_b, 1, w);
        let gates = lay
            .gates
            .iter()
            .map(|layer| {
                layer.map(|g| GateVars {
                    u: leaf(g.u, w, d),
                    w: leaf(g.w, w, w),
                    b: leaf(g.b, 1, w),
                })
            })
            .collect();
        let output_w = leaf(lay.output_w, 1, w);
        let output_b = leaf(lay.output_b, 1, 1);
        Self {
            input_w,
            input_b,
            gates,
            output_w,
            output_b,
        }
    }

    /// Scatters parameter adjoints into a flat gradient, added to `grad`.
    pub fn gather(&self, net: &NetworkParams, adj: &[Option<Mat>], grad: &mut [f64]) {
        let lay = &net.layout;
        let mut put = |var: Var, off: usize| {
            if let Some(m) = &adj[var.index()] {
                for (g, x) in grad[off..off + m.data.len()].iter_mut().zip(&m.data) {
                    *g += x;
                }
            }
        };
        put(self.input_w, lay.input_w);
        put(self.input_b, lay.input_b);
        for (vars, offs) in self.gates.iter().zip(&lay.gates) {
            for (gv, go) in vars.iter().zip(offs) {
                put(gv.u, go.u);
                put(gv.w, go.w);
                put(gv.b, go.b);
            }
        }
        put(self.output_w, lay.output_w);
        put(self.output_b, lay.output_b);
    }
}

fn pre_activation(tape: &mut Tape, x: Var, s: Var, g: &GateVars) -> Var {
    let a = tape.matmul_t(x, g.u);
    let b = tape.matmul_t(s, g.w);
    let sum = tape.add(a, b);
    tape.add_bias(sum, g.b)
}

/// Values of the network at every row of `x` (`n x input_dim`), as `n x 1`.
pub fn forward(tape: &mut Tape, p: &BoundParams, x: Var) -> Var {
    let a = tape.matmul_t(x, p.input_w);
    let a = tape.add_bias(a, p.input_b);
    let mut s = tape.tanh(a);
    for [g, z, r, h] in &p.gates {
        let zv = pre_activation(tape, x, s, z);
        let zv = tape.tanh(zv);
        let gv = pre_activation(tape, x, s, g);
        let gv = tape.tanh(gv);
        let rv = pre_activation(tape, x, s, r);
        let rv = tape.tanh(rv);
        let sr = tape.mul(s, rv);
        let hv = pre_activation(tape, x, sr, h);
        let hv = tape.tanh(hv);
        let keep = tape.one_minus(gv);
        let a = tape.mul(keep, hv);
        let b = tape.mul(zv, s);
        s = tape.add(a, b);
    }
    let u = tape.matmul_t(s, p.output_w);
    tape.add_bias(u, p.output_b)
}

/// `tanh(pre)` and its tangent `slope * dpre`.
fn tanh_pair(tape: &mut Tape, pre: Var, dpre: Var) -> (Var, Var) {
    let y = tape.tanh(pre);
    let slope = tape.tanh_slope(y);
    let dy = tape.mul(slope, dpre);
    (y, dy)
}

fn gate_pair(tape: &mut Tape, x: Var, dx: Var, s: Var, ds: Var, g: &GateVars) -> (Var, Var) {
    let pre = pre_activation(tape, x, s, g);
    let a = tape.matmul_t(dx, g.u);
    let b = tape.matmul_t(ds, g.w);
    let dpre = tape.add(a, b);
    tanh_pair(tape, pre, dpre)
}

/// Values and first-coordinate derivatives at every row of `x`, both
/// `n x 1`.
pub fn forward_with_time_derivative(tape: &mut Tape, p: &BoundParams, x: Var) -> (Var, Var) {
    let (n, d) = {
        let m = tape.value(x);
        (m.rows, m.cols)
    };
    let mut seed = Mat::zeros(n, d);
    for row in seed.data.chunks_exact_mut(d) {
        row[0] = 1.0;
    }
    let dx = tape.constant(seed);

    let pre = tape.matmul_t(x, p.input_w);
    let pre = tape.add_bias(pre, p.input_b);
    let dpre = tape.matmul_t(dx, p.input_w);
    let (mut s, mut ds) = tanh_pair(tape, pre, dpre);
    for [g, z, r, h] in &p.gates {
        let (zv, dz) = gate_pair(tape, x, dx, s, ds, z);
        let (gv, dg) = gate_pair(tape, x, dx, s, ds, g);
        let (rv, dr) = gate_pair(tape, x, dx, s, ds, r);
        let sr = tape.mul(s, rv);
        let t1 = tape.mul(ds, rv);
        let t2 = tape.mul(s, dr);
        let dsr = tape.add(t1, t2);
        let (hv, dh) = gate_pair(tape, x, dx, sr, dsr, h);

        // s' = (1 - g) h + z s
        let keep = tape.one_minus(gv);
        let a = tape.mul(keep, hv);
        let b = tape.mul(zv, s);
        let s_new = tape.add(a, b);
        // ds' = (1 - g) dh - dg h + dz s + z ds
        let t1 = tape.mul(keep, dh);
        let t2 = tape.mul(dg, hv);
        let t3 = tape.mul(dz, s);
        let t4 = tape.mul(zv, ds);
        let t12 = tape.sub(t1, t2);
        let t34 = tape.add(t3, t4);
        ds = tape.add(t12, t34);
        s = s_new;
    }
    let u = tape.matmul_t(s, p.output_w);
    let u = tape.add_bias(u, p.output_b);
    let du = tape.matmul_t(ds, p.output_w);
    (u, du)
}

pub fn points_matrix(points: &[[f64; 5]]) -> Mat {
    Mat::from_vec(points.len(), 5, points.iter().flatten().copied().collect())
}

/// `out = x w^T` (`beta = 0`) or `out += x w^T` (`beta = 1`), with `x` an
/// `n x k` row-major block and `w` a `m x k` slice of the parameters.
fn dense(x: &[f64], n: usize, k: usize, w: &[f64], m: usize, beta: f64, out: &mut [f64]) {
    gemm(n, k, m, x, k as isize, 1, w, 1, k as isize, beta, out);
}

fn bias_tanh(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (x, b) in row.iter_mut().zip(bias) {
            *x += b;
        }
    }
    tanh_in_place(out);
}

/// Network values at many points. Inference only: no tape, buffers reused
/// across chunks.
pub fn batch_forward(net: &NetworkParams, points: &[[f64; 5]]) -> Vec<f64> {
    const CHUNK: usize = 256;
    let (d, w) = (net.arch.input_dim, net.arch.width);
    assert_eq!(d, 5, "points are 5-dimensional");
    let v = &net.values;
    let lay = &net.layout;
    let mut out = Vec::with_capacity(points.len());
    let cap = CHUNK.min(points.len()) * w;
    let [mut s, mut z, mut g, mut r, mut h] = [(); 5].map(|_| vec![0.0; cap]);
    for chunk in points.chunks(CHUNK) {
        let n = chunk.len();
        let x: Vec<f64> = chunk.iter().flatten().copied().collect();
        let nw = n * w;
        let (s, z, g, r, h) = (&mut s[..nw], &mut z[..nw], &mut g[..nw], &mut r[..nw], &mut h[..nw]);
        dense(&x, n, d, &v[lay.input_w..], w, 0.0, s);
        bias_tanh(s, &v[lay.input_b..lay.input_b + w]);
        for [og, oz, or, oh] in &lay.gates {
            for (o, buf) in [(oz, &mut *z), (og, &mut *g), (or, &mut *r)] {
                dense(&x, n, d, &v[o.u..], w, 0.0, buf);
                dense(s, n, w, &v[o.w..], w, 1.0, buf);
                bias_tanh(buf, &v[o.b..o.b + w]);
            }
            // r <- s * r, then h from it.
            for (ri, si) in r.iter_mut().zip(s.iter()) {
                *ri *= si;
            }
            dense(&x, n, d, &v[oh.u..], w, 0.0, h);
            dense(r, n, w, &v[oh.w..], w, 1.0, h);
            bias_tanh(h, &v[oh.b..oh.b + w]);
            for i in 0..nw {
                s[i] = (1.0 - g[i]) * h[i] + z[i] * s[i];
            }
        }
        let wo = &v[lay.output_w..lay.output_w + w];
        let bo = v[lay.output_b];
        out.extend(s.chunks_exact(w).map(|row| {
            bo + row.iter().zip(wo).map(|(a, b)| a * b).sum::<f64>()
        }));
    }
    out
}
