//! Minimal reverse-mode automatic differentiation over dense row-major
//! matrices.
//!
//! Each operation appends a node holding its value; [`Tape::backward`] walks
//! the nodes in reverse and accumulates adjoints. Nodes built from constants
//! only never receive adjoints.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        Self { rows, cols, data }
    }

    fn same_shape(&self, o: &Mat) -> bool {
        self.rows == o.rows && self.cols == o.cols
    }
}

/// `c = beta c + a * b` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every access stays inside the slices: `a` spans m x k with the
    // given strides, `b` spans k x n, and `c` is a dense m x n block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a * w^T`, with `a: n x k` and `w: m x k`.
pub fn matmul_t(a: &Mat, w: &Mat) -> Mat {
    assert_eq!(a.cols, w.cols, "inner dimensions");
    let mut c = Mat::zeros(a.rows, w.rows);
    gemm(
        a.rows,
        a.cols,
        w.rows,
        &a.data,
        a.cols as isize,
        1,
        &w.data,
        1,
        w.cols as isize,
        0.0,
        &mut c.data,
    );
    c
}

/// `exp(y)` for `y` in `[0, 40]`: Cody-Waite reduction by `ln 2`, a
/// degree-13 polynomial, and `2^k` assembled from bits. Branch-free so the
/// slice loop below vectorises.
#[inline(always)]
fn exp_bounded(y: f64) -> f64 {
    const MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let shifted = y * std::f64::consts::LOG2_E + MAGIC;
    let k = shifted - MAGIC;
    let r = (y - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let bits = (shifted.to_bits() & 0x7ff).wrapping_add(1023) << 52;
    p * f64::from_bits(bits)
}

/// `tanh` through one bounded `exp`, with a series near zero to keep
/// relative accuracy; agrees with libm to a few ulp.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let ax = x.abs();
    let e = exp_bounded((2.0 * ax).min(40.0));
    let big = 1.0 - 2.0 / (e + 1.0);
    let x2 = x * x;
    let small = ax * (1.0 - x2 * (1.0 / 3.0 - x2 * (2.0 / 15.0 - x2 * (17.0 / 315.0 - x2 * (62.0 / 2835.0)))));
    let t = if ax < 0.02 { small } else { big };
    // NaN propagates through `big`; copysign keeps odd symmetry.
    if x.is_nan() {
        x
    } else {
        t.copysign(x)
    }
}

fn tanh_slice_generic(xs: &mut [f64]) {
    for x in xs {
        *x = tanh(*x);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tanh_slice_avx2(xs: &mut [f64]) {
    tanh_slice_generic(xs)
}

/// Element-wise [`tanh`]. Uses wider vectors when the CPU has them; no fused
/// multiply-add is enabled, so results are identical on either path.
pub fn tanh_in_place(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at run time.
            unsafe { tanh_slice_avx2(xs) };
            return;
        }
    }
    tanh_slice_generic(xs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the adjoint vector.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    OneMinus(Var),
    /// `1 - y^2` for a tanh output `y`.
    TanhSlope(Var),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf whose adjoint is wanted.
    pub fn parameter(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul_t(&mut self, a: Var, w: Var) -> Var {
        let value = matmul_t(self.value(a), self.value(w));
        let tracked = self.tracked(a) || self.tracked(w);
        self.push(value, Op::MatMulT(a, w), tracked)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows, 1);
        assert_eq!(bv.cols, av.cols);
        let mut value = av.clone();
        for row in value.data.chunks_exact_mut(av.cols) {
            for (x, y) in row.iter_mut().zip(&bv.data) {
                *x += y;
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::AddBias(a, b), tracked)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv), "shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let value = Mat::from_vec(av.rows, av.cols, data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|x| f(*x)).collect();
        let value = Mat::from_vec(av.rows, av.cols, data);
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        tanh_in_place(&mut value.data);
        let tracked = self.tracked(a);
        self.push(value, Op::Tanh(a), tracked)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, Op::OneMinus(a), |x| 1.0 - x)
    }

    pub fn tanh_slope(&mut self, y: Var) -> Var {
        self.map(y, Op::TanhSlope(y), |x| 1.0 - x * x)
    }

    /// Reverse sweep from the given seeds. Returns the adjoint of every
    /// tracked node that was reached.
    pub fn backward(&self, seeds: Vec<(Var, Mat)>) -> Vec<Option<Mat>> {
        let mut adj: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert!(self.value(v).same_shape(&g), "seed shape");
            accumulate(&mut adj[v.0], &g);
        }

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::MatMulT(a, w) => {
                    let (av, wv) = (self.value(a), self.value(w));
                    if self.tracked(a) {
                        // da += g * w, (n x m)(m x k)
                        let slot = adj[a.0].get_or_insert_with(|| Mat::zeros(av.rows, av.cols));
                        gemm(
                            g.rows,
                            g.cols,
                            wv.cols,
                            &g.data,
                            g.cols as isize,
                            1,
                            &wv.data,
                            wv.cols as isize,
                            1,
                            1.0,
                            &mut slot.data,
                        );
                    }
                    if self.tracked(w) {
                        // dw += g^T * a, (m x n)(n x k)
                        let slot = adj[w.0].get_or_insert_with(|| Mat::zeros(wv.rows, wv.cols));
                        gemm(
                            g.cols,
                            g.rows,
                            av.cols,
                            &g.data,
                            1,
                            g.cols as isize,
                            &av.data,
                            av.cols as isize,
                            1,
                            1.0,
                            &mut slot.data,
                        );
                    }
                }
                Op::AddBias(a, b) => {
                    if self.tracked(b) {
                        let mut sums = Mat::zeros(1, g.cols);
                        for row in g.data.chunks_exact(g.cols) {
                            for (s, x) in sums.data.iter_mut().zip(row) {
                                *s += x;
                            }
                        }
                        accumulate(&mut adj[b.0], &sums);
                    }
                    if self.tracked(a) {
                        accumulate_owned(&mut adj[a.0], g);
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(a) {
                        accumulate(&mut adj[a.0], &g);
                    }
                    if self.tracked(b) {
                        accumulate_owned(&mut adj[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.tracked(a) {
                        accumulate(&mut adj[a.0], &g);
                    }
                    if self.tracked(b) {
                        accumulate_scaled(&mut adj[b.0], &g, |x, _| -x, &g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.tracked(a) {
                        accumulate_scaled(&mut adj[a.0], &g, |x, y| x * y, self.value(b));
                    }
                    if self.tracked(b) {
                        accumulate_scaled(&mut adj[b.0], &g, |x, y| x * y, self.value(a));
                    }
                }
                Op::Tanh(a) => {
                    accumulate_scaled(&mut adj[a.0], &g, |x, y| x * (1.0 - y * y), &node.value);
                }
                Op::OneMinus(a) => {
                    accumulate_scaled(&mut adj[a.0], &g, |x, _| -x, &g);
                }
                Op::TanhSlope(y) => {
                    accumulate_scaled(&mut adj[y.0], &g, |x, y| -2.0 * x * y, self.value(y));
                }
            }
        }
        adj
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn accumulate(slot: &mut Option<Mat>, g: &Mat) {
    match slot {
        Some(m) => {
            for (x, y) in m.data.iter_mut().zip(&g.data) {
                *x += y;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

fn accumulate_owned(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(m) => {
            for (x, y) in m.data.iter_mut().zip(&g.data) {
                *x += y;
            }
        }
        None => *slot = Some(g),
    }
}

/// `slot += f(g, other)` element-wise.
fn accumulate_scaled(slot: &mut Option<Mat>, g: &Mat, f: impl Fn(f64, f64) -> f64, other: &Mat) {
    match slot {
        Some(m) => {
            for ((x, gi), oi) in m.data.iter_mut().zip(&g.data).zip(&other.data) {
                *x += f(*gi, *oi);
            }
        }
        None => {
            let data = g.data.iter().zip(&other.data).map(|(gi, oi)| f(*gi, *oi)).collect();
            *slot = Some(Mat::from_vec(g.rows, g.cols, data));
        }
    }
}
