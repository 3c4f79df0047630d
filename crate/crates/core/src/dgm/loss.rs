//! The two-term loss, its parameter gradient and the batch samplers.

use rand::Rng as _;

use super::batch::{self, BoundParams};
use super::network::NetworkParams;
use super::tape::{Mat, Tape};
use super::Equation;
use crate::error::{Error, Result};
use crate::pide::{NormalizedPoint, Stencil, A_MIN};
use crate::rng::{child_rng, Stream};

/// Points per tape in the gradient pass; bounds memory.
const CHUNK: usize = 32;

/// `B` points uniform on `[0,1]^2 x [A_MIN,1] x [0,1]^2`.
pub fn sample_interior(b: usize, seed: u64) -> Vec<NormalizedPoint> {
    let mut rng = child_rng(seed, Stream::Interior, 0);
    (0..b)
        .map(|_| {
            let s = rng.gen::<f64>();
            let x = rng.gen::<f64>();
            let a = rng.gen_range(A_MIN..=1.0);
            let bb = rng.gen::<f64>();
            let c = rng.gen::<f64>();
            [s, x, a, bb, c]
        })
        .collect()
}

/// `B` points with `s = 1` and the rest uniform on the same box.
pub fn sample_terminal(b: usize, seed: u64) -> Vec<NormalizedPoint> {
    let mut rng = child_rng(seed, Stream::Terminal, 0);
    (0..b)
        .map(|_| {
            let x = rng.gen::<f64>();
            let a = rng.gen_range(A_MIN..=1.0);
            let bb = rng.gen::<f64>();
            let c = rng.gen::<f64>();
            [1.0, x, a, bb, c]
        })
        .collect()
}

fn divergence(what: &str, q: &NormalizedPoint) -> Error {
    Error::Divergence {
        iteration: 0,
        reason: format!("non-finite {what} at point {q:?}"),
    }
}

/// Loss by point-wise evaluation. Independent of the tape; used as the
/// reference in gradient checks and for reporting.
pub fn loss<E: Equation + ?Sized>(
    net: &NetworkParams,
    interior: &[NormalizedPoint],
    terminal: &[NormalizedPoint],
    eq: &E,
) -> Result<f64> {
    if interior.is_empty() || terminal.is_empty() {
        return Err(Error::domain("loss needs non-empty batches"));
    }
    let mut ri = 0.0;
    for q in interior {
        let st = eq.stencil(q);
        let (u, u_s) = net.time_derivative(q);
        let jumps: Vec<f64> = st.jumps.iter().map(|(p, _)| net.forward(p)).collect();
        let control = st.control.as_ref().map(|c| net.forward(&c.target));
        let r = st.residual(u, u_s, &jumps, control);
        if !r.is_finite() {
            return Err(divergence("residual", q));
        }
        ri += r * r;
    }
    let mut rt = 0.0;
    for q in terminal {
        let m = net.forward(q) - eq.terminal(q);
        if !m.is_finite() {
            return Err(divergence("terminal mismatch", q));
        }
        rt += m * m;
    }
    Ok(ri / interior.len() as f64 + rt / terminal.len() as f64)
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_gradient<E: Equation + ?Sized>(
    net: &NetworkParams,
    interior: &[NormalizedPoint],
    terminal: &[NormalizedPoint],
    eq: &E,
) -> Result<(f64, Vec<f64>)> {
    if interior.is_empty() || terminal.is_empty() {
        return Err(Error::domain("loss needs non-empty batches"));
    }
    let mut grad = vec![0.0; net.len()];
    let mut total = 0.0;
    let bi = interior.len() as f64;
    for chunk in interior.chunks(CHUNK) {
        total += interior_chunk(net, chunk, eq, bi, &mut grad)?;
    }
    let bt = terminal.len() as f64;
    for chunk in terminal.chunks(CHUNK * 4) {
        total += terminal_chunk(net, chunk, eq, bt, &mut grad)?;
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            iteration: 0,
            reason: format!("non-finite gradient component {i}"),
        });
    }
    Ok((total, grad))
}

fn interior_chunk<E: Equation + ?Sized>(
    net: &NetworkParams,
    chunk: &[NormalizedPoint],
    eq: &E,
    b: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let stencils: Vec<Stencil> = chunk.iter().map(|q| eq.stencil(q)).collect();
    let mut targets: Vec<NormalizedPoint> = Vec::new();
    for st in &stencils {
        targets.extend(st.jumps.iter().map(|(p, _)| *p));
        if let Some(c) = &st.control {
            targets.push(c.target);
        }
    }

    let mut tape = Tape::new();
    let params = BoundParams::bind(&mut tape, net, true);
    let x = tape.constant(batch::points_matrix(chunk));
    let (u, du) = batch::forward_with_time_derivative(&mut tape, &params, x);
    let ut = (!targets.is_empty()).then(|| {
        let xt = tape.constant(batch::points_matrix(&targets));
        batch::forward(&mut tape, &params, xt)
    });

    let uv = &tape.value(u).data;
    let duv = &tape.value(du).data;
    let utv: &[f64] = ut.map_or(&[], |v| &tape.value(v).data);

    let mut seed_u = Mat::zeros(chunk.len(), 1);
    let mut seed_du = Mat::zeros(chunk.len(), 1);
    let mut seed_t = Mat::zeros(targets.len(), 1);
    let mut sum = 0.0;
    let mut row = 0;
    for (i, st) in stencils.iter().enumerate() {
        let n = st.jumps.len();
        let jumps = &utv[row..row + n];
        let uc = st.control.as_ref().map(|_| utv[row + n]);
        let r = st.residual(uv[i], duv[i], jumps, uc);
        if !r.is_finite() {
            return Err(divergence("residual", &chunk[i]));
        }
        sum += r * r;
        let g = 2.0 * r / b;
        seed_du.data[i] = g * st.dt_weight;
        let mut du0 = 0.0;
        for (k, (_, w)) in st.jumps.iter().enumerate() {
            seed_t.data[row + k] = g * w;
            du0 -= w;
        }
        if let (Some(c), Some(uc)) = (&st.control, uc) {
            let m = (c.reward + uc - uv[i]).max(0.0);
            let dm = c.weight * 2.0 * m;
            seed_t.data[row + n] = g * dm;
            du0 -= dm;
            row += 1;
        }
        seed_u.data[i] = g * du0;
        row += n;
    }

    let mut seeds = vec![(u, seed_u), (du, seed_du)];
    if let Some(v) = ut {
        seeds.push((v, seed_t));
    }
    let adj = tape.backward(seeds);
    params.gather(net, &adj, grad);
    Ok(sum / b)
}

fn terminal_chunk<E: Equation + ?Sized>(
    net: &NetworkParams,
    chunk: &[NormalizedPoint],
    eq: &E,
    b: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = BoundParams::bind(&mut tape, net, true);
    let x = tape.constant(batch::points_matrix(chunk));
    let u = batch::forward(&mut tape, &params, x);
    let mut seed = Mat::zeros(chunk.len(), 1);
    let mut sum = 0.0;
    for (i, (q, ui)) in chunk.iter().zip(&tape.value(u).data).enumerate() {
        let m = ui - eq.terminal(q);
        if !m.is_finite() {
            return Err(divergence("terminal mismatch", q));
        }
        sum += m * m;
        seed.data[i] = 2.0 * m / b;
    }
    let adj = tape.backward(vec![(u, seed)]);
    params.gather(net, &adj, grad);
    Ok(sum / b)
}
