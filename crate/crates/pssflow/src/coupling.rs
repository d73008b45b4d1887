//! Bijective affine coupling layers and the cube boundary wrapper.
//!
//! A coupling layer copies the masked half of its input and maps the rest
//! through `z * exp(s) + t`, where s and t are functions of the copied half.
//! The Jacobian is triangular, so its log-determinant is just the row sum of
//! s, and the inverse is closed form. The wrapper moves the unit cube into
//! unconstrained space with a linear squeeze and a logit, and back with the
//! inverse pair, so the stack in between never sees a boundary.

use crate::admath::{Array2, NodeId, Tape};
use crate::nnet::{BatchStats, StNetwork};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;

/// Clamp distance from the cube faces; wrap-in inputs and wrap-out outputs
/// are kept at least this far inside.
pub const EPS_BOUNDARY: f64 = 1e-6;

/// Default linear-squeeze padding of the wrapper.
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Binary coordinate mask: `1` bits pass through a coupling layer unchanged
/// and feed the s/t networks, `0` bits get transformed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        let ones = bits.iter().filter(|&&b| b).count();
        if ones == 0 || ones == bits.len() {
            return Err(Error::invalid(
                "Mask::new",
                "mask needs at least one set and one clear bit",
            ));
        }
        Ok(Mask { bits })
    }

    /// Ones at even positions (0, 2, ...).
    pub fn even(dim: usize) -> Result<Self> {
        Mask::new((0..dim).map(|i| i % 2 == 0).collect())
    }

    /// Ones at odd positions (1, 3, ...).
    pub fn odd(dim: usize) -> Result<Self> {
        Mask::new((0..dim).map(|i| i % 2 == 1).collect())
    }

    /// The alternating even/odd schedule for a stack of `n_layers`.
    pub fn alternating(dim: usize, n_layers: usize) -> Result<Vec<Self>> {
        (0..n_layers)
            .map(|k| if k % 2 == 0 { Mask::even(dim) } else { Mask::odd(dim) })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Indices of the pass-through half.
    pub fn ones(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Indices of the transformed half.
    pub fn zeros(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }
}

fn select(a: &Array2, idx: &[usize]) -> Array2 {
    let mut out = Array2::zeros(a.rows(), idx.len());
    for r in 0..a.rows() {
        let src = a.row(r);
        for (dst, &i) in out.row_mut(r).iter_mut().zip(idx) {
            *dst = src[i];
        }
    }
    out
}

/// One bijective building block: a mask plus its scale/translation networks.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    mask: Mask,
    ones_idx: Vec<usize>,
    zeros_idx: Vec<usize>,
    pub net: StNetwork,
}

impl CouplingLayer {
    pub fn new(mask: Mask, hidden: usize, blocks: usize, s_max: f64, rng: &mut ChaCha8Rng) -> Self {
        let ones_idx = mask.ones();
        let zeros_idx = mask.zeros();
        let net = StNetwork::new(ones_idx.len(), zeros_idx.len(), hidden, blocks, s_max, rng);
        CouplingLayer { mask, ones_idx, zeros_idx, net }
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn dim(&self) -> usize {
        self.mask.dim()
    }

    fn check_cols(&self, z: &Array2, op: &'static str) -> Result<()> {
        if z.cols() != self.dim() {
            return Err(Error::shape(
                op,
                format!("expected {} columns, got {}", self.dim(), z.cols()),
            ));
        }
        Ok(())
    }

    fn assemble(&self, kept: &Array2, transformed: &Array2) -> Array2 {
        let mut out = Array2::zeros(kept.rows(), self.dim());
        for r in 0..kept.rows() {
            let k = kept.row(r);
            let t = transformed.row(r);
            let dst = out.row_mut(r);
            for (v, &i) in k.iter().zip(&self.ones_idx) {
                dst[i] = *v;
            }
            for (v, &i) in t.iter().zip(&self.zeros_idx) {
                dst[i] = *v;
            }
        }
        out
    }

    /// `z' = (z1, z0 * exp(s(z1)) + t(z1))`; per-row log-determinant is the
    /// row sum of s.
    pub fn forward(&self, z: &Array2) -> Result<(Array2, Vec<f64>)> {
        self.check_cols(z, "couple_forward")?;
        let z1 = select(z, &self.ones_idx);
        let z0 = select(z, &self.zeros_idx);
        let (s, t) = self.net.eval(&z1)?;
        let mut z0p = Array2::zeros(z0.rows(), z0.cols());
        let mut logdet = vec![0.0; z.rows()];
        for r in 0..z0.rows() {
            let mut ld = 0.0;
            for c in 0..z0.cols() {
                z0p[(r, c)] = z0[(r, c)] * s[(r, c)].exp() + t[(r, c)];
                ld += s[(r, c)];
            }
            logdet[r] = ld;
        }
        Ok((self.assemble(&z1, &z0p), logdet))
    }

    /// Exact algebraic inverse; the returned log-determinant is of the
    /// inverse map, i.e. the negated row sum of s on the unchanged half.
    pub fn inverse(&self, zp: &Array2) -> Result<(Array2, Vec<f64>)> {
        self.check_cols(zp, "couple_inverse")?;
        let z1 = select(zp, &self.ones_idx);
        let z0p = select(zp, &self.zeros_idx);
        let (s, t) = self.net.eval(&z1)?;
        let mut z0 = Array2::zeros(z0p.rows(), z0p.cols());
        let mut logdet = vec![0.0; zp.rows()];
        for r in 0..z0.rows() {
            let mut ld = 0.0;
            for c in 0..z0.cols() {
                z0[(r, c)] = (z0p[(r, c)] - t[(r, c)]) * (-s[(r, c)]).exp();
                ld -= s[(r, c)];
            }
            logdet[r] = ld;
        }
        Ok((self.assemble(&z1, &z0), logdet))
    }

    /// Differentiable inverse on a tape (the direction maximum likelihood
    /// trains through). Returns the output node, the per-row log-determinant
    /// (`n x 1`), and the batch statistics of both towers.
    pub fn tape_inverse(
        &self,
        tape: &mut Tape,
        zp: NodeId,
        pids: &[NodeId],
    ) -> Result<(NodeId, NodeId, BatchStats, BatchStats)> {
        let z1 = tape.select_cols(zp, &self.ones_idx)?;
        let z0p = tape.select_cols(zp, &self.zeros_idx)?;
        let (s, t, s_stats, t_stats) = self.net.tape_eval(tape, z1, pids)?;
        let diff = tape.sub(z0p, t)?;
        let neg_s = tape.neg(s)?;
        let scale = tape.exp(neg_s)?;
        let z0 = tape.mul(diff, scale)?;
        let kept = tape.scatter_cols(z1, &self.ones_idx, self.dim())?;
        let moved = tape.scatter_cols(z0, &self.zeros_idx, self.dim())?;
        let z = tape.add(kept, moved)?;
        let logdet = tape.sum_cols(neg_s)?;
        Ok((z, logdet, s_stats, t_stats))
    }
}

/// Maps the open unit cube to unconstrained space: a linear squeeze into
/// `[alpha, 1 - alpha]` followed by a logit, and the inverse pair back.
#[derive(Clone, Copy, Debug)]
pub struct CubeWrapper {
    alpha: f64,
}

impl CubeWrapper {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::invalid(
                "CubeWrapper::new",
                format!("padding {} outside (0, 0.5)", alpha),
            ));
        }
        Ok(CubeWrapper { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn squeeze(&self) -> f64 {
        1.0 - 2.0 * self.alpha
    }

    /// Cube to unconstrained space. Inputs must lie in the closed cube; they
    /// are clamped to `[EPS_BOUNDARY, 1 - EPS_BOUNDARY]` before the logit.
    pub fn wrap_in(&self, x: &Array2) -> Result<(Array2, Vec<f64>)> {
        if x.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("wrap_in", "input outside the closed unit cube"));
        }
        let k = self.squeeze();
        let ln_k = k.ln();
        let mut u = Array2::zeros(x.rows(), x.cols());
        let mut logdet = vec![0.0; x.rows()];
        for r in 0..x.rows() {
            let mut ld = 0.0;
            for c in 0..x.cols() {
                let xc = x[(r, c)].clamp(EPS_BOUNDARY, 1.0 - EPS_BOUNDARY);
                let sig = self.alpha + k * xc;
                u[(r, c)] = (sig / (1.0 - sig)).ln();
                ld += ln_k - sig.ln() - (1.0 - sig).ln();
            }
            logdet[r] = ld;
        }
        Ok((u, logdet))
    }

    /// Unconstrained space back onto the cube, clamped just inside; total on
    /// any finite input.
    pub fn wrap_out(&self, u: &Array2) -> Result<(Array2, Vec<f64>)> {
        u.check_finite("wrap_out")?;
        let k = self.squeeze();
        let ln_k = k.ln();
        let mut x = Array2::zeros(u.rows(), u.cols());
        let mut logdet = vec![0.0; u.rows()];
        for r in 0..u.rows() {
            let mut ld = 0.0;
            for c in 0..u.cols() {
                let uv = u[(r, c)];
                let sig = if uv >= 0.0 {
                    1.0 / (1.0 + (-uv).exp())
                } else {
                    let e = uv.exp();
                    e / (1.0 + e)
                };
                x[(r, c)] = ((sig - self.alpha) / k).clamp(EPS_BOUNDARY, 1.0 - EPS_BOUNDARY);
                // ln(sig) + ln(1-sig), without overflow for large |u|
                let t = uv.abs();
                ld += -t - 2.0 * (-t).exp().ln_1p() - ln_k;
            }
            logdet[r] = ld;
        }
        Ok((x, logdet))
    }

    /// Tape version of [`CubeWrapper::wrap_in`]; returns `(u, per-row logdet)`.
    pub fn tape_wrap_in(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        let k = self.squeeze();
        let scaled = tape.scale(x, k)?;
        let sig = tape.add_scalar(scaled, self.alpha)?;
        let u = tape.logit(sig)?;
        let lss = tape.log_sigmoid_sym(u)?;
        let neg = tape.neg(lss)?;
        let per_dim = tape.add_scalar(neg, k.ln())?;
        let logdet = tape.sum_cols(per_dim)?;
        Ok((u, logdet))
    }

    /// Per-row log-determinant of [`CubeWrapper::wrap_out`] on a tape; the
    /// mapped value itself is not needed when training the inverse warp.
    pub fn tape_wrap_out_logdet(&self, tape: &mut Tape, u: NodeId) -> Result<NodeId> {
        let lss = tape.log_sigmoid_sym(u)?;
        let per_dim = tape.add_scalar(lss, -self.squeeze().ln())?;
        tape.sum_cols(per_dim)
    }
}

/// Clamp every coordinate to `[EPS_BOUNDARY, 1 - EPS_BOUNDARY]`.
pub fn clamp_unit(x: &Array2) -> Array2 {
    x.map(|v| v.clamp(EPS_BOUNDARY, 1.0 - EPS_BOUNDARY))
}
