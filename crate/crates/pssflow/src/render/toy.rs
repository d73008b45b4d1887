//! Analytic validation targets standing in for path throughput.
//!
//! Each target is a nonnegative density on the unit cube with its
//! normalization constant computed by quadrature at construction, so tests
//! can compare learned densities against exact values.

use crate::{Error, Result};
use std::f64::consts::PI;

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on P_n over [-1, 1], then affine map to [0, 1].
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // evaluate P_n and P_n' by recurrence
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=n {
            let k = k as f64;
            let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        nodes[i] = 0.5 * (1.0 - x); // cos ordering descends; mapped to [0,1]
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    Mixture2d,
    Checkerboard2d,
    Mixture5d,
}

impl ToyKind {
    pub fn parse(name: &str) -> Option<ToyKind> {
        match name {
            "mixture2d" => Some(ToyKind::Mixture2d),
            "checkerboard2d" => Some(ToyKind::Checkerboard2d),
            "mixture5d" => Some(ToyKind::Mixture5d),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToyKind::Mixture2d => "mixture2d",
            ToyKind::Checkerboard2d => "checkerboard2d",
            ToyKind::Mixture5d => "mixture5d",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ToyKind::Mixture2d | ToyKind::Checkerboard2d => 2,
            ToyKind::Mixture5d => 5,
        }
    }
}

/// Two isotropic Gaussians, truncated to the unit square.
pub const MIX2D_WEIGHTS: [f64; 2] = [0.5, 0.5];
pub const MIX2D_MEANS: [[f64; 2]; 2] = [[0.3, 0.35], [0.7, 0.65]];
pub const MIX2D_SIGMAS: [f64; 2] = [0.12, 0.15];

/// Two isotropic Gaussians in five dimensions, truncated to the cube.
pub const MIX5D_WEIGHTS: [f64; 2] = [0.5, 0.5];
pub const MIX5D_MEANS: [f64; 2] = [0.32, 0.68];
pub const MIX5D_SIGMAS: [f64; 2] = [0.16, 0.19];

pub const CHECKER_CELLS: usize = 4;

fn gaussian_1d(t: f64, mu: f64, sigma: f64) -> f64 {
    let d = (t - mu) / sigma;
    (-0.5 * d * d).exp() / (sigma * (2.0 * PI).sqrt())
}

fn mix2d_unnormalized(y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..2 {
        acc += MIX2D_WEIGHTS[i]
            * gaussian_1d(y[0], MIX2D_MEANS[i][0], MIX2D_SIGMAS[i])
            * gaussian_1d(y[1], MIX2D_MEANS[i][1], MIX2D_SIGMAS[i]);
    }
    acc
}

fn mix5d_unnormalized(y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..2 {
        let mut term = MIX5D_WEIGHTS[i];
        for &t in y {
            term *= gaussian_1d(t, MIX5D_MEANS[i], MIX5D_SIGMAS[i]);
        }
        acc += term;
    }
    acc
}

fn checker_unnormalized(y: &[f64]) -> f64 {
    let k = CHECKER_CELLS as f64;
    let ix = ((y[0] * k) as usize).min(CHECKER_CELLS - 1);
    let iy = ((y[1] * k) as usize).min(CHECKER_CELLS - 1);
    if (ix + iy) % 2 == 0 {
        1.0
    } else {
        0.0
    }
}

/// A toy target with its normalization fixed at construction.
#[derive(Clone, Debug)]
pub struct ToyDensity {
    kind: ToyKind,
    norm: f64,
}

impl ToyDensity {
    pub fn new(kind: ToyKind) -> Self {
        let norm = match kind {
            ToyKind::Mixture2d => {
                // 2-D tensor-product Gauss-Legendre of the truncated mixture
                let (xs, ws) = gauss_legendre_unit(64);
                let mut z = 0.0;
                for (i, &x) in xs.iter().enumerate() {
                    for (j, &y) in xs.iter().enumerate() {
                        z += ws[i] * ws[j] * mix2d_unnormalized(&[x, y]);
                    }
                }
                z
            }
            ToyKind::Mixture5d => {
                // isotropic and axis-aligned: the cube integral separates
                // into per-axis 1-D quadratures
                let (xs, ws) = gauss_legendre_unit(64);
                let mut z = 0.0;
                for i in 0..2 {
                    let mass_1d: f64 = xs
                        .iter()
                        .zip(&ws)
                        .map(|(&x, &w)| w * gaussian_1d(x, MIX5D_MEANS[i], MIX5D_SIGMAS[i]))
                        .sum();
                    z += MIX5D_WEIGHTS[i] * mass_1d.powi(5);
                }
                z
            }
            ToyKind::Checkerboard2d => {
                // piecewise constant: the on-cell count is exact
                let on = (0..CHECKER_CELLS * CHECKER_CELLS)
                    .filter(|g| (g / CHECKER_CELLS + g % CHECKER_CELLS) % 2 == 0)
                    .count();
                on as f64 / (CHECKER_CELLS * CHECKER_CELLS) as f64
            }
        };
        ToyDensity { kind, norm }
    }

    pub fn kind(&self) -> ToyKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    /// Normalized density at a cube point.
    pub fn density(&self, y: &[f64]) -> f64 {
        let un = match self.kind {
            ToyKind::Mixture2d => mix2d_unnormalized(y),
            ToyKind::Mixture5d => mix5d_unnormalized(y),
            ToyKind::Checkerboard2d => checker_unnormalized(y),
        };
        un / self.norm
    }

    /// Differential entropy `-E[ln p]` of the normalized density, by
    /// quadrature (2-D targets only).
    pub fn entropy(&self) -> Result<f64> {
        if self.kind != ToyKind::Mixture2d {
            return Err(Error::invalid("ToyDensity::entropy", "only the 2-D mixture is supported"));
        }
        let (xs, ws) = gauss_legendre_unit(128);
        let mut h = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            for (j, &y) in xs.iter().enumerate() {
                let p = self.density(&[x, y]);
                if p > 0.0 {
                    h -= ws[i] * ws[j] * p * p.ln();
                }
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (xs, ws) = gauss_legendre_unit(8);
        assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        // x^5 over [0,1] = 1/6
        let v: f64 = xs.iter().zip(&ws).map(|(&x, &w)| w * x.powi(5)).sum();
        assert!((v - 1.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn toy_densities_integrate_to_one() {
        // independent oracle: midpoint rule on a fine grid
        for kind in [ToyKind::Mixture2d, ToyKind::Checkerboard2d] {
            let toy = ToyDensity::new(kind);
            let n = 800;
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let y = [(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64];
                    acc += toy.density(&y);
                }
            }
            acc /= (n * n) as f64;
            assert!((acc - 1.0).abs() < 1e-6, "{:?} integrates to {}", kind, acc);
        }
        // 5-D: separable midpoint oracle per axis
        let toy = ToyDensity::new(ToyKind::Mixture5d);
        let n = 4000;
        let mut z = 0.0;
        for c in 0..2 {
            let m: f64 = (0..n)
                .map(|i| gaussian_1d((i as f64 + 0.5) / n as f64, MIX5D_MEANS[c], MIX5D_SIGMAS[c]))
                .sum::<f64>()
                / n as f64;
            z += MIX5D_WEIGHTS[c] * m.powi(5);
        }
        let probe = [0.32; 5];
        let expect = mix5d_unnormalized(&probe) / z;
        assert!((toy.density(&probe) / expect - 1.0).abs() < 1e-6);
    }

    #[test]
    fn checkerboard_off_cells_are_zero() {
        let toy = ToyDensity::new(ToyKind::Checkerboard2d);
        // cell (0,1) is off
        assert_eq!(toy.density(&[0.1, 0.3]), 0.0);
        // on-cells carry density 2 for a 4x4 board
        assert!((toy.density(&[0.1, 0.1]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mixture_peak_value_is_frozen() {
        let toy = ToyDensity::new(ToyKind::Mixture2d);
        // at the first mode center: w1 * N(0) * N(0) / Z + cross term, with
        // the value pinned by an independent evaluation
        let at_mode = toy.density(&MIX2D_MEANS[0]);
        let direct = mix2d_unnormalized(&MIX2D_MEANS[0]);
        let n = 1200;
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                z += mix2d_unnormalized(&[(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64]);
            }
        }
        z /= (n * n) as f64;
        assert!((at_mode - direct / z).abs() < 1e-6 * at_mode);
        // frozen from the closed-form erf truncation-mass oracle
        assert!((at_mode - 5.653863951).abs() < 1e-6, "mode density {}", at_mode);
    }

    #[test]
    fn entropy_matches_coarse_oracle() {
        let toy = ToyDensity::new(ToyKind::Mixture2d);
        let h = toy.entropy().unwrap();
        let n = 1500;
        let mut href = 0.0;
        for i in 0..n {
            for j in 0..n {
                let p = toy.density(&[(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64]);
                if p > 0.0 {
                    href -= p * p.ln() / (n * n) as f64;
                }
            }
        }
        assert!((h - href).abs() < 1e-4, "{} vs {}", h, href);
    }
}
