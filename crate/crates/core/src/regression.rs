//! Cross-sectional least-squares estimation of conditional expectations
//! `E[target | X = x]`, projecting on a small basis of functions of the
//! feature. Normal equations with a symmetric eigendecomposition; rank
//! deficiency falls back to the minimum-norm solution.

use rayon::prelude::*;

use crate::error::{Error, Result};

const CHUNK: usize = 8192;
const RANK_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BasisKind {
    Polynomial { degree: usize },
    LocalPartition { cells: usize },
}

impl BasisKind {
    pub fn dimension(&self) -> usize {
        match *self {
            BasisKind::Polynomial { degree } => degree + 1,
            BasisKind::LocalPartition { cells } => cells,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BasisSpec {
    pub kind: BasisKind,
    /// Explicit clipping range; `None` uses the empirical 0.01%-99.99%
    /// feature quantiles at fit time. The guard keeps heavy jump tails from
    /// destabilizing high-degree monomials; anything tighter measurably
    /// attenuates the state-dependence of nested projections (the fitted
    /// function goes flat past the clip, and the backward recursion compounds
    /// that loss across nodes).
    pub clip: Option<(f64, f64)>,
}

impl BasisSpec {
    pub fn polynomial(degree: usize) -> Self {
        BasisSpec {
            kind: BasisKind::Polynomial { degree },
            clip: None,
        }
    }

    pub fn local_partition(cells: usize) -> Self {
        BasisSpec {
            kind: BasisKind::LocalPartition { cells },
            clip: None,
        }
    }

    pub fn dimension(&self) -> usize {
        self.kind.dimension()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            BasisKind::Polynomial { degree } => degree <= 15,
            BasisKind::LocalPartition { cells } => (1..=16).contains(&cells),
        };
        if !ok {
            return Err(Error::Config(format!(
                "basis dimension out of range: {self:?}"
            )));
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo < hi) {
                return Err(Error::Config(format!("bad clip range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Fitted conditional-expectation estimator. Immutable after `fit`.
#[derive(Clone, Debug)]
pub struct CondExpEstimator {
    pub kind: BasisKind,
    pub clip: (f64, f64),
    /// Feature standardization (polynomial basis): `x ~ (x - mean)/sd`.
    pub mean: f64,
    pub sd: f64,
    pub coefficients: Vec<f64>,
    pub sample_size: usize,
    /// `lambda_max / lambda_min` over the eigenvalues kept by the
    /// rank-revealing solve.
    pub condition: f64,
}

#[inline]
fn fill_basis(kind: BasisKind, clip: (f64, f64), mean: f64, sd: f64, x: f64, out: &mut [f64]) {
    let xc = x.clamp(clip.0, clip.1);
    match kind {
        BasisKind::Polynomial { degree } => {
            let z = (xc - mean) / sd;
            let mut pow = 1.0;
            for k in 0..=degree {
                out[k] = pow;
                pow *= z;
            }
        }
        BasisKind::LocalPartition { cells } => {
            let w = (clip.1 - clip.0) / cells as f64;
            let mut cell = ((xc - clip.0) / w) as usize;
            if cell >= cells {
                cell = cells - 1;
            }
            for v in out.iter_mut() {
                *v = 0.0;
            }
            out[cell] = 1.0;
        }
    }
}

fn quantile_bounds(features: &[f64]) -> (f64, f64) {
    let m = features.len();
    let mut buf: Vec<f64> = features.to_vec();
    let lo_idx = ((m as f64) * 1e-4) as usize;
    let hi_idx = (((m as f64) * (1.0 - 1e-4)) as usize).min(m - 1);
    let (_, lo, _) = buf.select_nth_unstable_by(lo_idx, |a, b| a.partial_cmp(b).unwrap());
    let lo = *lo;
    let (_, hi, _) = buf.select_nth_unstable_by(hi_idx, |a, b| a.partial_cmp(b).unwrap());
    let hi = *hi;
    if lo < hi {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major,
/// `dim <= 16`). Returns eigenvalues and column eigenvectors.
fn jacobi_eigh(a: &mut [f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; dim * dim];
    for i in 0..dim {
        v[i * dim + i] = 1.0;
    }
    let fro: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..dim {
            for q in (p + 1)..dim {
                off += a[p * dim + q] * a[p * dim + q];
            }
        }
        if off.sqrt() < 1e-15 * fro {
            break;
        }
        for p in 0..dim {
            for q in (p + 1)..dim {
                let apq = a[p * dim + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * dim + p];
                let aqq = a[q * dim + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..dim {
                    let akp = a[k * dim + p];
                    let akq = a[k * dim + q];
                    a[k * dim + p] = c * akp - s * akq;
                    a[k * dim + q] = s * akp + c * akq;
                }
                for k in 0..dim {
                    let apk = a[p * dim + k];
                    let aqk = a[q * dim + k];
                    a[p * dim + k] = c * apk - s * aqk;
                    a[q * dim + k] = s * apk + c * aqk;
                }
                for k in 0..dim {
                    let vkp = v[k * dim + p];
                    let vkq = v[k * dim + q];
                    v[k * dim + p] = c * vkp - s * vkq;
                    v[k * dim + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let evals = (0..dim).map(|i| a[i * dim + i]).collect();
    (evals, v)
}

/// Least-squares fit of `targets` on the basis evaluated at `features`.
pub fn fit(features: &[f64], targets: &[f64], basis: &BasisSpec) -> Result<CondExpEstimator> {
    basis.validate()?;
    let m = features.len();
    if m != targets.len() {
        return Err(Error::Config(format!(
            "feature/target length mismatch: {m} vs {}",
            targets.len()
        )));
    }
    let dim = basis.dimension();
    if m < 2 * dim {
        return Err(Error::SampleSize {
            got: m,
            min: 2 * dim,
            dim,
        });
    }
    if let Some(bad) = features
        .iter()
        .chain(targets.iter())
        .position(|v| !v.is_finite())
    {
        return Err(Error::NonFiniteInput(bad % m));
    }

    let clip = basis.clip.unwrap_or_else(|| quantile_bounds(features));
    let (mean, sd) = {
        let mut s = 0.0;
        for &x in features {
            s += x.clamp(clip.0, clip.1);
        }
        let mean = s / m as f64;
        let mut v = 0.0;
        for &x in features {
            let d = x.clamp(clip.0, clip.1) - mean;
            v += d * d;
        }
        let sd = (v / m as f64).sqrt();
        (mean, if sd > 1e-150 { sd } else { 1.0 })
    };

    // Gram and right-hand side accumulated over fixed-size blocks, reduced in
    // block order: output is independent of thread scheduling.
    let kind = basis.kind;
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = features
        .par_chunks(CHUNK)
        .zip(targets.par_chunks(CHUNK))
        .map(|(fx, ty)| {
            let mut g = vec![0.0; dim * dim];
            let mut b = vec![0.0; dim];
            let mut phi = vec![0.0; dim];
            for (&x, &y) in fx.iter().zip(ty.iter()) {
                fill_basis(kind, clip, mean, sd, x, &mut phi);
                for i in 0..dim {
                    let pi = phi[i];
                    b[i] += pi * y;
                    for j in i..dim {
                        g[i * dim + j] += pi * phi[j];
                    }
                }
            }
            (g, b)
        })
        .collect();

    let mut gram = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    for (g, b) in blocks {
        for i in 0..dim * dim {
            gram[i] += g[i];
        }
        for i in 0..dim {
            rhs[i] += b[i];
        }
    }
    for i in 0..dim {
        for j in 0..i {
            gram[i * dim + j] = gram[j * dim + i];
        }
    }

    let (evals, evecs) = jacobi_eigh(&mut gram.clone(), dim);
    let lam_max = evals.iter().cloned().fold(0.0_f64, f64::max);
    let mut coeffs = vec![0.0; dim];
    let mut lam_min_kept = f64::INFINITY;
    for k in 0..dim {
        let lam = evals[k];
        if lam > RANK_TOL * lam_max && lam > 0.0 {
            lam_min_kept = lam_min_kept.min(lam);
            let mut proj = 0.0;
            for i in 0..dim {
                proj += evecs[i * dim + k] * rhs[i];
            }
            let scale = proj / lam;
            for i in 0..dim {
                coeffs[i] += scale * evecs[i * dim + k];
            }
        }
    }
    let condition = if lam_min_kept.is_finite() && lam_min_kept > 0.0 {
        lam_max / lam_min_kept
    } else {
        f64::INFINITY
    };

    Ok(CondExpEstimator {
        kind,
        clip,
        mean,
        sd,
        coefficients: coeffs,
        sample_size: m,
        condition,
    })
}

impl CondExpEstimator {
    /// Estimator with explicit parts, for tests and terminal plumbing.
    pub fn from_parts(kind: BasisKind, clip: (f64, f64), coefficients: Vec<f64>) -> Self {
        CondExpEstimator {
            kind,
            clip,
            mean: 0.0,
            sd: 1.0,
            coefficients,
            sample_size: 0,
            condition: 1.0,
        }
    }

    #[inline]
    pub fn predict_one(&self, x: f64) -> f64 {
        match self.kind {
            BasisKind::Polynomial { degree } => {
                let z = (x.clamp(self.clip.0, self.clip.1) - self.mean) / self.sd;
                // Horner
                let mut acc = self.coefficients[degree];
                for k in (0..degree).rev() {
                    acc = acc * z + self.coefficients[k];
                }
                acc
            }
            BasisKind::LocalPartition { cells } => {
                let xc = x.clamp(self.clip.0, self.clip.1);
                let w = (self.clip.1 - self.clip.0) / cells as f64;
                let mut cell = ((xc - self.clip.0) / w) as usize;
                if cell >= cells {
                    cell = cells - 1;
                }
                self.coefficients[cell]
            }
        }
    }

    pub fn predict(&self, features: &[f64]) -> Vec<f64> {
        features
            .par_chunks(CHUNK)
            .map(|c| c.iter().map(|&x| self.predict_one(x)).collect::<Vec<_>>())
            .flatten()
            .collect()
    }

    /// Polynomial coefficients in the raw monomial basis (undoing the
    /// standardization), for diagnostics and tests.
    pub fn monomial_coefficients(&self) -> Option<Vec<f64>> {
        let degree = match self.kind {
            BasisKind::Polynomial { degree } => degree,
            _ => return None,
        };
        // p(z) with z = (x - mean)/sd; expand via binomial theorem
        let mut out = vec![0.0; degree + 1];
        for (k, &c) in self.coefficients.iter().enumerate() {
            // c * ((x - mean)/sd)^k
            let scale = c / self.sd.powi(k as i32);
            let mut binom = 1.0;
            for j in 0..=k {
                // term x^j * (-mean)^{k-j} * C(k, j)
                out[j] += scale * binom * (-self.mean).powi((k - j) as i32);
                binom = binom * (k - j) as f64 / (j + 1) as f64;
            }
        }
        Some(out)
    }

    /// Max relative violation of the normal equations on the given sample.
    pub fn normal_equation_residual(&self, features: &[f64], targets: &[f64]) -> f64 {
        let dim = self.kind.dimension();
        let mut phi = vec![0.0; dim];
        let mut resid = vec![0.0; dim];
        let mut scale = vec![0.0; dim];
        for (&x, &y) in features.iter().zip(targets.iter()) {
            fill_basis(self.kind, self.clip, self.mean, self.sd, x, &mut phi);
            let e = y - self.predict_one(x);
            for i in 0..dim {
                resid[i] += phi[i] * e;
                scale[i] += (phi[i] * y).abs();
            }
        }
        resid
            .iter()
            .zip(scale.iter())
            .map(|(r, s)| r.abs() / s.max(1.0))
            .fold(0.0, f64::max)
    }
}
