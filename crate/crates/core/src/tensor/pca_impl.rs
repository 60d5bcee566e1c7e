//! Principal components by power iteration with Hotelling deflation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{CoreError, Result};

const TOL: f64 = 1e-9;
const MAX_ITERS: usize = 1000;

pub struct Pca {
    /// k x d, orthonormal rows, each with its largest-magnitude entry
    /// positive.
    pub components: Tensor,
    /// n x k projections of the centered data.
    pub scores: Tensor,
    /// Nonincreasing, one per component.
    pub eigenvalues: Vec<f64>,
}

/// Fit `k` principal components of the rows of `x` (population covariance,
/// divide by n). Deterministic: the start vector of every power iteration is
/// seeded by the component index.
pub fn pca_fit(x: &Tensor, k: usize) -> Result<Pca> {
    let &[n, d] = x.shape() else {
        return Err(CoreError::dimension(
            "pca_fit",
            format!("expected a rank-2 tensor, got shape {:?}", x.shape()),
        ));
    };
    if n < 2 {
        return Err(CoreError::argument(
            "pca_fit",
            format!("need at least 2 rows to estimate a covariance, got {n}"),
        ));
    }
    if k == 0 || k > d.min(n) {
        return Err(CoreError::argument(
            "pca_fit",
            format!("k = {k} out of range 1..={}", d.min(n)),
        ));
    }

    let mut mean = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += x.data()[r * d + c];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = vec![0.0; n * d];
    for r in 0..n {
        for c in 0..d {
            centered[r * d + c] = x.data()[r * d + c] - mean[c];
        }
    }

    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = &centered[r * d..(r + 1) * d];
        for i in 0..d {
            let xi = row[i];
            for (cj, &xj) in cov[i * d..(i + 1) * d].iter_mut().zip(row) {
                *cj += xi * xj;
            }
        }
    }
    for v in &mut cov {
        *v /= n as f64;
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let mut components = vec![0.0; k * d];
    let mut eigenvalues = vec![0.0; k];
    for comp in 0..k {
        let prev = &components[..comp * d];
        let v = dominant_vector(&cov, d, comp, trace, prev)?;
        let mut lambda = 0.0;
        for i in 0..d {
            let mut cv = 0.0;
            for j in 0..d {
                cv += cov[i * d + j] * v[j];
            }
            lambda += v[i] * cv;
        }
        // Deflate before the sign fix; vv^T is sign-invariant anyway.
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        let mut v = v;
        let lead = v
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
            .unwrap();
        if lead < 0.0 {
            for e in &mut v {
                *e = -*e;
            }
        }
        components[comp * d..(comp + 1) * d].copy_from_slice(&v);
        eigenvalues[comp] = lambda;
    }

    let mut scores = vec![0.0; n * k];
    for r in 0..n {
        for c in 0..k {
            let mut s = 0.0;
            for j in 0..d {
                s += centered[r * d + j] * components[c * d + j];
            }
            scores[r * k + c] = s;
        }
    }

    Ok(Pca {
        components: Tensor::new(&[k, d], components)?,
        scores: Tensor::new(&[n, k], scores)?,
        eigenvalues,
    })
}

/// Power iteration on `cov`, re-orthogonalized against the rows of `prev`
/// every step so deflation drift cannot creep back in. When the remaining
/// spectrum is numerically zero, returns a deterministic unit vector from
/// the orthogonal complement of `prev` instead.
fn dominant_vector(cov: &[f64], d: usize, comp: usize, trace: f64, prev: &[f64]) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdbf5_0000 + comp as u64);
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    orthogonalize(&mut v, prev, d);
    let norm = norm2(&v);
    // A random vector is never inside span(prev) in practice.
    for e in &mut v {
        *e /= norm;
    }

    let floor = 1e-14 * (1.0 + trace.abs());
    for _ in 0..MAX_ITERS {
        let mut w = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += cov[i * d + j] * v[j];
            }
            w[i] = acc;
        }
        orthogonalize(&mut w, prev, d);
        let wn = norm2(&w);
        if wn <= floor {
            return null_space_vector(d, prev);
        }
        for e in &mut w {
            *e /= wn;
        }
        let delta: f64 = v.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = w;
        if delta < TOL {
            return Ok(v);
        }
    }
    Err(CoreError::numeric(
        "pca_fit",
        format!("component {comp} did not converge within {MAX_ITERS} iterations"),
    ))
}

fn null_space_vector(d: usize, prev: &[f64]) -> Result<Vec<f64>> {
    for basis in 0..d {
        let mut v = vec![0.0; d];
        v[basis] = 1.0;
        orthogonalize(&mut v, prev, d);
        let n = norm2(&v);
        if n > 0.5 {
            for e in &mut v {
                *e /= n;
            }
            return Ok(v);
        }
    }
    Err(CoreError::numeric("pca_fit", "no null-space direction found"))
}

fn orthogonalize(v: &mut [f64], prev: &[f64], d: usize) {
    for p in prev.chunks_exact(d) {
        let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
        for (vi, pi) in v.iter_mut().zip(p) {
            *vi -= dot * pi;
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
