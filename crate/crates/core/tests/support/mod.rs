//! Shared test oracles. Everything here is deliberately independent of the
//! crate's kernels: matrix products are triple loops, eigenvalues come from
//! a cyclic Jacobi sweep, cross-entropy goes through the log-sum-exp
//! identity term by term, and gradients are central finite differences.

#![allow(dead_code)]

use std::collections::BTreeMap;

use dbfusion_core::nn::{ParamStore, Parameter};
use dbfusion_core::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Scalar loss with distinct per-entry weights, so gradient checks catch
/// layout mistakes that a plain sum (all-ones cotangent) would miss.
pub fn wsum(t: &Tensor) -> Tensor {
    let w: Vec<f64> = (0..t.len()).map(|i| ((i % 7) as f64 - 3.0) * 0.25 + 0.1).collect();
    t.mul(&Tensor::new(t.shape(), w).unwrap()).unwrap().sum()
}

pub fn assert_close(got: f64, want: f64, tol: f64, what: &str) {
    assert!(
        (got - want).abs() <= tol,
        "{what}: got {got}, want {want} (tol {tol})"
    );
}

pub fn assert_slice_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol,
            "{what}[{i}]: got {g}, want {w} (tol {tol})"
        );
    }
}

/// Row-major (m x k) * (k x n) as three explicit loops.
pub fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Mean over rows of sum_j t_ij * (lse_i - l_ij), the log-sum-exp form of
/// row-wise softmax cross-entropy.
pub fn cross_entropy_oracle(logits: &[f64], targets: &[f64], rows: usize, cols: usize) -> f64 {
    assert_eq!(logits.len(), rows * cols);
    assert_eq!(targets.len(), rows * cols);
    let mut total = 0.0;
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        for c in 0..cols {
            total += targets[r * cols + c] * (lse - row[c]);
        }
    }
    total / rows as f64
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(sym: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(sym.len(), n * n);
    let mut a = sym.to_vec();
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if frob == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= 1e-14 * frob {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eig
}

/// Population covariance (divide by n) of the row-centered data, built with
/// plain loops.
pub fn covariance_oracle(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += x[r * d + c];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        for i in 0..d {
            let xi = x[r * d + i] - mean[i];
            for j in 0..d {
                let xj = x[r * d + j] - mean[j];
                cov[i * d + j] += xi * xj;
            }
        }
    }
    for v in &mut cov {
        *v /= n as f64;
    }
    cov
}

/// Entries of `store` whose names start with any of the prefixes.
pub fn subset(store: &ParamStore, prefixes: &[&str]) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, (shape, data)) in store.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            out.insert(name, shape.clone(), data.clone());
        }
    }
    out
}

/// `base` with every entry of `patch` written over it.
pub fn overlay(base: &ParamStore, patch: &ParamStore) -> ParamStore {
    let mut out = base.clone();
    for (name, (shape, data)) in patch.iter() {
        out.insert(name, shape.clone(), data.clone());
    }
    out
}

/// Accumulated gradients per parameter name after a backward pass. Missing
/// gradients read as zero.
pub fn grads_by_name(params: &[Parameter]) -> BTreeMap<String, Vec<f64>> {
    params
        .iter()
        .map(|p| {
            let g = p.tensor.grad().unwrap_or_else(|| vec![0.0; p.tensor.len()]);
            (p.name.clone(), g)
        })
        .collect()
}

/// Finite-difference check against a module's named parameters. The caller
/// supplies analytic gradients from one backward pass plus `eval`, which
/// rebuilds the module from a (possibly perturbed) snapshot and returns the
/// loss value. Each trial probes one random entry of one random parameter.
pub fn check_param_grads(
    rng: &mut ChaCha8Rng,
    store: &ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    eval: &dyn Fn(&ParamStore) -> f64,
    trials: usize,
    what: &str,
) {
    let h = 1e-5;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    assert!(!names.is_empty(), "{what}: empty parameter store");
    for _ in 0..trials {
        let name = &names[rng.gen_range(0..names.len())];
        let (shape, base) = store.get(name).expect("listed name resolves").clone();
        let e = rng.gen_range(0..base.len());
        let eval_at = |delta: f64| -> f64 {
            let mut d = base.clone();
            d[e] += delta;
            let mut s = store.clone();
            s.insert(name, shape.clone(), d);
            eval(&s)
        };
        let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        let analytic = grads.get(name).map_or(0.0, |g| g[e]);
        let denom = analytic.abs().max(numeric.abs()).max(1e-4);
        let rel = (analytic - numeric).abs() / denom;
        assert!(
            rel < 1e-4,
            "{what}: {name}[{e}]: analytic {analytic}, numeric {numeric}, rel {rel}"
        );
    }
}

/// Central-difference gradient check. `f` rebuilds the scalar loss from leaf
/// data each call; analytic gradients come from one backward pass, numeric
/// ones from (f(x+h) - f(x-h)) / 2h at `probes` randomly chosen entries per
/// leaf. Relative error uses a 1e-4 magnitude floor so exactly-zero
/// gradients (masked positions) compare sanely.
pub struct GradCheck {
    pub h: f64,
    pub rel_tol: f64,
    pub probes: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { h: 1e-5, rel_tol: 1e-4, probes: 4 }
    }
}

impl GradCheck {
    pub fn run(
        &self,
        rng: &mut ChaCha8Rng,
        shapes: &[&[usize]],
        f: &dyn Fn(&[Tensor]) -> Tensor,
        what: &str,
    ) {
        let data: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| rand_vec(rng, s.iter().product()))
            .collect();
        let leaves: Vec<Tensor> = shapes
            .iter()
            .zip(&data)
            .map(|(s, d)| Tensor::param(s, d.clone()).unwrap())
            .collect();
        let loss = f(&leaves);
        assert_eq!(loss.len(), 1, "{what}: loss must be scalar");
        loss.backward().unwrap();
        let grads: Vec<Vec<f64>> = leaves
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();

        for (li, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            for _ in 0..self.probes.min(n) {
                let e = rng.gen_range(0..n);
                let numeric = {
                    let eval = |delta: f64| -> f64 {
                        let leaves: Vec<Tensor> = data
                            .iter()
                            .enumerate()
                            .map(|(i, d)| {
                                let mut d = d.clone();
                                if i == li {
                                    d[e] += delta;
                                }
                                Tensor::new(shapes[i], d).unwrap()
                            })
                            .collect();
                        f(&leaves).data()[0]
                    };
                    (eval(self.h) - eval(-self.h)) / (2.0 * self.h)
                };
                let analytic = grads[li][e];
                let denom = analytic.abs().max(numeric.abs()).max(1e-4);
                let rel = (analytic - numeric).abs() / denom;
                assert!(
                    rel < self.rel_tol,
                    "{what}: leaf {li} entry {e}: analytic {analytic}, numeric {numeric}, rel {rel}"
                );
            }
        }
    }
}
