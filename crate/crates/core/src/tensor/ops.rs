//! Tensor operations and their backward rules.
//!
//! Matrix products funnel through one ikj kernel that the compiler can
//! vectorize; transposed operands are materialized first, which at this
//! scale is far cheaper than a strided kernel.

use super::Tensor;
use crate::error::{CoreError, Result};

/// Row-major (m x k) * (k x n).
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

fn tr(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            y[c * rows + r] = x[r * cols + c];
        }
    }
    y
}

/// outer extent before `axis`, the axis extent, inner extent after it.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape() {
            [r, c] => Ok((r, c)),
            _ => Err(CoreError::dimension(
                op,
                format!("expected a rank-2 tensor, got shape {:?}", self.shape()),
            )),
        }
    }

    fn same_shape(&self, rhs: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(CoreError::dimension(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(), rhs.shape()),
            ));
        }
        Ok(())
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(CoreError::dimension(
                "matmul",
                format!("cannot multiply {:?} by {:?}", self.shape(), rhs.shape()),
            ));
        }
        let out = mm(self.data(), rhs.data(), m, k, n);
        let (a, b) = (self.clone(), rhs.clone());
        let (na, nb) = (a.requires_grad(), b.requires_grad());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let da = na.then(|| mm(g, &tr(b.data(), k, n), m, n, k));
                let db = nb.then(|| mm(&tr(a.data(), m, k), g, k, m, n));
                vec![da, db]
            }),
        ))
    }

    /// `self * rhs^T` without materializing the transpose in the graph.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = rhs.dims2("matmul_nt")?;
        if k != k2 {
            return Err(CoreError::dimension(
                "matmul_nt",
                format!("cannot multiply {:?} by transposed {:?}", self.shape(), rhs.shape()),
            ));
        }
        let out = mm(self.data(), &tr(rhs.data(), n, k), m, k, n);
        let (a, b) = (self.clone(), rhs.clone());
        let (na, nb) = (a.requires_grad(), b.requires_grad());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let da = na.then(|| mm(g, b.data(), m, n, k));
                let db = nb.then(|| mm(&tr(g, m, n), a.data(), n, m, k));
                vec![da, db]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let out = tr(self.data(), r, c);
        let need = self.requires_grad();
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g| vec![need.then(|| tr(g, c, r))]),
        ))
    }

    /// Same data, new shape with an equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if want != self.len() {
            return Err(CoreError::dimension(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        let need = self.requires_grad();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![need.then(|| g.to_vec())]),
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "add")?;
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| a + b).collect();
        let (na, nb) = (self.requires_grad(), rhs.requires_grad());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| vec![na.then(|| g.to_vec()), nb.then(|| g.to_vec())]),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "sub")?;
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| a - b).collect();
        let (na, nb) = (self.requires_grad(), rhs.requires_grad());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                vec![na.then(|| g.to_vec()), nb.then(|| g.iter().map(|v| -v).collect())]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "mul")?;
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), rhs.clone());
        let (na, nb) = (a.requires_grad(), b.requires_grad());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let da = na.then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
                let db = nb.then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
                vec![da, db]
            }),
        ))
    }

    /// Add a `[d]` bias to every leading slice of a tensor whose last
    /// extent is `d`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if bias.shape() != [d] || d == 0 {
            return Err(CoreError::dimension(
                "add_bias",
                format!("bias {:?} does not match last extent of {:?}", bias.shape(), self.shape()),
            ));
        }
        let bd = bias.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % d])
            .collect();
        let rows = self.len() / d;
        let (na, nb) = (self.requires_grad(), bias.requires_grad());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let db = nb.then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for (a, gv) in acc.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *a += gv;
                        }
                    }
                    acc
                });
                vec![na.then(|| g.to_vec()), db]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * c).collect();
        let need = self.requires_grad();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| vec![need.then(|| g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v + c).collect();
        let need = self.requires_grad();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| vec![need.then(|| g.to_vec())]),
        )
    }

    /// Tanh-form GELU; smooth everywhere, which keeps finite-difference
    /// checks honest.
    pub fn gelu(&self) -> Tensor {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let out = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let a = self.clone();
        let need = self.requires_grad();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    a.data()
                        .iter()
                        .zip(g)
                        .map(|(&x, gv)| {
                            let t = (c * (x + 0.044715 * x * x * x)).tanh();
                            let dt = (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
                            gv * (0.5 * (1.0 + t) + 0.5 * x * dt)
                        })
                        .collect()
                })]
            }),
        )
    }

    /// Concatenate along `axis`; every other extent must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(CoreError::argument("concat", "empty tensor list"));
        };
        let rank = first.rank();
        if axis >= rank {
            return Err(CoreError::argument(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        for p in parts {
            if p.rank() != rank
                || p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(CoreError::dimension(
                    "concat",
                    format!("shape {:?} incompatible with {:?} off axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;

        let mut out = vec![0.0; outer * total * inner];
        let row = total * inner;
        let mut offset = 0;
        for (p, &e) in parts.iter().zip(&extents) {
            let block = e * inner;
            for o in 0..outer {
                out[o * row + offset..o * row + offset + block]
                    .copy_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
            offset += block;
        }

        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::from_op(
            shape,
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(needs.len());
                let mut offset = 0;
                for (&e, &need) in extents.iter().zip(&needs) {
                    let block = e * inner;
                    grads.push(need.then(|| {
                        let mut d = vec![0.0; outer * block];
                        for o in 0..outer {
                            d[o * block..(o + 1) * block]
                                .copy_from_slice(&g[o * row + offset..o * row + offset + block]);
                        }
                        d
                    }));
                    offset += block;
                }
                grads
            }),
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(CoreError::argument(
                "narrow",
                format!("axis {axis} out of range for rank {}", self.rank()),
            ));
        }
        let (outer, extent, inner) = split_axis(self.shape(), axis);
        if start + len > extent || len == 0 {
            return Err(CoreError::argument(
                "narrow",
                format!("range {start}..{} out of bounds for extent {extent}", start + len),
            ));
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let block = len * inner;
        let row = extent * inner;
        let mut out = vec![0.0; outer * block];
        for o in 0..outer {
            out[o * block..(o + 1) * block]
                .copy_from_slice(&self.data()[o * row + start * inner..o * row + start * inner + block]);
        }
        let need = self.requires_grad();
        let full = self.len();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut d = vec![0.0; full];
                    for o in 0..outer {
                        d[o * row + start * inner..o * row + start * inner + block]
                            .copy_from_slice(&g[o * block..(o + 1) * block]);
                    }
                    d
                })]
            }),
        ))
    }

    /// Mean along `axis`; the axis disappears from the shape.
    pub fn mean_pool(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(CoreError::argument(
                "mean_pool",
                format!("axis {axis} out of range for rank {}", self.rank()),
            ));
        }
        let (outer, extent, inner) = split_axis(self.shape(), axis);
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let mut out = vec![0.0; outer * inner];
        let scale = 1.0 / extent as f64;
        for o in 0..outer {
            for e in 0..extent {
                let src = &self.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v * scale;
                }
            }
        }
        let need = self.requires_grad();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut d = vec![0.0; outer * extent * inner];
                    for o in 0..outer {
                        for e in 0..extent {
                            let dst = &mut d[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                            for (dv, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *dv = gv * scale;
                            }
                        }
                    }
                    d
                })]
            }),
        ))
    }

    /// Sum of all entries as a `[1]` scalar.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let need = self.requires_grad();
        let n = self.len();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g| vec![need.then(|| vec![g[0]; n])]),
        )
    }

    /// Gather rows of a rank-2 tensor; indices may repeat. Gradients
    /// scatter-add back, which makes this double as embedding lookup.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2("select_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(CoreError::argument(
                "select_rows",
                format!("row index {bad} out of range for {rows} rows"),
            ));
        }
        let mut out = vec![0.0; indices.len() * cols];
        for (k, &i) in indices.iter().enumerate() {
            out[k * cols..(k + 1) * cols].copy_from_slice(&self.data()[i * cols..(i + 1) * cols]);
        }
        let need = self.requires_grad();
        let idx = indices.to_vec();
        let n = indices.len();
        let full = self.len();
        Ok(Tensor::from_op(
            vec![n, cols],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut d = vec![0.0; full];
                    for (k, &i) in idx.iter().enumerate() {
                        for (dv, gv) in d[i * cols..(i + 1) * cols].iter_mut().zip(&g[k * cols..(k + 1) * cols]) {
                            *dv += gv;
                        }
                    }
                    d
                })]
            }),
        ))
    }

    /// Scale each row to unit L2 norm. A row with norm below `eps` is
    /// reported as degenerate rather than amplified into garbage.
    pub fn l2_normalize(&self, eps: f64) -> Result<Tensor> {
        let (rows, cols) = self.dims2("l2_normalize")?;
        let mut out = vec![0.0; rows * cols];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.data()[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < eps {
                return Err(CoreError::degenerate(
                    "l2_normalize",
                    format!("row {r} has norm {norm:e}, below {eps:e}"),
                ));
            }
            norms[r] = norm;
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let need = self.requires_grad();
        let y = out.clone();
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in d[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr) {
                            *dv = (gv - yv * gy) / norms[r];
                        }
                    }
                    d
                })]
            }),
        ))
    }

    /// Row-wise standardization with a variance floor, then a learned
    /// per-column affine. The floor (rather than an added epsilon) keeps
    /// standardized rows at variance exactly 1 and maps constant rows to 0.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = self.dims2("layer_norm")?;
        if gain.shape() != [cols] || bias.shape() != [cols] {
            return Err(CoreError::dimension(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match row width {cols}",
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(CoreError::argument("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let gd = gain.data();
        let bd = bias.data();
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut inv = vec![0.0; rows];
        let mut floored = vec![false; rows];
        for r in 0..rows {
            let row = &self.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            floored[r] = var <= eps;
            inv[r] = 1.0 / var.max(eps).sqrt();
            for c in 0..cols {
                let h = (row[c] - mean) * inv[r];
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gd[c] + bd[c];
            }
        }
        let (nx, ng, nb) = (self.requires_grad(), gain.requires_grad(), bias.requires_grad());
        let gain2 = gain.clone();
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g| {
                let dgain = ng.then(|| {
                    let mut d = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    d
                });
                let dbias = nb.then(|| {
                    let mut d = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c];
                        }
                    }
                    d
                });
                let dx = nx.then(|| {
                    let gd = gain2.data();
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let h: Vec<f64> = gr.iter().zip(gd).map(|(g, w)| g * w).collect();
                        let mh = h.iter().sum::<f64>() / cols as f64;
                        if floored[r] {
                            for c in 0..cols {
                                d[r * cols + c] = inv[r] * (h[c] - mh);
                            }
                        } else {
                            let mhx = h.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                            for c in 0..cols {
                                d[r * cols + c] = inv[r] * (h[c] - mh - hr[c] * mhx);
                            }
                        }
                    }
                    d
                });
                vec![dx, dgain, dbias]
            }),
        ))
    }

    /// Row-wise softmax, max-shifted for stability. Entries masked with
    /// large negative logits come out as exact zeros.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2("softmax_rows")?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..cols {
                let e = (row[c] - m).exp();
                out[r * cols + c] = e;
                z += e;
            }
            for v in &mut out[r * cols..(r + 1) * cols] {
                *v /= z;
            }
        }
        let need = self.requires_grad();
        let y = out.clone();
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            d[r * cols + c] = yr[c] * (gr[c] - gy);
                        }
                    }
                    d
                })]
            }),
        ))
    }

    /// Mean over rows of the cross-entropy between row-wise softmax of the
    /// logits and the target distributions. Computed in log-sum-exp form;
    /// targets are constants and receive no gradient.
    pub fn softmax_cross_entropy_rows(&self, targets: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.dims2("softmax_cross_entropy_rows")?;
        self.same_shape(targets, "softmax_cross_entropy_rows")?;
        let mut probs = vec![0.0; rows * cols];
        let mut tsum = vec![0.0; rows];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &self.data()[r * cols..(r + 1) * cols];
            let trow = &targets.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..cols {
                let e = (row[c] - m).exp();
                probs[r * cols + c] = e;
                z += e;
            }
            let lse = m + z.ln();
            for v in &mut probs[r * cols..(r + 1) * cols] {
                *v /= z;
            }
            for c in 0..cols {
                total += trow[c] * (lse - row[c]);
                tsum[r] += trow[c];
            }
        }
        total /= rows as f64;
        let need = self.requires_grad();
        let tgt = targets.clone();
        Ok(Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone(), targets.clone()],
            Box::new(move |g| {
                let dx = need.then(|| {
                    let scale = g[0] / rows as f64;
                    let td = tgt.data();
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] = scale * (probs[r * cols + c] * tsum[r] - td[r * cols + c]);
                        }
                    }
                    d
                });
                vec![dx, None]
            }),
        ))
    }
}
