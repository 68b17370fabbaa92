//! Differentiable operations on [`Var`].

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Real;
use crate::tensor::{split_axis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
}

fn same_shape<T: Real>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn check_axis<T: Real>(op: &'static str, a: &Var<T>, axis: usize) -> Result<()> {
    if axis >= a.shape().len() {
        return shape_err(op, format!("axis {axis} out of range for {:?}", a.shape()));
    }
    Ok(())
}

impl<T: Real> Graph<'_, T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x + y);
        Ok(self.record(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x - y);
        Ok(self.record(out, &[a, b], |g, needs| {
            vec![Some(g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x * y);
        let (av, bv) = (a.arc(), b.arc());
        Ok(self.record(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&bv, |g, y| g * y)),
                needs[1].then(|| g.zip_map(&av, |g, x| g * x)),
            ]
        }))
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("div", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x / y);
        let (av, bv) = (a.arc(), b.arc());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let db = needs[1].then(|| {
                let mut t = g.zip_map(&av, |g, x| g * x);
                for (v, &y) in t.data_mut().iter_mut().zip(bv.data()) {
                    *v = -*v / (y * y);
                }
                t
            });
            vec![needs[0].then(|| g.zip_map(&bv, |g, y| g / y)), db]
        }))
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Var<T> {
        self.record(a.value().map(|x| x * c), &[a], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(&self, a: &Var<T>, c: T) -> Var<T> {
        self.record(a.value().map(|x| x + c), &[a], |g, _| vec![Some(g.clone())])
    }

    pub fn relu(&self, a: &Var<T>) -> Var<T> {
        let av = a.arc();
        let out = a.value().map(|x| x.max(T::zero()));
        self.record(out, &[a], move |g, _| {
            vec![Some(g.zip_map(&av, |g, x| if x > T::zero() { g } else { T::zero() }))]
        })
    }

    pub fn sigmoid(&self, a: &Var<T>) -> Var<T> {
        let out = a.value().map(|x| T::one() / (T::one() + (-x).exp()));
        let y = std::sync::Arc::new(out.clone());
        self.record(out, &[a], move |g, _| vec![Some(g.zip_map(&y, |g, y| g * y * (T::one() - y)))])
    }

    pub fn exp(&self, a: &Var<T>) -> Var<T> {
        let out = a.value().map(T::exp);
        let y = std::sync::Arc::new(out.clone());
        self.record(out, &[a], move |g, _| vec![Some(g.zip_map(&y, |g, y| g * y))])
    }

    pub fn ln(&self, a: &Var<T>) -> Var<T> {
        let av = a.arc();
        self.record(a.value().map(T::ln), &[a], move |g, _| vec![Some(g.zip_map(&av, |g, x| g / x))])
    }

    pub fn abs(&self, a: &Var<T>) -> Var<T> {
        let av = a.arc();
        self.record(a.value().map(T::abs), &[a], move |g, _| {
            vec![Some(g.zip_map(&av, |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            }))]
        })
    }

    pub fn square(&self, a: &Var<T>) -> Var<T> {
        let av = a.arc();
        let two = T::lit(2.0);
        self.record(a.value().map(|x| x * x), &[a], move |g, _| {
            vec![Some(g.zip_map(&av, |g, x| two * g * x))]
        })
    }

    /// Huber-style smooth L1 with transition at `beta`.
    pub fn smooth_l1(&self, a: &Var<T>, beta: T) -> Var<T> {
        let half = T::lit(0.5);
        let av = a.arc();
        let out = a.value().map(|x| {
            let ax = x.abs();
            if ax < beta {
                half * x * x / beta
            } else {
                ax - half * beta
            }
        });
        self.record(out, &[a], move |g, _| {
            vec![Some(g.zip_map(&av, |g, x| {
                if x.abs() < beta {
                    g * x / beta
                } else {
                    g * x.signum()
                }
            }))]
        })
    }

    /// `a · b`.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().matmul(b.value())?;
        let (av, bv) = (a.arc(), b.arc());
        Ok(self.record(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.matmul_nt(&bv).unwrap()),
                needs[1].then(|| av.matmul_tn(g).unwrap()),
            ]
        }))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().matmul_nt(b.value())?;
        let (av, bv) = (a.arc(), b.arc());
        Ok(self.record(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.matmul(&bv).unwrap()),
                needs[1].then(|| g.matmul_tn(&av).unwrap()),
            ]
        }))
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().matmul_tn(b.value())?;
        let (av, bv) = (a.arc(), b.arc());
        Ok(self.record(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| bv.matmul_nt(g).unwrap()),
                needs[1].then(|| av.matmul(g).unwrap()),
            ]
        }))
    }

    pub fn transpose(&self, a: &Var<T>) -> Result<Var<T>> {
        let out = a.value().transpose()?;
        Ok(self.record(out, &[a], |g, _| vec![Some(g.transpose().unwrap())]))
    }

    pub fn reshape(&self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = a.value().reshape(shape)?;
        let orig = a.shape().to_vec();
        Ok(self.record(out, &[a], move |g, _| vec![Some(g.reshape(&orig).unwrap())]))
    }

    /// Repeats an extent-1 `axis` `n` times.
    pub fn expand(&self, a: &Var<T>, axis: usize, n: usize) -> Result<Var<T>> {
        let out = a.value().expand(axis, n)?;
        Ok(self.record(out, &[a], move |g, _| vec![Some(g.sum_axis(axis))]))
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, a: &Var<T>, axis: usize) -> Result<Var<T>> {
        check_axis("sum_axis", a, axis)?;
        let len = a.shape()[axis];
        Ok(self.record(a.value().sum_axis(axis), &[a], move |g, _| vec![Some(g.expand(axis, len).unwrap())]))
    }

    /// Mean or max over `axis`, keeping it with extent 1. Max routes the
    /// gradient to the first maximal entry.
    pub fn pool(&self, a: &Var<T>, axis: usize, kind: PoolKind) -> Result<Var<T>> {
        check_axis("pool", a, axis)?;
        let shape = a.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        match kind {
            PoolKind::Mean => {
                let inv = T::one() / T::lit(len as f64);
                let out = a.value().sum_axis(axis).map(|v| v * inv);
                Ok(self.record(out, &[a], move |g, _| {
                    vec![Some(g.expand(axis, len).unwrap().map(|v| v * inv))]
                }))
            }
            PoolKind::Max => {
                let src = a.value().data();
                let mut out = vec![T::zero(); outer * inner];
                let mut arg = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = src[o * len * inner + i];
                        let mut best_l = 0;
                        for l in 1..len {
                            let v = src[(o * len + l) * inner + i];
                            if v > best {
                                best = v;
                                best_l = l;
                            }
                        }
                        out[o * inner + i] = best;
                        arg[o * inner + i] = best_l;
                    }
                }
                let mut out_shape = shape.clone();
                out_shape[axis] = 1;
                let out = Tensor::from_vec(&out_shape, out)?;
                Ok(self.record(out, &[a], move |g, _| {
                    let mut dx = Tensor::zeros(&shape);
                    let d = dx.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let l = arg[o * inner + i];
                            d[(o * len + l) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                    vec![Some(dx)]
                }))
            }
        }
    }

    /// Softmax along `axis`, shifted by the slice maximum.
    pub fn softmax(&self, a: &Var<T>, axis: usize) -> Result<Var<T>> {
        check_axis("softmax", a, axis)?;
        let out = softmax_tensor(a.value(), axis);
        let y = std::sync::Arc::new(out.clone());
        Ok(self.record(out, &[a], move |g, _| {
            let shape = y.shape().to_vec();
            let (outer, len, inner) = split_axis(&shape, axis);
            let mut dx = Tensor::zeros(&shape);
            let (yd, gd, d) = (y.data(), g.data(), dx.data_mut());
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: T = (0..len).map(|l| gd[idx(l)] * yd[idx(l)]).sum();
                    for l in 0..len {
                        d[idx(l)] = yd[idx(l)] * (gd[idx(l)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn log_softmax(&self, a: &Var<T>, axis: usize) -> Result<Var<T>> {
        check_axis("log_softmax", a, axis)?;
        let shape = a.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = a.value().data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| src[idx(l)]).fold(T::neg_infinity(), T::max);
                let lse = m + (0..len).map(|l| (src[idx(l)] - m).exp()).sum::<T>().ln();
                for l in 0..len {
                    out[idx(l)] = src[idx(l)] - lse;
                }
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        let y = std::sync::Arc::new(out.clone());
        Ok(self.record(out, &[a], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let (yd, gd, d) = (y.data(), g.data(), dx.data_mut());
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let gs: T = (0..len).map(|l| gd[idx(l)]).sum();
                    for l in 0..len {
                        d[idx(l)] = gd[idx(l)] - yd[idx(l)].exp() * gs;
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&self, a: &Var<T>) -> Var<T> {
        let shape = a.shape().to_vec();
        self.record(Tensor::scalar(a.value().sum()), &[a], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean_all(&self, a: &Var<T>) -> Var<T> {
        let n = T::lit(a.value().len() as f64);
        let s = self.sum_all(a);
        self.scale(&s, T::one() / n)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let Some(first) = parts.first() else {
            return shape_err("concat", "no operands");
        };
        check_axis("concat", first, axis)?;
        let rank = first.shape().len();
        for p in parts {
            let ok = p.shape().len() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return shape_err("concat", format!("{:?} vs {:?} on axis {axis}", first.shape(), p.shape()));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.value().data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let out = Tensor::from_vec(&shape, out)?;
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(self.record(out, parts, move |g, needs| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for ((&len, ps), &need) in lens.iter().zip(&part_shapes).zip(needs) {
                if need {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[start..start + len * inner]);
                    }
                    grads.push(Some(Tensor::from_vec(ps, d).unwrap()));
                } else {
                    grads.push(None);
                }
                offset += len;
            }
            grads
        }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, a: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        check_axis("slice", a, axis)?;
        let shape = a.shape().to_vec();
        if len == 0 || start + len > shape[axis] {
            return shape_err("slice", format!("[{start}, {}) of axis {axis} in {shape:?}", start + len));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = a.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.record(out, &[a], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let d = dx.data_mut();
            for o in 0..outer {
                let s = (o * full + start) * inner;
                d[s..s + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Selects rows (entries of axis 0) by index; repeats are allowed.
    pub fn gather_rows(&self, a: &Var<T>, idx: &[usize]) -> Result<Var<T>> {
        let rows = a.shape()[0];
        if idx.is_empty() {
            return shape_err("gather_rows", "empty index");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err("gather_rows", format!("index {bad} out of range for {rows} rows"));
        }
        let width = a.value().cols();
        let src = a.value().data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = a.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::from_vec(&shape, out)?;
        let in_shape = a.shape().to_vec();
        let idx = idx.to_vec();
        Ok(self.record(out, &[a], move |g, _| {
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for (r, &i) in idx.iter().enumerate() {
                for (dst, &v) in d[i * width..(i + 1) * width].iter_mut().zip(&g.data()[r * width..(r + 1) * width]) {
                    *dst += v;
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Weighted row combination: output row `i` is
    /// `Σ_j weights[i*k + j] · a[idx[i*k + j]]`.
    pub fn combine_rows(&self, a: &Var<T>, idx: &[usize], weights: &[T], k: usize) -> Result<Var<T>> {
        let rows = a.shape()[0];
        if k == 0 || idx.len() != weights.len() || idx.is_empty() || !idx.len().is_multiple_of(k) {
            return shape_err("combine_rows", format!("{} indices, {} weights, k={k}", idx.len(), weights.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err("combine_rows", format!("index {bad} out of range for {rows} rows"));
        }
        let m = idx.len() / k;
        let width = a.value().cols();
        let src = a.value().data();
        let mut out = vec![T::zero(); m * width];
        for i in 0..m {
            let row = &mut out[i * width..(i + 1) * width];
            for j in 0..k {
                let (s, w) = (idx[i * k + j], weights[i * k + j]);
                for (o, &v) in row.iter_mut().zip(&src[s * width..(s + 1) * width]) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::from_vec(&[m, width], out)?;
        let in_shape = a.shape().to_vec();
        let (idx, weights) = (idx.to_vec(), weights.to_vec());
        Ok(self.record(out, &[a], move |g, _| {
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for i in 0..m {
                let grow = &g.data()[i * width..(i + 1) * width];
                for j in 0..k {
                    let (s, w) = (idx[i * k + j], weights[i * k + j]);
                    for (dst, &v) in d[s * width..(s + 1) * width].iter_mut().zip(grow) {
                        *dst += w * v;
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Batch normalization of an `[N, C]` input with batch statistics.
    /// Returns the output and the batch mean and biased variance.
    pub(crate) fn batch_norm_train(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: T,
    ) -> Result<(Var<T>, Tensor<T>, Tensor<T>)> {
        let (n, c) = (x.value().rows(), x.value().cols());
        if x.shape().len() != 2 || gamma.value().len() != c || beta.value().len() != c {
            return shape_err("batch_norm", format!("x {:?}, gamma {:?}", x.shape(), gamma.shape()));
        }
        let xd = x.value().data();
        let inv_n = T::one() / T::lit(n as f64);
        let mut mean = vec![T::zero(); c];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(&xd[r * c..(r + 1) * c]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_n);
        let mut var = vec![T::zero(); c];
        for r in 0..n {
            for j in 0..c {
                let d = xd[r * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v *= inv_n);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); n * c];
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        for r in 0..n {
            for j in 0..c {
                let h = (xd[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let out = Tensor::from_vec(&[n, c], out)?;
        let xhat = Tensor::from_vec(&[n, c], xhat)?;
        let gv = gamma.arc();
        let param_shape = gamma.shape().to_vec();
        let y = self.record(out, &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let hd = xhat.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for r in 0..n {
                for j in 0..c {
                    dgamma[j] += gd[r * c + j] * hd[r * c + j];
                    dbeta[j] += gd[r * c + j];
                }
            }
            let dx = needs[0].then(|| {
                let gam = gv.data();
                let nt = T::lit(n as f64);
                let mut dx = vec![T::zero(); n * c];
                for r in 0..n {
                    for j in 0..c {
                        let dxhat = gd[r * c + j] * gam[j];
                        let sum_dxhat = dbeta[j] * gam[j];
                        let sum_dxhat_xhat = dgamma[j] * gam[j];
                        dx[r * c + j] = inv_n * inv_std[j] * (nt * dxhat - sum_dxhat - hd[r * c + j] * sum_dxhat_xhat);
                    }
                }
                Tensor::from_vec(&[n, c], dx).unwrap()
            });
            vec![
                dx,
                needs[1].then(|| Tensor::from_vec(&param_shape, dgamma).unwrap()),
                needs[2].then(|| Tensor::from_vec(&param_shape, dbeta).unwrap()),
            ]
        });
        Ok((y, Tensor::from_vec(&[c], mean)?, Tensor::from_vec(&[c], var)?))
    }
}

/// Max-shifted softmax along `axis` on a plain tensor.
pub fn softmax_tensor<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = x.shape().to_vec();
    let (outer, len, inner) = split_axis(&shape, axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let m = (0..len).map(|l| src[idx(l)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for l in 0..len {
                let e = (src[idx(l)] - m).exp();
                out[idx(l)] = e;
                total += e;
            }
            for l in 0..len {
                out[idx(l)] /= total;
            }
        }
    }
    Tensor::from_vec(&shape, out).unwrap()
}
