//! Differentiable tensor operations, implemented as methods on [`Tape`].
//!
//! Each operation validates shapes, computes the forward value, and (when the
//! tape records and an input requires gradients) pushes a backward rule that
//! reads the output gradient and accumulates into the input gradients.
//!
//! Storage is row-major. Broadcasting is deliberately narrow: matmul
//! broadcasts leading batch dimensions, elementwise `add`/`mul` broadcast a
//! right-hand side whose shape is a suffix of the left's. Everything else is
//! exact-shape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Boolean attention mask; `true` marks positions that may be attended.
///
/// Broadcasts against a logits tensor when its shape equals the logits shape
/// or a suffix of it (a `[keys]` mask applies to every query row).
#[derive(Clone, Debug)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(data: Vec<bool>, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "mask data length does not match shape");
        Mask { shape: shape.to_vec(), data }
    }

    /// Key mask: one flag per key position, shared by all query rows.
    pub fn keys(allowed: Vec<bool>) -> Self {
        let n = allowed.len();
        Mask::new(allowed, &[n])
    }

    /// Strict causal mask over an `n x n` self-attention: row `i` may attend
    /// to columns `0..=i`.
    pub fn causal(n: usize) -> Self {
        let mut data = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                data[i * n + j] = true;
            }
        }
        Mask::new(data, &[n, n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

fn is_suffix(of: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= of.len() && of[of.len() - suffix.len()..] == *suffix
}

/// Broadcast two leading-batch shapes (right-aligned, 1 expands).
fn broadcast_batch(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db || db == 1 {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else {
            return Err(Error::Shape(format!(
                "batch dimensions not broadcast-compatible: {a:?} vs {b:?}"
            )));
        }
    }
    Ok(out)
}

/// Offset (in batch elements) of the input slice feeding output batch
/// element `flat`, under right-aligned broadcasting of `in_dims`.
fn batch_offset(flat: usize, out_dims: &[usize], in_dims: &[usize]) -> usize {
    let n = out_dims.len();
    let pad = n - in_dims.len();
    let mut coords = vec![0usize; n];
    let mut rem = flat;
    for d in (0..n).rev() {
        coords[d] = rem % out_dims[d];
        rem /= out_dims[d];
    }
    let mut off = 0;
    let mut stride = 1;
    for d in (pad..n).rev() {
        let dim = in_dims[d - pad];
        let c = if dim == 1 { 0 } else { coords[d] };
        off += c * stride;
        stride *= dim;
    }
    off
}

// 2-D kernels. `_acc` variants add into the destination.

fn mm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
}

/// c[m,k] += g[m,n] * b[k,n]^T
fn mm_nt_acc<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        for p in 0..k {
            let mut s = T::zero();
            for j in 0..n {
                s += g[i * n + j] * b[p * n + j];
            }
            c[i * k + p] += s;
        }
    }
}

/// c[k,n] += a[m,k]^T * g[m,n]
fn mm_tn_acc<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for j in 0..n {
                c[p * n + j] += av * g[i * n + j];
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`,
    /// broadcasting leading batch dimensions.
    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::Shape(format!(
                "matmul requires rank >= 2 operands, got {ash:?} and {bsh:?}"
            )));
        }
        let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {ash:?} vs {bsh:?}"
            )));
        }
        let abatch = ash[..ash.len() - 2].to_vec();
        let bbatch = bsh[..bsh.len() - 2].to_vec();
        let batch = broadcast_batch(&abatch, &bbatch)?;
        let nbatch: usize = batch.iter().product();

        let mut out = vec![T::zero(); nbatch * m * n];
        {
            let ad = a.data();
            let bd = b.data();
            for bi in 0..nbatch {
                let ao = batch_offset(bi, &batch, &abatch) * m * ka;
                let bo = batch_offset(bi, &batch, &bbatch) * ka * n;
                mm_nn(
                    &ad[ao..ao + m * ka],
                    &bd[bo..bo + ka * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    ka,
                    n,
                );
            }
        }
        let mut oshape = batch.clone();
        oshape.push(m);
        oshape.push(n);
        let record = self.should_record(&[a, b]);
        let out = Tensor::with_flag(out, &oshape, record);
        if record {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                if a2.requires_grad() {
                    let bd = b2.data();
                    let mut da = vec![T::zero(); a2.numel()];
                    for bi in 0..nbatch {
                        let ao = batch_offset(bi, &batch, &abatch) * m * ka;
                        let bo = batch_offset(bi, &batch, &bbatch) * ka * n;
                        mm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[bo..bo + ka * n],
                            &mut da[ao..ao + m * ka],
                            m,
                            n,
                            ka,
                        );
                    }
                    a2.accumulate_grad(&da);
                }
                if b2.requires_grad() {
                    let ad = a2.data();
                    let mut db = vec![T::zero(); b2.numel()];
                    for bi in 0..nbatch {
                        let ao = batch_offset(bi, &batch, &abatch) * m * ka;
                        let bo = batch_offset(bi, &batch, &bbatch) * ka * n;
                        mm_tn_acc(
                            &ad[ao..ao + m * ka],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bo..bo + ka * n],
                            m,
                            ka,
                            n,
                        );
                    }
                    b2.accumulate_grad(&db);
                }
            }));
        }
        Ok(out)
    }

    /// Swap the last two dimensions.
    pub fn transpose(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let sh = x.shape().to_vec();
        if sh.len() < 2 {
            return Err(Error::Shape(format!("transpose requires rank >= 2, got {sh:?}")));
        }
        let (m, n) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let nbatch: usize = sh[..sh.len() - 2].iter().product();
        let transpose_flat = move |src: &[T]| {
            let mut dst = vec![T::zero(); src.len()];
            for b in 0..nbatch {
                let base = b * m * n;
                for i in 0..m {
                    for j in 0..n {
                        dst[base + j * m + i] = src[base + i * n + j];
                    }
                }
            }
            dst
        };
        let mut oshape = sh.clone();
        let len = oshape.len();
        oshape.swap(len - 2, len - 1);
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(transpose_flat(&x.data()), &oshape, record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            // transposing back swaps m and n
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..nbatch {
                    let base = b * m * n;
                    for j in 0..n {
                        for i in 0..m {
                            dx[base + i * n + j] = g[base + j * m + i];
                        }
                    }
                }
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    fn elementwise_suffix(
        &self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        op_name: &str,
        f: impl Fn(T, T) -> T,
        df: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Result<Tensor<T>> {
        if !is_suffix(a.shape(), b.shape()) {
            return Err(Error::Shape(format!(
                "{op_name}: shapes {:?} and {:?} are not suffix-compatible",
                a.shape(),
                b.shape()
            )));
        }
        let bn = b.numel().max(1);
        let out: Vec<T> = {
            let ad = a.data();
            let bd = b.data();
            ad.iter().enumerate().map(|(i, &av)| f(av, bd[i % bn])).collect()
        };
        let record = self.should_record(&[a, b]);
        let out = Tensor::with_flag(out, a.shape(), record);
        if record {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let ad = a2.data();
                let bd = b2.data();
                let mut da = vec![T::zero(); a2.numel()];
                let mut db = vec![T::zero(); b2.numel()];
                for (i, &gi) in g.iter().enumerate() {
                    let (dai, dbi) = df(ad[i], bd[i % bn], gi);
                    da[i] = dai;
                    db[i % bn] += dbi;
                }
                drop(ad);
                drop(bd);
                if a2.requires_grad() {
                    a2.accumulate_grad(&da);
                }
                if b2.requires_grad() {
                    b2.accumulate_grad(&db);
                }
            }));
        }
        Ok(out)
    }

    /// Elementwise sum; `b`'s shape must equal `a`'s or be a suffix of it
    /// (bias over the trailing dimensions).
    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise_suffix(a, b, "add", |x, y| x + y, |_, _, g| (g, g))
    }

    /// Elementwise product with the same suffix broadcast as [`Tape::add`].
    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise_suffix(a, b, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    /// Affine map `y = mul * x + add` with scalar coefficients.
    pub fn scale_add(&self, x: &Tensor<T>, mul: T, add: T) -> Result<Tensor<T>> {
        let out: Vec<T> = x.data().iter().map(|&v| mul * v + add).collect();
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(out, x.shape(), record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let dx: Vec<T> = g.iter().map(|&gi| gi * mul).collect();
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    /// Scale each row of a matrix by a per-row factor: `y[i,j] = x[i,j] * s[i]`.
    pub fn row_scale(&self, x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 || s.rank() != 1 || s.shape()[0] != x.shape()[0] {
            return Err(Error::Shape(format!(
                "row_scale expects [r, c] and [r], got {:?} and {:?}",
                x.shape(),
                s.shape()
            )));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let out: Vec<T> = {
            let xd = x.data();
            let sd = s.data();
            (0..r * c).map(|i| xd[i] * sd[i / c]).collect()
        };
        let record = self.should_record(&[x, s]);
        let out = Tensor::with_flag(out, x.shape(), record);
        if record {
            let (x2, s2, o2) = (x.clone(), s.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                if x2.requires_grad() {
                    let sd = s2.data();
                    let dx: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * sd[i / c]).collect();
                    drop(sd);
                    x2.accumulate_grad(&dx);
                }
                if s2.requires_grad() {
                    let xd = x2.data();
                    let mut ds = vec![T::zero(); r];
                    for i in 0..r * c {
                        ds[i / c] += g[i] * xd[i];
                    }
                    drop(xd);
                    s2.accumulate_grad(&ds);
                }
            }));
        }
        Ok(out)
    }

    pub fn relu(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out: Vec<T> = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(out, x.shape(), record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let xd = x2.data();
                let dx: Vec<T> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                drop(xd);
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    pub fn sigmoid(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out: Vec<T> = x
            .data()
            .iter()
            .map(|&v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(out, x.shape(), record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let yd = o2.data();
                let dx: Vec<T> =
                    g.iter().zip(yd.iter()).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect();
                drop(yd);
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    /// Natural log with the argument clamped at 1e-12, so a zero probability
    /// yields a large finite value instead of -inf.
    pub fn safe_log(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let floor = T::from_f(1e-12);
        let out: Vec<T> = x.data().iter().map(|&v| v.max(floor).ln()).collect();
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(out, x.shape(), record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let xd = x2.data();
                let dx: Vec<T> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gi, &xi)| if xi > floor { gi / xi } else { T::zero() })
                    .collect();
                drop(xd);
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    /// Numerically stable softmax along `axis`, with optional masking.
    ///
    /// Masked positions are excluded from the normalization and come out as
    /// exact zeros. A slice whose positions are all masked is a contract
    /// violation.
    pub fn softmax(&self, x: &Tensor<T>, axis: usize, mask: Option<&Mask>) -> Result<Tensor<T>> {
        let sh = x.shape().to_vec();
        if axis >= sh.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {sh:?}")));
        }
        if let Some(m) = mask {
            if !is_suffix(&sh, m.shape()) {
                return Err(Error::Shape(format!(
                    "softmax mask shape {:?} does not broadcast to {sh:?}",
                    m.shape()
                )));
            }
        }
        let len = sh[axis];
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let mask_data: Option<(Vec<bool>, usize)> =
            mask.map(|m| (m.data().to_vec(), m.numel().max(1)));
        let allowed = |flat: usize| -> bool {
            match &mask_data {
                Some((md, mn)) => md[flat % mn],
                None => true,
            }
        };
        let mut out = vec![T::zero(); x.numel()];
        {
            let xd = x.data();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let mut max: Option<T> = None;
                    for j in 0..len {
                        if allowed(idx(j)) {
                            let v = xd[idx(j)];
                            max = Some(match max {
                                Some(m) => m.max(v),
                                None => v,
                            });
                        }
                    }
                    let Some(max) = max else {
                        return Err(Error::Contract(format!(
                            "softmax: every position masked along axis {axis} (outer {o}, inner {i})"
                        )));
                    };
                    let mut sum = T::zero();
                    for j in 0..len {
                        if allowed(idx(j)) {
                            let e = (xd[idx(j)] - max).exp();
                            out[idx(j)] = e;
                            sum += e;
                        }
                    }
                    for j in 0..len {
                        if allowed(idx(j)) {
                            out[idx(j)] = out[idx(j)] / sum;
                        }
                    }
                }
            }
        }
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(out, &sh, record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let yd = o2.data();
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += g[idx(j)] * yd[idx(j)];
                        }
                        for j in 0..len {
                            dx[idx(j)] = yd[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                drop(yd);
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    /// Layer normalization over the last dimension followed by a learned
    /// affine transform.
    pub fn layer_norm(
        &self,
        x: &Tensor<T>,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>> {
        let sh = x.shape().to_vec();
        let d = *sh.last().ok_or_else(|| {
            Error::Shape("layer_norm requires rank >= 1 input".to_string())
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be [{d}], got {:?} and {:?}",
                gain.shape(),
                bias.shape()
            )));
        }
        let rows = x.numel() / d;
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        {
            let xd = x.data();
            let gd = gain.data();
            let bd = bias.data();
            let dn = T::from_f(d as f64);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let s = (var + eps).sqrt();
                inv_std[r] = T::one() / s;
                for j in 0..d {
                    let h = (row[j] - mean) * inv_std[r];
                    xhat[r * d + j] = h;
                    out[r * d + j] = gd[j] * h + bd[j];
                }
            }
        }
        let record = self.should_record(&[x, gain, bias]);
        let out = Tensor::with_flag(out, &sh, record);
        if record {
            let (x2, g2, b2, o2) = (x.clone(), gain.clone(), bias.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let gd = g2.data();
                let dn = T::from_f(d as f64);
                let mut dx = vec![T::zero(); rows * d];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for r in 0..rows {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let go = g[r * d + j];
                        let h = xhat[r * d + j];
                        dgain[j] += go * h;
                        dbias[j] += go;
                        let dh = go * gd[j];
                        m1 += dh;
                        m2 += dh * h;
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    for j in 0..d {
                        let h = xhat[r * d + j];
                        let dh = g[r * d + j] * gd[j];
                        dx[r * d + j] = (dh - m1 - h * m2) * inv_std[r];
                    }
                }
                drop(gd);
                if x2.requires_grad() {
                    x2.accumulate_grad(&dx);
                }
                if g2.requires_grad() {
                    g2.accumulate_grad(&dgain);
                }
                if b2.requires_grad() {
                    b2.accumulate_grad(&dbias);
                }
            }));
        }
        Ok(out)
    }

    /// Concatenate tensors along the last dimension; all other dimensions
    /// must match.
    pub fn concat_last(&self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_last of zero tensors".to_string()))?;
        let lead = &first.shape()[..first.rank() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if p.rank() == 0 || &p.shape()[..p.rank() - 1] != lead {
                return Err(Error::Shape(format!(
                    "concat_last: incompatible shapes {:?} and {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
            widths.push(*p.shape().last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![T::zero(); rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let pd = p.data();
                out[r * total + off..r * total + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let mut oshape = lead.to_vec();
        oshape.push(total);
        let inputs: Vec<&Tensor<T>> = parts.to_vec();
        let record = self.should_record(&inputs);
        let out = Tensor::with_flag(out, &oshape, record);
        if record {
            let owned: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
            let o2 = out.clone();
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let mut off = 0;
                for (p, &w) in owned.iter().zip(&widths) {
                    if p.requires_grad() {
                        let mut dp = vec![T::zero(); rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        p.accumulate_grad(&dp);
                    }
                    off += w;
                }
            }));
        }
        Ok(out)
    }

    /// Slice `len` columns of the last dimension starting at `start`.
    pub fn slice_last(&self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let sh = x.shape().to_vec();
        let w = *sh
            .last()
            .ok_or_else(|| Error::Shape("slice_last requires rank >= 1".to_string()))?;
        if start + len > w {
            return Err(Error::Shape(format!(
                "slice_last [{start}, {}) out of range for width {w}",
                start + len
            )));
        }
        let rows = x.numel() / w;
        let mut out = vec![T::zero(); rows * len];
        {
            let xd = x.data();
            for r in 0..rows {
                out[r * len..(r + 1) * len].copy_from_slice(&xd[r * w + start..r * w + start + len]);
            }
        }
        let mut oshape = sh.clone();
        *oshape.last_mut().unwrap() = len;
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(out, &oshape, record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let mut dx = vec![T::zero(); rows * w];
                for r in 0..rows {
                    dx[r * w + start..r * w + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    /// Slice `len` rows along the first axis starting at `start`.
    pub fn slice_axis0(&self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let sh = x.shape().to_vec();
        let rows = *sh
            .first()
            .ok_or_else(|| Error::Shape("slice_axis0 requires rank >= 1".to_string()))?;
        if start + len > rows {
            return Err(Error::Shape(format!(
                "slice_axis0 [{start}, {}) out of range for {rows} rows",
                start + len
            )));
        }
        let chunk = x.numel() / rows;
        let out = x.data()[start * chunk..(start + len) * chunk].to_vec();
        let mut oshape = sh.clone();
        oshape[0] = len;
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(out, &oshape, record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let mut dx = vec![T::zero(); rows * chunk];
                dx[start * chunk..(start + len) * chunk].copy_from_slice(&g);
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    /// Extend the last dimension with `extra` zero columns.
    pub fn pad_last(&self, x: &Tensor<T>, extra: usize) -> Result<Tensor<T>> {
        let sh = x.shape().to_vec();
        let w = *sh
            .last()
            .ok_or_else(|| Error::Shape("pad_last requires rank >= 1".to_string()))?;
        let rows = x.numel() / w;
        let nw = w + extra;
        let mut out = vec![T::zero(); rows * nw];
        {
            let xd = x.data();
            for r in 0..rows {
                out[r * nw..r * nw + w].copy_from_slice(&xd[r * w..(r + 1) * w]);
            }
        }
        let mut oshape = sh.clone();
        *oshape.last_mut().unwrap() = nw;
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(out, &oshape, record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let mut dx = vec![T::zero(); rows * w];
                for r in 0..rows {
                    dx[r * w..(r + 1) * w].copy_from_slice(&g[r * nw..r * nw + w]);
                }
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    /// Reinterpret the flat buffer under a new shape of equal element count.
    pub fn reshape(&self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                x.shape()
            )));
        }
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(x.to_vec(), shape, record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                x2.accumulate_grad(&g);
            }));
        }
        Ok(out)
    }

    /// Gather rows of an embedding table: `out[i] = table[ids[i]]`.
    pub fn embedding(&self, table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        if table.rank() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be rank 2, got {:?}",
                table.shape()
            )));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!(
                    "embedding id {id} out of range (table has {v} rows)"
                )));
            }
        }
        let mut out = vec![T::zero(); ids.len() * d];
        {
            let td = table.data();
            for (row, &id) in ids.iter().enumerate() {
                out[row * d..(row + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
            }
        }
        let record = self.should_record(&[table]);
        let out = Tensor::with_flag(out, &[ids.len(), d], record);
        if record {
            let (t2, o2) = (table.clone(), out.clone());
            let ids2 = ids.to_vec();
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let mut dt = vec![T::zero(); t2.numel()];
                for (row, &id) in ids2.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                t2.accumulate_grad(&dt);
            }));
        }
        Ok(out)
    }

    /// From a matrix, pick one element per row: `out[i] = x[i, ids[i]]`.
    pub fn pick_per_row(&self, x: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        if x.rank() != 2 || ids.len() != x.shape()[0] {
            return Err(Error::Shape(format!(
                "pick_per_row expects [r, c] with {} ids, got {:?} with {} ids",
                x.shape().first().copied().unwrap_or(0),
                x.shape(),
                ids.len()
            )));
        }
        let c = x.shape()[1];
        for (row, &id) in ids.iter().enumerate() {
            if id >= c {
                return Err(Error::Index(format!(
                    "pick_per_row id {id} out of range at row {row} (width {c})"
                )));
            }
        }
        let out: Vec<T> = {
            let xd = x.data();
            ids.iter().enumerate().map(|(row, &id)| xd[row * c + id]).collect()
        };
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(out, &[ids.len()], record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            let ids2 = ids.to_vec();
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let mut dx = vec![T::zero(); x2.numel()];
                for (row, &id) in ids2.iter().enumerate() {
                    dx[row * c + id] += g[row];
                }
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    /// Scatter-add attention mass onto target columns: for each source
    /// position `i`, `out[t, targets[i]] += weights[t, i]`.
    pub fn scatter_columns(
        &self,
        weights: &Tensor<T>,
        targets: &[usize],
        width: usize,
    ) -> Result<Tensor<T>> {
        if weights.rank() != 2 || weights.shape()[1] != targets.len() {
            return Err(Error::Shape(format!(
                "scatter_columns expects [t, {}] weights, got {:?}",
                targets.len(),
                weights.shape()
            )));
        }
        for &tgt in targets {
            if tgt >= width {
                return Err(Error::Index(format!(
                    "extended id {tgt} exceeds distribution width {width}"
                )));
            }
        }
        let (t, s) = (weights.shape()[0], weights.shape()[1]);
        let mut out = vec![T::zero(); t * width];
        {
            let wd = weights.data();
            for row in 0..t {
                for (i, &tgt) in targets.iter().enumerate() {
                    out[row * width + tgt] += wd[row * s + i];
                }
            }
        }
        let record = self.should_record(&[weights]);
        let out = Tensor::with_flag(out, &[t, width], record);
        if record {
            let (w2, o2) = (weights.clone(), out.clone());
            let targets2 = targets.to_vec();
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let mut dw = vec![T::zero(); t * s];
                for row in 0..t {
                    for (i, &tgt) in targets2.iter().enumerate() {
                        dw[row * s + i] = g[row * width + tgt];
                    }
                }
                w2.accumulate_grad(&dw);
            }));
        }
        Ok(out)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s: T = x.data().iter().copied().sum();
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(vec![s], &[], record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                x2.accumulate_grad(&vec![g[0]; x2.numel()]);
            }));
        }
        Ok(out)
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = T::from_f(x.numel() as f64);
        let s: T = x.data().iter().copied().sum::<T>() / n;
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(vec![s], &[], record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                x2.accumulate_grad(&vec![g[0] / n; x2.numel()]);
            }));
        }
        Ok(out)
    }

    /// Inverted dropout: keeps each unit with probability `1 - p` and scales
    /// survivors by `1/(1-p)`, so inference needs no rescaling. Identity when
    /// `p == 0` or the tape is not in training mode.
    pub fn dropout(&self, x: &Tensor<T>, p: f64) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let Some(rng) = &self.dropout_rng else {
            return Ok(x.clone());
        };
        if p == 0.0 {
            return Ok(x.clone());
        }
        let scale = T::from_f(1.0 / (1.0 - p));
        let factors: Vec<T> = {
            let mut rng = rng.borrow_mut();
            (0..x.numel())
                .map(|_| if rng.gen::<f64>() >= p { scale } else { T::zero() })
                .collect()
        };
        let out: Vec<T> = x.data().iter().zip(&factors).map(|(&v, &f)| v * f).collect();
        let record = self.should_record(&[x]);
        let out = Tensor::with_flag(out, x.shape(), record);
        if record {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let dx: Vec<T> = g.iter().zip(&factors).map(|(&gi, &f)| gi * f).collect();
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }
}
