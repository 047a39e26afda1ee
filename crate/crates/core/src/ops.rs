//! Dense forward kernels and their vector-Jacobian products.
//!
//! The public functions here are the forward-only entry points
//! (`affine`, `conv2d`, `softmax`, `pointwise`); the `*_backward` helpers are
//! shared with the tape in [`crate::autodiff`].

use crate::error::{shape_err, Error, Result};
use crate::sparse::flops::MacCount;
use crate::tensor::{strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => {
                if v > 0.0 || v.is_nan() {
                    v
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            // subgradient 0 at 0
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn pointwise(x: &Tensor, f: Activation) -> Tensor {
    Tensor::from_raw(x.shape().to_vec(), x.data().iter().map(|&v| f.apply(v)).collect())
}

pub(crate) fn pointwise_backward(x: &Tensor, y: &Tensor, gy: &Tensor, f: Activation) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(gy.data())
        .map(|((&xv, &yv), &g)| g * f.derivative(xv, yv))
        .collect();
    Tensor::from_raw(x.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// matrix products

/// `a [m,k] · b [k,n]`
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k,m]ᵀ · b [k,n]`
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// affine

/// `y = x Wᵀ + b` along the trailing axis of `x`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (out_f, in_f) = check_matrix("affine", w)?;
    let trailing = *x.shape().last().expect("tensor rank >= 1");
    if trailing != in_f {
        return Err(shape_err(
            "affine",
            format!("input trailing extent {trailing} != weight in-features {in_f}"),
        ));
    }
    if b.shape() != [out_f] {
        return Err(shape_err(
            "affine",
            format!("bias shape {:?} != [out-features {out_f}]", b.shape()),
        ));
    }
    let rows = x.numel() / in_f;
    let mut y = matmul_nt_raw(x.data(), w.data(), rows, in_f, out_f);
    for r in 0..rows {
        for (o, bv) in y[r * out_f..(r + 1) * out_f].iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Ok(Tensor::from_raw(shape, y))
}

pub(crate) fn affine_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / in_f;
    let gx = matmul_raw(gy.data(), w.data(), rows, out_f, in_f);
    let gw = matmul_tn_raw(gy.data(), x.data(), rows, out_f, in_f);
    let mut gb = vec![0.0; out_f];
    for r in 0..rows {
        for (g, v) in gb.iter_mut().zip(&gy.data()[r * out_f..(r + 1) * out_f]) {
            *g += v;
        }
    }
    (
        Tensor::from_raw(x.shape().to_vec(), gx),
        Tensor::from_raw(w.shape().to_vec(), gw),
        Tensor::from_raw(vec![out_f], gb),
    )
}

// ---------------------------------------------------------------------------
// dense convolution

/// Geometry of a dense convolution over `[C, S, H, W]` (rank-3 inputs are
/// treated as `S = 1`).
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub s: usize,
    pub h: usize,
    pub w: usize,
    pub z: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geom(x: &Tensor, k: &Tensor, b: &Tensor, pad: usize) -> Result<ConvGeom> {
    let (cin, s, h, w) = match x.shape() {
        [c, h, w] => (*c, 1, *h, *w),
        [c, s, h, w] => (*c, *s, *h, *w),
        sh => return Err(shape_err("conv2d", format!("input must be [C,H,W] or [C,S,H,W], got {sh:?}"))),
    };
    let (cout, kcin, z) = match k.shape() {
        [o, i, zh, zw] if zh == zw => (*o, *i, *zh),
        sh => return Err(shape_err("conv2d", format!("kernel must be [C_out,C_in,z,z], got {sh:?}"))),
    };
    if z % 2 == 0 {
        return Err(Error::InvalidArgument(format!("conv2d kernel size {z} must be odd")));
    }
    if kcin != cin {
        return Err(shape_err("conv2d", format!("input channels {cin} != kernel C_in {kcin}")));
    }
    if b.shape() != [cout] {
        return Err(shape_err("conv2d", format!("bias shape {:?} != [C_out {cout}]", b.shape())));
    }
    if h + 2 * pad < z || w + 2 * pad < z {
        return Err(shape_err("conv2d", format!("kernel {z} larger than padded input {h}x{w}")));
    }
    Ok(ConvGeom {
        cin,
        cout,
        s,
        h,
        w,
        z,
        pad,
        oh: h + 2 * pad - z + 1,
        ow: w + 2 * pad - z + 1,
    })
}

/// Range of output columns `x` for which `x + d` lands inside `[0, len)`.
#[inline]
fn valid_range(d: isize, out_len: usize, in_len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (in_len as isize - d).clamp(0, out_len as isize) as usize;
    (lo.min(hi), hi)
}

/// Zero-padded cross-correlation. Returns the output and the MAC count
/// (z²·C_in·C_out per output location; dense layers execute everything).
pub fn conv2d(x: &Tensor, k: &Tensor, b: &Tensor, pad: usize) -> Result<(Tensor, MacCount)> {
    let g = conv_geom(x, k, b, pad)?;
    let out = conv2d_raw(&g, x.data(), k.data(), b.data());
    let shape = if x.rank() == 3 {
        vec![g.cout, g.oh, g.ow]
    } else {
        vec![g.cout, g.s, g.oh, g.ow]
    };
    Ok((Tensor::from_raw(shape, out), dense_conv_macs(&g)))
}

pub(crate) fn dense_conv_macs(g: &ConvGeom) -> MacCount {
    let per_location = (g.z * g.z * g.cin * g.cout) as u64;
    let n = per_location * (g.s * g.oh * g.ow) as u64;
    MacCount { dense: n, executed: n }
}

pub(crate) fn conv2d_raw(g: &ConvGeom, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut out = vec![0.0; g.cout * g.s * out_plane];
    for co in 0..g.cout {
        let oc = &mut out[co * g.s * out_plane..(co + 1) * g.s * out_plane];
        oc.fill(b[co]);
        for ci in 0..g.cin {
            let xc = &x[ci * g.s * in_plane..(ci + 1) * g.s * in_plane];
            for ky in 0..g.z {
                let dy = ky as isize - g.pad as isize;
                let (y0, y1) = valid_range(dy, g.oh, g.h);
                for kx in 0..g.z {
                    let wv = k[((co * g.cin + ci) * g.z + ky) * g.z + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - g.pad as isize;
                    let (x0, x1) = valid_range(dx, g.ow, g.w);
                    for s in 0..g.s {
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let orow = &mut oc[s * out_plane + y * g.ow..][x0..x1];
                            let ibase = s * in_plane + iy * g.w;
                            let irow = &xc[(ibase as isize + x0 as isize + dx) as usize..][..x1 - x0];
                            for (o, &iv) in orow.iter_mut().zip(irow) {
                                *o += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(gx, gk, gb)`.
pub(crate) fn conv2d_backward_raw(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut gx = vec![0.0; g.cin * g.s * in_plane];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; g.cout];
    for co in 0..g.cout {
        let gyc = &gy[co * g.s * out_plane..(co + 1) * g.s * out_plane];
        gb[co] = gyc.iter().sum();
        for ci in 0..g.cin {
            let xc = &x[ci * g.s * in_plane..(ci + 1) * g.s * in_plane];
            let gxc = &mut gx[ci * g.s * in_plane..(ci + 1) * g.s * in_plane];
            for ky in 0..g.z {
                let dy = ky as isize - g.pad as isize;
                let (y0, y1) = valid_range(dy, g.oh, g.h);
                for kx in 0..g.z {
                    let kidx = ((co * g.cin + ci) * g.z + ky) * g.z + kx;
                    let wv = k[kidx];
                    let dx = kx as isize - g.pad as isize;
                    let (x0, x1) = valid_range(dx, g.ow, g.w);
                    let mut acc = 0.0;
                    for s in 0..g.s {
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let grow = &gyc[s * out_plane + y * g.ow..][x0..x1];
                            let ibase = (s * in_plane + iy * g.w) as isize + x0 as isize + dx;
                            let irow = &xc[ibase as usize..][..x1 - x0];
                            let girow = &mut gxc[ibase as usize..][..x1 - x0];
                            for ((&gv, &iv), gi) in grow.iter().zip(irow).zip(girow.iter_mut()) {
                                acc += gv * iv;
                                *gi += wv * gv;
                            }
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    (gx, gk, gb)
}

// ---------------------------------------------------------------------------
// 2x2 max-pooling over the trailing two axes (high-side padding for odd sizes)

/// Returns pooled values and, per output, the flat input index of the max.
pub(crate) fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let rank = x.rank();
    if rank < 2 {
        return Err(shape_err("maxpool2", format!("need at least 2 axes, got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let planes = x.numel() / (h * w);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    let d = x.data();
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut besti = 0;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        let i = base + y * w + xx;
                        if d[i] > best || d[i].is_nan() {
                            best = d[i];
                            besti = i;
                        }
                    }
                }
                out.push(best);
                arg.push(besti);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    Ok((Tensor::from_raw(shape, out), arg))
}

// ---------------------------------------------------------------------------
// softmax over an axis set

/// For each flat element, the index of its softmax group (the flat index over
/// the axes that are *not* normalised).
pub(crate) fn softmax_groups(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, usize)> {
    if axes.is_empty() {
        return Err(shape_err("softmax", "axis set must be nonempty"));
    }
    let mut reduce = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() || reduce[a] {
            return Err(shape_err("softmax", format!("bad axis set {axes:?} for shape {shape:?}")));
        }
        reduce[a] = true;
    }
    let st = strides(shape);
    let kept: Vec<usize> = (0..shape.len()).filter(|&a| !reduce[a]).collect();
    let n_groups: usize = kept.iter().map(|&a| shape[a]).product();
    let n: usize = shape.iter().product();
    let groups = (0..n)
        .map(|flat| {
            let mut gid = 0;
            for &a in &kept {
                gid = gid * shape[a] + (flat / st[a]) % shape[a];
            }
            gid
        })
        .collect();
    Ok((groups, n_groups))
}

/// Softmax over the given axes jointly, one distribution per slice of the
/// remaining axes. Entries with `allowed[i] == false` are excluded from the
/// normaliser and come out as exactly zero.
pub(crate) fn softmax_grouped(x: &[f64], groups: &[usize], n_groups: usize, allowed: Option<&[bool]>) -> Vec<f64> {
    let ok = |i: usize| allowed.is_none_or(|a| a[i]);
    let mut max = vec![f64::NEG_INFINITY; n_groups];
    for (i, (&v, &g)) in x.iter().zip(groups).enumerate() {
        if ok(i) && v > max[g] {
            max[g] = v;
        }
    }
    let mut y: Vec<f64> = x
        .iter()
        .zip(groups)
        .enumerate()
        .map(|(i, (&v, &g))| if ok(i) { (v - max[g]).exp() } else { 0.0 })
        .collect();
    let mut sum = vec![0.0; n_groups];
    for (&v, &g) in y.iter().zip(groups) {
        sum[g] += v;
    }
    for (v, &g) in y.iter_mut().zip(groups) {
        if sum[g] > 0.0 {
            *v /= sum[g];
        }
    }
    y
}

pub(crate) fn softmax_backward(y: &[f64], gy: &[f64], groups: &[usize], n_groups: usize) -> Vec<f64> {
    let mut dot = vec![0.0; n_groups];
    for ((&yv, &gv), &g) in y.iter().zip(gy).zip(groups) {
        dot[g] += yv * gv;
    }
    y.iter()
        .zip(gy)
        .zip(groups)
        .map(|((&yv, &gv), &g)| yv * (gv - dot[g]))
        .collect()
}

/// Numerically stabilised softmax, normalising jointly over `axes`.
pub fn softmax(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let (groups, n_groups) = softmax_groups(x.shape(), axes)?;
    Ok(Tensor::from_raw(
        x.shape().to_vec(),
        softmax_grouped(x.data(), &groups, n_groups, None),
    ))
}

// ---------------------------------------------------------------------------
// layer norm over the trailing axis

pub(crate) const LN_EPS: f64 = 1e-5;

/// Returns `(y, xhat, rstd_per_row)`.
pub(crate) fn layer_norm_raw(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * g[j] + b[j];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(gx, gg, gb)`.
pub(crate) fn layer_norm_backward(
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    gy: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = xhat.len() / d;
    let mut gx = vec![0.0; xhat.len()];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let n = d as f64;
    for r in 0..rows {
        let xh = &xhat[r * d..(r + 1) * d];
        let gyr = &gy[r * d..(r + 1) * d];
        let mut sum_gxh = 0.0;
        let mut sum_gxh_xh = 0.0;
        for j in 0..d {
            gg[j] += gyr[j] * xh[j];
            gb[j] += gyr[j];
            let gxh = gyr[j] * g[j];
            sum_gxh += gxh;
            sum_gxh_xh += gxh * xh[j];
        }
        for j in 0..d {
            let gxh = gyr[j] * g[j];
            gx[r * d + j] = rstd[r] / n * (n * gxh - sum_gxh - xh[j] * sum_gxh_xh);
        }
    }
    (gx, gg, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_hand_product() {
        let x = t(&[2], &[1.0, 2.0]);
        let y = affine(&x, &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let y = affine(&x, &t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]), &t(&[2], &[1.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[4.0, 2.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_dimension() {
        let err = affine(&t(&[3], &[1.0; 3]), &Tensor::zeros(vec![2, 2]), &Tensor::zeros(vec![2]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("trailing extent 3"), "{err}");
        assert!(err.contains("in-features 2"), "{err}");
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let x = Tensor::zeros(vec![1, 4, 4]);
        let k = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(conv2d(&x, &k, &Tensor::zeros(vec![1]), 0).is_err());
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = Tensor::from_fn(vec![2, 3, 5], |i| (i as f64 * 0.37).sin());
        let mut k = Tensor::zeros(vec![2, 2, 3, 3]);
        // center tap, channel-diagonal
        k.data_mut()[4] = 1.0; // [0, 0, 1, 1]
        k.data_mut()[31] = 1.0; // [1, 1, 1, 1]
        let (y, _) = conv2d(&x, &k, &Tensor::zeros(vec![2]), 1).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn conv_mac_count_formula() {
        let x = Tensor::zeros(vec![2, 4, 4]);
        let (_, macs) = conv2d(&x, &Tensor::zeros(vec![4, 2, 3, 3]), &Tensor::zeros(vec![4]), 1).unwrap();
        assert_eq!(macs.dense, 16 * 9 * 2 * 4);
        assert_eq!(macs.dense, 1152);
        assert_eq!(macs.executed, macs.dense);
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&t(&[2], &[0.0, 0.0]), &[0]).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&t(&[2], &[2f64.ln(), 0.0]), &[0]).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_over_trailing_pair_normalises_each_slice() {
        let x = Tensor::from_fn(vec![3, 2, 4], |i| (i as f64).cos() * 3.0);
        let y = softmax(&x, &[1, 2]).unwrap();
        for s in 0..3 {
            let sum: f64 = y.data()[s * 8..(s + 1) * 8].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&x, &[]).is_err());
        assert!(softmax(&x, &[3]).is_err());
    }

    #[test]
    fn pointwise_examples() {
        let y = pointwise(&t(&[3], &[-3.0, 0.0, 3.0]), Activation::Relu);
        assert_eq!(y.data(), &[0.0, 0.0, 3.0]);
        assert_eq!(pointwise(&t(&[1], &[0.0]), Activation::Tanh).data(), &[0.0]);
        assert_eq!(Activation::Tanh.derivative(0.0, 0.0), 1.0);
        assert_eq!(Activation::Relu.derivative(0.0, 0.0), 0.0);
    }

    #[test]
    fn maxpool_odd_extent_pads_high_side() {
        let x = t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let (y, _) = maxpool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 6.0, 8.0, 9.0]);
    }
}
