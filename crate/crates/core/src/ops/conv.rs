//! Grouped, dilated 2-D convolution and average pooling over `[C, H, W]`.
//!
//! Pointwise and depthwise convolutions take dedicated paths; everything else
//! goes through a general row-wise kernel. Each path accumulates in a fixed
//! order (bias first, then input channel, kernel row, kernel column, with
//! weight-gradient reductions split into fixed lanes) so repeated runs are
//! bit-identical.

use alloc::format;
use alloc::vec;

use crate::error::{arg_err, shape_err, Result};
use crate::ops::linalg::{dot, gemm};
use crate::real::Real;
use crate::tensor::Tensor;

/// Stride, dilation, zero padding and group count of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    /// Stride 1 with the padding that preserves spatial size for an odd `kernel`.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            groups,
        }
    }

    pub fn pointwise() -> Self {
        Self::same(1, 1, 1)
    }

    fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

pub(crate) struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_per_group: usize,
    cout_per_group: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

pub(crate) fn conv_dims<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Result<ConvDims> {
    let (cin, h, w) = input.dims3("conv2d")?;
    let [cout, cin_per_group, kh, kw] = *weight.shape() else {
        return Err(shape_err(
            "conv2d",
            format!(
                "weight must be [C_out, C_in/groups, kH, kW], got {:?}",
                weight.shape()
            ),
        ));
    };
    if g.stride == 0 || g.dilation == 0 || g.groups == 0 {
        return Err(arg_err("conv2d", "stride, dilation and groups must be positive"));
    }
    if cin % g.groups != 0 || cout % g.groups != 0 {
        return Err(shape_err(
            "conv2d",
            format!(
                "channels in={cin} out={cout} not divisible by groups={}",
                g.groups
            ),
        ));
    }
    if cin / g.groups != cin_per_group {
        return Err(shape_err(
            "conv2d",
            format!(
                "input has {cin} channels ({} per group) but weight expects {cin_per_group} per group",
                cin / g.groups
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("bias must be [{cout}], got {:?}", b.shape()),
            ));
        }
    }
    let (Some(ho), Some(wo)) = (g.out_extent(h, kh), g.out_extent(w, kw)) else {
        return Err(shape_err(
            "conv2d",
            format!("kernel {kh}x{kw} does not fit input {h}x{w}"),
        ));
    };
    Ok(ConvDims {
        cin,
        h,
        w,
        cout,
        cin_per_group,
        cout_per_group: cout / g.groups,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Range of output columns `ox` whose input column `ox*stride + offset` lies in `[0, w)`.
#[inline]
fn valid_range(offset: isize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let s = stride as isize;
    // smallest ox with ox*s + offset >= 0
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    // largest ox with ox*s + offset <= w-1, exclusive bound
    let hi_incl = (w as isize - 1 - offset).div_euclid(s);
    let hi = (hi_incl + 1).clamp(0, wo as isize);
    let lo = lo.clamp(0, hi);
    (lo as usize, hi as usize)
}

/// 2-D convolution of a `[C_in, H, W]` input with a `[C_out, C_in/groups, kH, kW]` weight.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geometry: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, weight, bias, &geometry)?;
    let mut out = vec![T::ZERO; d.cout * d.ho * d.wo];
    let x = input.data();
    let wt = weight.data();
    let g = geometry;
    let plane_out = d.ho * d.wo;
    if let Some(b) = bias {
        for (o, &bv) in out.chunks_exact_mut(plane_out).zip(b.data()) {
            o.fill(bv);
        }
    }
    match path(&d, &g) {
        Path::Pointwise => {
            gemm(wt, x, d.cout, d.cin, plane_out, false, false, &mut out);
            return Tensor::new([d.cout, d.ho, d.wo], out);
        }
        Path::Depthwise => {
            depthwise_forward(x, wt, &d, &g, &mut out);
            return Tensor::new([d.cout, d.ho, d.wo], out);
        }
        Path::General => {}
    }
    for oc in 0..d.cout {
        let grp = oc / d.cout_per_group;
        let o = &mut out[oc * plane_out..(oc + 1) * plane_out];
        for icg in 0..d.cin_per_group {
            let ic = grp * d.cin_per_group + icg;
            let xin = &x[ic * d.h * d.w..(ic + 1) * d.h * d.w];
            for ky in 0..d.kh {
                let dy = (ky * g.dilation) as isize - g.padding as isize;
                for kx in 0..d.kw {
                    let dx = (kx * g.dilation) as isize - g.padding as isize;
                    let wv = wt[((oc * d.cin_per_group + icg) * d.kh + ky) * d.kw + kx];
                    let (olo, ohi) = valid_range(dx, g.stride, d.w, d.wo);
                    if olo >= ohi {
                        continue;
                    }
                    for oy in 0..d.ho {
                        let iy = (oy * g.stride) as isize + dy;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let xrow = &xin[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let orow = &mut o[oy * d.wo..(oy + 1) * d.wo];
                        if g.stride == 1 {
                            let ilo = (olo as isize + dx) as usize;
                            let src = &xrow[ilo..ilo + (ohi - olo)];
                            for (ov, &xv) in orow[olo..ohi].iter_mut().zip(src) {
                                *ov += wv * xv;
                            }
                        } else {
                            for ox in olo..ohi {
                                let ix = (ox * g.stride) as isize + dx;
                                orow[ox] += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([d.cout, d.ho, d.wo], out)
}

/// Gradients of `conv2d` with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    geometry: ConvGeometry,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let d = conv_dims(input, weight, None, &geometry).expect("validated in forward");
    let g = geometry;
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let plane_out = d.ho * d.wo;
    let plane_in = d.h * d.w;
    let mut gx = need_input.then(|| vec![T::ZERO; d.cin * plane_in]);
    let mut gw = need_weight.then(|| vec![T::ZERO; weight.len()]);
    match path(&d, &g) {
        Path::Pointwise => {
            if let Some(gx) = gx.as_mut() {
                gemm(wt, go, d.cin, d.cout, plane_in, true, false, gx);
            }
            if let Some(gw) = gw.as_mut() {
                gemm(go, x, d.cout, plane_in, d.cin, false, true, gw);
            }
        }
        Path::Depthwise => depthwise_backward(x, wt, go, &d, &g, gx.as_deref_mut(), gw.as_deref_mut()),
        Path::General => general_backward(x, wt, go, &d, &g, gx.as_deref_mut(), gw.as_deref_mut()),
    }
    let gb = has_bias.then(|| {
        Tensor::from_fn([d.cout], |oc| {
            go[oc * plane_out..(oc + 1) * plane_out]
                .iter()
                .fold(T::ZERO, |s, &v| s + v)
        })
    });
    (
        gx.map(|v| Tensor::new(input.shape().to_vec(), v).expect("input shape")),
        gw.map(|v| Tensor::new(weight.shape().to_vec(), v).expect("weight shape")),
        gb,
    )
}

enum Path {
    Pointwise,
    Depthwise,
    General,
}

fn path(d: &ConvDims, g: &ConvGeometry) -> Path {
    if d.kh == 1 && d.kw == 1 && g.stride == 1 && g.padding == 0 && g.groups == 1 {
        Path::Pointwise
    } else if d.cin_per_group == 1 && d.cout_per_group == 1 && g.stride == 1 {
        Path::Depthwise
    } else {
        Path::General
    }
}

/// Copies one channel into a zero-bordered plane of width `w + 2*pad`.
fn padded_plane<T: Real>(src: &[T], h: usize, w: usize, pad: usize) -> alloc::vec::Vec<T> {
    let pw = w + 2 * pad;
    let mut p = vec![T::ZERO; (h + 2 * pad) * pw];
    for y in 0..h {
        let start = (y + pad) * pw + pad;
        p[start..start + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
    p
}

// The depthwise kernels work on "wide" planes whose rows have the padded
// width, so each tap is one long contiguous saxpy or dot product. Columns past
// `wo` hold garbage in the forward pass and zeros in the backward pass.

fn depthwise_forward<T: Real>(x: &[T], wt: &[T], d: &ConvDims, g: &ConvGeometry, out: &mut [T]) {
    let pw = d.w + 2 * g.padding;
    let taps = d.kh * d.kw;
    let len = (d.ho - 1) * pw + d.wo;
    let mut wide = vec![T::ZERO; len];
    for c in 0..d.cout {
        let plane = padded_plane(&x[c * d.h * d.w..(c + 1) * d.h * d.w], d.h, d.w, g.padding);
        let k = &wt[c * taps..(c + 1) * taps];
        let o = &mut out[c * d.ho * d.wo..(c + 1) * d.ho * d.wo];
        for oy in 0..d.ho {
            wide[oy * pw..oy * pw + d.wo].copy_from_slice(&o[oy * d.wo..(oy + 1) * d.wo]);
        }
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let wv = k[ky * d.kw + kx];
                let off = ky * g.dilation * pw + kx * g.dilation;
                for (ov, &xv) in wide.iter_mut().zip(&plane[off..off + len]) {
                    *ov += wv * xv;
                }
            }
        }
        for oy in 0..d.ho {
            o[oy * d.wo..(oy + 1) * d.wo].copy_from_slice(&wide[oy * pw..oy * pw + d.wo]);
        }
    }
}

fn depthwise_backward<T: Real>(
    x: &[T],
    wt: &[T],
    go: &[T],
    d: &ConvDims,
    g: &ConvGeometry,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let pad = g.padding;
    let pw = d.w + 2 * pad;
    let taps = d.kh * d.kw;
    let plane_out = d.ho * d.wo;
    let plane_in = d.h * d.w;
    let len = (d.ho - 1) * pw + d.wo;
    let mut wide = vec![T::ZERO; len];
    for c in 0..d.cout {
        let gplane = &go[c * plane_out..(c + 1) * plane_out];
        for oy in 0..d.ho {
            wide[oy * pw..oy * pw + d.wo].copy_from_slice(&gplane[oy * d.wo..(oy + 1) * d.wo]);
        }
        let k = &wt[c * taps..(c + 1) * taps];
        if let Some(gx) = gx.as_deref_mut() {
            let mut acc = vec![T::ZERO; (d.h + 2 * pad) * pw];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = k[ky * d.kw + kx];
                    let off = ky * g.dilation * pw + kx * g.dilation;
                    for (dv, &gv) in acc[off..off + len].iter_mut().zip(&wide) {
                        *dv += wv * gv;
                    }
                }
            }
            let dst = &mut gx[c * plane_in..(c + 1) * plane_in];
            for y in 0..d.h {
                let start = (y + pad) * pw + pad;
                dst[y * d.w..(y + 1) * d.w].copy_from_slice(&acc[start..start + d.w]);
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            let plane = padded_plane(&x[c * plane_in..(c + 1) * plane_in], d.h, d.w, pad);
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let off = ky * g.dilation * pw + kx * g.dilation;
                    gw[c * taps + ky * d.kw + kx] += dot(&plane[off..off + len], &wide);
                }
            }
        }
    }
}

fn general_backward<T: Real>(
    x: &[T],
    wt: &[T],
    go: &[T],
    d: &ConvDims,
    g: &ConvGeometry,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let plane_out = d.ho * d.wo;
    let plane_in = d.h * d.w;
    for oc in 0..d.cout {
        let grp = oc / d.cout_per_group;
        let gplane = &go[oc * plane_out..(oc + 1) * plane_out];
        for icg in 0..d.cin_per_group {
            let ic = grp * d.cin_per_group + icg;
            for ky in 0..d.kh {
                let dy = (ky * g.dilation) as isize - g.padding as isize;
                for kx in 0..d.kw {
                    let dx = (kx * g.dilation) as isize - g.padding as isize;
                    let widx = ((oc * d.cin_per_group + icg) * d.kh + ky) * d.kw + kx;
                    let wv = wt[widx];
                    let (olo, ohi) = valid_range(dx, g.stride, d.w, d.wo);
                    if olo >= ohi {
                        continue;
                    }
                    let mut acc = T::ZERO;
                    for oy in 0..d.ho {
                        let iy = (oy * g.stride) as isize + dy;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let row_in = ic * plane_in + iy as usize * d.w;
                        let grow = &gplane[oy * d.wo..(oy + 1) * d.wo];
                        if g.stride == 1 {
                            let ilo = (olo as isize + dx) as usize;
                            let n = ohi - olo;
                            if let Some(gx) = gx.as_deref_mut() {
                                let dst = &mut gx[row_in + ilo..row_in + ilo + n];
                                for (dv, &gv) in dst.iter_mut().zip(&grow[olo..ohi]) {
                                    *dv += wv * gv;
                                }
                            }
                            if gw.is_some() {
                                acc += dot(&x[row_in + ilo..row_in + ilo + n], &grow[olo..ohi]);
                            }
                        } else {
                            for ox in olo..ohi {
                                let ix = ((ox * g.stride) as isize + dx) as usize;
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[row_in + ix] += wv * grow[ox];
                                }
                                acc += x[row_in + ix] * grow[ox];
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Kernel sizes accepted by the separable and dilated expert convolutions.
pub const SEPARABLE_KERNELS: [usize; 4] = [1, 3, 5, 7];

/// Depthwise `kernel x kernel` convolution followed by a pointwise one.
pub fn separable_conv2d<T: Real>(
    input: &Tensor<T>,
    depthwise_weight: &Tensor<T>,
    pointwise_weight: &Tensor<T>,
    kernel: usize,
) -> Result<Tensor<T>> {
    if !SEPARABLE_KERNELS.contains(&kernel) {
        return Err(crate::Error::Config(format!(
            "separable kernel {kernel} not in {SEPARABLE_KERNELS:?}"
        )));
    }
    let (c, _, _) = input.dims3("separable_conv2d")?;
    let dw = conv2d(input, depthwise_weight, None, ConvGeometry::same(kernel, 1, c))?;
    conv2d(&dw, pointwise_weight, None, ConvGeometry::pointwise())
}

/// Average pooling with zero padding; the divisor is always `kernel²`.
pub fn avg_pool2d<T: Real>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3("avg_pool2d")?;
    let (ho, wo) = pool_out(h, w, kernel, stride, padding)?;
    let inv = T::ONE / T::from_usize(kernel * kernel);
    let x = input.data();
    let mut out = vec![T::ZERO; c * ho * wo];
    for ch in 0..c {
        let xin = &x[ch * h * w..(ch + 1) * h * w];
        let o = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::ZERO;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        s += xin[iy as usize * w + ix as usize];
                    }
                }
                o[oy * wo + ox] = s * inv;
            }
        }
    }
    Tensor::new([c, ho, wo], out)
}

fn pool_out(h: usize, w: usize, k: usize, s: usize, p: usize) -> Result<(usize, usize)> {
    if k == 0 || s == 0 {
        return Err(arg_err("avg_pool2d", "kernel and stride must be positive"));
    }
    if h + 2 * p < k || w + 2 * p < k {
        return Err(shape_err(
            "avg_pool2d",
            format!("window {k} larger than padded input {h}x{w}"),
        ));
    }
    Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
}

pub(crate) fn avg_pool2d_backward<T: Real>(
    input_shape: &[usize],
    kernel: usize,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (ho, wo) = pool_out(h, w, kernel, stride, padding).expect("validated in forward");
    let inv = T::ONE / T::from_usize(kernel * kernel);
    let go = grad_out.data();
    let mut gx = vec![T::ZERO; c * h * w];
    for ch in 0..c {
        let gi = &mut gx[ch * h * w..(ch + 1) * h * w];
        let g = &go[ch * ho * wo..(ch + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = g[oy * wo + ox] * inv;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gi[iy as usize * w + ix as usize] += gv;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("input shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution used as the reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: ConvGeometry) -> Tensor<f64> {
        let (cin, h, wd) = x.dims3("t").unwrap();
        let s = w.shape();
        let (cout, cpg, kh, kw) = (s[0], s[1], s[2], s[3]);
        let opg = cout / g.groups;
        let ho = (h + 2 * g.padding - g.dilation * (kh - 1) - 1) / g.stride + 1;
        let wo = (wd + 2 * g.padding - g.dilation * (kw - 1) - 1) / g.stride + 1;
        let _ = cin;
        let mut out = Tensor::zeros([cout, ho, wo]);
        for oc in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for icg in 0..cpg {
                        let ic = (oc / opg) * cpg + icg;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.data()[((oc * cpg + icg) * kh + ky) * kw + kx]
                                        * x.data()[(ic * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn pointwise_all_ones_sums_channels() {
        let x = Tensor::new([2, 1, 2], vec![1.0f32, 2.0, 10.0, 20.0]).unwrap();
        let w = Tensor::ones([1, 2, 1, 1]);
        let y = conv2d(&x, &w, None, ConvGeometry::pointwise()).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0]);
    }

    #[test]
    fn depthwise_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[3, 5, 6]);
        let mut w = Tensor::zeros([3, 1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 9 + 4] = 1.0;
        }
        let y = conv2d(&x, &w, None, ConvGeometry::same(3, 1, 3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dilated_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[1, 5, 5]);
        let w = rand_tensor(&mut rng, &[1, 1, 3, 3]);
        let g = ConvGeometry {
            stride: 1,
            dilation: 2,
            padding: 2,
            groups: 1,
        };
        let y = conv2d(&x, &w, None, g).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        assert!(rel_err(&y, &naive_conv(&x, &w, None, g)) < 1e-6);
    }

    #[test]
    fn random_geometries_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kernel in [1usize, 3, 5, 7] {
            for dilation in [1usize, 2, 3] {
                for _ in 0..100 {
                    let cin = rng.random_range(1..4);
                    let cout = rng.random_range(1..4);
                    let h = rng.random_range(1..9);
                    let w = rng.random_range(1..9);
                    let g = ConvGeometry::same(kernel, dilation, 1);
                    let x = rand_tensor(&mut rng, &[cin, h, w]);
                    let wt = rand_tensor(&mut rng, &[cout, cin, kernel, kernel]);
                    let b = rand_tensor(&mut rng, &[cout]);
                    let y = conv2d(&x, &wt, Some(&b), g).unwrap();
                    assert_eq!(y.shape(), &[cout, h, w]);
                    assert!(rel_err(&y, &naive_conv(&x, &wt, Some(&b), g)) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn strided_and_grouped_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let groups = rng.random_range(1..3);
            let cin = groups * rng.random_range(1..3);
            let cout = groups * rng.random_range(1..3);
            let g = ConvGeometry {
                stride: rng.random_range(1..3),
                dilation: rng.random_range(1..3),
                padding: rng.random_range(0..3),
                groups,
            };
            let x = rand_tensor(&mut rng, &[cin, 7, 6]);
            let wt = rand_tensor(&mut rng, &[cout, cin / groups, 3, 3]);
            let y = conv2d(&x, &wt, None, g).unwrap();
            assert!(rel_err(&y, &naive_conv(&x, &wt, None, g)) < 1e-6);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros([3, 4, 4]);
        let w = Tensor::<f32>::zeros([2, 2, 3, 3]);
        let err = conv2d(&x, &w, None, ConvGeometry::same(3, 1, 1)).unwrap_err();
        assert!(matches!(err, crate::Error::Shape { op: "conv2d", .. }));
    }

    #[test]
    fn separable_identity_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 6, 6]);
        let mut dw = Tensor::zeros([2, 1, 3, 3]);
        dw.data_mut()[4] = 1.0;
        dw.data_mut()[13] = 1.0;
        let pw = Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(separable_conv2d(&x, &dw, &pw, 3).unwrap(), x);

        let dw = rand_tensor(&mut rng, &[2, 1, 5, 5]);
        let pw = rand_tensor(&mut rng, &[3, 2, 1, 1]);
        let y = separable_conv2d(&x, &dw, &pw, 5).unwrap();
        let mid = naive_conv(&x, &dw, None, ConvGeometry::same(5, 1, 2));
        let oracle = naive_conv(&mid, &pw, None, ConvGeometry::pointwise());
        assert!(rel_err(&y, &oracle) < 1e-6);

        let dw1 = rand_tensor(&mut rng, &[2, 1, 1, 1]);
        let y1 = separable_conv2d(&x, &dw1, &pw, 1).unwrap();
        let mid = conv2d(&x, &dw1, None, ConvGeometry::same(1, 1, 2)).unwrap();
        assert_eq!(y1, conv2d(&mid, &pw, None, ConvGeometry::pointwise()).unwrap());

        assert!(matches!(
            separable_conv2d(&x, &dw, &pw, 4),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn avg_pool_examples() {
        let x = Tensor::full([1, 4, 4], 2.5f64);
        let y = avg_pool2d(&x, 3, 1, 1).unwrap();
        assert_eq!(y.data()[5], 2.5);
        assert_eq!(y.data()[10], 2.5);

        let x = Tensor::full([1, 1, 1], 9.0f64);
        assert_eq!(avg_pool2d(&x, 3, 1, 1).unwrap().data(), &[1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[2, 4, 4]);
        let y = avg_pool2d(&x, 3, 1, 1).unwrap();
        for c in 0..2 {
            for oy in 0..4isize {
                for ox in 0..4isize {
                    let mut s = 0.0;
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (iy, ix) = (oy + dy, ox + dx);
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                s += x.data()[c * 16 + (iy * 4 + ix) as usize];
                            }
                        }
                    }
                    let got = y.data()[c * 16 + (oy * 4 + ox) as usize];
                    assert!((got - s / 9.0).abs() < 1e-12);
                }
            }
        }
        let _: Vec<f64> = y.into_data();
    }
}
