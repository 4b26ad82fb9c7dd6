//! Batched matrix products, row softmax and top-k row selection.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Splits `shape` into (batch extents, rows, cols).
fn split_matrix<'a>(op: &'static str, shape: &'a [usize]) -> Result<(&'a [usize], usize, usize)> {
    match shape {
        [batch @ .., r, c] => Ok((batch, *r, *c)),
        _ => Err(shape_err(op, format!("expected at least 2 dims, got {shape:?}"))),
    }
}

/// Inner product accumulated in eight interleaved lanes that are combined
/// pairwise at the end, so the order is fixed yet vectorizable.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Register-tiled `out += A B` for row-major `B`; `a(i, kk)` reads `A`.
/// Every output still sums over `kk` in increasing order.
#[inline(always)]
fn gemm_nn<T: Real>(a: impl Fn(usize, usize) -> T, b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    const R: usize = 4;
    const L: usize = 8;
    let (mt, nt) = (m - m % R, n - n % L);
    for i in (0..mt).step_by(R) {
        for j in (0..nt).step_by(L) {
            let mut acc = [[T::ZERO; L]; R];
            for r in 0..R {
                acc[r].copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + L]);
            }
            for kk in 0..k {
                let bv: &[T; L] = b[kk * n + j..kk * n + j + L].try_into().expect("tile");
                for r in 0..R {
                    let av = a(i + r, kk);
                    for l in 0..L {
                        acc[r][l] += av * bv[l];
                    }
                }
            }
            for r in 0..R {
                out[(i + r) * n + j..(i + r) * n + j + L].copy_from_slice(&acc[r]);
            }
        }
    }
    // ragged edges: full rows below the tiled block, then the right margin
    let edge = |i: usize, j0: usize, j1: usize, out: &mut [T]| {
        let orow = &mut out[i * n + j0..i * n + j1];
        for kk in 0..k {
            let av = a(i, kk);
            for (o, &bv) in orow.iter_mut().zip(&b[kk * n + j0..kk * n + j1]) {
                *o += av * bv;
            }
        }
    };
    for i in 0..m {
        if i >= mt {
            edge(i, 0, n, out);
        } else if nt < n {
            edge(i, nt, n, out);
        }
    }
}

/// `out[m, n] = Σ_k A[m, k] B[k, n]` where `A` is stored `[m, k]` (or `[k, m]`
/// when `ta`) and `B` is stored `[k, n]` (or `[n, k]` when `tb`).
/// Each output sums over `k` in increasing order, except the `tb` layout which
/// uses [`dot`].
pub(crate) fn gemm<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    out: &mut [T],
) {
    match (ta, tb) {
        (false, false) => gemm_nn(|i, kk| a[i * k + kk], b, m, k, n, out),
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => gemm_nn(|i, kk| a[kk * m + i], b, m, k, n, out),
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = T::ZERO;
                    for kk in 0..k {
                        s += a[kk * m + i] * b[j * k + kk];
                    }
                    out[i * n + j] += s;
                }
            }
        }
    }
}

/// Batched product with optional transposition of either operand's last two dims.
pub fn matmul_ex<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let (ba, ar, ac) = split_matrix("matmul", a.shape())?;
    let (bb, br, bc) = split_matrix("matmul", b.shape())?;
    if ba != bb {
        return Err(shape_err(
            "matmul",
            format!("batch extents differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(shape_err(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let batch: usize = ba.iter().product();
    let mut out = vec![T::ZERO; batch * m * n];
    for bi in 0..batch {
        gemm(
            &a.data()[bi * ar * ac..(bi + 1) * ar * ac],
            &b.data()[bi * br * bc..(bi + 1) * br * bc],
            m,
            ka,
            n,
            ta,
            tb,
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    }
    let mut shape = ba.to_vec();
    shape.extend_from_slice(&[m, n]);
    Tensor::new(shape, out)
}

/// `A · B` over the last two dims, batch extents must agree.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_ex(a, b, false, false)
}

/// `A · Bᵀ` over the last two dims.
pub fn matmul_bt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_ex(a, b, false, true)
}

/// Gradients of `matmul_ex(a, b, false, tb)`.
pub(crate) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    tb: bool,
    grad: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    // C = A B   : dA = dC Bᵀ, dB = Aᵀ dC
    // C = A Bᵀ  : dA = dC B,  dB = dCᵀ A
    let ga = need_a.then(|| matmul_ex(grad, b, false, !tb).expect("shapes checked"));
    let gb = need_b.then(|| {
        if tb {
            matmul_ex(grad, a, true, false).expect("shapes checked")
        } else {
            matmul_ex(a, grad, true, false).expect("shapes checked")
        }
    });
    (ga, gb)
}

/// One row of a numerically stable softmax. Entries with `keep[j] == false`
/// receive probability exactly 0 and do not take part in the normalization.
fn softmax_row<T: Real>(row: &[T], keep: Option<&[bool]>, out: &mut [T]) {
    let kept = |j: usize| keep.map_or(true, |k| k[j]);
    let mut max = T::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if kept(j) && v > max {
            max = v;
        }
    }
    let mut sum = T::ZERO;
    for (j, (o, &v)) in out.iter_mut().zip(row).enumerate() {
        *o = if kept(j) { (v - max).exp() } else { T::ZERO };
        sum += *o;
    }
    let inv = T::ONE / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn row_view<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<usize> {
    match x.shape().last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(shape_err(
            op,
            format!("need a non-empty last dim, got {:?}", x.shape()),
        )),
    }
}

/// Softmax along the last dimension with max subtraction.
pub fn softmax_rows<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let c = row_view("softmax_rows", m)?;
    let mut out = vec![T::ZERO; m.len()];
    for (row, o) in m.data().chunks(c).zip(out.chunks_mut(c)) {
        softmax_row(row, None, o);
    }
    Tensor::new(m.shape().to_vec(), out)
}

/// Row-wise vector-Jacobian product of softmax given its output `y`.
pub(crate) fn softmax_rows_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>, acc: &mut [T]) {
    let c = *y.shape().last().expect("rank >= 1");
    for ((yr, gr), ar) in y
        .data()
        .chunks(c)
        .zip(grad.data().chunks(c))
        .zip(acc.chunks_mut(c))
    {
        let dot = yr.iter().zip(gr).fold(T::ZERO, |s, (&a, &b)| s + a * b);
        for ((a, &yv), &gv) in ar.iter_mut().zip(yr).zip(gr) {
            *a += yv * (gv - dot);
        }
    }
}

/// Column order of a row sorted by descending value, ties by ascending column.
/// Taking the first `k` entries gives the top-k set for any `k`.
pub fn rank_row<T: Real>(row: &[T], order: &mut Vec<usize>) {
    order.clear();
    order.extend(0..row.len());
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
}

fn check_k(k: usize, c: usize) -> Result<()> {
    if k == 0 || k > c {
        return Err(arg_err("top_k_mask", format!("k={k} outside 1..={c}")));
    }
    Ok(())
}

/// Keeps the `k` largest entries of each row and replaces the rest with `-inf`.
/// Ties at the k-th value keep the lowest column index first.
pub fn top_k_mask<T: Real>(m: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let c = row_view("top_k_mask", m)?;
    check_k(k, c)?;
    let mut out = vec![T::NEG_INFINITY; m.len()];
    let mut order = Vec::with_capacity(c);
    for (row, o) in m.data().chunks(c).zip(out.chunks_mut(c)) {
        rank_row(row, &mut order);
        for &j in &order[..k] {
            o[j] = row[j];
        }
    }
    Tensor::new(m.shape().to_vec(), out)
}

/// Number of kept entries per row for sparsity fraction `ratio` over `c` columns.
pub fn kept_count(ratio: f64, c: usize) -> usize {
    let k = libm::round(ratio * c as f64) as usize;
    k.clamp(1, c)
}

/// Output of [`top_k_mixture`]: the mixed attention map plus what backward needs.
pub(crate) struct MixtureForward<T> {
    pub mixed: Tensor<T>,
    pub branches: Vec<Tensor<T>>,
    pub weights: Vec<T>,
}

/// Convex combination over branches `m` of `softmax(top_k_mask(scores, ks[m]))`
/// with weights `softmax(logits)`.
pub(crate) fn top_k_mixture<T: Real>(
    scores: &Tensor<T>,
    logits: &Tensor<T>,
    ks: &[usize],
) -> Result<MixtureForward<T>> {
    let c = row_view("sparse_attention", scores)?;
    if ks.is_empty() {
        return Err(arg_err("sparse_attention", "empty ratio set"));
    }
    if logits.len() != ks.len() {
        return Err(shape_err(
            "sparse_attention",
            format!("{} mixing logits for {} ratios", logits.len(), ks.len()),
        ));
    }
    for &k in ks {
        check_k(k, c)?;
    }
    let mut weights = vec![T::ZERO; ks.len()];
    softmax_row(logits.data(), None, &mut weights);
    let mut branches: Vec<Vec<T>> = ks.iter().map(|_| vec![T::ZERO; scores.len()]).collect();
    let mut order = Vec::with_capacity(c);
    let mut keep = vec![false; c];
    for (r, row) in scores.data().chunks(c).enumerate() {
        rank_row(row, &mut order);
        for (bi, &k) in ks.iter().enumerate() {
            keep.fill(false);
            for &j in &order[..k] {
                keep[j] = true;
            }
            softmax_row(row, Some(&keep), &mut branches[bi][r * c..(r + 1) * c]);
        }
    }
    let mut mixed = vec![T::ZERO; scores.len()];
    for (bi, b) in branches.iter().enumerate() {
        let w = weights[bi];
        for (m, &p) in mixed.iter_mut().zip(b) {
            *m += w * p;
        }
    }
    let shape = scores.shape().to_vec();
    Ok(MixtureForward {
        mixed: Tensor::new(shape.clone(), mixed)?,
        branches: branches
            .into_iter()
            .map(|b| Tensor::new(shape.clone(), b).expect("same shape"))
            .collect(),
        weights,
    })
}

/// Gradients of [`top_k_mixture`] with respect to the scores and mixing logits.
pub(crate) fn top_k_mixture_backward<T: Real>(
    branches: &[Tensor<T>],
    weights: &[T],
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let mut gscores = vec![T::ZERO; grad.len()];
    let mut gw = vec![T::ZERO; weights.len()];
    let mut scaled = Tensor::zeros(grad.shape().to_vec());
    for (bi, b) in branches.iter().enumerate() {
        gw[bi] = b
            .data()
            .iter()
            .zip(grad.data())
            .fold(T::ZERO, |s, (&p, &g)| s + p * g);
        for (s, &g) in scaled.data_mut().iter_mut().zip(grad.data()) {
            *s = weights[bi] * g;
        }
        softmax_rows_backward(b, &scaled, &mut gscores);
    }
    let dot = weights.iter().zip(&gw).fold(T::ZERO, |s, (&w, &g)| s + w * g);
    let glogits: Vec<T> = weights.iter().zip(&gw).map(|(&w, &g)| w * (g - dot)).collect();
    (
        Tensor::new(grad.shape().to_vec(), gscores).expect("same shape"),
        Tensor::new([weights.len()], glogits).expect("vector"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity_and_hand_example() {
        let a = Tensor::new([2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let ones = Tensor::new([2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::from_fn([7, 5], |_| rng.random_range(-1.0..1.0f64));
        let b = Tensor::from_fn([5, 3], |_| rng.random_range(-1.0..1.0f64));
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-6);
            }
        }
        let bt = Tensor::from_fn([3, 5], |i| b.data()[(i % 5) * 3 + i / 5]);
        let c2 = matmul_bt(&a, &bt).unwrap();
        assert!(c.max_abs_diff(&c2).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([2, 3]);
        assert!(matches!(matmul(&a, &b), Err(crate::Error::Shape { .. })));
        let a = Tensor::<f32>::zeros([2, 2, 3]);
        let b = Tensor::<f32>::zeros([3, 3, 1]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::new([1, 3], vec![0.0f64, 0.0, 0.0]).unwrap()).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = softmax_rows(&Tensor::new([1, 3], vec![1000.0f32, 0.0, 0.0]).unwrap()).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.all_finite());
        let s = softmax_rows(&Tensor::new([1, 3], vec![2.0f64, 1.0, 0.0]).unwrap()).unwrap();
        // exp(2), exp(1), exp(0) normalized
        let e: [f64; 3] = [7.38905609893065, 2.718281828459045, 1.0];
        let z: f64 = e.iter().sum();
        for (v, ev) in s.data().iter().zip(e) {
            assert!((v - ev / z).abs() < 1e-12);
        }
        let expected = [0.66524, 0.24473, 0.09003];
        for (v, ev) in s.data().iter().zip(expected) {
            assert!((v - ev).abs() < 1e-5);
        }
    }

    #[test]
    fn top_k_examples() {
        let m = Tensor::new([1, 3], vec![5.0f64, 1.0, 3.0]).unwrap();
        let t = top_k_mask(&m, 2).unwrap();
        assert_eq!(t.data(), &[5.0, f64::NEG_INFINITY, 3.0]);
        let t = top_k_mask(&m, 3).unwrap();
        assert_eq!(t, m);
        let m = Tensor::new([1, 3], vec![2.0f64, 2.0, 2.0]).unwrap();
        let t = top_k_mask(&m, 1).unwrap();
        assert_eq!(t.data(), &[2.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(top_k_mask(&m, 0).is_err());
        assert!(top_k_mask(&m, 4).is_err());
    }

    #[test]
    fn kept_count_rounds_and_clamps() {
        assert_eq!(kept_count(0.5, 4), 2);
        assert_eq!(kept_count(0.5, 64), 32);
        assert_eq!(kept_count(2.0 / 3.0, 8), 5);
        assert_eq!(kept_count(0.125, 4), 1);
        assert_eq!(kept_count(0.01, 8), 1);
        assert_eq!(kept_count(1.0, 8), 8);
    }

    #[test]
    fn mixture_of_keep_all_is_plain_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = Tensor::from_fn([2, 4, 4], |_| rng.random_range(-3.0..3.0f64));
        let out = top_k_mixture(&s, &Tensor::zeros([1]), &[4]).unwrap();
        assert_eq!(out.mixed, softmax_rows(&s).unwrap());
    }

    #[test]
    fn masked_softmax_equals_softmax_of_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = Tensor::from_fn([3, 6, 6], |_| rng.random_range(-3.0..3.0f32));
        for k in 1..=6 {
            let out = top_k_mixture(&s, &Tensor::zeros([1]), &[k]).unwrap();
            let reference = softmax_rows(&top_k_mask(&s, k).unwrap()).unwrap();
            assert_eq!(out.mixed, reference);
        }
    }
}
