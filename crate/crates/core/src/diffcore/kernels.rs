//! Raw slice kernels behind the graph operations. No shape validation here:
//! callers in `graph` check extents before dispatching.

use crate::scalar::Scalar;

/// Geometry of a valid, stride-1 convolution over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn ho(&self) -> usize {
        self.h - self.kh + 1
    }
    pub fn wo(&self) -> usize {
        self.w - self.kw + 1
    }
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn in_plane(&self) -> usize {
        self.c_in * self.h * self.w
    }
    fn out_plane(&self) -> usize {
        self.c_out * self.ho() * self.wo()
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.ho(), g.wo());
    let hw_out = ho * wo;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..ho {
                    let src = c * g.h * g.w + (oh + ki) * g.w + kj;
                    dst_row[oh * wo..(oh + 1) * wo].copy_from_slice(&x[src..src + wo]);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (ho, wo) = (g.ho(), g.wo());
    let hw_out = ho * wo;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..ho {
                    let dst = c * g.h * g.w + (oh + ki) * g.w + kj;
                    for (d, &s) in x[dst..dst + wo].iter_mut().zip(&src_row[oh * wo..(oh + 1) * wo]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// `y[b] = W · im2col(x[b])`, no bias.
pub(crate) fn conv_forward<T: Scalar>(x: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let hw_out = g.ho() * g.wo();
    let patch = g.patch();
    let mut cols = vec![T::zero(); patch * hw_out];
    let mut out = vec![T::zero(); g.batch * g.out_plane()];
    for b in 0..g.batch {
        im2col(&x[b * g.in_plane()..(b + 1) * g.in_plane()], g, &mut cols);
        T::gemm(
            g.c_out,
            patch,
            hw_out,
            T::one(),
            kernel,
            (patch as isize, 1),
            &cols,
            (hw_out as isize, 1),
            T::zero(),
            &mut out[b * g.out_plane()..(b + 1) * g.out_plane()],
            (hw_out as isize, 1),
        );
    }
    out
}

/// Adjoint of [`conv_forward`] with respect to its input.
pub(crate) fn conv_input_grad<T: Scalar>(gout: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let hw_out = g.ho() * g.wo();
    let patch = g.patch();
    let mut dcols = vec![T::zero(); patch * hw_out];
    let mut out = vec![T::zero(); g.batch * g.in_plane()];
    for b in 0..g.batch {
        T::gemm(
            patch,
            g.c_out,
            hw_out,
            T::one(),
            kernel,
            (1, patch as isize),
            &gout[b * g.out_plane()..(b + 1) * g.out_plane()],
            (hw_out as isize, 1),
            T::zero(),
            &mut dcols,
            (hw_out as isize, 1),
        );
        col2im_add(&dcols, g, &mut out[b * g.in_plane()..(b + 1) * g.in_plane()]);
    }
    out
}

/// Adjoint of [`conv_forward`] with respect to its kernel, summed over the batch.
pub(crate) fn conv_kernel_grad<T: Scalar>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw_out = g.ho() * g.wo();
    let patch = g.patch();
    let mut cols = vec![T::zero(); patch * hw_out];
    let mut out = vec![T::zero(); g.c_out * patch];
    for b in 0..g.batch {
        im2col(&x[b * g.in_plane()..(b + 1) * g.in_plane()], g, &mut cols);
        T::gemm(
            g.c_out,
            hw_out,
            patch,
            T::one(),
            &gout[b * g.out_plane()..(b + 1) * g.out_plane()],
            (hw_out as isize, 1),
            &cols,
            (1, hw_out as isize),
            if b == 0 { T::zero() } else { T::one() },
            &mut out,
            (patch as isize, 1),
        );
    }
    out
}

/// Max pooling over `planes` independent `h×w` maps. Returns the pooled
/// values and, per output, the flat input index of the first maximal
/// element in row-major window order.
pub(crate) fn max_pool<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oi in 0..ho {
            for oj in 0..wo {
                let (r0, c0) = (oi * stride, oj * stride);
                let mut best_idx = base + r0 * w + c0;
                let mut best = x[best_idx];
                for r in r0..r0 + k {
                    let row = base + r * w;
                    for (c, &v) in x[row + c0..row + c0 + k].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = row + c0 + c;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn scatter_add<T: Scalar>(g: &[T], arg: &[usize], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (&v, &i) in g.iter().zip(arg) {
        out[i] = out[i] + v;
    }
    out
}

pub(crate) fn gather<T: Scalar>(g: &[T], arg: &[usize]) -> Vec<T> {
    arg.iter().map(|&i| g[i]).collect()
}

/// `op(a)·op(b)` where `op` optionally transposes; `a` is logically `m×k`
/// and `b` is `k×n` after the transposes are applied.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        a_strides,
        b,
        b_strides,
        T::zero(),
        &mut out,
        (n as isize, 1),
    );
    out
}

pub(crate) fn add_bias<T: Scalar>(x: &[T], bias: &[T], outer: usize, inner: usize) -> Vec<T> {
    let ch = bias.len();
    let mut out = x.to_vec();
    for o in 0..outer {
        for (c, &b) in bias.iter().enumerate() {
            let start = (o * ch + c) * inner;
            out[start..start + inner].iter_mut().for_each(|v| *v = *v + b);
        }
    }
    out
}

pub(crate) fn sum_to_bias<T: Scalar>(g: &[T], outer: usize, ch: usize, inner: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; ch];
    for o in 0..outer {
        for (c, a) in acc.iter_mut().enumerate() {
            let start = (o * ch + c) * inner;
            *a += g[start..start + inner].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    acc.into_iter().map(T::from_f64_lossy).collect()
}

pub(crate) fn broadcast_bias<T: Scalar>(bias: &[T], outer: usize, inner: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(outer * bias.len() * inner);
    for _ in 0..outer {
        for &b in bias {
            out.extend(std::iter::repeat_n(b, inner));
        }
    }
    out
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    let z = z.as_f64();
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    T::from_f64_lossy(s)
}

/// `-[y log σ(z) + (1-y) log(1-σ(z))]` as `max(z,0) - y·z + log1p(e^{-|z|})`.
pub(crate) fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = (g.ho(), g.wo());
        let mut out = vec![0.0; g.batch * g.c_out * ho * wo];
        for b in 0..g.batch {
            for o in 0..g.c_out {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut s = 0.0;
                        for c in 0..g.c_in {
                            for p in 0..g.kh {
                                for q in 0..g.kw {
                                    s += x[((b * g.c_in + c) * g.h + i + p) * g.w + j + q]
                                        * k[((o * g.c_in + c) * g.kh + p) * g.kw + q];
                                }
                            }
                        }
                        out[((b * g.c_out + o) * ho + i) * wo + j] = s;
                    }
                }
            }
        }
        out
    }

    fn geom() -> ConvGeom {
        ConvGeom {
            batch: 2,
            c_in: 2,
            h: 5,
            w: 6,
            c_out: 3,
            kh: 2,
            kw: 3,
        }
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 * 2654435761 + salt * 97) % 1000) as f64 / 500.0) - 1.0)
            .collect()
    }

    #[test]
    fn conv_forward_matches_loops() {
        let g = geom();
        let x = pseudo(g.batch * g.in_plane(), 1);
        let k = pseudo(g.c_out * g.patch(), 2);
        let fast = conv_forward(&x, &k, &g);
        let slow = naive_conv(&x, &k, &g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        // <conv(x,k), y> = <x, dX(y,k)> = <k, dK(y,x)>
        let g = geom();
        let x = pseudo(g.batch * g.in_plane(), 3);
        let k = pseudo(g.c_out * g.patch(), 4);
        let y = pseudo(g.batch * g.out_plane(), 5);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&conv_forward(&x, &k, &g), &y);
        let via_x = dot(&x, &conv_input_grad(&y, &k, &g));
        let via_k = dot(&k, &conv_kernel_grad(&y, &x, &g));
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_k).abs() < 1e-10);
    }

    #[test]
    fn pool_ties_pick_first_in_row_major_order() {
        let x = [1.0f64, 3.0, 3.0, 3.0];
        let (v, a) = max_pool(&x, 1, 2, 2, 2, 2);
        assert_eq!(v, vec![3.0]);
        assert_eq!(a, vec![1]);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        assert!((bce_with_logit(100.0, 0.0) - 100.0).abs() < 1e-12);
        assert!(bce_with_logit(1e4, 1.0).abs() < 1e-12);
        assert!((bce_with_logit(-1e4, 1.0) - 1e4).abs() < 1e-9);
    }
}
