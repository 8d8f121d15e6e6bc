//! Dense kernels behind the encoder: im2col convolution and its adjoints.
//! Feature maps are channel-major `[C][Z][Y][X]`.

use super::Scalar;

/// Geometry of one convolution: cubic kernel `k`, stride, symmetric padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input.map(|d| (d + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.fan_in()
    }
}

/// Unfold `input` into `[cin * k^3][n_out]` columns.
pub fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], shape: [usize; 3], out: [usize; 3], col: &mut Vec<T>) {
    let n_out = out[0] * out[1] * out[2];
    let k = g.kernel;
    col.clear();
    col.resize(g.fan_in() * n_out, T::zero());
    let plane = shape[1] * shape[2];
    let vol = shape[0] * plane;
    let mut row = 0;
    for ci in 0..g.cin {
        let src = &input[ci * vol..(ci + 1) * vol];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[row * n_out..(row + 1) * n_out];
                    for oz in 0..out[0] {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        if iz < 0 || iz >= shape[0] as isize {
                            continue;
                        }
                        for oy in 0..out[1] {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= shape[1] as isize {
                                continue;
                            }
                            let src_row = &src[iz as usize * plane + iy as usize * shape[2]..];
                            let dst_row = &mut dst[(oz * out[1] + oy) * out[2]..(oz * out[1] + oy + 1) * out[2]];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < shape[2] as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto an input-shaped grid.
pub fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], shape: [usize; 3], out: [usize; 3], grad_in: &mut [T]) {
    let n_out = out[0] * out[1] * out[2];
    let k = g.kernel;
    let plane = shape[1] * shape[2];
    let vol = shape[0] * plane;
    let mut row = 0;
    for ci in 0..g.cin {
        let dst = &mut grad_in[ci * vol..(ci + 1) * vol];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[row * n_out..(row + 1) * n_out];
                    for oz in 0..out[0] {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        if iz < 0 || iz >= shape[0] as isize {
                            continue;
                        }
                        for oy in 0..out[1] {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= shape[1] as isize {
                                continue;
                            }
                            let base = iz as usize * plane + iy as usize * shape[2];
                            let src_row = &src[(oz * out[1] + oy) * out[2]..(oz * out[1] + oy + 1) * out[2]];
                            for (ox, &v) in src_row.iter().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < shape[2] as isize {
                                    dst[base + ix as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `C(m×n) += A(m×k) · B(k×n)`, row-major.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let (k_, n_) = (k as isize, n as isize);
    T::gemm_acc(m, k, n, a, [k_, 1], b, [n_, 1], c, [n_, 1]);
}

/// `C(k×n) += Aᵀ · B` with `A` stored `m×k` and `B` stored `m×n`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let (k_, n_) = (k as isize, n as isize);
    T::gemm_acc(k, m, n, a, [1, k_], b, [n_, 1], c, [n_, 1]);
}

/// `C(m×k) += A · Bᵀ` with `A` stored `m×n` and `B` stored `k×n`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let (k_, n_) = (k as isize, n as isize);
    T::gemm_acc(m, n, k, a, [n_, 1], b, [1, n_], c, [k_, 1]);
}

#[inline]
pub fn axpy<T: Scalar>(s: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// Dot product with eight fixed lanes so the summation order is stable and
/// still vectorises.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// Convolution forward; returns output and its spatial shape.
pub fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    weight: &[T],
    bias: &[T],
    input: &[T],
    shape: [usize; 3],
    col: &mut Vec<T>,
) -> (Vec<T>, [usize; 3]) {
    let out = g.out_shape(shape);
    let n_out = out[0] * out[1] * out[2];
    im2col(g, input, shape, out, col);
    let mut y = Vec::with_capacity(g.cout * n_out);
    for &b in bias {
        y.extend(std::iter::repeat_n(b, n_out));
    }
    matmul_acc(weight, col, &mut y, g.cout, g.fan_in(), n_out);
    (y, out)
}

/// Convolution backward: accumulates weight/bias grads and returns the
/// input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    weight: &[T],
    input: &[T],
    shape: [usize; 3],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    col: &mut Vec<T>,
    need_input_grad: bool,
) -> Vec<T> {
    let out = g.out_shape(shape);
    let n_out = out[0] * out[1] * out[2];
    im2col(g, input, shape, out, col);
    matmul_nt_acc(grad_out, col, grad_w, g.cout, g.fan_in(), n_out);
    for (co, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out[co * n_out..(co + 1) * n_out].iter().copied().fold(T::zero(), |a, b| a + b);
    }
    if !need_input_grad {
        return Vec::new();
    }
    let mut dcol = vec![T::zero(); g.fan_in() * n_out];
    matmul_tn_acc(weight, grad_out, &mut dcol, g.cout, g.fan_in(), n_out);
    let mut grad_in = vec![T::zero(); g.cin * shape[0] * shape[1] * shape[2]];
    col2im(g, &dcol, shape, out, &mut grad_in);
    grad_in
}

/// `y = W x + b` with `W` of shape `[dout][din]`.
pub fn linear_forward<T: Scalar>(weight: &[T], bias: &[T], x: &[T]) -> Vec<T> {
    let din = x.len();
    bias.iter().enumerate().map(|(o, &b)| b + dot(&weight[o * din..(o + 1) * din], x)).collect()
}

pub fn linear_backward<T: Scalar>(weight: &[T], x: &[T], grad_y: &[T], grad_w: &mut [T], grad_b: &mut [T]) -> Vec<T> {
    let din = x.len();
    let mut grad_x = vec![T::zero(); din];
    for (o, &gy) in grad_y.iter().enumerate() {
        grad_b[o] += gy;
        axpy(gy, x, &mut grad_w[o * din..(o + 1) * din]);
        axpy(gy, &weight[o * din..(o + 1) * din], &mut grad_x);
    }
    grad_x
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as the oracle.
    fn conv_naive(g: &ConvGeom, w: &[f64], b: &[f64], x: &[f64], s: [usize; 3]) -> Vec<f64> {
        let o = g.out_shape(s);
        let k = g.kernel;
        let mut y = vec![0.0; g.cout * o[0] * o[1] * o[2]];
        for co in 0..g.cout {
            for oz in 0..o[0] {
                for oy in 0..o[1] {
                    for ox in 0..o[2] {
                        let mut acc = b[co];
                        for ci in 0..g.cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= s[0] as isize || iy >= s[1] as isize || ix >= s[2] as isize {
                                            continue;
                                        }
                                        let wi = (((co * g.cin + ci) * k + kz) * k + ky) * k + kx;
                                        let xi = ((ci * s[0] + iz as usize) * s[1] + iy as usize) * s[2] + ix as usize;
                                        acc += w[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        y[((co * o[0] + oz) * o[1] + oy) * o[2] + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n).map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0) - 1.0).collect()
    }

    #[test]
    fn conv_matches_naive_for_same_and_strided() {
        for g in [
            ConvGeom { cin: 2, cout: 3, kernel: 3, stride: 1, pad: 1 },
            ConvGeom { cin: 3, cout: 2, kernel: 2, stride: 2, pad: 0 },
        ] {
            let s = [4, 5, 6];
            let w = pseudo(g.weight_len(), 1);
            let b = pseudo(g.cout, 2);
            let x = pseudo(g.cin * 120, 3);
            let (y, o) = conv_forward(&g, &w, &b, &x, s, &mut Vec::new());
            assert_eq!(o, g.out_shape(s));
            let y_ref = conv_naive(&g, &w, &b, &x, s);
            for (a, b) in y.iter().zip(&y_ref) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> = <x, conv^T(dy)> + <w, dW(dy)> relations, checked via bias-free linearity
        let g = ConvGeom { cin: 2, cout: 3, kernel: 3, stride: 1, pad: 1 };
        let s = [3, 4, 5];
        let w = pseudo(g.weight_len(), 4);
        let x = pseudo(g.cin * 60, 5);
        let dy = pseudo(g.cout * 60, 6);
        let zero_b = vec![0.0; g.cout];
        let (y, _) = conv_forward(&g, &w, &zero_b, &x, s, &mut Vec::new());
        let mut gw = vec![0.0; g.weight_len()];
        let mut gb = vec![0.0; g.cout];
        let gx = conv_backward(&g, &w, &x, s, &dy, &mut gw, &mut gb, &mut Vec::new(), true);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
        let sum_dy: Vec<f64> = (0..g.cout).map(|c| dy[c * 60..(c + 1) * 60].iter().sum()).collect();
        for (a, b) in gb.iter().zip(&sum_dy) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..13).map(f64::from).collect();
        assert_eq!(dot(&a, &a), (0..13).map(|i| f64::from(i * i)).sum::<f64>());
    }
}
