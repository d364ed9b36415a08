//! Low-level compute kernels: GEMM dispatch, im2col convolution, pooling.
//!
//! All kernels are single-threaded and accumulate in a fixed order, so every
//! result is bit-reproducible for identical inputs.

use alloc::vec;

/// C[m×n] = alpha · op(A) · op(B) + beta · C, row-major storage.
///
/// `a_trans` means A is stored as [k×m] and used transposed (likewise for B).
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(dim: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (dim + 2 * pad - kernel) / stride + 1
}

/// Expand one image [c,h,w] into columns [c·k·k, oh·ow].
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    col: &mut [f64],
) {
    let oh = conv_out_dim(h, kernel, stride, pad);
    let ow = conv_out_dim(w, kernel, stride, pad);
    debug_assert_eq!(col.len(), c * kernel * kernel * oh * ow);
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let out_row = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        out_row[oy * ow..(oy + 1) * ow].fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        out_row[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add columns [c·k·k, oh·ow] back into an image gradient [c,h,w].
pub fn col2im_add(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let oh = conv_out_dim(h, kernel, stride, pad);
    let ow = conv_out_dim(w, kernel, stride, pad);
    debug_assert_eq!(col.len(), c * kernel * kernel * oh * ow);
    debug_assert_eq!(dx.len(), c * h * w);
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let src_row = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy as usize * w + ix as usize] += src_row[oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Convolution forward over a batch [n,c,h,w] → [n,oc,oh,ow].
///
/// Weights are [oc, c·k·k] row-major followed by oc biases.
pub struct ConvArgs {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvArgs {
    pub fn out_h(&self) -> usize {
        conv_out_dim(self.h, self.kernel, self.stride, self.pad)
    }
    pub fn out_w(&self) -> usize {
        conv_out_dim(self.w, self.kernel, self.stride, self.pad)
    }
    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel
    }
}

pub fn conv_forward(args: &ConvArgs, params: &[f64], x: &[f64], n: usize, y: &mut [f64]) {
    let (oh, ow) = (args.out_h(), args.out_w());
    let k2c = args.in_c * args.kernel * args.kernel;
    let (weights, bias) = params.split_at(args.weight_len());
    let in_size = args.in_c * args.h * args.w;
    let out_size = args.out_c * oh * ow;
    let mut col = vec![0.0; k2c * oh * ow];
    for i in 0..n {
        im2col(
            &x[i * in_size..(i + 1) * in_size],
            args.in_c,
            args.h,
            args.w,
            args.kernel,
            args.stride,
            args.pad,
            &mut col,
        );
        let out = &mut y[i * out_size..(i + 1) * out_size];
        gemm(args.out_c, k2c, oh * ow, 1.0, weights, false, &col, false, 0.0, out);
        for oc in 0..args.out_c {
            let b = bias[oc];
            for v in &mut out[oc * oh * ow..(oc + 1) * oh * ow] {
                *v += b;
            }
        }
    }
}

/// Convolution backward: accumulates dweights/dbias into `dparams` and
/// writes input gradients into `dx`.
pub fn conv_backward(
    args: &ConvArgs,
    params: &[f64],
    x: &[f64],
    dy: &[f64],
    n: usize,
    dparams: &mut [f64],
    dx: &mut [f64],
) {
    let (oh, ow) = (args.out_h(), args.out_w());
    let k2c = args.in_c * args.kernel * args.kernel;
    let weights = &params[..args.weight_len()];
    let (dweights, dbias) = dparams.split_at_mut(args.weight_len());
    let in_size = args.in_c * args.h * args.w;
    let out_size = args.out_c * oh * ow;
    let mut col = vec![0.0; k2c * oh * ow];
    let mut dcol = vec![0.0; k2c * oh * ow];
    dx.fill(0.0);
    for i in 0..n {
        let xs = &x[i * in_size..(i + 1) * in_size];
        let dys = &dy[i * out_size..(i + 1) * out_size];
        // dW += dy · colᵀ
        im2col(xs, args.in_c, args.h, args.w, args.kernel, args.stride, args.pad, &mut col);
        gemm(args.out_c, oh * ow, k2c, 1.0, dys, false, &col, true, 1.0, dweights);
        for oc in 0..args.out_c {
            dbias[oc] += dys[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
        }
        // dx = col2im(Wᵀ · dy)
        gemm(k2c, args.out_c, oh * ow, 1.0, weights, true, dys, false, 0.0, &mut dcol);
        col2im_add(
            &dcol,
            args.in_c,
            args.h,
            args.w,
            args.kernel,
            args.stride,
            args.pad,
            &mut dx[i * in_size..(i + 1) * in_size],
        );
    }
}

/// Fully connected forward over [n, d] → [n, out]. Weights [out, d] + bias.
pub fn linear_forward(in_dim: usize, out_dim: usize, params: &[f64], x: &[f64], n: usize, y: &mut [f64]) {
    let (weights, bias) = params.split_at(out_dim * in_dim);
    // y = x · Wᵀ
    gemm(n, in_dim, out_dim, 1.0, x, false, weights, true, 0.0, y);
    for i in 0..n {
        for (j, b) in bias.iter().enumerate() {
            y[i * out_dim + j] += b;
        }
    }
}

pub fn linear_backward(
    in_dim: usize,
    out_dim: usize,
    params: &[f64],
    x: &[f64],
    dy: &[f64],
    n: usize,
    dparams: &mut [f64],
    dx: &mut [f64],
) {
    let weights = &params[..out_dim * in_dim];
    let (dweights, dbias) = dparams.split_at_mut(out_dim * in_dim);
    // dW += dyᵀ · x
    gemm(out_dim, n, in_dim, 1.0, dy, true, x, false, 1.0, dweights);
    for row in dy.chunks_exact(out_dim) {
        for (j, v) in row.iter().enumerate() {
            dbias[j] += v;
        }
    }
    // dx = dy · W
    gemm(n, out_dim, in_dim, 1.0, dy, false, weights, false, 0.0, dx);
}

/// Global average pool [n,c,h,w] → [n,c].
pub fn global_avg_pool_forward(c: usize, hw: usize, x: &[f64], n: usize, y: &mut [f64]) {
    let inv = 1.0 / hw as f64;
    for i in 0..n {
        for ch in 0..c {
            let plane = &x[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            y[i * c + ch] = plane.iter().sum::<f64>() * inv;
        }
    }
}

pub fn global_avg_pool_backward(c: usize, hw: usize, dy: &[f64], n: usize, dx: &mut [f64]) {
    let inv = 1.0 / hw as f64;
    for i in 0..n {
        for ch in 0..c {
            let g = dy[i * c + ch] * inv;
            dx[(i * c + ch) * hw..(i * c + ch + 1) * hw].fill(g);
        }
    }
}

/// Nearest-neighbor 2× upsample [n,c,h,w] → [n,c,2h,2w].
pub fn upsample2x_forward(c: usize, h: usize, w: usize, x: &[f64], n: usize, y: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for i in 0..n {
        for ch in 0..c {
            let src = &x[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let dst = &mut y[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
            for oy in 0..oh {
                let sy = oy / 2;
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[sy * w + ox / 2];
                }
            }
        }
    }
}

pub fn upsample2x_backward(c: usize, h: usize, w: usize, dy: &[f64], n: usize, dx: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    dx.fill(0.0);
    for i in 0..n {
        for ch in 0..c {
            let src = &dy[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
            let dst = &mut dx[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for oy in 0..oh {
                let sy = oy / 2;
                for ox in 0..ow {
                    dst[sy * w + ox / 2] += src[oy * ow + ox];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transposed_operands() {
        // Aᵀ · B with A stored 3x2, giving op(A) 2x3.
        let a_st = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // storage [3,2]
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a_st, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn im2col_identity_kernel_reproduces_input() {
        // 1x1 kernel, stride 1, no pad: col equals the flattened image.
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut col = vec![0.0; 12];
        im2col(&x, 3, 2, 2, 1, 1, 0, &mut col);
        assert_eq!(col, x);
    }

    #[test]
    fn conv_against_hand_computation() {
        // One channel 3x3 image, one 3x3 kernel of ones, pad 1: center output
        // is the sum of all pixels.
        let args = ConvArgs { in_c: 1, out_c: 1, kernel: 3, stride: 1, pad: 1, h: 3, w: 3 };
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let params = vec![1.0; 10]; // 9 weights + bias 1
        let mut y = vec![0.0; 9];
        conv_forward(&args, &params, &x, 1, &mut y);
        assert_eq!(y[4], 45.0 + 1.0);
        // corner output: 1+2+4+5 + bias
        assert_eq!(y[0], 12.0 + 1.0);
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut y = vec![0.0; 16];
        upsample2x_forward(1, 2, 2, &x, 1, &mut y);
        assert_eq!(y[0], 1.0);
        assert_eq!(y[1], 1.0);
        assert_eq!(y[5], 1.0);
        assert_eq!(y[15], 4.0);
        let mut dx = vec![0.0; 4];
        upsample2x_backward(1, 2, 2, &y, 1, &mut dx);
        assert_eq!(dx, [4.0, 8.0, 12.0, 16.0]);
    }
}
