//! Convolution kernels: same-padded stride-1 `k x k` convolution via
//! im2col + GEMM, and 2x2 stride-2 transposed convolution.

use crate::{Real, Tensor};

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    out[x_hi..].fill(T::zero());
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (d, &s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution. `w` is `[co, ci, k, k]` with odd `k`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (co, ci, k, k2) = w.dims4();
    assert_eq!(ci, c, "conv input channels");
    assert_eq!(k, k2, "square kernels only");
    assert!(k % 2 == 1, "odd kernels only");
    let hw = h * wd;
    let kk = c * k * k;
    let mut out = Tensor::zeros(&[n, co, h, wd]);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for img in 0..n {
        let xi = &x.data()[img * c * hw..(img + 1) * c * hw];
        let cols: &[T] = if k == 1 {
            xi
        } else {
            im2col(xi, c, h, wd, k, &mut col);
            &col
        };
        let yo = &mut out.data_mut()[img * co * hw..(img + 1) * co * hw];
        T::gemm(co, kk, hw, T::one(), w.data(), (kk, 1), cols, (hw, 1), T::zero(), yo, (hw, 1));
        if let Some(b) = b {
            for (o, &bv) in b.data().iter().enumerate() {
                for v in &mut yo[o * hw..(o + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let (n, c, h, wd) = x.dims4();
    let (co, _, k, _) = w.dims4();
    let hw = h * wd;
    let kk = c * k * k;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dcol = if need_dx && k > 1 { vec![T::zero(); kk * hw] } else { Vec::new() };
    for img in 0..n {
        let xi = &x.data()[img * c * hw..(img + 1) * c * hw];
        let dyi = &dy.data()[img * co * hw..(img + 1) * co * hw];
        let cols: &[T] = if k == 1 {
            xi
        } else {
            im2col(xi, c, h, wd, k, &mut col);
            &col
        };
        // dW += dY * col^T
        T::gemm(co, hw, kk, T::one(), dyi, (hw, 1), cols, (1, hw), T::one(), dw.data_mut(), (kk, 1));
        for (o, g) in db.data_mut().iter_mut().enumerate() {
            *g += dyi[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[img * c * hw..(img + 1) * c * hw];
            if k == 1 {
                T::gemm(kk, co, hw, T::one(), w.data(), (1, kk), dyi, (hw, 1), T::zero(), dxi, (hw, 1));
            } else {
                T::gemm(kk, co, hw, T::one(), w.data(), (1, kk), dyi, (hw, 1), T::zero(), &mut dcol, (hw, 1));
                col2im_add(&dcol, c, h, wd, k, dxi);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2x2 stride-2 transposed convolution. `w` is `[ci, co, 2, 2]`.
pub fn conv_t2x2_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (ci, co, kh, kw) = w.dims4();
    assert_eq!(ci, c, "transposed conv input channels");
    assert_eq!((kh, kw), (2, 2));
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let rows = co * 4;
    let mut z = vec![T::zero(); rows * hw];
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for img in 0..n {
        let xi = &x.data()[img * c * hw..(img + 1) * c * hw];
        // Z = W^T X, W viewed as [ci, co*4]
        T::gemm(rows, c, hw, T::one(), w.data(), (1, rows), xi, (hw, 1), T::zero(), &mut z, (hw, 1));
        let yo = &mut out.data_mut()[img * co * oh * ow..(img + 1) * co * oh * ow];
        for o in 0..co {
            let bias = b.map_or(T::zero(), |b| b.data()[o]);
            for a in 0..2 {
                for bb in 0..2 {
                    let zr = &z[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        let orow = &mut yo[o * oh * ow + (2 * i + a) * ow..];
                        for j in 0..wd {
                            orow[2 * j + bb] = zr[i * wd + j] + bias;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_t2x2_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let (n, c, h, wd) = x.dims4();
    let (_, co, _, _) = w.dims4();
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let rows = co * 4;
    let mut dz = vec![T::zero(); rows * hw];
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for img in 0..n {
        let dyi = &dy.data()[img * co * oh * ow..(img + 1) * co * oh * ow];
        for o in 0..co {
            let plane = &dyi[o * oh * ow..(o + 1) * oh * ow];
            db.data_mut()[o] += plane.iter().copied().sum::<T>();
            for a in 0..2 {
                for bb in 0..2 {
                    let zr = &mut dz[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        let irow = &plane[(2 * i + a) * ow..];
                        for j in 0..wd {
                            zr[i * wd + j] = irow[2 * j + bb];
                        }
                    }
                }
            }
        }
        let xi = &x.data()[img * c * hw..(img + 1) * c * hw];
        // dW^T (rows x ci) += dZ X^T, written through a transposed view of dW
        T::gemm(rows, hw, c, T::one(), &dz, (hw, 1), xi, (1, hw), T::one(), dw.data_mut(), (1, rows));
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[img * c * hw..(img + 1) * c * hw];
            T::gemm(c, rows, hw, T::one(), w.data(), (rows, 1), &dz, (hw, 1), T::zero(), dxi, (hw, 1));
        }
    }
    ConvGrads { dx, dw, db }
}
