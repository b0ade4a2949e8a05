//! Stride-1, size-preserving 2-D convolution via im2col + GEMM.
//!
//! A `k x k` kernel is padded with `k / 2` zeros before and `k - 1 - k / 2`
//! after each spatial axis. For `k = 3` that is one pixel on every side; for
//! `k = 2` it is one pixel on the top and left only, so output pixel `(y, x)`
//! reads inputs `(y-1..=y, x-1..=x)`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[inline]
pub fn pad_before(kernel: usize) -> usize {
    kernel / 2
}

fn check(x: Shape, w: Shape, b: Shape) -> Result<usize> {
    let k = w.h;
    if w.w != k || k == 0 {
        return Err(Error::config(format!("non-square kernel {w}")));
    }
    if w.c != x.c {
        return Err(Error::shape("conv2d input channels", w.with_c(x.c), w));
    }
    if b != Shape::new(1, w.n, 1, 1) {
        return Err(Error::shape("conv2d bias", Shape::new(1, w.n, 1, 1), b));
    }
    Ok(k)
}

/// Fill `col` (`(c*k*k) x (h*w)`, row-major) from one `c x h x w` image.
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = pad_before(k) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(T::zero());
                    out[x_hi..].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Scatter-add `col` back into an image gradient.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = pad_before(k) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &src[y * w + x_lo..y * w + x_hi];
                    let d0 = sy as usize * w + (x_lo as isize + dx) as usize;
                    for (d, &v) in plane[d0..d0 + s.len()].iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `x: [n, ci, h, w]`, `weight: [co, ci, k, k]`, `bias: [1, co, 1, 1]`.
pub fn forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let k = check(xs, ws, bias.shape())?;
    let (co, ci, hw) = (ws.n, xs.c, xs.plane());
    let kk = ci * k * k;
    let mut out = Tensor::zeros(Shape::new(xs.n, co, xs.h, xs.w));
    let mut col = vec![T::zero(); kk * hw];
    for n in 0..xs.n {
        im2col(x.image(n), ci, xs.h, xs.w, k, &mut col);
        let dst = out.image_mut(n);
        for (o, &b) in bias.data().iter().enumerate() {
            dst[o * hw..(o + 1) * hw].fill(b);
        }
        // SAFETY: buffers sized co*kk, kk*hw and co*hw above.
        unsafe {
            T::gemm(
                co,
                kk,
                hw,
                T::one(),
                weight.data().as_ptr(),
                kk as isize,
                1,
                col.as_ptr(),
                hw as isize,
                1,
                T::one(),
                dst.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn backward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>, need_input: bool) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = weight.shape();
    let k = ws.h;
    let (co, ci, hw) = (ws.n, xs.c, xs.plane());
    let kk = ci * k * k;
    let mut gx = Tensor::zeros(if need_input { xs } else { Shape::new(0, 0, 0, 0) });
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(Shape::new(1, co, 1, 1));
    let mut col = vec![T::zero(); kk * hw];
    let mut gcol = vec![T::zero(); if need_input { kk * hw } else { 0 }];
    for n in 0..xs.n {
        let go = grad_out.image(n);
        for (o, b) in gb.data_mut().iter_mut().enumerate() {
            *b += go[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
        im2col(x.image(n), ci, xs.h, xs.w, k, &mut col);
        // SAFETY: dW (co x kk) += dY (co x hw) * col^T (hw x kk).
        unsafe {
            T::gemm(
                co,
                hw,
                kk,
                T::one(),
                go.as_ptr(),
                hw as isize,
                1,
                col.as_ptr(),
                1,
                hw as isize,
                T::one(),
                gw.data_mut().as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        if need_input {
            // SAFETY: dcol (kk x hw) = W^T (kk x co) * dY (co x hw).
            unsafe {
                T::gemm(
                    kk,
                    co,
                    hw,
                    T::one(),
                    weight.data().as_ptr(),
                    1,
                    kk as isize,
                    go.as_ptr(),
                    hw as isize,
                    1,
                    T::zero(),
                    gcol.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            col2im(&gcol, ci, xs.h, xs.w, k, gx.image_mut(n));
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Direct nested-loop convolution with the same padding rule.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let k = ws.h as isize;
        let pad = (ws.h / 2) as isize;
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, xs.h, xs.w));
        for n in 0..xs.n {
            for o in 0..ws.n {
                for y in 0..xs.h {
                    for xx in 0..xs.w {
                        let mut acc = b.data()[o];
                        for c in 0..xs.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky - pad;
                                    let sx = xx as isize + kx - pad;
                                    if sy < 0 || sx < 0 || sy >= xs.h as isize || sx >= xs.w as isize {
                                        continue;
                                    }
                                    acc += w.at(o, c, ky as usize, kx as usize) * x.at(n, c, sy as usize, sx as usize);
                                }
                            }
                        }
                        let i = out.idx(n, o, y, xx);
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loop_for_odd_and_even_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in [2usize, 3] {
            let x = random(Shape::new(2, 3, 5, 7), &mut rng);
            let w = random(Shape::new(4, 3, k, k), &mut rng);
            let b = random(Shape::new(1, 4, 1, 1), &mut rng);
            let fast = forward(&x, &w, &b).unwrap();
            let slow = naive(&x, &w, &b);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k}");
        }
    }

    #[test]
    fn even_kernel_pads_top_left_only() {
        // A 2x2 kernel with a single 1 at (1,1) reads input (y, x) for output (y, x).
        let mut w = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        w.data_mut()[3] = 1.0;
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 3), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(forward(&x, &w, &b).unwrap(), x);
        // (0,0) reads (y-1, x-1): first row and column see padding.
        let mut w0 = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        w0.data_mut()[0] = 1.0;
        let y = forward(&x, &w0, &b).unwrap();
        assert_eq!(y.data(), &[0., 0., 0., 0., 1., 2.]);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> is linear in x and w; the gradients must satisfy the
        // adjoint identities exactly up to rounding.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [2usize, 3] {
            let x = random(Shape::new(2, 2, 4, 5), &mut rng);
            let w = random(Shape::new(3, 2, k, k), &mut rng);
            let zero_b = Tensor::zeros(Shape::new(1, 3, 1, 1));
            let g = random(Shape::new(2, 3, 4, 5), &mut rng);
            let y = forward(&x, &w, &zero_b).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let grads = backward(&x, &w, &g, true);
            let via_x: f64 = grads.input.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = grads.weight.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
            assert!((grads.bias.sum() - g.sum()).abs() < 1e-12);
        }
    }
}
