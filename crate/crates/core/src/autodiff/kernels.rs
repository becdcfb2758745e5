//! Pure forward/backward kernels behind the tape primitives.
//!
//! Convolution kernels are stored as `k×k×(cin·cout)` tensors laid out
//! `[ky][kx][ci][co]`; biases as `1×1×cout`. Matrices are `rows×cols×1`.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub fn conv_kernel_shape(k: usize, cin: usize, cout: usize) -> Shape {
    Shape::new(k, k, cin * cout)
}

fn conv_dims(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let k = kernel.height();
    if k != kernel.width() || k.is_multiple_of(2) {
        return Err(Error::InvalidShape(format!(
            "convolution kernel must be square with odd side, got {}",
            kernel.shape()
        )));
    }
    let cin = x.channels();
    if !kernel.channels().is_multiple_of(cin) {
        return Err(Error::InvalidShape(format!(
            "kernel {} incompatible with {cin} input channels",
            kernel.shape()
        )));
    }
    let cout = kernel.channels() / cin;
    bias.ensure_shape(Shape::new(1, 1, cout))?;
    Ok((cin, cout))
}

/// Stride-1 convolution (cross-correlation) with zero padding `k/2`,
/// preserving the spatial size.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cin, cout) = conv_dims(x, kernel, bias)?;
    let (h, w, k) = (x.height(), x.width(), kernel.height());
    let pad = (k / 2) as isize;
    let (xs, ks) = (x.data(), kernel.data());
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            o.copy_from_slice(bias.data());
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let ip = (sy as usize * w + sx as usize) * cin;
                    let kp = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = xs[ip + ci];
                        let krow = &ks[kp + ci * cout..kp + (ci + 1) * cout];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov += a * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(Shape::new(h, w, cout), out))
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(grad_out: &Tensor, kernel: &Tensor, cin: usize) -> Tensor {
    let (h, w, k) = (grad_out.height(), grad_out.width(), kernel.height());
    let cout = grad_out.channels();
    let pad = (k / 2) as isize;
    let (gs, ks) = (grad_out.data(), kernel.data());
    let mut gi = vec![0.0; h * w * cin];
    for y in 0..h {
        for xx in 0..w {
            let g = &gs[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let ip = (sy as usize * w + sx as usize) * cin;
                    let kp = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let krow = &ks[kp + ci * cout..kp + (ci + 1) * cout];
                        let dot: f64 = krow.iter().zip(g).map(|(a, b)| a * b).sum();
                        gi[ip + ci] += dot;
                    }
                }
            }
        }
    }
    Tensor::from_raw(Shape::new(h, w, cin), gi)
}

/// Adjoints of [`conv2d`] with respect to kernel and bias.
pub fn conv2d_grad_params(x: &Tensor, grad_out: &Tensor, k: usize) -> (Tensor, Tensor) {
    let (h, w, cin) = (x.height(), x.width(), x.channels());
    let cout = grad_out.channels();
    let pad = (k / 2) as isize;
    let (xs, gs) = (x.data(), grad_out.data());
    let mut gk = vec![0.0; k * k * cin * cout];
    let mut gb = vec![0.0; cout];
    for y in 0..h {
        for xx in 0..w {
            let g = &gs[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for (b, &gv) in gb.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let ip = (sy as usize * w + sx as usize) * cin;
                    let kp = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = xs[ip + ci];
                        let krow = &mut gk[kp + ci * cout..kp + (ci + 1) * cout];
                        for (kv, &gv) in krow.iter_mut().zip(g) {
                            *kv += a * gv;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_raw(conv_kernel_shape(k, cin, cout), gk),
        Tensor::from_raw(Shape::new(1, 1, cout), gb),
    )
}

/// 2×2 average pooling with stride 2.
pub fn downsample2x(x: &Tensor) -> Result<Tensor> {
    if !x.height().is_multiple_of(2) || !x.width().is_multiple_of(2) {
        return Err(Error::InvalidShape(format!(
            "downsample2x needs even spatial dims, got {}",
            x.shape()
        )));
    }
    x.downsample_area(2)
}

pub fn downsample2x_grad(grad_out: &Tensor) -> Tensor {
    grad_out.upsample_nearest(2).scale(0.25)
}

pub fn upsample2x(x: &Tensor) -> Tensor {
    x.upsample_nearest(2)
}

/// Adjoint of nearest upsampling: sum over each 2×2 block.
pub fn upsample2x_grad(grad_out: &Tensor) -> Tensor {
    grad_out
        .downsample_area(2)
        .expect("upsampled gradient has even dims")
        .scale(4.0)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.channels() != 1 || b.channels() != 1 || a.width() != b.height() {
        return Err(Error::DimensionChain(format!(
            "cannot multiply {} by {}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, n, p) = (a.height(), a.width(), b.width());
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a.data()[i * n..(i + 1) * n];
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data()[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_raw(Shape::new(m, p, 1), out))
}

pub fn transpose(a: &Tensor) -> Tensor {
    Tensor::from_fn(a.width(), a.height(), 1, |i, j, _| a.get(j, i, 0))
}

/// Mean absolute difference.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    b.ensure_shape(a.shape())?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// Numerically stable softmax over all elements.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(4, 3, 2, |y, x, c| (y * 10 + x + c * 100) as f64);
        let mut k = Tensor::zeros(3, 3, 4);
        // centre tap, ci == co
        k.set(1, 1, 0, 1.0);
        k.set(1, 1, 3, 1.0);
        let out = conv2d(&x, &k, &Tensor::zeros(1, 1, 2)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_zero_padding_at_border() {
        let x = Tensor::full(3, 3, 1, 1.0);
        let k = Tensor::full(3, 3, 1, 1.0);
        let out = conv2d(&x, &k, &Tensor::scalar(0.5)).unwrap();
        assert_eq!(out.get(0, 0, 0), 4.5);
        assert_eq!(out.get(1, 1, 0), 9.5);
        assert_eq!(out.get(0, 1, 0), 6.5);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(2, 3, 1, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(3, 1, 1, vec![1., 0., -1.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[-2.0, -2.0]);
        assert!(matmul(&b, &b).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
    }
}
