//! Orthonormal 2D DCT-II and its inverse, applied to every channel slice.
//!
//! `X̂(u,v) = c(u) c(v) Σ_i Σ_j X(i,j) cos[(i+½)πu/H] cos[(j+½)πv/W]` with
//! `c(0) = √(1/N)` and `c(k) = √(2/N)` otherwise. The transform is computed
//! separably (columns, then rows) in `O(HW(H+W))`; all channels of a pixel
//! are processed together since they are contiguous.

use std::f64::consts::PI;

use crate::tensor::{Shape, Tensor};

/// DCT coefficients with the same shape as the source tensor; entry
/// `(u, v, c)` is coefficient `(u, v)` of channel `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralMap(Tensor);

impl SpectralMap {
    pub fn from_tensor(t: Tensor) -> Self {
        Self(t)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }
}

/// Orthonormal DCT-II basis: row `u` holds `c(u) cos[(i+½)πu/n]` for all `i`.
pub fn basis(n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n * n];
    for u in 0..n {
        let cu = if u == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            b[u * n + i] = cu * ((i as f64 + 0.5) * PI * u as f64 / n as f64).cos();
        }
    }
    b
}

/// Precomputed bases for one spatial size. Reuse it when transforming many
/// tensors of the same height and width.
#[derive(Clone, Debug)]
pub struct DctPlan {
    height: usize,
    width: usize,
    basis_h: Vec<f64>,
    basis_w: Vec<f64>,
}

impl DctPlan {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            basis_h: basis(height),
            basis_w: basis(width),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn check(&self, t: &Tensor) {
        assert!(
            t.height() == self.height && t.width() == self.width,
            "DctPlan for {}x{} applied to {}",
            self.height,
            self.width,
            t.shape()
        );
    }

    pub fn forward(&self, x: &Tensor) -> SpectralMap {
        self.check(x);
        SpectralMap(self.transform(x, false))
    }

    pub fn inverse(&self, s: &SpectralMap) -> Tensor {
        self.check(&s.0);
        self.transform(&s.0, true)
    }

    /// Forward: `B_H · X · B_Wᵀ`; inverse: `B_Hᵀ · X̂ · B_W`.
    fn transform(&self, x: &Tensor, inverse: bool) -> Tensor {
        let (h, w, c) = (x.height(), x.width(), x.channels());
        let row = w * c;
        let src = x.data();

        // Along the height axis: whole rows of w*c values are combined.
        let mut tmp = vec![0.0; h * row];
        for u in 0..h {
            let out = &mut tmp[u * row..(u + 1) * row];
            for i in 0..h {
                let coef = if inverse {
                    self.basis_h[i * h + u]
                } else {
                    self.basis_h[u * h + i]
                };
                let inp = &src[i * row..(i + 1) * row];
                for (o, &v) in out.iter_mut().zip(inp) {
                    *o += coef * v;
                }
            }
        }

        // Along the width axis: channel vectors of length c are combined.
        let mut out = vec![0.0; h * row];
        for y in 0..h {
            let trow = &tmp[y * row..(y + 1) * row];
            let orow = &mut out[y * row..(y + 1) * row];
            for v in 0..w {
                let dst = &mut orow[v * c..(v + 1) * c];
                for j in 0..w {
                    let coef = if inverse {
                        self.basis_w[j * w + v]
                    } else {
                        self.basis_w[v * w + j]
                    };
                    let px = &trow[j * c..(j + 1) * c];
                    for (d, &p) in dst.iter_mut().zip(px) {
                        *d += coef * p;
                    }
                }
            }
        }
        Tensor::from_raw(x.shape(), out)
    }
}

pub fn dct2(x: &Tensor) -> SpectralMap {
    DctPlan::new(x.height(), x.width()).forward(x)
}

pub fn idct2(s: &SpectralMap) -> Tensor {
    DctPlan::new(s.shape().height, s.shape().width).inverse(s)
}

/// Channel-averaged `|coefficient|`, `log1p`-scaled and min-max normalized to
/// `[0, 1]` as a single-channel map. A flat map normalizes to all zeros.
pub fn spectrum_heatmap(s: &SpectralMap) -> Tensor {
    let mag = s.as_tensor().map(f64::abs).channel_mean().map(f64::ln_1p);
    let (lo, hi) = mag
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi - lo <= 0.0 {
        return Tensor::zeros_like(&mag);
    }
    mag.map(|v| (v - lo) / (hi - lo))
}

/// Mean of a single-channel map over positions whose normalized radius
/// exceeds `r_min`. Used to compare high-frequency content.
pub fn annulus_mean(map: &Tensor, r_min: f64) -> f64 {
    let (h, w) = (map.height(), map.width());
    let r_max = (((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64).sqrt();
    let mut acc = 0.0;
    let mut n = 0usize;
    for u in 0..h {
        for v in 0..w {
            let r = ((u * u + v * v) as f64).sqrt() / r_max;
            if r > r_min {
                acc += map.get(u, v, 0);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn naive_dct(x: &Tensor) -> Tensor {
        let (h, w) = (x.height(), x.width());
        let c = |k: usize, n: usize| {
            if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            }
        };
        Tensor::from_fn(h, w, x.channels(), |u, v, ch| {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += x.get(i, j, ch)
                        * ((i as f64 + 0.5) * PI / h as f64 * u as f64).cos()
                        * ((j as f64 + 0.5) * PI / w as f64 * v as f64).cos();
                }
            }
            c(u, h) * c(v, w) * acc
        })
    }

    fn random(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut s = RngStream::new(seed);
        Tensor::from_fn(h, w, c, |_, _, _| s.uniform() * 2.0 - 1.0)
    }

    #[test]
    fn constant_image_is_dc_only() {
        let (h, w, k) = (5, 7, 0.3);
        let s = dct2(&Tensor::full(h, w, 2, k));
        for u in 0..h {
            for v in 0..w {
                for c in 0..2 {
                    let expected = if (u, v) == (0, 0) {
                        k * ((h * w) as f64).sqrt()
                    } else {
                        0.0
                    };
                    assert!((s.as_tensor().get(u, v, c) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn one_by_one_is_identity() {
        let x = Tensor::from_vec(1, 1, 1, vec![0.42]).unwrap();
        assert!((dct2(&x).as_tensor().item() - 0.42).abs() < 1e-15);
    }

    #[test]
    fn two_by_two_matches_direct_evaluation() {
        let x = Tensor::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fast = dct2(&x);
        // Hand-expanded four-term sums: c(0)=1/√2, c(1)=1, cos(π/4)=1/√2.
        let expected = [5.0, -1.0, -2.0, 0.0];
        for (got, want) in fast.as_tensor().data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(fast.as_tensor().max_abs_diff(&naive_dct(&x)).unwrap() < 1e-12);
    }

    #[test]
    fn round_trip_random() {
        let x = random(7, 5, 3, 11);
        let back = idct2(&dct2(&x));
        let err = back.sub(&x).unwrap().norm_l2() / x.norm_l2();
        assert!(err < 1e-10);
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let (h, w, k) = (4, 6, 2.0);
        let mut s = Tensor::zeros(h, w, 1);
        s.set(0, 0, 0, k);
        let x = idct2(&SpectralMap::from_tensor(s));
        let expected = k / ((h * w) as f64).sqrt();
        assert!(x.data().iter().all(|v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn inverse_matches_naive_oracle() {
        let s = random(4, 4, 1, 3);
        let (h, w) = (4, 4);
        let c = |k: usize, n: usize| {
            if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            }
        };
        let naive = Tensor::from_fn(h, w, 1, |i, j, _| {
            let mut acc = 0.0;
            for u in 0..h {
                for v in 0..w {
                    acc += c(u, h)
                        * c(v, w)
                        * s.get(u, v, 0)
                        * ((i as f64 + 0.5) * PI / h as f64 * u as f64).cos()
                        * ((j as f64 + 0.5) * PI / w as f64 * v as f64).cos();
                }
            }
            acc
        });
        let fast = idct2(&SpectralMap::from_tensor(s));
        assert!(fast.max_abs_diff(&naive).unwrap() < 1e-12);
    }

    #[test]
    fn linearity() {
        let (a, b) = (random(6, 9, 2, 1), random(6, 9, 2, 2));
        let (p, q) = (0.7, -1.3);
        let lhs = dct2(&a.scale(p).add(&b.scale(q)).unwrap());
        let rhs = dct2(&a)
            .as_tensor()
            .scale(p)
            .add(&dct2(&b).as_tensor().scale(q))
            .unwrap();
        assert!(lhs.as_tensor().max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn heatmap_edge_cases() {
        let zero = SpectralMap::from_tensor(Tensor::zeros(4, 4, 3));
        assert!(spectrum_heatmap(&zero).data().iter().all(|&v| v == 0.0));

        let mut t = Tensor::zeros(4, 5, 3);
        for c in 0..3 {
            t.set(2, 3, c, -1.5);
        }
        let hm = spectrum_heatmap(&SpectralMap::from_tensor(t));
        assert_eq!(hm.channels(), 1);
        for u in 0..4 {
            for v in 0..5 {
                let expected = if (u, v) == (2, 3) { 1.0 } else { 0.0 };
                assert_eq!(hm.get(u, v, 0), expected);
            }
        }
    }
}
