//! Procedural RGB test images: smooth color ramps, oriented gratings and
//! hard-edged shapes, so that patches carry both flat regions and edges.

use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::training::Pair;

pub fn toy_image(side: usize, stream: &mut RngStream) -> Tensor {
    let s = side as f64;
    let mut ramp = [[0.0; 3]; 3];
    for row in ramp.iter_mut() {
        row[0] = stream.uniform_in(0.25, 0.75);
        row[1] = stream.uniform_in(-0.25, 0.25);
        row[2] = stream.uniform_in(-0.25, 0.25);
    }
    let gratings: Vec<(f64, f64, f64, [f64; 3])> = (0..2)
        .map(|_| {
            let theta = stream.uniform_in(0.0, std::f64::consts::PI);
            let cycles = stream.uniform_in(1.0, s / 6.0);
            let phase = stream.uniform_in(0.0, std::f64::consts::TAU);
            let amp = [
                stream.uniform_in(0.0, 0.12),
                stream.uniform_in(0.0, 0.12),
                stream.uniform_in(0.0, 0.12),
            ];
            let k = std::f64::consts::TAU * cycles / s;
            (k * theta.cos(), k * theta.sin(), phase, amp)
        })
        .collect();
    let n_shapes = 2 + stream.index(3);
    let shapes: Vec<(bool, f64, f64, f64, f64, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            let disc = stream.uniform() < 0.5;
            let cy = stream.uniform_in(0.0, s);
            let cx = stream.uniform_in(0.0, s);
            let ry = stream.uniform_in(s / 10.0, s / 4.0);
            let rx = stream.uniform_in(s / 10.0, s / 4.0);
            let color = [stream.uniform(), stream.uniform(), stream.uniform()];
            (disc, cy, cx, ry, rx, color)
        })
        .collect();

    Tensor::from_fn(side, side, 3, |y, x, c| {
        let (fy, fx) = (y as f64 / s, x as f64 / s);
        let mut v = ramp[c][0] + ramp[c][1] * fy + ramp[c][2] * fx;
        for (ky, kx, ph, amp) in &gratings {
            v += amp[c] * (ky * y as f64 + kx * x as f64 + ph).sin();
        }
        for (disc, cy, cx, ry, rx, color) in &shapes {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            let inside = if *disc {
                dy * dy + dx * dx <= 1.0
            } else {
                dy.abs() <= 1.0 && dx.abs() <= 1.0
            };
            if inside {
                v = 0.3 * v + 0.7 * color[c];
            }
        }
        v.clamp(0.0, 1.0)
    })
}

/// `count` LR/HR pairs cut from fresh toy images; LR is the area-downsampled
/// HR patch.
pub fn toy_pairs(count: usize, lr_patch: usize, scale: usize, stream: &RngStream) -> Vec<Pair> {
    (0..count as u64)
        .map(|i| {
            let mut s = stream.split(i);
            let hr = toy_image(lr_patch * scale, &mut s);
            let lr = hr.downsample_area(scale).expect("side divisible by scale");
            (lr, hr)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_in_range_and_deterministic() {
        let a = toy_image(32, &mut RngStream::new(1));
        let b = toy_image(32, &mut RngStream::new(1));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(
            a.max_abs_diff(&toy_image(32, &mut RngStream::new(2)))
                .unwrap()
                > 0.1
        );
    }

    #[test]
    fn pairs_are_consistent() {
        let p = toy_pairs(3, 8, 2, &RngStream::new(0));
        assert_eq!(p.len(), 3);
        for (lr, hr) in &p {
            assert_eq!((lr.height(), hr.height()), (8, 16));
            assert!(hr.downsample_area(2).unwrap().max_abs_diff(lr).unwrap() == 0.0);
        }
    }
}
