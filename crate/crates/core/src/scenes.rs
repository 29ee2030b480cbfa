//! Procedural RGB scenes for self-contained training and evaluation sets.
//!
//! Each scene is a smooth colour gradient overlaid with flat-coloured
//! rectangles, discs and a striped patch, so it has both flat regions and
//! sharp edges at several orientations.

use rand::Rng;

use crate::image::ImageTensor;
use crate::noise::stream_rng;
use crate::scalar::Scalar;

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
    Stripes { cy: f64, cx: f64, half: f64, angle: f64, period: f64 },
}

impl Shape {
    /// Colour weight at `(y, x)`: 0 outside the shape, 1 inside.
    fn cover(&self, y: f64, x: f64) -> f64 {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => (y >= y0 && y < y1 && x >= x0 && x < x1) as u8 as f64,
            Shape::Disc { cy, cx, r } => ((y - cy).powi(2) + (x - cx).powi(2) <= r * r) as u8 as f64,
            Shape::Stripes { cy, cx, half, angle, period } => {
                if (y - cy).abs() > half || (x - cx).abs() > half {
                    return 0.0;
                }
                let t = (y - cy) * angle.sin() + (x - cx) * angle.cos();
                ((t / period).rem_euclid(1.0) < 0.5) as u8 as f64
            }
        }
    }
}

fn colour<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

/// Scene number `index` of the family identified by `seed`.
pub fn render<T: Scalar>(seed: u64, index: u64, height: usize, width: usize) -> ImageTensor<T> {
    let mut rng = stream_rng(seed, index);
    let (h, w) = (height as f64, width as f64);
    let c0 = colour(&mut rng);
    let c1 = colour(&mut rng);
    let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (dir.sin(), dir.cos());

    let mut shapes = Vec::new();
    let count = rng.random_range(4..9);
    for _ in 0..count {
        let shape = match rng.random_range(0..3) {
            0 => {
                let (y0, x0) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
                let (sh, sw) = (rng.random_range(0.1..0.5) * h, rng.random_range(0.1..0.5) * w);
                Shape::Rect { y0, x0, y1: y0 + sh, x1: x0 + sw }
            }
            1 => Shape::Disc {
                cy: rng.random_range(0.0..h),
                cx: rng.random_range(0.0..w),
                r: rng.random_range(0.05..0.25) * h.min(w),
            },
            _ => Shape::Stripes {
                cy: rng.random_range(0.0..h),
                cx: rng.random_range(0.0..w),
                half: rng.random_range(0.1..0.3) * h.min(w),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                period: rng.random_range(3.0..10.0),
            },
        };
        shapes.push((shape, colour(&mut rng)));
    }

    let norm = (h * h + w * w).sqrt();
    ImageTensor::from_fn(height, width, |y, x, c| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let t = 0.5 + ((yf - h / 2.0) * dy + (xf - w / 2.0) * dx) / norm;
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for (shape, col) in &shapes {
            let a = shape.cover(yf, xf);
            v = v * (1.0 - a) + col[c] * a;
        }
        T::of(v.clamp(0.0, 1.0))
    })
}

/// `count` scenes `0..count` of the family `seed`.
pub fn render_set<T: Scalar>(seed: u64, count: usize, height: usize, width: usize) -> Vec<ImageTensor<T>> {
    (0..count as u64).map(|i| render(seed, i, height, width)).collect()
}
