use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{save_image, zhang_suen_thinning, BinaryImage};
use crate::model::INPUT_DIVISOR;

enum Primitive {
    Rect { cx: f64, cy: f64, a: f64, b: f64, angle: f64 },
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, angle: f64 },
    Polyline { pts: Vec<(f64, f64)>, radius: f64 },
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

impl Primitive {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let margin = size * 0.15;
        let coord = |rng: &mut ChaCha8Rng| rng.random_range(margin..size - margin);
        let (cx, cy) = (coord(rng), coord(rng));
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        match rng.random_range(0..3) {
            0 => Primitive::Rect {
                cx,
                cy,
                a: rng.random_range(0.08..0.3) * size,
                b: rng.random_range(0.05..0.15) * size,
                angle,
            },
            1 => Primitive::Ellipse {
                cx,
                cy,
                a: rng.random_range(0.1..0.3) * size,
                b: rng.random_range(0.06..0.2) * size,
                angle,
            },
            _ => {
                let n = rng.random_range(2..=4);
                let pts = (0..n).map(|_| (coord(rng), coord(rng))).collect();
                Primitive::Polyline {
                    pts,
                    radius: rng.random_range(0.03..0.07) * size,
                }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let local = |cx: f64, cy: f64, angle: f64| {
            let (s, c) = angle.sin_cos();
            let (dx, dy) = (x - cx, y - cy);
            (c * dx + s * dy, -s * dx + c * dy)
        };
        match self {
            Primitive::Rect { cx, cy, a, b, angle } => {
                let (u, v) = local(*cx, *cy, *angle);
                u.abs() <= *a && v.abs() <= *b
            }
            Primitive::Ellipse { cx, cy, a, b, angle } => {
                let (u, v) = local(*cx, *cy, *angle);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Primitive::Polyline { pts, radius } => pts.windows(2).any(|w| seg_dist((x, y), w[0], w[1]) <= *radius),
        }
    }
}

/// One seeded shape (a union of 1 to 3 primitives, two pixels clear of the
/// border) and its thinned skeleton.
pub fn synthetic_pair(size: usize, seed: u64, index: u64) -> (BinaryImage, BinaryImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    loop {
        let n = rng.random_range(1..=3);
        let prims: Vec<Primitive> = (0..n).map(|_| Primitive::random(&mut rng, size as f64)).collect();
        let shape = BinaryImage::from_fn(size, size, |x, y| {
            let inner = (2..size - 2).contains(&x) && (2..size - 2).contains(&y);
            inner && prims.iter().any(|p| p.contains(x as f64 + 0.5, y as f64 + 0.5))
        });
        let skeleton = zhang_suen_thinning(&shape);
        if skeleton.count() > 0 {
            return (shape, skeleton);
        }
    }
}

/// Writes `count` pairs as `out/shapes/synth_NNNN.pgm` and
/// `out/skeletons/synth_NNNN.pgm`; returns the ids.
pub fn generate_synthetic(count: usize, size: usize, seed: u64, out: &Path) -> Result<Vec<String>> {
    if size == 0 || size % INPUT_DIVISOR != 0 {
        return Err(Error::Invalid(format!("size {size} must be a positive multiple of {INPUT_DIVISOR}")));
    }
    let (shapes, skels) = (out.join("shapes"), out.join("skeletons"));
    for d in [&shapes, &skels] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let (shape, skeleton) = synthetic_pair(size, seed, i as u64);
        let id = format!("synth_{i:04}");
        save_image(&shape, shapes.join(format!("{id}.pgm")))?;
        save_image(&skeleton, skels.join(format!("{id}.pgm")))?;
        ids.push(id);
    }
    Ok(ids)
}
