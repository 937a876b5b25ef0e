use super::{BinaryImage, DistanceMap};

/// Exact Euclidean distance from each foreground pixel to the nearest
/// background pixel, treating everything outside the image as background.
///
/// Two separable passes over squared distances in integer arithmetic
/// (column scan, then row-wise lower envelope of parabolas), so the result
/// is the square root of an exact integer.
pub fn distance_transform(img: &BinaryImage) -> DistanceMap {
    let (w, h) = (img.width(), img.height());
    // padded grid with a one-pixel background rim
    let (pw, ph) = (w + 2, h + 2);
    let fg = |x: usize, y: usize| x >= 1 && y >= 1 && x <= w && y <= h && img.get(x - 1, y - 1);

    // vertical distance to the nearest background pixel in the same column
    let mut col = vec![0i64; pw * ph];
    for x in 0..pw {
        for y in 1..ph {
            col[y * pw + x] = if fg(x, y) { col[(y - 1) * pw + x] + 1 } else { 0 };
        }
        for y in (0..ph - 1).rev() {
            let below = col[(y + 1) * pw + x];
            if below < col[y * pw + x] {
                col[y * pw + x] = below + 1;
            }
        }
    }

    let mut values = vec![0.0; w * h];
    let mut sites = vec![0usize; pw];
    let mut starts = vec![0i64; pw];
    let mut row_sq = vec![0i64; pw];
    for y in 1..=h {
        let g = &col[y * pw..(y + 1) * pw];
        lower_envelope(g, &mut sites, &mut starts, &mut row_sq);
        for x in 1..=w {
            values[(y - 1) * w + x - 1] = (row_sq[x] as f64).sqrt();
        }
    }
    DistanceMap {
        width: w,
        height: h,
        values,
    }
}

/// `out[u] = min_i (u - i)^2 + g[i]^2` in linear time.
fn lower_envelope(g: &[i64], sites: &mut [usize], starts: &mut [i64], out: &mut [i64]) {
    let m = g.len();
    let f = |x: i64, i: usize| (x - i as i64).pow(2) + g[i] * g[i];
    // first integer position from which site `u` beats site `i` (i < u)
    let sep = |i: usize, u: usize| {
        let (i64_, u64_) = (i as i64, u as i64);
        (u64_ * u64_ - i64_ * i64_ + g[u] * g[u] - g[i] * g[i]).div_euclid(2 * (u64_ - i64_))
    };
    let mut q: isize = 0;
    sites[0] = 0;
    starts[0] = 0;
    for u in 1..m {
        while q >= 0 && f(starts[q as usize], sites[q as usize]) > f(starts[q as usize], u) {
            q -= 1;
        }
        if q < 0 {
            q = 0;
            sites[0] = u;
        } else {
            let w = 1 + sep(sites[q as usize], u);
            if w < m as i64 {
                q += 1;
                sites[q as usize] = u;
                starts[q as usize] = w;
            }
        }
    }
    for u in (0..m).rev() {
        out[u] = f(u as i64, sites[q as usize]);
        if u as i64 == starts[q as usize] {
            q -= 1;
        }
    }
}

/// Divides by the per-image maximum; an all-zero map is returned unchanged.
pub fn normalize_map(dm: &DistanceMap) -> DistanceMap {
    let max = dm.max();
    if max <= 0.0 {
        return dm.clone();
    }
    DistanceMap {
        width: dm.width,
        height: dm.height,
        values: dm.values.iter().map(|v| v / max).collect(),
    }
}
