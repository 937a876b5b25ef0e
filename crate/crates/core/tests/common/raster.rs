//! Brute-force raster oracles.

use std::collections::VecDeque;

use canet_core::image::BinaryImage;

/// Minimum over every background pixel and the one-pixel outside rim.
pub fn brute_force_edt(img: &BinaryImage) -> Vec<f64> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut bg = Vec::new();
    for y in -1..=h {
        for x in -1..=w {
            if !img.get_or_bg(x as isize, y as isize) {
                bg.push((x, y));
            }
        }
    }
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            if !img.get(x as usize, y as usize) {
                out.push(0.0);
                continue;
            }
            let d2 = bg.iter().map(|&(bx, by)| (bx - x).pow(2) + (by - y).pow(2)).min().unwrap();
            out.push((d2 as f64).sqrt());
        }
    }
    out
}

/// Background 4-reachable from outside the image stays background; the rest is foreground.
pub fn flood_fill_oracle(img: &BinaryImage) -> BinaryImage {
    let (w, h) = (img.width(), img.height());
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let border = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            if border && !img.get(x, y) {
                outside[y * w + x] = true;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let mut visit = |nx: usize, ny: usize| {
            if !img.get(nx, ny) && !outside[ny * w + nx] {
                outside[ny * w + nx] = true;
                queue.push_back((nx, ny));
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < w {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < h {
            visit(x, y + 1);
        }
    }
    BinaryImage::from_fn(w, h, |x, y| !outside[y * w + x])
}

/// Two-subiteration thinning written directly from the published conditions,
/// on a zero-padded integer grid with P2..P9 named clockwise from north.
pub fn reference_thinning(img: &BinaryImage) -> BinaryImage {
    let (w, h) = (img.width(), img.height());
    let mut g = vec![vec![0u8; w + 2]; h + 2];
    for y in 0..h {
        for x in 0..w {
            g[y + 1][x + 1] = img.get(x, y) as u8;
        }
    }
    loop {
        let mut removed = 0;
        for step in 0..2 {
            let mut kill = Vec::new();
            for y in 1..=h {
                for x in 1..=w {
                    if g[y][x] == 0 {
                        continue;
                    }
                    let p2 = g[y - 1][x];
                    let p3 = g[y - 1][x + 1];
                    let p4 = g[y][x + 1];
                    let p5 = g[y + 1][x + 1];
                    let p6 = g[y + 1][x];
                    let p7 = g[y + 1][x - 1];
                    let p8 = g[y][x - 1];
                    let p9 = g[y - 1][x - 1];
                    let seq = [p2, p3, p4, p5, p6, p7, p8, p9, p2];
                    let b: u8 = seq[..8].iter().sum();
                    let a = seq.windows(2).filter(|s| s[0] == 0 && s[1] == 1).count();
                    let (c, d) = if step == 0 {
                        (p2 * p4 * p6, p4 * p6 * p8)
                    } else {
                        (p2 * p4 * p8, p2 * p6 * p8)
                    };
                    if (2..=6).contains(&b) && a == 1 && c == 0 && d == 0 {
                        kill.push((x, y));
                    }
                }
            }
            removed += kill.len();
            for (x, y) in kill {
                g[y][x] = 0;
            }
        }
        if removed == 0 {
            break;
        }
    }
    BinaryImage::from_fn(w, h, |x, y| g[y + 1][x + 1] == 1)
}
