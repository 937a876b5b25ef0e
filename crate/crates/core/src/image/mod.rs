//! Binary rasters and the shape preprocessing chain.

mod distance;
mod holes;
pub mod pgm;
mod thinning;

pub use distance::{distance_transform, normalize_map};
pub use holes::fill_holes;
pub use pgm::{load_image, save_gray, save_image};
pub use thinning::{deletable, zhang_suen_thinning, SubIteration};

use crate::error::{Error, Result};

/// Row-major boolean raster; `true` is foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    pixels: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![false; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Invalid(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let pixels = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Parses rows of `#` (foreground) and `.` (background).
    pub fn from_ascii(rows: &[&str]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut pixels = Vec::with_capacity(width * height);
        for r in rows {
            if r.len() != width {
                return Err(Error::Invalid("ragged ascii raster".into()));
            }
            pixels.extend(r.bytes().map(|b| b == b'#'));
        }
        Self::from_pixels(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    /// Out-of-range coordinates read as background.
    pub fn get_or_bg(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.pixels[y as usize * self.width + x as usize]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    /// True when every foreground pixel here is also foreground in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.pixels.iter().zip(&other.pixels).all(|(&a, &b)| !a || b)
    }

    pub fn to_ascii(&self) -> String {
        self.pixels
            .chunks(self.width.max(1))
            .map(|r| r.iter().map(|&p| if p { '#' } else { '.' }).collect::<String>())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Per-pixel non-negative distances, zero on background.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DistanceMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Any-foreground pooling over `factor x factor` blocks.
pub fn downsample_mask(img: &BinaryImage, factor: usize) -> Result<BinaryImage> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Invalid(format!("downsample factor {factor} is not a power of two")));
    }
    if img.width % factor != 0 || img.height % factor != 0 {
        return Err(Error::Invalid(format!(
            "{}x{} image is not divisible by downsample factor {factor}",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width / factor, img.height / factor);
    Ok(BinaryImage::from_fn(w, h, |x, y| {
        (0..factor).any(|dy| (0..factor).any(|dx| img.get(x * factor + dx, y * factor + dy)))
    }))
}

pub(crate) fn neighbors8() -> [(isize, isize); 8] {
    [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
}

/// Number of 8-connected foreground components.
pub fn count_components8(img: &BinaryImage) -> usize {
    let mut seen = vec![false; img.pixels.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..img.pixels.len() {
        if !img.pixels[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % img.width) as isize, (i / img.width) as isize);
            for (dx, dy) in neighbors8() {
                let (nx, ny) = (x + dx, y + dy);
                if img.get_or_bg(nx, ny) {
                    let j = ny as usize * img.width + nx as usize;
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_any_rule() {
        let empty = BinaryImage::new(8, 8);
        assert_eq!(downsample_mask(&empty, 2).unwrap(), BinaryImage::new(4, 4));
        let mut one = BinaryImage::new(8, 8);
        one.set(5, 2, true);
        let d = downsample_mask(&one, 4).unwrap();
        assert_eq!(d.to_ascii(), ".#\n..");
        assert!(downsample_mask(&one, 3).is_err());
        assert!(downsample_mask(&BinaryImage::new(6, 8), 4).is_err());
    }

    #[test]
    fn component_count() {
        let img = BinaryImage::from_ascii(&["#..#", ".#..", "....", "##.#"]).unwrap();
        assert_eq!(count_components8(&img), 4);
    }
}
