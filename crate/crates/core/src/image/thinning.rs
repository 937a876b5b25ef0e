use super::BinaryImage;

/// The two alternating passes of the parallel thinning procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubIteration {
    /// Removes south-east boundary and north-west corner pixels.
    First,
    /// Removes north-west boundary and south-east corner pixels.
    Second,
}

/// Clockwise neighbors starting north: N, NE, E, SE, S, SW, W, NW.
fn ring(img: &BinaryImage, x: usize, y: usize) -> [bool; 8] {
    let (x, y) = (x as isize, y as isize);
    [
        img.get_or_bg(x, y - 1),
        img.get_or_bg(x + 1, y - 1),
        img.get_or_bg(x + 1, y),
        img.get_or_bg(x + 1, y + 1),
        img.get_or_bg(x, y + 1),
        img.get_or_bg(x - 1, y + 1),
        img.get_or_bg(x - 1, y),
        img.get_or_bg(x - 1, y - 1),
    ]
}

/// Whether foreground pixel `(x, y)` would be removed in the given pass.
pub fn deletable(img: &BinaryImage, x: usize, y: usize, pass: SubIteration) -> bool {
    if !img.get(x, y) {
        return false;
    }
    let p = ring(img, x, y);
    let b = p.iter().filter(|&&v| v).count();
    if !(2..=6).contains(&b) {
        return false;
    }
    let transitions = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
    if transitions != 1 {
        return false;
    }
    let [n, _, e, _, s, _, w, _] = p;
    match pass {
        SubIteration::First => !(n && e && s) && !(e && s && w),
        SubIteration::Second => !(n && e && w) && !(n && s && w),
    }
}

/// Runs both passes until neither removes a pixel. Pixels outside the image count as background.
pub fn zhang_suen_thinning(img: &BinaryImage) -> BinaryImage {
    let mut cur = img.clone();
    let mut marked = Vec::new();
    loop {
        let mut changed = false;
        for pass in [SubIteration::First, SubIteration::Second] {
            marked.clear();
            for y in 0..cur.height() {
                for x in 0..cur.width() {
                    if deletable(&cur, x, y, pass) {
                        marked.push((x, y));
                    }
                }
            }
            changed |= !marked.is_empty();
            for &(x, y) in &marked {
                cur.set(x, y, false);
            }
        }
        if !changed {
            return cur;
        }
    }
}
