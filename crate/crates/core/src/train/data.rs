use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::InputMode;
use crate::error::{Error, Result};
use crate::image::{distance_transform, fill_holes, load_image, normalize_map, BinaryImage};
use crate::model::INPUT_DIVISOR;
use crate::tensor::{Scalar, Tensor};

/// Seeded shuffle followed by a prefix split: `floor(n * ratio)` training ids,
/// clamped so both parts are non-empty.
pub fn split_dataset<S: Clone>(ids: &[S], ratio: f64, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    if ids.len() < 2 {
        return Err(Error::Invalid(format!("split needs at least 2 ids, got {}", ids.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split_ratio must lie in (0, 1), got {ratio}")));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ids.len() as f64 * ratio).floor() as usize).clamp(1, ids.len() - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Single-channel `[1, 1, H, W]` network input with values in `[0, 1]`.
pub fn preprocess<T: Scalar>(mode: InputMode, img: &BinaryImage) -> Tensor<T> {
    let shape = [1, 1, img.height(), img.width()];
    match mode {
        InputMode::RawShape => Tensor::from_fn(&shape, |i| if img.pixels()[i] { T::one() } else { T::zero() }),
        InputMode::Distance => {
            let d = normalize_map(&distance_transform(img));
            Tensor::from_fn(&shape, |i| T::from_f64(d.values[i]))
        }
        InputMode::RepairedDistance => {
            let d = normalize_map(&distance_transform(&fill_holes(img)));
            Tensor::from_fn(&shape, |i| T::from_f64(d.values[i]))
        }
    }
}

pub fn mask_tensor<T: Scalar>(img: &BinaryImage) -> Tensor<T> {
    preprocess(InputMode::RawShape, img)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub shape: BinaryImage,
    pub skeleton: BinaryImage,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

pub fn check_extents(id: &str, w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 || w % INPUT_DIVISOR != 0 || h % INPUT_DIVISOR != 0 {
        return Err(Error::Invalid(format!(
            "{id}: extents {w}x{h} must be positive multiples of {INPUT_DIVISOR}"
        )));
    }
    Ok(())
}

impl Dataset {
    /// Pairs every `*.pgm` in `shapes_dir` with the same file name in `skeletons_dir`.
    pub fn load(shapes_dir: &Path, skeletons_dir: &Path) -> Result<Self> {
        for d in [shapes_dir, skeletons_dir] {
            if !d.is_dir() {
                return Err(Error::Invalid(format!("{} is not a directory", d.display())));
            }
        }
        let mut names: Vec<_> = std::fs::read_dir(shapes_dir)
            .map_err(|e| Error::io(shapes_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::Invalid(format!("{} contains no .pgm files", shapes_dir.display())));
        }
        let mut samples = Vec::with_capacity(names.len());
        for path in names {
            let file = path.file_name().expect("listed file");
            let id = path.file_stem().expect("listed file").to_string_lossy().into_owned();
            let shape = load_image(&path)?;
            let skel_path = skeletons_dir.join(file);
            if !skel_path.is_file() {
                return Err(Error::Invalid(format!("{id}: missing skeleton {}", skel_path.display())));
            }
            let skeleton = load_image(&skel_path)?;
            if (shape.width(), shape.height()) != (skeleton.width(), skeleton.height()) {
                return Err(Error::Invalid(format!(
                    "{id}: shape is {}x{} but skeleton is {}x{}",
                    shape.width(),
                    shape.height(),
                    skeleton.width(),
                    skeleton.height()
                )));
            }
            check_extents(&id, shape.width(), shape.height())?;
            samples.push(Sample { id, shape, skeleton });
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// Splits by id with [`split_dataset`].
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        let (a, b) = split_dataset(&idx, ratio, seed)?;
        let take = |v: Vec<usize>| Dataset {
            samples: v.into_iter().map(|i| self.samples[i].clone()).collect(),
        };
        Ok((take(a), take(b)))
    }
}

/// Endless stream of sample indices: consecutive seeded permutations.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}
