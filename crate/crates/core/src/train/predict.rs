use super::checkpoint::Checkpoint;
use super::config::InputMode;
use super::data::{check_extents, preprocess};
use super::trainer::predict_probs;
use crate::error::{Error, Result};
use crate::image::pgm::GrayImage;
use crate::image::BinaryImage;
use crate::loss::ProbMap;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: ProbMap,
    pub skeleton: BinaryImage,
    pub threshold: f64,
}

/// Preprocesses `shape` as the checkpoint was trained, runs the network and
/// binarizes at `threshold`, falling back to the stored one.
pub fn predict(ck: &Checkpoint, shape: &BinaryImage, threshold: Option<f64>) -> Result<Prediction> {
    check_extents("input", shape.width(), shape.height())?;
    let threshold = threshold.or(ck.threshold).ok_or_else(|| {
        Error::Invalid("checkpoint stores no threshold; pass one explicitly".into())
    })?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!("threshold {threshold} is outside [0, 1]")));
    }
    let input = preprocess(ck.config.input_mode, shape);
    let probs = predict_probs(&ck.model, &input)?;
    let skeleton = probs.binarize(threshold);
    Ok(Prediction {
        probs,
        skeleton,
        threshold,
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Probabilities scaled linearly to 0..=255.
pub fn probability_image(p: &ProbMap) -> GrayImage {
    GrayImage {
        width: p.width,
        height: p.height,
        data: p.values.iter().map(|&v| to_byte(v)).collect(),
    }
}

/// Background 0, shape 96, skeleton 255.
pub fn overlay_image(shape: &BinaryImage, skeleton: &BinaryImage) -> GrayImage {
    let data = shape
        .pixels()
        .iter()
        .zip(skeleton.pixels())
        .map(|(&s, &k)| match (s, k) {
            (_, true) => 255,
            (true, false) => 96,
            _ => 0,
        })
        .collect();
    GrayImage {
        width: shape.width(),
        height: shape.height(),
        data,
    }
}

/// The preprocessed input as an 8-bit image.
pub fn preprocess_to_gray(mode: InputMode, img: &BinaryImage) -> GrayImage {
    let t = preprocess::<f64>(mode, img);
    GrayImage {
        width: img.width(),
        height: img.height(),
        data: t.data().iter().map(|&v| to_byte(v)).collect(),
    }
}
