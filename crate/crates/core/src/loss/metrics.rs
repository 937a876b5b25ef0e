use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::BinaryImage;

/// Per-pixel foreground probabilities of one image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Invalid(format!(
                "probability map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    /// Foreground where `p >= threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryImage {
        let px = self.values.iter().map(|&p| p >= threshold).collect();
        BinaryImage::from_pixels(self.width, self.height, px).expect("extents match")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    pub fn between(pred: &BinaryImage, gt: &BinaryImage) -> Result<Self> {
        if pred.width() != gt.width() || pred.height() != gt.height() {
            return Err(Error::Invalid(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        let mut c = Counts::default();
        for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    /// Precision is 0 without predictions and recall 0 without ground truth;
    /// when both are empty the prediction is perfect and every score is 1.
    pub fn scores(&self) -> PrF1 {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if self.tp + self.fp == 0 && self.fn_ == 0 {
            return PrF1 {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        PrF1 {
            precision,
            recall,
            f1,
        }
    }
}

pub fn pixel_f1(pred: &BinaryImage, gt: &BinaryImage) -> Result<PrF1> {
    Ok(Counts::between(pred, gt)?.scores())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum F1Aggregation {
    /// Average of the per-image F1 scores.
    #[default]
    Mean,
    /// F1 of the counts pooled over all images.
    Global,
}

impl F1Aggregation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "global" => Ok(Self::Global),
            _ => Err(Error::Config(format!("f1_aggregation must be mean or global, got {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Global => "global",
        }
    }

    pub fn aggregate(self, counts: &[Counts]) -> f64 {
        match self {
            Self::Mean if counts.is_empty() => 0.0,
            Self::Mean => counts.iter().map(|c| c.scores().f1).sum::<f64>() / counts.len() as f64,
            Self::Global => counts.iter().fold(Counts::default(), |a, &c| a.add(c)).scores().f1,
        }
    }
}

/// Candidate thresholds `k / 100` for `k = 1..=99`, ascending.
pub fn threshold_grid() -> Vec<f64> {
    (1..=99).map(|k| k as f64 / 100.0).collect()
}

/// Counts at every grid threshold for one image, via a histogram of grid positions.
fn sweep_counts(prob: &ProbMap, gt: &BinaryImage, grid: &[f64]) -> Result<Vec<Counts>> {
    if prob.width != gt.width() || prob.height != gt.height() {
        return Err(Error::Invalid(format!(
            "probability map is {}x{} but ground truth is {}x{}",
            prob.width,
            prob.height,
            gt.width(),
            gt.height()
        )));
    }
    // bucket[j] holds pixels predicted foreground at thresholds grid[..j] only
    let n = grid.len();
    let mut pos = vec![0u64; n + 1];
    let mut neg = vec![0u64; n + 1];
    for (&p, &g) in prob.values.iter().zip(gt.pixels()) {
        let j = grid.partition_point(|&t| p >= t);
        if g {
            pos[j] += 1;
        } else {
            neg[j] += 1;
        }
    }
    let total_pos: u64 = pos.iter().sum();
    let mut out = vec![Counts::default(); n];
    let (mut tp, mut fp) = (0u64, 0u64);
    for k in (0..n).rev() {
        tp += pos[k + 1];
        fp += neg[k + 1];
        out[k] = Counts {
            tp,
            fp,
            fn_: total_pos - tp,
        };
    }
    Ok(out)
}

/// Picks the grid threshold maximizing the aggregated F1 over a set of images;
/// ties go to the lowest threshold. Returns `(threshold, f1)`.
pub fn adaptive_threshold(
    probs: &[ProbMap],
    gts: &[BinaryImage],
    agg: F1Aggregation,
) -> Result<(f64, f64)> {
    if probs.len() != gts.len() || probs.is_empty() {
        return Err(Error::Invalid(format!(
            "need matching non-empty sets, got {} maps and {} masks",
            probs.len(),
            gts.len()
        )));
    }
    let grid = threshold_grid();
    let per_image = probs
        .iter()
        .zip(gts)
        .map(|(p, g)| sweep_counts(p, g, &grid))
        .collect::<Result<Vec<_>>>()?;
    let mut best = (grid[0], f64::NEG_INFINITY);
    for (k, &t) in grid.iter().enumerate() {
        let counts: Vec<Counts> = per_image.iter().map(|c| c[k]).collect();
        let f1 = agg.aggregate(&counts);
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub counts: Counts,
    pub scores: PrF1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub aggregation: F1Aggregation,
    pub images: Vec<ImageScore>,
    pub f1: f64,
}

impl EvalReport {
    /// Scores every image at `threshold`, or at the adaptive threshold when `None`.
    pub fn compute(
        ids: &[String],
        probs: &[ProbMap],
        gts: &[BinaryImage],
        threshold: Option<f64>,
        aggregation: F1Aggregation,
    ) -> Result<Self> {
        if ids.len() != probs.len() {
            return Err(Error::Invalid("one id per probability map is required".into()));
        }
        let threshold = match threshold {
            Some(t) if (0.0..=1.0).contains(&t) => t,
            Some(t) => return Err(Error::Invalid(format!("threshold {t} is outside [0, 1]"))),
            None => adaptive_threshold(probs, gts, aggregation)?.0,
        };
        let images = ids
            .iter()
            .zip(probs.iter().zip(gts))
            .map(|(id, (p, g))| {
                let counts = Counts::between(&p.binarize(threshold), g)?;
                Ok(ImageScore {
                    id: id.clone(),
                    counts,
                    scores: counts.scores(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let counts: Vec<Counts> = images.iter().map(|i| i.counts).collect();
        Ok(Self {
            threshold,
            aggregation,
            f1: aggregation.aggregate(&counts),
            images,
        })
    }

    pub fn to_table(&self) -> String {
        let w = self.images.iter().map(|i| i.id.len()).max().unwrap_or(0).max(5);
        let mut s = format!(
            "{:<w$} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9}\n",
            "image", "tp", "fp", "fn", "precision", "recall", "f1"
        );
        for i in &self.images {
            let _ = writeln!(
                s,
                "{:<w$} {:>8} {:>8} {:>8} {:>9.4} {:>9.4} {:>9.4}",
                i.id, i.counts.tp, i.counts.fp, i.counts.fn_, i.scores.precision, i.scores.recall, i.scores.f1
            );
        }
        let _ = writeln!(
            s,
            "threshold {:.2}  {} f1 {:.4}",
            self.threshold,
            self.aggregation.as_str(),
            self.f1
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,tp,fp,fn,precision,recall,f1\n");
        for i in &self.images {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                i.id, i.counts.tp, i.counts.fp, i.counts.fn_, i.scores.precision, i.scores.recall, i.scores.f1
            );
        }
        let _ = writeln!(s, "threshold={},{}_f1={}", self.threshold, self.aggregation.as_str(), self.f1);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(rows: &[&str]) -> BinaryImage {
        BinaryImage::from_ascii(rows).unwrap()
    }

    #[test]
    fn f1_conventions() {
        let empty = img(&["...", "..."]);
        let some = img(&["#..", "..."]);
        assert_eq!(pixel_f1(&empty, &empty).unwrap().f1, 1.0);
        let s = pixel_f1(&empty, &some).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        let s = pixel_f1(&some, &empty).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert_eq!(pixel_f1(&some, &some).unwrap().f1, 1.0);
    }

    #[test]
    fn f1_partial_overlap() {
        let pred = img(&["##.", "#.."]);
        let gt = img(&["#..", "##."]);
        let s = pixel_f1(&pred, &gt).unwrap();
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);

        let s = pixel_f1(&img(&["##."]), &img(&[".##"])).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn threshold_tie_prefers_lowest() {
        let p = ProbMap::new(3, 1, vec![0.7, 0.4, 0.7]).unwrap();
        let gt = img(&["#.#"]);
        let (t, f1) = adaptive_threshold(&[p], &[gt], F1Aggregation::Mean).unwrap();
        assert_eq!(t, 0.41);
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn all_zero_probs_pick_first_threshold() {
        let p = ProbMap::new(2, 2, vec![0.0; 4]).unwrap();
        let gt = img(&["#.", ".."]);
        let (t, f1) = adaptive_threshold(&[p], &[gt], F1Aggregation::Mean).unwrap();
        assert_eq!((t, f1), (0.01, 0.0));
    }

    #[test]
    fn report_formats() {
        let p = ProbMap::new(2, 1, vec![0.9, 0.2]).unwrap();
        let r = EvalReport::compute(&["a".into()], &[p], &[img(&["#."])], Some(0.5), F1Aggregation::Global).unwrap();
        assert_eq!(r.f1, 1.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("image_id,tp,fp,fn"));
        assert!(csv.lines().last().unwrap().starts_with("threshold=0.5"));
        assert!(r.to_table().contains("global f1 1.0000"));
    }
}
