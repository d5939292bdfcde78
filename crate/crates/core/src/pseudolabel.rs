//! Pseudo-labels from the agreement of the two labeling branches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Branch, FctnModel, Prediction};
use crate::tensor::{Element, Tensor};
use crate::IGNORE_ID;

pub const DEFAULT_THRESHOLD: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub confidence_threshold: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            confidence_threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Partially labeled mask for one target image.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabeledSample {
    /// Position of the image in the target set.
    pub index: usize,
    pub height: usize,
    pub width: usize,
    /// Class ids, [`IGNORE_ID`] where no label was assigned.
    pub mask: Vec<u8>,
    pub coverage: f64,
}

impl PseudoLabeledSample {
    pub fn labeled_pixels(&self) -> usize {
        self.mask.iter().filter(|&&y| y != IGNORE_ID).count()
    }
}

/// Per-round statistics of a pseudo-labeled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub per_class: Vec<u64>,
    pub labeled_pixels: u64,
    pub total_pixels: u64,
    pub mean_coverage: f64,
}

impl LabelSummary {
    pub fn from_samples(samples: &[PseudoLabeledSample], num_classes: usize) -> Self {
        let mut per_class = vec![0u64; num_classes];
        let mut total = 0u64;
        for s in samples {
            total += s.mask.len() as u64;
            for &y in &s.mask {
                if y != IGNORE_ID {
                    per_class[y as usize] += 1;
                }
            }
        }
        let labeled = per_class.iter().sum();
        let mean_coverage = if samples.is_empty() {
            0.0
        } else {
            samples.iter().map(|s| s.coverage).sum::<f64>() / samples.len() as f64
        };
        LabelSummary {
            per_class,
            labeled_pixels: labeled,
            total_pixels: total,
            mean_coverage,
        }
    }

    /// Fraction of labeled pixels that belong to `classes`.
    pub fn share_of(&self, classes: &[usize]) -> f64 {
        if self.labeled_pixels == 0 {
            return 0.0;
        }
        classes.iter().map(|&c| self.per_class[c]).sum::<u64>() as f64 / self.labeled_pixels as f64
    }
}

/// Pixel rule: both branches pick the same class and the larger of their
/// two confidences reaches the threshold (inclusive).
pub fn agreement_mask(f1: &Prediction, f2: &Prediction, threshold: f64) -> Vec<u8> {
    f1.labels
        .iter()
        .zip(&f2.labels)
        .zip(f1.confidence.iter().zip(&f2.confidence))
        .map(|((&a, &b), (&ca, &cb))| {
            if a == b && (ca.max(cb) as f64) >= threshold {
                a
            } else {
                IGNORE_ID
            }
        })
        .collect()
}

/// Labels one `[H, W, Cin]` image from F1/F2 (Ft is not consulted).
pub fn label_image<T: Element>(
    model: &FctnModel<T>,
    image: &Tensor<T>,
    cfg: &PseudoLabelConfig,
) -> Result<PseudoLabeledSample> {
    let &[h, w, _] = image.shape() else {
        return Err(Error::Shape(format!("expected HxWxC image, got {:?}", image.shape())));
    };
    let logits = model.logits(image, &[Branch::F1, Branch::F2])?;
    let p1 = Prediction::from_logits(&logits[0]);
    let p2 = Prediction::from_logits(&logits[1]);
    let mask = agreement_mask(&p1, &p2, cfg.confidence_threshold);
    let labeled = mask.iter().filter(|&&y| y != IGNORE_ID).count();
    Ok(PseudoLabeledSample {
        index: 0,
        height: h,
        width: w,
        coverage: labeled as f64 / (h * w) as f64,
        mask,
    })
}

/// Labels every target image (in parallel, merged in input order).
pub fn label_dataset<T: Element>(
    model: &FctnModel<T>,
    images: &[Tensor<T>],
    cfg: &PseudoLabelConfig,
) -> Result<(Vec<PseudoLabeledSample>, LabelSummary)> {
    if images.is_empty() {
        return Err(Error::Invalid("cannot pseudo-label an empty target set".into()));
    }
    let samples = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            label_image(model, img, cfg).map(|mut s| {
                s.index = i;
                s
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = LabelSummary::from_samples(&samples, model.num_classes());
    Ok((samples, summary))
}
