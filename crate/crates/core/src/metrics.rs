//! Confusion matrix, per-class IoU and mean IoU.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Branch, FctnModel};
use crate::tensor::{Element, Tensor};
use crate::IGNORE_ID;

/// `counts[gt][pred]`, ignore pixels excluded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_ID {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::Invalid(format!(
                    "class id out of range (gt {g}, pred {p}) for {c} classes"
                )));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("confusion matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn iou_report(&self) -> IouReport {
        let c = self.num_classes;
        let iou = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fp: u64 = (0..c).filter(|&g| g != k).map(|g| self.get(g, k)).sum();
                let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| self.get(k, p)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect::<Vec<_>>();
        let defined: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        IouReport { iou, miou }
    }
}

/// Per-class IoU (`None` when TP+FP+FN = 0) and their mean over defined classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

impl IouReport {
    /// Human-readable table: one row per class plus mIoU, values in percent.
    pub fn table(&self, class_names: &[&str], title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "{:<14} {:>8}", "class", "IoU (%)");
        for (k, v) in self.iou.iter().enumerate() {
            let name = class_names.get(k).copied().unwrap_or("?");
            match v {
                Some(v) => {
                    let _ = writeln!(s, "{:<14} {:>8.1}", name, v * 100.0);
                }
                None => {
                    let _ = writeln!(s, "{:<14} {:>8}", name, "n/a");
                }
            }
        }
        match self.miou {
            Some(m) => {
                let _ = writeln!(s, "{:<14} {:>8.1}", "mIoU", m * 100.0);
            }
            None => {
                let _ = writeln!(s, "{:<14} {:>8}", "mIoU", "n/a");
            }
        }
        s
    }

    /// Machine-readable lines `"<prefix>.<metric> <value>"`; undefined IoUs are `nan`.
    pub fn metric_lines(&self, prefix: &str, class_names: &[&str]) -> String {
        let mut s = String::new();
        for (k, v) in self.iou.iter().enumerate() {
            let name = class_names.get(k).copied().unwrap_or("class");
            let _ = writeln!(
                s,
                "{prefix}.iou.{name} {}",
                v.map_or("nan".to_string(), |v| format!("{v:.6}"))
            );
        }
        let _ = writeln!(
            s,
            "{prefix}.miou {}",
            self.miou.map_or("nan".to_string(), |v| format!("{v:.6}"))
        );
        s
    }
}

/// Confusion matrix of one branch over a labeled image set.
pub fn evaluate_branch<T: Element>(
    model: &FctnModel<T>,
    branch: Branch,
    images: &[Tensor<T>],
    masks: &[&[u8]],
) -> Result<ConfusionMatrix> {
    if images.len() != masks.len() {
        return Err(Error::Invalid(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    let parts = images
        .par_iter()
        .zip(masks.par_iter())
        .map(|(img, gt)| {
            let pred = model.predict(branch, img)?;
            let mut cm = ConfusionMatrix::new(model.num_classes());
            cm.accumulate(&pred.labels, gt)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ConfusionMatrix::new(model.num_classes());
    for cm in &parts {
        total.merge(cm)?;
    }
    Ok(total)
}
