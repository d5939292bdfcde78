//! Objective terms: weight-divergence, class balancing, cross-entropies and totals.

use log::warn;

use crate::error::{Error, Result};
use crate::graph::{CeInfo, Graph, Var};
use crate::model::{Branch, FctnModel};
use crate::nn::Bindings;
use crate::tensor::{Element, Tensor};
use crate::IGNORE_ID;

/// Per-class loss weights from median frequency balancing.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub alpha: Vec<f64>,
    pub freq: Vec<f64>,
    pub median_freq: f64,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights {
            alpha: vec![1.0; num_classes],
            freq: vec![1.0 / num_classes as f64; num_classes],
            median_freq: 1.0 / num_classes as f64,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha_as<T: Element>(&self) -> Vec<T> {
        self.alpha.iter().map(|&a| T::from_f64(a)).collect()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite frequencies"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median frequency balancing over source masks.
///
/// `freq(c)` is the number of class-`c` pixels divided by the number of
/// (non-ignored) pixels of the images in which `c` occurs, and
/// `alpha[c] = median_freq / freq(c)`. Classes that never occur get weight 1.
pub fn class_weights<'a, I>(source_labels: I, num_classes: usize) -> Result<ClassWeights>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut class_pixels = vec![0u64; num_classes];
    let mut present_pixels = vec![0u64; num_classes];
    let mut images = 0usize;
    let mut per_image = vec![0u64; num_classes];
    for mask in source_labels {
        images += 1;
        per_image.iter_mut().for_each(|v| *v = 0);
        let mut valid = 0u64;
        for &y in mask {
            if y == IGNORE_ID {
                continue;
            }
            if y as usize >= num_classes {
                return Err(Error::Invalid(format!(
                    "label id {y} out of range for {num_classes} classes"
                )));
            }
            per_image[y as usize] += 1;
            valid += 1;
        }
        for c in 0..num_classes {
            if per_image[c] > 0 {
                class_pixels[c] += per_image[c];
                present_pixels[c] += valid;
            }
        }
    }
    if images == 0 || class_pixels.iter().all(|&n| n == 0) {
        return Err(Error::Invalid("class weights need at least one labeled pixel".into()));
    }
    let freq: Vec<f64> = class_pixels
        .iter()
        .zip(&present_pixels)
        .map(|(&n, &d)| if d == 0 { 0.0 } else { n as f64 / d as f64 })
        .collect();
    let mut present: Vec<f64> = freq.iter().copied().filter(|&f| f > 0.0).collect();
    let median_freq = median(&mut present);
    let alpha = freq
        .iter()
        .enumerate()
        .map(|(c, &f)| {
            if f > 0.0 {
                median_freq / f
            } else {
                warn!("class {c} never occurs in the source labels; using weight 1");
                1.0
            }
        })
        .collect();
    Ok(ClassWeights {
        alpha,
        freq,
        median_freq,
    })
}

/// Cosine similarity of the flattened, concatenated conv kernels of F1 and
/// F2 (biases excluded).
pub fn weight_constraint<T: Element>(
    g: &mut Graph<T>,
    model: &FctnModel<T>,
    b: &Bindings,
) -> Result<Var> {
    let flat = |g: &mut Graph<T>, branch: Branch| -> Result<Var> {
        let vars = model
            .branch_kernel_names(branch)
            .iter()
            .map(|n| b.get(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(g.concat_flat(&vars))
    };
    let w1 = flat(g, Branch::F1)?;
    let w2 = flat(g, Branch::F2)?;
    cosine_similarity(g, w1, w2)
}

/// `<a, b> / (|a| |b|)` for two equally sized vectors.
pub fn cosine_similarity<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.value(a).numel() != g.value(b).numel() {
        return Err(Error::Shape(format!(
            "cosine similarity of {} vs {} values",
            g.value(a).numel(),
            g.value(b).numel()
        )));
    }
    let ab = g.mul(a, b)?;
    let dot = g.sum(ab);
    let aa = g.mul(a, a)?;
    let ssa = g.sum(aa);
    let bb = g.mul(b, b)?;
    let ssb = g.sum(bb);
    if g.value(ssa).item() == T::zero() || g.value(ssb).item() == T::zero() {
        return Err(Error::Domain("zero-norm weight vector".into()));
    }
    // sqrt of the product keeps cos(a, a) and cos(a, -a) exact
    let prod = g.mul(ssa, ssb)?;
    let denom = g.sqrt(prod)?;
    g.div(dot, denom)
}

/// Pixel-wise softmax cross-entropy, optionally class-weighted.
pub fn ce_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    weights: Option<&ClassWeights>,
) -> Result<(Var, CeInfo)> {
    let alpha = weights.map(|w| w.alpha_as::<T>());
    g.cross_entropy(logits, labels, alpha.as_deref())
}

/// Images `[B, H, W, Cin]` with masks (`B·H·W` ids, [`IGNORE_ID`] = unlabeled).
#[derive(Clone, Copy, Debug)]
pub struct BatchRef<'a, T> {
    pub images: &'a Tensor<T>,
    pub masks: &'a [u8],
}

/// Loss values for one step plus the graph node to differentiate.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub l_w: f64,
    pub l_s: f64,
    /// Absent during pretraining.
    pub l_tl: Option<f64>,
    /// Source supervision of Ft (pretraining only).
    pub l_s_target_branch: Option<f64>,
    pub total: f64,
    pub target_info: Option<CeInfo>,
    pub root: Var,
}

/// Hyper-parameters of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

/// `alpha·L_w + L_S` (no target batch) or `alpha·L_w + L_S + beta·L_Tl`.
///
/// `L_S` averages unweighted CE of F1 and F2 on the source batch; `L_Tl`
/// averages class-weighted CE of F1, F2 and Ft on the pseudo-labeled batch.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    model: &FctnModel<T>,
    b: &Bindings,
    source: BatchRef<'_, T>,
    target: Option<BatchRef<'_, T>>,
    weights: Option<&ClassWeights>,
    hp: LossWeights,
) -> Result<LossBundle> {
    objective(g, model, b, source, target, weights, hp, false)
}

/// Pretraining objective: [`total_loss`] without a target batch, plus the
/// unweighted source CE of Ft so that every branch is trained on S.
pub fn pretrain_loss<T: Element>(
    g: &mut Graph<T>,
    model: &FctnModel<T>,
    b: &Bindings,
    source: BatchRef<'_, T>,
    hp: LossWeights,
) -> Result<LossBundle> {
    objective(g, model, b, source, None, None, hp, true)
}

#[allow(clippy::too_many_arguments)]
fn objective<T: Element>(
    g: &mut Graph<T>,
    model: &FctnModel<T>,
    b: &Bindings,
    source: BatchRef<'_, T>,
    target: Option<BatchRef<'_, T>>,
    weights: Option<&ClassWeights>,
    hp: LossWeights,
    supervise_ft_on_source: bool,
) -> Result<LossBundle> {
    if target.is_some() && weights.is_none() {
        return Err(Error::Invalid(
            "a pseudo-labeled target batch requires class weights".into(),
        ));
    }
    let lw = weight_constraint(g, model, b)?;

    let xs = g.constant(source.images.clone());
    let fs = model.forward_base(g, b, xs)?;
    let mut src_terms = Vec::with_capacity(2);
    for br in [Branch::F1, Branch::F2] {
        let logits = model.forward_branch(g, b, br, fs)?;
        src_terms.push(ce_loss(g, logits, source.masks, None)?.0);
    }
    let s_sum = g.add(src_terms[0], src_terms[1])?;
    let l_s = g.scale(s_sum, T::from_f64(0.5));

    let scaled_lw = g.scale(lw, T::from_f64(hp.alpha));
    let mut total = g.add(scaled_lw, l_s)?;

    let mut l_st = None;
    if supervise_ft_on_source {
        let logits = model.forward_branch(g, b, Branch::Ft, fs)?;
        let (ce, _) = ce_loss(g, logits, source.masks, None)?;
        total = g.add(total, ce)?;
        l_st = Some(ce);
    }

    let mut l_tl = None;
    let mut target_info = None;
    if let Some(t) = target {
        let xt = g.constant(t.images.clone());
        let ft = model.forward_base(g, b, xt)?;
        let mut acc: Option<Var> = None;
        let mut info = None;
        for br in Branch::ALL {
            let logits = model.forward_branch(g, b, br, ft)?;
            let (ce, i) = ce_loss(g, logits, t.masks, weights)?;
            info = Some(i);
            acc = Some(match acc {
                None => ce,
                Some(a) => g.add(a, ce)?,
            });
        }
        let mean = g.scale(acc.unwrap(), T::from_f64(1.0 / 3.0));
        let weighted = g.scale(mean, T::from_f64(hp.beta));
        total = g.add(total, weighted)?;
        l_tl = Some(mean);
        target_info = info;
    }

    let val = |g: &Graph<T>, v: Var| g.value(v).item().to_f64();
    Ok(LossBundle {
        l_w: val(g, lw),
        l_s: val(g, l_s),
        l_tl: l_tl.map(|v| val(g, v)),
        l_s_target_branch: l_st.map(|v| val(g, v)),
        total: val(g, total),
        target_info,
        root: total,
    })
}
