use fctn::losses::{self, BatchRef, LossWeights};
use fctn::metrics::ConfusionMatrix;
use fctn::model::{ArchSpec, Branch, ConvSpec, FctnModel, Prediction};
use fctn::pseudolabel::agreement_mask;
use fctn::trainer::{TrainConfig, TrainData, Trainer};
use fctn::{Graph, Tensor, IGNORE_ID};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

const C: usize = 4;

fn logits_strategy(pixels: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (
        prop::collection::vec(-4.0f32..4.0, pixels * C),
        prop::collection::vec(-4.0f32..4.0, pixels * C),
    )
}

fn preds(a: &[f32], b: &[f32]) -> (Prediction, Prediction) {
    let n = a.len() / C;
    let ta = Tensor::new(&[n, C], a.to_vec()).unwrap();
    let tb = Tensor::new(&[n, C], b.to_vec()).unwrap();
    (Prediction::from_logits(&ta), Prediction::from_logits(&tb))
}

fn coverage(mask: &[u8]) -> usize {
    mask.iter().filter(|&&y| y != IGNORE_ID).count()
}

/// Fixed-seed property runner so every target sees the same cases.
fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) {
    let config = Config {
        cases: 64,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    if let Err(e) = runner.run(&strategy, test) {
        panic!("{e}");
    }
}

pub fn coverage_is_monotone_in_threshold() {
    check((logits_strategy(30), 0.0f64..1.0, 0.0f64..1.0), |((a, b), t1, t2)| {
        let (p1, p2) = preds(&a, &b);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let m_lo = agreement_mask(&p1, &p2, lo);
        let m_hi = agreement_mask(&p1, &p2, hi);
        prop_assert!(coverage(&m_hi) <= coverage(&m_lo));
        // nested, not just smaller
        for (h, l) in m_hi.iter().zip(&m_lo) {
            if *h != IGNORE_ID {
                prop_assert_eq!(h, l);
            }
        }
        Ok(())
    });
}

pub fn labels_are_sound() {
    check((logits_strategy(30), 0.0f64..1.0), |((a, b), thr)| {
        let (p1, p2) = preds(&a, &b);
        let mask = agreement_mask(&p1, &p2, thr);
        for i in 0..mask.len() {
            let agree = p1.labels[i] == p2.labels[i];
            let conf = p1.confidence[i].max(p2.confidence[i]) as f64;
            if mask[i] != IGNORE_ID {
                prop_assert_eq!(mask[i], p1.labels[i]);
                prop_assert_eq!(mask[i], p2.labels[i]);
                prop_assert!(conf >= thr);
            } else {
                prop_assert!(!(agree && conf >= thr));
            }
        }
        Ok(())
    });
}

pub fn ignored_pixels_are_transparent_to_ce() {
    let strategy = (
        prop::collection::vec(-5.0f64..5.0, 12 * C),
        prop::collection::vec(-50.0f64..50.0, 5 * C),
        prop::collection::vec(0u8..C as u8, 12),
    );
    check(strategy, |(logits, junk, labels)| {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[12, C], &logits).unwrap().with_grad());
        let (ce, info) = g.cross_entropy(x, &labels, None).unwrap();
        prop_assert_eq!(info.counted, 12);

        let mut all = logits.clone();
        all.extend(&junk);
        let mut ys = labels.clone();
        ys.extend([IGNORE_ID; 5]);
        let mut g2 = Graph::<f64>::new();
        let x2 = g2.leaf(Tensor::from_f64(&[17, C], &all).unwrap().with_grad());
        let (ce2, _) = g2.cross_entropy(x2, &ys, None).unwrap();
        prop_assert!((g.value(ce).item() - g2.value(ce2).item()).abs() <= 1e-12);

        g2.backward(ce2).unwrap();
        let grad = g2.grad(x2).unwrap().to_vec();
        prop_assert!(grad[12 * C..].iter().all(|&v| v == 0.0));
        g.backward(ce).unwrap();
        for (a, b) in g.grad(x).unwrap().iter().zip(&grad[..12 * C]) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        Ok(())
    });
}

pub fn iou_in_range_and_merge_commutes() {
    let part = (
        prop::collection::vec(0u8..C as u8, 20),
        prop::collection::vec(prop_oneof![0u8..C as u8, Just(IGNORE_ID)], 20),
    );
    check(prop::collection::vec(part, 1..5), |parts| {
        let mats: Vec<ConfusionMatrix> = parts
            .iter()
            .map(|(p, g)| {
                let mut m = ConfusionMatrix::new(C);
                m.accumulate(p, g).unwrap();
                m
            })
            .collect();
        let mut fwd = ConfusionMatrix::new(C);
        for m in &mats {
            fwd.merge(m).unwrap();
        }
        let mut rev = ConfusionMatrix::new(C);
        for m in mats.iter().rev() {
            rev.merge(m).unwrap();
        }
        prop_assert_eq!(&fwd, &rev);
        let mut flat = ConfusionMatrix::new(C);
        let p: Vec<u8> = parts.iter().flat_map(|x| x.0.clone()).collect();
        let g: Vec<u8> = parts.iter().flat_map(|x| x.1.clone()).collect();
        flat.accumulate(&p, &g).unwrap();
        prop_assert_eq!(&fwd, &flat);

        let r = fwd.iou_report();
        for v in r.iou.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(v));
        }
        if let Some(m) = r.miou {
            prop_assert!((0.0..=1.0).contains(&m));
        }
        Ok(())
    });
}

fn tiny_spec() -> ArchSpec {
    ArchSpec {
        input_channels: 3,
        num_classes: 3,
        base_layers: vec![ConvSpec::new(4, 3, 1)],
        branch_layers: vec![ConvSpec::new(4, 3, 1), ConvSpec::new(3, 1, 1)],
    }
}

fn toy_set(n: usize, seed: u32) -> (Vec<Tensor<f32>>, Vec<Vec<u8>>) {
    let (h, w) = (6, 6);
    let mut imgs = Vec::new();
    let mut masks = Vec::new();
    for i in 0..n {
        let mut m = Vec::with_capacity(h * w);
        let mut d = Vec::with_capacity(h * w * 3);
        for p in 0..h * w {
            let c = ((p / w + i + seed as usize) % 3) as u8;
            m.push(c);
            for k in 0..3 {
                d.push(if k == c as usize { 0.9 } else { 0.1 });
            }
        }
        imgs.push(Tensor::new(&[h, w, 3], d).unwrap());
        masks.push(m);
    }
    (imgs, masks)
}

pub fn branch_t_gets_no_gradient_from_source_terms() {
    let model = FctnModel::<f64>::new(tiny_spec(), 3).unwrap();
    let (imgs, masks) = toy_set(2, 0);
    let mut data = Vec::new();
    for t in &imgs {
        data.extend(t.data().iter().map(|&v| v as f64));
    }
    let x = Tensor::new(&[2, 6, 6, 3], data).unwrap();
    let ys: Vec<u8> = masks.concat();
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, true);
    let hp = LossWeights {
        alpha: 1e3,
        beta: 100.0,
    };
    let out = losses::total_loss(&mut g, &model, &b, BatchRef { images: &x, masks: &ys }, None, None, hp)
        .unwrap();
    g.backward(out.root).unwrap();
    for name in model.branch_param_names(Branch::Ft) {
        let v = b.get(&name).unwrap();
        let zero = g.grad(v).is_none_or(|gr| gr.iter().all(|&x| x == 0.0));
        assert!(zero, "{name} received a gradient without a target batch");
    }
}

pub fn branch_t_unchanged_by_round_with_zero_beta() {
    let (si, sm) = toy_set(6, 0);
    let (ti, _) = toy_set(6, 1);
    let sm: Vec<&[u8]> = sm.iter().map(Vec::as_slice).collect();
    let cfg = TrainConfig {
        alpha: 1.0,
        beta: 0.0,
        learning_rate: 0.05,
        pretrain_iters: 3,
        rounds: 1,
        steps_per_round: 4,
        batch_size: 2,
        threshold: 0.0,
        checkpoint_every: 0,
        ..Default::default()
    };
    let data = TrainData {
        source_images: &si,
        source_masks: &sm,
        target_images: &ti,
        val: None,
    };
    let model = FctnModel::new(tiny_spec(), 4).unwrap();
    let mut tr = Trainer::with_model(cfg, model, data, None).unwrap();
    tr.skip_pretraining();
    let before = tr.model().clone();
    assert!(tr.run(None).unwrap());
    let after = tr.model();
    for name in before.branch_param_names(Branch::Ft) {
        let (a, b) = (before.params.get(&name).unwrap(), after.params.get(&name).unwrap());
        assert_eq!(a.data(), b.data(), "{name} moved");
    }
    // the labeling branches did train
    let moved = before
        .branch_param_names(Branch::F1)
        .iter()
        .any(|n| before.params.get(n).unwrap().data() != after.params.get(n).unwrap().data());
    assert!(moved);
}
