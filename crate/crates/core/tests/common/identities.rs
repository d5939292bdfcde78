use fctn::losses::{self, class_weights, BatchRef, LossWeights};
use fctn::model::{ArchSpec, Branch, ConvSpec, FctnModel};
use fctn::trainer::{pretrain, LogEvent, RunLog, TrainConfig};
use fctn::{Graph, Tensor, IGNORE_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(classes: usize) -> ArchSpec {
    ArchSpec {
        input_channels: 3,
        num_classes: classes,
        base_layers: vec![ConvSpec::new(4, 3, 1), ConvSpec::new(4, 3, 2)],
        branch_layers: vec![ConvSpec::new(4, 3, 2), ConvSpec::new(classes, 1, 1)],
    }
}

fn lw(model: &FctnModel<f64>) -> f64 {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, false);
    let v = losses::weight_constraint(&mut g, model, &b).unwrap();
    g.value(v).item()
}

pub fn weight_constraint_extremes_are_exact() {
    let mut m = FctnModel::<f64>::new(spec(3), 9).unwrap();
    m.copy_branch(Branch::F1, Branch::F2);
    assert_eq!(lw(&m), 1.0);
    for name in m.branch_kernel_names(Branch::F2) {
        m.params.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v = -*v);
    }
    assert_eq!(lw(&m), -1.0);
    // biases do not take part
    for name in m.branch_param_names(Branch::F2) {
        if name.ends_with("bias") {
            m.params.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v = 7.0);
        }
    }
    assert_eq!(lw(&m), -1.0);
}

pub fn uniform_logits_give_log_c() {
    for c in [2usize, 3, 8, 19] {
        let n = 37;
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[n, c], &vec![0.3; n * c]).unwrap());
        let mut labels: Vec<u8> = (0..n).map(|i| (i % c) as u8).collect();
        labels[5] = IGNORE_ID;
        let (ce, _) = losses::ce_loss(&mut g, x, &labels, None).unwrap();
        assert!((g.value(ce).item() - (c as f64).ln()).abs() <= 1e-9, "C={c}");
    }
}

fn batch(rng: &mut ChaCha8Rng, b: usize, classes: u8, ignore: f64) -> (Tensor<f64>, Vec<u8>) {
    let (h, w) = (6, 7);
    let x: Vec<f64> = (0..b * h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let y = (0..b * h * w)
        .map(|_| if rng.random_bool(ignore) { IGNORE_ID } else { rng.random_range(0..classes) })
        .collect();
    (Tensor::new(&[b, h, w, 3], x).unwrap(), y)
}

pub fn zero_beta_total_equals_source_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = FctnModel::<f64>::new(spec(4), 2).unwrap();
    let (xs, ys) = batch(&mut rng, 2, 4, 0.0);
    let (xt, yt) = batch(&mut rng, 2, 4, 0.5);
    let weights = class_weights([ys.as_slice()], 4).unwrap();
    for alpha in [0.0, 1.0, 1e3] {
        let hp0 = LossWeights { alpha, beta: 0.0 };
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, true);
        let src = BatchRef { images: &xs, masks: &ys };
        let tgt = BatchRef { images: &xt, masks: &yt };
        let with_t = losses::total_loss(&mut g, &model, &b, src, Some(tgt), Some(&weights), hp0).unwrap();
        let mut g2 = Graph::new();
        let b2 = model.params.bind(&mut g2, true);
        let plain = losses::total_loss(&mut g2, &model, &b2, src, None, None, hp0).unwrap();
        assert!((with_t.total - plain.total).abs() <= 1e-9, "alpha {alpha}");
        assert!(with_t.l_tl.unwrap() > 0.0);
        assert!((plain.total - (alpha * plain.l_w + plain.l_s)).abs() <= 1e-9);
    }
}

/// Three-class toy scenes: colored horizontal bands with noise.
fn toy(n: usize, seed: u64) -> (Vec<Tensor<f32>>, Vec<Vec<u8>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (8, 8);
    let colors = [[0.9, 0.2, 0.1], [0.1, 0.8, 0.2], [0.2, 0.3, 0.9]];
    let mut imgs = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..n {
        let split1 = rng.random_range(1..4);
        let split2 = rng.random_range(5..8);
        let mut x = Vec::with_capacity(h * w * 3);
        let mut m = Vec::with_capacity(h * w);
        for r in 0..h {
            let c = if r < split1 { 0 } else if r < split2 { 1 } else { 2 };
            for _ in 0..w {
                m.push(c as u8);
                for k in 0..3 {
                    x.push(colors[c][k] + rng.random_range(-0.15f32..0.15));
                }
            }
        }
        imgs.push(Tensor::new(&[h, w, 3], x).unwrap());
        masks.push(m);
    }
    (imgs, masks)
}

pub fn training_descends_and_pushes_branches_apart() {
    let (imgs, masks) = toy(20, 1);
    let masks: Vec<&[u8]> = masks.iter().map(Vec::as_slice).collect();
    let cfg = TrainConfig {
        alpha: 1.0,
        learning_rate: 0.05,
        batch_size: 4,
        seed: 2,
        ..Default::default()
    };
    let mut model = FctnModel::<f32>::new(spec(3), 6).unwrap();
    let mut log = RunLog::in_memory();
    pretrain(&mut model, &imgs, &masks, &cfg, 500, &mut log).unwrap();
    let steps: Vec<(f64, f64)> = log
        .events()
        .iter()
        .filter_map(|e| match e {
            LogEvent::Step { l_w, total, .. } => Some((*l_w, *total)),
            _ => None,
        })
        .collect();
    assert_eq!(steps.len(), 500);
    let avg = |s: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| s.iter().map(f).sum::<f64>() / s.len() as f64;
    let head = &steps[..25];
    let tail = &steps[475..];
    let (t0, t1) = (avg(head, |s| s.1), avg(tail, |s| s.1));
    assert!(t1 < 0.5 * t0, "total {t0} -> {t1}");
    let (w0, w1) = (avg(head, |s| s.0), avg(tail, |s| s.0));
    assert!(w1 < w0, "weight constraint {w0} -> {w1}");
}
