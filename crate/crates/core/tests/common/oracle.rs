use fctn::losses::class_weights;
use fctn::metrics::ConfusionMatrix;
use fctn::model::Prediction;
use fctn::pseudolabel::agreement_mask;
use fctn::{Graph, Tensor, IGNORE_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Six nested loops, zero padding outside the image.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    (b, h, w, cin): (usize, usize, usize, usize),
    k: &[f64],
    (kh, kw, cout): (usize, usize, usize),
    bias: &[f64],
    d: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * h * w * cout];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for i in 0..kh {
                        for j in 0..kw {
                            let sy = y as isize + (i as isize - (kh / 2) as isize) * d as isize;
                            let sx = xx as isize + (j as isize - (kw / 2) as isize) * d as isize;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xi = ((n * h + sy as usize) * w + sx as usize) * cin + ci;
                                acc += x[xi] * k[((i * kw + j) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[((n * h + y) * w + xx) * cout + co] = acc;
                }
            }
        }
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn dilated_conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases = [
        (1, 7, 9, 3, 3, 3, 4, 1),
        (2, 8, 6, 2, 3, 3, 5, 2),
        (1, 9, 9, 4, 3, 3, 2, 4),
        (2, 5, 7, 3, 1, 1, 3, 1),
        (1, 6, 11, 2, 5, 3, 3, 3),
        // dilation reaching past the whole image
        (1, 4, 4, 2, 3, 3, 2, 8),
    ];
    for (b, h, w, cin, kh, kw, cout, d) in cases {
        let x = uniform(&mut rng, b * h * w * cin);
        let k = uniform(&mut rng, kh * kw * cin * cout);
        let bias = uniform(&mut rng, cout);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(Tensor::from_f64(&[b, h, w, cin], &x).unwrap());
        let kv = g.leaf(Tensor::from_f64(&[kh, kw, cin, cout], &k).unwrap());
        let bv = g.leaf(Tensor::from_f64(&[cout], &bias).unwrap());
        let y = g.conv2d(xv, kv, bv, d).unwrap();
        assert_eq!(g.shape(y), &[b, h, w, cout]);
        let want = conv_oracle(&x, (b, h, w, cin), &k, (kh, kw, cout), &bias, d);
        for (i, (got, want)) in g.value(y).data().iter().zip(&want).enumerate() {
            let rel = (got - want).abs() / want.abs().max(1e-300);
            assert!(
                rel <= 1e-10 || (got - want).abs() <= 1e-14,
                "case d={d} k={kh}x{kw} index {i}: {got} vs {want}"
            );
        }
    }
}

fn softmax_max(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    let z: f64 = row.iter().map(|v| (v - row[best]).exp()).sum();
    (best, 1.0 / z)
}

pub fn pseudo_labels_match_per_pixel_rule() {
    const C: usize = 4;
    // scripted rows: agree/disagree, confident/flat, exact ties
    let scripted: Vec<([f64; C], [f64; C])> = vec![
        ([5.0, 0.0, 0.0, 0.0], [4.0, 0.0, 0.0, 0.0]),
        ([5.0, 0.0, 0.0, 0.0], [0.0, 4.0, 0.0, 0.0]),
        ([0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]),
        ([0.0, 0.0, 9.0, 0.0], [0.0, 0.0, 0.1, 0.0]),
        ([0.0, 1.0, 1.0, 0.0], [0.0, 2.0, 0.0, 0.0]),
        ([0.0, 0.0, 0.0, 3.0], [0.0, 0.0, 0.0, 3.0]),
        ([-2.0, -2.0, -1.0, -9.0], [1.0, 1.0, 2.0, 0.0]),
        ([0.0, 0.0, 0.0, 20.0], [0.0, 0.0, 20.0, 0.0]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rows = scripted.clone();
    for _ in 0..200 {
        let mut a = [0.0; C];
        let mut b = [0.0; C];
        for j in 0..C {
            a[j] = rng.random_range(-3.0..3.0);
            b[j] = rng.random_range(-3.0..3.0);
        }
        rows.push((a, b));
    }
    let n = rows.len();
    let flat = |sel: fn(&([f64; C], [f64; C])) -> &[f64; C]| -> Vec<f64> {
        rows.iter().flat_map(|r| sel(r).to_vec()).collect()
    };
    let t1 = Tensor::<f64>::new(&[n, C], flat(|r| &r.0)).unwrap();
    let t2 = Tensor::<f64>::new(&[n, C], flat(|r| &r.1)).unwrap();
    let (p1, p2) = (Prediction::from_logits(&t1), Prediction::from_logits(&t2));
    for thr in [0.0, 0.25, 0.5, 0.7, 0.9, 0.95, 0.999, 1.0] {
        let mask = agreement_mask(&p1, &p2, thr);
        for (i, (a, b)) in rows.iter().enumerate() {
            let (la, ca) = softmax_max(a);
            let (lb, cb) = softmax_max(b);
            // confidences are reported in single precision
            let conf = (ca as f32).max(cb as f32) as f64;
            let want = if la == lb && conf >= thr { la as u8 } else { IGNORE_ID };
            assert_eq!(mask[i], want, "row {i} threshold {thr}");
        }
    }
    // flat logits give exactly 1/C, and the threshold is inclusive
    assert_eq!(agreement_mask(&p1, &p2, 0.25)[2], 0);
}

pub fn confusion_and_iou_match_counting() {
    const C: usize = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 3000;
    let gt: Vec<u8> = (0..n)
        .map(|_| if rng.random_bool(0.1) { IGNORE_ID } else { rng.random_range(0..C as u8 - 1) })
        .collect();
    let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..C as u8 - 1)).collect();
    let mut cm = ConfusionMatrix::new(C);
    cm.accumulate(&pred, &gt).unwrap();
    for g in 0..C {
        for p in 0..C {
            let count = (0..n).filter(|&i| gt[i] as usize == g && pred[i] as usize == p).count();
            assert_eq!(cm.get(g, p), count as u64);
        }
    }
    let r = cm.iou_report();
    let mut defined = Vec::new();
    for c in 0..C {
        let tp = (0..n).filter(|&i| gt[i] as usize == c && pred[i] as usize == c).count();
        let fp = (0..n).filter(|&i| gt[i] != IGNORE_ID && gt[i] as usize != c && pred[i] as usize == c).count();
        let fn_ = (0..n).filter(|&i| gt[i] as usize == c && pred[i] as usize != c).count();
        let denom = tp + fp + fn_;
        if denom == 0 {
            // the last class never appears anywhere
            assert_eq!(r.iou[c], None);
        } else {
            let v = tp as f64 / denom as f64;
            assert_eq!(r.iou[c], Some(v));
            defined.push(v);
        }
    }
    assert_eq!(defined.len(), C - 1);
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    assert_eq!(r.miou, Some(miou));
}

pub fn class_weights_match_pixel_counts() {
    const C: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // images see different class subsets; class 5 never appears
    let masks: Vec<Vec<u8>> = (0..9)
        .map(|i| {
            let present: Vec<u8> = (0..5u8).filter(|c| (i + *c as usize) % 3 != 0).collect();
            (0..40 + i * 7)
                .map(|_| {
                    if rng.random_bool(0.05) {
                        IGNORE_ID
                    } else {
                        present[rng.random_range(0..present.len())]
                    }
                })
                .collect()
        })
        .collect();
    let w = class_weights(masks.iter().map(Vec::as_slice), C).unwrap();

    let mut freq = vec![0.0; C];
    for c in 0..C {
        let (mut num, mut den) = (0usize, 0usize);
        for m in &masks {
            let here = m.iter().filter(|&&y| y as usize == c).count();
            if here > 0 {
                num += here;
                den += m.iter().filter(|&&y| y != IGNORE_ID).count();
            }
        }
        freq[c] = if den == 0 { 0.0 } else { num as f64 / den as f64 };
    }
    let mut seen: Vec<f64> = freq.iter().copied().filter(|&f| f > 0.0).collect();
    seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = if seen.len() % 2 == 1 {
        seen[seen.len() / 2]
    } else {
        (seen[seen.len() / 2 - 1] + seen[seen.len() / 2]) / 2.0
    };
    assert!((w.median_freq - med).abs() <= 1e-12);
    for c in 0..C {
        assert!((w.freq[c] - freq[c]).abs() <= 1e-12, "freq {c}");
        let alpha = if freq[c] > 0.0 { med / freq[c] } else { 1.0 };
        assert!((w.alpha[c] - alpha).abs() <= 1e-12, "alpha {c}: {} vs {alpha}", w.alpha[c]);
    }
    // "whenever present" differs from a global frequency here
    let total: usize = masks.iter().map(|m| m.iter().filter(|&&y| y != IGNORE_ID).count()).sum();
    let global0 = masks.iter().flatten().filter(|&&y| y == 0).count() as f64 / total as f64;
    assert!((global0 - w.freq[0]).abs() > 1e-3);
}
