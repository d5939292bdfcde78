//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Elementwise, Graph, OpKind, Var};
use crate::losses::{self, BatchRef, LossWeights};
use crate::model::{ArchSpec, ConvSpec, FctnModel};
use crate::nn::Bindings;
use crate::tensor::Tensor;
use crate::IGNORE_ID;

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub label: String,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} {} (max rel err {:.3e}, tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.label,
            self.max_rel_error(),
            self.tolerance
        )?;
        for p in &self.params {
            writeln!(
                f,
                "    {:<28} {:>5} entries  rel err {:.3e}{}",
                p.name,
                p.checked,
                p.max_rel_error,
                if p.passed { "" } else { "  <-- exceeds tolerance" }
            )?;
        }
        Ok(())
    }
}

/// Options for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries: Option<usize>,
    /// Corrupt one backward rule (negative control).
    pub fault: Option<OpKind>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: None,
            fault: None,
        }
    }
}

/// Compares the analytic gradient of a scalar function against central
/// differences `(f(p+h) - f(p-h)) / 2h`, entry by entry.
///
/// `f` receives a fresh graph plus one leaf per parameter (in order) and
/// must return the scalar output.
pub fn grad_check<F>(
    label: &str,
    f: F,
    params: &[(String, Tensor<f64>)],
    opts: CheckOptions,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        if let Some(kind) = opts.fault {
            g = g.with_fault(kind);
        }
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = grads;
                g.leaf(t)
            })
            .collect();
        let out = f(&mut g, &vars)?;
        let value = g.value(out).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(out)?;
        let gs = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| {
                g.grad(v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        Ok((value, gs))
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (_, analytic) = eval(&values, true)?;

    let mut checks = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.numel();
        let stride = match opts.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
        let mut checked = 0;
        for idx in (0..n).step_by(stride) {
            let orig = values[pi].data()[idx];
            values[pi].data_mut()[idx] = orig + opts.step;
            let (plus, _) = eval(&values, false)?;
            values[pi].data_mut()[idx] = orig - opts.step;
            let (minus, _) = eval(&values, false)?;
            values[pi].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > worst.0 || checked == 0 {
                worst = (rel, idx, a, numeric);
            }
            checked += 1;
        }
        checks.push(ParamCheck {
            name: name.clone(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            analytic: worst.2,
            numeric: worst.3,
            checked,
            passed: worst.0 <= opts.tolerance,
        });
    }
    Ok(GradReport {
        label: label.to_string(),
        tolerance: opts.tolerance,
        params: checks,
    })
}

/// Op names accepted for fault injection.
pub const FAULT_NAMES: [&str; 19] = [
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "exp",
    "log",
    "neg",
    "sqrt",
    "scale",
    "add-const",
    "sum",
    "mean",
    "matmul",
    "softmax",
    "conv2d",
    "concat-channels",
    "concat-flat",
    "cross-entropy",
];

pub fn parse_fault(name: &str) -> Result<OpKind> {
    use Elementwise::*;
    Ok(match name {
        "add" => OpKind::Elementwise(Add),
        "sub" => OpKind::Elementwise(Sub),
        "mul" => OpKind::Elementwise(Mul),
        "div" => OpKind::Elementwise(Div),
        "relu" => OpKind::Elementwise(Relu),
        "exp" => OpKind::Elementwise(Exp),
        "log" => OpKind::Elementwise(Log),
        "neg" => OpKind::Elementwise(Negate),
        "sqrt" => OpKind::Elementwise(Sqrt),
        "scale" => OpKind::Scale,
        "add-const" => OpKind::AddConst,
        "sum" => OpKind::Sum,
        "mean" => OpKind::Mean,
        "matmul" => OpKind::MatMul,
        "softmax" => OpKind::Softmax,
        "conv2d" => OpKind::Conv2d,
        "concat-channels" => OpKind::ConcatChannels,
        "concat-flat" => OpKind::ConcatFlat,
        "cross-entropy" => OpKind::CrossEntropy,
        other => {
            return Err(Error::Invalid(format!(
                "unknown op `{other}`; expected one of {}",
                FAULT_NAMES.join(", ")
            )))
        }
    })
}

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    label: String,
    params: Vec<(String, Tensor<f64>)>,
    f: CaseFn,
    max_entries: Option<usize>,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).expect("shape matches")
}

/// Values bounded away from zero (keeps relu off its kink).
fn rand_signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_f64(shape, &v).expect("shape matches")
}

fn rand_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize, ignore: f64) -> Vec<u8> {
    (0..n)
        .map(|_| {
            if rng.random_bool(ignore) {
                IGNORE_ID
            } else {
                rng.random_range(0..classes) as u8
            }
        })
        .collect()
}

fn p(name: &str, t: Tensor<f64>) -> (String, Tensor<f64>) {
    (name.to_string(), t)
}

/// `sum(out * r)` for a fixed random `r`, so every output entry matters.
fn project(g: &mut Graph<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let c = g.constant(r.clone());
    let m = g.mul(out, c)?;
    Ok(g.sum(m))
}

fn suite_arch() -> ArchSpec {
    ArchSpec {
        input_channels: 3,
        num_classes: 3,
        base_layers: vec![ConvSpec::new(4, 3, 1), ConvSpec::new(4, 3, 2)],
        branch_layers: vec![ConvSpec::new(4, 3, 2), ConvSpec::new(3, 1, 1)],
    }
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let shape = [2usize, 3, 4];

    let binary: [(&str, Elementwise); 4] = [
        ("add", Elementwise::Add),
        ("sub", Elementwise::Sub),
        ("mul", Elementwise::Mul),
        ("div", Elementwise::Div),
    ];
    for (name, op) in binary {
        let r = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        out.push(Case {
            label: format!("elementwise {name}"),
            params: vec![
                p("a", rand_signed(&mut rng, &shape)),
                p("b", rand_signed(&mut rng, &shape)),
            ],
            f: Box::new(move |g, v| {
                let y = g.elementwise(op, v[0], Some(v[1]))?;
                project(g, y, &r)
            }),
            max_entries: None,
        });
    }
    let unary: [(&str, Elementwise, bool); 5] = [
        ("relu", Elementwise::Relu, false),
        ("exp", Elementwise::Exp, false),
        ("log", Elementwise::Log, true),
        ("neg", Elementwise::Negate, false),
        ("sqrt", Elementwise::Sqrt, true),
    ];
    for (name, op, positive) in unary {
        let r = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let x = if positive {
            rand_tensor(&mut rng, &shape, 0.3, 2.0)
        } else {
            rand_signed(&mut rng, &shape)
        };
        out.push(Case {
            label: format!("elementwise {name}"),
            params: vec![p("x", x)],
            f: Box::new(move |g, v| {
                let y = g.elementwise(op, v[0], None)?;
                project(g, y, &r)
            }),
            max_entries: None,
        });
    }
    {
        let r = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let b = rand_signed(&mut rng, &[1]);
        out.push(Case {
            label: "scalar broadcast div".into(),
            params: vec![p("a", rand_signed(&mut rng, &shape)), p("s", b)],
            f: Box::new(move |g, v| {
                let y = g.div(v[0], v[1])?;
                project(g, y, &r)
            }),
            max_entries: None,
        });
    }
    {
        let r = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        out.push(Case {
            label: "scale and add_const".into(),
            params: vec![p("x", rand_signed(&mut rng, &shape))],
            f: Box::new(move |g, v| {
                let y = g.scale(v[0], -1.7);
                let y = g.add_const(y, 0.4);
                project(g, y, &r)
            }),
            max_entries: None,
        });
    }
    out.push(Case {
        label: "sum".into(),
        params: vec![p("x", rand_signed(&mut rng, &shape))],
        f: Box::new(|g, v| {
            let y = g.exp(v[0])?;
            Ok(g.sum(y))
        }),
        max_entries: None,
    });
    out.push(Case {
        label: "mean".into(),
        params: vec![p("x", rand_signed(&mut rng, &shape))],
        f: Box::new(|g, v| {
            let y = g.exp(v[0])?;
            g.mean(y)
        }),
        max_entries: None,
    });
    {
        let r = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        out.push(Case {
            label: "matmul".into(),
            params: vec![
                p("a", rand_signed(&mut rng, &[3, 4])),
                p("b", rand_signed(&mut rng, &[4, 2])),
            ],
            f: Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, &r)
            }),
            max_entries: None,
        });
    }
    {
        let r = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        out.push(Case {
            label: "softmax over channels".into(),
            params: vec![p("logits", rand_tensor(&mut rng, &shape, -2.0, 2.0))],
            f: Box::new(move |g, v| {
                let y = g.softmax_channel(v[0])?;
                project(g, y, &r)
            }),
            max_entries: None,
        });
    }
    {
        let r = rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0);
        let r2 = rand_tensor(&mut rng, &[10], -1.0, 1.0);
        out.push(Case {
            label: "concat channels".into(),
            params: vec![
                p("a", rand_signed(&mut rng, &[2, 3, 2])),
                p("b", rand_signed(&mut rng, &[2, 3, 3])),
            ],
            f: Box::new(move |g, v| {
                let y = g.concat_channels(&[v[0], v[1]])?;
                project(g, y, &r)
            }),
            max_entries: None,
        });
        out.push(Case {
            label: "concat flat".into(),
            params: vec![
                p("a", rand_signed(&mut rng, &[2, 2])),
                p("b", rand_signed(&mut rng, &[6])),
            ],
            f: Box::new(move |g, v| {
                let y = g.concat_flat(&[v[0], v[1]]);
                project(g, y, &r2)
            }),
            max_entries: None,
        });
    }
    for (k, d, batched) in [(3, 1, false), (3, 2, false), (1, 1, false), (3, 3, true)] {
        let (h, w, cin, cout) = (5, 6, 2, 3);
        let mut xs = vec![h, w, cin];
        let mut ys = vec![h, w, cout];
        if batched {
            xs.insert(0, 2);
            ys.insert(0, 2);
        }
        let r = rand_tensor(&mut rng, &ys, -1.0, 1.0);
        out.push(Case {
            label: format!(
                "conv2d k={k} d={d}{}",
                if batched { " batched" } else { "" }
            ),
            params: vec![
                p("input", rand_tensor(&mut rng, &xs, -1.0, 1.0)),
                p("kernel", rand_tensor(&mut rng, &[k, k, cin, cout], -1.0, 1.0)),
                p("bias", rand_tensor(&mut rng, &[cout], -1.0, 1.0)),
            ],
            f: Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], d)?;
                project(g, y, &r)
            }),
            max_entries: None,
        });
    }
    {
        let (n, c) = (12, 4);
        let labels = rand_labels(&mut rng, n, c, 0.25);
        let weights: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..3.0)).collect();
        let l1 = labels.clone();
        out.push(Case {
            label: "cross-entropy with ignore pixels".into(),
            params: vec![p("logits", rand_tensor(&mut rng, &[3, 4, c], -2.0, 2.0))],
            f: Box::new(move |g, v| Ok(g.cross_entropy(v[0], &l1, None)?.0)),
            max_entries: None,
        });
        out.push(Case {
            label: "class-weighted cross-entropy".into(),
            params: vec![p("logits", rand_tensor(&mut rng, &[3, 4, c], -2.0, 2.0))],
            f: Box::new(move |g, v| Ok(g.cross_entropy(v[0], &labels, Some(&weights))?.0)),
            max_entries: None,
        });
    }

    // model-level terms on a tiny tri-branch network
    let spec = suite_arch();
    let model = FctnModel::<f64>::new(spec.clone(), rng.random())?;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let params: Vec<(String, Tensor<f64>)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let (b, h, w) = (2, 5, 6);
    let src = rand_tensor(&mut rng, &[b, h, w, 3], 0.0, 1.0);
    let tgt = rand_tensor(&mut rng, &[b, h, w, 3], 0.0, 1.0);
    let src_masks = rand_labels(&mut rng, b * h * w, 3, 0.1);
    let tgt_masks = rand_labels(&mut rng, b * h * w, 3, 0.5);
    let cw = losses::class_weights(src_masks.chunks(h * w), 3)?;
    let hp = LossWeights {
        alpha: 1e3,
        beta: 100.0,
    };
    let bind = |names: &[String], v: &[Var]| -> Bindings {
        names.iter().cloned().zip(v.iter().copied()).collect()
    };
    {
        let (m, n) = (model.clone(), names.clone());
        out.push(Case {
            label: "weight-divergence term".into(),
            params: params.clone(),
            f: Box::new(move |g, v| losses::weight_constraint(g, &m, &bind(&n, v))),
            max_entries: Some(8),
        });
    }
    {
        let (m, n, s, sm) = (model.clone(), names.clone(), src.clone(), src_masks.clone());
        out.push(Case {
            label: "source objective (pretraining)".into(),
            params: params.clone(),
            f: Box::new(move |g, v| {
                let batch = BatchRef {
                    images: &s,
                    masks: &sm,
                };
                Ok(losses::total_loss(g, &m, &bind(&n, v), batch, None, None, hp)?.root)
            }),
            max_entries: Some(8),
        });
    }
    {
        let (m, n) = (model.clone(), names.clone());
        out.push(Case {
            label: "curriculum objective".into(),
            params,
            f: Box::new(move |g, v| {
                let s = BatchRef {
                    images: &src,
                    masks: &src_masks,
                };
                let t = BatchRef {
                    images: &tgt,
                    masks: &tgt_masks,
                };
                Ok(losses::total_loss(g, &m, &bind(&n, v), s, Some(t), Some(&cw), hp)?.root)
            }),
            max_entries: Some(8),
        });
    }
    Ok(out)
}

/// Every differentiable op and every loss term on small seeded random
/// instances, in 64-bit. With `fault` set, that op's backward rule is
/// deliberately corrupted and the affected checks are expected to fail.
pub fn standard_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradReport>> {
    cases(seed)?
        .into_iter()
        .map(|c| {
            let opts = CheckOptions {
                max_entries: c.max_entries,
                fault,
                ..Default::default()
            };
            grad_check(&c.label, &c.f, &c.params, opts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Elementwise;

    fn p(name: &str, shape: &[usize], v: &[f64]) -> (String, Tensor<f64>) {
        (name.into(), Tensor::from_f64(shape, v).unwrap())
    }

    #[test]
    fn linear_function_is_exact() {
        let r = grad_check(
            "sum",
            |g, v| Ok(g.sum(v[0])),
            &[p("x", &[4], &[0.3, -1.0, 2.0, 5.0])],
            CheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed());
        assert!(r.max_rel_error() < 1e-9);
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let e = g.exp(v[0])?;
            Ok(g.sum(e))
        };
        let params = [p("x", &[3], &[0.1, 0.2, -0.3])];
        let ok = grad_check("exp", f, &params, CheckOptions::default()).unwrap();
        assert!(ok.passed());
        let bad = grad_check(
            "exp",
            f,
            &params,
            CheckOptions {
                fault: Some(OpKind::Elementwise(Elementwise::Exp)),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!bad.passed());
        assert_eq!(bad.failures().count(), 1);
    }

    #[test]
    fn standard_suite_passes() {
        let reports = standard_suite(11, None).unwrap();
        for r in &reports {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn every_fault_is_detected() {
        for name in FAULT_NAMES {
            let kind = parse_fault(name).unwrap();
            let reports = standard_suite(11, Some(kind)).unwrap();
            assert!(reports.iter().any(|r| !r.passed()), "fault in {name} went unnoticed");
        }
        assert!(parse_fault("bogus").is_err());
    }
}
