//! The tri-branch network: shared base F, coordinate maps, branches F1, F2, Ft.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_in_place, Graph, Var};
use crate::nn::{init_bias, init_kernel, param_seed, Bindings, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::IGNORE_ID;

/// One convolution in an architecture description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel_size: usize, dilation: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel_size,
            dilation,
        }
    }
}

/// Layer layout shared by the base and (identically) by all three branches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_channels: usize,
    pub num_classes: usize,
    pub base_layers: Vec<ConvSpec>,
    /// The last entry must emit `num_classes` channels.
    pub branch_layers: Vec<ConvSpec>,
}

impl Default for ArchSpec {
    /// Reference layout: a dilated 4-layer base and 3-layer heads.
    fn default() -> Self {
        ArchSpec {
            input_channels: 3,
            num_classes: 8,
            base_layers: vec![
                ConvSpec::new(16, 3, 1),
                ConvSpec::new(32, 3, 1),
                ConvSpec::new(32, 3, 2),
                ConvSpec::new(64, 3, 2),
            ],
            branch_layers: vec![
                ConvSpec::new(64, 3, 4),
                ConvSpec::new(64, 1, 1),
                ConvSpec::new(8, 1, 1),
            ],
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        if self.num_classes == 0 || self.num_classes >= IGNORE_ID as usize {
            return bad(format!(
                "num_classes must be in 1..{}, got {}",
                IGNORE_ID, self.num_classes
            ));
        }
        if self.base_layers.is_empty() || self.branch_layers.is_empty() {
            return bad("base_layers and branch_layers must be non-empty".into());
        }
        for (i, l) in self.base_layers.iter().chain(&self.branch_layers).enumerate() {
            if l.kernel_size % 2 == 0 || l.kernel_size == 0 {
                return bad(format!("layer {i}: kernel_size {} must be odd", l.kernel_size));
            }
            if l.dilation == 0 {
                return bad(format!("layer {i}: dilation must be >= 1"));
            }
            if l.out_channels == 0 {
                return bad(format!("layer {i}: out_channels must be positive"));
            }
        }
        let last = self.branch_layers.last().unwrap().out_channels;
        if last != self.num_classes {
            return bad(format!(
                "last branch layer emits {last} channels, expected num_classes = {}",
                self.num_classes
            ));
        }
        Ok(())
    }

    /// Depth D of the base output (before coordinate maps).
    pub fn base_depth(&self) -> usize {
        self.base_layers.last().map_or(self.input_channels, |l| l.out_channels)
    }

    /// Input depth of every branch: D + 2.
    pub fn branch_input_depth(&self) -> usize {
        self.base_depth() + 2
    }
}

/// Which head to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    F1,
    F2,
    Ft,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::F1, Branch::F2, Branch::Ft];

    pub fn namespace(self) -> &'static str {
        match self {
            Branch::F1 => "branch1",
            Branch::F2 => "branch2",
            Branch::Ft => "branch_t",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::F1 => "f1",
            Branch::F2 => "f2",
            Branch::Ft => "ft",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f1" | "branch1" => Ok(Branch::F1),
            "f2" | "branch2" => Ok(Branch::F2),
            "ft" | "t" | "branch_t" => Ok(Branch::Ft),
            other => Err(Error::Invalid(format!(
                "unknown branch `{other}` (expected f1, f2 or ft)"
            ))),
        }
    }
}

/// `H×W×2` map: channel 0 is `px / W`, channel 1 is `py / H`, zero-based.
pub fn coord_maps<T: Element>(h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(h * w * 2);
    for py in 0..h {
        for px in 0..w {
            data.push(T::from_f64(px as f64 / w as f64));
            data.push(T::from_f64(py as f64 / h as f64));
        }
    }
    Tensor::new(&[h, w, 2], data).expect("h*w*2 values")
}

fn base_param(i: usize, what: &str) -> String {
    format!("base.conv{i}.{what}")
}

fn branch_param(branch: Branch, i: usize, what: &str) -> String {
    format!("{}.conv{i}.{what}", branch.namespace())
}

/// Architecture plus parameters, namespaced `base`, `branch1`, `branch2`, `branch_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FctnModel<T = f32> {
    spec: ArchSpec,
    pub params: ParamStore<T>,
}

impl<T: Element> FctnModel<T> {
    /// He-initialized model; each parameter draws from its own seeded stream.
    pub fn new(spec: ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut cin = spec.input_channels;
        for (i, l) in spec.base_layers.iter().enumerate() {
            let shape = [l.kernel_size, l.kernel_size, cin, l.out_channels];
            let k = base_param(i, "kernel");
            params.insert(&k, init_kernel(&shape, param_seed(seed, &k)))?;
            params.insert(base_param(i, "bias"), init_bias(&[l.out_channels]))?;
            cin = l.out_channels;
        }
        for branch in Branch::ALL {
            let mut cin = spec.branch_input_depth();
            for (i, l) in spec.branch_layers.iter().enumerate() {
                let shape = [l.kernel_size, l.kernel_size, cin, l.out_channels];
                let k = branch_param(branch, i, "kernel");
                params.insert(&k, init_kernel(&shape, param_seed(seed, &k)))?;
                params.insert(branch_param(branch, i, "bias"), init_bias(&[l.out_channels]))?;
                cin = l.out_channels;
            }
        }
        Ok(FctnModel { spec, params })
    }

    /// Wraps an existing parameter set, checking it against `spec`.
    pub fn from_params(spec: ArchSpec, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        model.params.load_from(&params)?;
        Ok(model)
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Kernel parameter names of a branch, in layer order (biases excluded).
    pub fn branch_kernel_names(&self, branch: Branch) -> Vec<String> {
        (0..self.spec.branch_layers.len())
            .map(|i| branch_param(branch, i, "kernel"))
            .collect()
    }

    /// All parameter names under a branch namespace.
    pub fn branch_param_names(&self, branch: Branch) -> Vec<String> {
        let prefix = format!("{}.", branch.namespace());
        self.params
            .names()
            .filter(|n| n.starts_with(&prefix))
            .map(str::to_string)
            .collect()
    }

    /// Copies every parameter of `from` into `to`.
    pub fn copy_branch(&mut self, from: Branch, to: Branch) {
        for i in 0..self.spec.branch_layers.len() {
            for what in ["kernel", "bias"] {
                let src = self.params.get(&branch_param(from, i, what)).unwrap().clone();
                let dst = self.params.get_mut(&branch_param(to, i, what)).unwrap();
                dst.data_mut().copy_from_slice(src.data());
            }
        }
    }

    pub fn cast<U: Element>(&self) -> FctnModel<U> {
        FctnModel {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    /// Base conv stack (conv + relu per layer), then coordinate maps appended.
    ///
    /// `image` is `[H, W, Cin]` or `[B, H, W, Cin]`; output depth is D + 2.
    pub fn forward_base(&self, g: &mut Graph<T>, b: &Bindings, image: Var) -> Result<Var> {
        let shape = g.shape(image).to_vec();
        let (lead, c) = shape.split_at(shape.len().saturating_sub(1));
        if !(shape.len() == 3 || shape.len() == 4) || c[0] != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "image {:?} does not match {} input channels",
                shape, self.spec.input_channels
            )));
        }
        let mut x = image;
        for (i, l) in self.spec.base_layers.iter().enumerate() {
            let k = b.get(&base_param(i, "kernel"))?;
            let bias = b.get(&base_param(i, "bias"))?;
            x = g.conv2d(x, k, bias, l.dilation)?;
            x = g.relu(x)?;
        }
        let (h, w) = (lead[lead.len() - 2], lead[lead.len() - 1]);
        let coords = coord_maps::<T>(h, w);
        let coords = if shape.len() == 4 {
            let batch = lead[0];
            let mut data = Vec::with_capacity(batch * coords.numel());
            for _ in 0..batch {
                data.extend_from_slice(coords.data());
            }
            Tensor::new(&[batch, h, w, 2], data)?
        } else {
            coords
        };
        let coords = g.constant(coords);
        g.concat_channels(&[x, coords])
    }

    /// Branch conv stack: relu between layers, raw logits from the last.
    pub fn forward_branch(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        branch: Branch,
        features: Var,
    ) -> Result<Var> {
        let depth = g.shape(features).last().copied().unwrap_or(0);
        if depth != self.spec.branch_input_depth() {
            return Err(Error::Shape(format!(
                "branch input depth {depth}, expected {}",
                self.spec.branch_input_depth()
            )));
        }
        let mut x = features;
        let n = self.spec.branch_layers.len();
        for (i, l) in self.spec.branch_layers.iter().enumerate() {
            let k = b.get(&branch_param(branch, i, "kernel"))?;
            let bias = b.get(&branch_param(branch, i, "bias"))?;
            x = g.conv2d(x, k, bias, l.dilation)?;
            if i + 1 < n {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Inference: one base pass shared by the requested branches. Returns
    /// logits per branch, in the order given.
    pub fn logits(&self, images: &Tensor<T>, branches: &[Branch]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let feats = self.forward_base(&mut g, &b, x)?;
        let mut out = Vec::with_capacity(branches.len());
        for &br in branches {
            let l = self.forward_branch(&mut g, &b, br, feats)?;
            out.push(g.value(l).clone());
        }
        Ok(out)
    }

    /// Per-pixel argmax class and its softmax probability.
    pub fn predict(&self, branch: Branch, image: &Tensor<T>) -> Result<Prediction> {
        let logits = self.logits(image, &[branch])?;
        Ok(Prediction::from_logits(&logits[0]))
    }
}

/// Label map and confidence map for one image (or a batch, flattened).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Leading dimensions of the logits (without the class axis).
    pub shape: Vec<usize>,
    pub labels: Vec<u8>,
    pub confidence: Vec<f32>,
}

impl Prediction {
    /// Argmax over the trailing axis; ties go to the smaller class id.
    pub fn from_logits<T: Element>(logits: &Tensor<T>) -> Self {
        let c = logits.channels();
        let n = logits.numel() / c;
        let mut labels = Vec::with_capacity(n);
        let mut confidence = Vec::with_capacity(n);
        let mut row = vec![T::zero(); c];
        for chunk in logits.data().chunks(c) {
            let mut best = 0;
            for j in 1..c {
                if chunk[j] > chunk[best] {
                    best = j;
                }
            }
            row.copy_from_slice(chunk);
            softmax_in_place(&mut row);
            labels.push(best as u8);
            confidence.push(row[best].to_f64() as f32);
        }
        Prediction {
            shape: logits.shape()[..logits.rank() - 1].to_vec(),
            labels,
            confidence,
        }
    }
}
