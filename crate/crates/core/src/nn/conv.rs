use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// A stride-1, "same"-padded dilated convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    /// `[kh, kw, Cin, Cout]`
    pub kernel: Tensor<T>,
    /// `[Cout]`
    pub bias: Tensor<T>,
    pub dilation: usize,
}

impl<T: Element> ConvLayer<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>, dilation: usize) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::Invalid("dilation must be >= 1".into()));
        }
        let &[kh, kw, _, cout] = kernel.shape() else {
            return Err(Error::Shape(format!(
                "kernel must be kh x kw x Cin x Cout, got {:?}",
                kernel.shape()
            )));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("kernel {kh}x{kw} must be odd-sized")));
        }
        if bias.shape() != [cout] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match Cout={cout}",
                bias.shape()
            )));
        }
        Ok(ConvLayer {
            kernel,
            bias,
            dilation,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    /// Span of the dilated kernel along each axis: `(k - 1) * dilation + 1`.
    pub fn effective_extent(&self) -> (usize, usize) {
        let s = self.kernel.shape();
        ((s[0] - 1) * self.dilation + 1, (s[1] - 1) * self.dilation + 1)
    }

    /// Adds kernel and bias as leaves and applies the convolution.
    pub fn forward(&self, g: &mut Graph<T>, input: Var) -> Result<Var> {
        let k = g.leaf(self.kernel.clone());
        let b = g.leaf(self.bias.clone());
        conv2d_dilated(g, input, k, b, self.dilation)
    }
}

/// Graph-level dilated convolution on already-bound kernel and bias.
pub fn conv2d_dilated<T: Element>(
    g: &mut Graph<T>,
    input: Var,
    kernel: Var,
    bias: Var,
    dilation: usize,
) -> Result<Var> {
    g.conv2d(input, kernel, bias, dilation)
}
