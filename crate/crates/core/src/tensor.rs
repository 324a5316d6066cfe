//! Dense rank-4 tensors and convolution geometry.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Dense row-major rank-4 array of `f64`, laid out as (batch, channel, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        check_dim("Tensor4::from_vec", "data length", shape.iter().product(), data.len())?;
        Ok(Self { shape, data })
    }

    /// Builds a tensor by evaluating `f` at every (n, c, h, w) index.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Contiguous H×W plane for sample `n`, channel `c`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Contiguous block of dims 1..4 for index `i` of the leading dimension.
    pub fn outer(&self, i: usize) -> &[f64] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn outer_mut(&mut self, i: usize) -> &mut [f64] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[i * stride..(i + 1) * stride]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Tensor4) -> Result<Self> {
        self.same_shape("Tensor4::add", other)?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        self.same_shape("Tensor4::max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn same_shape(&self, op: &'static str, other: &Tensor4) -> Result<()> {
        const NAMES: [&str; 4] = ["dim 0", "dim 1", "dim 2", "dim 3"];
        for (i, name) in NAMES.iter().enumerate() {
            check_dim(op, name, self.shape[i], other.shape[i])?;
        }
        Ok(())
    }
}

/// Geometry of a 2-D convolution with a square kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }

    /// Depthwise convolution: one filter per channel.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Geometry(msg.to_string()));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.kernel == 0 {
            return bad("kernel size must be positive");
        }
        if self.stride == 0 || self.dilation == 0 {
            return bad("stride and dilation must be at least 1");
        }
        if self.groups == 0
            || !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::Geometry(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Input channels seen by each filter.
    #[inline]
    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    /// Output channels fed by each input channel.
    #[inline]
    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_per_group(), self.kernel, self.kernel]
    }

    /// Output extent along one spatial axis, or an error when the dilated
    /// kernel does not fit in the padded input.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(Error::Geometry(format!(
                "dilated kernel span {span} exceeds padded input {padded}"
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn output_hw(&self, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        Ok((self.output_extent(h)?, self.output_extent(w)?))
    }
}
