//! Static network description: an ordered list of layers with the shapes
//! and initializers derived from it.
//!
//! Every Conv and every non-final Dense layer is followed by a LIF
//! neuron; the final Dense layer is the non-spiking classifier head. No
//! layer carries a bias, which is load-bearing: channel removal then
//! equals zero-masking exactly, and every effective-weight scheme
//! (codebook, ternary, fake-quant) touches a single tensor per layer.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fmath;
use crate::lif::LifConfig;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    /// 2-d convolution; spiking unless it is the final layer (it never is
    /// in practice).
    Conv { out_c: usize, kernel: usize, stride: usize, pad: usize },
    /// 2x2 average pooling, stride 2. Weightless, non-spiking.
    Pool,
    /// Fully connected on the flattened features. Spiking unless last.
    Dense { out_f: usize },
}

/// How per-step classifier outputs combine into logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
pub struct NetSpec {
    /// Input planes as (channels, height, width).
    pub input: (usize, usize, usize),
    pub layers: Vec<Layer>,
    pub lif: LifConfig,
    pub readout: Readout,
}

/// Shape each layer's activations take, as (channels, height, width);
/// Dense outputs are (features, 1, 1).
pub type FeatShape = (usize, usize, usize);

impl NetSpec {
    /// conv(c1) -> LIF -> pool -> conv(c2) -> LIF -> pool -> dense(classes),
    /// 3x3 kernels, stride 1, pad 1.
    pub fn desk(input: (usize, usize, usize), c1: usize, c2: usize, classes: usize) -> NetSpec {
        NetSpec {
            input,
            layers: vec![
                Layer::Conv { out_c: c1, kernel: 3, stride: 1, pad: 1 },
                Layer::Pool,
                Layer::Conv { out_c: c2, kernel: 3, stride: 1, pad: 1 },
                Layer::Pool,
                Layer::Dense { out_f: classes },
            ],
            lif: LifConfig::default(),
            readout: Readout::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        if self.layers.is_empty() {
            return Err(Error::Contract("network has no layers".into()));
        }
        match self.layers.last() {
            Some(Layer::Dense { .. }) => {}
            _ => return Err(Error::Contract("network must end in a dense classifier head".into())),
        }
        self.feature_shapes().map(|_| ())
    }

    /// Number of classes produced by the head.
    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense { out_f }) => *out_f,
            _ => 0,
        }
    }

    /// Activation shape after each layer, starting from the input planes.
    pub fn feature_shapes(&self) -> Result<Vec<FeatShape>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let (mut c, mut h, mut w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Contract("input planes must be non-empty".into()));
        }
        let mut flattened = false;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv { out_c, kernel, stride, pad } => {
                    if flattened {
                        return Err(Error::Contract(alloc::format!(
                            "layer {i}: conv after dense is not supported"
                        )));
                    }
                    if stride == 0 || kernel == 0 {
                        return Err(Error::Contract(alloc::format!(
                            "layer {i}: kernel and stride must be >= 1"
                        )));
                    }
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(Error::Dimension {
                            op: "feature_shapes",
                            detail: alloc::format!(
                                "layer {i}: kernel {kernel} exceeds padded {}x{}",
                                h + 2 * pad,
                                w + 2 * pad
                            ),
                        });
                    }
                    c = out_c;
                    h = (h + 2 * pad - kernel) / stride + 1;
                    w = (w + 2 * pad - kernel) / stride + 1;
                }
                Layer::Pool => {
                    if flattened {
                        return Err(Error::Contract(alloc::format!(
                            "layer {i}: pool after dense is not supported"
                        )));
                    }
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Dimension {
                            op: "feature_shapes",
                            detail: alloc::format!("layer {i}: pooling odd extents {h}x{w}"),
                        });
                    }
                    h /= 2;
                    w /= 2;
                }
                Layer::Dense { out_f } => {
                    if out_f == 0 {
                        return Err(Error::Contract(alloc::format!("layer {i}: empty dense output")));
                    }
                    c = out_f;
                    h = 1;
                    w = 1;
                    flattened = true;
                }
            }
            shapes.push((c, h, w));
        }
        Ok(shapes)
    }

    /// One shape per weighted layer (Conv and Dense), in layer order.
    pub fn weight_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::new();
        let (mut c, mut h, mut w) = self.input;
        for layer in &self.layers {
            match *layer {
                Layer::Conv { out_c, kernel, stride, pad } => {
                    out.push(vec![out_c, c, kernel, kernel]);
                    c = out_c;
                    h = (h + 2 * pad - kernel) / stride + 1;
                    w = (w + 2 * pad - kernel) / stride + 1;
                }
                Layer::Pool => {
                    h /= 2;
                    w /= 2;
                }
                Layer::Dense { out_f } => {
                    out.push(vec![c * h * w, out_f]);
                    c = out_f;
                    h = 1;
                    w = 1;
                }
            }
        }
        Ok(out)
    }

    /// Indices into the layer list of the weighted layers.
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| !matches!(l, Layer::Pool))
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices into the WEIGHTED layer list of the layers followed by a
    /// LIF neuron (everything weighted except the head).
    pub fn spiking_weighted_layers(&self) -> Vec<usize> {
        let n = self.weighted_layers().len();
        (0..n.saturating_sub(1)).collect()
    }

    /// Fan-in scaled normal init, one tensor per weighted layer.
    pub fn init_weights(&self, seed: u64) -> Result<Vec<Tensor>> {
        let mut rng = rng::stream(seed, rng::Stream::WeightInit);
        let mut out = Vec::new();
        for shape in self.weight_shapes()? {
            out.push(init_tensor(&shape, &mut rng));
        }
        Ok(out)
    }
}

fn init_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    // Conv shapes are [out, in, kh, kw]; dense are [in, out].
    let fan_in: usize = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
    let std = fmath::sqrt(2.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(rng::normal(rng) * std);
    }
    Tensor::new(shape.to_vec(), data).expect("init shape is self-consistent")
}
