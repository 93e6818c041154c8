use rand::Rng;

use crate::autodiff::{gemm, Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Fully connected network with Leaky-ReLU hidden activations and a linear
/// output layer. Parameters are stored flat, layer by layer, each layer as
/// its row-major `[fan_in, fan_out]` weight followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    slope: f64,
}

impl Mlp {
    pub fn param_count(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Uniform weights in ±1/√fan_in, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], slope: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, slope)?;
        let mut offset = 0;
        for w in layer_sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut net.params[offset..offset + w[0] * w[1]] {
                *p = rng.gen_range(-bound..bound);
            }
            offset += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn zeros(layer_sizes: &[usize], slope: f64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must list at least input and output widths, all positive: {layer_sizes:?}"
            )));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params: vec![0.0; Self::param_count(layer_sizes)],
            slope,
        })
    }

    pub fn from_params(layer_sizes: &[usize], params: Vec<f64>, slope: f64) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, slope)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension { expected: self.params.len(), got: params.len() });
        }
        self.params = params;
        Ok(())
    }

    /// Zeroes the output layer so the network starts as the zero function.
    pub fn zero_output_layer(&mut self) {
        let n = self.layer_sizes.len();
        let (fan_in, fan_out) = (self.layer_sizes[n - 2], self.layer_sizes[n - 1]);
        let len = self.params.len();
        for p in &mut self.params[len - fan_in * fan_out - fan_out..] {
            *p = 0.0;
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.forward(&batch)?.into_data())
    }

    /// Batched evaluation of a `[rows, input_dim]` matrix without recording.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), got: x.cols() });
        }
        let rows = x.rows();
        let mut h = x.data().to_vec();
        let mut offset = 0;
        let layers = self.layer_sizes.len() - 1;
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let bias = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let mut next = vec![0.0; rows * fan_out];
            gemm(rows, fan_in, fan_out, &h, false, weights, false, &mut next);
            let act = Unary::LeakyRelu(self.slope);
            for row in next.chunks_mut(fan_out) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                    if l + 1 < layers {
                        *v = act.apply(*v);
                    }
                }
            }
            h = next;
            offset += fan_in * fan_out + fan_out;
        }
        Tensor::matrix(rows, self.output_dim(), h)
    }

    /// Records the network on `tape` for a `[rows, input_dim]` input, reading
    /// weights from the flat `params` node.
    pub fn record(&self, tape: &mut Tape, x: Var, params: Var) -> Result<Var> {
        let mut h = x;
        let mut offset = 0;
        let layers = self.layer_sizes.len() - 1;
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = tape.slice(params, offset, offset + fan_in * fan_out)?;
            let weights = tape.reshape(weights, &[fan_in, fan_out])?;
            let end = offset + fan_in * fan_out;
            let bias = tape.slice(params, end, end + fan_out)?;
            h = tape.matmul(h, weights)?;
            h = tape.add(h, bias)?;
            if l + 1 < layers {
                h = tape.unary(h, Unary::LeakyRelu(self.slope))?;
            }
            offset = end + fan_out;
        }
        Ok(h)
    }

    /// Adds the current parameters to `tape` as an input leaf.
    pub fn params_leaf(&self, tape: &mut Tape) -> Var {
        tape.input(Tensor::vector(self.params.clone()))
    }

    /// Adds the current parameters to `tape` as a constant.
    pub fn params_const(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor::vector(self.params.clone()))
    }
}
