//! Fully connected backbone with hand-written backpropagation and momentum SGD.
//!
//! Weights are stored `output_dim x input_dim`, so a layer computes
//! `z = x W^T + b` for a batch `x` of shape `n x input_dim`.
//!
//! # Checkpoint layout
//!
//! All integers are little-endian `u32`, all reals little-endian `f64`.
//!
//! ```text
//! magic        4 bytes  b"PCNN"
//! version      u32      1
//! layer_count  u32      L
//! L times:     u32 input_dim, u32 output_dim, u32 activation (0 identity, 1 relu)
//! L times:     output_dim*input_dim weights (row-major), then output_dim biases
//! ```
//!
//! Momentum buffers are not stored; a loaded network starts with zeroed buffers.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numeric::{matmul, matmul_nt, matmul_tn, Matrix, Rng};

const CHECKPOINT_MAGIC: &[u8; 4] = b"PCNN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }
}

/// Relu hidden layers followed by an identity output layer: `dims = [d, h1, ..., k]`.
pub fn mlp_specs(dims: &[usize]) -> Vec<LayerSpec> {
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i + 2 == dims.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Matrix,
    pub bias: Vec<f64>,
    weight_velocity: Matrix,
    bias_velocity: Vec<f64>,
}

impl Layer {
    /// Layer with explicit parameters and zeroed momentum.
    pub fn from_parts(activation: Activation, weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::DimensionMismatch {
                op: "layer bias",
                left: weight.shape(),
                right: (bias.len(), 1),
            });
        }
        let spec = LayerSpec::new(weight.cols(), weight.rows(), activation);
        Ok(Self {
            spec,
            weight_velocity: Matrix::zeros(weight.rows(), weight.cols()),
            bias_velocity: vec![0.0; bias.len()],
            weight,
            bias,
        })
    }

    pub fn weight_velocity(&self) -> &Matrix {
        &self.weight_velocity
    }

    pub fn bias_velocity(&self) -> &[f64] {
        &self.bias_velocity
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    layers: Vec<Layer>,
}

fn check_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::invalid("network needs at least one layer"));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.input_dim == 0 || s.output_dim == 0 {
            return Err(Error::invalid(format!("layer {i} has a zero dimension")));
        }
        if i > 0 && specs[i - 1].output_dim != s.input_dim {
            return Err(Error::IncompatibleChain {
                layer: i,
                expected: s.input_dim,
                found: specs[i - 1].output_dim,
            });
        }
    }
    if specs.last().map(|s| s.activation) != Some(Activation::Identity) {
        return Err(Error::invalid("final layer must use the identity activation"));
    }
    Ok(())
}

impl NetworkParams {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<_> = layers.iter().map(|l| l.spec).collect();
        check_chain(&specs)?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output_dim
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            for v in [
                l.spec.input_dim as u32,
                l.spec.output_dim as u32,
                l.spec.activation.code(),
            ] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for l in &self.layers {
            for v in l.weight.data().iter().chain(&l.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::invalid("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut specs = Vec::with_capacity(count);
        for _ in 0..count {
            let input_dim = read_u32(&mut r)? as usize;
            let output_dim = read_u32(&mut r)? as usize;
            let activation = Activation::from_code(read_u32(&mut r)?)?;
            specs.push(LayerSpec::new(input_dim, output_dim, activation));
        }
        check_chain(&specs)?;
        let mut layers = Vec::with_capacity(count);
        for s in specs {
            let weight = read_f64s(&mut r, s.output_dim * s.input_dim)?;
            let bias = read_f64s(&mut r, s.output_dim)?;
            let weight = Matrix::new(s.output_dim, s.input_dim, weight)?;
            layers.push(Layer::from_parts(s.activation, weight, bias)?);
        }
        Ok(Self { layers })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Uniform weights with standard deviation `sqrt(2 / fan_in)`, zero biases.
pub fn init_params(specs: &[LayerSpec], rng: &mut Rng) -> Result<NetworkParams> {
    check_chain(specs)?;
    let mut layers = Vec::with_capacity(specs.len());
    for s in specs {
        let bound = (6.0 / s.input_dim as f64).sqrt();
        let data = (0..s.output_dim * s.input_dim)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let weight = Matrix::new(s.output_dim, s.input_dim, data)?;
        layers.push(Layer::from_parts(s.activation, weight, vec![0.0; s.output_dim])?);
    }
    Ok(NetworkParams { layers })
}

/// Intermediates of one forward pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Per layer, `x W^T + b`.
    pub pre: Vec<Matrix>,
    /// Per layer, the activation applied to `pre`.
    pub post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.post.last().expect("trace has at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

pub fn forward(params: &NetworkParams, x: &Matrix) -> Result<ForwardTrace> {
    if x.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            op: "forward",
            left: x.shape(),
            right: (params.input_dim(), params.output_dim()),
        });
    }
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post: Vec<Matrix> = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let input = post.last().unwrap_or(x);
        let mut z = matmul_nt(input, &layer.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let a = match layer.spec.activation {
            Activation::Identity => z.clone(),
            Activation::Relu => z.map(|v| v.max(0.0)),
        };
        pre.push(z);
        post.push(a);
    }
    Ok(ForwardTrace {
        input: x.clone(),
        pre,
        post,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weight.is_finite() && g.bias.iter().all(|v| v.is_finite()))
    }
}

/// Parameter gradients of the scalar loss whose gradient at the logits is `dlogits`.
pub fn backward(params: &NetworkParams, trace: &ForwardTrace, dlogits: &Matrix) -> Result<Gradients> {
    if trace.pre.len() != params.layers.len() {
        return Err(Error::invalid("trace does not belong to these parameters"));
    }
    if dlogits.shape() != trace.logits().shape() {
        return Err(Error::DimensionMismatch {
            op: "backward",
            left: dlogits.shape(),
            right: trace.logits().shape(),
        });
    }
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut upstream = dlogits.clone();
    for (idx, layer) in params.layers.iter().enumerate().rev() {
        let mut dz = upstream;
        if layer.spec.activation == Activation::Relu {
            for (g, &z) in dz.data_mut().iter_mut().zip(trace.pre[idx].data()) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let input = if idx == 0 {
            &trace.input
        } else {
            &trace.post[idx - 1]
        };
        let weight = matmul_tn(&dz, input)?;
        let mut bias = vec![0.0; layer.spec.output_dim];
        for row in dz.row_iter() {
            for (b, g) in bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        upstream = if idx > 0 {
            matmul(&dz, &layer.weight)?
        } else {
            dz
        };
        grads.push(LayerGrad { weight, bias });
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

/// `velocity <- momentum * velocity + grad; param <- param - lr * velocity`.
pub fn sgd_step(params: &mut NetworkParams, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid(format!(
            "need lr > 0 and momentum in [0, 1), got lr={lr} momentum={momentum}"
        )));
    }
    if grads.layers.len() != params.layers.len() {
        return Err(Error::invalid("gradient layer count does not match parameters"));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("sgd_step gradients"));
    }
    for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
        if g.weight.shape() != layer.weight.shape() || g.bias.len() != layer.bias.len() {
            return Err(Error::DimensionMismatch {
                op: "sgd_step",
                left: layer.weight.shape(),
                right: g.weight.shape(),
            });
        }
        let w = layer.weight.data_mut().iter_mut();
        let v = layer.weight_velocity.data_mut().iter_mut();
        for ((w, v), g) in w.zip(v).zip(g.weight.data()) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
        let b = layer.bias.iter_mut().zip(layer.bias_velocity.iter_mut());
        for ((b, v), g) in b.zip(&g.bias) {
            *v = momentum * *v + g;
            *b -= lr * *v;
        }
    }
    Ok(())
}
