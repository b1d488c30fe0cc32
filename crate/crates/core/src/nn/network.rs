use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{self, InputGrad, LayerCache, LayerSpec};
use super::tensor::Tensor;
use crate::error::{FedError, Result};

/// Per-layer parameter tensors. Gradients use the same layout.
pub type ParamTensors = Vec<Vec<Tensor>>;

/// A sequential stack of layers with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: ParamTensors,
}

/// Activation record of one forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Tensor>,
    caches: Vec<LayerCache>,
    output_shape: Vec<usize>,
}

impl Tape {
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

impl Network {
    /// Validates the layer chain and allocates zero parameters.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(FedError::Config(format!(
                "invalid network input shape {input_shape:?}"
            )));
        }
        let mut shape = input_shape.to_vec();
        for (i, l) in layers.iter().enumerate() {
            shape = l.output_shape(&shape, i)?;
        }
        let params = layers
            .iter()
            .map(|l| l.param_shapes().iter().map(|s| Tensor::zeros(s)).collect())
            .collect();
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            params,
        })
    }

    /// Uniform(-s, s) weights with s = 1/sqrt(fan_in), zero biases, unit
    /// layer-norm scales.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (l, ps) in self.layers.iter().zip(self.params.iter_mut()) {
            match l {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                    let s = 1.0 / (l.fan_in() as f64).sqrt();
                    for w in ps[0].data_mut() {
                        *w = rng.random_range(-s..s);
                    }
                    ps[1].fill(0.0);
                }
                LayerSpec::LayerNorm { .. } => {
                    ps[0].fill(1.0);
                    ps[1].fill(0.0);
                }
                _ => {}
            }
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for (i, l) in self.layers.iter().enumerate() {
            shape = l
                .output_shape(&shape, i)
                .expect("validated at construction");
        }
        shape
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &ParamTensors {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTensors {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        count(&self.params)
    }

    pub fn zero_grads(&self) -> ParamTensors {
        zeros_like(&self.params)
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tape)> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(FedError::Shape {
                layer: 0,
                detail: format!(
                    "network expects input {:?}, got {:?}",
                    self.input_shape,
                    input.shape()
                ),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for (i, (l, ps)) in self.layers.iter().zip(&self.params).enumerate() {
            let out_shape = l.output_shape(current.shape(), i)?;
            let (out, cache) = layer::forward(l, ps, &current, &out_shape);
            inputs.push(std::mem::replace(&mut current, out));
            caches.push(cache);
        }
        let output_shape = current.shape().to_vec();
        Ok((
            current,
            Tape {
                inputs,
                caches,
                output_shape,
            },
        ))
    }

    /// Convenience form: fresh parameter gradients plus the full input gradient.
    pub fn backward(&self, tape: &Tape, grad_output: &Tensor) -> Result<(ParamTensors, Tensor)> {
        let mut grads = self.zero_grads();
        let gx = self
            .backward_into(tape, grad_output.data(), Some(&mut grads), InputGrad::Full)?
            .expect("full input gradient requested");
        let gx = Tensor::new(self.input_shape.clone(), gx)?;
        Ok((grads, gx))
    }

    /// Backward pass that accumulates into existing gradient buffers.
    ///
    /// `grads = None` skips parameter gradients entirely. The returned vector
    /// follows `want`: nothing, the full flat input gradient, or only the
    /// requested flat input positions.
    pub fn backward_into(
        &self,
        tape: &Tape,
        grad_output: &[f64],
        mut grads: Option<&mut ParamTensors>,
        want: InputGrad<'_>,
    ) -> Result<Option<Vec<f64>>> {
        self.check_tape(tape)?;
        let out_len: usize = tape.output_shape.iter().product();
        if grad_output.len() != out_len {
            return Err(FedError::Usage(format!(
                "gradient of length {} for network output {:?}",
                grad_output.len(),
                tape.output_shape
            )));
        }
        let n = self.layers.len();
        if n == 0 {
            return Ok(match want {
                InputGrad::None => None,
                InputGrad::Full => Some(grad_output.to_vec()),
                InputGrad::Indices(idx) => Some(idx.iter().map(|&i| grad_output[i]).collect()),
            });
        }
        // Flatten is the identity on the flat layout, so a position request
        // can be forwarded to the first layer that actually transforms data.
        let first_real = self
            .layers
            .iter()
            .position(|l| *l != LayerSpec::Flatten)
            .unwrap_or(n);
        let lowest_param = if grads.is_some() {
            self.layers
                .iter()
                .position(|l| !l.param_shapes().is_empty())
        } else {
            None
        };
        let need_input = !matches!(want, InputGrad::None);
        // Layers strictly below `stop` need no work.
        let stop = if need_input {
            0
        } else {
            match lowest_param {
                Some(p) => p,
                None => return Ok(None),
            }
        };

        let mut g = grad_output.to_vec();
        for i in (stop..n).rev() {
            let layer_want = if i == stop && !need_input {
                InputGrad::None
            } else if i <= first_real {
                want
            } else {
                InputGrad::Full
            };
            let layer_grads = grads.as_deref_mut().map(|gs| gs[i].as_mut_slice());
            let out = layer::backward(
                &self.layers[i],
                &self.params[i],
                &tape.inputs[i],
                &tape.caches[i],
                &g,
                layer_grads,
                layer_want,
            );
            match out {
                Some(v) => g = v,
                None => return Ok(None),
            }
            if i <= first_real && matches!(want, InputGrad::Indices(_)) {
                // Already reduced to requested positions; layers below are Flatten.
                return Ok(Some(g));
            }
        }
        Ok(if need_input { Some(g) } else { None })
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        let stale = || FedError::Usage("tape does not belong to this network".into());
        if tape.inputs.len() != self.layers.len() {
            return Err(stale());
        }
        let mut shape = self.input_shape.clone();
        for (i, l) in self.layers.iter().enumerate() {
            if tape.inputs[i].shape() != shape.as_slice() {
                return Err(stale());
            }
            let is_norm = matches!(l, LayerSpec::LayerNorm { .. });
            let has_cache = matches!(tape.caches[i], LayerCache::Norm { .. });
            if is_norm != has_cache {
                return Err(stale());
            }
            shape = l.output_shape(&shape, i)?;
        }
        if shape != tape.output_shape {
            return Err(stale());
        }
        Ok(())
    }

    /// Every parameter entry in storage order.
    pub fn flat_params(&self) -> impl Iterator<Item = &f64> + '_ {
        self.params.iter().flatten().flat_map(|t| t.data().iter())
    }

    pub fn flat_params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|t| t.data_mut().iter_mut())
    }
}

pub fn count(params: &ParamTensors) -> usize {
    params.iter().flatten().map(Tensor::len).sum()
}

pub fn zeros_like(params: &ParamTensors) -> ParamTensors {
    params
        .iter()
        .map(|ps| ps.iter().map(|t| Tensor::zeros(t.shape())).collect())
        .collect()
}

pub fn add_into(acc: &mut ParamTensors, other: &ParamTensors) {
    for (a, b) in acc.iter_mut().flatten().zip(other.iter().flatten()) {
        a.add_assign(b);
    }
}

pub fn scale_all(params: &mut ParamTensors, factor: f64) {
    params.iter_mut().flatten().for_each(|t| t.scale(factor));
}

pub fn norm_sq(params: &ParamTensors) -> f64 {
    params.iter().flatten().map(Tensor::norm_sq).sum()
}

pub fn same_shapes(a: &ParamTensors, b: &ParamTensors) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.len() == y.len() && x.iter().zip(y).all(|(s, t)| s.shape() == t.shape())
        })
}

pub fn flat(params: &ParamTensors) -> impl Iterator<Item = &f64> + '_ {
    params.iter().flatten().flat_map(|t| t.data().iter())
}

pub fn flat_mut(params: &mut ParamTensors) -> impl Iterator<Item = &mut f64> + '_ {
    params
        .iter_mut()
        .flatten()
        .flat_map(|t| t.data_mut().iter_mut())
}
