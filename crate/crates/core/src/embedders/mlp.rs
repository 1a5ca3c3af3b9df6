use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Param;

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// `out x in`
    weight: Param,
    /// `1 x out`
    bias: Param,
}

/// Small feed-forward network: affine layers with a rectifier between them
/// and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroMlp {
    widths: Vec<usize>,
    layers: Vec<Layer>,
}

/// Activations recorded by a forward pass; `inputs[l]` feeds layer `l`,
/// `preacts[l]` is its affine output.
struct Trace {
    inputs: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
}

impl MicroMlp {
    /// He-normal weights, zero biases.
    pub fn new(name: &str, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(name, widths)?;
        for layer in &mut net.layers {
            let fan_in = layer.weight.cols as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            layer.weight.value.iter_mut().for_each(|w| *w = normal.sample(rng));
        }
        Ok(net)
    }

    pub fn zeros(name: &str, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| Layer {
                weight: Param::zeros(format!("{name}.{l}.weight"), w[1], w[0]),
                bias: Param::zeros(format!("{name}.{l}.bias"), 1, w[1]),
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.trace(x)?;
        Ok(trace.preacts.pop().expect("non-empty network"))
    }

    fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_width() {
            return Err(Error::Dimension {
                expected: self.input_width(),
                found: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &layer.weight;
            let z: Vec<f64> = (0..w.rows)
                .map(|r| crate::tensor::dot(w.row(r), &h) + layer.bias.value[r])
                .collect();
            inputs.push(h);
            h = if l + 1 < self.layers.len() {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            preacts.push(z);
        }
        Ok(Trace { inputs, preacts })
    }

    /// Accumulates `d loss / d params` given `grad_out = d loss / d output`,
    /// and returns `d loss / d x`.
    pub fn backward(&mut self, x: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
        if grad_out.len() != self.output_width() {
            return Err(Error::Dimension {
                expected: self.output_width(),
                found: grad_out.len(),
            });
        }
        let trace = self.trace(x)?;
        let n = self.layers.len();
        let mut delta = grad_out.to_vec();
        for l in (0..n).rev() {
            if l + 1 < n {
                // rectifier: no gradient through units with negative pre-activation
                for (d, &z) in delta.iter_mut().zip(&trace.preacts[l]) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &trace.inputs[l];
            let layer = &mut self.layers[l];
            let cols = layer.weight.cols;
            let mut grad_in = vec![0.0; cols];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                layer.bias.grad[r] += d;
                crate::tensor::axpy(d, input, &mut layer.weight.grad[r * cols..(r + 1) * cols]);
                crate::tensor::axpy(d, layer.weight.row(r), &mut grad_in);
            }
            delta = grad_in;
        }
        Ok(delta)
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Replaces parameter values from a checkpoint, checking names and shapes.
    pub fn load_params(&mut self, saved: &[Param]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != saved.len() {
            return Err(Error::Dimension {
                expected: params.len(),
                found: saved.len(),
            });
        }
        for (p, s) in params.iter_mut().zip(saved) {
            if p.name != s.name || p.rows != s.rows || p.cols != s.cols {
                return Err(Error::Config(format!("checkpoint parameter `{}` does not match `{}`", s.name, p.name)));
            }
            p.value.clone_from(&s.value);
        }
        Ok(())
    }
}
