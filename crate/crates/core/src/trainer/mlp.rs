//! Fully connected network ending in a softmax, with reverse-mode gradients
//! written out by hand and an Adam optimizer over the flat parameter vector.
//!
//! Parameters are stored layer by layer, each layer as its weight matrix
//! (row-major, `out × in`) followed by its bias.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numkit::{softmax, softmax_backward, PredictionVector, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::InvalidConfig(format!("unknown activation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    sizes: Vec<usize>,
    params: Vec<f64>,
    activation: Activation,
    /// Bumped on every parameter change so caches from older forwards are
    /// rejected by `backward`.
    version: u64,
}

/// Activations recorded by `forward`: the input, every hidden output, and
/// the final prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    version: u64,
    layers: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Output of the last hidden layer (the input when there is none).
    pub fn penultimate(&self) -> &[f64] {
        &self.layers[self.layers.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub pred: PredictionVector,
    pub cache: ForwardCache,
}

impl MlpModel {
    /// All parameters zero.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid layer sizes {sizes:?}")));
        }
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; count],
            activation,
            version: 0,
        })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(sizes, activation)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut m.params[offset..offset + fan_in * fan_out] {
                *p = rng.uniform_range(-limit, limit);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(m)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().expect("validated sizes")
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params = params;
        self.version += 1;
        Ok(())
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        if x.len() != self.sizes[0] {
            return Err(Error::DimensionMismatch {
                expected: self.sizes[0],
                got: x.len(),
            });
        }
        let mut layers = vec![x.to_vec()];
        let mut offset = 0;
        let last = self.sizes.len() - 2;
        let mut logits = Vec::new();
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let input = layers.last().expect("input pushed");
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            offset += n_in * n_out + n_out;
            if l == last {
                logits = z;
            } else {
                layers.push(z.into_iter().map(|v| self.activation.apply(v)).collect());
            }
        }
        let pred = softmax(&logits)?;
        Ok(Forward {
            logits,
            pred,
            cache: ForwardCache {
                version: self.version,
                layers,
            },
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.pred.into_inner())
    }

    /// Accumulates into `grads` the parameter gradient of a loss whose
    /// gradient with respect to this forward's prediction is `grad_pred`.
    pub fn backward(&self, fwd: &Forward, grad_pred: &[f64], grads: &mut [f64]) -> Result<()> {
        if fwd.cache.version != self.version {
            return Err(Error::StaleCache);
        }
        if grads.len() != self.params.len() || grad_pred.len() != self.num_classes() {
            return Err(Error::GradientShapeMismatch);
        }
        let mut delta = softmax_backward(fwd.pred.as_slice(), grad_pred);
        let mut offset = self.params.len();
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            offset -= n_in * n_out + n_out;
            let input = &fwd.cache.layers[l];
            let (gw, gb) = grads[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for o in 0..n_out {
                gb[o] += delta[o];
                for (g, &a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                    *g += delta[o] * a;
                }
            }
            if l > 0 {
                let weights = &self.params[offset..offset + n_in * n_out];
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 = (0..n_out).map(|o| weights[o * n_in + i] * delta[o]).sum();
                        back * self.activation.derivative_from_output(input[i])
                    })
                    .collect();
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# ndcl checkpoint v1\n");
        let sizes: Vec<String> = self.sizes.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "activation={}", self.activation.name());
        let _ = writeln!(out, "sizes={}", sizes.join(","));
        let _ = writeln!(out, "params={}", self.params.len());
        for p in &self.params {
            let _ = writeln!(out, "{p}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::parse(0, format!("missing {what}")));
        let (ln, magic) = next("header")?;
        if magic != "# ndcl checkpoint v1" {
            return Err(Error::parse(ln, "not a checkpoint"));
        }
        let mut field = |key: &str| -> Result<(usize, String)> {
            let (ln, l) = next(key)?;
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(|v| (ln, v.to_string()))
                .ok_or_else(|| Error::parse(ln, format!("expected {key}=")))
        };
        let (_, act) = field("activation")?;
        let (ln_sizes, sizes) = field("sizes")?;
        let (ln_count, count) = field("params")?;
        let sizes: Vec<usize> = sizes
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::parse(ln_sizes, format!("bad size '{s}'"))))
            .collect::<Result<_>>()?;
        let count: usize = count.parse().map_err(|_| Error::parse(ln_count, "bad parameter count"))?;
        let mut model = Self::zeros(&sizes, act.parse()?)?;
        if count != model.params.len() {
            return Err(Error::parse(ln_count, "parameter count does not match layer sizes"));
        }
        let values: Vec<f64> = lines
            .filter(|(_, l)| !l.is_empty())
            .map(|(ln, l)| l.parse().map_err(|_| Error::parse(ln, format!("bad parameter '{l}'"))))
            .collect::<Result<_>>()?;
        if values.len() != count {
            return Err(Error::parse(0, format!("expected {count} parameters, found {}", values.len())));
        }
        model.params = values;
        Ok(model)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &[f64]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::GradientShapeMismatch);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let params = model.params_mut();
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
