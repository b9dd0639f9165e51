//! Small dense networks with hand-written reverse-mode differentiation.
//!
//! The networks here are tiny (tens of units, thousands of parameters), get
//! evaluated millions of times inside training loops, and need exact
//! gradients w.r.t. both parameters and inputs so they can sit in the middle
//! of larger hand-differentiated objectives. A fixed tanh/linear structure
//! with explicit backward passes beats a generic autodiff dependency here.

pub mod optim;

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Fully connected network, tanh hidden activations, linear output layer.
///
/// Parameters live in one flat vector: for each layer, the weight matrix in
/// row-major order followed by the bias vector. That layout is part of the
/// serialized format and of the optimizer interface, so it never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Scratch space for one forward/backward pass. Reuse it across calls to
/// avoid allocation in inner loops; any network with the same layer sizes can
/// share one cache.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// Activations per layer, `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidParams(format!(
            "layer sizes must list input, hidden..., output with every width >= 1, got {sizes:?}"
        )));
    }
    Ok(())
}

impl MlpNetwork {
    /// Number of parameters a network with these layer sizes has.
    pub fn param_count_for(sizes: &[usize]) -> usize {
        sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Glorot-uniform weights, zero biases, from a seeded generator.
    ///
    /// Draw order is fixed (layers in order, weights row-major, biases
    /// skipped since they stay zero) so a seed always produces the same
    /// network on every platform.
    pub fn glorot(sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::param_count_for(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-limit..limit));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    /// All-zero network: evaluates to zero everywhere.
    pub fn zeroed(sizes: &[usize]) -> Result<Self> {
        validate_sizes(sizes)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; Self::param_count_for(sizes)],
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Zero the output layer (weights and biases). A network initialized this
    /// way evaluates to zero while keeping its hidden features random, which
    /// lets a training stage start exactly at the model it is refining.
    pub fn zero_last_layer(&mut self) {
        let n = self.sizes.len();
        let last = self.sizes[n - 2] * self.sizes[n - 1] + self.sizes[n - 1];
        let total = self.params.len();
        for p in &mut self.params[total - last..] {
            *p = 0.0;
        }
    }

    /// Plain forward evaluation.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = MlpCache::default();
        self.forward_cached(x, &mut cache);
        cache.acts.last().unwrap().clone()
    }

    /// Forward pass that records activations for a later backward pass.
    /// Returns the output slice borrowed from the cache.
    pub fn forward_cached<'a>(&self, x: &[f64], cache: &'a mut MlpCache) -> &'a [f64] {
        assert_eq!(x.len(), self.input_dim(), "mlp input dimension");
        cache.ensure_shape(&self.sizes);
        cache.acts[0].copy_from_slice(x);
        let n_layers = self.sizes.len() - 1;
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let biases = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let (lo, hi) = cache.acts.split_at_mut(l + 1);
            let input = &lo[l];
            let out = &mut hi[0];
            for i in 0..n_out {
                let row = &weights[i * n_in..(i + 1) * n_in];
                let mut z = biases[i];
                for j in 0..n_in {
                    z += row[j] * input[j];
                }
                out[i] = if l + 1 < self.sizes.len() - 1 {
                    z.tanh()
                } else {
                    z
                };
            }
        }
        cache.acts.last().unwrap()
    }

    /// Reverse pass for the most recent `forward_cached` call.
    ///
    /// `upstream` is dL/d(output). Parameter gradients are accumulated (+=)
    /// into `param_grad`; if `input_grad` is given, dL/d(input) is
    /// accumulated there too. Both must be zeroed by the caller when a fresh
    /// gradient is wanted.
    pub fn backward(
        &self,
        cache: &mut MlpCache,
        upstream: &[f64],
        param_grad: &mut [f64],
        mut input_grad: Option<&mut [f64]>,
    ) {
        assert_eq!(upstream.len(), self.output_dim(), "mlp upstream dimension");
        assert_eq!(param_grad.len(), self.params.len(), "mlp gradient length");
        if let Some(g) = input_grad.as_deref() {
            assert_eq!(g.len(), self.input_dim(), "mlp input gradient length");
        }
        let n_layers = self.sizes.len() - 1;
        cache.delta[..upstream.len()].copy_from_slice(upstream);
        let mut offset = self.params.len();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            offset -= n_in * n_out + n_out;
            let weights = &self.params[offset..offset + n_in * n_out];
            let grad_w = &mut param_grad[offset..offset + n_in * n_out];
            let input = &cache.acts[l];
            for i in 0..n_out {
                let d = cache.delta[i];
                let row = &mut grad_w[i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    row[j] += d * input[j];
                }
            }
            let grad_b = &mut param_grad[offset + n_in * n_out..offset + n_in * n_out + n_out];
            for i in 0..n_out {
                grad_b[i] += cache.delta[i];
            }
            // Propagate through W^T, then through tanh of the layer below
            // (the raw input has no activation).
            for j in 0..n_in {
                let mut acc = 0.0;
                for i in 0..n_out {
                    acc += weights[i * n_in + j] * cache.delta[i];
                }
                cache.delta_prev[j] = acc;
            }
            if l > 0 {
                for j in 0..n_in {
                    let a = cache.acts[l][j];
                    cache.delta_prev[j] *= 1.0 - a * a;
                }
                cache.delta[..n_in].copy_from_slice(&cache.delta_prev[..n_in]);
            } else if let Some(g) = input_grad.as_deref_mut() {
                for j in 0..n_in {
                    g[j] += cache.delta_prev[j];
                }
            }
        }
    }
}

impl MlpNetwork {
    /// Like [`MlpNetwork::backward`] but propagates only to the input,
    /// skipping parameter-gradient accumulation. Used for Jacobians w.r.t.
    /// the network input in loops where parameters are fixed.
    pub fn backward_input_only(
        &self,
        cache: &mut MlpCache,
        upstream: &[f64],
        input_grad: &mut [f64],
    ) {
        assert_eq!(upstream.len(), self.output_dim(), "mlp upstream dimension");
        assert_eq!(input_grad.len(), self.input_dim(), "mlp input gradient length");
        let n_layers = self.sizes.len() - 1;
        cache.delta[..upstream.len()].copy_from_slice(upstream);
        let mut offset = self.params.len();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            offset -= n_in * n_out + n_out;
            let weights = &self.params[offset..offset + n_in * n_out];
            for j in 0..n_in {
                let mut acc = 0.0;
                for i in 0..n_out {
                    acc += weights[i * n_in + j] * cache.delta[i];
                }
                cache.delta_prev[j] = acc;
            }
            if l > 0 {
                for j in 0..n_in {
                    let a = cache.acts[l][j];
                    cache.delta_prev[j] *= 1.0 - a * a;
                }
                cache.delta[..n_in].copy_from_slice(&cache.delta_prev[..n_in]);
            } else {
                for j in 0..n_in {
                    input_grad[j] += cache.delta_prev[j];
                }
            }
        }
    }
}

impl MlpCache {
    pub fn for_network(net: &MlpNetwork) -> Self {
        let mut c = Self::default();
        c.ensure_shape(&net.sizes);
        c
    }

    fn ensure_shape(&mut self, sizes: &[usize]) {
        let ok = self.acts.len() == sizes.len()
            && self.acts.iter().zip(sizes).all(|(a, &s)| a.len() == s);
        if !ok {
            self.acts = sizes.iter().map(|&s| vec![0.0; s]).collect();
            let widest = *sizes.iter().max().unwrap();
            self.delta = vec![0.0; widest];
            self.delta_prev = vec![0.0; widest];
        }
    }

    /// Output of the last `forward_cached` call.
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

/// Serialized layer: row-major weights then biases, each value a decimal
/// string with 17 significant digits so round trips are bit-exact.
#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weights: Vec<String>,
    biases: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct MlpRepr {
    layer_sizes: Vec<usize>,
    layers: Vec<LayerRepr>,
}

pub(crate) fn f64_to_string(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn f64_from_string(s: &str) -> std::result::Result<f64, std::num::ParseFloatError> {
    s.parse::<f64>()
}

impl Serialize for MlpNetwork {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut layers = Vec::new();
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = self.params[offset..offset + n_in * n_out]
                .iter()
                .map(|&x| f64_to_string(x))
                .collect();
            let biases = self.params[offset + n_in * n_out..offset + n_in * n_out + n_out]
                .iter()
                .map(|&x| f64_to_string(x))
                .collect();
            offset += n_in * n_out + n_out;
            layers.push(LayerRepr { weights, biases });
        }
        MlpRepr {
            layer_sizes: self.sizes.clone(),
            layers,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MlpNetwork {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = MlpRepr::deserialize(deserializer)?;
        validate_sizes(&repr.layer_sizes)
            .map_err(|e| D::Error::custom(format!("bad layer sizes: {e}")))?;
        if repr.layers.len() != repr.layer_sizes.len() - 1 {
            return Err(D::Error::custom(format!(
                "expected {} layers, got {}",
                repr.layer_sizes.len() - 1,
                repr.layers.len()
            )));
        }
        let mut params = Vec::with_capacity(MlpNetwork::param_count_for(&repr.layer_sizes));
        for (w, layer) in repr.layer_sizes.windows(2).zip(&repr.layers) {
            let (n_in, n_out) = (w[0], w[1]);
            if layer.weights.len() != n_in * n_out || layer.biases.len() != n_out {
                return Err(D::Error::custom(format!(
                    "layer {n_in}x{n_out} has {} weights and {} biases",
                    layer.weights.len(),
                    layer.biases.len()
                )));
            }
            for s in layer.weights.iter().chain(&layer.biases) {
                params.push(
                    f64_from_string(s)
                        .map_err(|e| D::Error::custom(format!("bad weight {s:?}: {e}")))?,
                );
            }
        }
        Ok(MlpNetwork {
            sizes: repr.layer_sizes,
            params,
        })
    }
}
