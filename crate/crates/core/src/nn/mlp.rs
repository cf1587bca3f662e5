use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }
}

/// One affine layer. `weights` is a row-major `fan_in x fan_out` matrix, so
/// `out[j] = biases[j] + sum_i input[i] * weights[i * fan_out + j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            biases: vec![0.0; fan_out],
        }
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.fan_out + j]
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.biases);
        for (i, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.fan_out..(i + 1) * self.fan_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
    }
}

/// Initialization recipe for [`MlpParams::init`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpInit {
    /// Gain of the orthogonal hidden-layer weights.
    pub hidden_gain: f64,
    /// Gain of the orthogonal output-layer weights.
    pub output_gain: f64,
}

impl Default for MlpInit {
    fn default() -> Self {
        MlpInit {
            hidden_gain: 1.0,
            output_gain: 0.01,
        }
    }
}

/// Dense tanh network with a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Activations recorded by [`MlpParams::forward_cached`]; `activations[0]`
/// is the input and `activations[l + 1]` the output of layer `l`.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn input(&self) -> &[f64] {
        self.activations.first().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl MlpParams {
    /// All-zero network with the given layer sizes (`[input, hidden..., output]`).
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::config(
                "network.sizes",
                format!("need at least input and output sizes, all positive; got {sizes:?}"),
            ));
        }
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(MlpParams {
            layers,
            activation: Activation::Tanh,
        })
    }

    /// `input -> depth x hidden_width -> output`, orthogonal weights and zero biases.
    pub fn init(
        input: usize,
        hidden_width: usize,
        depth: usize,
        output: usize,
        init: MlpInit,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(hidden_width, depth));
        sizes.push(output);
        let mut net = Self::zeros(&sizes)?;
        let last = net.layers.len() - 1;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let gain = if l == last {
                init.output_gain
            } else {
                init.hidden_gain
            };
            layer.weights = orthogonal(layer.fan_in, layer.fan_out, gain, rng);
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_width(&self) -> usize {
        if self.layers.len() > 1 {
            self.layers[0].fan_out
        } else {
            0
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.fan_in, l.fan_out))
                .collect(),
            activation: self.activation,
        }
    }

    /// Checks that layer shapes chain and every parameter is finite.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Empty("network"));
        }
        for pair in self.layers.windows(2) {
            check_len("chained layer fan-in", pair[0].fan_out, pair[1].fan_in)?;
        }
        for layer in &self.layers {
            check_len("layer weights", layer.fan_in * layer.fan_out, layer.weights.len())?;
            check_len("layer biases", layer.fan_out, layer.biases.len())?;
            check_finite("network weights", &layer.weights)?;
            check_finite("network biases", &layer.biases)?;
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut out = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.apply(&x, &mut out);
            if l != last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut x, &mut out);
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.fan_out);
            layer.apply(&activations[l], &mut out);
            if l != last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(out);
        }
        Ok(ForwardCache { activations })
    }

    /// Gradient of `upstream . output` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<MlpParams> {
        let mut grads = self.zeros_like();
        self.backward_into(cache, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut MlpParams,
    ) -> Result<Vec<f64>> {
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::MissingActivations);
        }
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        check_len("gradient buffer layers", self.layers.len(), grads.layers.len())?;

        let last = self.layers.len() - 1;
        let mut delta = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if l != last {
                for (d, &a) in delta.iter_mut().zip(&cache.activations[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let g = &mut grads.layers[l];
            for (gb, &d) in g.biases.iter_mut().zip(&delta) {
                *gb += d;
            }
            let input = &cache.activations[l];
            let mut prev = vec![0.0; layer.fan_in];
            for (i, &x) in input.iter().enumerate() {
                let row = i * layer.fan_out..(i + 1) * layer.fan_out;
                let grow = &mut g.weights[row.clone()];
                let wrow = &layer.weights[row];
                let mut acc = 0.0;
                for ((gw, &w), &d) in grow.iter_mut().zip(wrow).zip(&delta) {
                    *gw += x * d;
                    acc += w * d;
                }
                prev[i] = acc;
            }
            delta = prev;
        }
        Ok(delta)
    }

    pub fn scale(&mut self, k: f64) {
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(|w| *w *= k);
            layer.biases.iter_mut().for_each(|b| *b *= k);
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
            .collect()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Empty("network"));
        }
        check_len("network input", self.input_dim(), input.len())?;
        check_finite("network input", input)
    }
}

/// Orthogonal `fan_in x fan_out` matrix (row-major) scaled by `gain`, built by
/// Gram-Schmidt on Gaussian vectors along the shorter dimension.
fn orthogonal(fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Vec<f64> {
    let (count, len) = if fan_in >= fan_out {
        (fan_out, fan_in)
    } else {
        (fan_in, fan_out)
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut w = vec![0.0; fan_in * fan_out];
    for i in 0..fan_in {
        for j in 0..fan_out {
            w[i * fan_out + j] = gain
                * if fan_in >= fan_out {
                    basis[j][i]
                } else {
                    basis[i][j]
                };
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use rand::Rng as _;

    /// Plain nested-loop evaluation, kept separate from the optimized path.
    fn naive_forward(net: &MlpParams, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        for (l, layer) in net.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.fan_out];
            for j in 0..layer.fan_out {
                let mut s = layer.biases[j];
                for i in 0..layer.fan_in {
                    s += x[i] * layer.weights[i * layer.fan_out + j];
                }
                z[j] = if l + 1 == net.layers.len() { s } else { s.tanh() };
            }
            x = z;
        }
        x
    }

    fn random_net(sizes: &[usize], rng: &mut Rng) -> MlpParams {
        let mut net = MlpParams::zeros(sizes).unwrap();
        for layer in &mut net.layers {
            layer.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
            layer.biases.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        net
    }

    fn loss(net: &MlpParams, input: &[f64], probe: &[f64]) -> f64 {
        let out = net.forward(input).unwrap();
        out.iter().zip(probe).map(|(o, p)| 0.5 * (o - p) * (o - p)).sum()
    }

    #[test]
    fn zero_weights_output_last_bias() {
        let mut net = MlpParams::zeros(&[3, 8, 8, 2]).unwrap();
        net.layers[2].biases = vec![0.7, -1.1];
        assert_eq!(net.forward(&[5.0, -2.0, 1.0]).unwrap(), vec![0.7, -1.1]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = MlpParams::zeros(&[2, 2]).unwrap();
        net.layers[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(net.forward(&[0.3, -0.2]).unwrap(), vec![0.3, -0.2]);
    }

    #[test]
    fn forward_matches_naive_chain() {
        let mut rng = rng_from(11);
        for _ in 0..20 {
            let net = random_net(&[5, 7, 6, 3], &mut rng);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let fast = net.forward(&x).unwrap();
            let slow = naive_forward(&net, &x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10);
            }
            assert_eq!(net.forward_cached(&x).unwrap().output(), fast.as_slice());
        }
    }

    #[test]
    fn dimension_mismatch_names_sizes() {
        let net = MlpParams::zeros(&[3, 2]).unwrap();
        let err = net.forward(&[1.0]).unwrap_err().to_string();
        assert!(err.contains("expected 3") && err.contains("got 1"), "{err}");
        assert!(net.forward(&[1.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn backward_without_cache_fails() {
        let net = MlpParams::zeros(&[3, 4, 2]).unwrap();
        let err = net.backward(&ForwardCache::default(), &[1.0, 1.0]);
        assert!(matches!(err, Err(Error::MissingActivations)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = rng_from(3);
        let net = random_net(&[4, 6, 2], &mut rng);
        let cache = net.forward_cached(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let g = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_linear_layer_squared_output() {
        // loss = mean^2 on a scalar output -> dL/dw = 2 * mean * input
        let mut net = MlpParams::zeros(&[3, 1]).unwrap();
        net.layers[0].weights = vec![0.5, -1.0, 2.0];
        net.layers[0].biases = vec![0.25];
        let x = [1.0, 2.0, -0.5];
        let cache = net.forward_cached(&x).unwrap();
        let mean = cache.output()[0];
        let g = net.backward(&cache, &[2.0 * mean]).unwrap();
        for i in 0..3 {
            assert!((g.layers[0].weights[i] - 2.0 * mean * x[i]).abs() < 1e-14);
        }
        assert!((g.layers[0].biases[0] - 2.0 * mean).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = rng_from(5);
        let h = 1e-5;
        for _ in 0..20 {
            let net = random_net(&[4, 5, 5, 2], &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let probe: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cache = net.forward_cached(&x).unwrap();
            let upstream: Vec<f64> = cache.output().iter().zip(&probe).map(|(o, p)| o - p).collect();
            let grads = net.backward(&cache, &upstream).unwrap();

            let mut worst: f64 = 0.0;
            let mut probe_net = net.clone();
            let n_slices = net.slices().len();
            for s in 0..n_slices {
                let len = net.slices()[s].len();
                for k in 0..len {
                    let orig = probe_net.slices()[s][k];
                    probe_net.slices_mut()[s][k] = orig + h;
                    let up = loss(&probe_net, &x, &probe);
                    probe_net.slices_mut()[s][k] = orig - h;
                    let down = loss(&probe_net, &x, &probe);
                    probe_net.slices_mut()[s][k] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = grads.slices()[s][k];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
            assert!(worst < 1e-4, "max relative error {worst}");
        }
    }

    #[test]
    fn orthogonal_init_has_orthonormal_columns() {
        let mut rng = rng_from(9);
        let w = orthogonal(6, 3, 1.0, &mut rng);
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..6).map(|i| w[i * 3 + a] * w[i * 3 + b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
        let net = MlpParams::init(9, 64, 2, 2, MlpInit::default(), &mut rng).unwrap();
        net.validate().unwrap();
        assert_eq!((net.input_dim(), net.hidden_width(), net.depth(), net.output_dim()), (9, 64, 2, 2));
    }
}
