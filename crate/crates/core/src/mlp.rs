//! Small fully connected networks with tanh hidden layers and a linear output
//! layer, with hand-written reverse-mode derivatives.
//!
//! Parameters live in one flat vector. For every layer the weight matrix
//! (`out × in`, row-major) comes first, followed by its bias.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded during a forward pass, reused by the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[l]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Dot product with four independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ra) = (a.chunks_exact(4), a.chunks_exact(4).remainder());
    let rb = b.chunks_exact(4).remainder();
    for (x, y) in ca.zip(b.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

#[inline]
fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument("a network needs at least input and output layers".into()));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("layer dimensions must be positive: {dims:?}")));
    }
    Ok(())
}

impl Mlp {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; param_count(dims)],
        })
    }

    /// Uniform initialization in `[-1/√fan_in, 1/√fan_in]`.
    pub fn init_uniform(dims: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[off..off + (fan_in + 1) * fan_out] {
                *p = rng.random_range(-s..s);
            }
            off += (fan_in + 1) * fan_out;
        }
        Ok(net)
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        validate_dims(dims)?;
        let expected = param_count(dims);
        if params.len() != expected {
            return Err(Error::Dimension {
                context: "Mlp parameters".into(),
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, &[f64], &[f64])> + '_ {
        let mut off = 0;
        self.dims.windows(2).map(move |w| {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + (n_in + 1) * n_out];
            off += (n_in + 1) * n_out;
            (n_in, n_out, weights, bias)
        })
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.input_dim() {
            return Err(Error::Dimension {
                context: "Mlp input".into(),
                expected: self.input_dim(),
                got: z.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let mut cache = ForwardCache::default();
        self.forward_cached(z, &mut cache);
        Ok(cache.acts.pop().unwrap())
    }

    /// Forward pass recording every activation. `z` must have the input
    /// dimension.
    pub fn forward_cached(&self, z: &[f64], cache: &mut ForwardCache) {
        let n_layers = self.dims.len() - 1;
        cache.acts.resize_with(n_layers + 1, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(z);
        for (l, (n_in, n_out, weights, bias)) in self.layers().enumerate() {
            let (prev, rest) = cache.acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut rest[0];
            out.clear();
            out.extend(
                weights
                    .chunks_exact(n_in)
                    .zip(bias)
                    .map(|(row, b)| dot(row, input) + b),
            );
            debug_assert_eq!(out.len(), n_out);
            if l + 1 < n_layers {
                out.iter_mut().for_each(|a| *a = tanh(*a));
            }
        }
    }

    /// Reverse pass for a seed `grad_out` on the output. Parameter gradients
    /// are accumulated (`+=`) into `grad_params`; the input gradient is
    /// overwritten into `grad_in`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &[f64],
        mut grad_params: Option<&mut [f64]>,
        grad_in: Option<&mut [f64]>,
    ) {
        let n_layers = self.dims.len() - 1;
        let mut delta: Vec<f64> = grad_out.to_vec();
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.dims.windows(2) {
            offsets.push(off);
            off += (w[0] + 1) * w[1];
        }
        let mut next = Vec::new();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let weights = &self.params[off..off + n_in * n_out];
            let input = &cache.acts[l];
            if let Some(gp) = grad_params.as_deref_mut() {
                let (gw, gb) = gp[off..off + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
                for ((row, gbi), d) in gw.chunks_exact_mut(n_in).zip(gb.iter_mut()).zip(&delta) {
                    *gbi += d;
                    for (g, x) in row.iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
            }
            if l == 0 && grad_in.is_none() {
                break;
            }
            next.clear();
            next.resize(n_in, 0.0);
            for (row, d) in weights.chunks_exact(n_in).zip(&delta) {
                for (n, w) in next.iter_mut().zip(row) {
                    *n += d * w;
                }
            }
            if l > 0 {
                for (n, a) in next.iter_mut().zip(input) {
                    *n *= 1.0 - a * a;
                }
            }
            std::mem::swap(&mut delta, &mut next);
        }
        if let Some(gi) = grad_in {
            gi.copy_from_slice(&delta);
        }
    }

    /// Output-by-input Jacobian, row-major.
    pub fn input_jacobian(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let mut cache = ForwardCache::default();
        self.forward_cached(z, &mut cache);
        let mut out = vec![0.0; self.output_dim() * self.input_dim()];
        self.input_jacobian_cached(&cache, &mut out);
        Ok(out)
    }

    pub(crate) fn input_jacobian_cached(&self, cache: &ForwardCache, out: &mut [f64]) {
        let n_layers = self.dims.len() - 1;
        let n_top = self.output_dim();
        let layers: Vec<_> = self.layers().collect();
        // Running product d(output)/d(layer input), accumulated from the
        // output side because the output is narrower than the hidden layers.
        let mut jac: Vec<f64> = Vec::new();
        let mut next: Vec<f64> = Vec::new();
        for l in (0..n_layers).rev() {
            let (n_in, n_out, weights, _) = layers[l];
            next.clear();
            next.resize(n_top * n_in, 0.0);
            if l + 1 == n_layers {
                next.copy_from_slice(weights);
            } else {
                for (nrow, jrow) in next.chunks_exact_mut(n_in).zip(jac.chunks_exact(n_out)) {
                    for (j, wrow) in jrow.iter().zip(weights.chunks_exact(n_in)) {
                        for (n, w) in nrow.iter_mut().zip(wrow) {
                            *n += j * w;
                        }
                    }
                }
            }
            if l > 0 {
                let act = &cache.acts[l];
                for nrow in next.chunks_exact_mut(n_in) {
                    for (v, a) in nrow.iter_mut().zip(act) {
                        *v *= 1.0 - a * a;
                    }
                }
            }
            std::mem::swap(&mut jac, &mut next);
        }
        out.copy_from_slice(&jac);
    }

    /// Upper bound on the Lipschitz constant in the Euclidean norm: product of
    /// per-layer Frobenius norms (tanh is 1-Lipschitz).
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers()
            .map(|(_, _, w, _)| w.iter().map(|v| v * v).sum::<f64>().sqrt())
            .product()
    }
}
