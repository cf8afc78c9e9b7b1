//! Feedforward network with a Gaussian `(μ, log σ)` head.
//!
//! All parameters live in one flat vector, layer by layer, each layer stored
//! as a row-major `out × in` weight matrix followed by its bias. Batches are
//! row-major `batch × width` buffers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn tag(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Activations and deltas reused across minibatches.
#[derive(Debug, Default)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    batch: usize,
}

impl Network {
    /// Zero-initialized network. `sizes` lists every layer width, input first.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            params: vec![0.0; n],
        })
    }

    /// Uniform fan-in initialization: every weight and bias of a layer with
    /// fan-in `n` is drawn from `U(-1/√n, 1/√n)`.
    pub fn init_uniform<R: Rng>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation)?;
        for l in 0..net.n_layers() {
            let bound = 1.0 / (net.sizes[l] as f64).sqrt();
            let (w, b) = net.layer_range(l);
            for p in &mut net.params[w.start..b.end] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index ranges of layer `l`'s weights and bias within the flat parameters.
    pub fn layer_range(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let offset: usize = self.sizes[..=l]
            .windows(2)
            .map(|w| w[1] * (w[0] + 1))
            .sum();
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w_end = offset + n_in * n_out;
        (offset..w_end, w_end..w_end + n_out)
    }

    /// Runs `batch` rows of `input` through the network; returns the `batch × out` output.
    pub fn forward<'a>(&self, input: &[f64], batch: usize, ws: &'a mut Workspace) -> &'a [f64] {
        assert_eq!(input.len(), batch * self.input_width());
        ws.prepare(&self.sizes, batch);
        ws.acts[0].copy_from_slice(input);
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer_range(l);
            let (done, rest) = ws.acts.split_at_mut(l + 1);
            let a_in = &done[l];
            let z = &mut rest[0];
            for row in z.chunks_exact_mut(n_out) {
                row.copy_from_slice(&self.params[b.clone()]);
            }
            // z (B×out) += a_in (B×in) · Wᵀ
            gemm(
                batch,
                n_in,
                n_out,
                a_in,
                (n_in as isize, 1),
                &self.params[w],
                (1, n_in as isize),
                z,
                (n_out as isize, 1),
                1.0,
            );
            if l + 1 < self.n_layers() && self.activation == Activation::Tanh {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        &ws.acts[self.n_layers()]
    }

    /// Back-propagates `grad_out` (∂loss/∂output, `batch × out`) through the
    /// activations left in `ws` by the last [`Self::forward`], accumulating
    /// into `grad` (same layout as the parameters).
    pub fn backward(&self, ws: &mut Workspace, grad_out: &[f64], grad: &mut [f64]) {
        let batch = ws.batch;
        let last = self.n_layers();
        assert_eq!(grad_out.len(), batch * self.output_width());
        assert_eq!(grad.len(), self.params.len());
        ws.deltas[last].copy_from_slice(grad_out);
        for l in (0..last).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer_range(l);
            let delta = &ws.deltas[l + 1];
            // gW (out×in) += δᵀ (out×B) · a_in (B×in)
            gemm(
                n_out,
                batch,
                n_in,
                delta,
                (1, n_out as isize),
                &ws.acts[l],
                (n_in as isize, 1),
                &mut grad[w.clone()],
                (n_in as isize, 1),
                1.0,
            );
            let gb = &mut grad[b];
            for row in delta.chunks_exact(n_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l == 0 {
                break;
            }
            let (lower, upper) = ws.deltas.split_at_mut(l + 1);
            let d_in = &mut lower[l];
            // δ_in (B×in) = δ (B×out) · W (out×in)
            gemm(
                batch,
                n_out,
                n_in,
                &upper[0],
                (n_out as isize, 1),
                &self.params[w],
                (n_in as isize, 1),
                d_in,
                (n_in as isize, 1),
                0.0,
            );
            if self.activation == Activation::Tanh {
                for (d, a) in d_in.iter_mut().zip(&ws.acts[l]) {
                    *d *= 1.0 - a * a;
                }
            }
        }
    }
}

impl Workspace {
    fn prepare(&mut self, sizes: &[usize], batch: usize) {
        if self.batch == batch
            && self.acts.len() == sizes.len()
            && self.acts.iter().zip(sizes).all(|(a, s)| a.len() == s * batch)
        {
            return;
        }
        self.batch = batch;
        self.acts = sizes.iter().map(|s| vec![0.0; s * batch]).collect();
        self.deltas = sizes.iter().map(|s| vec![0.0; s * batch]).collect();
    }
}

/// `c = a·b + beta·c` for strided `m×k` and `k×n` operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
    beta: f64,
) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize + 1
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: all strides are non-negative and the spans above bound every
    // element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Mean Gaussian NLL of standardized `targets` and its gradient w.r.t. the
/// network output (`batch × 2`, columns μ and log σ).
///
/// With `fixed_log_sigma` the second output column is ignored and log σ is
/// held at the given value. The `½ln 2π` constant is included.
pub fn gaussian_head_loss(
    outputs: &[f64],
    targets: &[f64],
    fixed_log_sigma: Option<f64>,
    grad_out: &mut [f64],
) -> f64 {
    let batch = targets.len();
    let scale = 1.0 / batch as f64;
    let half_ln_tau = 0.5 * std::f64::consts::TAU.ln();
    let mut total = 0.0;
    for ((o, g), &x) in outputs
        .chunks_exact(2)
        .zip(grad_out.chunks_exact_mut(2))
        .zip(targets)
    {
        let mu = o[0];
        let log_sigma = fixed_log_sigma.unwrap_or(o[1]);
        let inv_var = (-2.0 * log_sigma).exp();
        let r = x - mu;
        total += half_ln_tau + log_sigma + 0.5 * r * r * inv_var;
        g[0] = -r * inv_var * scale;
        g[1] = if fixed_log_sigma.is_some() {
            0.0
        } else {
            (1.0 - r * r * inv_var) * scale
        };
    }
    total * scale
}

/// Mean NLL over a whole feature matrix plus its gradient w.r.t. every parameter.
pub fn mean_nll_and_grad(
    net: &Network,
    features: &[f64],
    targets: &[f64],
    fixed_log_sigma: Option<f64>,
) -> (f64, Vec<f64>) {
    let batch = targets.len();
    let mut ws = Workspace::default();
    let out = net.forward(features, batch, &mut ws).to_vec();
    let mut grad_out = vec![0.0; out.len()];
    let loss = gaussian_head_loss(&out, targets, fixed_log_sigma, &mut grad_out);
    let mut grad = vec![0.0; net.params().len()];
    net.backward(&mut ws, &grad_out, &mut grad);
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_forward(net: &Network, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in 0..net.n_layers() {
            let (n_in, n_out) = (net.sizes[l], net.sizes[l + 1]);
            let (w, b) = net.layer_range(l);
            let w = &net.params[w];
            let b = &net.params[b];
            let mut z: Vec<f64> = (0..n_out)
                .map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * a[i]).sum::<f64>())
                .collect();
            if l + 1 < net.n_layers() {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            a = z;
        }
        a
    }

    #[test]
    fn batched_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::init_uniform(&[3, 5, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut ws = Workspace::default();
        let out = net.forward(&x, 4, &mut ws).to_vec();
        for r in 0..4 {
            let expect = naive_forward(&net, &x[r * 3..r * 3 + 3]);
            for (a, b) in out[r * 2..r * 2 + 2].iter().zip(&expect) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::init_uniform(&[16, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let (w, b) = net.layer_range(0);
        assert!(net.params[w.start..b.end].iter().all(|p| p.abs() <= 0.25));
        assert_eq!(net.params().len(), 4 * 17 + 2 * 5);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Network::zeros(&[3], Activation::Tanh).is_err());
        assert!(Network::zeros(&[3, 0, 2], Activation::Tanh).is_err());
        assert!(Network::from_params(&[2, 2], Activation::Tanh, vec![0.0; 5]).is_err());
    }

    #[test]
    fn fixed_sigma_zeroes_sigma_gradient() {
        let out = [0.5, 3.0, -0.2, 1.0];
        let mut g = [0.0; 4];
        let loss = gaussian_head_loss(&out, &[1.0, 0.0], Some(0.0), &mut g);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
        let expect = 0.5 * std::f64::consts::TAU.ln() + 0.25 * (0.25 + 0.04);
        assert!((loss - expect).abs() < 1e-14);
    }
}
