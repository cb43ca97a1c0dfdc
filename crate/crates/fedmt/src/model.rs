//! Networks with manual forward and backward passes, plain SGD, and
//! epoch-based minibatch sampling.
//!
//! [`TwoLayerReluNet`] is a one-hidden-layer ReLU network in NTK
//! parameterization: hidden weights `u` are trainable, the output signs `a`
//! are fixed at +-1, and outputs carry a 1/sqrt(M) scale. [`MlpNet`] is an
//! ordinary multilayer perceptron (affine + relu, no normalization layers)
//! used by the signal-classification experiments. [`AnyNet`] dispatches over
//! both so federation code can stay model-agnostic.
//!
//! ReLU's derivative at exactly 0 is taken to be 0 throughout.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{loss_on_logits, LabeledBatch, LossKind};

/// Plain SGD hyperparameters for one participant's local update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub eta_sgd: f64,
    pub batch_size: usize,
    pub local_steps: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_sgd > 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "eta_sgd must be positive, got {}",
                self.eta_sgd
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::ConfigInvalid("batch_size must be at least 1".into()));
        }
        if self.local_steps == 0 {
            return Err(Error::ConfigInvalid("local_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Without-replacement minibatch index sampler.
///
/// Each epoch is a fresh shuffle of 0..n; batches are consecutive chunks, so
/// every index appears exactly once per epoch. A final chunk shorter than
/// `batch_size` is emitted rather than dropped.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    batch_size: usize,
    perm: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::ConfigInvalid(
                "sampler needs a nonempty pool and a positive batch size".into(),
            ));
        }
        Ok(EpochSampler { n, batch_size, perm: Vec::new(), pos: 0, rng })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.perm.len() {
            use rand::seq::SliceRandom;
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let batch = self.perm[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn sign_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
}

/// One-hidden-layer ReLU network f_k(u, x) = (1/sqrt(M)) sum_m a_km relu(u_m . x).
///
/// `u` (d x M) is the only trainable parameter; `a` (K x M) holds fixed signs.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerReluNet {
    u: DMatrix<f64>,
    a: DMatrix<f64>,
    scale: f64,
}

impl TwoLayerReluNet {
    /// Draws u with i.i.d. standard-normal entries and a with uniform +-1
    /// entries, deterministically from the seed.
    pub fn init_ntk(d: usize, m: usize, k: usize, seed: u64) -> Result<Self> {
        if d == 0 || m == 0 || k == 0 {
            return Err(Error::ConfigInvalid(format!(
                "network dimensions must be positive, got d={d} M={m} K={k}"
            )));
        }
        let mut rng_u = crate::rng::stream(seed, "ntk-hidden", 0);
        let mut rng_a = crate::rng::stream(seed, "ntk-signs", 0);
        Ok(TwoLayerReluNet {
            u: gaussian_matrix(d, m, &mut rng_u),
            a: sign_matrix(k, m, &mut rng_a),
            scale: 1.0 / (m as f64).sqrt(),
        })
    }

    /// Replaces the output signs with a freshly drawn K x M sign matrix,
    /// keeping the hidden weights. Used when a model is re-headed for a new
    /// label space.
    pub fn with_fresh_head(&self, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::ConfigInvalid("head must have at least one class".into()));
        }
        let mut rng_a = crate::rng::stream(seed, "ntk-signs", 0);
        Ok(TwoLayerReluNet {
            u: self.u.clone(),
            a: sign_matrix(k, self.u.ncols(), &mut rng_a),
            scale: self.scale,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.u.nrows(), self.u.ncols(), self.a.nrows())
    }

    pub fn hidden_weights(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn hidden_weights_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.u
    }

    pub fn output_signs(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn forward(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if inputs.ncols() != self.u.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "inputs have {} columns but the network expects {}",
                inputs.ncols(),
                self.u.nrows()
            )));
        }
        let mut h = inputs * &self.u;
        h.apply(|v| *v = v.max(0.0));
        Ok((h * self.a.transpose()) * self.scale)
    }

    /// Gradient of the logits contracted with `grad_logits`, with respect to
    /// the hidden weights. `a` has no gradient path by construction.
    pub fn backward(
        &self,
        inputs: &DMatrix<f64>,
        grad_logits: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        if inputs.ncols() != self.u.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "inputs have {} columns but the network expects {}",
                inputs.ncols(),
                self.u.nrows()
            )));
        }
        if grad_logits.nrows() != inputs.nrows() || grad_logits.ncols() != self.a.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "grad_logits is {}x{} but expected {}x{}",
                grad_logits.nrows(),
                grad_logits.ncols(),
                inputs.nrows(),
                self.a.nrows()
            )));
        }
        let pre = inputs * &self.u;
        let mut dh = (grad_logits * &self.a) * self.scale;
        for i in 0..dh.nrows() {
            for m in 0..dh.ncols() {
                if pre[(i, m)] <= 0.0 {
                    dh[(i, m)] = 0.0;
                }
            }
        }
        Ok(inputs.transpose() * dh)
    }

    pub fn to_json(&self) -> String {
        let (d, m, k) = self.dims();
        let ckpt = NtkCheckpoint {
            d,
            m,
            k,
            u: row_major(&self.u),
            a: row_major(&self.a).into_iter().map(|v| v as i8).collect(),
        };
        serde_json::to_string(&ckpt).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: NtkCheckpoint = serde_json::from_str(text)?;
        if ckpt.u.len() != ckpt.d * ckpt.m || ckpt.a.len() != ckpt.k * ckpt.m {
            return Err(Error::ShapeMismatch("checkpoint lengths do not match dims".into()));
        }
        if ckpt.d == 0 || ckpt.m == 0 || ckpt.k == 0 {
            return Err(Error::ShapeMismatch("checkpoint dims must be positive".into()));
        }
        if ckpt.a.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::ShapeMismatch("sign entries must be exactly +-1".into()));
        }
        Ok(TwoLayerReluNet {
            u: DMatrix::from_row_slice(ckpt.d, ckpt.m, &ckpt.u),
            a: DMatrix::from_row_slice(
                ckpt.k,
                ckpt.m,
                &ckpt.a.iter().map(|&s| s as f64).collect::<Vec<_>>(),
            ),
            scale: 1.0 / (ckpt.m as f64).sqrt(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NtkCheckpoint {
    d: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "K")]
    k: usize,
    u: Vec<f64>,
    a: Vec<i8>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

/// Plain multilayer perceptron: affine layers with relu on all hidden
/// layers, linear output, no normalization layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    dims: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DMatrix<f64>>,
}

impl MlpNet {
    /// He-style initialization: weights N(0, 2/fan_in), biases zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::ConfigInvalid(format!(
                "layer dimensions must chain at least input->output and be positive: {dims:?}"
            )));
        }
        let mut rng = crate::rng::stream(seed, "mlp-init", 0);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let sd = (2.0 / fan_in as f64).sqrt();
            weights.push(gaussian_matrix(fan_in, fan_out, &mut rng) * sd);
            biases.push(DMatrix::zeros(1, fan_out));
        }
        Ok(MlpNet { dims: dims.to_vec(), weights, biases })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn check_inputs(&self, inputs: &DMatrix<f64>) -> Result<()> {
        if inputs.ncols() != self.dims[0] {
            return Err(Error::ShapeMismatch(format!(
                "inputs have {} columns but the network expects {}",
                inputs.ncols(),
                self.dims[0]
            )));
        }
        Ok(())
    }

    /// Forward pass keeping post-activation values of every layer.
    fn forward_cached(&self, inputs: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let layers = self.weights.len();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(inputs.clone());
        for l in 0..layers {
            let mut z = acts[l].clone() * &self.weights[l];
            for i in 0..z.nrows() {
                for j in 0..z.ncols() {
                    z[(i, j)] += self.biases[l][(0, j)];
                }
            }
            if l + 1 < layers {
                z.apply(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_inputs(inputs)?;
        Ok(self.forward_cached(inputs).pop().expect("at least one layer"))
    }

    /// Full backprop contracted with `grad_logits`; returns per-layer
    /// (weight gradient, bias gradient).
    pub fn backward(
        &self,
        inputs: &DMatrix<f64>,
        grad_logits: &DMatrix<f64>,
    ) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
        self.check_inputs(inputs)?;
        let out = *self.dims.last().expect("nonempty dims");
        if grad_logits.nrows() != inputs.nrows() || grad_logits.ncols() != out {
            return Err(Error::ShapeMismatch(format!(
                "grad_logits is {}x{} but expected {}x{}",
                grad_logits.nrows(),
                grad_logits.ncols(),
                inputs.nrows(),
                out
            )));
        }
        let layers = self.weights.len();
        let acts = self.forward_cached(inputs);
        let mut grads = vec![(DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)); layers];
        let mut delta = grad_logits.clone();
        for l in (0..layers).rev() {
            let gw = acts[l].transpose() * &delta;
            let mut gb = DMatrix::zeros(1, delta.ncols());
            for j in 0..delta.ncols() {
                gb[(0, j)] = delta.column(j).iter().sum();
            }
            grads[l] = (gw, gb);
            if l > 0 {
                let mut prev = delta * self.weights[l].transpose();
                // acts[l] is post-relu for hidden layers; relu'(0) = 0 means
                // the mask is simply (activation > 0).
                for i in 0..prev.nrows() {
                    for j in 0..prev.ncols() {
                        if acts[l][(i, j)] <= 0.0 {
                            prev[(i, j)] = 0.0;
                        }
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }

    /// Re-initializes the final affine layer to `k` outputs, keeping all
    /// earlier layers.
    pub fn with_fresh_head(&self, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::ConfigInvalid("head must have at least one class".into()));
        }
        let mut dims = self.dims.clone();
        *dims.last_mut().expect("nonempty dims") = k;
        let fan_in = dims[dims.len() - 2];
        let mut rng = crate::rng::stream(seed, "mlp-head", 0);
        let sd = (2.0 / fan_in as f64).sqrt();
        let mut weights = self.weights.clone();
        let mut biases = self.biases.clone();
        *weights.last_mut().expect("nonempty") = gaussian_matrix(fan_in, k, &mut rng) * sd;
        *biases.last_mut().expect("nonempty") = DMatrix::zeros(1, k);
        Ok(MlpNet { dims, weights, biases })
    }
}

/// Model dispatch so the federation engine is agnostic to the architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyNet {
    Ntk(TwoLayerReluNet),
    Mlp(MlpNet),
}

impl AnyNet {
    pub fn forward(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            AnyNet::Ntk(n) => n.forward(inputs),
            AnyNet::Mlp(n) => n.forward(inputs),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            AnyNet::Ntk(n) => n.dims().2,
            AnyNet::Mlp(n) => *n.dims.last().expect("nonempty dims"),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            AnyNet::Ntk(n) => n.dims().0,
            AnyNet::Mlp(n) => n.dims[0],
        }
    }

    /// One SGD step from the gradient of the loss with respect to logits.
    pub fn apply_logit_grad(
        &mut self,
        inputs: &DMatrix<f64>,
        grad_logits: &DMatrix<f64>,
        eta: f64,
    ) -> Result<()> {
        match self {
            AnyNet::Ntk(n) => {
                let gu = n.backward(inputs, grad_logits)?;
                n.u -= gu * eta;
            }
            AnyNet::Mlp(n) => {
                let grads = n.backward(inputs, grad_logits)?;
                for (l, (gw, gb)) in grads.into_iter().enumerate() {
                    n.weights[l] -= gw * eta;
                    n.biases[l] -= gb * eta;
                }
            }
        }
        Ok(())
    }

    /// All trainable parameters flattened to a list of matrices, in a fixed
    /// order. The last [`Self::head_param_count`] entries belong to the
    /// output head.
    pub fn trainable_params(&self) -> Vec<&DMatrix<f64>> {
        match self {
            AnyNet::Ntk(n) => vec![&n.u],
            AnyNet::Mlp(n) => {
                let mut out = Vec::new();
                for l in 0..n.weights.len() {
                    out.push(&n.weights[l]);
                    out.push(&n.biases[l]);
                }
                out
            }
        }
    }

    /// How many trailing entries of [`Self::trainable_params`] form the
    /// output head. The NTK net's head is its fixed sign matrix, which is
    /// not trainable, so no trainable parameter belongs to the head.
    pub fn head_param_count(&self) -> usize {
        match self {
            AnyNet::Ntk(_) => 0,
            AnyNet::Mlp(_) => 2,
        }
    }

    /// Parameter-wise difference self - base.
    pub fn param_delta(&self, base: &AnyNet) -> Result<Vec<DMatrix<f64>>> {
        let a = self.trainable_params();
        let b = base.trainable_params();
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch("parameter lists differ in length".into()));
        }
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| {
                if x.shape() != y.shape() {
                    Err(Error::ShapeMismatch("parameter shapes differ".into()))
                } else {
                    Ok(*x - *y)
                }
            })
            .collect()
    }

    /// Adds `scale * delta` to the trainable parameters. A shorter delta
    /// list updates only the leading (non-head) parameters.
    pub fn add_scaled(&mut self, delta: &[DMatrix<f64>], scale: f64) -> Result<()> {
        let n_params = self.trainable_params().len();
        if delta.len() > n_params {
            return Err(Error::ShapeMismatch("more deltas than parameters".into()));
        }
        match self {
            AnyNet::Ntk(n) => {
                if let Some(d) = delta.first() {
                    if d.shape() != n.u.shape() {
                        return Err(Error::ShapeMismatch("delta shape differs from u".into()));
                    }
                    n.u += d * scale;
                }
            }
            AnyNet::Mlp(n) => {
                for (slot, d) in (0..delta.len()).map(|i| (i / 2, i % 2)).zip(delta.iter()) {
                    let target = if slot.1 == 0 {
                        &mut n.weights[slot.0]
                    } else {
                        &mut n.biases[slot.0]
                    };
                    if d.shape() != target.shape() {
                        return Err(Error::ShapeMismatch("delta shape differs".into()));
                    }
                    *target += d * scale;
                }
            }
        }
        Ok(())
    }

    /// Copies trainable parameters from `source`. With `backbone_only`, head
    /// parameters are left untouched (the two models may then have
    /// different head shapes).
    pub fn copy_params_from(&mut self, source: &AnyNet, backbone_only: bool) -> Result<()> {
        match (self, source) {
            (AnyNet::Ntk(dst), AnyNet::Ntk(src)) => {
                if dst.u.shape() != src.u.shape() {
                    return Err(Error::ShapeMismatch("hidden weight shapes differ".into()));
                }
                dst.u.copy_from(&src.u);
                Ok(())
            }
            (AnyNet::Mlp(dst), AnyNet::Mlp(src)) => {
                let layers = dst.weights.len();
                if layers != src.weights.len() {
                    return Err(Error::ShapeMismatch("layer counts differ".into()));
                }
                let copy_to = if backbone_only { layers - 1 } else { layers };
                for l in 0..copy_to {
                    if dst.weights[l].shape() != src.weights[l].shape() {
                        return Err(Error::ShapeMismatch("layer shapes differ".into()));
                    }
                    dst.weights[l].copy_from(&src.weights[l]);
                    dst.biases[l].copy_from(&src.biases[l]);
                }
                Ok(())
            }
            _ => Err(Error::ShapeMismatch("cannot copy parameters across architectures".into())),
        }
    }

    /// Re-heads the model for a new output dimension, keeping the backbone.
    pub fn with_fresh_head(&self, k: usize, seed: u64) -> Result<AnyNet> {
        match self {
            AnyNet::Ntk(n) => Ok(AnyNet::Ntk(n.with_fresh_head(k, seed)?)),
            AnyNet::Mlp(n) => Ok(AnyNet::Mlp(n.with_fresh_head(k, seed)?)),
        }
    }
}

/// One SGD step on `batch`: evaluates `kind`, applies u <- u - eta * grad,
/// and returns the pre-step loss.
pub fn sgd_step(
    net: &mut AnyNet,
    batch: &LabeledBatch,
    kind: &LossKind,
    cfg: &SgdConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let logits = net.forward(batch.inputs())?;
    let (loss, grad) = loss_on_logits(kind, &logits, batch)?;
    net.apply_logit_grad(batch.inputs(), &grad, cfg.eta_sgd)?;
    Ok(loss)
}
