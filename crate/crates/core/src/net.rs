//! Dense feed-forward networks with reverse-mode gradients.
//!
//! A [`NetworkGraph`] is a shared trunk of plain linear layers followed by two
//! heads (value and advantage) built from factorised-noise linear layers.
//! Everything is `f64`; batched passes go through `ndarray`'s matrix product.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noise scale constant for sigma initialisation.
pub const SIGMA_ZERO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayerParams {
    /// out × in
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayerParams {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        DenseLayerParams { weights: Array2::zeros((n_out, n_in)), bias: Array1::zeros(n_out) }
    }

    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let mut p = Self::zeros(n_in, n_out);
        p.weights.mapv_inplace(|_| rng.gen_range(-bound..=bound));
        p.bias.mapv_inplace(|_| rng.gen_range(-bound..=bound));
        p
    }

    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }
}

/// `y = W·x + b`.
pub fn linear_forward(params: &DenseLayerParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.n_in() {
        return Err(Error::Argument(format!(
            "linear layer expects {} inputs, got {}",
            params.n_in(),
            x.len()
        )));
    }
    let y = params.weights.dot(&ArrayView1::from(x)) + &params.bias;
    Ok(y.to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLayerParams {
    pub weight_mu: Array2<f64>,
    pub weight_sigma: Array2<f64>,
    pub bias_mu: Array1<f64>,
    pub bias_sigma: Array1<f64>,
    pub eps_in: Array1<f64>,
    pub eps_out: Array1<f64>,
}

impl NoisyLayerParams {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        NoisyLayerParams {
            weight_mu: Array2::zeros((n_out, n_in)),
            weight_sigma: Array2::zeros((n_out, n_in)),
            bias_mu: Array1::zeros(n_out),
            bias_sigma: Array1::zeros(n_out),
            eps_in: Array1::zeros(n_in),
            eps_out: Array1::zeros(n_out),
        }
    }

    /// μ uniform in ±1/√fan_in, σ = σ₀/√fan_in.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let sigma = SIGMA_ZERO / (n_in as f64).sqrt();
        let mut p = Self::zeros(n_in, n_out);
        p.weight_mu.mapv_inplace(|_| rng.gen_range(-bound..=bound));
        p.bias_mu.mapv_inplace(|_| rng.gen_range(-bound..=bound));
        p.weight_sigma.fill(sigma);
        p.bias_sigma.fill(sigma);
        p
    }

    pub fn n_in(&self) -> usize {
        self.weight_mu.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weight_mu.nrows()
    }

    pub fn resample_noise<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (eps_in, eps_out) = sample_factorized_noise(rng, self.n_in(), self.n_out());
        self.eps_in = eps_in;
        self.eps_out = eps_out;
    }

    /// μ_w + σ_w ⊙ (ε_out ⊗ ε_in)
    fn noisy_weights(&self) -> Array2<f64> {
        let outer = self
            .eps_out
            .view()
            .insert_axis(Axis(1))
            .dot(&self.eps_in.view().insert_axis(Axis(0)));
        &self.weight_mu + &(&self.weight_sigma * &outer)
    }

    fn noisy_bias(&self) -> Array1<f64> {
        &self.bias_mu + &(&self.bias_sigma * &self.eps_out)
    }
}

/// `sgn(x)·√|x|`
pub fn scale_noise(x: f64) -> f64 {
    x.signum() * x.abs().sqrt()
}

pub fn sample_factorized_noise<R: Rng + ?Sized>(rng: &mut R, n_in: usize, n_out: usize) -> (Array1<f64>, Array1<f64>) {
    let mut draw = |n: usize| -> Array1<f64> {
        (0..n).map(|_| scale_noise(StandardNormal.sample(rng))).collect()
    };
    let eps_in = draw(n_in);
    let eps_out = draw(n_out);
    (eps_in, eps_out)
}

pub fn noisy_forward(params: &NoisyLayerParams, x: &[f64], deterministic: bool) -> Result<Vec<f64>> {
    if x.len() != params.n_in() {
        return Err(Error::Argument(format!(
            "noisy layer expects {} inputs, got {}",
            params.n_in(),
            x.len()
        )));
    }
    let x = ArrayView1::from(x);
    let y = if deterministic {
        params.weight_mu.dot(&x) + &params.bias_mu
    } else {
        params.noisy_weights().dot(&x) + params.noisy_bias()
    };
    Ok(y.to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(DenseLayerParams),
    Noisy(NoisyLayerParams),
    Relu,
    Identity,
}

impl Layer {
    fn dims(&self) -> Option<(usize, usize)> {
        match self {
            Layer::Linear(p) => Some((p.n_in(), p.n_out())),
            Layer::Noisy(p) => Some((p.n_in(), p.n_out())),
            Layer::Relu | Layer::Identity => None,
        }
    }
}

/// Layer widths of a network. Trunk layers are plain linear + ReLU; each head
/// is `noisy → ReLU → noisy` (or a single noisy layer when `head_hidden` is 0).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input_dim: usize,
    pub trunk: Vec<usize>,
    pub head_hidden: usize,
    pub n_actions: usize,
    pub n_atoms: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub trunk: Vec<Layer>,
    pub value: Vec<Layer>,
    pub advantage: Vec<Layer>,
    pub n_actions: usize,
    pub n_atoms: usize,
}

fn segment_dims(layers: &[Layer]) -> Result<Option<(usize, usize)>> {
    let mut first = None;
    let mut last: Option<usize> = None;
    for l in layers {
        if let Some((i, o)) = l.dims() {
            if let Some(prev) = last {
                if prev != i {
                    return Err(Error::Argument(format!("layer expects {i} inputs but previous layer emits {prev}")));
                }
            }
            first.get_or_insert(i);
            last = Some(o);
        }
    }
    Ok(first.zip(last))
}

impl NetworkGraph {
    pub fn new(trunk: Vec<Layer>, value: Vec<Layer>, advantage: Vec<Layer>, n_actions: usize, n_atoms: usize) -> Result<Self> {
        let net = NetworkGraph { trunk, value, advantage, n_actions, n_atoms };
        net.check()?;
        Ok(net)
    }

    fn check(&self) -> Result<()> {
        let trunk = segment_dims(&self.trunk)?;
        let value = segment_dims(&self.value)?.ok_or_else(|| Error::Argument("value head has no layers".into()))?;
        let adv = segment_dims(&self.advantage)?.ok_or_else(|| Error::Argument("advantage head has no layers".into()))?;
        if value.0 != adv.0 {
            return Err(Error::Argument("value and advantage heads disagree on input width".into()));
        }
        if let Some((_, phi)) = trunk {
            if phi != value.0 {
                return Err(Error::Argument(format!("trunk emits {phi} features, heads expect {}", value.0)));
            }
        }
        if value.1 != self.n_atoms {
            return Err(Error::Argument(format!("value head emits {}, expected {} atoms", value.1, self.n_atoms)));
        }
        if adv.1 != self.n_actions * self.n_atoms {
            return Err(Error::Argument(format!(
                "advantage head emits {}, expected {}×{}",
                adv.1, self.n_actions, self.n_atoms
            )));
        }
        Ok(())
    }

    /// Randomly initialised network of the given shape. The mean weights and
    /// biases of both output layers start at zero, so every state and action
    /// begins with the same (uniform) distribution and early bootstrap targets
    /// carry no state-dependent initialisation noise. Noise scales are kept.
    pub fn build<R: Rng + ?Sized>(shape: &NetShape, rng: &mut R) -> Result<Self> {
        let mut net = Self::build_random(shape, rng)?;
        for head in [&mut net.value, &mut net.advantage] {
            if let Some(Layer::Noisy(p)) = head.last_mut() {
                p.weight_mu.fill(0.0);
                p.bias_mu.fill(0.0);
            }
        }
        Ok(net)
    }

    /// Tilt the value head's output bias so the initial distribution peaks at
    /// atom `center` and falls off by `sharpness` nats per atom.
    pub fn concentrate_value(&mut self, center: usize, sharpness: f64) {
        if let Some(Layer::Noisy(p)) = self.value.last_mut() {
            for (i, b) in p.bias_mu.iter_mut().enumerate() {
                *b = -sharpness * i.abs_diff(center) as f64;
            }
        }
    }

    /// Every parameter drawn at random, output layers included.
    pub fn build_random<R: Rng + ?Sized>(shape: &NetShape, rng: &mut R) -> Result<Self> {
        Self::build_with(shape, &mut |i, o, noisy| {
            if noisy {
                Layer::Noisy(NoisyLayerParams::init(i, o, rng))
            } else {
                Layer::Linear(DenseLayerParams::init(i, o, rng))
            }
        })
    }

    /// Network of the given shape with every parameter zero.
    pub fn zeros(shape: &NetShape) -> Result<Self> {
        Self::build_with(shape, &mut |i, o, noisy| {
            if noisy {
                Layer::Noisy(NoisyLayerParams::zeros(i, o))
            } else {
                Layer::Linear(DenseLayerParams::zeros(i, o))
            }
        })
    }

    fn build_with(shape: &NetShape, make: &mut dyn FnMut(usize, usize, bool) -> Layer) -> Result<Self> {
        if shape.input_dim == 0 || shape.n_actions == 0 || shape.n_atoms == 0 {
            return Err(Error::Argument("network dimensions must be positive".into()));
        }
        let mut trunk = Vec::new();
        let mut width = shape.input_dim;
        for &w in &shape.trunk {
            trunk.push(make(width, w, false));
            trunk.push(Layer::Relu);
            width = w;
        }
        let mut head = |out: usize| {
            if shape.head_hidden == 0 {
                vec![make(width, out, true)]
            } else {
                vec![make(width, shape.head_hidden, true), Layer::Relu, make(shape.head_hidden, out, true)]
            }
        };
        let value = head(shape.n_atoms);
        let advantage = head(shape.n_actions * shape.n_atoms);
        Self::new(trunk, value, advantage, shape.n_actions, shape.n_atoms)
    }

    pub fn input_dim(&self) -> usize {
        segment_dims(&self.trunk)
            .ok()
            .flatten()
            .map(|d| d.0)
            .or_else(|| segment_dims(&self.value).ok().flatten().map(|d| d.0))
            .unwrap_or(0)
    }

    fn layers(&self) -> impl Iterator<Item = (&'static str, usize, &Layer)> {
        self.trunk
            .iter()
            .enumerate()
            .map(|(i, l)| ("trunk", i, l))
            .chain(self.value.iter().enumerate().map(|(i, l)| ("value", i, l)))
            .chain(self.advantage.iter().enumerate().map(|(i, l)| ("advantage", i, l)))
    }

    /// Every parameter tensor in canonical order: `(name, shape, values)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (seg, i, layer) in self.layers() {
            match layer {
                Layer::Linear(p) => {
                    out.push((format!("{seg}.{i}.weight"), p.weights.shape().to_vec(), p.weights.as_slice().unwrap()));
                    out.push((format!("{seg}.{i}.bias"), p.bias.shape().to_vec(), p.bias.as_slice().unwrap()));
                }
                Layer::Noisy(p) => {
                    out.push((format!("{seg}.{i}.weight_mu"), p.weight_mu.shape().to_vec(), p.weight_mu.as_slice().unwrap()));
                    out.push((
                        format!("{seg}.{i}.weight_sigma"),
                        p.weight_sigma.shape().to_vec(),
                        p.weight_sigma.as_slice().unwrap(),
                    ));
                    out.push((format!("{seg}.{i}.bias_mu"), p.bias_mu.shape().to_vec(), p.bias_mu.as_slice().unwrap()));
                    out.push((format!("{seg}.{i}.bias_sigma"), p.bias_sigma.shape().to_vec(), p.bias_sigma.as_slice().unwrap()));
                }
                Layer::Relu | Layer::Identity => {}
            }
        }
        out
    }

    /// Mutable views of every parameter tensor, same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in self.trunk.iter_mut().chain(self.value.iter_mut()).chain(self.advantage.iter_mut()) {
            match layer {
                Layer::Linear(p) => {
                    out.push(p.weights.as_slice_mut().unwrap());
                    out.push(p.bias.as_slice_mut().unwrap());
                }
                Layer::Noisy(p) => {
                    out.push(p.weight_mu.as_slice_mut().unwrap());
                    out.push(p.weight_sigma.as_slice_mut().unwrap());
                    out.push(p.bias_mu.as_slice_mut().unwrap());
                    out.push(p.bias_sigma.as_slice_mut().unwrap());
                }
                Layer::Relu | Layer::Identity => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    /// Rebuild a network from named tensors as produced by [`tensors`](Self::tensors).
    /// Trunk layers are followed by ReLU; head layers are separated by ReLU.
    pub fn from_tensors(tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let find = |name: &str| tensors.iter().find(|t| t.0 == name);
        let mat = |name: &str| -> Result<Array2<f64>> {
            let t = find(name).ok_or_else(|| Error::Argument(format!("missing tensor {name}")))?;
            if t.1.len() != 2 {
                return Err(Error::Argument(format!("tensor {name} must have rank 2")));
            }
            Array2::from_shape_vec((t.1[0], t.1[1]), t.2.clone()).map_err(|e| Error::Argument(e.to_string()))
        };
        let vec1 = |name: &str| -> Result<Array1<f64>> {
            let t = find(name).ok_or_else(|| Error::Argument(format!("missing tensor {name}")))?;
            if t.1.len() != 1 {
                return Err(Error::Argument(format!("tensor {name} must have rank 1")));
            }
            Ok(Array1::from(t.2.clone()))
        };
        let segment = |seg: &str, trailing_relu: bool| -> Result<Vec<Layer>> {
            let mut layers = Vec::new();
            let mut i = 0;
            loop {
                if find(&format!("{seg}.{i}.weight")).is_some() {
                    layers.push(Layer::Linear(DenseLayerParams {
                        weights: mat(&format!("{seg}.{i}.weight"))?,
                        bias: vec1(&format!("{seg}.{i}.bias"))?,
                    }));
                } else if find(&format!("{seg}.{i}.weight_mu")).is_some() {
                    let weight_mu = mat(&format!("{seg}.{i}.weight_mu"))?;
                    let (n_out, n_in) = weight_mu.dim();
                    layers.push(Layer::Noisy(NoisyLayerParams {
                        weight_mu,
                        weight_sigma: mat(&format!("{seg}.{i}.weight_sigma"))?,
                        bias_mu: vec1(&format!("{seg}.{i}.bias_mu"))?,
                        bias_sigma: vec1(&format!("{seg}.{i}.bias_sigma"))?,
                        eps_in: Array1::zeros(n_in),
                        eps_out: Array1::zeros(n_out),
                    }));
                } else {
                    break;
                }
                let next_exists = find(&format!("{seg}.{}.weight", i + 2)).is_some()
                    || find(&format!("{seg}.{}.weight_mu", i + 2)).is_some();
                if trailing_relu || next_exists {
                    layers.push(Layer::Relu);
                    i += 2;
                } else {
                    break;
                }
            }
            Ok(layers)
        };
        let trunk = segment("trunk", true)?;
        let value = segment("value", false)?;
        let advantage = segment("advantage", false)?;
        let n_atoms = segment_dims(&value)?.map(|d| d.1).unwrap_or(0);
        let adv_out = segment_dims(&advantage)?.map(|d| d.1).unwrap_or(0);
        if n_atoms == 0 || adv_out % n_atoms != 0 {
            return Err(Error::Argument("head tensors do not describe a dueling network".into()));
        }
        Self::new(trunk, value, advantage, adv_out / n_atoms, n_atoms)
    }

    pub fn resample_noise<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in self.trunk.iter_mut().chain(self.value.iter_mut()).chain(self.advantage.iter_mut()) {
            if let Layer::Noisy(p) = layer {
                p.resample_noise(rng);
            }
        }
    }
}

/// What backward needs from one layer of a forward pass.
#[derive(Debug, Clone)]
enum Cached {
    Linear { input: Array2<f64> },
    Noisy { input: Array2<f64>, weights: Array2<f64>, eps_in: Array1<f64>, eps_out: Array1<f64>, noisy: bool },
    Relu { output: Array2<f64> },
    Identity,
}

#[derive(Debug, Clone)]
pub struct Tape {
    trunk: Vec<Cached>,
    value: Vec<Cached>,
    advantage: Vec<Cached>,
    batch: usize,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Outputs of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// batch × trunk width
    pub phi: Array2<f64>,
    /// batch × atoms
    pub value_logits: Array2<f64>,
    /// batch × (actions · atoms), action-major
    pub advantage_logits: Array2<f64>,
}

fn run_segment(layers: &[Layer], mut x: Array2<f64>, deterministic: bool, tape: Option<&mut Vec<Cached>>) -> Array2<f64> {
    let mut cache = Vec::new();
    let record = tape.is_some();
    for layer in layers {
        x = match layer {
            Layer::Linear(p) => {
                let y = x.dot(&p.weights.t()) + &p.bias;
                if record {
                    cache.push(Cached::Linear { input: x });
                }
                y
            }
            Layer::Noisy(p) => {
                let (w, b) = if deterministic {
                    (p.weight_mu.clone(), p.bias_mu.clone())
                } else {
                    (p.noisy_weights(), p.noisy_bias())
                };
                let y = x.dot(&w.t()) + &b;
                if record {
                    cache.push(Cached::Noisy {
                        input: x,
                        weights: w,
                        eps_in: p.eps_in.clone(),
                        eps_out: p.eps_out.clone(),
                        noisy: !deterministic,
                    });
                }
                y
            }
            Layer::Relu => {
                x.mapv_inplace(|v| v.max(0.0));
                if record {
                    cache.push(Cached::Relu { output: x.clone() });
                }
                x
            }
            Layer::Identity => {
                if record {
                    cache.push(Cached::Identity);
                }
                x
            }
        };
    }
    if let Some(t) = tape {
        *t = cache;
    }
    x
}

fn check_input(net: &NetworkGraph, cols: usize) -> Result<()> {
    let want = net.input_dim();
    if cols != want {
        return Err(Error::Argument(format!("network expects {want} inputs, got {cols}")));
    }
    Ok(())
}

/// Batched forward pass over the rows of `x`, recording a tape for [`backward`].
pub fn forward_batch(net: &NetworkGraph, x: ArrayView2<f64>, deterministic: bool) -> Result<(ForwardOutput, Tape)> {
    check_input(net, x.ncols())?;
    let mut tape = Tape { trunk: Vec::new(), value: Vec::new(), advantage: Vec::new(), batch: x.nrows() };
    let phi = run_segment(&net.trunk, x.to_owned(), deterministic, Some(&mut tape.trunk));
    let value_logits = run_segment(&net.value, phi.clone(), deterministic, Some(&mut tape.value));
    let advantage_logits = run_segment(&net.advantage, phi.clone(), deterministic, Some(&mut tape.advantage));
    Ok((ForwardOutput { phi, value_logits, advantage_logits }, tape))
}

/// Batched forward pass without a tape.
pub fn infer_batch(net: &NetworkGraph, x: ArrayView2<f64>, deterministic: bool) -> Result<ForwardOutput> {
    check_input(net, x.ncols())?;
    let phi = run_segment(&net.trunk, x.to_owned(), deterministic, None);
    let value_logits = run_segment(&net.value, phi.clone(), deterministic, None);
    let advantage_logits = run_segment(&net.advantage, phi.clone(), deterministic, None);
    Ok(ForwardOutput { phi, value_logits, advantage_logits })
}

/// Single-input forward: `(φ, value logits, advantage logits as actions × atoms, tape)`.
pub fn forward(net: &NetworkGraph, x: &[f64], deterministic: bool) -> Result<(Vec<f64>, Array1<f64>, Array2<f64>, Tape)> {
    let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Argument(e.to_string()))?;
    let (out, tape) = forward_batch(net, xv, deterministic)?;
    let adv = out
        .advantage_logits
        .row(0)
        .to_owned()
        .into_shape_with_order((net.n_actions, net.n_atoms))
        .map_err(|e| Error::Internal(e.to_string()))?;
    Ok((out.phi.row(0).to_vec(), out.value_logits.row(0).to_owned(), adv, tape))
}

/// Gradient per parameter tensor, same order as [`NetworkGraph::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub tensors: Vec<Vec<f64>>,
}

impl ParamGradients {
    pub fn zeros_like(net: &NetworkGraph) -> Self {
        ParamGradients { tensors: net.tensors().into_iter().map(|t| vec![0.0; t.2.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &ParamGradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Returns gradients for the layer's parameters (in canonical order) and the
/// gradient with respect to the layer input.
fn backward_segment(layers: &[Layer], cache: &[Cached], mut grad: Array2<f64>) -> Result<(Vec<Vec<Vec<f64>>>, Array2<f64>)> {
    if layers.len() != cache.len() {
        return Err(Error::Internal("tape does not match network".into()));
    }
    let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers.len()];
    for (idx, (layer, cached)) in layers.iter().zip(cache).enumerate().rev() {
        match (layer, cached) {
            (Layer::Linear(p), Cached::Linear { input }) => {
                let dw = grad.t().dot(input);
                let db = grad.sum_axis(Axis(0));
                per_layer[idx] = vec![flat(&dw), db.to_vec()];
                grad = grad.dot(&p.weights);
            }
            (Layer::Noisy(_), Cached::Noisy { input, weights, eps_in, eps_out, noisy }) => {
                let dw = grad.t().dot(input);
                let db = grad.sum_axis(Axis(0));
                let (dsw, dsb) = if *noisy {
                    let outer = eps_out.view().insert_axis(Axis(1)).dot(&eps_in.view().insert_axis(Axis(0)));
                    ((&dw * &outer), (&db * eps_out))
                } else {
                    (Array2::zeros(dw.raw_dim()), Array1::zeros(db.len()))
                };
                per_layer[idx] = vec![
                    flat(&dw),
                    flat(&dsw),
                    db.to_vec(),
                    dsb.to_vec(),
                ];
                grad = grad.dot(weights);
            }
            (Layer::Relu, Cached::Relu { output }) => {
                grad.zip_mut_with(output, |g, &o| {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            (Layer::Identity, Cached::Identity) => {}
            _ => return Err(Error::Internal("tape layer kind does not match network".into())),
        }
    }
    Ok((per_layer, grad))
}

/// Reverse-mode gradients given the loss gradient on the head logits.
/// Noise values recorded on the tape are treated as constants.
pub fn backward(net: &NetworkGraph, tape: &Tape, d_value: ArrayView2<f64>, d_advantage: ArrayView2<f64>) -> Result<ParamGradients> {
    if d_value.nrows() != tape.batch || d_advantage.nrows() != tape.batch {
        return Err(Error::Internal("upstream gradient batch does not match tape".into()));
    }
    if d_value.ncols() != net.n_atoms || d_advantage.ncols() != net.n_actions * net.n_atoms {
        return Err(Error::Internal("upstream gradient width does not match network heads".into()));
    }
    let (gv, dphi_v) = backward_segment(&net.value, &tape.value, d_value.to_owned())?;
    let (ga, dphi_a) = backward_segment(&net.advantage, &tape.advantage, d_advantage.to_owned())?;
    let (gt, _) = backward_segment(&net.trunk, &tape.trunk, dphi_v + dphi_a)?;
    let tensors = gt.into_iter().chain(gv).chain(ga).flatten().collect();
    Ok(ParamGradients { tensors })
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1.5e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, net: &NetworkGraph) -> Self {
        let zeros: Vec<Vec<f64>> = net.tensors().iter().map(|t| vec![0.0; t.2.len()]).collect();
        AdamState { config, m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(opt: &mut AdamState, params: &mut NetworkGraph, grads: &ParamGradients) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.tensors.len() || tensors.len() != opt.m.len() {
        return Err(Error::Internal("optimizer state does not match parameters".into()));
    }
    opt.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = opt.config;
    let c1 = 1.0 - beta1.powi(opt.step as i32);
    let c2 = 1.0 - beta2.powi(opt.step as i32);
    for (((p, g), m), v) in tensors.iter_mut().zip(&grads.tensors).zip(opt.m.iter_mut()).zip(opt.v.iter_mut()) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Internal("gradient shape does not match parameter".into()));
        }
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
