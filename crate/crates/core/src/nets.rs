//! Parameterized building blocks: MLPs, single-head cross-attention, layer
//! norm, and the gaze estimator shared by teacher and student.
//!
//! A module owns its parameters as [`Tensor`]s. `bind` copies them onto a
//! [`Tape`] and returns a mirror struct of [`Var`]s used for the forward
//! pass; `params`/`params_mut` and [`BoundParams::vars`] enumerate in the same
//! order so gradients can be routed back with [`accumulate_grads`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::diff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::SphericalGaze;

/// Default widths.
pub const HIDDEN_WIDTH: usize = 64;
pub const ENCODER_WIDTH: usize = 64;

pub trait Module {
    type Bound: BoundParams;

    /// Puts the parameters on `tape`; `trainable = false` binds constants.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Self::Bound;
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Dotted parameter names in [`Module::params`] order.
    fn param_names(&self) -> Vec<String>;
}

pub(crate) fn prefixed(prefix: &str, names: Vec<String>) -> Vec<String> {
    names.into_iter().map(|n| format!("{prefix}.{n}")).collect()
}

pub trait BoundParams {
    fn vars(&self) -> Vec<Var>;
}

fn bind_tensor(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t)
    } else {
        tape.constant(t)
    }
}

/// Routes gradients from a backward pass into the module's grad buffers.
pub fn accumulate_grads<M: Module>(module: &mut M, bound: &M::Bound, grads: &Gradients) -> Result<()> {
    let vars = bound.vars();
    let mut params = module.params_mut();
    debug_assert_eq!(vars.len(), params.len());
    for (v, p) in vars.into_iter().zip(params.iter_mut()) {
        grads.accumulate_into(v, p)?;
    }
    Ok(())
}

pub fn zero_grads<M: Module>(module: &mut M) {
    module.params_mut().into_iter().for_each(|p| p.zero_grad());
}

/// Largest absolute gradient entry across the module (0 when no buffers).
pub fn max_abs_grad<M: Module>(module: &M) -> f32 {
    module
        .params()
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .fold(0.0f32, |m, v| m.max(v.abs()))
}

/// SHA-256 over shapes and little-endian parameter bytes.
pub fn param_hash<M: Module>(module: &M) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in module.params() {
        for d in p.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Copies parameter values from `src` into `dst` (same architecture).
pub fn copy_params<M: Module>(dst: &mut M, src: &M) -> Result<()> {
    let srcs = src.params();
    let mut dsts = dst.params_mut();
    if srcs.len() != dsts.len() {
        return Err(Error::invalid("parameter count mismatch"));
    }
    for (d, s) in dsts.iter_mut().zip(srcs) {
        d.copy_from(s)?;
    }
    Ok(())
}

pub fn all_finite<M: Module>(module: &M) -> bool {
    module.params().iter().all(|p| p.is_finite())
}

/// Central-difference check of the scalar built by `f` with respect to every
/// parameter of `module` and every entry of `inputs`. Returns
/// `‖g_a − g_n‖ / max(‖g_a‖, ‖g_n‖)` over the concatenation of all of them, so
/// tensors whose true gradient is zero (a softmax over one key, say) are
/// judged against the scale of the whole gradient rather than f32 noise.
pub fn check_module_gradients<M, F>(module: &M, inputs: &[Tensor], f: F) -> f32
where
    M: Module + Clone,
    F: Fn(&mut Tape, &M::Bound, &[Var]) -> Var,
{
    use crate::diff::gradcheck::relative_error;
    let pairs = module_gradients(module, inputs, f);
    let analytic: Vec<f32> = pairs.iter().flat_map(|(a, _)| a.iter().copied()).collect();
    let numeric: Vec<f32> = pairs.iter().flat_map(|(_, n)| n.iter().copied()).collect();
    relative_error(&analytic, &numeric)
}

/// Per-tensor relative errors: parameters in [`Module::params`] order, then inputs.
pub fn module_gradient_errors<M, F>(module: &M, inputs: &[Tensor], f: F) -> Vec<f32>
where
    M: Module + Clone,
    F: Fn(&mut Tape, &M::Bound, &[Var]) -> Var,
{
    use crate::diff::gradcheck::relative_error;
    module_gradients(module, inputs, f)
        .iter()
        .map(|(a, n)| relative_error(a, n))
        .collect()
}

/// `(analytic, numeric)` gradient pairs per parameter, then per input.
fn module_gradients<M, F>(module: &M, inputs: &[Tensor], f: F) -> Vec<(Vec<f32>, Vec<f32>)>
where
    M: Module + Clone,
    F: Fn(&mut Tape, &M::Bound, &[Var]) -> Var,
{
    use crate::diff::gradcheck::FD_STEP;

    let eval = |m: &M, ins: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let b = m.bind(&mut t, true);
        let vs: Vec<Var> = ins.iter().map(|x| t.param(x)).collect();
        let l = f(&mut t, &b, &vs);
        t.value(l)[0] as f64
    };
    let mut tape = Tape::new();
    let bound = module.bind(&mut tape, true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &bound, &vars);
    let grads = tape.backward(loss).expect("scalar finite loss");
    let analytic = |v: Var, n: usize| grads.get(v).map(|g| g.to_vec()).unwrap_or(vec![0.0; n]);
    let central = |plus: f64, minus: f64| ((plus - minus) / (2.0 * FD_STEP as f64)) as f32;

    let mut pairs = Vec::new();
    let mut work = module.clone();
    for (k, v) in bound.vars().into_iter().enumerate() {
        let n = work.params()[k].numel();
        let mut numeric = vec![0.0f32; n];
        for (i, out) in numeric.iter_mut().enumerate() {
            let orig = work.params()[k].data()[i];
            work.params_mut()[k].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work, inputs);
            work.params_mut()[k].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work, inputs);
            work.params_mut()[k].data_mut()[i] = orig;
            *out = central(plus, minus);
        }
        pairs.push((analytic(v, n), numeric));
    }
    let mut ins = inputs.to_vec();
    for (k, v) in vars.into_iter().enumerate() {
        let n = ins[k].numel();
        let mut numeric = vec![0.0f32; n];
        for (i, out) in numeric.iter_mut().enumerate() {
            let orig = ins[k].data()[i];
            ins[k].data_mut()[i] = orig + FD_STEP;
            let plus = eval(module, &ins);
            ins[k].data_mut()[i] = orig - FD_STEP;
            let minus = eval(module, &ins);
            ins[k].data_mut()[i] = orig;
            *out = central(plus, minus);
        }
        pairs.push((analytic(v, n), numeric));
    }
    pairs
}

/// [`Tape::relu_margin`] of the forward pass that `f` builds.
pub fn relu_margin_of<M, F>(module: &M, inputs: &[Tensor], f: F) -> f32
where
    M: Module,
    F: Fn(&mut Tape, &M::Bound, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let bound = module.bind(&mut tape, true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    f(&mut tape, &bound, &vars);
    tape.relu_margin()
}

// ---- Linear -----------------------------------------------------------------

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = xavier_bound(fan_in, fan_out);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Tensor::new(&[fan_in, fan_out], data).expect("positive dims"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f32 {
    libm::sqrtf(6.0 / (fan_in + fan_out) as f32)
}

impl Module for Linear {
    type Bound = LinearVars;

    fn bind(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        LinearVars {
            weight: bind_tensor(tape, &self.weight, trainable),
            bias: bind_tensor(tape, &self.bias, trainable),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["weight".into(), "bias".into()]
    }
}

impl BoundParams for LinearVars {
    fn vars(&self) -> Vec<Var> {
        vec![self.weight, self.bias]
    }
}

impl LinearVars {
    /// Applies the layer to the last axis of `x` (any rank ≥ 1).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let in_w = tape.shape(self.weight)[0];
        let out_w = tape.shape(self.weight)[1];
        let last = *shape.last().unwrap_or(&0);
        if last != in_w {
            return Err(Error::shape("linear", &shape, tape.shape(self.weight)));
        }
        let rows = shape.iter().product::<usize>() / in_w;
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, &[rows, in_w])?
        };
        let y = tape.matmul(flat, self.weight)?;
        let y = tape.add_bias(y, self.bias)?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_w;
        tape.reshape(y, &out_shape)
    }
}

// ---- MLP --------------------------------------------------------------------

/// Affine layers with ReLU between them and identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<LinearVars>,
}

impl Mlp {
    /// `widths = [in, hidden..., out]`.
    pub fn init(rng: &mut ChaCha8Rng, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid("mlp needs at least two positive widths"));
        }
        let layers = widths.windows(2).map(|w| Linear::init(rng, w[0], w[1])).collect();
        Ok(Self { layers })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid("mlp needs at least two positive widths"));
        }
        Ok(Self {
            layers: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        })
    }

    /// Checks that consecutive widths chain.
    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("mlp without layers"));
        }
        for w in layers.windows(2) {
            if w[0].out_width() != w[1].in_width() || w[0].bias.numel() != w[0].out_width() {
                return Err(Error::shape("mlp", w[0].weight.shape(), w[1].weight.shape()));
            }
        }
        Ok(Self { layers })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers[self.layers.len() - 1].out_width()
    }
}

impl Module for Mlp {
    type Bound = MlpVars;

    fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        MlpVars {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("{i}"), l.param_names()))
            .collect()
    }
}

impl BoundParams for MlpVars {
    fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.vars()).collect()
    }
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Runs an MLP forward on a fresh tape with constant parameters.
pub fn mlp_forward(p: &Mlp, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape, false);
    let xv = tape.constant(x);
    let y = vars.forward(&mut tape, xv)?;
    Ok(tape.tensor(y))
}

// ---- LayerNorm --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Tensor::new(&[width], vec![1.0; width]).expect("positive width"),
            bias: Tensor::zeros(&[width]),
        }
    }
}

impl Module for LayerNorm {
    type Bound = LayerNormVars;

    fn bind(&self, tape: &mut Tape, trainable: bool) -> LayerNormVars {
        LayerNormVars {
            gain: bind_tensor(tape, &self.gain, trainable),
            bias: bind_tensor(tape, &self.bias, trainable),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gain, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gain, &mut self.bias]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["gain".into(), "bias".into()]
    }
}

impl BoundParams for LayerNormVars {
    fn vars(&self) -> Vec<Var> {
        vec![self.gain, self.bias]
    }
}

impl LayerNormVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias)
    }
}

// ---- Cross-attention --------------------------------------------------------

/// Single-head cross-attention: `softmax(Q Kᵀ / √d) V · W_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl CrossAttention {
    pub fn init(rng: &mut ChaCha8Rng, query_width: usize, kv_width: usize, width: usize) -> Self {
        let mut w = |a: usize, b: usize| Linear::init(rng, a, b).weight;
        Self {
            wq: w(query_width, width),
            wk: w(kv_width, width),
            wv: w(kv_width, width),
            wo: w(width, width),
        }
    }

    pub fn width(&self) -> usize {
        self.wo.shape()[0]
    }
}

impl Module for CrossAttention {
    type Bound = CrossAttentionVars;

    fn bind(&self, tape: &mut Tape, trainable: bool) -> CrossAttentionVars {
        CrossAttentionVars {
            wq: bind_tensor(tape, &self.wq, trainable),
            wk: bind_tensor(tape, &self.wk, trainable),
            wv: bind_tensor(tape, &self.wv, trainable),
            wo: bind_tensor(tape, &self.wo, trainable),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.wq, &self.wk, &self.wv, &self.wo]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    fn param_names(&self) -> Vec<String> {
        ["query", "key", "value", "output"]
            .iter()
            .map(|n| String::from(*n))
            .collect()
    }
}

impl BoundParams for CrossAttentionVars {
    fn vars(&self) -> Vec<Var> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }
}

impl CrossAttentionVars {
    /// `query: [B × n_q × d_q]`, `kv: [B × n_kv × d_kv]` → `[B × n_q × d]`.
    /// Rank-2 inputs are treated as a batch of one and return rank 2.
    pub fn forward(&self, tape: &mut Tape, query: Var, kv: Var) -> Result<Var> {
        let (qs, ks) = (tape.shape(query).to_vec(), tape.shape(kv).to_vec());
        let unbatched = qs.len() == 2 && ks.len() == 2;
        let (q3, k3) = if unbatched {
            (
                tape.reshape(query, &[1, qs[0], qs[1]])?,
                tape.reshape(kv, &[1, ks[0], ks[1]])?,
            )
        } else if qs.len() == 3 && ks.len() == 3 && qs[0] == ks[0] {
            (query, kv)
        } else {
            return Err(Error::shape("cross_attention", &qs, &ks));
        };
        let (b, n_q, n_kv) = (tape.shape(q3)[0], tape.shape(q3)[1], tape.shape(k3)[1]);
        if n_q == 0 || n_kv == 0 {
            return Err(Error::invalid("cross_attention needs at least one query and one key"));
        }
        let d = tape.shape(self.wq)[1];
        let proj = |tape: &mut Tape, x: Var, w: Var, n: usize| -> Result<Var> {
            let din = tape.shape(x)[2];
            if tape.shape(w)[0] != din {
                return Err(Error::shape("cross_attention", tape.shape(x), tape.shape(w)));
            }
            let flat = tape.reshape(x, &[b * n, din])?;
            let y = tape.matmul(flat, w)?;
            tape.reshape(y, &[b, n, d])
        };
        let q = proj(tape, q3, self.wq, n_q)?;
        let k = proj(tape, k3, self.wk, n_kv)?;
        let v = proj(tape, k3, self.wv, n_kv)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrtf(d as f32));
        let attn = tape.softmax(scores, 2)?;
        let ctx = tape.bmm(attn, v, false)?;
        let flat = tape.reshape(ctx, &[b * n_q, d])?;
        let out = tape.matmul(flat, self.wo)?;
        if unbatched {
            tape.reshape(out, &[n_q, d])
        } else {
            tape.reshape(out, &[b, n_q, d])
        }
    }
}

/// Cross-attention on a fresh tape with constant parameters.
pub fn cross_attention(p: &CrossAttention, query_tokens: &Tensor, kv_tokens: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape, false);
    let q = tape.constant(query_tokens);
    let kv = tape.constant(kv_tokens);
    let y = vars.forward(&mut tape, q, kv)?;
    Ok(tape.tensor(y))
}

// ---- Gaze estimator ---------------------------------------------------------

/// Feature encoder followed by a two-output (yaw, pitch) regression head.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeEstimator {
    pub encoder: Mlp,
    pub head: Mlp,
}

#[derive(Debug, Clone)]
pub struct GazeEstimatorVars {
    pub encoder: MlpVars,
    pub head: MlpVars,
}

/// Layer widths of a [`GazeEstimator`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EstimatorDims {
    pub feature_width: usize,
    pub encoder_width: usize,
    pub hidden_width: usize,
}

impl EstimatorDims {
    pub fn new(feature_width: usize) -> Self {
        Self {
            feature_width,
            encoder_width: ENCODER_WIDTH,
            hidden_width: HIDDEN_WIDTH,
        }
    }
}

impl GazeEstimator {
    pub fn init(seed: u64, dims: EstimatorDims) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            encoder: Mlp::init(&mut rng, &[dims.feature_width, dims.hidden_width, dims.encoder_width])?,
            head: Mlp::init(&mut rng, &[dims.encoder_width, dims.hidden_width, 2])?,
        })
    }

    pub fn zeros(dims: EstimatorDims) -> Result<Self> {
        Ok(Self {
            encoder: Mlp::zeros(&[dims.feature_width, dims.hidden_width, dims.encoder_width])?,
            head: Mlp::zeros(&[dims.encoder_width, dims.hidden_width, 2])?,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.encoder.in_width()
    }

    pub fn dims(&self) -> EstimatorDims {
        EstimatorDims {
            feature_width: self.feature_width(),
            encoder_width: self.encoder.out_width(),
            hidden_width: self.encoder.layers[0].out_width(),
        }
    }

    /// Inference on row-major features `[n × d_x]`.
    pub fn predict(&self, features: &[f32]) -> Result<Vec<SphericalGaze>> {
        let d = self.feature_width();
        if features.is_empty() {
            return Ok(Vec::new());
        }
        if !features.len().is_multiple_of(d) {
            return Err(Error::shape("estimator_forward", &[features.len()], &[d]));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant_from(&[features.len() / d, d], features.to_vec())?;
        let y = vars.forward(&mut tape, x)?;
        Ok(tape
            .value(y)
            .chunks_exact(2)
            .map(|p| SphericalGaze::new(p[0], p[1]))
            .collect())
    }
}

impl Module for GazeEstimator {
    type Bound = GazeEstimatorVars;

    fn bind(&self, tape: &mut Tape, trainable: bool) -> GazeEstimatorVars {
        GazeEstimatorVars {
            encoder: self.encoder.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    fn param_names(&self) -> Vec<String> {
        let mut n = prefixed("encoder", self.encoder.param_names());
        n.extend(prefixed("head", self.head.param_names()));
        n
    }
}

impl BoundParams for GazeEstimatorVars {
    fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars();
        v.extend(self.head.vars());
        v
    }
}

impl GazeEstimatorVars {
    /// `[B × d_x]` → `[B × 2]` (yaw, pitch).
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let h = self.encoder.forward(tape, features)?;
        self.head.forward(tape, h)
    }
}

/// Estimator inference on a `[B × d_x]` tensor.
pub fn estimator_forward(p: &GazeEstimator, features: &Tensor) -> Result<Vec<SphericalGaze>> {
    if features.shape().len() != 2 || features.shape()[1] != p.feature_width() {
        return Err(Error::shape(
            "estimator_forward",
            features.shape(),
            &[p.feature_width()],
        ));
    }
    p.predict(features.data())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_names_align_with_params() {
        let m = GazeEstimator::init(0, EstimatorDims::new(5)).unwrap();
        let names = m.param_names();
        assert_eq!(names.len(), m.params().len());
        assert_eq!(names[0], "encoder.0.weight");
        assert_eq!(names.last().unwrap(), "head.1.bias");
        let unique: alloc::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(m.dims(), EstimatorDims::new(5));
    }

    #[test]
    fn block_gradients_match_central_differences() {
        use crate::diff::gradcheck::{random_projection, random_tensor};
        // instances with a ReLU input within reach of the step are skipped
        let (mut mlps, mut attns) = (0, 0);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mlp = Mlp::init(&mut rng, &[3, 5, 2]).unwrap();
            let x = vec![random_tensor(&mut rng, &[4, 3], 1.0)];
            let f = |t: &mut Tape, b: &MlpVars, v: &[Var]| {
                let y = b.forward(t, v[0]).unwrap();
                random_projection(t, y, seed)
            };
            if relu_margin_of(&mlp, &x, f) > 1e-2 && mlps < 4 {
                let e = check_module_gradients(&mlp, &x, f);
                assert!(e < 1e-2, "mlp seed {seed}: {e}");
                mlps += 1;
            }
            if attns < 4 {
                let attn = CrossAttention::init(&mut rng, 3, 2, 4);
                let q = random_tensor(&mut rng, &[2, 3, 3], 1.0);
                let kv = random_tensor(&mut rng, &[2, 2, 2], 1.0);
                let e = check_module_gradients(&attn, &[q, kv], |t, b, v| {
                    let y = b.forward(t, v[0], v[1]).unwrap();
                    random_projection(t, y, seed)
                });
                assert!(e < 1e-2, "attention seed {seed}: {e}");
                attns += 1;
            }
        }
        assert_eq!((mlps, attns), (4, 4));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut l = Linear::zeros(3, 3);
        for i in 0..3 {
            l.weight.data_mut()[i * 3 + i] = 1.0;
        }
        let mlp = Mlp::from_layers(vec![l]).unwrap();
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5]).unwrap();
        assert_eq!(mlp_forward(&mlp, &x).unwrap().data(), x.data());
    }

    #[test]
    fn zero_weights_emit_bias() {
        let mut l = Linear::zeros(3, 2);
        l.bias.data_mut().copy_from_slice(&[0.25, -4.0]);
        let mlp = Mlp::from_layers(vec![l]).unwrap();
        let x = Tensor::new(&[1, 3], vec![9.0, 8.0, 7.0]).unwrap();
        assert_eq!(mlp_forward(&mlp, &x).unwrap().data(), &[0.25, -4.0]);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::init(&mut rng, &[4, 8, 2]).unwrap();
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(mlp_forward(&mlp, &x), Err(Error::Shape { .. })));
        assert!(Mlp::from_layers(vec![Linear::zeros(3, 4), Linear::zeros(5, 1)]).is_err());
    }

    #[allow(clippy::needless_range_loop)]
    #[test]
    fn single_key_attention_ignores_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = CrossAttention::init(&mut rng, 3, 3, 4);
        let kv = Tensor::new(&[1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let q1 = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let q2 = Tensor::new(&[2, 3], vec![-7.0, 0.1, 0.0, 5.0, 5.0, 5.0]).unwrap();
        let a = cross_attention(&p, &q1, &kv).unwrap();
        let b = cross_attention(&p, &q2, &kv).unwrap();
        // (v·W_v)·W_o for every query row
        let mut expect = vec![0.0f32; 4];
        for j in 0..4 {
            let vw: Vec<f32> = (0..4)
                .map(|m| (0..3).map(|i| kv.data()[i] * p.wv.data()[i * 4 + m]).sum())
                .collect();
            expect[j] = (0..4).map(|m| vw[m] * p.wo.data()[m * 4 + j]).sum();
        }
        for row in a.data().chunks(4).chain(b.data().chunks(4)) {
            for (x, y) in row.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn duplicated_key_matches_single_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = CrossAttention::init(&mut rng, 3, 2, 4);
        let q = Tensor::new(&[2, 3], vec![1.0, 0.5, -0.5, 0.0, 2.0, 1.0]).unwrap();
        let one = Tensor::new(&[1, 2], vec![0.3, -0.8]).unwrap();
        let two = Tensor::new(&[2, 2], vec![0.3, -0.8, 0.3, -0.8]).unwrap();
        let a = cross_attention(&p, &q, &one).unwrap();
        let b = cross_attention(&p, &q, &two).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_output_in_convex_hull_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = CrossAttention::init(&mut rng, 3, 3, 3);
        p.wo = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let q = Tensor::new(&[4, 3], (0..12).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let kv = Tensor::new(&[5, 3], (0..15).map(|i| (i as f32 * 0.91).cos()).collect()).unwrap();
        let out = cross_attention(&p, &q, &kv).unwrap();
        // projected values v_j W_v
        let vals: Vec<Vec<f32>> = kv
            .data()
            .chunks(3)
            .map(|row| {
                (0..3)
                    .map(|m| (0..3).map(|i| row[i] * p.wv.data()[i * 3 + m]).sum())
                    .collect()
            })
            .collect();
        for row in out.data().chunks(3) {
            for m in 0..3 {
                let lo = vals.iter().map(|v| v[m]).fold(f32::INFINITY, f32::min);
                let hi = vals.iter().map(|v| v[m]).fold(f32::NEG_INFINITY, f32::max);
                assert!(row[m] >= lo - 1e-5 && row[m] <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn empty_token_sets_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = CrossAttention::init(&mut rng, 3, 3, 4);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let q = tape.constant(&Tensor::zeros(&[1, 2, 3]));
        let kv = tape.constant(&Tensor::zeros(&[2, 2, 3]));
        assert!(vars.forward(&mut tape, q, kv).is_err());
    }

    #[test]
    fn zero_estimator_predicts_forward_gaze() {
        let est = GazeEstimator::zeros(EstimatorDims::new(5)).unwrap();
        let preds = est.predict(&[1.0; 15]).unwrap();
        assert_eq!(preds.len(), 3);
        assert!(preds.iter().all(|g| *g == SphericalGaze::new(0.0, 0.0)));
    }

    #[test]
    fn estimator_is_row_wise() {
        let est = GazeEstimator::init(3, EstimatorDims::new(4)).unwrap();
        let rows: Vec<f32> = (0..12).map(|i| (i as f32 * 0.3).sin()).collect();
        let preds = est.predict(&rows).unwrap();
        let mut swapped = rows[4..8].to_vec();
        swapped.extend_from_slice(&rows[0..4]);
        swapped.extend_from_slice(&rows[8..12]);
        let p2 = est.predict(&swapped).unwrap();
        assert_eq!(preds[0], p2[1]);
        assert_eq!(preds[1], p2[0]);
        assert_eq!(preds[2], p2[2]);
        let single = est.predict(&rows[8..12]).unwrap();
        assert_eq!(single[0], preds[2]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let dims = EstimatorDims::new(24);
        let a = GazeEstimator::init(11, dims).unwrap();
        let b = GazeEstimator::init(11, dims).unwrap();
        let c = GazeEstimator::init(12, dims).unwrap();
        assert_eq!(a, b);
        assert_ne!(param_hash(&a), param_hash(&c));
        for layer in a.encoder.layers.iter().chain(&a.head.layers) {
            let bound = xavier_bound(layer.in_width(), layer.out_width());
            assert!(layer.weight.data().iter().all(|w| w.abs() <= bound));
            assert!(layer.bias.data().iter().all(|b| *b == 0.0));
        }
    }
}
