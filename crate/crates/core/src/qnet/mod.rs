//! The Q-network: two convolutional extractors, a transformer fusion block
//! over image and coordinate tokens, a transformer over the four-step history,
//! and a linear head with one output per action.
//!
//! Forward and backward passes are hand-written and generic over `f32` and
//! `f64`; [`grad_check`] compares them against central differences.

mod checkpoint;
mod layers;
mod model;
mod optim;
mod plan;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::Float;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Observation;
use crate::spatial::{BoxAction, Raster};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Metadata};
pub use optim::{Optimizer, OptimizerKind};
pub use plan::LayoutEntry;

use plan::{Plan, HISTORY, N_ACTIONS};

#[derive(Debug, Error)]
pub enum QNetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("update produced a non-finite parameter at index {0}")]
    NonFiniteUpdate(usize),
    #[error("parameter layouts differ")]
    LayoutMismatch,
    #[error("gradient check needs f64 parameters")]
    PrecisionUnsupported,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QNetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Floating-point type the network can run in.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Send + Sync + Debug + Default + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTES: usize = 4;
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTES: usize = 8;
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffm_layers: usize,
    pub agent_layers: usize,
    pub conv_channels: Vec<usize>,
    pub precision: Precision,
    /// Feedforward width as a multiple of `d_model`.
    pub ff_mult: usize,
    pub bg_h: usize,
    pub bg_w: usize,
    pub fg_h: usize,
    pub fg_w: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            ffm_layers: 1,
            agent_layers: 1,
            conv_channels: vec![4, 8],
            precision: Precision::F32,
            ff_mult: 2,
            bg_h: 32,
            bg_w: 32,
            fg_h: 16,
            fg_w: 48,
        }
    }
}

impl NetConfig {
    /// The smallest useful network; used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_heads: 1,
            conv_channels: vec![2],
            precision: Precision::F64,
            bg_h: 4,
            bg_w: 4,
            fg_h: 4,
            fg_w: 8,
            ..Self::default()
        }
    }

    pub fn d_ff(&self) -> usize {
        self.ff_mult * self.d_model
    }

    pub fn obs_shape(&self) -> crate::env::ObsShape {
        crate::env::ObsShape {
            bg_h: self.bg_h,
            bg_w: self.bg_w,
            fg_h: self.fg_h,
            fg_w: self.fg_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QNetError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.ff_mult == 0 {
            return bad("d_model, n_heads and ff_mult must be >= 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("n_heads {} does not divide d_model {}", self.n_heads, self.d_model));
        }
        if self.ffm_layers == 0 || self.agent_layers == 0 {
            return bad("ffm_layers and agent_layers must be >= 1".into());
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be a nonempty list of positive counts".into());
        }
        let div = 1usize << self.conv_channels.len();
        for (name, v) in [
            ("bg_h", self.bg_h),
            ("bg_w", self.bg_w),
            ("fg_h", self.fg_h),
            ("fg_w", self.fg_w),
        ] {
            if v == 0 || v % div != 0 {
                return bad(format!("{name} = {v} must be a positive multiple of {div}"));
            }
        }
        Ok(())
    }
}

/// Row-major values with a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(QNetError::ShapeMismatch(format!(
                "shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    fn from_scalars<T: Scalar>(shape: Vec<usize>, v: &[T]) -> Self {
        Self {
            shape,
            values: v.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// A flat parameter (or gradient) vector in one of the two precisions.
#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Params {
    pub fn len(&self) -> usize {
        match self {
            Params::F32(v) => v.len(),
            Params::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self {
            Params::F32(_) => Precision::F32,
            Params::F64(_) => Precision::F64,
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            Params::F32(v) => v[i] as f64,
            Params::F64(v) => v[i],
        }
    }

    pub fn set(&mut self, i: usize, x: f64) {
        match self {
            Params::F32(v) => v[i] = x as f32,
            Params::F64(v) => v[i] = x,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    fn zeros_like(&self) -> Params {
        match self {
            Params::F32(v) => Params::F32(vec![0.0; v.len()]),
            Params::F64(v) => Params::F64(vec![0.0; v.len()]),
        }
    }
}

/// Which image extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Background,
    Foreground,
}

pub type History = [Arc<Observation>; HISTORY];

/// Online Q-network `θ`.
#[derive(Debug, Clone)]
pub struct QNetwork {
    config: NetConfig,
    plan: Arc<Plan>,
    params: Params,
}

/// Frozen copy `θ⁻` used for TD targets. Only [`sync_target`] changes it.
#[derive(Debug, Clone)]
pub struct TargetNetwork {
    net: QNetwork,
}

impl TargetNetwork {
    pub fn from_online(net: &QNetwork) -> Self {
        Self { net: net.clone() }
    }

    pub fn network(&self) -> &QNetwork {
        &self.net
    }
}

macro_rules! dispatch {
    ($net:expr, $p:ident => $body:expr) => {
        match &$net.params {
            Params::F32($p) => $body,
            Params::F64($p) => $body,
        }
    };
}

impl QNetwork {
    /// Fresh network with seeded initialization: conv and linear weights
    /// uniform in ±sqrt(1/fan_in), biases zero, layer norms identity, small
    /// embeddings, and a zero output head.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let plan = Arc::new(Plan::new(&config));
        let params = match config.precision {
            Precision::F32 => Params::F32(plan.init_params(seed)),
            Precision::F64 => Params::F64(plan.init_params(seed)),
        };
        Ok(Self {
            config,
            plan,
            params,
        })
    }

    pub fn from_params(config: NetConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let plan = Arc::new(Plan::new(&config));
        if params.len() != plan.total || params.precision() != config.precision {
            return Err(QNetError::LayoutMismatch);
        }
        Ok(Self {
            config,
            plan,
            params,
        })
    }

    /// Parameter count implied by a config.
    pub fn param_count(config: &NetConfig) -> Result<usize> {
        config.validate()?;
        Ok(Plan::new(config).total)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.plan.layout
    }

    pub fn layout_entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.plan.layout.iter().find(|e| e.name == name)
    }

    /// Overwrites one named tensor.
    pub fn set_tensor(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let e = self
            .layout_entry(name)
            .ok_or_else(|| QNetError::InvalidArgument(format!("no tensor named {name}")))?
            .clone();
        if values.len() != e.len() {
            return Err(QNetError::ShapeMismatch(format!(
                "{name} holds {} values, got {}",
                e.len(),
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            self.params.set(e.offset + i, v);
        }
        Ok(())
    }

    pub fn num_tokens(&self, which: Which) -> usize {
        match which {
            Which::Background => self.plan.bg.tokens,
            Which::Foreground => self.plan.fg.tokens,
        }
    }

    fn check_raster(&self, r: &Raster, which: Which) -> Result<()> {
        let (h, w) = match which {
            Which::Background => (self.config.bg_h, self.config.bg_w),
            Which::Foreground => (self.config.fg_h, self.config.fg_w),
        };
        if (r.height(), r.width()) != (h, w) {
            return Err(QNetError::ShapeMismatch(format!(
                "{which:?} raster is {}x{} (HxW), network expects {h}x{w}",
                r.height(),
                r.width()
            )));
        }
        Ok(())
    }

    fn check_observation(&self, o: &Observation) -> Result<()> {
        self.check_raster(&o.background, Which::Background)?;
        self.check_raster(&o.foreground, Which::Foreground)
    }

    fn same_layout(&self, other: &QNetwork) -> bool {
        self.config == other.config && self.params.len() == other.params.len()
    }

    /// The 16 action values for a history.
    pub fn q_values(&self, history: &History) -> Result<[f64; N_ACTIONS]> {
        let refs = self.history_refs(history)?;
        Ok(dispatch!(self, p => {
            let (q, _) = model::state_forward(&self.plan, p, refs);
            q.map(|v| v.as_f64())
        }))
    }

    fn history_refs<'a>(&self, history: &'a History) -> Result<[&'a Observation; HISTORY]> {
        for o in history {
            self.check_observation(o)?;
        }
        Ok([&*history[0], &*history[1], &*history[2], &*history[3]])
    }

    /// Mean squared error `mean_j (y_j - Q(s_j, a_j))^2` at the current params.
    pub fn loss(&self, states: &[&History], actions: &[BoxAction], targets: &[f64]) -> Result<f64> {
        Ok(q_backward(self, states, actions, targets)?.0)
    }
}

/// Image to `[tokens, d_model]` features.
pub fn extract_features(img: &Raster, which: Which, net: &QNetwork) -> Result<Tensor> {
    net.check_raster(img, which)?;
    let plan = &net.plan;
    let e = match which {
        Which::Background => &plan.bg,
        Which::Foreground => &plan.fg,
    };
    Ok(dispatch!(net, p => {
        let (tok, _) = model::extract(plan, e, p, img);
        Tensor::from_scalars(vec![e.tokens, plan.d], &tok)
    }))
}

/// The coordinate token, `[1, d_model]`.
pub fn encode_coords(box_coords: &[f32; 8], net: &QNetwork) -> Tensor {
    dispatch!(net, p => {
        let (tok, _) = model::coord_token(&net.plan, p, box_coords);
        Tensor::from_scalars(vec![1, net.plan.d], &tok)
    })
}

/// One observation fused to `[1, d_model]`.
pub fn ffm_fuse(o: &Observation, net: &QNetwork) -> Result<Tensor> {
    net.check_observation(o)?;
    Ok(dispatch!(net, p => {
        let (f, _) = model::fuse_forward(&net.plan, p, o);
        Tensor::from_scalars(vec![1, net.plan.d], &f)
    }))
}

/// The 16 action values as a tensor.
pub fn q_forward(history: &History, net: &QNetwork) -> Result<Tensor> {
    let q = net.q_values(history)?;
    Tensor::new(vec![N_ACTIONS], q.to_vec())
}

/// Loss and its gradient with respect to every parameter.
pub fn q_backward(
    net: &QNetwork,
    states: &[&History],
    actions: &[BoxAction],
    targets: &[f64],
) -> Result<(f64, Params)> {
    if states.is_empty() {
        return Err(QNetError::InvalidArgument("empty batch".into()));
    }
    if states.len() != actions.len() || states.len() != targets.len() {
        return Err(QNetError::ShapeMismatch(format!(
            "{} states, {} actions, {} targets",
            states.len(),
            actions.len(),
            targets.len()
        )));
    }
    if let Some(y) = targets.iter().find(|y| !y.is_finite()) {
        return Err(QNetError::InvalidArgument(format!("non-finite target {y}")));
    }
    let refs = states
        .iter()
        .map(|h| net.history_refs(h))
        .collect::<Result<Vec<_>>>()?;
    let acts: Vec<usize> = actions.iter().map(|a| a.index()).collect();
    Ok(match &net.params {
        Params::F32(p) => {
            let (l, g) = model::batch_loss_grad(&net.plan, p, &refs, &acts, targets);
            (l, Params::F32(g))
        }
        Params::F64(p) => {
            let (l, g) = model::batch_loss_grad(&net.plan, p, &refs, &acts, targets);
            (l, Params::F64(g))
        }
    })
}

/// `θ <- θ - lr * grads`.
pub fn sgd_step(net: &mut QNetwork, grads: &Params, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(QNetError::InvalidArgument(format!("lr {lr} must be > 0")));
    }
    fn apply<T: Scalar>(p: &mut [T], g: &[T], lr: f64) -> Result<()> {
        let lr = T::of(lr);
        let mut next = p.to_vec();
        for (i, (v, &gi)) in next.iter_mut().zip(g).enumerate() {
            *v -= lr * gi;
            if !v.is_finite() {
                return Err(QNetError::NonFiniteUpdate(i));
            }
        }
        p.copy_from_slice(&next);
        Ok(())
    }
    match (&mut net.params, grads) {
        (Params::F32(p), Params::F32(g)) if p.len() == g.len() => apply(p, g, lr),
        (Params::F64(p), Params::F64(g)) if p.len() == g.len() => apply(p, g, lr),
        _ => Err(QNetError::LayoutMismatch),
    }
}

/// Copies the online parameters into the target.
pub fn sync_target(net: &QNetwork, target: &mut TargetNetwork) -> Result<()> {
    if !net.same_layout(&target.net) {
        return Err(QNetError::LayoutMismatch);
    }
    target.net.params.clone_from(&net.params);
    Ok(())
}

const GRAD_CHECK_SAMPLES: usize = 256;
const GRAD_CHECK_SEED: u64 = 0x6AD_C4EC;

/// Largest relative error between analytic and central-difference gradients
/// of the single-sample loss, over a random subset of parameters (all of
/// them if there are few). Every layout entry contributes at least one index.
pub fn grad_check(
    net: &QNetwork,
    state: &History,
    action: BoxAction,
    target: f64,
    eps: f64,
) -> Result<f64> {
    if !matches!(net.params, Params::F64(_)) {
        return Err(QNetError::PrecisionUnsupported);
    }
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(QNetError::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-4]")));
    }
    let states = [state];
    let (_, analytic) = q_backward(net, &states, &[action], &[target])?;
    let total = net.params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(GRAD_CHECK_SEED);
    let mut idx: Vec<usize> = if total <= GRAD_CHECK_SAMPLES {
        (0..total).collect()
    } else {
        sample(&mut rng, total, GRAD_CHECK_SAMPLES).into_vec()
    };
    for e in net.layout() {
        if !e.is_empty() {
            idx.push(e.offset + rand::Rng::gen_range(&mut rng, 0..e.len()));
        }
    }
    idx.sort_unstable();
    idx.dedup();

    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in idx {
        let orig = net.params.get(i);
        probe.params.set(i, orig + eps);
        let lp = probe.loss(&states, &[action], &[target])?;
        probe.params.set(i, orig - eps);
        let lm = probe.loss(&states, &[action], &[target])?;
        probe.params.set(i, orig);
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic.get(i);
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
