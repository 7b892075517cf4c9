//! Decoder backbones mapping a `C' × T` epoch to two logits (target,
//! distractor), with hand-written backward passes.
//!
//! All backbones work on batches laid out as `B × C' × T`. A forward pass
//! returns the logits plus an opaque cache; [`backward`] turns the cache and
//! the logit gradient into parameter gradients (and optionally the input
//! gradient, which is how the embedder is trained).

mod bn;
mod checkpoint;
pub mod dmu;
pub mod eegnet;
pub mod lstm;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{EmbedderKind, EmbedderParams, FusedEpoch, EMBED_DIM, PROFILE_BITS};
use crate::dataset::TrialEpoch;
use crate::error::{Error, Result};
use crate::rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[serde(rename = "eegnet")]
    EegNet,
    Lstm,
    Dmu,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::EegNet, Backbone::Lstm, Backbone::Dmu];

    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::EegNet => "eegnet",
            Backbone::Lstm => "lstm",
            Backbone::Dmu => "dmu",
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eegnet" => Ok(Backbone::EegNet),
            "lstm" => Ok(Backbone::Lstm),
            "dmu" => Ok(Backbone::Dmu),
            other => Err(Error::Config(format!("unknown backbone {other:?} (eegnet, lstm, dmu)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EegNetSpec {
    pub f1: usize,
    pub depth_mult: usize,
    pub f2: usize,
    pub temporal_kernel: usize,
    pub separable_kernel: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub dropout: f64,
}

impl Default for EegNetSpec {
    fn default() -> Self {
        EegNetSpec {
            f1: 16,
            depth_mult: 2,
            f2: 64,
            temporal_kernel: 32,
            separable_kernel: 16,
            pool1: 4,
            pool2: 8,
            dropout: 0.25,
        }
    }
}

impl EegNetSpec {
    pub fn maps(&self) -> usize {
        self.f1 * self.depth_mult
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: Backbone,
    pub use_ids: bool,
    /// EEG rows of the input; the fused input adds 16 embedding rows.
    pub eeg_channels: usize,
    pub samples: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub eegnet: EegNetSpec,
    #[serde(default = "default_delays")]
    pub dmu_delays: usize,
    #[serde(default)]
    pub embedder: EmbedderKind,
}

fn default_hidden() -> usize {
    64
}

fn default_delays() -> usize {
    20
}

impl ModelSpec {
    pub fn new(backbone: Backbone, eeg_channels: usize, use_ids: bool) -> Self {
        ModelSpec {
            backbone,
            use_ids,
            eeg_channels,
            samples: 77,
            hidden: default_hidden(),
            eegnet: EegNetSpec::default(),
            dmu_delays: default_delays(),
            embedder: EmbedderKind::Affine,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.eeg_channels + if self.use_ids { EMBED_DIM } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.eeg_channels == 0 {
            errs.push("eeg_channels must be >= 1".to_string());
        }
        if self.samples == 0 {
            errs.push("samples must be >= 1".to_string());
        }
        match self.backbone {
            Backbone::EegNet => {
                let e = &self.eegnet;
                if [
                    e.f1,
                    e.depth_mult,
                    e.f2,
                    e.temporal_kernel,
                    e.separable_kernel,
                    e.pool1,
                    e.pool2,
                ]
                .contains(&0)
                {
                    errs.push("eegnet sizes must all be >= 1".to_string());
                }
                if !(0.0..1.0).contains(&e.dropout) {
                    errs.push(format!("eegnet dropout {} outside [0, 1)", e.dropout));
                }
                if e.pool1 * e.pool2 > self.samples {
                    errs.push(format!(
                        "samples = {} too short for pooling {}x{}",
                        self.samples, e.pool1, e.pool2
                    ));
                }
            }
            Backbone::Lstm | Backbone::Dmu => {
                if self.hidden == 0 {
                    errs.push("hidden must be >= 1".to_string());
                }
                if self.backbone == Backbone::Dmu && self.dmu_delays == 0 {
                    errs.push("dmu_delays must be >= 1".to_string());
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Architecture knobs that do not depend on the data; combined with the
/// backbone, the ID switch and the input size into a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    pub hidden: usize,
    pub eegnet: EegNetSpec,
    pub dmu_delays: usize,
    pub embedder: EmbedderKind,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            hidden: default_hidden(),
            eegnet: EegNetSpec::default(),
            dmu_delays: default_delays(),
            embedder: EmbedderKind::Affine,
        }
    }
}

impl ModelOptions {
    pub fn spec(&self, backbone: Backbone, use_ids: bool, eeg_channels: usize, samples: usize) -> ModelSpec {
        ModelSpec {
            backbone,
            use_ids,
            eeg_channels,
            samples,
            hidden: self.hidden,
            eegnet: self.eegnet.clone(),
            dmu_delays: self.dmu_delays,
            embedder: self.embedder,
        }
    }
}

/// Forward-pass behaviour of the stochastic and batch-dependent layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout.
    Train,
    /// Running statistics, no dropout; the gradient treats the statistics
    /// as constants.
    Eval,
    /// Batch statistics without dropout (deterministic training pass).
    BatchStats,
}

impl Mode {
    fn batch_stats(self) -> bool {
        matches!(self, Mode::Train | Mode::BatchStats)
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayView2::from_shape((r, c), &self.data).expect("tensor shape")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayViewMut2::from_shape((r, c), &mut self.data).expect("tensor shape")
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape[..] {
            [r, c] => (r, c),
            [n] => (1, n),
            _ => panic!("tensor of rank {} viewed as matrix", self.shape.len()),
        }
    }
}

pub type ParamSet = BTreeMap<String, Tensor>;

pub(crate) fn zeros_like(set: &ParamSet) -> ParamSet {
    set.iter().map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape))).collect()
}

/// Backbone weights (plus embedder tensors under `embed.*` when
/// `spec.use_ids` is set) and the batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub buffers: ParamSet,
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub(crate) fn p(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub(crate) fn buf(&self, name: &str) -> &Tensor {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    pub fn embedder(&self) -> Option<EmbedderParams> {
        if !self.spec.use_ids {
            return None;
        }
        Some(match self.spec.embedder {
            EmbedderKind::Affine => EmbedderParams::Affine {
                weight: self.p("embed.weight").view2().to_owned(),
                bias: Array1::from(self.p("embed.bias").data.clone()),
            },
            EmbedderKind::Lookup => EmbedderParams::Lookup {
                table: self.p("embed.table").view2().to_owned(),
            },
        })
    }

    /// Checks that every tensor has the shape its `ModelSpec` implies and is finite.
    pub fn check(&self) -> Result<()> {
        let reference = init_params(&self.spec, 0)?;
        for (set, want, what) in [
            (&self.params, &reference.params, "parameter"),
            (&self.buffers, &reference.buffers, "buffer"),
        ] {
            if set.len() != want.len() || set.keys().ne(want.keys()) {
                return Err(Error::Shape(format!(
                    "{what} names {:?} do not match spec (expected {:?})",
                    set.keys().collect::<Vec<_>>(),
                    want.keys().collect::<Vec<_>>()
                )));
            }
            for (name, t) in set {
                if t.shape != want[name].shape || t.data.len() != t.shape.iter().product::<usize>() {
                    return Err(Error::Shape(format!(
                        "{what} {name} has shape {:?}, expected {:?}",
                        t.shape, want[name].shape
                    )));
                }
                if t.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("{what} {name}")));
                }
            }
        }
        Ok(())
    }

    /// Folds the batch statistics of a training pass into the running
    /// averages (`running = 0.9 * running + 0.1 * batch`).
    pub fn update_running_stats(&mut self, pass: &Pass) {
        if let Cache::EegNet(cache) = &pass.cache {
            for (layer, bn) in cache.bn_layers() {
                if !bn.batch_stats {
                    continue;
                }
                for (suffix, batch) in [("running_mean", &bn.mean), ("running_var", &bn.var_unbiased)] {
                    let buf = self
                        .buffers
                        .get_mut(&format!("{layer}.{suffix}"))
                        .expect("batch-norm buffer");
                    for (r, b) in buf.data.iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                }
            }
        }
    }
}

pub(crate) const BN_MOMENTUM: f64 = 0.9;
pub(crate) const BN_EPS: f64 = 1e-5;

/// Tensor of `rows × (eeg_cols + id_cols)` drawn uniformly in ±bound. The EEG
/// columns and the ID columns come from separate streams, so a baseline and
/// an ID-conditioned model built from the same seed agree on every shared
/// entry.
fn uniform_split(seed: u64, name: &str, rows: usize, eeg_cols: usize, id_cols: usize, bound: f64) -> Tensor {
    let mut eeg = rng::named(seed, name);
    let mut ids = rng::named(seed, &format!("{name}#ids"));
    let eeg_part: Vec<f64> = (0..rows * eeg_cols).map(|_| eeg.random_range(-bound..bound)).collect();
    let id_part: Vec<f64> = (0..rows * id_cols).map(|_| ids.random_range(-bound..bound)).collect();
    let cols = eeg_cols + id_cols;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        data.extend_from_slice(&eeg_part[r * eeg_cols..(r + 1) * eeg_cols]);
        data.extend_from_slice(&id_part[r * id_cols..(r + 1) * id_cols]);
    }
    Tensor {
        shape: vec![rows, cols],
        data,
    }
}

fn uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut r = rng::named(seed, name);
    Tensor {
        shape: shape.to_vec(),
        data: (0..shape.iter().product::<usize>())
            .map(|_| r.random_range(-bound..bound))
            .collect(),
    }
}

/// Uniform fan-in scaled weights, zero biases, unit batch-norm scales, LSTM
/// forget-gate bias 1. Weights reading the input channels use the EEG
/// channel count as fan-in.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let c = spec.eeg_channels;
    let ids = if spec.use_ids { EMBED_DIM } else { 0 };
    let input_bound = 1.0 / (c as f64).sqrt();
    let mut params = ParamSet::new();
    let mut buffers = ParamSet::new();
    let mut put = |name: &str, t: Tensor| {
        params.insert(name.to_string(), t);
    };
    match spec.backbone {
        Backbone::EegNet => {
            let e = &spec.eegnet;
            let maps = e.maps();
            let t2 = spec.samples / e.pool1 / e.pool2;
            put(
                "conv1.weight",
                uniform(seed, "conv1.weight", &[e.f1, e.temporal_kernel], e.temporal_kernel),
            );
            put(
                "depthwise.weight",
                uniform_split(seed, "depthwise.weight", maps, c, ids, input_bound),
            );
            put(
                "separable.depthwise",
                uniform(
                    seed,
                    "separable.depthwise",
                    &[maps, e.separable_kernel],
                    e.separable_kernel,
                ),
            );
            put(
                "separable.pointwise",
                uniform(seed, "separable.pointwise", &[e.f2, maps], maps),
            );
            put(
                "dense.weight",
                uniform(seed, "dense.weight", &[2, e.f2 * t2], e.f2 * t2),
            );
            put("dense.bias", Tensor::zeros(&[2]));
            for (layer, n) in [("bn1", e.f1), ("bn2", maps), ("bn3", e.f2)] {
                put(&format!("{layer}.gamma"), Tensor::filled(&[n], 1.0));
                put(&format!("{layer}.beta"), Tensor::zeros(&[n]));
                buffers.insert(format!("{layer}.running_mean"), Tensor::zeros(&[n]));
                buffers.insert(format!("{layer}.running_var"), Tensor::filled(&[n], 1.0));
            }
        }
        Backbone::Lstm => {
            let h = spec.hidden;
            put(
                "lstm.w_ih",
                uniform_split(seed, "lstm.w_ih", 4 * h, c, ids, input_bound),
            );
            put("lstm.w_hh", uniform(seed, "lstm.w_hh", &[4 * h, h], h));
            let mut bias = Tensor::zeros(&[4 * h]);
            bias.data[h..2 * h].fill(1.0);
            put("lstm.bias", bias);
            put("dense.weight", uniform(seed, "dense.weight", &[2, h], h));
            put("dense.bias", Tensor::zeros(&[2]));
        }
        Backbone::Dmu => {
            let h = spec.hidden;
            let hd = h * spec.dmu_delays;
            put("dmu.w_g", uniform_split(seed, "dmu.w_g", hd, c, ids, input_bound));
            put("dmu.u_g", uniform(seed, "dmu.u_g", &[hd, h], h));
            put("dmu.b_g", Tensor::zeros(&[hd]));
            for gate in ["z", "c"] {
                put(
                    &format!("dmu.w_{gate}"),
                    uniform_split(seed, &format!("dmu.w_{gate}"), h, c, ids, input_bound),
                );
                put(
                    &format!("dmu.u_{gate}"),
                    uniform(seed, &format!("dmu.u_{gate}"), &[h, h], h),
                );
                put(&format!("dmu.b_{gate}"), Tensor::zeros(&[h]));
            }
            put("dense.weight", uniform(seed, "dense.weight", &[2, h], h));
            put("dense.bias", Tensor::zeros(&[2]));
        }
    }
    if spec.use_ids {
        let mut r = rng::named(seed, "embed");
        match EmbedderParams::init(spec.embedder, &mut r) {
            EmbedderParams::Affine { weight, bias } => {
                put(
                    "embed.weight",
                    Tensor {
                        shape: vec![EMBED_DIM, PROFILE_BITS],
                        data: weight.iter().copied().collect(),
                    },
                );
                put(
                    "embed.bias",
                    Tensor {
                        shape: vec![EMBED_DIM],
                        data: bias.to_vec(),
                    },
                );
            }
            EmbedderParams::Lookup { table } => put(
                "embed.table",
                Tensor {
                    shape: vec![16, EMBED_DIM],
                    data: table.iter().copied().collect(),
                },
            ),
        }
    }
    Ok(ModelParams {
        spec: spec.clone(),
        params,
        buffers,
    })
}

// One cache per forward pass, so the size gap between variants costs nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    EegNet(eegnet::Cache),
    Lstm(lstm::Cache),
    Dmu(dmu::Cache),
}

/// Result of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Pass {
    /// `B × 2`.
    pub logits: Array2<f64>,
    pub(crate) cache: Cache,
}

pub struct Gradients {
    pub params: ParamSet,
    /// `B × C' × T`, present when requested.
    pub input: Option<Array3<f64>>,
}

pub(crate) fn grad<'a>(grads: &'a mut ParamSet, name: &str) -> &'a mut [f64] {
    &mut grads.get_mut(name).expect("gradient slot").data
}

pub(crate) fn add<'a>(dst: &mut [f64], src: impl IntoIterator<Item = &'a f64>) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn check_finite(layer: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activations of layer {layer}")))
    }
}

/// Batched forward pass over `B × C' × T` inputs. `rng` drives dropout in
/// [`Mode::Train`] and is untouched otherwise.
pub fn forward_batch(model: &ModelParams, x: ArrayView3<'_, f64>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Pass> {
    let spec = &model.spec;
    let (_, c, t) = x.dim();
    if c != spec.input_channels() || t != spec.samples {
        return Err(Error::Shape(format!(
            "{} input is {c}x{t}, model expects {}x{}",
            spec.backbone,
            spec.input_channels(),
            spec.samples
        )));
    }
    if x.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let x = x.as_standard_layout();
    let (logits, cache) = match spec.backbone {
        Backbone::EegNet => {
            let (l, c) = eegnet::forward(model, x.view(), mode, rng)?;
            (l, Cache::EegNet(c))
        }
        Backbone::Lstm => {
            let (l, c) = lstm::forward(model, x.view())?;
            (l, Cache::Lstm(c))
        }
        Backbone::Dmu => {
            let (l, c) = dmu::forward(model, x.view())?;
            (l, Cache::Dmu(c))
        }
    };
    check_finite("output", logits.as_slice().expect("contiguous"))?;
    Ok(Pass { logits, cache })
}

/// Gradients of `sum(dlogits * logits)` with respect to the backbone
/// parameters (embedder entries are left at zero) and optionally the input.
pub fn backward(model: &ModelParams, pass: &Pass, dlogits: ArrayView2<'_, f64>, want_input: bool) -> Gradients {
    let mut grads = zeros_like(&model.params);
    let input = match &pass.cache {
        Cache::EegNet(c) => eegnet::backward(model, c, dlogits, want_input, &mut grads),
        Cache::Lstm(c) => lstm::backward(model, c, dlogits, want_input, &mut grads),
        Cache::Dmu(c) => dmu::backward(model, c, dlogits, want_input, &mut grads),
    };
    Gradients { params: grads, input }
}

/// Input to the single-epoch dispatcher.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Plain(&'a TrialEpoch),
    Fused(&'a FusedEpoch),
}

/// Eval-mode logits for one epoch. Plain epochs require a baseline spec and
/// fused epochs an ID-conditioned one.
pub fn forward(model: &ModelParams, input: ModelInput<'_>) -> Result<[f64; 2]> {
    let data = match (input, model.spec.use_ids) {
        (ModelInput::Plain(ep), false) => &ep.data,
        (ModelInput::Fused(ep), true) => &ep.data,
        (ModelInput::Plain(_), true) => {
            return Err(Error::Shape("model uses IDs but received a plain epoch".into()));
        }
        (ModelInput::Fused(_), false) => {
            return Err(Error::Shape("baseline model received a fused epoch".into()));
        }
    };
    let (c, t) = data.dim();
    let x = data
        .view()
        .into_shape_with_order((1, c, t))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mut unused = rng::stream(0, 0);
    let pass = forward_batch(model, x, Mode::Eval, &mut unused)?;
    Ok([pass.logits[[0, 0]], pass.logits[[0, 1]]])
}

/// Numerically stable softmax of a logit pair.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = labels.len();
    assert_eq!(logits.nrows(), b);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += m + z.ln() - row[y];
        for k in 0..row.len() {
            grad[[i, k]] = ((row[k] - m).exp() / z - f64::from(u8::from(k == y))) / b as f64;
        }
    }
    (loss / b as f64, grad)
}

/// Logistic sigmoid.
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
