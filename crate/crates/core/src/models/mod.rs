//! The three architectures as pure functions of a [`ParamStore`] and a
//! batch of input rows.
//!
//! * `BaseDnn`: input -> hidden (ReLU) -> 2x4 visualization layer (ReLU)
//!   -> linear -> softmax over four risk states.
//! * `Qidnn`: the same deep trunk, with its four pre-softmax logits
//!   concatenated to the quadratic-interaction output and mixed by a final
//!   linear layer.
//! * `Mmoe`: shared experts mixed per objective by softmax gates, each
//!   mixture fed straight to its output layer (sigmoid stroke head,
//!   softmax risk head).
//!
//! Weights are stored `in x out`, so a layer computes `x W + b` on row
//! batches.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, NamedArray, TrainingMeta, CHECKPOINT_FORMAT_VERSION};

pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseDnnSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub viz_dim: usize,
    pub num_classes: usize,
}

impl Default for BaseDnnSpec {
    fn default() -> Self {
        BaseDnnSpec {
            input_dim: 34,
            hidden_dim: 17,
            viz_dim: 8,
            num_classes: NUM_CLASSES,
        }
    }
}

impl BaseDnnSpec {
    pub fn with_input(input_dim: usize) -> Self {
        BaseDnnSpec {
            input_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("input and hidden widths must be positive".into()));
        }
        if self.viz_dim == 0 || !self.viz_dim.is_multiple_of(2) || self.num_classes != self.viz_dim / 2 {
            return Err(Error::Config(format!(
                "visualization width {} must be two coordinates per class ({} classes)",
                self.viz_dim, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.input_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.viz_dim
            + self.viz_dim
            + self.viz_dim * self.num_classes
            + self.num_classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QiMode {
    /// One scalar: the sum over all selected pairs.
    #[default]
    Summed,
    /// One output per selected pair.
    PerPair,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QiSpec {
    /// Positions within the model input that take part in interactions.
    pub selected: Vec<usize>,
    pub latent_len: usize,
    pub mode: QiMode,
}

impl QiSpec {
    pub fn new(selected: Vec<usize>) -> Self {
        QiSpec {
            selected,
            latent_len: 4,
            mode: QiMode::Summed,
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        let n = self.selected.len();
        if n < 2 || n > input_dim {
            return Err(Error::Config(format!(
                "interaction layer needs 2..={input_dim} selected features, got {n}"
            )));
        }
        if self.latent_len == 0 {
            return Err(Error::Config("latent length must be at least 1".into()));
        }
        let mut seen = self.selected.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != n || seen.iter().any(|&i| i >= input_dim) {
            return Err(Error::Config(format!(
                "selected features must be distinct indices below {input_dim}: {:?}",
                self.selected
            )));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        match self.mode {
            QiMode::Summed => 1,
            QiMode::PerPair => self.selected.len() * (self.selected.len() - 1) / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QidnnSpec {
    pub trunk: BaseDnnSpec,
    pub qi: QiSpec,
}

impl QidnnSpec {
    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        self.qi.validate(self.trunk.input_dim)
    }

    fn param_count_with_output(&self, out: usize) -> usize {
        self.trunk.param_count()
            + self.qi.selected.len() * self.qi.latent_len
            + (self.trunk.num_classes + self.qi.output_width()) * out
            + out
    }

    pub fn param_count(&self) -> usize {
        self.param_count_with_output(self.trunk.num_classes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertSpec {
    /// One ReLU hidden layer; its activations are the representation.
    Mlp { hidden: usize },
    /// A quadratic-interaction trunk whose final layer projects to `out_dim`.
    Qidnn { spec: QidnnSpec, out_dim: usize },
}

impl ExpertSpec {
    pub fn output_width(&self) -> usize {
        match self {
            ExpertSpec::Mlp { hidden } => *hidden,
            ExpertSpec::Qidnn { out_dim, .. } => *out_dim,
        }
    }

    fn param_count(&self, input_dim: usize) -> usize {
        match self {
            ExpertSpec::Mlp { hidden } => input_dim * hidden + hidden,
            ExpertSpec::Qidnn { spec, out_dim } => spec.param_count_with_output(*out_dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmoeSpec {
    pub input_dim: usize,
    pub experts: Vec<ExpertSpec>,
    /// One gate per objective: stroke occurrence, then risk state.
    pub num_gates: usize,
    pub stroke_outputs: usize,
    pub risk_outputs: usize,
}

impl MmoeSpec {
    /// Expert1 with one 11-wide hidden layer, Expert2 a quadratic-interaction
    /// trunk over `selected` projected to the same width.
    pub fn standard(input_dim: usize, selected: Vec<usize>) -> Self {
        let width = 11;
        MmoeSpec {
            input_dim,
            experts: vec![
                ExpertSpec::Mlp { hidden: width },
                ExpertSpec::Qidnn {
                    spec: QidnnSpec {
                        trunk: BaseDnnSpec::with_input(input_dim),
                        qi: QiSpec::new(selected),
                    },
                    out_dim: width,
                },
            ],
            num_gates: 2,
            stroke_outputs: 1,
            risk_outputs: NUM_CLASSES,
        }
    }

    pub fn expert_width(&self) -> usize {
        self.experts.first().map(ExpertSpec::output_width).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::Config("mixture needs at least one expert".into()));
        }
        let width = self.expert_width();
        if width == 0 || self.experts.iter().any(|e| e.output_width() != width) {
            let widths: Vec<usize> = self.experts.iter().map(ExpertSpec::output_width).collect();
            return Err(Error::Config(format!("expert representation widths differ: {widths:?}")));
        }
        for e in &self.experts {
            if let ExpertSpec::Qidnn { spec, .. } = e {
                spec.validate()?;
                if spec.trunk.input_dim != self.input_dim {
                    return Err(Error::Config("expert trunk input width differs from the mixture input".into()));
                }
            }
        }
        if self.num_gates != 2 || self.stroke_outputs != 1 || self.risk_outputs != NUM_CLASSES {
            return Err(Error::Config(
                "mixture has exactly two objectives: one stroke output and four risk outputs".into(),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let experts: usize = self.experts.iter().map(|e| e.param_count(self.input_dim)).sum();
        let gates = self.num_gates * (self.input_dim * self.experts.len() + self.experts.len());
        let width = self.expert_width();
        let heads = width * self.stroke_outputs + self.stroke_outputs + width * self.risk_outputs + self.risk_outputs;
        experts + gates + heads
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    BaseDnn(BaseDnnSpec),
    Qidnn(QidnnSpec),
    Mmoe(MmoeSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    BaseDnn,
    Qidnn,
    Mmoe,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::BaseDnn => "base-dnn",
            ModelKind::Qidnn => "qidnn",
            ModelKind::Mmoe => "mmoe",
        }
    }
}

/// Architecture plus the schema columns that form its input, in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub features: Vec<usize>,
    pub arch: Architecture,
}

impl ModelSpec {
    pub fn base_dnn(features: Vec<usize>) -> Self {
        let d = features.len();
        ModelSpec {
            features,
            arch: Architecture::BaseDnn(BaseDnnSpec::with_input(d)),
        }
    }

    /// `selected` indexes into `features`.
    pub fn qidnn(features: Vec<usize>, selected: Vec<usize>) -> Self {
        let d = features.len();
        ModelSpec {
            features,
            arch: Architecture::Qidnn(QidnnSpec {
                trunk: BaseDnnSpec::with_input(d),
                qi: QiSpec::new(selected),
            }),
        }
    }

    pub fn mmoe(features: Vec<usize>, selected: Vec<usize>) -> Self {
        let d = features.len();
        ModelSpec {
            features,
            arch: Architecture::Mmoe(MmoeSpec::standard(d, selected)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self.arch {
            Architecture::BaseDnn(_) => ModelKind::BaseDnn,
            Architecture::Qidnn(_) => ModelKind::Qidnn,
            Architecture::Mmoe(_) => ModelKind::Mmoe,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.arch {
            Architecture::BaseDnn(s) => s.input_dim,
            Architecture::Qidnn(s) => s.trunk.input_dim,
            Architecture::Mmoe(s) => s.input_dim,
        }
    }

    pub fn has_stroke_head(&self) -> bool {
        matches!(self.arch, Architecture::Mmoe(_))
    }

    pub fn validate(&self) -> Result<()> {
        match &self.arch {
            Architecture::BaseDnn(s) => s.validate()?,
            Architecture::Qidnn(s) => s.validate()?,
            Architecture::Mmoe(s) => s.validate()?,
        }
        if self.features.len() != self.input_dim() {
            return Err(Error::Config(format!(
                "{} input columns listed for an input width of {}",
                self.features.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match &self.arch {
            Architecture::BaseDnn(s) => s.param_count(),
            Architecture::Qidnn(s) => s.param_count(),
            Architecture::Mmoe(s) => s.param_count(),
        }
    }
}

/// Half-width of the uniform draw for interaction latents under Glorot
/// init. Small latents start the quadratic term near zero.
pub const LATENT_INIT: f64 = 0.01;

/// How a fresh parameter set is drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Glorot-uniform weights and zero biases; output layers and gates zero
    /// when `zero_output` is set.
    Glorot { seed: u64, zero_output: bool },
    /// Every entry uniform in `(-scale, scale)`, biases included.
    Uniform { seed: u64, scale: f64 },
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Weight,
    Bias,
    OutputWeight,
    OutputBias,
    Latent,
}

struct Initializer {
    init: Init,
    rng: ChaCha8Rng,
}

impl Initializer {
    fn new(init: Init) -> Self {
        let seed = match init {
            Init::Glorot { seed, .. } | Init::Uniform { seed, .. } => seed,
            Init::Zeros => 0,
        };
        Initializer {
            init,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn add(&mut self, store: &mut ParamStore, name: String, shape: &[usize], role: Role) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match self.init {
            Init::Zeros => vec![0.0; n],
            Init::Uniform { scale, .. } => (0..n).map(|_| self.rng.random_range(-scale..scale)).collect(),
            Init::Glorot { zero_output, .. } => match role {
                Role::Bias | Role::OutputBias => vec![0.0; n],
                Role::OutputWeight if zero_output => vec![0.0; n],
                Role::Latent => (0..n).map(|_| self.rng.random_range(-LATENT_INIT..LATENT_INIT)).collect(),
                Role::Weight | Role::OutputWeight => {
                    let (fan_in, fan_out) = (shape[0], shape.get(1).copied().unwrap_or(1));
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| self.rng.random_range(-limit..limit)).collect()
                }
            },
        };
        store.insert(name, Tensor::new(shape.to_vec(), data)?)
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn build(
        init: &mut Initializer,
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        output: bool,
    ) -> Result<Self> {
        let (wr, br) = if output {
            (Role::OutputWeight, Role::OutputBias)
        } else {
            (Role::Weight, Role::Bias)
        };
        Ok(Dense {
            w: init.add(store, format!("{name}.w"), &[fan_in, fan_out], wr)?,
            b: init.add(store, format!("{name}.b"), &[fan_out], br)?,
        })
    }

    fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        let get = |suffix: &str| {
            store
                .id(&format!("{name}.{suffix}"))
                .ok_or_else(|| Error::Compat(format!("missing parameter {name}.{suffix}")))
        };
        Ok(Dense {
            w: get("w")?,
            b: get("b")?,
        })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }
}

fn build_trunk(init: &mut Initializer, store: &mut ParamStore, prefix: &str, spec: &BaseDnnSpec, out_is_head: bool) -> Result<()> {
    Dense::build(init, store, &format!("{prefix}hidden"), spec.input_dim, spec.hidden_dim, false)?;
    Dense::build(init, store, &format!("{prefix}viz"), spec.hidden_dim, spec.viz_dim, false)?;
    Dense::build(init, store, &format!("{prefix}out"), spec.viz_dim, spec.num_classes, out_is_head)?;
    Ok(())
}

fn build_qidnn(init: &mut Initializer, store: &mut ParamStore, prefix: &str, spec: &QidnnSpec, out_dim: usize, head: bool) -> Result<()> {
    build_trunk(init, store, prefix, &spec.trunk, false)?;
    init.add(
        store,
        format!("{prefix}qi.v"),
        &[spec.qi.selected.len(), spec.qi.latent_len],
        Role::Latent,
    )?;
    let concat = spec.trunk.num_classes + spec.qi.output_width();
    Dense::build(init, store, &format!("{prefix}final"), concat, out_dim, head)?;
    Ok(())
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `B x 4` pre-softmax risk-state logits.
    pub risk_logits: Var,
    /// `B x 1` pre-sigmoid stroke logit (mixture models only).
    pub stroke_logit: Option<Var>,
    /// `B x 8` visualization-layer activations (base model only).
    pub viz: Option<Var>,
    /// Per-objective `B x experts` gate weights (mixture models only).
    pub gates: Vec<Var>,
}

fn trunk_forward(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<(Var, Var)> {
    let hidden = Dense::lookup(store, &format!("{prefix}hidden"))?.apply(tape, store, x)?;
    let hidden = tape.relu(hidden);
    let viz = Dense::lookup(store, &format!("{prefix}viz"))?.apply(tape, store, hidden)?;
    let viz = tape.relu(viz);
    let logits = Dense::lookup(store, &format!("{prefix}out"))?.apply(tape, store, viz)?;
    Ok((logits, viz))
}

/// Quadratic-interaction output over the selected columns of `x`.
///
/// Summed mode evaluates `1/2 sum_l [(sum_i v_il x_i)^2 - sum_i v_il^2 x_i^2]`,
/// which equals `sum_{i<j} <V_i, V_j> x_i x_j` in O(nk).
fn qi_forward(tape: &mut Tape, store: &ParamStore, prefix: &str, qi: &QiSpec, x: &Tensor) -> Result<Var> {
    let (m, d) = x.dims();
    let n = qi.selected.len();
    let mut sel = Vec::with_capacity(m * n);
    for r in 0..m {
        let row = &x.data()[r * d..(r + 1) * d];
        sel.extend(qi.selected.iter().map(|&j| row[j]));
    }
    let v_id = store
        .id(&format!("{prefix}qi.v"))
        .ok_or_else(|| Error::Compat(format!("missing parameter {prefix}qi.v")))?;
    let v = tape.param(store, v_id);
    match qi.mode {
        QiMode::Summed => {
            let sq: Vec<f64> = sel.iter().map(|x| x * x).collect();
            let xs = tape.input(Tensor::matrix(m, n, sel)?);
            let xs2 = tape.input(Tensor::matrix(m, n, sq)?);
            let xv = tape.matmul(xs, v)?;
            let xv_sq = tape.mul(xv, xv)?;
            let v_sq = tape.mul(v, v)?;
            let x2v2 = tape.matmul(xs2, v_sq)?;
            let diff = tape.sub(xv_sq, x2v2)?;
            let total = tape.sum_cols(diff);
            Ok(tape.scale(total, 0.5))
        }
        QiMode::PerPair => {
            let xs = tape.input(Tensor::matrix(m, n, sel)?);
            tape.pair_products(xs, v)
        }
    }
}

/// The interaction output for `m x n` rows `x` and `n x k` latents, with
/// every column selected. One value per row (summed) or per pair.
pub fn interaction_output(latents: &Tensor, x: &Tensor, mode: QiMode) -> Result<Vec<f64>> {
    let (n, k) = latents.dims();
    if x.cols() != n {
        return Err(Error::shape("interaction_output", latents.shape(), x.shape()));
    }
    let mut store = ParamStore::new();
    store.insert("qi.v", latents.clone())?;
    let qi = QiSpec {
        selected: (0..n).collect(),
        latent_len: k,
        mode,
    };
    qi.validate(n)?;
    let mut tape = Tape::new();
    let y = qi_forward(&mut tape, &store, "", &qi, x)?;
    Ok(tape.value(y).data().to_vec())
}

fn qidnn_forward(tape: &mut Tape, store: &ParamStore, prefix: &str, spec: &QidnnSpec, xv: Var, x: &Tensor) -> Result<Var> {
    let (deep, _) = trunk_forward(tape, store, prefix, xv)?;
    let yqi = qi_forward(tape, store, prefix, &spec.qi, x)?;
    let joined = tape.concat(deep, yqi)?;
    Dense::lookup(store, &format!("{prefix}final"))?.apply(tape, store, joined)
}

/// Batched model outputs in plain vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Outputs {
    pub rows: usize,
    /// Row-major `rows x 4`.
    pub risk_logits: Vec<f64>,
    pub stroke_logits: Option<Vec<f64>>,
    pub viz: Option<Vec<f64>>,
}

impl Outputs {
    pub fn risk_logits_row(&self, r: usize) -> &[f64] {
        &self.risk_logits[r * NUM_CLASSES..(r + 1) * NUM_CLASSES]
    }

    pub fn risk_probs_row(&self, r: usize) -> Vec<f64> {
        softmax(self.risk_logits_row(r))
    }

    pub fn stroke_prob(&self, r: usize) -> Option<f64> {
        self.stroke_logits.as_ref().map(|s| sigmoid(s[r]))
    }

    /// Argmax of the risk logits, lowest index on ties.
    pub fn predicted_class(&self, r: usize) -> usize {
        argmax(self.risk_logits_row(r))
    }

    /// Number of scalar outputs per row that explanations can target:
    /// four risk logits, plus the stroke logit for mixture models.
    pub fn width(&self) -> usize {
        NUM_CLASSES + usize::from(self.stroke_logits.is_some())
    }

    /// Row `r` of the explainable outputs (risk logits, then stroke logit).
    pub fn target_row(&self, r: usize) -> Vec<f64> {
        let mut out = self.risk_logits_row(r).to_vec();
        if let Some(s) = &self.stroke_logits {
            out.push(s[r]);
        }
        out
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
}

impl Model {
    pub fn new(spec: ModelSpec, init: Init) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut ini = Initializer::new(init);
        match &spec.arch {
            Architecture::BaseDnn(s) => build_trunk(&mut ini, &mut store, "", s, true)?,
            Architecture::Qidnn(s) => build_qidnn(&mut ini, &mut store, "", s, s.trunk.num_classes, true)?,
            Architecture::Mmoe(s) => {
                let width = s.expert_width();
                for (e, expert) in s.experts.iter().enumerate() {
                    let prefix = format!("expert{}.", e + 1);
                    match expert {
                        ExpertSpec::Mlp { hidden } => {
                            Dense::build(&mut ini, &mut store, &format!("{prefix}hidden"), s.input_dim, *hidden, false)?;
                        }
                        ExpertSpec::Qidnn { spec, out_dim } => {
                            build_qidnn(&mut ini, &mut store, &prefix, spec, *out_dim, false)?;
                        }
                    }
                }
                for g in 0..s.num_gates {
                    Dense::build(&mut ini, &mut store, &format!("gate{}", g + 1), s.input_dim, s.experts.len(), true)?;
                }
                Dense::build(&mut ini, &mut store, "stroke_head", width, s.stroke_outputs, true)?;
                Dense::build(&mut ini, &mut store, "risk_head", width, s.risk_outputs, true)?;
            }
        }
        debug_assert_eq!(store.num_scalars(), spec.param_count());
        Ok(Model { spec, params: store })
    }

    /// Rebuilds a model from a spec and a full parameter set, checking names
    /// and shapes against what the spec implies.
    pub fn from_parts(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let template = Model::new(spec.clone(), Init::Zeros)?;
        if template.params.len() != params.len() {
            return Err(Error::Compat(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for p in template.params.iter() {
            let got = params
                .by_name(&p.name)
                .ok_or_else(|| Error::Compat(format!("missing parameter {}", p.name)))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Compat(format!(
                    "parameter {} has shape {:?}, spec implies {:?}",
                    p.name,
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    /// Picks the model's input columns out of full schema rows (row-major).
    pub fn select_inputs(&self, full_rows: &[f64], schema_len: usize) -> Vec<f64> {
        let rows = full_rows.len() / schema_len;
        let mut out = Vec::with_capacity(rows * self.input_dim());
        for r in 0..rows {
            let row = &full_rows[r * schema_len..(r + 1) * schema_len];
            out.extend(self.spec.features.iter().map(|&j| row[j]));
        }
        out
    }

    /// Records the forward pass for an `m x input_dim` batch.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<ForwardVars> {
        let d = self.input_dim();
        if x.cols() != d {
            return Err(Error::shape("model input", &[x.rows(), d], x.shape()));
        }
        let store = &self.params;
        let xv = tape.input(x.clone());
        match &self.spec.arch {
            Architecture::BaseDnn(_) => {
                let (logits, viz) = trunk_forward(tape, store, "", xv)?;
                Ok(ForwardVars {
                    risk_logits: logits,
                    stroke_logit: None,
                    viz: Some(viz),
                    gates: Vec::new(),
                })
            }
            Architecture::Qidnn(s) => Ok(ForwardVars {
                risk_logits: qidnn_forward(tape, store, "", s, xv, x)?,
                stroke_logit: None,
                viz: None,
                gates: Vec::new(),
            }),
            Architecture::Mmoe(s) => {
                let mut reps = Vec::with_capacity(s.experts.len());
                for (e, expert) in s.experts.iter().enumerate() {
                    let prefix = format!("expert{}.", e + 1);
                    let rep = match expert {
                        ExpertSpec::Mlp { .. } => {
                            let h = Dense::lookup(store, &format!("{prefix}hidden"))?.apply(tape, store, xv)?;
                            tape.relu(h)
                        }
                        ExpertSpec::Qidnn { spec, .. } => qidnn_forward(tape, store, &prefix, spec, xv, x)?,
                    };
                    reps.push(rep);
                }
                let mut mixed = Vec::with_capacity(s.num_gates);
                let mut gates = Vec::with_capacity(s.num_gates);
                for g in 0..s.num_gates {
                    let logits = Dense::lookup(store, &format!("gate{}", g + 1))?.apply(tape, store, xv)?;
                    let weights = tape.softmax(logits);
                    let mut acc: Option<Var> = None;
                    for (e, &rep) in reps.iter().enumerate() {
                        let w = tape.columns(weights, e, 1)?;
                        let term = tape.scale_rows(rep, w)?;
                        acc = Some(match acc {
                            Some(a) => tape.add(a, term)?,
                            None => term,
                        });
                    }
                    mixed.push(acc.expect("at least one expert"));
                    gates.push(weights);
                }
                let stroke = Dense::lookup(store, "stroke_head")?.apply(tape, store, mixed[0])?;
                let risk = Dense::lookup(store, "risk_head")?.apply(tape, store, mixed[1])?;
                Ok(ForwardVars {
                    risk_logits: risk,
                    stroke_logit: Some(stroke),
                    viz: None,
                    gates,
                })
            }
        }
    }

    /// Evaluates a row-major batch of model inputs (`rows x input_dim`).
    pub fn eval(&self, inputs: &[f64]) -> Result<Outputs> {
        let d = self.input_dim();
        if inputs.is_empty() || !inputs.len().is_multiple_of(d) {
            return Err(Error::shape("model input", &[d], &[inputs.len()]));
        }
        let rows = inputs.len() / d;
        let x = Tensor::matrix(rows, d, inputs.to_vec())?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &x)?;
        Ok(Outputs {
            rows,
            risk_logits: tape.value(out.risk_logits).data().to_vec(),
            stroke_logits: out.stroke_logit.map(|v| tape.value(v).data().to_vec()),
            viz: out.viz.map(|v| tape.value(v).data().to_vec()),
        })
    }

    /// Risk-state probabilities for a single input vector.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(x)?.risk_probs_row(0))
    }

    /// Per-objective gate weights for a batch (mixture models only).
    pub fn gate_weights(&self, inputs: &[f64]) -> Result<Vec<Vec<f64>>> {
        let d = self.input_dim();
        let x = Tensor::matrix(inputs.len() / d, d, inputs.to_vec())?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &x)?;
        Ok(out.gates.iter().map(|g| tape.value(*g).data().to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_features(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn parameter_counts() {
        let base = ModelSpec::base_dnn(all_features(34));
        assert_eq!(base.param_count(), 34 * 17 + 17 + 17 * 8 + 8 + 8 * 4 + 4);
        assert_eq!(base.param_count(), 775);
        let m = Model::new(base, Init::Glorot { seed: 1, zero_output: true }).unwrap();
        assert_eq!(m.params().num_scalars(), 775);

        let q = ModelSpec::qidnn(all_features(34), (0..7).collect());
        assert_eq!(q.param_count(), 775 + 7 * 4 + 5 * 4 + 4);
        let m = Model::new(q, Init::Zeros).unwrap();
        assert_eq!(m.params().num_scalars(), 827);

        let mut q = ModelSpec::qidnn(all_features(34), (0..7).collect());
        if let Architecture::Qidnn(s) = &mut q.arch {
            s.qi.mode = QiMode::PerPair;
        }
        assert_eq!(q.param_count(), 775 + 28 + 25 * 4 + 4);
        assert_eq!(Model::new(q, Init::Zeros).unwrap().params().num_scalars(), 907);

        let mm = ModelSpec::mmoe(all_features(20), vec![0, 1, 2]);
        let expert1 = 20 * 11 + 11;
        let trunk = 20 * 17 + 17 + 17 * 8 + 8 + 8 * 4 + 4;
        let expert2 = trunk + 3 * 4 + 5 * 11 + 11;
        let gates = 2 * (20 * 2 + 2);
        let heads = 11 + 1 + 11 * 4 + 4;
        assert_eq!(mm.param_count(), expert1 + expert2 + gates + heads);
        let m = Model::new(mm.clone(), Init::Zeros).unwrap();
        assert_eq!(m.params().num_scalars(), mm.param_count());
    }

    #[test]
    fn spec_validation() {
        let mut s = BaseDnnSpec::default();
        s.viz_dim = 7;
        assert!(s.validate().is_err());
        assert!(QiSpec::new(vec![3]).validate(10).is_err());
        assert!(QiSpec::new(vec![3, 3]).validate(10).is_err());
        assert!(QiSpec::new(vec![3, 10]).validate(10).is_err());
        let mut qi = QiSpec::new(vec![1, 2]);
        qi.latent_len = 0;
        assert!(qi.validate(10).is_err());

        let mut mm = MmoeSpec::standard(20, vec![0, 1, 2]);
        mm.experts[0] = ExpertSpec::Mlp { hidden: 9 };
        assert!(matches!(mm.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let m = Model::new(ModelSpec::base_dnn(all_features(34)), Init::Zeros).unwrap();
        let x: Vec<f64> = (0..34).map(|i| i as f64 * 0.1 - 1.0).collect();
        assert_eq!(m.predict_proba(&x).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn probabilities_are_a_distribution() {
        let m = Model::new(ModelSpec::base_dnn(all_features(34)), Init::Uniform { seed: 9, scale: 0.5 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x: Vec<f64> = (0..34).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = m.predict_proba(&x).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn wrong_input_width_is_dimension_error() {
        let m = Model::new(ModelSpec::base_dnn(all_features(34)), Init::Zeros).unwrap();
        assert!(matches!(m.eval(&[0.0; 33]), Err(Error::Shape { .. })));
        assert!(matches!(m.predict_proba(&[0.0; 35]), Err(Error::Shape { .. })));
    }

    fn set(m: &mut Model, name: &str, data: &[f64]) {
        let id = m.params().id(name).unwrap();
        m.params_mut().get_mut(id).value.data_mut().copy_from_slice(data);
    }

    #[test]
    fn hand_built_two_feature_forward() {
        let spec = ModelSpec {
            features: vec![0, 1],
            arch: Architecture::BaseDnn(BaseDnnSpec {
                input_dim: 2,
                hidden_dim: 1,
                viz_dim: 8,
                num_classes: 4,
            }),
        };
        let mut m = Model::new(spec, Init::Zeros).unwrap();
        // hidden = relu(x0 - x1 + 0.5)
        set(&mut m, "hidden.w", &[1.0, -1.0]);
        set(&mut m, "hidden.b", &[0.5]);
        // viz_k = relu(c_k * hidden + d_k)
        let c = [1.0, -1.0, 2.0, 0.0, 0.5, 1.0, -2.0, 3.0];
        let d = [0.0, 1.0, -0.5, 0.25, 0.0, 0.0, 1.0, -1.0];
        set(&mut m, "viz.w", &c);
        set(&mut m, "viz.b", &d);
        // out[k] = sum_i viz_i * W[i][k]; W is 8 x 4 with W[i][k] = (i + 1) * (k - 1.5) / 10
        let w: Vec<f64> = (0..8)
            .flat_map(|i| (0..4).map(move |k| (i as f64 + 1.0) * (k as f64 - 1.5) / 10.0))
            .collect();
        set(&mut m, "out.w", &w);
        set(&mut m, "out.b", &[0.1, -0.2, 0.3, 0.0]);

        let x = [1.2, 0.3];
        let h = (1.2f64 - 0.3 + 0.5).max(0.0);
        let viz: Vec<f64> = (0..8).map(|k| (c[k] * h + d[k]).max(0.0)).collect();
        let b = [0.1, -0.2, 0.3, 0.0];
        let logits: Vec<f64> = (0..4)
            .map(|k| b[k] + (0..8).map(|i| viz[i] * w[i * 4 + k]).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let expected: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();

        let out = m.eval(&x).unwrap();
        let got = out.risk_probs_row(0);
        for k in 0..4 {
            assert!((got[k] - expected[k]).abs() < 1e-12, "{got:?} vs {expected:?}");
        }
        let v = out.viz.unwrap();
        for k in 0..8 {
            assert!((v[k] - viz[k]).abs() < 1e-15);
        }
    }

    fn brute_force_qi(v: &[f64], x: &[f64], n: usize, k: usize) -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dot: f64 = (0..k).map(|l| v[i * k + l] * v[j * k + l]).sum();
                total += dot * x[i] * x[j];
            }
        }
        total
    }

    fn qi_only(n: usize, k: usize, v: &[f64], x: &[f64], mode: QiMode) -> Vec<f64> {
        let v = Tensor::matrix(n, k, v.to_vec()).unwrap();
        interaction_output(&v, &Tensor::matrix(1, n, x.to_vec()).unwrap(), mode).unwrap()
    }

    #[test]
    fn qi_small_case_by_hand() {
        assert_eq!(qi_only(2, 1, &[2.0, 3.0], &[1.0, 1.0], QiMode::Summed), vec![6.0]);
        assert_eq!(qi_only(2, 1, &[2.0, 3.0], &[1.0, 1.0], QiMode::PerPair), vec![6.0]);
        assert_eq!(qi_only(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0; 3], QiMode::Summed), vec![0.0]);
    }

    #[test]
    fn qi_identity_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let n = rng.random_range(2..=10);
            let k = rng.random_range(1..=8);
            let v: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let oracle = brute_force_qi(&v, &x, n, k);
            let got = qi_only(n, k, &v, &x, QiMode::Summed)[0];
            assert!((got - oracle).abs() <= 1e-9 * oracle.abs().max(1.0), "{got} vs {oracle}");
            let pairs: f64 = qi_only(n, k, &v, &x, QiMode::PerPair).iter().sum();
            assert!((pairs - oracle).abs() <= 1e-9 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn per_pair_width_with_seven_features() {
        let mut spec = ModelSpec::qidnn(all_features(34), (0..7).collect());
        if let Architecture::Qidnn(s) = &mut spec.arch {
            s.qi.mode = QiMode::PerPair;
            assert_eq!(s.trunk.num_classes + s.qi.output_width(), 4 + 21);
        }
        let m = Model::new(spec, Init::Glorot { seed: 3, zero_output: false }).unwrap();
        assert_eq!(m.params().by_name("final.w").unwrap().value.shape(), &[25, 4]);
    }

    #[test]
    fn zero_latents_reduce_qidnn_to_its_trunk() {
        let spec = ModelSpec::qidnn(all_features(34), vec![0, 3, 5, 7, 9, 11, 13]);
        let mut m = Model::new(spec, Init::Uniform { seed: 4, scale: 0.8 }).unwrap();
        let v_id = m.params().id("qi.v").unwrap();
        m.params_mut().get_mut(v_id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);

        let trunk = Model::from_parts(ModelSpec::base_dnn(all_features(34)), {
            let mut store = ParamStore::new();
            for name in ["hidden.w", "hidden.b", "viz.w", "viz.b", "out.w", "out.b"] {
                store.insert(name, m.params().by_name(name).unwrap().value.clone()).unwrap();
            }
            store
        })
        .unwrap();
        let fw = &m.params().by_name("final.w").unwrap().value;
        let fb = &m.params().by_name("final.b").unwrap().value;

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..34).map(|_| rng.random_range(-2.0..2.0)).collect();
        let deep = trunk.eval(&x).unwrap().risk_logits;
        let got = m.eval(&x).unwrap().risk_logits;
        for c in 0..4 {
            let expected = fb.data()[c] + (0..4).map(|i| deep[i] * fw.get(i, c)).sum::<f64>();
            assert!((got[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_gates_and_heads() {
        let spec = ModelSpec::mmoe(all_features(20), vec![0, 1, 2]);
        let m = Model::new(spec.clone(), Init::Glorot { seed: 8, zero_output: true }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..20 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
        for g in m.gate_weights(&x).unwrap() {
            for row in g.chunks(2) {
                assert_eq!(row, &[0.5, 0.5]);
            }
        }

        let m = Model::new(spec, Init::Uniform { seed: 8, scale: 0.7 }).unwrap();
        let out = m.eval(&x).unwrap();
        for g in m.gate_weights(&x).unwrap() {
            for row in g.chunks(2) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&w| w > 0.0));
            }
        }
        for r in 0..5 {
            assert!((out.risk_probs_row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let p = out.stroke_prob(r).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn saturated_gates_select_expert_one() {
        let spec = ModelSpec::mmoe(all_features(20), vec![0, 1, 2]);
        let mut m = Model::new(spec, Init::Uniform { seed: 10, scale: 0.5 }).unwrap();
        for g in ["gate1", "gate2"] {
            set(&mut m, &format!("{g}.w"), &[0.0; 40]);
            set(&mut m, &format!("{g}.b"), &[800.0, -800.0]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out = m.eval(&x).unwrap();

        let p = |n: &str| m.params().by_name(n).unwrap().value.clone();
        let (w1, b1) = (p("expert1.hidden.w"), p("expert1.hidden.b"));
        let h: Vec<f64> = (0..11)
            .map(|j| (b1.data()[j] + (0..20).map(|i| x[i] * w1.get(i, j)).sum::<f64>()).max(0.0))
            .collect();
        let (rw, rb) = (p("risk_head.w"), p("risk_head.b"));
        for c in 0..4 {
            let expected = rb.data()[c] + (0..11).map(|j| h[j] * rw.get(j, c)).sum::<f64>();
            assert!((out.risk_logits[c] - expected).abs() < 1e-12);
        }
        let (sw, sb) = (p("stroke_head.w"), p("stroke_head.b"));
        let expected = sb.data()[0] + (0..11).map(|j| h[j] * sw.get(j, 0)).sum::<f64>();
        assert!((out.stroke_logits.unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = ModelSpec::mmoe(all_features(20), vec![4, 5, 6]);
        let a = Model::new(spec.clone(), Init::Glorot { seed: 3, zero_output: false }).unwrap();
        let b = Model::new(spec, Init::Glorot { seed: 3, zero_output: false }).unwrap();
        let x: Vec<f64> = (0..60).map(|i| (i as f64).sin()).collect();
        assert_eq!(a.eval(&x).unwrap(), b.eval(&x).unwrap());
        assert_eq!(a.eval(&x).unwrap(), a.eval(&x).unwrap());
    }

    #[test]
    fn from_parts_rejects_wrong_shapes() {
        let spec = ModelSpec::base_dnn(all_features(34));
        let m = Model::new(spec.clone(), Init::Zeros).unwrap();
        let mut store = ParamStore::new();
        for p in m.params().iter() {
            let value = if p.name == "viz.b" { Tensor::zeros(&[7]) } else { p.value.clone() };
            store.insert(p.name.clone(), value).unwrap();
        }
        assert!(matches!(Model::from_parts(spec, store), Err(Error::Compat(_))));
    }
}
