//! Linear, feed-forward, recurrent and self-attentive models with exact
//! reverse-mode gradients.
//!
//! `input_dim` is the width a model's first layer reads: the flattened
//! `steps * features` length for [`Family::Linreg`], [`Family::Logreg`] and
//! [`Family::Mlp`], and the per-step feature width for the recurrent
//! families.

mod net;
mod params;

use serde::{Deserialize, Serialize};

use crate::encoding::{te_into, EncoderConfig};
use crate::error::{Error, Result};
use crate::matrix::{softmax_into, Matrix};

pub use params::{ParamSet, ParamSlot, Tensor};

use net::{AttnCache, DenseCache, LstmCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linreg,
    Logreg,
    Mlp,
    Lstm,
    SaLstm,
}

impl Family {
    pub fn is_recurrent(self) -> bool {
        matches!(self, Family::Lstm | Family::SaLstm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeMode {
    #[default]
    None,
    /// Missingness mask and scaled time deltas appended to the features.
    Mask,
    /// Time embedding columns appended to the features.
    CatTe,
    /// Time embedding added to the recurrent hidden states.
    AddTe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

impl Task {
    pub fn outputs(self) -> usize {
        match self {
            Task::Classification => 2,
            Task::Regression => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSpec {
    pub d_a: usize,
    pub r: usize,
    pub penalty_c: f64,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        Self {
            d_a: 32,
            r: 8,
            penalty_c: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    /// Recurrent hidden size; ignored by the non-recurrent families.
    #[serde(default)]
    pub hidden: usize,
    /// Hidden widths of the dense stack between the body and the output.
    pub head_widths: Vec<usize>,
    #[serde(default)]
    pub te_mode: TeMode,
    #[serde(default)]
    pub te_cfg: Option<EncoderConfig>,
    #[serde(default)]
    pub attention: Option<AttentionSpec>,
    pub task: Task,
}

pub const DEFAULT_HEAD: [usize; 3] = [32, 32, 16];
pub const DEFAULT_MLP: [usize; 4] = [64, 64, 32, 16];

impl ModelSpec {
    /// Spec with the family's default widths and no time information.
    pub fn new(family: Family, task: Task, hidden: usize) -> Self {
        let head_widths = match family {
            Family::Linreg | Family::Logreg => Vec::new(),
            Family::Mlp => DEFAULT_MLP.to_vec(),
            Family::Lstm | Family::SaLstm => DEFAULT_HEAD.to_vec(),
        };
        Self {
            family,
            hidden: if family.is_recurrent() { hidden } else { 0 },
            head_widths,
            te_mode: TeMode::None,
            te_cfg: None,
            attention: (family == Family::SaLstm).then(AttentionSpec::default),
            task,
        }
    }

    pub fn with_te(mut self, mode: TeMode, cfg: Option<EncoderConfig>) -> Self {
        self.te_mode = mode;
        self.te_cfg = cfg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        match (self.family, self.task) {
            (Family::Linreg, Task::Classification) => return fail("linreg is a regression model".into()),
            (Family::Logreg, Task::Regression) => return fail("logreg is a classification model".into()),
            _ => {}
        }
        if matches!(self.family, Family::Linreg | Family::Logreg) && !self.head_widths.is_empty() {
            return fail("linear models take no hidden widths".into());
        }
        if self.head_widths.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        if self.family.is_recurrent() && self.hidden == 0 {
            return fail("recurrent hidden size must be positive".into());
        }
        match (self.family == Family::SaLstm, &self.attention) {
            (true, None) => return fail("sa_lstm needs an attention block".into()),
            (false, Some(_)) => return fail("attention is only used by sa_lstm".into()),
            (true, Some(a)) => {
                if a.d_a == 0 || a.r == 0 {
                    return fail("attention sizes must be positive".into());
                }
                if !(a.penalty_c >= 0.0 && a.penalty_c.is_finite()) {
                    return fail(format!("attention penalty {} must be a non-negative number", a.penalty_c));
                }
            }
            _ => {}
        }
        match self.te_mode {
            TeMode::CatTe | TeMode::AddTe => {
                let cfg = self
                    .te_cfg
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("{:?} needs an embedding config", self.te_mode)))?;
                cfg.validate()?;
                if self.te_mode == TeMode::AddTe {
                    if !self.family.is_recurrent() {
                        return fail("add_te needs a recurrent model".into());
                    }
                    if cfg.dim() != self.hidden {
                        return fail(format!(
                            "add_te needs embedding dim ({}) equal to hidden size ({})",
                            cfg.dim(),
                            self.hidden
                        ));
                    }
                }
            }
            TeMode::None | TeMode::Mask => {}
        }
        Ok(())
    }

    /// Short name such as `catTE+LSTM`.
    pub fn alias(&self) -> String {
        let body = match self.family {
            Family::Linreg => "Lin.R",
            Family::Logreg => "Log.R",
            Family::Mlp => "MLP",
            Family::Lstm => "LSTM",
            Family::SaLstm => "SA-LSTM",
        };
        match self.te_mode {
            TeMode::None => body.to_string(),
            TeMode::Mask => format!("BM+{body}"),
            TeMode::CatTe => format!("catTE+{body}"),
            TeMode::AddTe => format!("addTE+{body}"),
        }
    }

    /// Per-step feature width produced by the input pipeline for this spec.
    pub fn step_width(&self, value_width: usize, n_channels: usize) -> usize {
        value_width
            + match self.te_mode {
                TeMode::Mask => 2 * n_channels,
                TeMode::CatTe => self.te_cfg.as_ref().map_or(0, EncoderConfig::dim),
                TeMode::None | TeMode::AddTe => 0,
            }
    }

    /// `input_dim` for [`init_params`] given the per-step width.
    pub fn input_dim(&self, steps: usize, step_width: usize) -> usize {
        if self.family.is_recurrent() {
            step_width
        } else {
            steps * step_width
        }
    }

    fn head_input(&self) -> usize {
        match self.family {
            Family::Lstm => self.hidden,
            Family::SaLstm => self.attention.map_or(0, |a| a.r) * self.hidden,
            _ => 0,
        }
    }

    fn dense_base(&self) -> usize {
        match self.family {
            Family::Linreg | Family::Logreg | Family::Mlp => 0,
            Family::Lstm => 3,
            Family::SaLstm => 5,
        }
    }

    fn dense_layers(&self) -> usize {
        self.head_widths.len() + 1
    }
}

fn dense_slots(prefix: &str, input: usize, widths: &[usize], outputs: usize, out: &mut Vec<ParamSlot>) {
    let mut fan_in = input;
    for (k, &w) in widths.iter().enumerate() {
        out.push(ParamSlot::new(format!("{prefix}{k}.weight"), &[w, fan_in], fan_in));
        out.push(ParamSlot::new(format!("{prefix}{k}.bias"), &[w], fan_in));
        fan_in = w;
    }
    out.push(ParamSlot::new("out.weight", &[outputs, fan_in], fan_in));
    out.push(ParamSlot::new("out.bias", &[outputs], fan_in));
}

/// Tensor names, shapes and fan-ins, in storage order.
pub fn layout(spec: &ModelSpec, input_dim: usize) -> Result<Vec<ParamSlot>> {
    spec.validate()?;
    if input_dim == 0 {
        return Err(Error::Shape("input_dim must be at least 1".into()));
    }
    let outputs = spec.task.outputs();
    let mut slots = Vec::new();
    match spec.family {
        Family::Linreg | Family::Logreg => dense_slots("", input_dim, &[], outputs, &mut slots),
        Family::Mlp => dense_slots("layer", input_dim, &spec.head_widths, outputs, &mut slots),
        Family::Lstm | Family::SaLstm => {
            let h = spec.hidden;
            let fan = input_dim + h;
            slots.push(ParamSlot::new("lstm.w_ih", &[4 * h, input_dim], fan));
            slots.push(ParamSlot::new("lstm.w_hh", &[4 * h, h], fan));
            slots.push(ParamSlot::new("lstm.bias", &[4 * h], fan));
            if let Some(a) = spec.attention {
                slots.push(ParamSlot::new("attn.w_s1", &[a.d_a, h], h));
                slots.push(ParamSlot::new("attn.w_s2", &[a.r, a.d_a], a.d_a));
            }
            dense_slots("head", spec.head_input(), &spec.head_widths, outputs, &mut slots);
        }
    }
    Ok(slots)
}

fn dense_count(input: usize, widths: &[usize], outputs: usize) -> usize {
    let mut total = 0;
    let mut fan_in = input;
    for &w in widths.iter().chain(std::iter::once(&outputs)) {
        total += w * fan_in + w;
        fan_in = w;
    }
    total
}

/// Closed-form parameter count, head included.
pub fn count_params(spec: &ModelSpec, input_dim: usize) -> usize {
    let outputs = spec.task.outputs();
    match spec.family {
        Family::Linreg | Family::Logreg | Family::Mlp => dense_count(input_dim, &spec.head_widths, outputs),
        Family::Lstm | Family::SaLstm => {
            let h = spec.hidden;
            let recurrent = 4 * (h * (input_dim + h) + h);
            let attention = spec.attention.map_or(0, |a| a.d_a * h + a.r * a.d_a);
            recurrent + attention + dense_count(spec.head_input(), &spec.head_widths, outputs)
        }
    }
}

/// Largest hidden size whose full model fits in `budget` parameters.
/// Only the family, head and attention sizes of `template` are used.
pub fn solve_hidden_for_budget(template: &ModelSpec, input_dim: usize, budget: usize) -> Result<usize> {
    if !template.family.is_recurrent() {
        return Err(Error::Config(format!("{:?} has no hidden size to solve for", template.family)));
    }
    let count = |h: usize| {
        count_params(
            &ModelSpec {
                hidden: h,
                ..template.clone()
            },
            input_dim,
        )
    };
    if count(1) > budget {
        return Err(Error::Config(format!(
            "budget {budget} is below the smallest model ({} parameters)",
            count(1)
        )));
    }
    // count is strictly increasing in h.
    let (mut lo, mut hi) = (1usize, 2usize);
    while count(hi) <= budget {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if count(mid) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Uniform `±1/sqrt(fan_in)` initialization; LSTM forget-gate bias set to 1.
pub fn init_params(spec: &ModelSpec, input_dim: usize, seed: u64) -> Result<ParamSet> {
    let slots = layout(spec, input_dim)?;
    let mut p = ParamSet::init_uniform(&slots, seed);
    if spec.family.is_recurrent() {
        let h = spec.hidden;
        p.data_mut(2)[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
    }
    Ok(p)
}

/// Model output for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    /// Class probabilities `[p0, p1]`, or a single non-negative regression
    /// value (unclamped for linreg).
    pub values: Vec<f64>,
}

impl Output {
    /// Positive-class probability, or the regression value.
    pub fn score(&self) -> f64 {
        *self.values.last().expect("non-empty output")
    }
}

#[derive(Debug, Clone)]
enum Body {
    Flat,
    Lstm { lstm: LstmCache },
    SaLstm { lstm: LstmCache, attn: AttnCache },
}

/// Activations cached by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    family: Family,
    signature: Vec<usize>,
    body: Body,
    dense: DenseCache,
    /// Final pre-activation.
    logits: Vec<f64>,
    pub output: Output,
}

impl ForwardTrace {
    /// Attention matrix (r x steps, row-major) for sa_lstm.
    pub fn attention(&self) -> Option<Matrix> {
        match &self.body {
            Body::SaLstm { attn, .. } => Some(Matrix::from_vec(attn.r, attn.steps, attn.a.clone())),
            _ => None,
        }
    }
}

fn signature(p: &ParamSet) -> Vec<usize> {
    (0..p.len()).map(|i| p.tensor(i).len()).collect()
}

fn check_finite(values: &[f64], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(layer.to_string()))
    }
}

/// Runs one episode (`steps x features`) through the model. `times` holds
/// one timestamp per step and is only read in add_te mode.
pub fn forward(spec: &ModelSpec, params: &ParamSet, features: &Matrix, times: &[f64]) -> Result<ForwardTrace> {
    spec.validate()?;
    let (steps, width) = (features.rows(), features.cols());
    let w_in = params.tensor(0).shape[1];
    let ok = if spec.family.is_recurrent() {
        width == w_in && steps > 0
    } else {
        steps * width == w_in
    };
    if !ok {
        return Err(Error::Shape(format!(
            "{} x {} features do not fit a model with input width {w_in}",
            steps, width
        )));
    }
    check_finite(features.as_slice(), "input")?;
    if spec.te_mode == TeMode::AddTe && times.len() != steps {
        return Err(Error::Shape(format!("{} timestamps for {steps} steps", times.len())));
    }
    let (body, head_in) = match spec.family {
        Family::Linreg | Family::Logreg | Family::Mlp => (Body::Flat, features.as_slice().to_vec()),
        Family::Lstm | Family::SaLstm => {
            let h = spec.hidden;
            let lstm = net::lstm_forward(params, 0, h, features.as_slice(), width);
            check_finite(&lstm.h, "lstm")?;
            let mut hp = lstm.h.clone();
            if spec.te_mode == TeMode::AddTe {
                let cfg = spec.te_cfg.as_ref().expect("validated");
                let mut e = vec![0.0; h];
                let first = if spec.family == Family::Lstm { steps - 1 } else { 0 };
                for t in first..steps {
                    te_into(times[t], cfg, &mut e)?;
                    for (v, ev) in hp[t * h..(t + 1) * h].iter_mut().zip(&e) {
                        *v += ev;
                    }
                }
            }
            match spec.attention {
                None => {
                    let last = hp[(steps - 1) * h..].to_vec();
                    (Body::Lstm { lstm }, last)
                }
                Some(a) => {
                    let attn = net::attention_forward(params, 3, hp, h, a.d_a, a.r);
                    check_finite(&attn.m, "attention")?;
                    let m = attn.m.clone();
                    (Body::SaLstm { lstm, attn }, m)
                }
            }
        }
    };
    let (logits, dense) = net::dense_forward(params, spec.dense_base(), spec.dense_layers(), head_in);
    check_finite(&logits, "head")?;
    let values = match (spec.task, spec.family) {
        (Task::Classification, _) => {
            let mut p = vec![0.0; 2];
            softmax_into(&logits, &mut p);
            p
        }
        (Task::Regression, Family::Linreg) => logits.clone(),
        (Task::Regression, _) => vec![logits[0].max(0.0)],
    };
    Ok(ForwardTrace {
        family: spec.family,
        signature: signature(params),
        body,
        dense,
        logits,
        output: Output { values },
    })
}

fn class_index(target: f64) -> Result<usize> {
    if target == 0.0 || target == 1.0 {
        Ok(target as usize)
    } else {
        Err(Error::Input(format!("class target {target} is not 0 or 1")))
    }
}

/// Cross-entropy or squared error, plus the attention penalty for sa_lstm.
pub fn loss(spec: &ModelSpec, trace: &ForwardTrace, target: f64) -> Result<f64> {
    let data = match spec.task {
        Task::Classification => {
            let y = class_index(target)?;
            let max = trace.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + trace.logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - trace.logits[y]
        }
        Task::Regression => {
            if !target.is_finite() {
                return Err(Error::Input(format!("regression target {target} is not finite")));
            }
            let e = trace.output.values[0] - target;
            e * e
        }
    };
    Ok(data + penalty(spec, trace))
}

/// `C * ‖A Aᵀ − I‖_F²`, zero for models without attention.
pub fn penalty(spec: &ModelSpec, trace: &ForwardTrace) -> f64 {
    match (&trace.body, spec.attention) {
        (Body::SaLstm { attn, .. }, Some(a)) => a.penalty_c * net::attention_gram_error(attn),
        _ => 0.0,
    }
}

/// Gradient of [`loss`] with respect to every parameter.
pub fn backward(spec: &ModelSpec, params: &ParamSet, trace: &ForwardTrace, target: f64) -> Result<ParamSet> {
    let mut grads = params.zeros_like();
    backward_into(spec, params, trace, target, 1.0, &mut grads)?;
    Ok(grads)
}

/// Adds `scale * dloss/dparams` into `grads`.
pub fn backward_into(
    spec: &ModelSpec,
    params: &ParamSet,
    trace: &ForwardTrace,
    target: f64,
    scale: f64,
    grads: &mut ParamSet,
) -> Result<()> {
    if trace.family != spec.family || trace.signature != signature(params) || !grads.same_shape(params) {
        return Err(Error::Shape("trace, parameters and gradients come from different models".into()));
    }
    let d_logits: Vec<f64> = match spec.task {
        Task::Classification => {
            let y = class_index(target)?;
            let p = &trace.output.values;
            (0..2).map(|k| scale * (p[k] - if k == y { 1.0 } else { 0.0 })).collect()
        }
        Task::Regression => {
            let z = trace.logits[0];
            let clamped = spec.family != Family::Linreg && z <= 0.0;
            let g = if clamped { 0.0 } else { 2.0 * (trace.output.values[0] - target) };
            vec![scale * g]
        }
    };
    let d_head = net::dense_backward(params, grads, spec.dense_base(), &trace.dense, d_logits);
    match &trace.body {
        Body::Flat => {}
        Body::Lstm { lstm } => {
            let h = lstm.hidden;
            let mut dh = vec![0.0; lstm.steps * h];
            dh[(lstm.steps - 1) * h..].copy_from_slice(&d_head);
            net::lstm_backward(params, grads, 0, lstm, &dh);
        }
        Body::SaLstm { lstm, attn } => {
            let c = spec.attention.map_or(0.0, |a| a.penalty_c);
            let dh = net::attention_backward(params, grads, 3, attn, &d_head, scale * c);
            net::lstm_backward(params, grads, 0, lstm, &dh);
        }
    }
    Ok(())
}
