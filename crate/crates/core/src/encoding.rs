//! Sinusoidal positional and time embeddings.
//!
//! Pair `i` of an embedding holds `(sin(t * w_i), cos(t * w_i))` at
//! dimensions `2i` and `2i + 1`, with `w_i = 1 / base^(2i / dim)`. The base is
//! `10000` for integer positions and `max_time` for continuous timestamps.
//!
//! Because each pair is a point on the unit circle, a shift of the input by
//! `k` is a per-pair rotation by `k * w_i` ([`ShiftMap`]), and the shift
//! between two embeddings can be read back by unwrapping their phase
//! differences ([`estimate_delta`]).
//!
//! Positions or times larger than the coarsest wavelength alias: the
//! embedding of `t` and `t + 2π·base^((dim-2)/dim)` agree on the coarsest
//! pair, and finer pairs only disambiguate if they happen not to line up.

use std::f64::consts::{PI, TAU};
use std::sync::Once;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const POSITIONAL_BASE: f64 = 10_000.0;

/// Pair norms further than this from 1 mark a vector as not an embedding.
pub const PAIR_NORM_TOLERANCE: f64 = 1e-6;

/// Max phase residual (radians) accepted when reconstructing a delta.
const PHASE_RESIDUAL_TOLERANCE: f64 = 1e-6;

static ALIAS_WARNING: Once = Once::new();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    /// Integer positions, base 10000.
    Positional,
    /// Continuous timestamps, base `max_time`.
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    dim: usize,
    max_time: f64,
    base_kind: BaseKind,
}

impl EncoderConfig {
    pub fn new(dim: usize, max_time: f64, base_kind: BaseKind) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embedding dim must be even and >= 2, got {dim}"
            )));
        }
        if !(max_time.is_finite() && max_time > 0.0) {
            return Err(Error::Config(format!(
                "max_time must be positive and finite, got {max_time}"
            )));
        }
        Ok(Self {
            dim,
            max_time,
            base_kind,
        })
    }

    /// Time embedding family with base `max_time`.
    pub fn temporal(dim: usize, max_time: f64) -> Result<Self> {
        Self::new(dim, max_time, BaseKind::Temporal)
    }

    /// Transformer positional family, base 10000.
    pub fn positional(dim: usize) -> Result<Self> {
        Self::new(dim, POSITIONAL_BASE, BaseKind::Positional)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_time(&self) -> f64 {
        self.max_time
    }

    pub fn base_kind(&self) -> BaseKind {
        self.base_kind
    }

    pub fn base(&self) -> f64 {
        match self.base_kind {
            BaseKind::Positional => POSITIONAL_BASE,
            BaseKind::Temporal => self.max_time,
        }
    }

    pub fn pairs(&self) -> usize {
        self.dim / 2
    }

    /// `base^(2i/dim)`, the divisor of pair `i`.
    pub fn wavelength_scale(&self, pair: usize) -> f64 {
        self.base().powf((2 * pair) as f64 / self.dim as f64)
    }

    /// Largest |Δt| that [`estimate_delta`] can resolve without ambiguity.
    pub fn delta_range(&self) -> f64 {
        PI * self.wavelength_scale(self.pairs() - 1)
    }

    /// Re-validates a config that may have come through deserialization.
    pub fn validate(&self) -> Result<()> {
        Self::new(self.dim, self.max_time, self.base_kind).map(|_| ())
    }
}

/// A sinusoidal embedding, interleaved `sin, cos` per frequency pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    fn pair(&self, i: usize) -> (f64, f64) {
        (self.0[2 * i], self.0[2 * i + 1])
    }
}

fn fill(arg: f64, cfg: &EncoderConfig, out: &mut [f64]) {
    for i in 0..cfg.pairs() {
        let angle = arg / cfg.wavelength_scale(i);
        let (s, c) = angle.sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
}

/// Positional embedding of an integer position.
pub fn pe(pos: u64, cfg: &EncoderConfig) -> Result<EmbeddingVector> {
    if cfg.base_kind != BaseKind::Positional {
        return Err(Error::Config(
            "positional embedding needs a positional-base config".into(),
        ));
    }
    let mut v = vec![0.0; cfg.dim];
    fill(pos as f64, cfg, &mut v);
    Ok(EmbeddingVector(v))
}

/// Time embedding of a continuous timestamp.
pub fn te(time: f64, cfg: &EncoderConfig) -> Result<EmbeddingVector> {
    let mut v = vec![0.0; cfg.dim];
    te_into(time, cfg, &mut v)?;
    Ok(EmbeddingVector(v))
}

/// Writes `te(time)` into `out[..cfg.dim()]`.
pub fn te_into(time: f64, cfg: &EncoderConfig, out: &mut [f64]) -> Result<()> {
    if cfg.base_kind != BaseKind::Temporal {
        return Err(Error::Config(
            "time embedding needs a temporal-base config".into(),
        ));
    }
    if !time.is_finite() {
        return Err(Error::Input(format!("time must be finite, got {time}")));
    }
    if time > cfg.max_time {
        ALIAS_WARNING.call_once(|| {
            log::warn!(
                "time {time} exceeds max_time {}; embeddings past max_time start to alias",
                cfg.max_time
            )
        });
    }
    fill(time, cfg, &mut out[..cfg.dim]);
    Ok(())
}

/// One embedding row per timestamp.
pub fn te_batch(times: &[f64], cfg: &EncoderConfig) -> Result<Matrix> {
    let mut m = Matrix::zeros(times.len(), cfg.dim);
    for (j, &t) in times.iter().enumerate() {
        te_into(t, cfg, m.row_mut(j)).map_err(|e| Error::Row {
            row: j,
            source: Box::new(e),
        })?;
    }
    Ok(m)
}

/// Block-diagonal rotation advancing an embedding by a fixed offset.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftMap {
    angles: Vec<f64>,
}

impl ShiftMap {
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn apply(&self, v: &EmbeddingVector) -> Result<EmbeddingVector> {
        if v.len() != 2 * self.angles.len() {
            return Err(Error::Shape(format!(
                "shift map of dim {} applied to vector of length {}",
                2 * self.angles.len(),
                v.len()
            )));
        }
        let mut out = vec![0.0; v.len()];
        for (i, &a) in self.angles.iter().enumerate() {
            let (s, c) = v.pair(i);
            let (sa, ca) = a.sin_cos();
            out[2 * i] = s * ca + c * sa;
            out[2 * i + 1] = c * ca - s * sa;
        }
        Ok(EmbeddingVector(out))
    }

    /// The 2x2 block for pair `i`, acting on the column `(sin, cos)`.
    pub fn block(&self, i: usize) -> [[f64; 2]; 2] {
        let (sa, ca) = self.angles[i].sin_cos();
        [[ca, sa], [-sa, ca]]
    }
}

pub fn shift_map(k: f64, cfg: &EncoderConfig) -> Result<ShiftMap> {
    if !k.is_finite() {
        return Err(Error::Input(format!("shift must be finite, got {k}")));
    }
    let angles = (0..cfg.pairs())
        .map(|i| k / cfg.wavelength_scale(i))
        .collect();
    Ok(ShiftMap { angles })
}

fn check_embedding(v: &EmbeddingVector, cfg: &EncoderConfig, which: &str) -> Result<()> {
    if v.len() != cfg.dim {
        return Err(Error::InvalidEmbedding(format!(
            "{which} has length {}, expected {}",
            v.len(),
            cfg.dim
        )));
    }
    for i in 0..cfg.pairs() {
        let (s, c) = v.pair(i);
        let n = s * s + c * c;
        if !n.is_finite() || (n - 1.0).abs() > PAIR_NORM_TOLERANCE {
            return Err(Error::InvalidEmbedding(format!(
                "{which} pair {i} has squared norm {n}"
            )));
        }
    }
    Ok(())
}

fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Recovers `Δt` with `te(t + Δt) ≈ b` given `a = te(t)`.
///
/// The coarsest pair fixes the branch, then each finer pair picks the
/// multiple of its period closest to the running estimate. Fails with
/// [`Error::Ambiguous`] when the pairs cannot agree on a single offset, which
/// is what happens once `|Δt|` exceeds [`EncoderConfig::delta_range`].
pub fn estimate_delta(a: &EmbeddingVector, b: &EmbeddingVector, cfg: &EncoderConfig) -> Result<f64> {
    check_embedding(a, cfg, "first embedding")?;
    check_embedding(b, cfg, "second embedding")?;

    let phase_diff = |i: usize| {
        let (sa, ca) = a.pair(i);
        let (sb, cb) = b.pair(i);
        wrap_angle(sb.atan2(cb) - sa.atan2(ca))
    };

    let coarsest = cfg.pairs() - 1;
    let mut estimate = phase_diff(coarsest) * cfg.wavelength_scale(coarsest);
    for i in (0..coarsest).rev() {
        let scale = cfg.wavelength_scale(i);
        let measured = phase_diff(i);
        let turns = ((estimate / scale - measured) / TAU).round();
        estimate = (measured + turns * TAU) * scale;
    }

    for i in 0..cfg.pairs() {
        let residual = wrap_angle(estimate / cfg.wavelength_scale(i) - phase_diff(i));
        if residual.abs() > PHASE_RESIDUAL_TOLERANCE {
            return Err(Error::Ambiguous(format!(
                "pair {i} disagrees by {residual:.3e} rad; |Δt| must stay below {:.6}",
                cfg.delta_range()
            )));
        }
    }
    Ok(estimate)
}

/// Like [`estimate_delta`], but first rejects a caller-declared search
/// range that the coarsest pair cannot cover.
pub fn estimate_delta_within(
    a: &EmbeddingVector,
    b: &EmbeddingVector,
    cfg: &EncoderConfig,
    range: f64,
) -> Result<f64> {
    if !(range < cfg.delta_range()) {
        return Err(Error::Ambiguous(format!(
            "requested range {range} exceeds the unambiguous range {:.6}",
            cfg.delta_range()
        )));
    }
    estimate_delta(a, b, cfg)
}
