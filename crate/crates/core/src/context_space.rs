//! Bounded environment-parameter space and the arithmetic curricula perform on it.
//!
//! A [`Context`] is a point in a box-shaped [`ContextSpace`]. All curriculum
//! operations (similarity, blending, mutation, uniform sampling) work on the
//! unit-normalized representation so that parameters with very different units
//! contribute comparably.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContextError {
    #[error("dimension mismatch: expected {expected} components, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("component {index} ({name}) = {value} is outside the unit interval")]
    OutOfRange {
        index: usize,
        name: String,
        value: f64,
    },
    #[error("component {index} ({name}) is not finite")]
    NonFinite { index: usize, name: String },
    #[error("blend factor {0} is outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("similarity window is empty")]
    EmptyWindow,
    #[error("invalid parameter spec: {0}")]
    InvalidSpec(String),
    #[error("context violates bounds of {name}: {value} not in [{lower}, {upper}]")]
    OutOfBounds {
        name: String,
        value: f64,
        lower: f64,
        upper: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Continuous,
    Integer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    #[serde(default = "default_kind")]
    pub kind: ParamKind,
}

fn default_kind() -> ParamKind {
    ParamKind::Continuous
}

impl ParameterSpec {
    pub fn new(
        name: impl Into<String>,
        lower: f64,
        upper: f64,
        kind: ParamKind,
    ) -> Result<Self, ContextError> {
        let spec = Self {
            name: name.into(),
            lower,
            upper,
            kind,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        if !(self.lower.is_finite() && self.upper.is_finite()) {
            return Err(ContextError::InvalidSpec(format!(
                "{}: bounds must be finite",
                self.name
            )));
        }
        if self.lower >= self.upper {
            return Err(ContextError::InvalidSpec(format!(
                "{}: lower bound {} must be below upper bound {}",
                self.name, self.lower, self.upper
            )));
        }
        if self.kind == ParamKind::Integer
            && (self.lower.fract() != 0.0 || self.upper.fract() != 0.0)
        {
            return Err(ContextError::InvalidSpec(format!(
                "{}: integer parameter needs integral bounds",
                self.name
            )));
        }
        Ok(())
    }

    pub fn range(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn midpoint(&self) -> f64 {
        let mid = 0.5 * (self.lower + self.upper);
        match self.kind {
            ParamKind::Continuous => mid,
            ParamKind::Integer => mid.round_ties_even(),
        }
    }

    /// Clip into bounds; integer parameters are then rounded half-to-even.
    fn clamp_value(&self, v: f64) -> f64 {
        let clipped = v.clamp(self.lower, self.upper);
        match self.kind {
            ParamKind::Continuous => clipped,
            ParamKind::Integer => clipped.round_ties_even(),
        }
    }

    fn contains(&self, v: f64) -> bool {
        v.is_finite()
            && v >= self.lower
            && v <= self.upper
            && (self.kind == ParamKind::Continuous || v.fract() == 0.0)
    }
}

/// Canonical parameter names, in the order every context vector uses.
pub const TRAFFIC_PARAM_NAMES: [&str; 9] = [
    "length",
    "width",
    "maxPosAcc",
    "maxNegAcc",
    "usualPosAcc",
    "usualNegAcc",
    "minGap",
    "maxSpeed",
    "headwayTime",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSpace {
    params: Vec<ParameterSpec>,
}

impl ContextSpace {
    pub fn new(params: Vec<ParameterSpec>) -> Result<Self, ContextError> {
        if params.is_empty() {
            return Err(ContextError::InvalidSpec("space has no parameters".into()));
        }
        for (i, p) in params.iter().enumerate() {
            p.validate()?;
            if params[..i].iter().any(|q| q.name == p.name) {
                return Err(ContextError::InvalidSpec(format!(
                    "duplicate parameter name {}",
                    p.name
                )));
            }
        }
        Ok(Self { params })
    }

    /// The nine vehicle-dynamics parameters with their shipped ranges.
    pub fn traffic() -> Self {
        use ParamKind::*;
        let bounds: [(f64, f64, ParamKind); 9] = [
            (1.0, 10.0, Continuous),
            (1.0, 5.0, Continuous),
            (0.5, 5.0, Continuous),
            (0.5, 5.0, Continuous),
            (1.0, 5.0, Continuous),
            (1.0, 5.0, Continuous),
            (1.0, 10.0, Continuous),
            (3.0, 15.0, Continuous),
            (1.0, 5.0, Integer),
        ];
        let params = TRAFFIC_PARAM_NAMES
            .iter()
            .zip(bounds)
            .map(|(name, (lower, upper, kind))| ParameterSpec {
                name: (*name).to_string(),
                lower,
                upper,
                kind,
            })
            .collect();
        Self { params }
    }

    pub fn params(&self) -> &[ParameterSpec] {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn lower_corner(&self) -> Context {
        Context(self.params.iter().map(|p| p.lower).collect())
    }

    pub fn upper_corner(&self) -> Context {
        Context(self.params.iter().map(|p| p.upper).collect())
    }

    pub fn midpoint(&self) -> Context {
        Context(self.params.iter().map(|p| p.midpoint()).collect())
    }

    fn check_dim(&self, got: usize) -> Result<(), ContextError> {
        if got != self.dim() {
            return Err(ContextError::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// Checks a context against the bounds and integrality of this space.
    pub fn validate(&self, ctx: &Context) -> Result<(), ContextError> {
        self.check_dim(ctx.0.len())?;
        for (p, &v) in self.params.iter().zip(&ctx.0) {
            if !p.contains(v) {
                return Err(ContextError::OutOfBounds {
                    name: p.name.clone(),
                    value: v,
                    lower: p.lower,
                    upper: p.upper,
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, ctx: &Context) -> bool {
        self.validate(ctx).is_ok()
    }

    pub fn normalize(&self, ctx: &Context) -> Result<Vec<f64>, ContextError> {
        self.check_dim(ctx.0.len())?;
        Ok(self
            .params
            .iter()
            .zip(&ctx.0)
            .map(|(p, &v)| (v - p.lower) / p.range())
            .collect())
    }

    pub fn denormalize(&self, unit: &[f64]) -> Result<Context, ContextError> {
        self.check_dim(unit.len())?;
        let mut values = Vec::with_capacity(unit.len());
        for (i, (p, &u)) in self.params.iter().zip(unit).enumerate() {
            if !(0.0..=1.0).contains(&u) {
                return Err(ContextError::OutOfRange {
                    index: i,
                    name: p.name.clone(),
                    value: u,
                });
            }
            let raw = if u == 1.0 {
                p.upper
            } else {
                p.lower + u * p.range()
            };
            values.push(p.clamp_value(raw));
        }
        Ok(Context(values))
    }

    /// Sanitizes an arbitrary real vector into a valid context. Non-finite
    /// components are rejected rather than clamped.
    pub fn clamp_and_round(&self, raw: &[f64]) -> Result<Context, ContextError> {
        self.check_dim(raw.len())?;
        let mut values = Vec::with_capacity(raw.len());
        for (i, (p, &v)) in self.params.iter().zip(raw).enumerate() {
            if !v.is_finite() {
                return Err(ContextError::NonFinite {
                    index: i,
                    name: p.name.clone(),
                });
            }
            values.push(p.clamp_value(v));
        }
        Ok(Context(values))
    }

    /// Pairwise kernel `1 - ||u_a - u_b|| / sqrt(d)` on normalized vectors.
    pub fn pair_similarity(&self, a: &Context, b: &Context) -> Result<f64, ContextError> {
        let ua = self.normalize(a)?;
        let ub = self.normalize(b)?;
        let sq: f64 = ua.iter().zip(&ub).map(|(x, y)| (x - y) * (x - y)).sum();
        let sim = 1.0 - sq.sqrt() / (self.dim() as f64).sqrt();
        Ok(sim.clamp(0.0, 1.0))
    }

    /// Maximum pairwise similarity between `candidate` and any window member.
    pub fn similarity(&self, window: &[Context], candidate: &Context) -> Result<f64, ContextError> {
        if window.is_empty() {
            return Err(ContextError::EmptyWindow);
        }
        let mut best = f64::NEG_INFINITY;
        for c in window {
            best = best.max(self.pair_similarity(c, candidate)?);
        }
        Ok(best)
    }

    /// `alpha * prior + (1 - alpha) * proposal` in raw units, then sanitized.
    pub fn blend(
        &self,
        prior: &Context,
        proposal: &Context,
        alpha: f64,
    ) -> Result<Context, ContextError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(ContextError::InvalidAlpha(alpha));
        }
        self.check_dim(prior.0.len())?;
        self.check_dim(proposal.0.len())?;
        let raw: Vec<f64> = prior
            .0
            .iter()
            .zip(&proposal.0)
            .map(|(&r, &m)| {
                // identical components stay bit-exact for every alpha
                if r == m {
                    r
                } else {
                    alpha * r + (1.0 - alpha) * m
                }
            })
            .collect();
        self.clamp_and_round(&raw)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Context {
        Context(
            self.params
                .iter()
                .map(|p| match p.kind {
                    ParamKind::Continuous => rng.random_range(p.lower..=p.upper),
                    ParamKind::Integer => {
                        rng.random_range((p.lower as i64)..=(p.upper as i64)) as f64
                    }
                })
                .collect(),
        )
    }

    /// Perturbs one uniformly chosen component by uniform noise of at most
    /// `step_fraction` of its range.
    ///
    /// Integer components move at least one lattice step in the direction of
    /// the noise (or away from the bound when that direction is blocked), so a
    /// mutation of an integer component always changes it.
    pub fn mutate<R: Rng + ?Sized>(
        &self,
        ctx: &Context,
        step_fraction: f64,
        rng: &mut R,
    ) -> Result<Context, ContextError> {
        self.check_dim(ctx.0.len())?;
        if !(step_fraction > 0.0 && step_fraction <= 1.0) {
            return Err(ContextError::InvalidSpec(format!(
                "mutation step fraction {step_fraction} outside (0, 1]"
            )));
        }
        let idx = rng.random_range(0..self.dim());
        let p = &self.params[idx];
        let span = step_fraction * p.range();
        let noise = rng.random_range(-span..=span);
        let mut values = ctx.0.clone();
        let old = values[idx];
        values[idx] = match p.kind {
            ParamKind::Continuous => p.clamp_value(old + noise),
            ParamKind::Integer => {
                let moved = p.clamp_value(old + noise);
                if moved != old {
                    moved
                } else {
                    let dir = if noise >= 0.0 { 1.0 } else { -1.0 };
                    if (p.lower..=p.upper).contains(&(old + dir)) {
                        old + dir
                    } else {
                        old - dir
                    }
                }
            }
        };
        Ok(Context(values))
    }

    /// Canonical JSON object form, keyed by parameter name in space order.
    pub fn to_json(&self, ctx: &Context) -> Map<String, Value> {
        let mut map = Map::new();
        for (p, &v) in self.params.iter().zip(&ctx.0) {
            let value = match p.kind {
                ParamKind::Integer => Value::from(v as i64),
                ParamKind::Continuous => Value::from(v),
            };
            map.insert(p.name.clone(), value);
        }
        map
    }

    /// Reads the raw (unsanitized) values of every parameter from a JSON
    /// object. Returns the name of the first missing key on failure.
    pub fn raw_from_json(&self, obj: &Map<String, Value>) -> Result<Vec<f64>, RawJsonError> {
        let mut raw = Vec::with_capacity(self.dim());
        for p in &self.params {
            let value = obj
                .get(&p.name)
                .ok_or_else(|| RawJsonError::MissingKey(p.name.clone()))?;
            let v = match value {
                Value::Number(n) => n.as_f64(),
                Value::String(s) => s.trim().parse::<f64>().ok(),
                _ => None,
            }
            .ok_or_else(|| RawJsonError::NotANumber(p.name.clone()))?;
            raw.push(v);
        }
        Ok(raw)
    }

    pub fn from_json(&self, obj: &Map<String, Value>) -> Result<Context, ContextError> {
        let raw = self
            .raw_from_json(obj)
            .map_err(|e| ContextError::InvalidSpec(e.to_string()))?;
        let ctx = Context(raw);
        self.validate(&ctx)?;
        Ok(ctx)
    }
}

impl Default for ContextSpace {
    fn default() -> Self {
        Self::traffic()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RawJsonError {
    #[error("missing key {0}")]
    MissingKey(String),
    #[error("value of {0} is not a number")]
    NotANumber(String),
}

/// A point of a [`ContextSpace`], aligned with its parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context(pub Vec<f64>);

impl Context {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, space: &ContextSpace, name: &str) -> Option<f64> {
        space.index_of(name).map(|i| self.0[i])
    }

    pub fn set(&mut self, space: &ContextSpace, name: &str, value: f64) {
        if let Some(i) = space.index_of(name) {
            self.0[i] = value;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space() -> ContextSpace {
        ContextSpace::traffic()
    }

    fn with(name: &str, v: f64) -> Context {
        let s = space();
        let mut c = s.midpoint();
        c.set(&s, name, v);
        c
    }

    #[test]
    fn normalize_max_speed_examples() {
        let s = space();
        let i = s.index_of("maxSpeed").unwrap();
        for (v, want) in [(3.0, 0.0), (15.0, 1.0), (9.0, 0.5)] {
            assert_eq!(s.normalize(&with("maxSpeed", v)).unwrap()[i], want);
        }
    }

    #[test]
    fn normalize_rejects_wrong_dimension() {
        let err = space().normalize(&Context(vec![1.0; 3])).unwrap_err();
        assert!(matches!(err, ContextError::DimensionMismatch { expected: 9, got: 3 }));
    }

    #[test]
    fn denormalize_corners_and_rounding() {
        let s = space();
        assert_eq!(s.denormalize(&[0.0; 9]).unwrap(), s.lower_corner());
        assert_eq!(s.denormalize(&[1.0; 9]).unwrap(), s.upper_corner());
        let mut u = vec![0.0; 9];
        u[8] = 0.5;
        assert_eq!(s.denormalize(&u).unwrap().0[8], 3.0);
        u[2] = 1.5;
        assert!(matches!(
            s.denormalize(&u),
            Err(ContextError::OutOfRange { index: 2, .. })
        ));
    }

    #[test]
    fn clamp_and_round_examples() {
        let s = space();
        let mut raw = s.midpoint().0;
        raw[7] = 20.0;
        raw[0] = 0.2;
        raw[8] = 2.5;
        let c = s.clamp_and_round(&raw).unwrap();
        assert_eq!(c.0[7], 15.0);
        assert_eq!(c.0[0], 1.0);
        assert_eq!(c.0[8], 2.0);
        raw[3] = f64::NAN;
        assert!(matches!(
            s.clamp_and_round(&raw),
            Err(ContextError::NonFinite { index: 3, .. })
        ));
    }

    #[test]
    fn similarity_examples() {
        let s = space();
        let c = s.midpoint();
        assert_eq!(s.similarity(std::slice::from_ref(&c), &c).unwrap(), 1.0);
        let low = s.lower_corner();
        let high = s.upper_corner();
        assert!(s.similarity(std::slice::from_ref(&low), &high).unwrap().abs() < 1e-12);
        assert_eq!(s.similarity(&[low, c.clone()], &c).unwrap(), 1.0);
        assert_eq!(s.similarity(&[], &c), Err(ContextError::EmptyWindow));
    }

    #[test]
    fn blend_examples() {
        let s = space();
        let a = with("maxSpeed", 10.0);
        let b = with("maxSpeed", 14.0);
        assert_eq!(s.blend(&a, &b, 0.0).unwrap(), b);
        assert_eq!(s.blend(&a, &b, 1.0).unwrap(), a);
        assert_eq!(s.blend(&a, &b, 0.5).unwrap().0[7], 12.0);
        assert_eq!(s.blend(&a, &b, 1.5), Err(ContextError::InvalidAlpha(1.5)));
        assert!(s.blend(&a, &b, -0.1).is_err());
    }

    #[test]
    fn sample_uniform_stays_in_bounds_and_is_deterministic() {
        let s = space();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mins = [f64::INFINITY; 9];
        let mut maxs = [f64::NEG_INFINITY; 9];
        for _ in 0..10_000 {
            let c = s.sample_uniform(&mut rng);
            assert!(s.contains(&c));
            assert!([1.0, 2.0, 3.0, 4.0, 5.0].contains(&c.0[8]));
            for i in 0..9 {
                mins[i] = mins[i].min(c.0[i]);
                maxs[i] = maxs[i].max(c.0[i]);
            }
        }
        for (i, p) in s.params().iter().enumerate() {
            assert!(mins[i] >= p.lower && maxs[i] <= p.upper);
        }
        assert_eq!(mins[8], 1.0);
        assert_eq!(maxs[8], 5.0);
        let seq = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| s.sample_uniform(&mut r)).collect::<Vec<_>>()
        };
        assert_eq!(seq(3), seq(3));
    }

    #[test]
    fn mutate_changes_exactly_one_component_within_step() {
        let s = space();
        let mid = s.midpoint();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let m = s.mutate(&mid, 0.1, &mut rng).unwrap();
            let diffs: Vec<usize> = (0..9).filter(|&i| m.0[i] != mid.0[i]).collect();
            assert_eq!(diffs.len(), 1, "{m:?}");
            let i = diffs[0];
            let p = &s.params()[i];
            let limit = match p.kind {
                ParamKind::Continuous => 0.1 * p.range(),
                ParamKind::Integer => 1.0,
            };
            assert!((m.0[i] - mid.0[i]).abs() <= limit + 1e-12);
        }
    }

    #[test]
    fn mutate_at_upper_bound_with_positive_noise_stays() {
        let s = space();
        let top = s.upper_corner();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let m = s.mutate(&top, 0.2, &mut rng).unwrap();
            for (i, p) in s.params().iter().enumerate() {
                assert!(m.0[i] <= p.upper);
                if p.kind == ParamKind::Continuous && m.0[i] != top.0[i] {
                    assert!(m.0[i] < top.0[i]);
                }
            }
        }
        let a = s.mutate(&top, 0.2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = s.mutate(&top, 0.2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_validation() {
        assert!(ParameterSpec::new("x", 1.0, 1.0, ParamKind::Continuous).is_err());
        assert!(ParameterSpec::new("x", 1.5, 4.0, ParamKind::Integer).is_err());
        let p = ParameterSpec::new("x", 0.0, 1.0, ParamKind::Continuous).unwrap();
        assert!(ContextSpace::new(vec![p.clone(), p]).is_err());
    }

    #[test]
    fn json_round_trip_uses_names() {
        let s = space();
        let c = s.midpoint();
        let obj = s.to_json(&c);
        let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        assert_eq!(keys, TRAFFIC_PARAM_NAMES);
        assert_eq!(obj["headwayTime"], Value::from(3));
        assert_eq!(s.from_json(&obj).unwrap(), c);
    }
}
