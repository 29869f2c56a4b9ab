//! Conditional probability paths `p_t(dx | z)` and the empirical data measure.
//!
//! A [`CondPath`] is a product of one-dimensional factors. Euclidean factors
//! act on consecutive coordinates of [`State::x`], discrete factors on
//! consecutive entries of [`State::tokens`]. Each factor is one of
//!
//! * `MixtureUniform`: `kappa_t delta_z + (1 - kappa_t) Unif[a1, a2]`,
//! * `MixtureDiscrete`: `kappa_t delta_z + (1 - kappa_t) Unif{0..N}`,
//! * `GeometricAverage`: `N(kappa_t z, (1 - kappa_t)^2)`.
//!
//! Mixture atoms are kept exactly, as a separate atom-mass channel, rather
//! than smoothed into narrow Gaussians.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{normal_log_pdf, normal_pdf, softmax_in_place};
use crate::schedule::{Schedule, SINGULAR_GUARD};

/// Two Euclidean coordinates closer than this count as the same atom.
pub const ATOM_TOL: f64 = 1e-9;

/// A point of the product state space: Euclidean coordinates and tokens.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub x: Vec<f64>,
    pub tokens: Vec<usize>,
}

impl State {
    pub fn euclid(x: Vec<f64>) -> Self {
        State { x, tokens: Vec::new() }
    }

    pub fn discrete(tokens: Vec<usize>) -> Self {
        State { x: Vec::new(), tokens }
    }

    pub fn signature(&self) -> Signature {
        Signature {
            euclid: self.x.len(),
            discrete: self.tokens.len(),
        }
    }
}

/// Shape of a state: how many Euclidean and how many discrete coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Signature {
    pub euclid: usize,
    pub discrete: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathKind {
    MixtureUniform {
        a1: f64,
        a2: f64,
        #[serde(default)]
        schedule: Schedule,
    },
    MixtureDiscrete {
        vocab_size: usize,
        #[serde(default)]
        schedule: Schedule,
    },
    GeometricAverage {
        #[serde(default)]
        schedule: Schedule,
    },
}

/// Per-coordinate likelihood used for posterior weighting. Atom matches
/// dominate any finite density, so they are counted separately.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LogLik {
    atoms: u32,
    log: f64,
}

impl PathKind {
    pub fn schedule(&self) -> Schedule {
        match *self {
            PathKind::MixtureUniform { schedule, .. }
            | PathKind::MixtureDiscrete { schedule, .. }
            | PathKind::GeometricAverage { schedule } => schedule,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, PathKind::MixtureDiscrete { .. })
    }

    fn validate(&self) -> Result<()> {
        match *self {
            PathKind::MixtureUniform { a1, a2, .. } => {
                if !(a1.is_finite() && a2.is_finite() && a1 < a2) {
                    return Err(Error::domain(format!("mixture support needs a1 < a2, got [{a1}, {a2}]")));
                }
            }
            PathKind::MixtureDiscrete { vocab_size, .. } => {
                if vocab_size == 0 {
                    return Err(Error::domain("vocabulary size must be positive"));
                }
            }
            PathKind::GeometricAverage { .. } => {}
        }
        Ok(())
    }

    fn check_token(&self, v: f64) -> Result<()> {
        if let PathKind::MixtureDiscrete { vocab_size, .. } = *self {
            if v.fract() != 0.0 || v < 0.0 || v >= vocab_size as f64 {
                return Err(Error::domain(format!("token {v} outside [0, {vocab_size})")));
            }
        }
        Ok(())
    }

    /// One-dimensional conditional density at `x`, split into the part
    /// absolutely continuous w.r.t. the reference measure and the atom mass
    /// sitting at `z`. Discrete factors take token indices as reals and are
    /// read against counting measure.
    pub fn cond_density(&self, z: f64, t: f64, x: f64) -> Result<(f64, f64)> {
        self.check_token(z)?;
        self.check_token(x)?;
        let (k, _) = self.schedule().eval(t)?;
        match *self {
            PathKind::GeometricAverage { .. } => {
                if 1.0 - k < SINGULAR_GUARD {
                    return Err(Error::DegenerateDensity(format!(
                        "geometric path is a point mass at t = {t}; use atom semantics"
                    )));
                }
                Ok((normal_pdf(x, k * z, 1.0 - k), 0.0))
            }
            PathKind::MixtureUniform { a1, a2, .. } => {
                let c = if (a1..=a2).contains(&x) { (1.0 - k) / (a2 - a1) } else { 0.0 };
                Ok((c, k))
            }
            PathKind::MixtureDiscrete { vocab_size, .. } => Ok(((1.0 - k) / vocab_size as f64, k)),
        }
    }

    /// Exact time derivative of both parts of [`PathKind::cond_density`].
    pub fn cond_density_dt(&self, z: f64, t: f64, x: f64) -> Result<(f64, f64)> {
        self.check_token(z)?;
        self.check_token(x)?;
        let (k, kd) = self.schedule().eval(t)?;
        if 1.0 - k < SINGULAR_GUARD {
            return Err(Error::Singularity { t, what: "density time derivative" });
        }
        match *self {
            PathKind::GeometricAverage { .. } => {
                // d/ds N(x; s z, (1-s)^2) = N [ 1/(1-s) - (x - s z)(x - z)/(1-s)^3 ], chained with kappa_dot
                let s = 1.0 - k;
                let n = normal_pdf(x, k * z, s);
                Ok((kd * n * (1.0 / s - (x - k * z) * (x - z) / (s * s * s)), 0.0))
            }
            PathKind::MixtureUniform { a1, a2, .. } => {
                let c = if (a1..=a2).contains(&x) { -kd / (a2 - a1) } else { 0.0 };
                Ok((c, kd))
            }
            PathKind::MixtureDiscrete { vocab_size, .. } => Ok((-kd / vocab_size as f64, kd)),
        }
    }

    fn log_lik(&self, kappa: f64, z: f64, x: f64) -> LogLik {
        match *self {
            PathKind::GeometricAverage { .. } => LogLik {
                atoms: 0,
                log: normal_log_pdf(x, kappa * z, 1.0 - kappa),
            },
            PathKind::MixtureUniform { a1, a2, .. } => {
                if kappa > 0.0 && (x - z).abs() <= ATOM_TOL {
                    LogLik { atoms: 1, log: kappa.ln() }
                } else if (a1..=a2).contains(&x) {
                    LogLik { atoms: 0, log: ((1.0 - kappa) / (a2 - a1)).ln() }
                } else {
                    LogLik { atoms: 0, log: f64::NEG_INFINITY }
                }
            }
            PathKind::MixtureDiscrete { vocab_size, .. } => {
                let mut m = (1.0 - kappa) / vocab_size as f64;
                if x == z {
                    m += kappa;
                }
                LogLik { atoms: 0, log: m.ln() }
            }
        }
    }

    pub(crate) fn sample(&self, z: f64, kappa: f64, rng: &mut impl Rng) -> f64 {
        match *self {
            PathKind::GeometricAverage { .. } => {
                let e: f64 = rng.sample(StandardNormal);
                (1.0 - kappa) * e + kappa * z
            }
            PathKind::MixtureUniform { a1, a2, .. } => {
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                if u < kappa {
                    z
                } else {
                    a1 + (a2 - a1) * v
                }
            }
            PathKind::MixtureDiscrete { vocab_size, .. } => {
                let u: f64 = rng.random();
                let v = rng.random_range(0..vocab_size);
                if u < kappa {
                    z
                } else {
                    v as f64
                }
            }
        }
    }
}

/// One factor of a product path covering `dim` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FactorSpec", into = "FactorSpec")]
pub struct Factor {
    pub kind: PathKind,
    pub dim: usize,
}

/// Flat config form of a [`Factor`]; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorSpec {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab_size: Option<usize>,
    #[serde(default)]
    schedule: Schedule,
    #[serde(default = "one")]
    dim: usize,
}

fn one() -> usize {
    1
}

impl TryFrom<FactorSpec> for Factor {
    type Error = Error;
    fn try_from(f: FactorSpec) -> Result<Self> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::Config(format!("path kind {:?} needs {name}", f.kind)))
        };
        let kind = match f.kind.as_str() {
            "mixture_uniform" | "mixture" => PathKind::MixtureUniform {
                a1: need(f.a1, "a1")?,
                a2: need(f.a2, "a2")?,
                schedule: f.schedule,
            },
            "mixture_discrete" => PathKind::MixtureDiscrete {
                vocab_size: f
                    .vocab_size
                    .ok_or_else(|| Error::Config("mixture_discrete needs vocab_size".into()))?,
                schedule: f.schedule,
            },
            "geometric_average" | "condot" => PathKind::GeometricAverage { schedule: f.schedule },
            other => return Err(Error::Config(format!("unknown path kind {other:?}"))),
        };
        kind.validate()?;
        Ok(Factor { kind, dim: f.dim })
    }
}

impl From<Factor> for FactorSpec {
    fn from(f: Factor) -> Self {
        let mut spec = FactorSpec {
            kind: String::new(),
            a1: None,
            a2: None,
            vocab_size: None,
            schedule: f.kind.schedule(),
            dim: f.dim,
        };
        match f.kind {
            PathKind::MixtureUniform { a1, a2, .. } => {
                spec.kind = "mixture_uniform".into();
                spec.a1 = Some(a1);
                spec.a2 = Some(a2);
            }
            PathKind::MixtureDiscrete { vocab_size, .. } => {
                spec.kind = "mixture_discrete".into();
                spec.vocab_size = Some(vocab_size);
            }
            PathKind::GeometricAverage { .. } => spec.kind = "geometric_average".into(),
        }
        spec
    }
}

/// A factor together with the coordinate range it owns.
#[derive(Debug, Clone)]
pub struct FactorSlot {
    pub kind: PathKind,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Factor>", into = "Vec<Factor>")]
pub struct CondPath {
    factors: Vec<Factor>,
}

impl TryFrom<Vec<Factor>> for CondPath {
    type Error = Error;
    fn try_from(f: Vec<Factor>) -> Result<Self> {
        CondPath::new(f)
    }
}

impl From<CondPath> for Vec<Factor> {
    fn from(p: CondPath) -> Self {
        p.factors
    }
}

impl CondPath {
    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::domain("a path needs at least one factor"));
        }
        for f in &factors {
            f.kind.validate()?;
            if f.dim == 0 {
                return Err(Error::domain("factor dimension must be positive"));
            }
        }
        Ok(CondPath { factors })
    }

    pub fn single(kind: PathKind, dim: usize) -> Result<Self> {
        CondPath::new(vec![Factor { kind, dim }])
    }

    pub fn geometric(schedule: Schedule, dim: usize) -> Result<Self> {
        CondPath::single(PathKind::GeometricAverage { schedule }, dim)
    }

    /// The CondOT path `N(t z, (1 - t)^2)` in `dim` dimensions.
    pub fn condot(dim: usize) -> Result<Self> {
        CondPath::geometric(Schedule::Linear, dim)
    }

    pub fn mixture_uniform(a1: f64, a2: f64, schedule: Schedule, dim: usize) -> Result<Self> {
        CondPath::single(PathKind::MixtureUniform { a1, a2, schedule }, dim)
    }

    pub fn mixture_discrete(vocab_size: usize, schedule: Schedule, dim: usize) -> Result<Self> {
        CondPath::single(PathKind::MixtureDiscrete { vocab_size, schedule }, dim)
    }

    /// Product of two paths; coordinates of `other` follow those of `self`.
    pub fn product(mut self, other: CondPath) -> Self {
        self.factors.extend(other.factors);
        self
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn signature(&self) -> Signature {
        let mut s = Signature::default();
        for f in &self.factors {
            if f.kind.is_discrete() {
                s.discrete += f.dim;
            } else {
                s.euclid += f.dim;
            }
        }
        s
    }

    /// Euclidean slots index `State::x`, discrete slots index `State::tokens`.
    pub fn slots(&self) -> impl Iterator<Item = FactorSlot> + '_ {
        let (mut e, mut d) = (0usize, 0usize);
        self.factors.iter().map(move |f| {
            let off = if f.kind.is_discrete() { &mut d } else { &mut e };
            let range = *off..*off + f.dim;
            *off += f.dim;
            FactorSlot { kind: f.kind, range }
        })
    }

    /// The Euclidean support `[a1, a2]` when every Euclidean factor is a
    /// uniform mixture on the same interval.
    pub fn reflection_bounds(&self) -> Option<(f64, f64)> {
        let mut bounds = None;
        for f in &self.factors {
            match f.kind {
                PathKind::MixtureUniform { a1, a2, .. } => match bounds {
                    None => bounds = Some((a1, a2)),
                    Some(b) if b == (a1, a2) => {}
                    Some(_) => return None,
                },
                PathKind::GeometricAverage { .. } => return None,
                PathKind::MixtureDiscrete { .. } => {}
            }
        }
        bounds
    }

    pub fn check_state(&self, s: &State) -> Result<()> {
        let sig = self.signature();
        if s.signature() != sig {
            return Err(Error::shape(format!(
                "state has {:?}, path expects {:?}",
                s.signature(),
                sig
            )));
        }
        for slot in self.slots() {
            if let PathKind::MixtureDiscrete { vocab_size, .. } = slot.kind {
                if let Some(tok) = s.tokens[slot.range].iter().find(|t| **t >= vocab_size) {
                    return Err(Error::domain(format!("token {tok} outside [0, {vocab_size})")));
                }
            }
        }
        Ok(())
    }

    /// Draws `x ~ p_t(. | z)`, independently per coordinate.
    pub fn sample_cond(&self, z: &State, t: f64, rng: &mut impl Rng) -> Result<State> {
        self.check_state(z)?;
        let mut out = z.clone();
        for slot in self.slots() {
            let (k, _) = slot.kind.schedule().eval(t)?;
            for i in slot.range {
                if slot.kind.is_discrete() {
                    out.tokens[i] = slot.kind.sample(z.tokens[i] as f64, k, rng) as usize;
                } else {
                    out.x[i] = slot.kind.sample(z.x[i], k, rng);
                }
            }
        }
        Ok(out)
    }

    /// Draws from the prior `p_0`, which does not depend on `z`.
    pub fn sample_prior(&self, rng: &mut impl Rng) -> State {
        let sig = self.signature();
        let mut out = State {
            x: vec![0.0; sig.euclid],
            tokens: vec![0; sig.discrete],
        };
        for slot in self.slots() {
            for i in slot.range {
                if slot.kind.is_discrete() {
                    out.tokens[i] = slot.kind.sample(0.0, 0.0, rng) as usize;
                } else {
                    out.x[i] = slot.kind.sample(0.0, 0.0, rng);
                }
            }
        }
        out
    }

    /// Posterior `p(z_i | x_t = x)` over the data points, in log space.
    ///
    /// In mixture factors a coordinate sitting exactly on a data atom makes
    /// the atom term dominate; among data points only those with the largest
    /// number of matched atoms keep positive weight.
    pub fn posterior_weights(&self, data: &Dataset, t: f64, x: &State) -> Result<Vec<f64>> {
        self.check_state(x)?;
        if data.signature() != self.signature() {
            return Err(Error::shape("dataset signature differs from path signature"));
        }
        let mut kappas = Vec::with_capacity(self.factors.len());
        for slot in self.slots() {
            let (k, _) = slot.kind.schedule().eval(t)?;
            if 1.0 - k < SINGULAR_GUARD {
                return Err(Error::Singularity { t, what: "posterior at the data end" });
            }
            kappas.push((slot, k));
        }
        let n = data.len();
        let mut atoms = vec![0u32; n];
        let mut logw = vec![0.0f64; n];
        for (i, z) in data.points().iter().enumerate() {
            let w = data.weights()[i];
            if w <= 0.0 {
                logw[i] = f64::NEG_INFINITY;
                continue;
            }
            let mut acc = LogLik { atoms: 0, log: w.ln() };
            for (slot, k) in &kappas {
                for j in slot.range.clone() {
                    let ll = if slot.kind.is_discrete() {
                        slot.kind.log_lik(*k, z.tokens[j] as f64, x.tokens[j] as f64)
                    } else {
                        slot.kind.log_lik(*k, z.x[j], x.x[j])
                    };
                    acc.atoms += ll.atoms;
                    acc.log += ll.log;
                }
            }
            atoms[i] = acc.atoms;
            logw[i] = acc.log;
        }
        let top = atoms
            .iter()
            .zip(&logw)
            .filter(|(_, l)| l.is_finite())
            .map(|(a, _)| *a)
            .max()
            .ok_or(Error::EmptyPosterior)?;
        for (a, l) in atoms.iter().zip(logw.iter_mut()) {
            if *a < top {
                *l = f64::NEG_INFINITY;
            }
        }
        if !softmax_in_place(&mut logw) {
            return Err(Error::EmptyPosterior);
        }
        Ok(logw)
    }
}

/// Empirical data measure `sum_i w_i delta_{z_i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetRepr", into = "DatasetRepr")]
pub struct Dataset {
    points: Vec<State>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRepr {
    points: Vec<State>,
    weights: Vec<f64>,
}

impl TryFrom<DatasetRepr> for Dataset {
    type Error = Error;
    fn try_from(r: DatasetRepr) -> Result<Self> {
        Dataset::new(r.points, Some(r.weights))
    }
}

impl From<Dataset> for DatasetRepr {
    fn from(d: Dataset) -> Self {
        DatasetRepr { points: d.points, weights: d.weights }
    }
}

impl Dataset {
    /// Builds a dataset, normalizing the weights to sum to one.
    pub fn new(points: Vec<State>, weights: Option<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("dataset is empty"));
        }
        let sig = points[0].signature();
        if points.iter().any(|p| p.signature() != sig) {
            return Err(Error::shape("dataset points have different signatures"));
        }
        let raw = weights.unwrap_or_else(|| vec![1.0; points.len()]);
        if raw.len() != points.len() {
            return Err(Error::shape("weights and points differ in length"));
        }
        if raw.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::domain("weights must be finite and nonnegative"));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::domain("weights sum to zero"));
        }
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut c = 0.0;
        for w in &weights {
            c += w;
            cumulative.push(c);
        }
        Ok(Dataset {
            points,
            weights,
            cumulative,
        })
    }

    pub fn euclid(points: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> Result<Self> {
        Dataset::new(points.into_iter().map(State::euclid).collect(), weights)
    }

    /// The symmetric pair `{-1, +1}` with equal weights.
    pub fn two_point() -> Self {
        Dataset::euclid(vec![vec![-1.0], vec![1.0]], None).expect("static dataset")
    }

    /// Cell centres of the "on" squares of a `resolution x resolution`
    /// checkerboard over `[lo, hi]^2`, equally weighted.
    pub fn checkerboard_2d(resolution: usize, lo: f64, hi: f64) -> Result<Self> {
        if resolution < 2 || lo >= hi {
            return Err(Error::domain("checkerboard needs resolution >= 2 and lo < hi"));
        }
        let w = (hi - lo) / resolution as f64;
        let mut pts = Vec::new();
        for i in 0..resolution {
            for j in 0..resolution {
                if (i + j) % 2 == 0 {
                    pts.push(vec![lo + (i as f64 + 0.5) * w, lo + (j as f64 + 0.5) * w]);
                }
            }
        }
        Dataset::euclid(pts, None)
    }

    /// Loads one point per row. A header row is optional; a column named
    /// `weight` holds point weights and columns whose name starts with `tok`
    /// hold tokens. Without a header every column is Euclidean.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path.as_ref())?;
        let mut rows = rdr.records();
        let first = match rows.next() {
            Some(r) => r?,
            None => return Err(Error::domain("empty CSV dataset")),
        };
        let is_header = first.iter().any(|f| f.parse::<f64>().is_err());
        let roles: Vec<char> = if is_header {
            first
                .iter()
                .map(|h| {
                    if h == "weight" {
                        'w'
                    } else if h.starts_with("tok") {
                        't'
                    } else {
                        'x'
                    }
                })
                .collect()
        } else {
            vec!['x'; first.len()]
        };
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let has_w = roles.contains(&'w');
        let mut push = |rec: &csv::StringRecord, line: usize| -> Result<()> {
            if rec.len() != roles.len() {
                return Err(Error::shape(format!("CSV line {line}: expected {} columns", roles.len())));
            }
            let mut s = State::default();
            for (field, role) in rec.iter().zip(&roles) {
                let bad = || Error::Config(format!("CSV line {line}: cannot parse {field:?}"));
                match role {
                    'w' => weights.push(field.parse::<f64>().map_err(|_| bad())?),
                    't' => s.tokens.push(field.parse::<usize>().map_err(|_| bad())?),
                    _ => s.x.push(field.parse::<f64>().map_err(|_| bad())?),
                }
            }
            points.push(s);
            Ok(())
        };
        if !is_header {
            push(&first, 1)?;
        }
        for (i, rec) in rows.enumerate() {
            push(&rec?, i + 2)?;
        }
        Dataset::new(points, has_w.then_some(weights))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[State] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn signature(&self) -> Signature {
        self.points[0].signature()
    }

    pub fn sample_index(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        self.cumulative
            .partition_point(|c| *c <= u)
            .min(self.points.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::composite_gauss_legendre;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mix01() -> PathKind {
        PathKind::MixtureUniform { a1: 0.0, a2: 1.0, schedule: Schedule::Linear }
    }

    fn mix02() -> PathKind {
        PathKind::MixtureUniform { a1: 0.0, a2: 2.0, schedule: Schedule::Linear }
    }

    fn geo() -> PathKind {
        PathKind::GeometricAverage { schedule: Schedule::Linear }
    }

    #[test]
    fn geometric_path_hits_data_at_one() {
        let p = CondPath::condot(3).unwrap();
        let z = State::euclid(vec![0.3, -2.0, 7.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(p.sample_cond(&z, 1.0, &mut rng).unwrap(), z);
    }

    #[test]
    fn mixture_at_zero_never_returns_the_atom() {
        let p = CondPath::single(mix01(), 1).unwrap();
        let z = State::euclid(vec![0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let s = p.sample_cond(&z, 0.0, &mut rng).unwrap();
            assert!(s.x[0] != 0.25 && (0.0..=1.0).contains(&s.x[0]));
        }
    }

    #[test]
    fn mixture_atom_frequency_is_kappa() {
        let p = CondPath::single(mix01(), 1).unwrap();
        let z = State::euclid(vec![0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| p.sample_cond(&z, 0.5, &mut rng).unwrap().x[0] == 0.25)
            .count();
        // binomial 3-sigma band is 0.0047; the stated band is 0.01
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn signature_mismatch_is_shape_error() {
        let p = CondPath::condot(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = p.sample_cond(&State::euclid(vec![1.0]), 0.5, &mut rng);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn density_examples() {
        let (c, a) = geo().cond_density(0.0, 0.0, 0.0).unwrap();
        assert!((c - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert_eq!(a, 0.0);
        assert_eq!(mix02().cond_density(1.0, 0.5, 0.7).unwrap(), (0.25, 0.5));
        assert_eq!(mix02().cond_density(1.0, 0.5, 3.0).unwrap(), (0.0, 0.5));
        assert!(matches!(
            geo().cond_density(0.0, 1.0, 0.0),
            Err(Error::DegenerateDensity(_))
        ));
    }

    #[test]
    fn density_dt_examples() {
        let (d, _) = geo().cond_density_dt(0.0, 0.0, 0.0).unwrap();
        assert!((d - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert_eq!(mix01().cond_density_dt(0.3, 0.4, 0.5).unwrap(), (-1.0, 1.0));
        assert!(matches!(
            geo().cond_density_dt(0.0, 1.0, 0.0),
            Err(Error::Singularity { .. })
        ));
    }

    #[test]
    fn density_dt_matches_finite_difference() {
        let kinds = [
            geo(),
            PathKind::GeometricAverage { schedule: Schedule::Cosine },
            mix02(),
            PathKind::MixtureUniform { a1: -1.0, a2: 2.0, schedule: Schedule::Polynomial(2.0) },
            PathKind::MixtureDiscrete { vocab_size: 4, schedule: Schedule::Cosine },
        ];
        let h = 1e-5;
        for k in kinds {
            for &t in &[0.1, 0.37, 0.6, 0.85] {
                for &x in &[0.0, 1.0, 2.0, 3.0] {
                    let z = 1.0;
                    let (dc, da) = k.cond_density_dt(z, t, x).unwrap();
                    let (c1, a1) = k.cond_density(z, t + h, x).unwrap();
                    let (c0, a0) = k.cond_density(z, t - h, x).unwrap();
                    let fc = (c1 - c0) / (2.0 * h);
                    let fa = (a1 - a0) / (2.0 * h);
                    assert!((dc - fc).abs() < 1e-6, "{k:?} t={t} x={x}: {dc} vs {fc}");
                    assert!((da - fa).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn densities_normalize() {
        for &t in &[0.0, 0.3, 0.7] {
            let (k, _) = Schedule::Linear.eval(t).unwrap();
            let z = 0.8;
            let std = 1.0 - k;
            let (xs, ws) = composite_gauss_legendre(k * z - 8.0 * std, k * z + 8.0 * std, &[], 400, 5);
            let q: f64 = xs
                .iter()
                .zip(&ws)
                .map(|(x, w)| w * geo().cond_density(z, t, *x).unwrap().0)
                .sum();
            assert!((q - 1.0).abs() < 1e-6);
            let (xs, ws) = composite_gauss_legendre(0.0, 2.0, &[], 400, 5);
            let (_, atom) = mix02().cond_density(z, t, z).unwrap();
            let q: f64 = xs
                .iter()
                .zip(&ws)
                .map(|(x, w)| w * mix02().cond_density(z, t, *x).unwrap().0)
                .sum::<f64>()
                + atom;
            assert!((q - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn posterior_examples() {
        let p = CondPath::condot(1).unwrap();
        let d = Dataset::two_point();
        for &t in &[0.0, 0.3, 0.9] {
            let w = p.posterior_weights(&d, t, &State::euclid(vec![0.0])).unwrap();
            assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        }
        let single = Dataset::euclid(vec![vec![3.0]], None).unwrap();
        assert_eq!(p.posterior_weights(&single, 0.4, &State::euclid(vec![-1.0])).unwrap(), vec![1.0]);

        let d = Dataset::euclid(vec![vec![0.0], vec![2.0]], None).unwrap();
        let w = p.posterior_weights(&d, 0.5, &State::euclid(vec![1.0])).unwrap();
        let e = (-2.0f64).exp();
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((w[0] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn posterior_atom_dominates() {
        let p = CondPath::mixture_uniform(-2.0, 2.0, Schedule::Linear, 2).unwrap();
        let d = Dataset::euclid(vec![vec![-1.0, 0.5], vec![1.0, 0.5], vec![1.0, -0.5]], None).unwrap();
        let w = p.posterior_weights(&d, 0.3, &State::euclid(vec![1.0, 0.1])).unwrap();
        assert_eq!(w, vec![0.0, 0.5, 0.5]);
        let w = p.posterior_weights(&d, 0.3, &State::euclid(vec![1.0, -0.5])).unwrap();
        assert_eq!(w, vec![0.0, 0.0, 1.0]);
        let w = p.posterior_weights(&d, 0.3, &State::euclid(vec![0.2, 0.1])).unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn posterior_empty_outside_support() {
        let p = CondPath::mixture_uniform(0.0, 1.0, Schedule::Linear, 1).unwrap();
        let d = Dataset::euclid(vec![vec![0.5]], None).unwrap();
        assert!(matches!(
            p.posterior_weights(&d, 0.3, &State::euclid(vec![4.0])),
            Err(Error::EmptyPosterior)
        ));
    }

    #[test]
    fn checkerboard_has_half_the_cells() {
        let d = Dataset::checkerboard_2d(16, -1.0, 1.0).unwrap();
        assert_eq!(d.len(), 128);
        assert!((d.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_loading_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        std::fs::write(&a, "0.5,1.0\n-1,2\n").unwrap();
        let d = Dataset::from_csv(&a).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.points()[1].x, vec![-1.0, 2.0]);
        let b = dir.path().join("b.csv");
        std::fs::write(&b, "x,tok0,weight\n0.5,3,1\n1.5,0,3\n").unwrap();
        let d = Dataset::from_csv(&b).unwrap();
        assert_eq!(d.points()[0].tokens, vec![3]);
        assert_eq!(d.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn sample_index_follows_weights() {
        let d = Dataset::euclid(vec![vec![0.0], vec![1.0]], Some(vec![1.0, 3.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 40_000;
        let ones = (0..n).filter(|_| d.sample_index(&mut rng) == 1).count();
        assert!((ones as f64 / n as f64 - 0.75).abs() < 0.01);
    }
}
