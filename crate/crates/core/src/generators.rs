//! Closed-form conditional generators `F_t^z(x)` that solve the Kolmogorov
//! forward equation for the conditional paths in [`crate::paths`].
//!
//! | path              | flow                       | diffusion                  | jump                                  |
//! |-------------------|----------------------------|----------------------------|---------------------------------------|
//! | geometric average | `(z - x)/(1 - t)`          | none exists                | `[k_t(x)]_+/(1-t)^3`, binned `J_t`    |
//! | uniform mixture   | piecewise linear, see below| reflected, zero drift      | `kappa'/(1-kappa)`, `J = delta_z`     |
//! | discrete mixture  |                            |                            | CTMC rate row toward `z`              |
//!
//! Every generator is returned in the linear parameterization [`GenOut`]:
//! velocity, diagonal diffusion, per-dimension jump measures and
//! per-dimension CTMC rate rows.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::normal_pdf;
use crate::paths::{CondPath, PathKind, Signature, State, ATOM_TOL};
use crate::schedule::{Schedule, SINGULAR_GUARD};

/// `B` equally spaced bin centres spanning `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpBins {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Default for JumpBins {
    fn default() -> Self {
        JumpBins::cells(-3.0, 3.0, 128).expect("static bins")
    }
}

impl JumpBins {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) || count < 2 {
            return Err(Error::domain(format!("bins need lo < hi and count >= 2, got [{lo}, {hi}] x {count}")));
        }
        Ok(JumpBins { lo, hi, count })
    }

    /// Centres of `count` equal cells partitioning `[a, b]`.
    pub fn cells(a: f64, b: f64, count: usize) -> Result<Self> {
        let w = (b - a) / count as f64;
        JumpBins::new(a + 0.5 * w, b - 0.5 * w, count)
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.count - 1) as f64
    }

    #[inline]
    pub fn center(&self, j: usize) -> f64 {
        self.lo + j as f64 * self.spacing()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count).map(|j| self.center(j)).collect()
    }

    pub fn nearest(&self, x: f64) -> usize {
        let j = ((x - self.lo) / self.spacing()).round();
        j.clamp(0.0, (self.count - 1) as f64) as usize
    }

    /// Indices of centres strictly inside `(a, b)`.
    fn strictly_inside(&self, a: f64, b: f64) -> std::ops::Range<usize> {
        let s = self.spacing();
        let mut lo = ((a - self.lo) / s).floor().max(0.0) as usize;
        while lo < self.count && self.center(lo) <= a {
            lo += 1;
        }
        let mut hi = (((b - self.lo) / s).ceil().max(0.0) as usize).min(self.count);
        while hi > lo && self.center(hi - 1) >= b {
            hi -= 1;
        }
        lo..hi.max(lo)
    }
}

/// Destination law of a jump in one coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpKernel {
    Binned { bins: JumpBins, probs: Vec<f64> },
    Atomic { atoms: Vec<f64>, probs: Vec<f64> },
}

impl JumpKernel {
    pub fn uniform(bins: JumpBins) -> Self {
        JumpKernel::Binned {
            bins,
            probs: vec![1.0 / bins.count as f64; bins.count],
        }
    }

    pub fn probs(&self) -> &[f64] {
        match self {
            JumpKernel::Binned { probs, .. } | JumpKernel::Atomic { probs, .. } => probs,
        }
    }

    pub fn point(&self, j: usize) -> f64 {
        match self {
            JumpKernel::Binned { bins, .. } => bins.center(j),
            JumpKernel::Atomic { atoms, .. } => atoms[j],
        }
    }

    /// `E_{y ~ J}[f(y)]`.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.probs()
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(j, p)| p * f(self.point(j)))
            .sum()
    }
}

/// Jump part of one coordinate: intensity and (optionally materialized)
/// destination kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpDim {
    pub intensity: f64,
    pub kernel: Option<JumpKernel>,
}

/// Linear parameterization `F_t(x)` of a generator on a product space.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenOut {
    pub velocity: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub jumps: Vec<Option<JumpDim>>,
    /// Per discrete coordinate, rates `Q(y; x)` over the vocabulary with
    /// `Q(x; x) = -sum_{y != x} Q(y; x)`.
    pub rates: Vec<Vec<f64>>,
}

impl GenOut {
    pub fn zeros(sig: Signature) -> Self {
        GenOut {
            velocity: vec![0.0; sig.euclid],
            diffusion: vec![0.0; sig.euclid],
            jumps: vec![None; sig.euclid],
            rates: vec![Vec::new(); sig.discrete],
        }
    }

    pub fn flow(velocity: Vec<f64>) -> Self {
        let n = velocity.len();
        GenOut {
            velocity,
            diffusion: vec![0.0; n],
            jumps: vec![None; n],
            rates: Vec::new(),
        }
    }

    pub fn signature(&self) -> Signature {
        Signature {
            euclid: self.velocity.len(),
            discrete: self.rates.len(),
        }
    }

    pub fn has_jumps(&self) -> bool {
        self.jumps.iter().flatten().any(|j| j.intensity > 0.0)
    }

    pub fn is_pure_flow(&self) -> bool {
        self.diffusion.iter().all(|d| *d == 0.0)
            && !self.has_jumps()
            && self.rates.iter().all(|r| r.iter().all(|q| *q == 0.0))
    }

    /// Checks nonnegativity, simplex sums and zero row sums.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.velocity.len();
        if self.diffusion.len() != n || self.jumps.len() != n {
            return Err(Error::shape("velocity, diffusion and jump blocks differ in length"));
        }
        if let Some(d) = self.diffusion.iter().find(|d| !(**d >= 0.0)) {
            return Err(Error::contract(format!("negative diffusion coefficient {d}")));
        }
        for j in self.jumps.iter().flatten() {
            if !(j.intensity >= 0.0) {
                return Err(Error::contract(format!("negative jump intensity {}", j.intensity)));
            }
            if let (true, Some(k)) = (j.intensity > 0.0, &j.kernel) {
                let s: f64 = k.probs().iter().sum();
                if (s - 1.0).abs() > 1e-9 || k.probs().iter().any(|p| *p < 0.0) {
                    return Err(Error::contract(format!("jump kernel is not a probability vector (sum {s})")));
                }
            }
        }
        for row in &self.rates {
            let s: f64 = row.iter().sum();
            if s.abs() > 1e-9 {
                return Err(Error::contract(format!("rate row sums to {s}")));
            }
        }
        Ok(())
    }

    /// Restricts to a block of Euclidean and discrete coordinates.
    pub fn project(
        &self,
        euclid: std::ops::Range<usize>,
        discrete: std::ops::Range<usize>,
    ) -> GenOut {
        GenOut {
            velocity: self.velocity[euclid.clone()].to_vec(),
            diffusion: self.diffusion[euclid.clone()].to_vec(),
            jumps: self.jumps[euclid].to_vec(),
            rates: self.rates[discrete].to_vec(),
        }
    }
}

/// Weighted sum of generators, with jump parts summed as measures.
#[derive(Debug, Clone)]
pub(crate) struct GenAccum {
    out: GenOut,
    /// Per Euclidean coordinate: accumulated `sum w lambda p` and
    /// `sum w lambda`.
    masses: Vec<Option<(JumpKernel, f64)>>,
    materialize: bool,
}

impl GenAccum {
    pub fn new(sig: Signature, materialize: bool) -> Self {
        GenAccum {
            out: GenOut::zeros(sig),
            masses: vec![None; sig.euclid],
            materialize,
        }
    }

    pub fn add(&mut self, g: &GenOut, w: f64) -> Result<()> {
        if g.signature() != self.out.signature() {
            return Err(Error::shape(format!(
                "cannot combine generators of shapes {:?} and {:?}",
                g.signature(),
                self.out.signature()
            )));
        }
        if w == 0.0 {
            return Ok(());
        }
        for i in 0..g.velocity.len() {
            self.out.velocity[i] += w * g.velocity[i];
            self.out.diffusion[i] += w * g.diffusion[i];
            if let Some(j) = &g.jumps[i] {
                self.add_jump(i, j, w)?;
            }
        }
        for (acc, row) in self.out.rates.iter_mut().zip(&g.rates) {
            if row.is_empty() {
                continue;
            }
            if acc.is_empty() {
                acc.resize(row.len(), 0.0);
            }
            if acc.len() != row.len() {
                return Err(Error::shape("rate rows over different vocabularies"));
            }
            for (a, q) in acc.iter_mut().zip(row) {
                *a += w * q;
            }
        }
        Ok(())
    }

    pub fn add_jump(&mut self, i: usize, j: &JumpDim, w: f64) -> Result<()> {
        let lam = w * j.intensity;
        if lam == 0.0 {
            return Ok(());
        }
        if !self.materialize {
            let slot = self.masses[i].get_or_insert_with(|| {
                (JumpKernel::Atomic { atoms: Vec::new(), probs: Vec::new() }, 0.0)
            });
            slot.1 += lam;
            return Ok(());
        }
        let kernel = j
            .kernel
            .as_ref()
            .ok_or_else(|| Error::State("jump kernel was not materialized".into()))?;
        match (&mut self.masses[i], kernel) {
            (slot @ None, k) => {
                let scaled = match k {
                    JumpKernel::Binned { bins, probs } => JumpKernel::Binned {
                        bins: *bins,
                        probs: probs.iter().map(|p| p * lam).collect(),
                    },
                    JumpKernel::Atomic { atoms, probs } => JumpKernel::Atomic {
                        atoms: atoms.clone(),
                        probs: probs.iter().map(|p| p * lam).collect(),
                    },
                };
                *slot = Some((scaled, lam));
            }
            (
                Some((JumpKernel::Binned { bins: b0, probs: acc }, total)),
                JumpKernel::Binned { bins, probs },
            ) => {
                if b0 != bins {
                    return Err(Error::contract("jump measures live on different bins"));
                }
                for (a, p) in acc.iter_mut().zip(probs) {
                    *a += lam * p;
                }
                *total += lam;
            }
            (
                Some((JumpKernel::Atomic { atoms: a0, probs: acc }, total)),
                JumpKernel::Atomic { atoms, probs },
            ) => {
                for (x, p) in atoms.iter().zip(probs) {
                    match a0.iter().position(|a| (a - x).abs() <= ATOM_TOL) {
                        Some(pos) if atoms.len() == 1 => acc[pos] += lam * p,
                        _ => {
                            a0.push(*x);
                            acc.push(lam * p);
                        }
                    }
                }
                *total += lam;
            }
            _ => return Err(Error::contract("cannot add binned and atomic jump measures")),
        }
        Ok(())
    }

    pub fn finish(mut self) -> GenOut {
        for (i, m) in self.masses.into_iter().enumerate() {
            if let Some((mut kernel, total)) = m {
                if total > 0.0 && self.materialize {
                    match &mut kernel {
                        JumpKernel::Binned { probs, .. } | JumpKernel::Atomic { probs, .. } => {
                            let s: f64 = probs.iter().sum();
                            probs.iter_mut().for_each(|p| *p /= s);
                        }
                    }
                }
                self.out.jumps[i] = Some(JumpDim {
                    intensity: total,
                    kernel: self.materialize.then_some(kernel),
                });
            }
        }
        self.out
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("time {t} outside [0, 1]")));
    }
    if 1.0 - t < SINGULAR_GUARD {
        return Err(Error::Singularity { t, what: "1 - t" });
    }
    Ok(())
}

fn kappa_pair(s: Schedule, t: f64) -> Result<(f64, f64)> {
    let (k, kd) = s.eval(t)?;
    if 1.0 - k < SINGULAR_GUARD {
        return Err(Error::Singularity { t, what: "1 - kappa" });
    }
    Ok((k, kd))
}

/// CondOT velocity `(z - x)/(1 - t)` per coordinate.
pub fn condot_flow(z: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_t(t)?;
    if z.len() != x.len() {
        return Err(Error::shape("z and x differ in length"));
    }
    Ok(z.iter().zip(x).map(|(z, x)| (z - x) / (1.0 - t)).collect())
}

/// Velocity of the geometric path `N(kappa z, (1 - kappa)^2)` for one
/// coordinate: `kappa' (z - x)/(1 - kappa)`.
pub fn geometric_flow(z: f64, x: f64, kappa: f64, kappa_dot: f64) -> f64 {
    kappa_dot * (z - x) / (1.0 - kappa)
}

/// `k_s(x) = x^2 - (s + 1) x z - (1 - s)^2 + s z^2`.
#[inline]
pub fn condot_jump_poly(s: f64, z: f64, x: f64) -> f64 {
    x * x - (s + 1.0) * x * z - (1.0 - s) * (1.0 - s) + s * z * z
}

/// Roots of [`condot_jump_poly`]; the jump kernel lives between them.
pub fn condot_jump_roots(s: f64, z: f64) -> (f64, f64) {
    let c = 0.5 * (s + 1.0) * z;
    let r = (1.0 - s).abs() * (0.25 * z * z + 1.0).sqrt();
    (c - r, c + r)
}

/// Minimal jump process of the geometric path, reparameterized through the
/// schedule: intensity `kappa' [k_kappa(x)]_+ / (1 - kappa)^3` and kernel
/// `prop. to [-k_kappa(c)]_+ N(c; kappa z, (1 - kappa)^2)` on the bin centres.
///
/// When no bin centre carries mass the intensity is zeroed and the kernel is
/// the uniform placeholder. With `materialize = false` only the intensity is
/// computed.
pub fn geometric_jump(
    z: f64,
    x: f64,
    kappa: f64,
    kappa_dot: f64,
    bins: &JumpBins,
    materialize: bool,
) -> JumpDim {
    let s = 1.0 - kappa;
    let lam = kappa_dot * condot_jump_poly(kappa, z, x).max(0.0) / (s * s * s);
    let (r1, r2) = condot_jump_roots(kappa, z);
    let inside = bins.strictly_inside(r1, r2);
    if lam <= 0.0 || inside.is_empty() {
        return JumpDim {
            intensity: 0.0,
            kernel: materialize.then(|| JumpKernel::uniform(*bins)),
        };
    }
    if !materialize {
        return JumpDim { intensity: lam, kernel: None };
    }
    let mut probs = vec![0.0; bins.count];
    let mut total = 0.0;
    for j in inside {
        let c = bins.center(j);
        let m = (-condot_jump_poly(kappa, z, c)).max(0.0) * normal_pdf(c, kappa * z, s);
        probs[j] = m;
        total += m;
    }
    if !(total > 0.0) {
        return JumpDim {
            intensity: 0.0,
            kernel: Some(JumpKernel::uniform(*bins)),
        };
    }
    probs.iter_mut().for_each(|p| *p /= total);
    JumpDim {
        intensity: lam,
        kernel: Some(JumpKernel::Binned { bins: *bins, probs }),
    }
}

/// CondOT jump generator per coordinate (linear schedule).
pub fn condot_jump(z: &[f64], t: f64, x: &[f64], bins: &JumpBins) -> Result<Vec<JumpDim>> {
    check_t(t)?;
    if z.len() != x.len() {
        return Err(Error::shape("z and x differ in length"));
    }
    Ok(z.iter()
        .zip(x)
        .map(|(z, x)| geometric_jump(*z, *x, t, 1.0, bins, true))
        .collect())
}

/// Flow for the uniform-prior mixture path:
/// `kappa'/(1 - kappa) * ((x - a1) - (a2 - a1) 1[x > z])`, and `0` on the atom.
///
/// Vanishes at both ends of `[a1, a2]`, so no mass leaves the support.
pub fn mixture_flow(z: f64, t: f64, x: f64, a1: f64, a2: f64, s: Schedule) -> Result<f64> {
    let (k, kd) = kappa_pair(s, t)?;
    if !(a1..=a2).contains(&x) {
        return Err(Error::domain(format!("x = {x} outside [{a1}, {a2}]")));
    }
    if (x - z).abs() <= ATOM_TOL {
        return Ok(0.0);
    }
    let step = if x > z { a2 - a1 } else { 0.0 };
    Ok(kd / (1.0 - k) * ((x - a1) - step))
}

/// Zero-drift diffusion coefficient for the uniform-prior mixture path; the
/// process is reflected at `a1` and `a2`.
pub fn mixture_diffusion(z: f64, t: f64, x: f64, a1: f64, a2: f64, s: Schedule) -> Result<f64> {
    let (k, kd) = kappa_pair(s, t)?;
    if !(a1..=a2).contains(&x) {
        return Err(Error::domain(format!("x = {x} outside [{a1}, {a2}]")));
    }
    let l = a2 - a1;
    let g = 0.5 * (z - a1) * (z - a1) / l + (x - z).max(0.0) - 0.5 * (x - a1) * (x - a1) / l;
    Ok((2.0 * kd * l / (1.0 - k) * g).max(0.0))
}

/// Mixture jump: intensity `kappa'/(1 - kappa)` and destination exactly `z`,
/// on any state space.
pub fn mixture_jump<S: Clone>(z: &S, t: f64, s: Schedule) -> Result<(f64, S)> {
    Ok((s.hazard(t).map_err(|e| match e {
        Error::Singularity { .. } => Error::Singularity { t, what: "1 - kappa" },
        e => e,
    })?, z.clone()))
}

/// Rate row `Q(. ; x)` of the discrete mixture path.
pub fn ctmc_mixture_rates(z_tok: usize, t: f64, x_tok: usize, n: usize, s: Schedule) -> Result<Vec<f64>> {
    if z_tok >= n || x_tok >= n {
        return Err(Error::domain(format!("tokens ({z_tok}, {x_tok}) outside [0, {n})")));
    }
    let mut row = vec![0.0; n];
    let lam = s.hazard(t)?;
    if x_tok != z_tok {
        row[z_tok] = lam;
        row[x_tok] = -lam;
    }
    Ok(row)
}

/// Point mass of a path with its time derivative, for
/// [`jump_from_density_path`].
#[derive(Debug, Clone, Copy)]
pub struct AtomRate {
    pub at: f64,
    pub mass: f64,
    pub dmass: f64,
}

/// Minimal jump solution for a path given on a quadrature grid.
#[derive(Debug, Clone)]
pub struct GridJump {
    /// `lambda` at each grid node.
    pub intensity: Vec<f64>,
    /// `lambda` at each atom.
    pub atom_intensity: Vec<f64>,
    /// State-independent destination law over grid nodes followed by atoms.
    pub kernel: JumpKernel,
}

/// `lambda = [-d_t p]_+ / p`, `J prop. to [d_t p]_+`, valid on any state space.
/// `weights` are the quadrature weights of `grid`.
pub fn jump_from_density_path(
    p: &[f64],
    dpdt: &[f64],
    grid: &[f64],
    weights: &[f64],
    atoms: &[AtomRate],
) -> Result<GridJump> {
    if p.len() != grid.len() || dpdt.len() != grid.len() || weights.len() != grid.len() {
        return Err(Error::shape("density arrays and grid differ in length"));
    }
    if let Some(v) = p.iter().chain(atoms.iter().map(|a| &a.mass)).find(|v| !(**v > 0.0)) {
        return Err(Error::domain(format!("density must be positive on the grid, found {v}")));
    }
    let intensity = p.iter().zip(dpdt).map(|(p, d)| (-d).max(0.0) / p).collect();
    let atom_intensity = atoms.iter().map(|a| (-a.dmass).max(0.0) / a.mass).collect();
    let mut pts: Vec<f64> = grid.to_vec();
    let mut probs: Vec<f64> = dpdt.iter().zip(weights).map(|(d, w)| d.max(0.0) * w).collect();
    for a in atoms {
        pts.push(a.at);
        probs.push(a.dmass.max(0.0));
    }
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        probs.iter_mut().for_each(|q| *q /= total);
    } else {
        let n = probs.len() as f64;
        probs.iter_mut().for_each(|q| *q = 1.0 / n);
        return Ok(GridJump {
            intensity: vec![0.0; grid.len()],
            atom_intensity: vec![0.0; atoms.len()],
            kernel: JumpKernel::Atomic { atoms: pts, probs },
        });
    }
    Ok(GridJump {
        intensity,
        atom_intensity,
        kernel: JumpKernel::Atomic { atoms: pts, probs },
    })
}

/// Markov model class used for the Euclidean factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelClass {
    Flow,
    Diffusion,
    Jump,
}

impl fmt::Display for ModelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelClass::Flow => "flow",
            ModelClass::Diffusion => "diffusion",
            ModelClass::Jump => "jump",
        })
    }
}

/// Conditional generator choice: a single model class or a Markov
/// superposition of several with weights summing to one. Discrete factors
/// always use the CTMC mixture rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GeneratorSpec {
    parts: Vec<(ModelClass, f64)>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::flow()
    }
}

impl GeneratorSpec {
    pub fn single(c: ModelClass) -> Self {
        GeneratorSpec { parts: vec![(c, 1.0)] }
    }

    pub fn flow() -> Self {
        GeneratorSpec::single(ModelClass::Flow)
    }

    pub fn jump() -> Self {
        GeneratorSpec::single(ModelClass::Jump)
    }

    pub fn diffusion() -> Self {
        GeneratorSpec::single(ModelClass::Diffusion)
    }

    pub fn superposition(parts: Vec<(ModelClass, f64)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::contract("superposition needs at least one part"));
        }
        if parts.iter().any(|(_, w)| !(*w >= 0.0)) {
            return Err(Error::contract("superposition weights must be nonnegative"));
        }
        let s: f64 = parts.iter().map(|(_, w)| w).sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("superposition weights sum to {s}, not 1")));
        }
        Ok(GeneratorSpec { parts })
    }

    pub fn parts(&self) -> &[(ModelClass, f64)] {
        &self.parts
    }

    pub fn uses(&self, c: ModelClass) -> bool {
        self.parts.iter().any(|(p, w)| *p == c && *w > 0.0)
    }

    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.parts.len() {
            return Err(Error::Config("number of superposition weights differs from parts".into()));
        }
        GeneratorSpec::superposition(self.parts.iter().zip(weights).map(|((c, _), w)| (*c, *w)).collect())
    }

    /// Whether any part has a state-dependent intensity that varies with `z`.
    pub(crate) fn intensity_depends_on_z(&self, kind: &PathKind) -> bool {
        self.uses(ModelClass::Jump) && matches!(kind, PathKind::GeometricAverage { .. })
    }
}

impl FromStr for GeneratorSpec {
    type Err = Error;

    /// `flow`, `diffusion`, `jump`, `ctmc`, or `superposition:a+b[+c]`
    /// (equal weights unless `superposition:flow=0.3,jump=0.7`).
    fn from_str(s: &str) -> Result<Self> {
        fn class(s: &str) -> Result<ModelClass> {
            match s.trim() {
                "flow" => Ok(ModelClass::Flow),
                "diffusion" => Ok(ModelClass::Diffusion),
                "jump" | "ctmc" => Ok(ModelClass::Jump),
                o => Err(Error::Config(format!("unknown generator {o:?}"))),
            }
        }
        let s = s.trim();
        match s.strip_prefix("superposition:") {
            None => Ok(GeneratorSpec::single(class(s)?)),
            Some(rest) => {
                if rest.contains('=') {
                    let mut parts = Vec::new();
                    for item in rest.split(',') {
                        let (c, w) = item
                            .split_once('=')
                            .ok_or_else(|| Error::Config(format!("bad superposition item {item:?}")))?;
                        let w: f64 = w
                            .trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad weight in {item:?}")))?;
                        parts.push((class(c)?, w));
                    }
                    GeneratorSpec::superposition(parts).map_err(|e| Error::Config(e.to_string()))
                } else {
                    let cs: Vec<ModelClass> = rest.split('+').map(class).collect::<Result<_>>()?;
                    let w = 1.0 / cs.len() as f64;
                    let mut parts: Vec<(ModelClass, f64)> = cs.into_iter().map(|c| (c, w)).collect();
                    // make the weights sum to exactly one
                    let s: f64 = parts.iter().map(|p| p.1).sum();
                    parts.last_mut().unwrap().1 += 1.0 - s;
                    Ok(GeneratorSpec { parts })
                }
            }
        }
    }
}

impl fmt::Display for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let [(c, _)] = self.parts.as_slice() {
            return write!(f, "{c}");
        }
        write!(f, "superposition:")?;
        for (i, (c, w)) in self.parts.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}={w}")?;
        }
        Ok(())
    }
}

impl TryFrom<String> for GeneratorSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GeneratorSpec> for String {
    fn from(g: GeneratorSpec) -> String {
        g.to_string()
    }
}

/// Conditional generator of one model class for one Euclidean coordinate.
pub(crate) fn euclid_dim(
    kind: &PathKind,
    class: ModelClass,
    z: f64,
    t: f64,
    x: f64,
    bins: &JumpBins,
    materialize: bool,
) -> Result<(f64, f64, Option<JumpDim>)> {
    match (*kind, class) {
        (PathKind::GeometricAverage { schedule }, ModelClass::Flow) => {
            let (k, kd) = kappa_pair(schedule, t)?;
            Ok((geometric_flow(z, x, k, kd), 0.0, None))
        }
        (PathKind::GeometricAverage { schedule }, ModelClass::Jump) => {
            let (k, kd) = kappa_pair(schedule, t)?;
            Ok((0.0, 0.0, Some(geometric_jump(z, x, k, kd, bins, materialize))))
        }
        (PathKind::GeometricAverage { .. }, ModelClass::Diffusion) => Err(Error::Unsupported(
            "the geometric-average path has no zero-drift diffusion solution".into(),
        )),
        (PathKind::MixtureUniform { a1, a2, schedule }, ModelClass::Flow) => {
            Ok((mixture_flow(z, t, x, a1, a2, schedule)?, 0.0, None))
        }
        (PathKind::MixtureUniform { a1, a2, schedule }, ModelClass::Diffusion) => {
            Ok((0.0, mixture_diffusion(z, t, x, a1, a2, schedule)?, None))
        }
        (PathKind::MixtureUniform { schedule, .. }, ModelClass::Jump) => {
            let (lam, target) = mixture_jump(&z, t, schedule)?;
            let kernel = JumpKernel::Atomic { atoms: vec![target], probs: vec![1.0] };
            Ok((0.0, 0.0, Some(JumpDim { intensity: lam, kernel: materialize.then_some(kernel) })))
        }
        (PathKind::MixtureDiscrete { .. }, _) => Err(Error::shape("discrete factor used as Euclidean")),
    }
}

/// Conditional generator `F_t^z(x)` on the full product state.
pub fn cond_genout(
    path: &CondPath,
    spec: &GeneratorSpec,
    bins: &JumpBins,
    z: &State,
    t: f64,
    x: &State,
    materialize: bool,
) -> Result<GenOut> {
    let sig = path.signature();
    let mut acc = GenAccum::new(sig, materialize);
    let mut out = GenOut::zeros(sig);
    for slot in path.slots() {
        match slot.kind {
            PathKind::MixtureDiscrete { vocab_size, schedule } => {
                for i in slot.range {
                    out.rates[i] = ctmc_mixture_rates(z.tokens[i], t, x.tokens[i], vocab_size, schedule)?;
                }
            }
            kind => {
                for i in slot.range {
                    for (class, w) in spec.parts() {
                        if *w == 0.0 {
                            continue;
                        }
                        let (u, d, j) = euclid_dim(&kind, *class, z.x[i], t, x.x[i], bins, materialize)?;
                        out.velocity[i] += w * u;
                        out.diffusion[i] += w * d;
                        if let Some(j) = j {
                            acc.add_jump(i, &j, *w)?;
                        }
                    }
                }
            }
        }
    }
    let jumps = acc.finish().jumps;
    out.jumps = jumps;
    Ok(out)
}

/// Destination kernel of the conditional jump in coordinate `i` only.
pub(crate) fn cond_jump_kernel(
    path: &CondPath,
    spec: &GeneratorSpec,
    bins: &JumpBins,
    z: &State,
    t: f64,
    x: &State,
    i: usize,
) -> Result<Option<JumpDim>> {
    let slot = path
        .slots()
        .find(|s| !s.kind.is_discrete() && s.range.contains(&i))
        .ok_or_else(|| Error::shape(format!("no Euclidean coordinate {i}")))?;
    let mut acc = GenAccum::new(Signature { euclid: 1, discrete: 0 }, true);
    for (class, w) in spec.parts() {
        if *class == ModelClass::Jump && *w > 0.0 {
            let (_, _, j) = euclid_dim(&slot.kind, *class, z.x[i], t, x.x[i], bins, true)?;
            if let Some(j) = j {
                acc.add_jump(0, &j, *w)?;
            }
        }
    }
    Ok(acc.finish().jumps.pop().flatten())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::composite_gauss_legendre;

    #[test]
    fn condot_flow_examples() {
        assert_eq!(condot_flow(&[1.0], 0.0, &[0.0]).unwrap(), vec![1.0]);
        assert_eq!(condot_flow(&[0.7], 0.3, &[0.7]).unwrap(), vec![0.0]);
        assert_eq!(condot_flow(&[2.0], 0.5, &[1.0]).unwrap(), vec![2.0]);
        assert!(matches!(condot_flow(&[1.0], 1.0, &[0.0]), Err(Error::Singularity { .. })));
    }

    #[test]
    fn condot_jump_examples() {
        let bins = JumpBins::new(-4.0, 4.0, 256).unwrap();
        let j = &condot_jump(&[0.0], 0.0, &[2.0], &bins).unwrap()[0];
        assert!((j.intensity - 3.0).abs() < 1e-12);
        let s: f64 = j.kernel.as_ref().unwrap().probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);

        for &(t, z) in &[(0.0, 0.0), (0.3, 1.5), (0.8, -1.0)] {
            let (r1, r2) = condot_jump_roots(t, z);
            // roots in the |1-t| sqrt(z^2+4)/2 form
            let c = (t + 1.0) * z / 2.0;
            let r = (1.0 - t) * (z * z + 4.0f64).sqrt() / 2.0;
            assert!((r1 - (c - r)).abs() < 1e-12 && (r2 - (c + r)).abs() < 1e-12);
            for k in 1..10 {
                let x = r1 + (r2 - r1) * k as f64 / 10.0;
                let j = &condot_jump(&[z], t, &[x], &bins).unwrap()[0];
                assert_eq!(j.intensity, 0.0);
            }
        }
        assert!(matches!(condot_jump(&[0.0], 1.0, &[0.0], &bins), Err(Error::Singularity { .. })));
    }

    #[test]
    fn condot_jump_zeroed_when_bins_miss_support() {
        let bins = JumpBins::new(10.0, 20.0, 16).unwrap();
        let j = geometric_jump(0.0, 3.0, 0.2, 1.0, &bins, true);
        assert_eq!(j.intensity, 0.0);
        assert_eq!(j.kernel, Some(JumpKernel::uniform(bins)));
        let lazy = geometric_jump(0.0, 3.0, 0.2, 1.0, &bins, false);
        assert_eq!(lazy.intensity, 0.0);
    }

    #[test]
    fn condot_jump_poly_has_zero_mean_under_the_path() {
        let (gx, gw) = crate::math::gauss_legendre(64);
        for &t in &[0.0, 0.1, 0.5, 0.9] {
            for &z in &[-1.0, 0.0, 1.5, 3.0] {
                let (m, s) = (t * z, 1.0 - t);
                let (lo, hi) = (m - 8.0 * s, m + 8.0 * s);
                let mut q = 0.0;
                // 32 panels of 64 points
                for p in 0..32 {
                    let a = lo + (hi - lo) * p as f64 / 32.0;
                    let b = a + (hi - lo) / 32.0;
                    for (x, w) in gx.iter().zip(&gw) {
                        let xx = 0.5 * (a + b) + 0.5 * (b - a) * x;
                        q += 0.5 * (b - a) * w * condot_jump_poly(t, z, xx) * normal_pdf(xx, m, s);
                    }
                }
                assert!(q.abs() < 1e-6, "t={t} z={z} mean={q}");
            }
        }
    }

    #[test]
    fn mixture_flow_values() {
        let s = Schedule::Linear;
        // boundaries carry no flux
        assert_eq!(mixture_flow(0.5, 0.0, -1.0, -1.0, 2.0, s).unwrap(), 0.0);
        assert!(mixture_flow(0.5, 0.0, 2.0, -1.0, 2.0, s).unwrap().abs() < 1e-15);
        // atom does not move
        assert_eq!(mixture_flow(0.5, 0.3, 0.5, -1.0, 2.0, s).unwrap(), 0.0);
        // discontinuity of size (a2 - a1) kappa'/(1 - kappa) at z
        let t = 0.4;
        let below = mixture_flow(0.5, t, 0.5 - 1e-7, -1.0, 2.0, s).unwrap();
        let above = mixture_flow(0.5, t, 0.5 + 1e-7, -1.0, 2.0, s).unwrap();
        assert!(((below - above) - 3.0 / 0.6).abs() < 1e-5);
        // mass moves toward z from both sides
        assert!(mixture_flow(0.5, t, 0.0, -1.0, 2.0, s).unwrap() > 0.0);
        assert!(mixture_flow(0.5, t, 1.0, -1.0, 2.0, s).unwrap() < 0.0);
        assert!(matches!(mixture_flow(0.5, 1.0, 0.0, -1.0, 2.0, s), Err(Error::Singularity { .. })));
    }

    #[test]
    fn mixture_diffusion_values() {
        let s = Schedule::Linear;
        let (a1, a2, z, t) = (-1.0, 2.0, 0.5, 0.3);
        assert!(mixture_diffusion(z, t, z, a1, a2, s).unwrap().abs() < 1e-14);
        let k = 1.0 / (1.0 - t);
        let at_a1 = k * (z - a1) * (z - a1);
        let at_a2 = k * (z - a2) * (z - a2);
        assert!((mixture_diffusion(z, t, a1, a1, a2, s).unwrap() - at_a1).abs() < 1e-12);
        assert!((mixture_diffusion(z, t, a2, a1, a2, s).unwrap() - at_a2).abs() < 1e-12);
        // on a unit-length support the boundary values are kappa' (z - a)^2/((a2 - a1)(1 - kappa))
        let (b1, b2) = (0.0, 1.0);
        let u1 = mixture_diffusion(0.3, t, b1, b1, b2, s).unwrap();
        assert!((u1 - k * 0.09 / (b2 - b1)).abs() < 1e-12);
        for i in 0..=3000 {
            for &zz in &[-0.9, 0.0, 1.9] {
                let x = a1 + (a2 - a1) * i as f64 / 3000.0;
                let v = mixture_diffusion(zz, t, x, a1, a2, s).unwrap();
                assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn mixture_jump_values() {
        let (l, tgt) = mixture_jump(&State::euclid(vec![0.2, 0.1]), 0.5, Schedule::Linear).unwrap();
        assert!((l - 2.0).abs() < 1e-15);
        assert_eq!(tgt.x, vec![0.2, 0.1]);
        assert_eq!(mixture_jump(&7usize, 0.0, Schedule::Linear).unwrap(), (1.0, 7));
        // kappa' vanishes at t = 0 for t^2
        assert_eq!(mixture_jump(&0.0, 0.0, Schedule::Polynomial(2.0)).unwrap().0, 0.0);
        assert!(matches!(mixture_jump(&0.0, 1.0, Schedule::Linear), Err(Error::Singularity { .. })));
    }

    #[test]
    fn ctmc_rates_examples() {
        assert_eq!(ctmc_mixture_rates(2, 0.4, 2, 4, Schedule::Linear).unwrap(), vec![0.0; 4]);
        assert_eq!(ctmc_mixture_rates(1, 0.5, 0, 2, Schedule::Linear).unwrap(), vec![-2.0, 2.0]);
        for x in 0..5 {
            let r = ctmc_mixture_rates(3, 0.7, x, 5, Schedule::Cosine).unwrap();
            assert!(r.iter().sum::<f64>().abs() < 1e-12);
        }
        assert!(matches!(ctmc_mixture_rates(5, 0.4, 0, 5, Schedule::Linear), Err(Error::Domain(_))));
    }

    #[test]
    fn generic_jump_recovers_mixture_intensity() {
        let (a1, a2, z, t) = (-2.0, 2.0, 0.5, 0.35);
        let kind = PathKind::MixtureUniform { a1, a2, schedule: Schedule::Linear };
        let (grid, w) = composite_gauss_legendre(a1, a2, &[z], 200, 4);
        let p: Vec<f64> = grid.iter().map(|x| kind.cond_density(z, t, *x).unwrap().0).collect();
        let d: Vec<f64> = grid.iter().map(|x| kind.cond_density_dt(z, t, *x).unwrap().0).collect();
        let atom = AtomRate { at: z, mass: t, dmass: 1.0 };
        let gj = jump_from_density_path(&p, &d, &grid, &w, &[atom]).unwrap();
        for l in &gj.intensity {
            assert!((l - 1.0 / (1.0 - t)).abs() < 1e-12);
        }
        assert_eq!(gj.atom_intensity, vec![0.0]);
        let probs = gj.kernel.probs();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(*probs.last().unwrap(), 1.0);
    }

    #[test]
    fn generic_jump_stationary_and_bad_density() {
        let grid = [0.0, 1.0, 2.0];
        let w = [0.5, 1.0, 0.5];
        let gj = jump_from_density_path(&[0.3, 0.4, 0.3], &[0.0; 3], &grid, &w, &[]).unwrap();
        assert!(gj.intensity.iter().all(|l| *l == 0.0));
        assert!((gj.kernel.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            jump_from_density_path(&[0.3, 0.0, 0.3], &[0.0; 3], &grid, &w, &[]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn generator_spec_parsing() {
        assert_eq!("flow".parse::<GeneratorSpec>().unwrap(), GeneratorSpec::flow());
        assert_eq!("ctmc".parse::<GeneratorSpec>().unwrap(), GeneratorSpec::jump());
        let s: GeneratorSpec = "superposition:flow+jump".parse().unwrap();
        assert_eq!(s.parts(), &[(ModelClass::Flow, 0.5), (ModelClass::Jump, 0.5)]);
        let s: GeneratorSpec = "superposition:flow=0.25,jump=0.75".parse().unwrap();
        assert_eq!(s.to_string().parse::<GeneratorSpec>().unwrap(), s);
        assert!("superposition:flow=0.5,jump=0.6".parse::<GeneratorSpec>().is_err());
        assert!("teleport".parse::<GeneratorSpec>().is_err());
    }

    #[test]
    fn cond_genout_invariants() {
        let path = CondPath::condot(2).unwrap().product(CondPath::mixture_discrete(3, Schedule::Linear, 1).unwrap());
        let spec: GeneratorSpec = "superposition:flow+jump".parse().unwrap();
        let bins = JumpBins::default();
        let z = State { x: vec![1.0, -1.0], tokens: vec![2] };
        let x = State { x: vec![2.5, 0.1], tokens: vec![0] };
        let g = cond_genout(&path, &spec, &bins, &z, 0.3, &x, true).unwrap();
        g.check_invariants().unwrap();
        assert!((g.velocity[0] - 0.5 * (1.0 - 2.5) / 0.7).abs() < 1e-12);
        assert_eq!(g.rates[0], ctmc_mixture_rates(2, 0.3, 0, 3, Schedule::Linear).unwrap());
        let j = g.jumps[0].as_ref().unwrap();
        let direct = geometric_jump(1.0, 2.5, 0.3, 1.0, &bins, true);
        assert!((j.intensity - 0.5 * direct.intensity).abs() < 1e-12);
        assert_eq!(j.kernel, direct.kernel);
    }
}
