//! Independent oracles: KFE residuals by quadrature, an RK4 solver for the
//! CTMC forward equation, two-sample statistics and the conditional versus
//! marginal gradient comparison.
//!
//! The KFE residual of a generator `L_t` for a path `p_t` and a test
//! function `f` is `d/dt <p_t, f> - <p_t, L_t f>`. Both terms are computed
//! on a composite Gauss-Legendre grid with the mixture atom carried as an
//! explicit point mass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{
    cond_genout, cond_jump_kernel, condot_jump_roots, euclid_dim, jump_from_density_path, AtomRate, GenOut, GeneratorSpec, JumpBins,
    JumpKernel, ModelClass,
};
use crate::marginal::MarginalModel;
use crate::math::composite_gauss_legendre;
use crate::paths::{CondPath, Dataset, PathKind, State};

/// Smooth scalar test function with its first two derivatives.
#[derive(Clone, Copy)]
pub struct TestFn {
    pub name: &'static str,
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
    pub d2f: fn(f64) -> f64,
}

impl std::fmt::Debug for TestFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name)
    }
}

/// `x, x^2, x^3, exp(-x^2/2), sin x, sin 2x, tanh x`.
pub fn battery() -> Vec<TestFn> {
    vec![
        TestFn { name: "x", f: |x| x, df: |_| 1.0, d2f: |_| 0.0 },
        TestFn { name: "x^2", f: |x| x * x, df: |x| 2.0 * x, d2f: |_| 2.0 },
        TestFn { name: "x^3", f: |x| x * x * x, df: |x| 3.0 * x * x, d2f: |x| 6.0 * x },
        TestFn {
            name: "exp(-x^2/2)",
            f: |x| (-0.5 * x * x).exp(),
            df: |x| -x * (-0.5 * x * x).exp(),
            d2f: |x| (x * x - 1.0) * (-0.5 * x * x).exp(),
        },
        TestFn { name: "sin(x)", f: f64::sin, df: f64::cos, d2f: |x| -x.sin() },
        TestFn { name: "sin(2x)", f: |x| (2.0 * x).sin(), df: |x| 2.0 * (2.0 * x).cos(), d2f: |x| -4.0 * (2.0 * x).sin() },
        TestFn {
            name: "tanh(x)",
            f: f64::tanh,
            df: |x| 1.0 - x.tanh().powi(2),
            d2f: |x| {
                let th = x.tanh();
                -2.0 * th * (1.0 - th * th)
            },
        },
    ]
}

pub fn constant() -> TestFn {
    TestFn { name: "1", f: |_| 1.0, df: |_| 0.0, d2f: |_| 0.0 }
}

/// Product of scalar test functions over distinct coordinates. Token
/// coordinates are evaluated at the token index.
#[derive(Debug, Clone, Default)]
pub struct Probe {
    pub euclid: Vec<(usize, TestFn)>,
    pub tokens: Vec<(usize, TestFn)>,
    /// Overall scale, for linear combinations.
    pub scale: f64,
}

impl Probe {
    pub fn coord(i: usize, f: TestFn) -> Self {
        Probe { euclid: vec![(i, f)], tokens: Vec::new(), scale: 1.0 }
    }

    pub fn token(k: usize, f: TestFn) -> Self {
        Probe { euclid: Vec::new(), tokens: vec![(k, f)], scale: 1.0 }
    }

    pub fn name(&self) -> String {
        let parts: Vec<String> = self
            .euclid
            .iter()
            .map(|(i, f)| format!("{}[x{i}]", f.name))
            .chain(self.tokens.iter().map(|(k, f)| format!("{}[tok{k}]", f.name)))
            .collect();
        parts.join("*")
    }

    /// The battery in each coordinate, and for two or more Euclidean
    /// coordinates the products `f(x_0) f(x_1)`.
    pub fn battery_for(sig: crate::paths::Signature) -> Vec<Probe> {
        let mut out = Vec::new();
        for f in battery() {
            out.extend((0..sig.euclid).map(|i| Probe::coord(i, f)));
            out.extend((0..sig.discrete).map(|k| Probe::token(k, f)));
            if sig.euclid >= 2 {
                out.push(Probe { euclid: vec![(0, f), (1, f)], tokens: Vec::new(), scale: 1.0 });
            }
        }
        out
    }

    fn others(&self, x: &State, skip_e: Option<usize>, skip_t: Option<usize>) -> f64 {
        let mut v = self.scale;
        for (i, f) in &self.euclid {
            if Some(*i) != skip_e {
                v *= (f.f)(x.x[*i]);
            }
        }
        for (k, f) in &self.tokens {
            if Some(*k) != skip_t {
                v *= (f.f)(x.tokens[*k] as f64);
            }
        }
        v
    }

    pub fn value(&self, x: &State) -> f64 {
        self.others(x, None, None)
    }
}

/// `L f(x) = grad f . u + 1/2 sum sigma_i^2 d_ii f + jumps + CTMC rates`.
pub fn apply_generator(g: &GenOut, p: &Probe, x: &State) -> Result<f64> {
    if g.signature() != x.signature() {
        return Err(Error::shape("generator and state shapes differ"));
    }
    let fx = p.value(x);
    let mut out = 0.0;
    for (i, f) in &p.euclid {
        if *i >= x.x.len() {
            return Err(Error::shape(format!("probe uses coordinate {i}")));
        }
        let rest = p.others(x, Some(*i), None);
        let xi = x.x[*i];
        out += rest * ((f.df)(xi) * g.velocity[*i] + 0.5 * g.diffusion[*i] * (f.d2f)(xi));
    }
    // jumps act on every coordinate, including those the probe ignores
    for (i, j) in g.jumps.iter().enumerate() {
        let Some(j) = j else { continue };
        if j.intensity == 0.0 {
            continue;
        }
        let k = j.kernel.as_ref().ok_or_else(|| Error::State("jump kernel was not materialized".into()))?;
        let ef = match p.euclid.iter().find(|(c, _)| *c == i) {
            Some((_, f)) => p.others(x, Some(i), None) * k.expect(f.f),
            None => fx,
        };
        out += j.intensity * (ef - fx);
    }
    for (kk, row) in g.rates.iter().enumerate() {
        let Some((_, f)) = p.tokens.iter().find(|(c, _)| *c == kk) else { continue };
        let rest = p.others(x, None, Some(kk));
        let fcur = (f.f)(x.tokens[kk] as f64);
        for (y, q) in row.iter().enumerate() {
            if y != x.tokens[kk] {
                out += q * rest * ((f.f)(y as f64) - fcur);
            }
        }
    }
    Ok(out)
}

/// Composite Gauss-Legendre layout for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureGrid {
    pub panels: usize,
    pub order: usize,
    /// Half-width of the window in conditional standard deviations.
    pub span_std: f64,
    /// Bins used for binned jump kernels.
    pub jump_bins: usize,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        QuadratureGrid { panels: 500, order: 8, span_std: 8.0, jump_bins: 1024 }
    }
}

/// How `d/dt <p_t, f>` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtMode {
    Analytic,
    /// Central difference in `t` with step `1e-4`.
    FiniteDiff,
}

/// Generator under test.
#[derive(Debug, Clone, PartialEq)]
pub enum KfeGenerator {
    Closed(GeneratorSpec),
    /// Minimal jump built from the path density alone.
    GenericJump,
}

/// One-dimensional measure `sum_i w_i delta_{x_i} + sum_a m_a delta_a` with
/// its time derivative.
#[derive(Debug, Clone)]
struct Snapshot {
    nodes: Vec<f64>,
    /// Quadrature weight times density.
    mass: Vec<f64>,
    dmass: Vec<f64>,
    density: Vec<f64>,
    dens_dt: Vec<f64>,
    qw: Vec<f64>,
    atoms: Vec<AtomRate>,
    discrete: bool,
}

const DT_STEP: f64 = 1e-4;

fn snapshot(kind: &PathKind, z: f64, t: f64, grid: &QuadratureGrid, window: Option<(f64, f64)>) -> Result<Snapshot> {
    let (k, _) = kind.schedule().eval(t)?;
    let (nodes, qw, breaks_atoms): (Vec<f64>, Vec<f64>, bool) = match *kind {
        PathKind::MixtureDiscrete { vocab_size, .. } => ((0..vocab_size).map(|v| v as f64).collect(), vec![1.0; vocab_size], false),
        PathKind::MixtureUniform { a1, a2, .. } => {
            let (lo, hi) = window.unwrap_or((a1, a2));
            let (x, w) = composite_gauss_legendre(lo, hi, &[z], grid.panels, grid.order);
            (x, w, true)
        }
        PathKind::GeometricAverage { .. } => {
            let s = 1.0 - k;
            let (lo, hi) = window.unwrap_or((k * z - grid.span_std * s, k * z + grid.span_std * s));
            let (r1, r2) = condot_jump_roots(k, z);
            let (x, w) = composite_gauss_legendre(lo, hi, &[r1, r2, z], grid.panels, grid.order);
            (x, w, false)
        }
    };
    let mut snap = Snapshot {
        nodes: Vec::with_capacity(nodes.len()),
        mass: Vec::with_capacity(nodes.len()),
        dmass: Vec::with_capacity(nodes.len()),
        density: Vec::new(),
        dens_dt: Vec::new(),
        qw: Vec::new(),
        atoms: Vec::new(),
        discrete: kind.is_discrete(),
    };
    for (x, w) in nodes.into_iter().zip(qw) {
        let (c, a) = kind.cond_density(z, t, x)?;
        let (dc, da) = kind.cond_density_dt(z, t, x)?;
        let (mut c, mut dc) = (c, dc);
        if snap.discrete && x == z {
            c += a;
            dc += da;
        }
        snap.nodes.push(x);
        snap.mass.push(w * c);
        snap.dmass.push(w * dc);
        snap.density.push(c);
        snap.dens_dt.push(dc);
        snap.qw.push(w);
    }
    if breaks_atoms {
        let (_, a) = kind.cond_density(z, t, z)?;
        let (_, da) = kind.cond_density_dt(z, t, z)?;
        snap.atoms.push(AtomRate { at: z, mass: a, dmass: da });
    }
    let total: f64 = snap.mass.iter().sum::<f64>() + snap.atoms.iter().map(|a| a.mass).sum::<f64>();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Coverage(format!("grid carries mass {total} instead of 1 at t = {t}, z = {z}")));
    }
    Ok(snap)
}

fn state_at(discrete: bool, v: f64) -> State {
    if discrete {
        State::discrete(vec![v as usize])
    } else {
        State::euclid(vec![v])
    }
}

fn probe_1d(discrete: bool, f: TestFn) -> Probe {
    if discrete {
        Probe::token(0, f)
    } else {
        Probe::coord(0, f)
    }
}

fn expectation(s: &Snapshot, f: TestFn) -> f64 {
    s.nodes.iter().zip(&s.mass).map(|(x, m)| m * (f.f)(*x)).sum::<f64>()
        + s.atoms.iter().map(|a| a.mass * (f.f)(a.at)).sum::<f64>()
}

fn dt_expectation(s: &Snapshot, f: TestFn) -> f64 {
    s.nodes.iter().zip(&s.dmass).map(|(x, m)| m * (f.f)(*x)).sum::<f64>()
        + s.atoms.iter().map(|a| a.dmass * (f.f)(a.at)).sum::<f64>()
}

/// Equal up to rounding from renormalization.
fn same_kernel(a: &JumpKernel, b: &JumpKernel) -> bool {
    let close = |p: &[f64], q: &[f64]| p.len() == q.len() && p.iter().zip(q).all(|(x, y)| (x - y).abs() <= 1e-13);
    match (a, b) {
        (JumpKernel::Binned { bins: b1, probs: p1 }, JumpKernel::Binned { bins: b2, probs: p2 }) => b1 == b2 && close(p1, p2),
        (JumpKernel::Atomic { atoms: a1, probs: p1 }, JumpKernel::Atomic { atoms: a2, probs: p2 }) => a1 == a2 && close(p1, p2),
        _ => false,
    }
}

/// Residuals of one `(path, generator, z, t)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfeReport {
    pub t: f64,
    pub z: f64,
    /// `(test function, residual)`.
    pub residuals: Vec<(String, f64)>,
    pub max_residual: f64,
    pub nodes: usize,
}

/// `d/dt <p_t, f>` and `<p_t, L_t f>` per test function at one `(z, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KfeTerms {
    pub t: f64,
    pub z: f64,
    /// `(test function, time derivative, generator action)`.
    pub terms: Vec<(String, f64, f64)>,
    pub nodes: usize,
}

impl KfeTerms {
    /// Residuals with the generator multiplied by `scale`.
    pub fn report(&self, scale: f64) -> KfeReport {
        let residuals: Vec<(String, f64)> =
            self.terms.iter().map(|(n, lhs, rhs)| (n.clone(), (lhs - scale * rhs).abs())).collect();
        let max_residual = residuals.iter().map(|r| r.1).fold(0.0, f64::max);
        KfeReport { t: self.t, z: self.z, residuals, max_residual, nodes: self.nodes }
    }
}

/// Both sides of the KFE for a conditional generator on a one-coordinate
/// path. Reflected diffusions on `[a1, a2]` contribute the boundary
/// local-time terms `1/2 sigma^2 p f'` at both ends.
pub fn kfe_terms(
    path: &CondPath,
    gen: &KfeGenerator,
    z: &State,
    t: f64,
    fset: &[TestFn],
    grid: &QuadratureGrid,
    mode: DtMode,
) -> Result<KfeTerms> {
    let sig = path.signature();
    if sig.euclid + sig.discrete != 1 {
        return Err(Error::Unsupported("the residual checker works on a single coordinate".into()));
    }
    if !(0.05 - 1e-12..=0.9 + 1e-12).contains(&t) {
        return Err(Error::domain(format!("residual time {t} outside [0.05, 0.9]")));
    }
    path.check_state(z)?;
    let kind = path.factors()[0].kind;
    let discrete = kind.is_discrete();
    let zv = if discrete { z.tokens[0] as f64 } else { z.x[0] };
    let snap = snapshot(&kind, zv, t, grid, None)?;

    // jump parts are split off so that each distinct kernel is integrated once
    let mut kernels: Vec<JumpKernel> = Vec::new();
    let mut jumps: Vec<Option<(f64, usize)>> = Vec::new();
    let gens: Vec<GenOut> = match gen {
        KfeGenerator::Closed(spec) => {
            let (k, _) = kind.schedule().eval(t)?;
            let bins = match kind {
                PathKind::GeometricAverage { .. } => {
                    let (r1, r2) = condot_jump_roots(k, zv);
                    JumpBins::cells(r1, r2, grid.jump_bins)?
                }
                _ => JumpBins::default(),
            };
            let xs: Vec<f64> = snap.nodes.iter().copied().chain(snap.atoms.iter().map(|a| a.at)).collect();
            let mut out = Vec::with_capacity(xs.len());
            for x in &xs {
                let mut g = cond_genout(path, spec, &bins, z, t, &state_at(discrete, *x), false)?;
                jumps.push(g.jumps.first_mut().and_then(Option::take).filter(|j| j.intensity != 0.0).map(|j| (j.intensity, 0)));
                out.push(g);
            }
            // kernels are fetched at a spread of nodes and shared only when
            // they all agree
            let active: Vec<usize> = (0..xs.len()).filter(|i| jumps[*i].is_some()).collect();
            let kernel_at = |i: usize| -> Result<JumpKernel> {
                cond_jump_kernel(path, spec, &bins, z, t, &state_at(discrete, xs[i]), 0)?
                    .and_then(|j| j.kernel)
                    .ok_or_else(|| Error::State("jump kernel was not materialized".into()))
            };
            if !active.is_empty() {
                let probes: Vec<usize> = (0..=16).map(|k| active[k * (active.len() - 1) / 16]).collect();
                let first = kernel_at(probes[0])?;
                let mut shared = true;
                for i in &probes[1..] {
                    shared &= same_kernel(&kernel_at(*i)?, &first);
                }
                if shared {
                    kernels.push(first);
                } else {
                    for i in active {
                        let k = kernel_at(i)?;
                        if !kernels.last().is_some_and(|l| same_kernel(l, &k)) {
                            kernels.push(k);
                        }
                        if let Some(j) = jumps[i].as_mut() {
                            j.1 = kernels.len() - 1;
                        }
                    }
                }
            }
            out
        }
        KfeGenerator::GenericJump => {
            if discrete {
                return Err(Error::Unsupported("generic jump check is for Euclidean paths".into()));
            }
            let gj = jump_from_density_path(&snap.density, &snap.dens_dt, &snap.nodes, &snap.qw, &snap.atoms)?;
            kernels.push(gj.kernel);
            gj.intensity
                .iter()
                .chain(&gj.atom_intensity)
                .map(|l| {
                    jumps.push(Some((*l, 0)));
                    GenOut::flow(vec![0.0])
                })
                .collect()
        }
    };
    let n = snap.nodes.len();
    let boundary = match (gen, kind) {
        (KfeGenerator::Closed(spec), PathKind::MixtureUniform { a1, a2, .. }) if spec.uses(ModelClass::Diffusion) => {
            let w: f64 = spec.parts().iter().filter(|(c, _)| *c == ModelClass::Diffusion).map(|p| p.1).sum();
            let s1 = euclid_dim(&kind, ModelClass::Diffusion, zv, t, a1, &JumpBins::default(), false)?.1;
            let s2 = euclid_dim(&kind, ModelClass::Diffusion, zv, t, a2, &JumpBins::default(), false)?.1;
            let p1 = kind.cond_density(zv, t, a1)?.0;
            let p2 = kind.cond_density(zv, t, a2)?.0;
            Some((a1, a2, w * s1 * p1, w * s2 * p2))
        }
        _ => None,
    };
    let mut terms = Vec::with_capacity(fset.len());
    for f in fset {
        let probe = probe_1d(discrete, *f);
        let lhs = match mode {
            DtMode::Analytic => dt_expectation(&snap, *f),
            DtMode::FiniteDiff => {
                let hi = snapshot(&kind, zv, t + DT_STEP, grid, None)?;
                let lo = snapshot(&kind, zv, t - DT_STEP, grid, None)?;
                (expectation(&hi, *f) - expectation(&lo, *f)) / (2.0 * DT_STEP)
            }
        };
        let ek: Vec<f64> = kernels.iter().map(|k| k.expect(f.f)).collect();
        let mut rhs = 0.0;
        for (idx, (g, j)) in gens.iter().zip(&jumps).enumerate() {
            let (x, m) = if idx < n { (snap.nodes[idx], snap.mass[idx]) } else { (snap.atoms[idx - n].at, snap.atoms[idx - n].mass) };
            rhs += m * apply_generator(g, &probe, &state_at(discrete, x))?;
            if let Some((lam, k)) = j {
                rhs += m * lam * (ek[*k] - (f.f)(x));
            }
        }
        if let Some((a1, a2, sp1, sp2)) = boundary {
            rhs += 0.5 * sp1 * (f.df)(a1) - 0.5 * sp2 * (f.df)(a2);
        }
        terms.push((f.name.to_string(), lhs, rhs));
    }
    Ok(KfeTerms { t, z: zv, terms, nodes: n + snap.atoms.len() })
}

/// KFE residual of a conditional generator on a one-coordinate path, with
/// the generator multiplied by `scale` (1 for the real check, 2 for the
/// negative control).
#[allow(clippy::too_many_arguments)]
pub fn kfe_residual(
    path: &CondPath,
    gen: &KfeGenerator,
    z: &State,
    t: f64,
    fset: &[TestFn],
    grid: &QuadratureGrid,
    mode: DtMode,
    scale: f64,
) -> Result<KfeReport> {
    Ok(kfe_terms(path, gen, z, t, fset, grid, mode)?.report(scale))
}

/// Cells of the residual suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KfePair {
    CondotFlow,
    CondotJump,
    MixtureFlow,
    MixtureDiffusion,
    MixtureJump,
    CtmcMixture,
    GenericJumpMixture,
}

impl KfePair {
    pub const ALL: [KfePair; 7] = [
        KfePair::CondotFlow,
        KfePair::CondotJump,
        KfePair::MixtureFlow,
        KfePair::MixtureDiffusion,
        KfePair::MixtureJump,
        KfePair::CtmcMixture,
        KfePair::GenericJumpMixture,
    ];

    /// Interval of the mixture paths in the suite.
    pub const MIXTURE_SUPPORT: (f64, f64) = (-2.0, 2.0);
    /// Vocabulary of the CTMC cell.
    pub const VOCAB: usize = 5;

    pub fn path(self) -> CondPath {
        let (a1, a2) = Self::MIXTURE_SUPPORT;
        match self {
            KfePair::CondotFlow | KfePair::CondotJump => CondPath::condot(1),
            KfePair::CtmcMixture => CondPath::mixture_discrete(Self::VOCAB, crate::schedule::Schedule::Linear, 1),
            _ => CondPath::mixture_uniform(a1, a2, crate::schedule::Schedule::Linear, 1),
        }
        .expect("static suite path")
    }

    pub fn generator(self) -> KfeGenerator {
        match self {
            KfePair::CondotFlow | KfePair::MixtureFlow | KfePair::CtmcMixture => KfeGenerator::Closed(GeneratorSpec::flow()),
            KfePair::CondotJump | KfePair::MixtureJump => KfeGenerator::Closed(GeneratorSpec::jump()),
            KfePair::MixtureDiffusion => KfeGenerator::Closed(GeneratorSpec::diffusion()),
            KfePair::GenericJumpMixture => KfeGenerator::GenericJump,
        }
    }

    /// Binned jump kernels get the looser threshold.
    pub fn threshold(self) -> f64 {
        match self {
            KfePair::CondotJump => 1e-3,
            _ => 1e-4,
        }
    }

    /// Endpoint state for a scalar `z`; the CTMC cell maps `z` to the token
    /// `round(z + (N - 1) / 2)` clamped to the vocabulary.
    pub fn endpoint(self, z: f64) -> State {
        match self {
            KfePair::CtmcMixture => {
                let c = (Self::VOCAB - 1) as f64 / 2.0;
                State::discrete(vec![(z + c).round().clamp(0.0, (Self::VOCAB - 1) as f64) as usize])
            }
            _ => State::euclid(vec![z]),
        }
    }
}

/// Sweep settings of the residual suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KfeSuite {
    pub pairs: Vec<KfePair>,
    pub times: Vec<f64>,
    pub endpoints: Vec<f64>,
    pub grid: QuadratureGrid,
    pub dt_mode: DtMode,
    /// Generator scale of the negative control.
    pub control_scale: f64,
    /// A control passes when its residual is at least this multiple of the
    /// threshold.
    pub control_factor: f64,
}

impl Default for KfeSuite {
    fn default() -> Self {
        KfeSuite {
            pairs: KfePair::ALL.to_vec(),
            times: (1..=18).map(|i| i as f64 * 0.05).collect(),
            endpoints: vec![-1.0, 0.0, 1.5],
            grid: QuadratureGrid::default(),
            dt_mode: DtMode::Analytic,
            control_scale: 2.0,
            control_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub pair: KfePair,
    pub threshold: f64,
    pub max_residual: f64,
    /// `(t, z, test function)` of the largest residual.
    pub worst: (f64, f64, String),
    pub pass: bool,
    /// Largest residual with the generator scaled by `control_scale`.
    pub control_residual: f64,
    pub control_pass: bool,
}

impl PairReport {
    pub fn ok(&self) -> bool {
        self.pass && self.control_pass
    }
}

fn worst_of(reports: &[KfeReport]) -> (f64, (f64, f64, String)) {
    let mut best = (f64::NEG_INFINITY, (0.0, 0.0, String::new()));
    for r in reports {
        for (name, v) in &r.residuals {
            if *v > best.0 {
                best = (*v, (r.t, r.z, name.clone()));
            }
        }
    }
    best
}

/// Residuals of every requested pair over the `(t, z)` sweep.
pub fn run_kfe_suite(suite: &KfeSuite) -> Result<Vec<PairReport>> {
    let fset = battery();
    suite
        .pairs
        .iter()
        .map(|pair| {
            let path = pair.path();
            let gen = pair.generator();
            let cells: Vec<(f64, f64)> =
                suite.times.iter().flat_map(|t| suite.endpoints.iter().map(move |z| (*t, *z))).collect();
            let terms: Vec<KfeTerms> = cells
                .par_iter()
                .map(|(t, z)| kfe_terms(&path, &gen, &pair.endpoint(*z), *t, &fset, &suite.grid, suite.dt_mode))
                .collect::<Result<_>>()?;
            let at = |scale: f64| worst_of(&terms.iter().map(|r| r.report(scale)).collect::<Vec<_>>());
            let (max_residual, worst) = at(1.0);
            let (control_residual, _) = at(suite.control_scale);
            let threshold = pair.threshold();
            Ok(PairReport {
                pair: *pair,
                threshold,
                max_residual,
                worst,
                pass: max_residual <= threshold,
                control_residual,
                control_pass: control_residual >= suite.control_factor * threshold,
            })
        })
        .collect()
}

/// `<p_t, L_t f>` and `d/dt <p_t, f>` for the exact marginal of a
/// one-coordinate geometric path, with the model's full generator
/// (including Langevin and predictor-corrector terms).
pub fn marginal_kfe_terms(model: &MarginalModel, t: f64, f: TestFn, grid: &QuadratureGrid) -> Result<(f64, f64)> {
    let sig = model.signature();
    if sig.euclid != 1 || sig.discrete != 0 {
        return Err(Error::Unsupported("marginal check works on one Euclidean coordinate".into()));
    }
    let kind = model.path.factors()[0].kind;
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for (z, w) in model.data.points().iter().zip(model.data.weights()) {
        let snap = snapshot(&kind, z.x[0], t, grid, None)?;
        lhs += w * dt_expectation(&snap, f);
        let probe = Probe::coord(0, f);
        for (x, m) in snap.nodes.iter().zip(&snap.mass).chain(snap.atoms.iter().map(|a| (&a.at, &a.mass))) {
            let xs = State::euclid(vec![*x]);
            rhs += w * m * apply_generator(&model.genout(t, &xs)?, &probe, &xs)?;
        }
    }
    Ok((lhs, rhs))
}

/// `<p_t, L f>` for an arbitrary generator field over the marginal of a
/// one-coordinate geometric path.
pub fn marginal_action(
    path: &CondPath,
    data: &Dataset,
    t: f64,
    f: TestFn,
    grid: &QuadratureGrid,
    gen: impl Fn(&State) -> Result<GenOut>,
) -> Result<f64> {
    let kind = path.factors()[0].kind;
    let probe = Probe::coord(0, f);
    let mut rhs = 0.0;
    for (z, w) in data.points().iter().zip(data.weights()) {
        let snap = snapshot(&kind, z.x[0], t, grid, None)?;
        for (x, m) in snap.nodes.iter().zip(&snap.mass) {
            let xs = State::euclid(vec![*x]);
            rhs += w * m * apply_generator(&gen(&xs)?, &probe, &xs)?;
        }
    }
    Ok(rhs)
}

/// Marginals of a CTMC from RK4 on `dp/dt = sum_x p(x) Q_t(.; x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtmcTrajectory {
    pub times: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
    /// Largest `|sum p - 1|` before renormalization.
    pub max_drift: f64,
}

impl CtmcTrajectory {
    /// Linear interpolation between grid points.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let h = self.times[1] - self.times[0];
        let i = (((t - self.times[0]) / h).floor().max(0.0) as usize).min(self.times.len() - 2);
        let w = ((t - self.times[i]) / h).clamp(0.0, 1.0);
        self.probs[i].iter().zip(&self.probs[i + 1]).map(|(a, b)| (1.0 - w) * a + w * b).collect()
    }
}

/// `rate_fn(t)[x]` is the rate row `Q_t(.; x)` out of state `x`.
pub fn ctmc_oracle(
    rate_fn: impl Fn(f64) -> Result<Vec<Vec<f64>>>,
    p0: &[f64],
    n_steps: usize,
    t_end: f64,
) -> Result<CtmcTrajectory> {
    if n_steps == 0 || !(t_end > 0.0) {
        return Err(Error::Config("ctmc oracle needs n_steps > 0 and t_end > 0".into()));
    }
    if (p0.iter().sum::<f64>() - 1.0).abs() > 1e-9 || p0.iter().any(|p| *p < 0.0) {
        return Err(Error::domain("initial law is not a probability vector"));
    }
    let n = p0.len();
    let h = t_end / n_steps as f64;
    let deriv = |t: f64, p: &[f64]| -> Result<Vec<f64>> {
        let q = rate_fn(t)?;
        if q.len() != n {
            return Err(Error::shape("rate matrix size differs from the state count"));
        }
        let mut d = vec![0.0; n];
        for (x, row) in q.iter().enumerate() {
            if row.len() != n {
                return Err(Error::shape("rate row length differs from the state count"));
            }
            let s: f64 = row.iter().sum();
            if s.abs() > 1e-9 * (1.0 + row.iter().map(|v| v.abs()).sum::<f64>()) {
                return Err(Error::contract(format!("rate row {x} sums to {s}")));
            }
            for (y, r) in row.iter().enumerate() {
                d[y] += p[x] * r;
            }
        }
        Ok(d)
    };
    let axpy = |p: &[f64], k: &[f64], a: f64| -> Vec<f64> { p.iter().zip(k).map(|(p, k)| p + a * k).collect() };
    let mut p = p0.to_vec();
    let mut out = CtmcTrajectory { times: vec![0.0], probs: vec![p.clone()], max_drift: 0.0 };
    for s in 0..n_steps {
        let t = s as f64 * h;
        let k1 = deriv(t, &p)?;
        let k2 = deriv(t + 0.5 * h, &axpy(&p, &k1, 0.5 * h))?;
        let k3 = deriv(t + 0.5 * h, &axpy(&p, &k2, 0.5 * h))?;
        let k4 = deriv(t + h, &axpy(&p, &k3, h))?;
        for i in 0..n {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if let Some(v) = p.iter().find(|v| **v < -1e-9) {
            return Err(Error::Instability(format!("probability {v} at t = {}", t + h)));
        }
        let total: f64 = p.iter().sum();
        out.max_drift = out.max_drift.max((total - 1.0).abs());
        p.iter_mut().for_each(|v| *v = v.max(0.0) / total);
        out.times.push((s + 1) as f64 * h);
        out.probs.push(p.clone());
    }
    Ok(out)
}

/// Normalized counts over `edges`, with an underflow bin first and an
/// overflow bin last.
pub fn histogram(samples: &[f64], edges: &[f64]) -> Result<Vec<f64>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::domain("histogram edges must be increasing with at least two entries"));
    }
    let mut h = vec![0.0; edges.len() + 1];
    for x in samples {
        let i = edges.partition_point(|e| e <= x);
        let i = if i == edges.len() && *x == edges[edges.len() - 1] { i - 1 } else { i };
        h[i] += 1.0;
    }
    let n = samples.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    Ok(h)
}

/// `n + 1` equally spaced edges.
pub fn uniform_edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Half the L1 distance between two probability vectors.
pub fn tv(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape("distributions differ in support size"));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

const MIN_TV_SAMPLES: usize = 1000;

/// Histogram total variation between two sample sets.
pub fn tv_hist(a: &[f64], b: &[f64], edges: &[f64]) -> Result<f64> {
    if a.len() < MIN_TV_SAMPLES || b.len() < MIN_TV_SAMPLES {
        return Err(Error::domain(format!("need at least {MIN_TV_SAMPLES} samples per side")));
    }
    tv(&histogram(a, edges)?, &histogram(b, edges)?)
}

/// Histogram total variation against a reference law given by its CDF.
pub fn tv_hist_cdf(a: &[f64], cdf: impl Fn(f64) -> f64, edges: &[f64]) -> Result<f64> {
    if a.len() < MIN_TV_SAMPLES {
        return Err(Error::domain(format!("need at least {MIN_TV_SAMPLES} samples")));
    }
    let h = histogram(a, edges)?;
    let mut q = Vec::with_capacity(h.len());
    q.push(cdf(edges[0]));
    for w in edges.windows(2) {
        q.push(cdf(w[1]) - cdf(w[0]));
    }
    q.push(1.0 - cdf(edges[edges.len() - 1]));
    tv(&h, &q)
}

/// Cell index on a `nx x ny` grid over `[lo, hi]^2`, or `None` outside.
pub fn cell_2d(x: f64, y: f64, lo: f64, hi: f64, nx: usize, ny: usize) -> Option<usize> {
    if !(lo..=hi).contains(&x) || !(lo..=hi).contains(&y) {
        return None;
    }
    let i = (((x - lo) / (hi - lo) * nx as f64) as usize).min(nx - 1);
    let j = (((y - lo) / (hi - lo) * ny as f64) as usize).min(ny - 1);
    Some(i * ny + j)
}

/// Total variation between a 2D sample set binned on cells and reference
/// cell probabilities; mass outside the square is its own cell.
pub fn tv_cells_2d(samples: &[[f64; 2]], reference: &[f64], lo: f64, hi: f64, n: usize) -> Result<f64> {
    if samples.len() < MIN_TV_SAMPLES {
        return Err(Error::domain(format!("need at least {MIN_TV_SAMPLES} samples")));
    }
    if reference.len() != n * n {
        return Err(Error::shape("reference does not match the cell grid"));
    }
    let mut h = vec![0.0; n * n + 1];
    for s in samples {
        match cell_2d(s[0], s[1], lo, hi, n, n) {
            Some(c) => h[c] += 1.0,
            None => h[n * n] += 1.0,
        }
    }
    let m = samples.len() as f64;
    h.iter_mut().for_each(|v| *v /= m);
    let mut q = reference.to_vec();
    q.push(0.0);
    tv(&h, &q)
}

/// Largest sample count per side used by [`energy_distance`].
pub const ENERGY_MAX: usize = 5000;

fn subsample(a: &[Vec<f64>]) -> Vec<&[f64]> {
    if a.len() <= ENERGY_MAX {
        return a.iter().map(|v| v.as_slice()).collect();
    }
    (0..ENERGY_MAX).map(|i| a[i * a.len() / ENERGY_MAX].as_slice()).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `2 E|a - b| - E|a - a'| - E|b - b'|` with U-statistics for the
/// within-sample terms; inputs longer than [`ENERGY_MAX`] are thinned with
/// a fixed stride.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("energy distance needs nonempty samples"));
    }
    let (a, b) = (subsample(a), subsample(b));
    // partial sums are collected in order so the result does not depend on
    // the thread count
    let rows: Vec<f64> = a.par_iter().map(|x| b.iter().map(|y| dist(x, y)).sum::<f64>()).collect();
    let cross = rows.iter().sum::<f64>() / (a.len() * b.len()) as f64;
    let within = |s: &[&[f64]]| -> f64 {
        if s.len() < 2 {
            return 0.0;
        }
        let rows: Vec<f64> = (0..s.len()).into_par_iter().map(|i| (i + 1..s.len()).map(|j| dist(s[i], s[j])).sum::<f64>()).collect();
        let tot: f64 = rows.iter().sum();
        2.0 * tot / (s.len() * (s.len() - 1)) as f64
    };
    Ok(2.0 * cross - within(&a) - within(&b))
}

/// Outcome of the conditional versus marginal gradient comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub exact: Vec<f64>,
    pub monte_carlo: Vec<f64>,
    pub cosine: f64,
    pub max_gap: f64,
    /// Monte Carlo standard error of the coordinate with the largest gap.
    pub gap_se: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Gradient in `theta` of the generator matching loss
/// `E_{t, x ~ p_t} |u_t(x) - theta . phi(x, t)|^2` for a one-coordinate
/// flow, with the exact marginal velocity and quadrature in `t` and `x`.
pub fn gm_gradient_exact(
    model: &MarginalModel,
    features: &(dyn Fn(f64, f64) -> Vec<f64> + Sync),
    theta: &[f64],
    t_eps: f64,
    grid: &QuadratureGrid,
) -> Result<Vec<f64>> {
    let kind = model.path.factors()[0].kind;
    let (ts, tw) = composite_gauss_legendre(t_eps, 1.0 - t_eps, &[], 64, 8);
    let scale = 1.0 / (1.0 - 2.0 * t_eps);
    let per_t: Vec<Vec<f64>> = ts
        .par_iter()
        .zip(&tw)
        .map(|(t, wt)| -> Result<Vec<f64>> {
            let mut g = vec![0.0; theta.len()];
            for (z, wz) in model.data.points().iter().zip(model.data.weights()) {
                let snap = snapshot(&kind, z.x[0], *t, grid, None)?;
                for (x, m) in snap.nodes.iter().zip(&snap.mass).chain(snap.atoms.iter().map(|a| (&a.at, &a.mass))) {
                    let u = model.genout(*t, &State::euclid(vec![*x]))?.velocity[0];
                    let phi = features(*x, *t);
                    let r: f64 = theta.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>() - u;
                    for (gi, pi) in g.iter_mut().zip(&phi) {
                        *gi += wt * scale * wz * m * 2.0 * r * pi;
                    }
                }
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut g = vec![0.0; theta.len()];
    for v in per_t {
        for (a, b) in g.iter_mut().zip(v) {
            *a += b;
        }
    }
    Ok(g)
}

#[allow(clippy::too_many_arguments)]
/// Monte Carlo conditional generator matching gradient with `m` samples,
/// and the per-coordinate standard errors.
pub fn cgm_gradient_mc(
    path: &CondPath,
    data: &Dataset,
    spec: &GeneratorSpec,
    features: &(dyn Fn(f64, f64) -> Vec<f64> + Sync),
    theta: &[f64],
    t_eps: f64,
    m: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if path.signature().euclid != 1 || path.signature().discrete != 0 {
        return Err(Error::Unsupported("gradient check works on one Euclidean coordinate".into()));
    }
    let kind = path.factors()[0].kind;
    let k = theta.len();
    let (mut s1, mut s2) = (vec![0.0; k], vec![0.0; k]);
    let bins = JumpBins::default();
    for _ in 0..m {
        let t = t_eps + (1.0 - 2.0 * t_eps) * rng.random::<f64>();
        let z = data.points()[data.sample_index(rng)].x[0];
        let kappa = kind.schedule().kappa(t)?;
        let x = kind.sample(z, kappa, rng);
        let mut u = 0.0;
        for (c, w) in spec.parts() {
            u += w * euclid_dim(&kind, *c, z, t, x, &bins, false)?.0;
        }
        let phi = features(x, t);
        let r: f64 = theta.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>() - u;
        for i in 0..k {
            let g = 2.0 * r * phi[i];
            s1[i] += g;
            s2[i] += g * g;
        }
    }
    let mf = m as f64;
    let mean: Vec<f64> = s1.iter().map(|s| s / mf).collect();
    let se = s2.iter().zip(&mean).map(|(s, mu)| ((s / mf - mu * mu).max(0.0) / mf).sqrt()).collect();
    Ok((mean, se))
}

/// Compares the exact marginal gradient with the conditional Monte Carlo
/// gradient at the same `theta`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_equality_check(
    path: &CondPath,
    data: &Dataset,
    spec: &GeneratorSpec,
    features: &(dyn Fn(f64, f64) -> Vec<f64> + Sync),
    theta: &[f64],
    m: usize,
    seed: u64,
) -> Result<GradCheck> {
    if spec.parts().iter().any(|(c, _)| *c != ModelClass::Flow) {
        return Err(Error::Unsupported("gradient check is defined for flow generators".into()));
    }
    let t_eps = 1e-3;
    let model = MarginalModel::new(path.clone(), data.clone(), spec.clone())?;
    let exact = gm_gradient_exact(&model, features, theta, t_eps, &QuadratureGrid::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mc, se) = cgm_gradient_mc(path, data, spec, features, theta, t_eps, m, &mut rng)?;
    let (i, gap) = exact
        .iter()
        .zip(&mc)
        .map(|(a, b)| (a - b).abs())
        .enumerate()
        .fold((0, 0.0), |acc, (i, g)| if g > acc.1 { (i, g) } else { acc });
    Ok(GradCheck { cosine: cosine(&exact, &mc), max_gap: gap, gap_se: se[i], exact, monte_carlo: mc })
}
