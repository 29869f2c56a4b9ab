//! Euler simulation of Markov processes given by a [`GenOut`] field.
//!
//! Each step, per Euclidean coordinate, either jumps (with probability from
//! the jump schedule) or takes a drift-diffusion increment, never both.
//! Discrete coordinates step with `(I + h Q)`. The grid is
//! `t_k = k h`, `h = 1/n_steps`, and the last state is at `t = 1 - h`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{cond_genout, cond_jump_kernel, GenOut, GeneratorSpec, JumpBins, JumpDim, JumpKernel};
use crate::marginal::MarginalModel;
use crate::paths::{CondPath, Signature, State};

/// How the per-step jump probability is obtained from the intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpSchedule {
    /// `min(h lambda, 1)`.
    LinearHazard,
    /// `1 - R_{t, t+h}`, exact for the CondOT jump intensity.
    CondotSurvival,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_steps: usize,
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub record_trajectories: bool,
    #[serde(default)]
    pub reflection_bounds: Option<(f64, f64)>,
    /// `None` lets the field pick.
    #[serde(default)]
    pub jump_schedule: Option<JumpSchedule>,
    /// Times at which to keep the whole ensemble; rounded to the grid.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    /// Steps are split into Euler substeps so that `h * stiffness` stays
    /// below this; `None` keeps plain Euler.
    #[serde(default = "default_stiff_step")]
    pub stiff_step: Option<f64>,
}

fn default_stiff_step() -> Option<f64> {
    Some(0.5)
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_steps: 500,
            n_samples: 10_000,
            seed: 0,
            record_trajectories: false,
            reflection_bounds: None,
            jump_schedule: None,
            snapshot_times: Vec::new(),
            stiff_step: default_stiff_step(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::Config(format!(
                "n_steps must be at least 2 so that the last state is before t = 1, got {}",
                self.n_steps
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if let Some((a1, a2)) = self.reflection_bounds {
            if !(a1 < a2) {
                return Err(Error::Config(format!("reflection bounds need a1 < a2, got ({a1}, {a2})")));
            }
        }
        if let Some(t) = self.snapshot_times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Config(format!("snapshot time {t} outside [0, 1]")));
        }
        if let Some(l) = self.stiff_step {
            if !(l > 0.0) {
                return Err(Error::Config(format!("stiff_step must be positive, got {l}")));
            }
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    /// Grid index used for a requested snapshot time.
    pub fn snapshot_step(&self, t: f64) -> usize {
        ((t * self.n_steps as f64).round() as usize).min(self.n_steps - 1)
    }
}

/// A time-dependent generator the sampler can query.
pub trait Field: Sync {
    fn signature(&self) -> Signature;

    fn sample_prior(&self, rng: &mut ChaCha8Rng) -> State;

    /// `F_t(x)`; jump kernels may be left out when `materialize` is false.
    fn genout(&self, t: f64, x: &State, materialize: bool) -> Result<GenOut>;

    /// Jump measure of coordinate `i` with its kernel.
    fn jump_kernel(&self, t: f64, x: &State, i: usize) -> Result<Option<JumpDim>> {
        Ok(self.genout(t, x, true)?.jumps.swap_remove(i))
    }

    fn preferred_schedule(&self) -> JumpSchedule {
        JumpSchedule::LinearHazard
    }

    /// Bound on the drift's contraction rate at `t`; zero when not stiff.
    fn stiffness(&self, _t: f64) -> Result<f64> {
        Ok(0.0)
    }
}

impl Field for MarginalModel {
    fn signature(&self) -> Signature {
        self.path.signature()
    }

    fn sample_prior(&self, rng: &mut ChaCha8Rng) -> State {
        self.path.sample_prior(rng)
    }

    fn genout(&self, t: f64, x: &State, materialize: bool) -> Result<GenOut> {
        self.genout_with(t, x, materialize)
    }

    fn jump_kernel(&self, t: f64, x: &State, i: usize) -> Result<Option<JumpDim>> {
        MarginalModel::jump_kernel(self, t, x, i)
    }

    fn preferred_schedule(&self) -> JumpSchedule {
        if self.prefers_survival_schedule() {
            JumpSchedule::CondotSurvival
        } else {
            JumpSchedule::LinearHazard
        }
    }

    fn stiffness(&self, t: f64) -> Result<f64> {
        self.score_stiffness(t)
    }
}

/// The conditional generator pinned to one data point.
#[derive(Debug, Clone)]
pub struct Conditional {
    pub path: CondPath,
    pub spec: GeneratorSpec,
    pub bins: JumpBins,
    pub z: State,
}

impl Field for Conditional {
    fn signature(&self) -> Signature {
        self.path.signature()
    }

    fn sample_prior(&self, rng: &mut ChaCha8Rng) -> State {
        self.path.sample_prior(rng)
    }

    fn genout(&self, t: f64, x: &State, materialize: bool) -> Result<GenOut> {
        cond_genout(&self.path, &self.spec, &self.bins, &self.z, t, x, materialize)
    }

    fn jump_kernel(&self, t: f64, x: &State, i: usize) -> Result<Option<JumpDim>> {
        cond_jump_kernel(&self.path, &self.spec, &self.bins, &self.z, t, x, i)
    }
}

/// No-jump probability over `[t, t + h]` for the CondOT jump intensity
/// `lambda` observed at `t`.
pub fn jump_survival(lambda: f64, t: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) || t + h >= 1.0 {
        return Err(Error::Range(format!("survival needs h > 0 and t + h < 1, got t = {t}, h = {h}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::domain(format!("negative intensity {lambda}")));
    }
    let s = 1.0 - t;
    let r = s * s / ((s - h) * (s - h));
    Ok((0.5 * lambda * s * (1.0 - r)).exp())
}

/// Folds `x` into `[a1, a2]` by repeated reflection at the ends.
pub fn reflect(x: f64, a1: f64, a2: f64) -> f64 {
    if (a1..=a2).contains(&x) {
        return x;
    }
    let l = a2 - a1;
    let y = (x - a1).rem_euclid(2.0 * l);
    let y = if y > l { 2.0 * l - y } else { y };
    (a1 + y).clamp(a1, a2)
}

/// Draws the next token from `e_tok + h Q(.; tok)`.
pub fn ctmc_step(tok: usize, row: &[f64], h: f64, rng: &mut impl Rng) -> Result<usize> {
    if tok >= row.len() {
        return Err(Error::domain(format!("token {tok} outside rate row of length {}", row.len())));
    }
    let stay = 1.0 + h * row[tok];
    if stay < -1e-12 {
        return Err(Error::StepSize {
            stay,
            suggested_h: 1.0 / -row[tok],
        });
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (y, q) in row.iter().enumerate() {
        if y == tok {
            continue;
        }
        acc += h * q.max(0.0);
        if u < acc {
            return Ok(y);
        }
    }
    Ok(tok)
}

fn jump_probability(schedule: JumpSchedule, lambda: f64, t: f64, h: f64, clamped: &mut u64) -> Result<f64> {
    if lambda <= 0.0 {
        return Ok(0.0);
    }
    Ok(match schedule {
        JumpSchedule::LinearHazard => {
            let p = h * lambda;
            if p > 1.0 {
                *clamped += 1;
            }
            p.min(1.0)
        }
        JumpSchedule::CondotSurvival => 1.0 - jump_survival(lambda, t, h)?,
    })
}

fn draw_from(kernel: &JumpKernel, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random();
    let probs = kernel.probs();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        last = j;
        acc += p;
        if u < acc {
            return kernel.point(j);
        }
    }
    kernel.point(last)
}

/// Outcome of one Euler step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: State,
    /// Coordinates whose `h lambda` exceeded one.
    pub clamped: u64,
    pub jumped: u64,
}

/// One Euler step from `t` to `t + h` using a fully materialized `g`.
pub fn euler_step(
    x: &State,
    g: &GenOut,
    t: f64,
    h: f64,
    schedule: JumpSchedule,
    bounds: Option<(f64, f64)>,
    rng: &mut impl Rng,
) -> Result<Step> {
    step_with(x, g, t, h, schedule, bounds, rng, |_| {
        Err(Error::State("jump kernel was not materialized".into()))
    })
}

#[allow(clippy::too_many_arguments)]
fn step_with(
    x: &State,
    g: &GenOut,
    t: f64,
    h: f64,
    schedule: JumpSchedule,
    bounds: Option<(f64, f64)>,
    rng: &mut impl Rng,
    mut kernel_for: impl FnMut(usize) -> Result<Option<JumpDim>>,
) -> Result<Step> {
    if !(h > 0.0) || t + h > 1.0 + 1e-12 {
        return Err(Error::Range(format!("step [{t}, {}] leaves [0, 1]", t + h)));
    }
    if g.signature() != x.signature() {
        return Err(Error::shape("generator and state shapes differ"));
    }
    let mut out = x.clone();
    let (mut clamped, mut jumped) = (0, 0);
    for i in 0..x.x.len() {
        let lam = g.jumps[i].as_ref().map_or(0.0, |j| j.intensity);
        let p = jump_probability(schedule, lam, t, h, &mut clamped)?;
        if p > 0.0 && rng.random::<f64>() < p {
            let fetched;
            let kernel = match g.jumps[i].as_ref().and_then(|j| j.kernel.as_ref()) {
                Some(k) => k,
                None => {
                    fetched = kernel_for(i)?;
                    match fetched.as_ref().and_then(|j| j.kernel.as_ref()) {
                        Some(k) => k,
                        None => return Err(Error::State(format!("no jump kernel for coordinate {i}"))),
                    }
                }
            };
            out.x[i] = draw_from(kernel, rng);
            jumped += 1;
        } else {
            let mut v = x.x[i] + h * g.velocity[i];
            if g.diffusion[i] > 0.0 {
                let e: f64 = rng.sample(StandardNormal);
                v += (h * g.diffusion[i]).sqrt() * e;
            }
            out.x[i] = v;
        }
        if let Some((a1, a2)) = bounds {
            out.x[i] = reflect(out.x[i], a1, a2);
        }
    }
    for (k, row) in g.rates.iter().enumerate() {
        if !row.is_empty() {
            out.tokens[k] = ctmc_step(x.tokens[k], row, h, rng)?;
        }
    }
    Ok(Step { state: out, clamped, jumped })
}

/// One recorded trajectory point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajPoint {
    pub sample: usize,
    pub step: usize,
    pub t: f64,
    pub state: State,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    /// States at `t = 1 - h`.
    pub finals: Vec<State>,
    /// `(grid time, ensemble)` per requested snapshot time.
    pub snapshots: Vec<(f64, Vec<State>)>,
    pub trajectories: Vec<TrajPoint>,
    pub clamped: u64,
    pub jumps: u64,
    pub schedule: JumpSchedule,
}

/// RNG stream of trajectory `index` under `seed`.
pub fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64);
    r
}

struct Traj {
    last: State,
    snaps: Vec<State>,
    points: Vec<TrajPoint>,
}

/// Runs `n_samples` independent trajectories from the prior. Output is
/// identical for a given seed regardless of the number of worker threads.
pub fn simulate<F: Field + ?Sized>(field: &F, cfg: &SimConfig) -> Result<Samples> {
    cfg.validate()?;
    let schedule = cfg.jump_schedule.unwrap_or_else(|| field.preferred_schedule());
    let h = cfg.h();
    let snap_steps: Vec<usize> = cfg.snapshot_times.iter().map(|t| cfg.snapshot_step(*t)).collect();
    let clamped = AtomicU64::new(0);
    let jumps = AtomicU64::new(0);
    let run = |n: usize| -> Result<Traj> {
        let mut rng = trajectory_rng(cfg.seed, n);
        let mut x = field.sample_prior(&mut rng);
        let mut snaps = vec![State::default(); snap_steps.len()];
        let mut points = Vec::new();
        let (mut c, mut j) = (0, 0);
        for k in 0..cfg.n_steps {
            let t = k as f64 * h;
            for (s, at) in snaps.iter_mut().zip(&snap_steps) {
                if *at == k {
                    *s = x.clone();
                }
            }
            if cfg.record_trajectories {
                points.push(TrajPoint { sample: n, step: k, t, state: x.clone() });
            }
            if k + 1 == cfg.n_steps {
                break;
            }
            let n_sub = match cfg.stiff_step {
                Some(lim) => {
                    let end = t + h;
                    let st = field.stiffness(if end < 1.0 { end } else { t })?;
                    ((h * st / lim).ceil() as usize).max(1)
                }
                None => 1,
            };
            let hs = h / n_sub as f64;
            for m in 0..n_sub {
                let ts = t + m as f64 * hs;
                let g = field.genout(ts, &x, false)?;
                let step = step_with(&x, &g, ts, hs, schedule, cfg.reflection_bounds, &mut rng, |i| {
                    field.jump_kernel(ts, &x, i)
                })?;
                c += step.clamped;
                j += step.jumped;
                x = step.state;
            }
        }
        clamped.fetch_add(c, Ordering::Relaxed);
        jumps.fetch_add(j, Ordering::Relaxed);
        Ok(Traj { last: x, snaps, points })
    };
    let trajs: Vec<Traj> = (0..cfg.n_samples).into_par_iter().map(run).collect::<Result<_>>()?;
    let mut snapshots: Vec<(f64, Vec<State>)> = snap_steps
        .iter()
        .map(|k| (*k as f64 * h, Vec::with_capacity(cfg.n_samples)))
        .collect();
    let mut finals = Vec::with_capacity(cfg.n_samples);
    let mut trajectories = Vec::new();
    for tr in trajs {
        for (dst, s) in snapshots.iter_mut().zip(tr.snaps) {
            dst.1.push(s);
        }
        finals.push(tr.last);
        trajectories.extend(tr.points);
    }
    Ok(Samples {
        finals,
        snapshots,
        trajectories,
        clamped: clamped.into_inner(),
        jumps: jumps.into_inner(),
        schedule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::JumpBins;
    use crate::paths::Dataset;

    fn rng() -> ChaCha8Rng {
        trajectory_rng(3, 0)
    }

    #[test]
    fn survival_examples() {
        assert_eq!(jump_survival(0.0, 0.3, 0.1).unwrap(), 1.0);
        assert!((jump_survival(1.0, 0.0, 0.5).unwrap() - (-1.5f64).exp()).abs() < 1e-15);
        assert!((jump_survival(1.0, 0.0, 0.5).unwrap() - 0.22313).abs() < 1e-5);
        for &lam in &[0.1, 1.0, 10.0] {
            for &t in &[0.1, 0.5] {
                let h = 1e-4;
                let r = jump_survival(lam, t, h).unwrap();
                assert!(((1.0 - r) / h - lam).abs() / lam <= 0.01);
            }
        }
        assert!(matches!(jump_survival(1.0, 0.6, 0.4), Err(Error::Range(_))));
    }

    #[test]
    fn linear_hazard_agrees_with_survival_to_second_order() {
        let (lam, t) = (2.0, 0.3);
        let gap = |h: f64| ((1.0 - jump_survival(lam, t, h).unwrap()) - h * lam).abs();
        let ratio = gap(1e-3) / gap(5e-4);
        assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
    }

    #[test]
    fn reflect_examples() {
        assert_eq!(reflect(0.3, 0.0, 1.0), 0.3);
        assert!((reflect(1.3, 0.0, 1.0) - 0.7).abs() < 1e-12);
        assert!((reflect(2.4, 0.0, 1.0) - 0.4).abs() < 1e-12);
        assert!((reflect(-0.25, 0.0, 1.0) - 0.25).abs() < 1e-12);
        assert!((reflect(-1.2, -1.0, 2.0) - (-0.8)).abs() < 1e-12);
    }

    #[test]
    fn ctmc_step_examples() {
        let mut r = rng();
        assert_eq!(ctmc_step(1, &[0.0, 0.0, 0.0], 0.1, &mut r).unwrap(), 1);
        let n = 200_000;
        let switched = (0..n).filter(|_| ctmc_step(0, &[-2.0, 2.0], 0.1, &mut r).unwrap() == 1).count();
        let f = switched as f64 / n as f64;
        assert!((f - 0.2).abs() < 3.0 * (0.2f64 * 0.8 / n as f64).sqrt() + 1e-3, "{f}");
        assert!(matches!(ctmc_step(0, &[-20.0, 20.0], 0.1, &mut r), Err(Error::StepSize { .. })));
    }

    #[test]
    fn euler_step_examples() {
        let mut r = rng();
        let x = State::euclid(vec![0.4]);
        let zero = GenOut::flow(vec![0.0]);
        let s = euler_step(&x, &zero, 0.2, 0.1, JumpSchedule::LinearHazard, None, &mut r).unwrap();
        assert_eq!(s.state, x);
        let s = euler_step(&State::euclid(vec![0.0]), &GenOut::flow(vec![1.0]), 0.0, 0.1, JumpSchedule::LinearHazard, None, &mut r)
            .unwrap();
        assert!((s.state.x[0] - 0.1).abs() < 1e-15);

        let bins = JumpBins::new(-1.0, 1.0, 5).unwrap();
        let mut g = GenOut::flow(vec![0.0]);
        g.jumps[0] = Some(JumpDim { intensity: 1e6, kernel: Some(JumpKernel::uniform(bins)) });
        let centers = bins.centers();
        for _ in 0..100 {
            let s = euler_step(&x, &g, 0.0, 0.1, JumpSchedule::LinearHazard, None, &mut r).unwrap();
            assert!(centers.contains(&s.state.x[0]));
            assert_eq!(s.clamped, 1);
        }
        assert!(matches!(
            euler_step(&x, &zero, 0.95, 0.1, JumpSchedule::LinearHazard, None, &mut r),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn two_step_flow_is_single_displacement() {
        let data = Dataset::euclid(vec![vec![2.0]], None).unwrap();
        let m = MarginalModel::new(CondPath::condot(1).unwrap(), data, crate::generators::GeneratorSpec::flow()).unwrap();
        let cfg = SimConfig { n_steps: 2, n_samples: 4, seed: 1, ..Default::default() };
        let out = simulate(&m, &cfg).unwrap();
        for (n, x) in out.finals.iter().enumerate() {
            let x0 = m.path.sample_prior(&mut trajectory_rng(1, n)).x[0];
            assert!((x.x[0] - (x0 + 0.5 * (2.0 - x0))).abs() < 1e-14);
        }
        assert!(simulate(&m, &SimConfig { n_steps: 1, ..cfg }).is_err());
    }

    #[test]
    fn simulate_is_thread_count_invariant() {
        let m = MarginalModel::new(CondPath::condot(1).unwrap(), Dataset::two_point(), "superposition:flow+jump".parse().unwrap())
            .unwrap();
        let cfg = SimConfig { n_steps: 50, n_samples: 64, seed: 9, snapshot_times: vec![0.5], ..Default::default() };
        let a = simulate(&m, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| simulate(&m, &cfg).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.schedule, JumpSchedule::CondotSurvival);
        assert_eq!(a.snapshots[0].0, 0.5);
    }

    #[test]
    fn reflected_outputs_stay_in_bounds_and_tokens_in_range() {
        let path = CondPath::mixture_uniform(-1.0, 1.0, crate::schedule::Schedule::Linear, 1)
            .unwrap()
            .product(CondPath::mixture_discrete(3, crate::schedule::Schedule::Linear, 1).unwrap());
        let data = Dataset::new(
            vec![State { x: vec![0.5], tokens: vec![2] }, State { x: vec![-0.3], tokens: vec![0] }],
            None,
        )
        .unwrap();
        let m = MarginalModel::new(path, data, crate::generators::GeneratorSpec::diffusion()).unwrap();
        let cfg = SimConfig {
            n_steps: 100,
            n_samples: 200,
            seed: 2,
            reflection_bounds: Some((-1.0, 1.0)),
            record_trajectories: true,
            ..Default::default()
        };
        let out = simulate(&m, &cfg).unwrap();
        for p in &out.trajectories {
            assert!((-1.0..=1.0).contains(&p.state.x[0]));
            assert!(p.state.tokens[0] < 3);
        }
        assert_eq!(out.trajectories.len(), 200 * 100);
    }

    #[test]
    fn stiff_langevin_needs_substeps() {
        let c = crate::marginal::Combinators { langevin_beta: 1.0, ..Default::default() };
        let m = MarginalModel::with(CondPath::condot(1).unwrap(), Dataset::two_point(), GeneratorSpec::flow(), JumpBins::default(), c)
            .unwrap();
        assert_eq!(Field::stiffness(&m, 0.5).unwrap(), 4.0);
        let cfg = SimConfig { n_steps: 100, n_samples: 200, ..SimConfig::default() };
        let near = |s: &Samples| s.finals.iter().all(|x| (x.x[0].abs() - 1.0).abs() < 0.1);
        assert!(near(&simulate(&m, &cfg).unwrap()));
        assert!(!near(&simulate(&m, &SimConfig { stiff_step: None, ..cfg }).unwrap()));
    }
}
