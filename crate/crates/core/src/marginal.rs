//! Marginal generators over a finite dataset and the generator combinators.
//!
//! `F_t(x) = sum_i p(z_i | x) F_t^{z_i}(x)` is exact for an empirical data
//! measure. On top of it a model may add a Langevin component
//! `beta (grad log p_t . grad f + Laplacian f)`, which leaves every marginal
//! unchanged, or run as a predictor-corrector `a1 L + a2 Lbar` with
//! `a1 - a2 = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{cond_genout, cond_jump_kernel, ctmc_mixture_rates, euclid_dim, GenAccum, GenOut, GeneratorSpec, JumpBins, JumpDim, ModelClass};
use crate::paths::{CondPath, Dataset, PathKind, Signature, State};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Superposition {
    pub alpha1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorCorrector {
    pub a1: f64,
    pub a2: f64,
    /// Langevin weight of the corrector.
    #[serde(default = "one")]
    pub beta: f64,
}

fn one() -> f64 {
    1.0
}

/// Constant-in-time combinator weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Combinators {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superposition: Option<Superposition>,
    #[serde(default)]
    pub langevin_beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor_corrector: Option<PredictorCorrector>,
}

impl Combinators {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.superposition {
            if !(0.0..=1.0).contains(&s.alpha1) {
                return Err(Error::contract(format!("superposition alpha1 = {} outside [0, 1]", s.alpha1)));
            }
        }
        if !(self.langevin_beta >= 0.0) {
            return Err(Error::contract("langevin beta must be nonnegative"));
        }
        if let Some(pc) = self.predictor_corrector {
            check_pc(pc.a1, pc.a2)?;
            if !(pc.beta >= 0.0) {
                return Err(Error::contract("corrector beta must be nonnegative"));
            }
        }
        Ok(())
    }

    fn needs_score(&self) -> bool {
        self.langevin_beta > 0.0 || self.predictor_corrector.is_some_and(|pc| pc.a2 > 0.0 && pc.beta > 0.0)
    }
}

fn check_pc(a1: f64, a2: f64) -> Result<()> {
    if !(a1 >= 0.0 && a2 >= 0.0) || (a1 - a2 - 1.0).abs() > 1e-12 {
        return Err(Error::contract(format!("predictor-corrector needs a1, a2 >= 0 and a1 - a2 = 1, got ({a1}, {a2})")));
    }
    Ok(())
}

/// Exact marginal model: path, data and a conditional generator choice.
#[derive(Debug, Clone)]
pub struct MarginalModel {
    pub path: CondPath,
    pub data: Dataset,
    pub spec: GeneratorSpec,
    pub bins: JumpBins,
    pub combinators: Combinators,
}

impl MarginalModel {
    pub fn new(path: CondPath, data: Dataset, spec: GeneratorSpec) -> Result<Self> {
        MarginalModel::with(path, data, spec, JumpBins::default(), Combinators::default())
    }

    pub fn with(
        path: CondPath,
        data: Dataset,
        mut spec: GeneratorSpec,
        bins: JumpBins,
        combinators: Combinators,
    ) -> Result<Self> {
        if data.signature() != path.signature() {
            return Err(Error::shape(format!(
                "dataset has {:?}, path expects {:?}",
                data.signature(),
                path.signature()
            )));
        }
        combinators.validate()?;
        if let Some(s) = combinators.superposition {
            if spec.parts().len() != 2 {
                return Err(Error::Config("superposition alpha1 needs a two-part generator".into()));
            }
            spec = spec.with_weights(&[s.alpha1, 1.0 - s.alpha1])?;
        }
        if combinators.needs_score() && !geometric_only(&path) {
            return Err(Error::Unsupported("the Langevin component needs a geometric-average path".into()));
        }
        if combinators.predictor_corrector.is_some() && spec.parts().iter().any(|(c, w)| *c != ModelClass::Flow && *w > 0.0) {
            return Err(Error::Unsupported("predictor-corrector runs on flow generators only".into()));
        }
        Ok(MarginalModel { path, data, spec, bins, combinators })
    }

    pub fn signature(&self) -> Signature {
        self.path.signature()
    }

    /// Whether the generator at `x` depends on the posterior at all. A pure
    /// mixture jump does not: its intensity ignores `z`, and only the
    /// destination needs the posterior.
    fn needs_posterior(&self) -> bool {
        if self.combinators.needs_score() || self.signature().discrete > 0 {
            return true;
        }
        self.path.slots().any(|s| {
            self.spec.intensity_depends_on_z(&s.kind)
                || self.spec.uses(ModelClass::Flow)
                || self.spec.uses(ModelClass::Diffusion)
        })
    }

    pub fn posterior(&self, t: f64, x: &State) -> Result<Vec<f64>> {
        self.path.posterior_weights(&self.data, t, x)
    }

    /// `F_t(x)` with all jump kernels materialized.
    pub fn genout(&self, t: f64, x: &State) -> Result<GenOut> {
        self.genout_with(t, x, true)
    }

    /// `F_t(x)`; with `materialize = false` jump kernels are left out and
    /// can be built per coordinate through [`MarginalModel::jump_kernel`].
    pub fn genout_with(&self, t: f64, x: &State, materialize: bool) -> Result<GenOut> {
        if !materialize && !self.needs_posterior() {
            return cond_genout(&self.path, &self.spec, &self.bins, x, t, x, false);
        }
        let w = self.posterior(t, x)?;
        let mut g = if materialize {
            let mut acc = GenAccum::new(self.signature(), true);
            for (z, wi) in self.data.points().iter().zip(&w) {
                if *wi > 0.0 {
                    acc.add(&cond_genout(&self.path, &self.spec, &self.bins, z, t, x, true)?, *wi)?;
                }
            }
            acc.finish()
        } else {
            self.accumulate_lazy(&w, t, x)?
        };
        let score = if self.combinators.needs_score() {
            Some(marginal_score_w(&self.path, &self.data, &w, t, x)?)
        } else {
            None
        };
        if let Some(pc) = self.combinators.predictor_corrector {
            let mut gb = backward_flow(&g)?;
            if let Some(s) = &score {
                gb = add_langevin(&gb, s, pc.beta)?;
            }
            g = predictor_corrector(&g, &gb, pc.a1, pc.a2)?;
        }
        if let (Some(s), true) = (&score, self.combinators.langevin_beta > 0.0) {
            g = add_langevin(&g, s, self.combinators.langevin_beta)?;
        }
        Ok(g)
    }

    /// Posterior average of the conditional generators without kernels,
    /// summed in place.
    fn accumulate_lazy(&self, w: &[f64], t: f64, x: &State) -> Result<GenOut> {
        let mut g = GenOut::zeros(self.signature());
        let mut lam = vec![0.0; g.velocity.len()];
        for (z, wi) in self.data.points().iter().zip(w) {
            if *wi <= 0.0 {
                continue;
            }
            for slot in self.path.slots() {
                match slot.kind {
                    PathKind::MixtureDiscrete { vocab_size, schedule } => {
                        for i in slot.range {
                            let row = ctmc_mixture_rates(z.tokens[i], t, x.tokens[i], vocab_size, schedule)?;
                            g.rates[i].resize(vocab_size, 0.0);
                            for (a, b) in g.rates[i].iter_mut().zip(row) {
                                *a += wi * b;
                            }
                        }
                    }
                    kind => {
                        for i in slot.range {
                            for (class, cw) in self.spec.parts() {
                                if *cw == 0.0 {
                                    continue;
                                }
                                let (u, d, j) = euclid_dim(&kind, *class, z.x[i], t, x.x[i], &self.bins, false)?;
                                g.velocity[i] += wi * cw * u;
                                g.diffusion[i] += wi * cw * d;
                                if let Some(j) = j {
                                    lam[i] += wi * cw * j.intensity;
                                }
                            }
                        }
                    }
                }
            }
        }
        for (dst, l) in g.jumps.iter_mut().zip(lam) {
            if l > 0.0 {
                *dst = Some(JumpDim { intensity: l, kernel: None });
            }
        }
        Ok(g)
    }

    /// Marginal jump measure of Euclidean coordinate `i`, with kernel.
    pub fn jump_kernel(&self, t: f64, x: &State, i: usize) -> Result<Option<JumpDim>> {
        let w = self.posterior(t, x)?;
        let mut acc = GenAccum::new(Signature { euclid: 1, discrete: 0 }, true);
        for (z, wi) in self.data.points().iter().zip(&w) {
            if *wi > 0.0 {
                if let Some(j) = cond_jump_kernel(&self.path, &self.spec, &self.bins, z, t, x, i)? {
                    acc.add_jump(0, &j, *wi)?;
                }
            }
        }
        Ok(acc.finish().jumps.pop().flatten())
    }

    /// Uses the survival scheduler when the jump part is the geometric jump.
    pub fn prefers_survival_schedule(&self) -> bool {
        self.spec.uses(ModelClass::Jump)
            && self.path.slots().any(|s| matches!(s.kind, PathKind::GeometricAverage { .. }))
    }

    /// `beta / (1 - kappa_t)^2` summed over the score terms: the score of a
    /// geometric path contracts at rate up to `1 / (1 - kappa_t)^2`.
    pub fn score_stiffness(&self, t: f64) -> Result<f64> {
        let mut beta = self.combinators.langevin_beta;
        if let Some(pc) = self.combinators.predictor_corrector {
            beta += pc.a2 * pc.beta;
        }
        if beta == 0.0 {
            return Ok(0.0);
        }
        let mut worst: f64 = 0.0;
        for slot in self.path.slots() {
            if let PathKind::GeometricAverage { schedule } = slot.kind {
                let s = 1.0 - schedule.kappa(t)?;
                worst = worst.max(1.0 / (s * s));
            }
        }
        Ok(beta * worst)
    }
}

fn geometric_only(path: &CondPath) -> bool {
    path.slots().all(|s| matches!(s.kind, PathKind::GeometricAverage { .. } | PathKind::MixtureDiscrete { .. }))
}

/// `F_t(x)` of the exact marginal model.
pub fn marginal_genout(model: &MarginalModel, t: f64, x: &State) -> Result<GenOut> {
    model.genout(t, x)
}

/// Score `grad_x log p_t(x)` of the marginal of a geometric path over a
/// finite dataset: `sum_i w_i(x) (kappa z_i - x)/(1 - kappa)^2`.
pub fn marginal_score(path: &CondPath, data: &Dataset, t: f64, x: &State) -> Result<Vec<f64>> {
    if !geometric_only(path) {
        return Err(Error::Unsupported("the marginal score is closed-form only for geometric paths".into()));
    }
    let w = path.posterior_weights(data, t, x)?;
    marginal_score_w(path, data, &w, t, x)
}

fn marginal_score_w(path: &CondPath, data: &Dataset, w: &[f64], t: f64, x: &State) -> Result<Vec<f64>> {
    let mut score = vec![0.0; x.x.len()];
    for slot in path.slots() {
        if let PathKind::GeometricAverage { schedule } = slot.kind {
            let k = schedule.kappa(t)?;
            let s2 = (1.0 - k) * (1.0 - k);
            for i in slot.range {
                score[i] = data
                    .points()
                    .iter()
                    .zip(w)
                    .map(|(z, wi)| wi * (k * z.x[i] - x.x[i]) / s2)
                    .sum();
            }
        }
    }
    Ok(score)
}

/// Markov superposition `a1 g1 + a2 g2` with `a1 + a2 = 1`.
pub fn superpose(g1: &GenOut, g2: &GenOut, a1: f64, a2: f64) -> Result<GenOut> {
    if !(a1 >= 0.0 && a2 >= 0.0) || (a1 + a2 - 1.0).abs() > 1e-12 {
        return Err(Error::contract(format!("superposition needs a1, a2 >= 0 and a1 + a2 = 1, got ({a1}, {a2})")));
    }
    combine(g1, g2, a1, a2)
}

fn combine(g1: &GenOut, g2: &GenOut, a1: f64, a2: f64) -> Result<GenOut> {
    let has_kernels = |g: &GenOut| g.jumps.iter().flatten().all(|j| j.kernel.is_some());
    let mut acc = GenAccum::new(g1.signature(), has_kernels(g1) && has_kernels(g2));
    acc.add(g1, a1)?;
    acc.add(g2, a2)?;
    let mut out = acc.finish();
    // rows that were never touched stay empty; keep input shape
    for (o, r) in out.rates.iter_mut().zip(&g1.rates) {
        if o.is_empty() {
            o.resize(r.len(), 0.0);
        }
    }
    Ok(out)
}

/// Adds the Langevin component: drift `beta score`, diffusion `2 beta`.
pub fn add_langevin(g: &GenOut, score: &[f64], beta: f64) -> Result<GenOut> {
    if !(beta >= 0.0) {
        return Err(Error::contract("langevin beta must be nonnegative"));
    }
    if score.len() != g.velocity.len() {
        return Err(Error::shape("score and velocity differ in length"));
    }
    let mut out = g.clone();
    for ((v, d), s) in out.velocity.iter_mut().zip(out.diffusion.iter_mut()).zip(score) {
        *v += beta * s;
        *d += 2.0 * beta;
    }
    Ok(out)
}

/// `a1 gF + a2 gB` with `a1 - a2 = 1`, where `gB` runs backward in time.
pub fn predictor_corrector(gf: &GenOut, gb: &GenOut, a1: f64, a2: f64) -> Result<GenOut> {
    check_pc(a1, a2)?;
    combine(gf, gb, a1, a2)
}

/// Time reversal of a pure flow: the negated velocity.
pub fn backward_flow(g: &GenOut) -> Result<GenOut> {
    if !g.is_pure_flow() {
        return Err(Error::Unsupported("backward generators exist here for pure flows only".into()));
    }
    let mut out = GenOut::zeros(g.signature());
    out.velocity = g.velocity.iter().map(|v| -v).collect();
    out.rates = g.rates.iter().map(|r| vec![0.0; r.len()]).collect();
    Ok(out)
}

/// Stacks per-factor generators into one on the product space.
pub fn product_compose(parts: &[(Signature, GenOut)]) -> Result<GenOut> {
    let mut out = GenOut::default();
    for (sig, g) in parts {
        if g.signature() != *sig {
            return Err(Error::shape(format!(
                "factor declared {:?} but its generator has {:?}",
                sig,
                g.signature()
            )));
        }
        out.velocity.extend_from_slice(&g.velocity);
        out.diffusion.extend_from_slice(&g.diffusion);
        out.jumps.extend(g.jumps.iter().cloned());
        out.rates.extend(g.rates.iter().cloned());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{JumpKernel, ctmc_mixture_rates};
    use crate::schedule::Schedule;

    fn condot_two(points: Vec<f64>) -> MarginalModel {
        let data = Dataset::euclid(points.into_iter().map(|p| vec![p]).collect(), None).unwrap();
        MarginalModel::new(CondPath::condot(1).unwrap(), data, GeneratorSpec::flow()).unwrap()
    }

    #[test]
    fn marginal_examples() {
        let m = condot_two(vec![-1.0, 1.0]);
        assert!(m.genout(0.3, &State::euclid(vec![0.0])).unwrap().velocity[0].abs() < 1e-15);
        let m = condot_two(vec![0.0, 2.0]);
        let u = m.genout(0.5, &State::euclid(vec![1.0])).unwrap().velocity[0];
        let e = (-2.0f64).exp();
        let want = e / (e + 1.0) * (-2.0) + 1.0 / (e + 1.0) * 2.0;
        assert!((u - want).abs() < 1e-12);
        assert!((u - 1.523).abs() < 1e-3);
    }

    #[test]
    fn single_point_equals_conditional() {
        let path = CondPath::condot(2).unwrap();
        let z = State::euclid(vec![0.5, -1.0]);
        let data = Dataset::new(vec![z.clone()], None).unwrap();
        let spec: GeneratorSpec = "superposition:flow+jump".parse().unwrap();
        let m = MarginalModel::with(path.clone(), data, spec.clone(), JumpBins::default(), Combinators::default()).unwrap();
        let x = State::euclid(vec![2.0, 0.3]);
        let g = m.genout(0.4, &x).unwrap();
        let c = cond_genout(&path, &spec, &JumpBins::default(), &z, 0.4, &x, true).unwrap();
        assert_eq!(g.velocity, c.velocity);
        let (a, b) = (g.jumps[0].as_ref().unwrap(), c.jumps[0].as_ref().unwrap());
        assert!((a.intensity - b.intensity).abs() < 1e-12);
        for (p, q) in a.kernel.as_ref().unwrap().probs().iter().zip(b.kernel.as_ref().unwrap().probs()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn linearity_of_marginalization() {
        let path = CondPath::condot(1).unwrap();
        let data = Dataset::euclid(vec![vec![-1.0], vec![0.3], vec![2.0]], Some(vec![0.2, 0.5, 0.3])).unwrap();
        let spec: GeneratorSpec = "superposition:flow+jump".parse().unwrap();
        let bins = JumpBins::default();
        let m = MarginalModel::with(path.clone(), data.clone(), spec.clone(), bins, Combinators::default()).unwrap();
        let x = State::euclid(vec![1.7]);
        let t = 0.35;
        let g = m.genout(t, &x).unwrap();
        let w = path.posterior_weights(&data, t, &x).unwrap();
        let mut u = 0.0;
        let mut mass = vec![0.0; bins.count];
        let mut lam = 0.0;
        for (z, wi) in data.points().iter().zip(&w) {
            let c = cond_genout(&path, &spec, &bins, z, t, &x, true).unwrap();
            u += wi * c.velocity[0];
            let Some(j) = c.jumps[0].as_ref() else { continue };
            lam += wi * j.intensity;
            for (m, p) in mass.iter_mut().zip(j.kernel.as_ref().unwrap().probs()) {
                *m += wi * j.intensity * p;
            }
        }
        assert!((g.velocity[0] - u).abs() < 1e-12);
        let j = g.jumps[0].as_ref().unwrap();
        assert!((j.intensity - lam).abs() < 1e-12);
        for (p, m) in j.kernel.as_ref().unwrap().probs().iter().zip(&mass) {
            assert!((p * lam - m).abs() < 1e-12);
        }
    }

    #[test]
    fn lazy_kernel_matches_materialized() {
        let path = CondPath::condot(2).unwrap();
        let data = Dataset::euclid(vec![vec![-1.0, 1.0], vec![1.0, 0.5]], None).unwrap();
        let m = MarginalModel::new(path, data, GeneratorSpec::jump()).unwrap();
        let x = State::euclid(vec![2.5, -1.5]);
        let full = m.genout(0.2, &x).unwrap();
        let lazy = m.genout_with(0.2, &x, false).unwrap();
        for i in 0..2 {
            let a = full.jumps[i].as_ref().unwrap();
            assert!((a.intensity - lazy.jumps[i].as_ref().unwrap().intensity).abs() < 1e-12);
            let k = m.jump_kernel(0.2, &x, i).unwrap().unwrap();
            assert!((k.intensity - a.intensity).abs() < 1e-12);
            for (p, q) in k.kernel.unwrap().probs().iter().zip(a.kernel.as_ref().unwrap().probs()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lazy_accumulation_matches_materialized() {
        let euclid = CondPath::mixture_uniform(-2.0, 2.0, Schedule::Cosine, 1).unwrap();
        let joint = euclid.clone().product(CondPath::mixture_discrete(3, Schedule::Linear, 1).unwrap());
        let data = Dataset::new(
            vec![
                State { x: vec![-1.0], tokens: vec![0] },
                State { x: vec![0.5], tokens: vec![2] },
                State { x: vec![1.5], tokens: vec![2] },
            ],
            Some(vec![0.2, 0.5, 0.3]),
        )
        .unwrap();
        let spec: GeneratorSpec = "superposition:flow=0.3,diffusion=0.2,jump=0.5".parse().unwrap();
        let m = MarginalModel::new(joint, data, spec).unwrap();
        for (t, x, tok) in [(0.3, 0.2, 1), (0.7, -1.9, 2), (0.5, 1.5, 2)] {
            let s = State { x: vec![x], tokens: vec![tok] };
            let full = m.genout(t, &s).unwrap();
            let lazy = m.genout_with(t, &s, false).unwrap();
            assert!((full.velocity[0] - lazy.velocity[0]).abs() < 1e-12);
            assert!((full.diffusion[0] - lazy.diffusion[0]).abs() < 1e-12);
            let (a, b) = (full.jumps[0].as_ref().unwrap(), lazy.jumps[0].as_ref().unwrap());
            assert!((a.intensity - b.intensity).abs() < 1e-12);
            for (p, q) in full.rates[0].iter().zip(&lazy.rates[0]) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixture_jump_skips_posterior_when_lazy() {
        let data = Dataset::checkerboard_2d(4, -1.0, 1.0).unwrap();
        let path = CondPath::mixture_uniform(-1.0, 1.0, Schedule::Linear, 2).unwrap();
        let m = MarginalModel::new(path, data, GeneratorSpec::jump()).unwrap();
        let x = State::euclid(vec![0.1, 0.2]);
        let g = m.genout_with(0.5, &x, false).unwrap();
        assert_eq!(g.jumps[0].as_ref().unwrap().intensity, 2.0);
        let k = m.jump_kernel(0.5, &x, 0).unwrap().unwrap();
        assert_eq!(k.intensity, 2.0);
        match k.kernel.unwrap() {
            JumpKernel::Atomic { atoms, probs } => {
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(atoms.iter().all(|a| a.abs() < 1.0));
            }
            k => panic!("unexpected kernel {k:?}"),
        }
    }

    #[test]
    fn score_examples_and_fd() {
        let path = CondPath::condot(1).unwrap();
        let single = Dataset::euclid(vec![vec![1.3]], None).unwrap();
        let s = marginal_score(&path, &single, 0.4, &State::euclid(vec![0.2])).unwrap()[0];
        assert!((s - (0.4 * 1.3 - 0.2) / 0.36).abs() < 1e-12);
        let sym = Dataset::two_point();
        assert!(marginal_score(&path, &sym, 0.7, &State::euclid(vec![0.0])).unwrap()[0].abs() < 1e-14);

        let data = Dataset::euclid(vec![vec![-1.0], vec![0.5], vec![2.0]], Some(vec![0.3, 0.3, 0.4])).unwrap();
        let logp = |t: f64, x: f64| -> f64 {
            data.points()
                .iter()
                .zip(data.weights())
                .map(|(z, w)| w * crate::math::normal_pdf(x, t * z.x[0], 1.0 - t))
                .sum::<f64>()
                .ln()
        };
        for &t in &[0.1, 0.5, 0.8] {
            for i in 0..=20 {
                let x = -3.0 + 0.3 * i as f64;
                let fd = (logp(t, x + 1e-5) - logp(t, x - 1e-5)) / 2e-5;
                let s = marginal_score(&path, &data, t, &State::euclid(vec![x])).unwrap()[0];
                assert!((fd - s).abs() < 1e-5 * s.abs().max(1.0), "t={t} x={x}");
            }
        }
        let mix = CondPath::mixture_uniform(0.0, 1.0, Schedule::Linear, 1).unwrap();
        assert!(matches!(
            marginal_score(&mix, &single, 0.4, &State::euclid(vec![0.2])),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn combinator_examples() {
        let u = GenOut::flow(vec![1.0, 3.0]);
        let v = GenOut::flow(vec![3.0, -1.0]);
        assert_eq!(superpose(&u, &v, 1.0, 0.0).unwrap(), u);
        assert_eq!(superpose(&u, &v, 0.5, 0.5).unwrap().velocity, vec![2.0, 1.0]);
        assert!(matches!(superpose(&u, &v, 0.6, 0.6), Err(Error::Contract(_))));

        let mut j = GenOut::zeros(Signature { euclid: 1, discrete: 0 });
        let bins = JumpBins::new(-1.0, 1.0, 4).unwrap();
        j.jumps[0] = Some(JumpDim { intensity: 4.0, kernel: Some(JumpKernel::uniform(bins)) });
        let f = GenOut::flow(vec![2.0]);
        let s = superpose(&f, &j, 0.5, 0.5).unwrap();
        assert_eq!(s.velocity, vec![1.0]);
        assert_eq!(s.jumps[0].as_ref().unwrap().intensity, 2.0);

        let z = GenOut::flow(vec![0.0]);
        let l = add_langevin(&z, &[2.0], 1.0).unwrap();
        assert_eq!((l.velocity[0], l.diffusion[0]), (2.0, 2.0));
        assert_eq!(add_langevin(&u, &[5.0, 5.0], 0.0).unwrap(), u);

        let back = backward_flow(&GenOut::flow(vec![3.0])).unwrap();
        assert_eq!(back.velocity, vec![-3.0]);
        assert_eq!(backward_flow(&back).unwrap(), GenOut::flow(vec![3.0]));
        assert!(matches!(backward_flow(&l), Err(Error::Unsupported(_))));

        let uu = GenOut::flow(vec![1.5]);
        let pc = predictor_corrector(&uu, &backward_flow(&uu).unwrap(), 2.0, 1.0).unwrap();
        assert_eq!(pc.velocity, vec![1.5]);
        assert_eq!(predictor_corrector(&uu, &back, 1.0, 0.0).unwrap(), uu);
        assert!(matches!(predictor_corrector(&uu, &back, 1.0, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn superpose_commutes_and_associates() {
        let g = [GenOut::flow(vec![1.0]), GenOut::flow(vec![-2.0]), GenOut::flow(vec![7.0])];
        let ab = superpose(&g[0], &g[1], 0.3, 0.7).unwrap();
        let ba = superpose(&g[1], &g[0], 0.7, 0.3).unwrap();
        assert!((ab.velocity[0] - ba.velocity[0]).abs() < 1e-15);
        // (0.2 a + 0.8 (0.25 b + 0.75 c)) == (0.4 (0.5 a + 0.5 b) + 0.6 c)
        let left = superpose(&g[0], &superpose(&g[1], &g[2], 0.25, 0.75).unwrap(), 0.2, 0.8).unwrap();
        let right = superpose(&superpose(&g[0], &g[1], 0.5, 0.5).unwrap(), &g[2], 0.4, 0.6).unwrap();
        assert!((left.velocity[0] - right.velocity[0]).abs() < 1e-14);
    }

    #[test]
    fn product_compose_and_project() {
        let a = GenOut::flow(vec![1.0]);
        let b = GenOut::flow(vec![2.0]);
        let s1 = Signature { euclid: 1, discrete: 0 };
        let ab = product_compose(&[(s1, a.clone()), (s1, b.clone())]).unwrap();
        assert_eq!(ab.velocity, vec![1.0, 2.0]);
        let empty = GenOut::default();
        assert_eq!(product_compose(&[(s1, a.clone()), (Signature::default(), empty)]).unwrap(), a);
        assert!(product_compose(&[(Signature { euclid: 2, discrete: 0 }, a.clone())]).is_err());

        let mut c = GenOut::zeros(Signature { euclid: 0, discrete: 1 });
        c.rates[0] = ctmc_mixture_rates(1, 0.5, 0, 2, Schedule::Linear).unwrap();
        let ac = product_compose(&[(s1, a.clone()), (c.signature(), c.clone())]).unwrap();
        assert_eq!(ac.project(0..1, 0..0), a);
        assert_eq!(ac.project(1..1, 0..1), c);
    }

    #[test]
    fn joint_euclid_discrete_marginal() {
        let path = CondPath::condot(1).unwrap().product(CondPath::mixture_discrete(2, Schedule::Linear, 1).unwrap());
        let data = Dataset::new(
            vec![
                State { x: vec![-1.0], tokens: vec![0] },
                State { x: vec![1.0], tokens: vec![1] },
            ],
            None,
        )
        .unwrap();
        let m = MarginalModel::new(path, data, GeneratorSpec::flow()).unwrap();
        let g = m.genout(0.5, &State { x: vec![0.0], tokens: vec![0] }).unwrap();
        g.check_invariants().unwrap();
        // discrete likelihoods: kappa + (1 - kappa)/N = 0.75 against 0.25
        assert!((g.velocity[0] - (0.75 * -2.0 + 0.25 * 2.0)).abs() < 1e-12);
        assert!((g.rates[0][1] - 0.25 * 2.0).abs() < 1e-12);
        assert!((g.rates[0][0] + 0.25 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn langevin_requires_geometric_path() {
        let data = Dataset::two_point();
        let path = CondPath::mixture_uniform(-2.0, 2.0, Schedule::Linear, 1).unwrap();
        let c = Combinators { langevin_beta: 1.0, ..Default::default() };
        assert!(MarginalModel::with(path, data, GeneratorSpec::flow(), JumpBins::default(), c).is_err());
    }
}
