//! A small MLP field `F_t^theta(x)` with typed heads, reverse-mode
//! gradients, Adam, and the conditional generator matching training loop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generators::{GenOut, GeneratorSpec, JumpBins, JumpDim, JumpKernel, ModelClass};
use crate::loss::{cgm_loss, Bregman};
use crate::marginal::MarginalModel;
use crate::paths::{CondPath, Dataset, PathKind, Signature, State};
use crate::sim::{Field, JumpSchedule};

/// How the velocity head output `v` maps to a velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityParam {
    /// `u = v`.
    #[default]
    Direct,
    /// `u = (v - x)/(1 - t)`: `v` predicts the endpoint.
    Endpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Heads {
    pub velocity: bool,
    /// Log-intensity and bin logits.
    pub jump: bool,
    pub rates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub euclid: usize,
    /// Vocabulary size of each discrete coordinate.
    pub vocab: Vec<usize>,
    pub embed: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: Heads,
    pub bins: JumpBins,
    #[serde(default)]
    pub velocity_param: VelocityParam,
}

impl Arch {
    pub fn for_path(path: &CondPath, spec: &GeneratorSpec, width: usize, depth: usize, embed: usize, bins: JumpBins) -> Result<Self> {
        if spec.uses(ModelClass::Diffusion) {
            return Err(Error::Unsupported("no network head for diffusion coefficients".into()));
        }
        let sig = path.signature();
        let vocab = path
            .slots()
            .filter_map(|s| match s.kind {
                PathKind::MixtureDiscrete { vocab_size, .. } => Some(vec![vocab_size; s.range.len()]),
                _ => None,
            })
            .flatten()
            .collect();
        let heads = Heads {
            velocity: sig.euclid > 0 && spec.uses(ModelClass::Flow),
            jump: sig.euclid > 0 && spec.uses(ModelClass::Jump),
            rates: sig.discrete > 0,
        };
        let a = Arch { euclid: sig.euclid, vocab, embed, width, depth, heads, bins, velocity_param: VelocityParam::Direct };
        a.validate()?;
        Ok(a)
    }

    fn validate(&self) -> Result<()> {
        if !self.embed.is_multiple_of(2) || self.width == 0 || self.depth == 0 {
            return Err(Error::Config("embedding must be even; width and depth positive".into()));
        }
        if !(self.heads.velocity || self.heads.jump || self.heads.rates) {
            return Err(Error::Config("network has no heads".into()));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.euclid + self.vocab.iter().sum::<usize>() + self.embed
    }

    /// Output widths of the head layers, zero when absent.
    fn head_dims(&self) -> [usize; 4] {
        let d = self.euclid;
        [
            if self.heads.velocity { d } else { 0 },
            if self.heads.jump { d } else { 0 },
            if self.heads.jump { d * self.bins.count } else { 0 },
            if self.heads.rates { self.vocab.iter().map(|n| n + 1).sum() } else { 0 },
        ]
    }

    pub fn signature(&self) -> Signature {
        Signature { euclid: self.euclid, discrete: self.vocab.len() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn forward(&self, p: &[f64], x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.n_out {
            let row = &p[self.w + o * self.n_in..self.w + (o + 1) * self.n_in];
            let mut s = p[self.b + o];
            for (w, v) in row.iter().zip(x) {
                s += w * v;
            }
            out.push(s);
        }
    }

    /// Accumulates parameter gradients; adds `W^T dy` into `dx` if given.
    fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64], dx: Option<&mut [f64]>) {
        for (o, d) in dy.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            g[self.b + o] += d;
            let gw = &mut g[self.w + o * self.n_in..self.w + (o + 1) * self.n_in];
            for (gw, v) in gw.iter_mut().zip(x) {
                *gw += d * v;
            }
        }
        if let Some(dx) = dx {
            for (o, d) in dy.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &p[self.w + o * self.n_in..self.w + (o + 1) * self.n_in];
                for (dx, w) in dx.iter_mut().zip(row) {
                    *dx += d * w;
                }
            }
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Multilayer perceptron with SiLU activations and sinusoidal time features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetRepr", into = "NetRepr")]
pub struct FieldNet {
    arch: Arch,
    params: Vec<f64>,
    trunk: Vec<Dense>,
    heads: [Option<Dense>; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetRepr {
    arch: Arch,
    params: Vec<f64>,
}

impl TryFrom<NetRepr> for FieldNet {
    type Error = Error;
    fn try_from(r: NetRepr) -> Result<Self> {
        let mut net = FieldNet::zeros(r.arch)?;
        if r.params.len() != net.params.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} parameters, architecture needs {}",
                r.params.len(),
                net.params.len()
            )));
        }
        net.params = r.params;
        Ok(net)
    }
}

impl From<FieldNet> for NetRepr {
    fn from(n: FieldNet) -> Self {
        NetRepr { arch: n.arch, params: n.params }
    }
}

/// Evaluated heads at one `(x, t)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Outputs {
    pub velocity: Vec<f64>,
    pub intensity: Vec<f64>,
    pub bin_probs: Vec<Vec<f64>>,
    /// Rate rows with `Q(x; x) = -sum_{y != x} Q(y; x)`.
    pub rates: Vec<Vec<f64>>,
}

/// Gradients of a scalar loss with respect to [`Outputs`]; diagonal rate
/// entries are ignored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadGrads {
    pub velocity: Vec<f64>,
    pub intensity: Vec<f64>,
    pub bin_probs: Vec<Vec<f64>>,
    pub rates: Vec<Vec<f64>>,
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    t: f64,
    tokens: Vec<usize>,
    out: Outputs,
    /// Per discrete coordinate: total rate and probabilities over `y != x`.
    rate_parts: Vec<(f64, Vec<f64>)>,
}

impl FieldNet {
    /// All-zero parameters.
    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let mut n = 0;
        let mut dense = |n_in: usize, n_out: usize| {
            let d = Dense { n_in, n_out, w: n, b: n + n_in * n_out };
            n += n_in * n_out + n_out;
            d
        };
        let mut trunk = Vec::with_capacity(arch.depth);
        let mut n_in = arch.input_dim();
        for _ in 0..arch.depth {
            trunk.push(dense(n_in, arch.width));
            n_in = arch.width;
        }
        let heads = arch.head_dims().map(|k| (k > 0).then(|| dense(arch.width, k)));
        Ok(FieldNet { arch, params: vec![0.0; n], trunk, heads })
    }

    /// Gaussian weights with variance `1/fan_in`, zero biases.
    pub fn init(arch: Arch, rng: &mut impl Rng) -> Result<Self> {
        let mut net = FieldNet::zeros(arch)?;
        let layers: Vec<(Dense, f64)> = net
            .trunk
            .iter()
            .map(|d| (*d, 1.0))
            .chain(net.heads.iter().flatten().map(|d| (*d, 0.5)))
            .collect();
        for (d, gain) in layers {
            let s = gain / (d.n_in as f64).sqrt();
            for w in &mut net.params[d.w..d.w + d.n_in * d.n_out] {
                *w = s * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(net)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn input(&self, x: &State, t: f64, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend_from_slice(&x.x);
        for (tok, n) in x.tokens.iter().zip(&self.arch.vocab) {
            buf.extend((0..*n).map(|y| if y == *tok { 1.0 } else { 0.0 }));
        }
        for k in 0..self.arch.embed / 2 {
            let w = (1u64 << k) as f64 * std::f64::consts::PI * t;
            buf.push(w.sin());
            buf.push(w.cos());
        }
    }

    /// Evaluates all heads and returns the tape for [`FieldNet::backward`].
    pub fn forward(&self, x: &State, t: f64) -> Result<(Outputs, Tape)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("time {t} outside [0, 1]")));
        }
        if x.signature() != self.arch.signature() {
            return Err(Error::shape(format!("state {:?} does not fit network {:?}", x.signature(), self.arch.signature())));
        }
        if let Some((tok, n)) = x.tokens.iter().zip(&self.arch.vocab).find(|(t, n)| **t >= **n) {
            return Err(Error::domain(format!("token {tok} outside [0, {n})")));
        }
        let endpoint = self.arch.heads.velocity && self.arch.velocity_param == VelocityParam::Endpoint;
        if endpoint && 1.0 - t < crate::schedule::SINGULAR_GUARD {
            return Err(Error::Singularity { t, what: "endpoint velocity" });
        }
        let p = &self.params;
        let mut tape = Tape { t, tokens: x.tokens.clone(), ..Default::default() };
        let mut h = Vec::new();
        self.input(x, t, &mut h);
        for d in &self.trunk {
            let mut z = Vec::with_capacity(d.n_out);
            d.forward(p, &h, &mut z);
            let a: Vec<f64> = z.iter().map(|z| z * sigmoid(*z)).collect();
            tape.acts.push(std::mem::replace(&mut h, a));
            tape.pre.push(z);
        }
        let mut raw = Vec::new();
        let mut out = Outputs::default();
        if let Some(d) = &self.heads[0] {
            d.forward(p, &h, &mut raw);
            out.velocity = match self.arch.velocity_param {
                VelocityParam::Direct => raw.clone(),
                VelocityParam::Endpoint => raw.iter().zip(&x.x).map(|(v, x)| (v - x) / (1.0 - t)).collect(),
            };
        }
        if let Some(d) = &self.heads[1] {
            d.forward(p, &h, &mut raw);
            out.intensity = raw.iter().map(|r| r.exp()).collect();
        }
        if let Some(d) = &self.heads[2] {
            d.forward(p, &h, &mut raw);
            out.bin_probs = raw
                .chunks(self.arch.bins.count)
                .map(|c| {
                    let mut v = c.to_vec();
                    crate::math::softmax_in_place(&mut v);
                    v
                })
                .collect();
        }
        if let Some(d) = &self.heads[3] {
            d.forward(p, &h, &mut raw);
            let mut off = 0;
            for (tok, n) in x.tokens.iter().zip(&self.arch.vocab) {
                let logits = &raw[off..off + n];
                let scale = raw[off + n].exp();
                off += n + 1;
                let mut pr: Vec<f64> = logits
                    .iter()
                    .enumerate()
                    .map(|(y, l)| if y == *tok { f64::NEG_INFINITY } else { *l })
                    .collect();
                if *n == 1 || !crate::math::softmax_in_place(&mut pr) {
                    pr = vec![0.0; *n];
                }
                let mut row: Vec<f64> = pr.iter().map(|q| scale * q).collect();
                row[*tok] = -row.iter().enumerate().filter(|(y, _)| y != tok).map(|(_, q)| q).sum::<f64>();
                out.rates.push(row);
                tape.rate_parts.push((scale, pr));
            }
        }
        tape.acts.push(h);
        tape.out = out.clone();
        Ok((out, tape))
    }

    /// Adds the parameter gradient of the loss behind `up` into `grad`.
    pub fn backward(&self, tape: &Tape, up: &HeadGrads, grad: &mut [f64]) -> Result<()> {
        if tape.acts.is_empty() {
            return Err(Error::State("backward called without a forward pass".into()));
        }
        if grad.len() != self.params.len() {
            return Err(Error::shape("gradient buffer does not match parameter count"));
        }
        let p = &self.params;
        let last = tape.acts.last().unwrap();
        let mut da = vec![0.0; self.arch.width];
        let check = |n: usize, want: usize, what: &str| -> Result<()> {
            if n != want {
                return Err(Error::shape(format!("{what} gradient has {n} entries, expected {want}")));
            }
            Ok(())
        };
        if let (Some(d), false) = (&self.heads[0], up.velocity.is_empty()) {
            check(up.velocity.len(), d.n_out, "velocity")?;
            let dy: Vec<f64> = match self.arch.velocity_param {
                VelocityParam::Direct => up.velocity.clone(),
                VelocityParam::Endpoint => up.velocity.iter().map(|g| g / (1.0 - tape.t)).collect(),
            };
            d.backward(p, last, &dy, grad, Some(&mut da));
        }
        if let (Some(d), false) = (&self.heads[1], up.intensity.is_empty()) {
            check(up.intensity.len(), d.n_out, "intensity")?;
            let dy: Vec<f64> = up.intensity.iter().zip(&tape.out.intensity).map(|(g, l)| g * l).collect();
            d.backward(p, last, &dy, grad, Some(&mut da));
        }
        if let (Some(d), false) = (&self.heads[2], up.bin_probs.is_empty()) {
            check(up.bin_probs.len(), self.arch.euclid, "bin")?;
            let mut dy = Vec::with_capacity(d.n_out);
            for (g, pr) in up.bin_probs.iter().zip(&tape.out.bin_probs) {
                check(g.len(), pr.len(), "bin")?;
                let s: f64 = g.iter().zip(pr).map(|(g, p)| g * p).sum();
                dy.extend(g.iter().zip(pr).map(|(g, p)| p * (g - s)));
            }
            d.backward(p, last, &dy, grad, Some(&mut da));
        }
        if let (Some(d), false) = (&self.heads[3], up.rates.is_empty()) {
            check(up.rates.len(), self.arch.vocab.len(), "rate")?;
            let mut dy = Vec::with_capacity(d.n_out);
            for ((g, (scale, pr)), tok) in up.rates.iter().zip(&tape.rate_parts).zip(&tape.tokens) {
                check(g.len(), pr.len(), "rate")?;
                // q_y = scale * p_y for y != tok
                let dp: Vec<f64> = g.iter().enumerate().map(|(y, g)| if y == *tok { 0.0 } else { g * scale }).collect();
                let dscale: f64 = g.iter().zip(pr).enumerate().filter(|(y, _)| y != tok).map(|(_, (g, p))| g * p).sum();
                let s: f64 = dp.iter().zip(pr).map(|(g, p)| g * p).sum();
                dy.extend(dp.iter().zip(pr).map(|(g, p)| p * (g - s)));
                dy.push(dscale * scale);
            }
            d.backward(p, last, &dy, grad, Some(&mut da));
        }
        for (l, d) in self.trunk.iter().enumerate().rev() {
            let z = &tape.pre[l];
            let dz: Vec<f64> = da
                .iter()
                .zip(z)
                .map(|(g, z)| {
                    let s = sigmoid(*z);
                    g * (s + z * s * (1.0 - s))
                })
                .collect();
            if l == 0 {
                d.backward(p, &tape.acts[0], &dz, grad, None);
            } else {
                let mut dx = vec![0.0; d.n_in];
                d.backward(p, &tape.acts[l], &dz, grad, Some(&mut dx));
                da = dx;
            }
        }
        Ok(())
    }

    /// The generator represented at `(t, x)`.
    pub fn genout(&self, t: f64, x: &State) -> Result<GenOut> {
        let (o, _) = self.forward(x, t)?;
        let mut g = GenOut::zeros(self.arch.signature());
        if self.arch.heads.velocity {
            g.velocity = o.velocity;
        }
        if self.arch.heads.jump {
            for (i, (lam, pr)) in o.intensity.into_iter().zip(o.bin_probs).enumerate() {
                g.jumps[i] = Some(JumpDim {
                    intensity: lam,
                    kernel: Some(JumpKernel::Binned { bins: self.arch.bins, probs: pr }),
                });
            }
        }
        if self.arch.heads.rates {
            g.rates = o.rates;
        }
        Ok(g)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        OptimState { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr, beta1, beta2, eps }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::shape("optimizer state does not match parameters"));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half cosine from `lr` down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn at(self, lr: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => 0.5 * lr * (1.0 + (std::f64::consts::PI * (step - 1) as f64 / steps as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub time_embed: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `t ~ Unif[t_eps, 1 - t_eps]`.
    pub t_eps: f64,
    pub log_every: usize,
    pub velocity_param: VelocityParam,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 256,
            width: 64,
            depth: 2,
            time_embed: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t_eps: 1e-3,
            log_every: 100,
            velocity_param: VelocityParam::Direct,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("steps, batch_size and log_every must be positive".into()));
        }
        if !(self.t_eps > 0.0 && self.t_eps < 0.5) {
            return Err(Error::Config(format!("t_eps = {} outside (0, 0.5)", self.t_eps)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Trained network plus the path whose prior it starts from.
#[derive(Debug, Clone)]
pub struct TrainedField {
    pub net: FieldNet,
    pub path: CondPath,
}

impl Field for TrainedField {
    fn signature(&self) -> Signature {
        self.path.signature()
    }

    fn sample_prior(&self, rng: &mut ChaCha8Rng) -> State {
        self.path.sample_prior(rng)
    }

    fn genout(&self, t: f64, x: &State, _materialize: bool) -> Result<GenOut> {
        self.net.genout(t, x)
    }

    fn preferred_schedule(&self) -> JumpSchedule {
        let geometric = self.path.slots().any(|s| matches!(s.kind, PathKind::GeometricAverage { .. }));
        if self.net.arch.heads.jump && geometric {
            JumpSchedule::CondotSurvival
        } else {
            JumpSchedule::LinearHazard
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: FieldNet,
    /// `(step, mean batch loss over the preceding window)`.
    pub loss_curve: Vec<(usize, f64)>,
    pub optim: OptimState,
}

/// Minimizes the conditional generator matching loss with Adam.
///
/// `loss` applies to the velocity head; jump and rate heads always use
/// [`Bregman::RateKl`] on their rate measures.
pub fn train_model(
    cfg: &TrainConfig,
    path: &CondPath,
    data: &Dataset,
    spec: &GeneratorSpec,
    loss: &Bregman,
    bins: JumpBins,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut arch = Arch::for_path(path, spec, cfg.width, cfg.depth, cfg.time_embed, bins)?;
    arch.velocity_param = cfg.velocity_param;
    if arch.heads.velocity && loss.is_rate() {
        return Err(Error::contract("the velocity head needs an MSE-family loss"));
    }
    let mut net = FieldNet::init(arch, rng)?;
    let mut opt = OptimState::new(net.n_params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut curve = Vec::new();
    let mut window = 0.0;
    for step in 1..=cfg.steps {
        let batch = cgm_loss(&net, path, data, spec, loss, cfg.batch_size, cfg.t_eps, rng)?;
        if !batch.loss.is_finite() || batch.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss: batch.loss, last_good: Box::new(net) });
        }
        let before = net.clone();
        opt.lr = cfg.lr_schedule.at(cfg.lr, step, cfg.steps);
        opt.update(net.params_mut(), &batch.grad)?;
        if net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step, loss: batch.loss, last_good: Box::new(before) });
        }
        window += batch.loss;
        if step % cfg.log_every == 0 {
            curve.push((step, window / cfg.log_every as f64));
            window = 0.0;
        }
    }
    Ok(TrainOutcome { net, loss_curve: curve, optim: opt })
}

/// `||u_theta - u||_2 / ||u||_2` over a `(t, x)` grid of 1D states.
pub fn velocity_field_error(net: &FieldNet, exact: &MarginalModel, ts: &[f64], xs: &[f64]) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for &t in ts {
        for &x in xs {
            let s = State::euclid(vec![x]);
            let u = exact.genout(t, &s)?.velocity[0];
            let v = net.forward(&s, t)?.0.velocity[0];
            num += (v - u) * (v - u);
            den += u * u;
        }
    }
    Ok((num / den).sqrt())
}

/// Checkpoint file: metadata header plus flat parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub net: FieldNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
}
