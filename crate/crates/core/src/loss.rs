//! Bregman divergences `D(a, b) = phi(a) - phi(b) - <a - b, grad phi(b)>`
//! and the conditional generator matching loss.
//!
//! Every variant has a separable `phi`, so the prediction gradient is
//! `grad_b D = phi''(b) (b - a)`, which is affine in the target `a`.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{cond_genout, GenOut, GeneratorSpec, JumpBins, JumpKernel};
use crate::paths::{CondPath, Dataset};
use crate::train::{FieldNet, HeadGrads, Outputs};

/// `|alpha x|` is clamped to this before exponentiation.
pub const EXP_ARG_LIMIT: f64 = 30.0;

static SATURATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of clamped exponent arguments since process start.
pub fn saturation_count() -> u64 {
    SATURATIONS.load(Ordering::Relaxed)
}

fn clamp_arg(v: f64) -> f64 {
    if v.abs() > EXP_ARG_LIMIT {
        SATURATIONS.fetch_add(1, Ordering::Relaxed);
        v.clamp(-EXP_ARG_LIMIT, EXP_ARG_LIMIT)
    } else {
        v
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Bregman {
    /// `phi(x) = |x|^2`.
    #[default]
    Mse,
    /// `phi(x) = sum x log x - x` on rate measures.
    RateKl,
    /// `mix * sum cosh(alpha x) + (1 - mix) |x|^2`.
    MseCosh { alpha: f64, mix: f64 },
    /// `mix * sum exp(alpha x) + (1 - mix) |x|^2`.
    MseExp { alpha: f64, mix: f64 },
    /// Sum of divergences over consecutive blocks of the given lengths.
    ProductSum(Vec<(Bregman, usize)>),
}

impl Bregman {
    pub fn mse_cosh(alpha: f64) -> Self {
        Bregman::MseCosh { alpha, mix: 0.5 }
    }

    pub fn mse_exp(alpha: f64) -> Self {
        Bregman::MseExp { alpha, mix: 0.5 }
    }

    pub fn is_rate(&self) -> bool {
        matches!(self, Bregman::RateKl)
    }

    fn check(&self, a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != b.len() {
            return Err(Error::shape(format!("target has {} entries, prediction {}", a.len(), b.len())));
        }
        match self {
            Bregman::RateKl => {
                if let Some(v) = b.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::domain(format!("rate prediction must be positive, got {v}")));
                }
                if let Some(v) = a.iter().find(|v| !(**v >= 0.0)) {
                    return Err(Error::domain(format!("rate target must be nonnegative, got {v}")));
                }
            }
            Bregman::MseCosh { mix, .. } | Bregman::MseExp { mix, .. } if !(0.0..=1.0).contains(mix) => {
                return Err(Error::domain(format!("mix weight {mix} outside [0, 1]")));
            }
            Bregman::ProductSum(parts) => {
                let n: usize = parts.iter().map(|p| p.1).sum();
                if n != a.len() {
                    return Err(Error::shape(format!("blocks cover {n} entries, vectors have {}", a.len())));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// `D(a, b)`.
    pub fn value(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check(a, b)?;
        Ok(match self {
            Bregman::Mse => sq(a, b),
            Bregman::RateKl => a
                .iter()
                .zip(b)
                .map(|(a, b)| if *a == 0.0 { *b } else { a * (a / b).ln() - a + b })
                .sum(),
            Bregman::MseCosh { alpha, mix } => {
                let c: f64 = a.iter().zip(b).map(|(a, b)| cosh_div(*alpha, *a, *b)).sum();
                mix * c + (1.0 - mix) * sq(a, b)
            }
            Bregman::MseExp { alpha, mix } => {
                let c: f64 = a.iter().zip(b).map(|(a, b)| exp_div(*alpha, *a, *b)).sum();
                mix * c + (1.0 - mix) * sq(a, b)
            }
            Bregman::ProductSum(parts) => {
                let mut off = 0;
                let mut s = 0.0;
                for (d, n) in parts {
                    s += d.value(&a[off..off + n], &b[off..off + n])?;
                    off += n;
                }
                s
            }
        })
    }

    /// `grad_b D(a, b)`.
    pub fn grad_pred(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        self.check(a, b)?;
        Ok(match self {
            Bregman::Mse => a.iter().zip(b).map(|(a, b)| 2.0 * (b - a)).collect(),
            Bregman::RateKl => a.iter().zip(b).map(|(a, b)| 1.0 - a / b).collect(),
            Bregman::MseCosh { alpha, mix } => a
                .iter()
                .zip(b)
                .map(|(a, b)| (mix * alpha * alpha * clamp_arg(alpha * b).cosh() + 2.0 * (1.0 - mix)) * (b - a))
                .collect(),
            Bregman::MseExp { alpha, mix } => a
                .iter()
                .zip(b)
                .map(|(a, b)| (mix * alpha * alpha * clamp_arg(alpha * b).exp() + 2.0 * (1.0 - mix)) * (b - a))
                .collect(),
            Bregman::ProductSum(parts) => {
                let mut out = Vec::with_capacity(a.len());
                let mut off = 0;
                for (d, n) in parts {
                    out.extend(d.grad_pred(&a[off..off + n], &b[off..off + n])?);
                    off += n;
                }
                out
            }
        })
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `e^{alpha a} - e^{alpha b} - alpha (a - b) e^{alpha b}`, written as
/// `e^{alpha b} (expm1(d) - d)` to avoid cancellation.
fn exp_div(alpha: f64, a: f64, b: f64) -> f64 {
    let (ca, cb) = (clamp_arg(alpha * a), clamp_arg(alpha * b));
    let d = ca - cb;
    let core = cb.exp() * (d.exp_m1() - d);
    if ca != alpha * a || cb != alpha * b {
        // the linear term keeps the true slope alpha (a - b)
        core + cb.exp() * (d - alpha * (a - b))
    } else {
        core
    }
}

fn cosh_div(alpha: f64, a: f64, b: f64) -> f64 {
    let (ca, cb) = (clamp_arg(alpha * a), clamp_arg(alpha * b));
    let d = ca - cb;
    let core = 0.5 * (cb.exp() * (d.exp_m1() - d) + (-cb).exp() * ((-d).exp_m1() + d));
    if ca != alpha * a || cb != alpha * b {
        core + cb.sinh() * (d - alpha * (a - b))
    } else {
        core
    }
}

impl FromStr for Bregman {
    type Err = Error;

    /// `mse`, `rate_kl`, `mse_cosh:<alpha>[:<mix>]`, `mse_exp:<alpha>[:<mix>]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown loss {s:?}"));
        let mut it = s.trim().split(':');
        let name = it.next().ok_or_else(bad)?;
        let nums: Vec<f64> = it.map(|v| v.parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
        let (alpha, mix) = match nums.as_slice() {
            [] => (1.0, 0.5),
            [a] => (*a, 0.5),
            [a, m] => (*a, *m),
            _ => return Err(bad()),
        };
        match (name, nums.is_empty()) {
            ("mse", true) => Ok(Bregman::Mse),
            ("rate_kl", true) => Ok(Bregman::RateKl),
            ("mse_cosh", _) => Ok(Bregman::MseCosh { alpha, mix }),
            ("mse_exp", _) => Ok(Bregman::MseExp { alpha, mix }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Bregman {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bregman::Mse => f.write_str("mse"),
            Bregman::RateKl => f.write_str("rate_kl"),
            Bregman::MseCosh { alpha, mix } => write!(f, "mse_cosh:{alpha}:{mix}"),
            Bregman::MseExp { alpha, mix } => write!(f, "mse_exp:{alpha}:{mix}"),
            Bregman::ProductSum(parts) => {
                f.write_str("sum(")?;
                for (i, (d, n)) in parts.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{d}x{n}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl TryFrom<String> for Bregman {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Bregman> for String {
    fn from(b: Bregman) -> String {
        b.to_string()
    }
}

/// Mean loss and mean parameter gradient of one batch.
#[derive(Debug, Clone)]
pub struct CgmBatch {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Rate measure `lambda J` of a conditional jump on the network's bins;
/// atoms are moved to the nearest bin centre.
fn binned_measure(g: &GenOut, i: usize, bins: &JumpBins) -> Result<Vec<f64>> {
    let mut a = vec![0.0; bins.count];
    let Some(j) = g.jumps[i].as_ref() else {
        return Ok(a);
    };
    if j.intensity == 0.0 {
        return Ok(a);
    }
    match j.kernel.as_ref() {
        Some(JumpKernel::Binned { bins: b, probs }) if b == bins => {
            for (a, p) in a.iter_mut().zip(probs) {
                *a = j.intensity * p;
            }
        }
        Some(JumpKernel::Atomic { atoms, probs }) => {
            for (x, p) in atoms.iter().zip(probs) {
                a[bins.nearest(*x)] += j.intensity * p;
            }
        }
        _ => return Err(Error::contract("target jump kernel lives on different bins than the network")),
    }
    Ok(a)
}

/// Loss of one `(target, prediction)` pair and the upstream head gradients.
pub fn cgm_sample_loss(
    net: &FieldNet,
    d: &Bregman,
    target: &GenOut,
    out: &Outputs,
    tokens: &[usize],
) -> Result<(f64, HeadGrads)> {
    let arch = net.arch();
    let mut loss = 0.0;
    let mut up = HeadGrads::default();
    if arch.heads.velocity {
        loss += d.value(&target.velocity, &out.velocity)?;
        up.velocity = d.grad_pred(&target.velocity, &out.velocity)?;
    }
    if arch.heads.jump {
        for i in 0..arch.euclid {
            let a = binned_measure(target, i, &arch.bins)?;
            let (lam, pr) = (out.intensity[i], &out.bin_probs[i]);
            let b: Vec<f64> = pr.iter().map(|p| lam * p).collect();
            loss += Bregman::RateKl.value(&a, &b)?;
            let g = Bregman::RateKl.grad_pred(&a, &b)?;
            up.intensity.push(g.iter().zip(pr).map(|(g, p)| g * p).sum());
            up.bin_probs.push(g.iter().map(|g| g * lam).collect());
        }
    }
    if arch.heads.rates {
        for (k, tok) in tokens.iter().enumerate() {
            let off = |row: &[f64]| -> Vec<f64> {
                row.iter().enumerate().filter(|(y, _)| y != tok).map(|(_, q)| *q).collect()
            };
            let (a, b) = (off(&target.rates[k]), off(&out.rates[k]));
            let mut g_full = vec![0.0; arch.vocab[k]];
            if !a.is_empty() {
                loss += Bregman::RateKl.value(&a, &b)?;
                let g = Bregman::RateKl.grad_pred(&a, &b)?;
                let mut it = g.into_iter();
                for (y, slot) in g_full.iter_mut().enumerate() {
                    if y != *tok {
                        *slot = it.next().unwrap_or(0.0);
                    }
                }
            }
            up.rates.push(g_full);
        }
    }
    Ok((loss, up))
}

/// Monte Carlo estimate of `E_{t, z, x} D(F_t^z(x), F_t^theta(x))` with
/// `t ~ Unif[t_eps, 1 - t_eps]`, `z ~ data`, `x ~ p_t(. | z)`.
#[allow(clippy::too_many_arguments)]
pub fn cgm_loss(
    net: &FieldNet,
    path: &CondPath,
    data: &Dataset,
    spec: &GeneratorSpec,
    d: &Bregman,
    batch_size: usize,
    t_eps: f64,
    rng: &mut impl Rng,
) -> Result<CgmBatch> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let bins = net.arch().bins;
    let mut grad = vec![0.0; net.n_params()];
    let mut total = 0.0;
    for _ in 0..batch_size {
        let t = t_eps + (1.0 - 2.0 * t_eps) * rng.random::<f64>();
        let z = &data.points()[data.sample_index(rng)];
        let x = path.sample_cond(z, t, rng)?;
        let target = cond_genout(path, spec, &bins, z, t, &x, true)?;
        let (out, tape) = net.forward(&x, t)?;
        let (l, up) = cgm_sample_loss(net, d, &target, &out, &x.tokens)?;
        total += l;
        net.backward(&tape, &up, &mut grad)?;
    }
    let n = batch_size as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(CgmBatch { loss: total / n, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all() -> Vec<Bregman> {
        vec![Bregman::Mse, Bregman::RateKl, Bregman::mse_cosh(1.0), Bregman::mse_exp(1.0)]
    }

    #[test]
    fn examples() {
        assert_eq!(Bregman::Mse.value(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        let v = Bregman::RateKl.value(&[1.0], &[2.0]).unwrap();
        assert!((v - (1.0 - 2f64.ln())).abs() < 1e-15);
        assert!((v - 0.3069).abs() < 1e-4);
        assert_eq!(Bregman::Mse.grad_pred(&[1.0], &[3.0]).unwrap(), vec![4.0]);
        for d in all() {
            assert_eq!(d.value(&[0.3, 1.2], &[0.3, 1.2]).unwrap(), 0.0);
            assert_eq!(d.grad_pred(&[0.3, 1.2], &[0.3, 1.2]).unwrap(), vec![0.0, 0.0]);
        }
        assert!(matches!(Bregman::RateKl.value(&[1.0], &[0.0]), Err(Error::Domain(_))));
        assert_eq!(Bregman::RateKl.value(&[0.0], &[0.5]).unwrap(), 0.5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = [0.7, 1.9, 0.2];
        let b = [1.1, 0.4, 0.9];
        for d in all() {
            let g = d.grad_pred(&a, &b).unwrap();
            for i in 0..3 {
                let (mut p, mut m) = (b, b);
                p[i] += 1e-5;
                m[i] -= 1e-5;
                let fd = (d.value(&a, &p).unwrap() - d.value(&a, &m).unwrap()) / 2e-5;
                assert!((fd - g[i]).abs() < 1e-6, "{d} coord {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn product_sum_splits_blocks() {
        let d = Bregman::ProductSum(vec![(Bregman::Mse, 1), (Bregman::RateKl, 1)]);
        let v = d.value(&[1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert!((v - (1.0 + 1.0 - 2f64.ln())).abs() < 1e-15);
        assert_eq!(d.grad_pred(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), vec![-2.0, 0.5]);
        assert!(d.value(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn exponent_clamp_counts() {
        let before = saturation_count();
        let d = Bregman::mse_exp(1.0);
        let v = d.value(&[40.0], &[40.0]).unwrap();
        assert_eq!(v, 0.0);
        assert!(saturation_count() > before);
    }

    #[test]
    fn parse_round_trip() {
        for s in ["mse", "rate_kl", "mse_cosh:1", "mse_exp:2:0.25"] {
            let d: Bregman = s.parse().unwrap();
            assert_eq!(d.to_string().parse::<Bregman>().unwrap(), d);
        }
        assert_eq!("mse_cosh:1".parse::<Bregman>().unwrap(), Bregman::mse_cosh(1.0));
        assert!("huber".parse::<Bregman>().is_err());
        assert!("mse:3".parse::<Bregman>().is_err());
    }

    proptest! {
        #[test]
        fn nonnegative_and_target_affine(
            a1 in prop::collection::vec(0.0f64..5.0, 3),
            a2 in prop::collection::vec(0.0f64..5.0, 3),
            b in prop::collection::vec(0.01f64..5.0, 3),
            lam in 0.0f64..1.0,
        ) {
            for d in all() {
                prop_assert!(d.value(&a1, &b).unwrap() >= 0.0);
                let mix: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| lam * x + (1.0 - lam) * y).collect();
                let g = d.grad_pred(&mix, &b).unwrap();
                let g1 = d.grad_pred(&a1, &b).unwrap();
                let g2 = d.grad_pred(&a2, &b).unwrap();
                for i in 0..3 {
                    let aff = lam * g1[i] + (1.0 - lam) * g2[i];
                    prop_assert!((g[i] - aff).abs() <= 1e-10 * (1.0 + g[i].abs()));
                }
            }
        }
    }
}
