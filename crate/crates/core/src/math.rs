//! Small numeric helpers: Gaussian densities, log-sum-exp, Gauss–Legendre rules.

use std::f64::consts::PI;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt())
}

#[inline]
pub fn normal_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - LN_SQRT_2PI
}

/// Normalizes log-weights in place into a probability vector. Entries equal to
/// `-inf` get probability zero. Returns `false` when every entry is `-inf`.
pub fn softmax_in_place(logw: &mut [f64]) -> bool {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return false;
    }
    let mut sum = 0.0;
    for v in logw.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logw.iter_mut() {
        *v /= sum;
    }
    true
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi's initial guess, then Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite Gauss–Legendre nodes/weights on `[lo, hi]` split at `breaks`.
pub fn composite_gauss_legendre(
    lo: f64,
    hi: f64,
    breaks: &[f64],
    panels: usize,
    order: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut cuts: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|b| *b > lo && *b < hi)
        .collect();
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);

    let (gx, gw) = gauss_legendre(order);
    let total = hi - lo;
    let mut xs = Vec::with_capacity(panels * order + cuts.len() * order);
    let mut ws = Vec::with_capacity(xs.capacity());
    for seg in cuts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let n_panels = ((panels as f64 * (b - a) / total).round() as usize).max(1);
        let width = (b - a) / n_panels as f64;
        for p in 0..n_panels {
            let pa = a + p as f64 * width;
            let mid = pa + 0.5 * width;
            for (x, w) in gx.iter().zip(&gw) {
                xs.push(mid + 0.5 * width * x);
                ws.push(0.5 * width * w);
            }
        }
    }
    (xs, ws)
}
