//! Gamma-function primitives: log-gamma, the regularized lower incomplete
//! gamma function, and Gamma-distribution CDF / quantile.

use std::f64::consts::PI;
use std::sync::OnceLock;

const MAX_ITER: usize = 10_000;
const EPS: f64 = 1e-16;
/// Shape above which the quadrature form replaces series / continued fraction.
const QUADRATURE_SWITCH: f64 = 100.0;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps accuracy near zero.
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (k, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + k as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`, `a > 0`, `x ≥ 0`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0 && x >= 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    if a >= QUADRATURE_SWITCH {
        return gamma_p_quadrature(a, x);
    }
    if x < a + 1.0 {
        series(a, x)
    } else {
        1.0 - continued_fraction(a, x)
    }
}

fn prefactor(a: f64, x: f64) -> f64 {
    (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * prefactor(a, x)
}

/// Upper tail `Q(a, x)` by modified Lentz.
fn continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    prefactor(a, x) * h
}

/// Stirling remainder `ln Γ(z+1) − (z ln z − z + ½ ln 2πz)` for large `z`.
fn stirling_remainder(z: f64) -> f64 {
    let z2 = z * z;
    1.0 / (12.0 * z) - 1.0 / (360.0 * z * z2) + 1.0 / (1260.0 * z2 * z2 * z)
        - 1.0 / (1680.0 * z2 * z2 * z2 * z)
}

/// Large-shape branch: integrate the density around its mode with
/// Gauss–Legendre, avoiding the cancellation in `a ln x − ln Γ(a)`.
fn gamma_p_quadrature(a: f64, x: f64) -> f64 {
    let a1 = a - 1.0;
    let sd = a1.sqrt();
    let upper_tail = x > a1;
    let far = if upper_tail {
        (a1 + 11.5 * sd).max(x + 6.0 * sd)
    } else {
        (a1 - 7.5 * sd).min(x - 5.0 * sd).max(0.0)
    };
    // Integrand t^{a1} e^{-t} scaled by its mode value a1^{a1} e^{-a1}.
    let integrand = |t: f64| {
        let u = (t - a1) / a1;
        (a1 * ((u).ln_1p() - u)).exp()
    };
    let (nodes, weights) = gauss_legendre();
    let half = 0.5 * (far - x);
    let mid = 0.5 * (far + x);
    let mut sum = 0.0;
    for (n, w) in nodes.iter().zip(weights) {
        sum += w * integrand(mid + half * n);
    }
    // a1^{a1} e^{-a1} / Γ(a) = 1 / (sqrt(2π a1) e^{remainder(a1)})
    let scale = (-0.5 * (2.0 * PI * a1).ln() - stirling_remainder(a1)).exp();
    // Signed integral from x to `far`: the upper tail when far > x, minus the
    // lower tail otherwise.
    let part = sum * half * scale;
    if upper_tail {
        1.0 - part
    } else {
        -part
    }
}

const GL_POINTS: usize = 96;

fn gauss_legendre() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_POINTS;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p1, mut p2) = (1.0, 0.0);
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
                }
                dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / dp;
                if (z - z1).abs() < 1e-15 {
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        (nodes, weights)
    })
}

/// CDF of Gamma(shape `k`, scale `theta`).
pub fn gamma_cdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_p(shape, x / scale)
    }
}

/// Density of Gamma(`a`, 1) at `x > 0`.
fn unit_density(a: f64, x: f64) -> f64 {
    if a >= QUADRATURE_SWITCH {
        let a1 = a - 1.0;
        let u = (x - a1) / a1;
        let scale = (-0.5 * (2.0 * PI * a1).ln() - stirling_remainder(a1)).exp();
        (a1 * (u.ln_1p() - u)).exp() * scale
    } else {
        ((a - 1.0) * x.ln() - x - ln_gamma(a)).exp()
    }
}

/// Rough standard normal quantile (Abramowitz & Stegun 26.2.23), used
/// only as a starting point.
fn normal_quantile_rough(p: f64) -> f64 {
    let q = p.min(1.0 - p);
    let t = (-2.0 * q.ln()).sqrt();
    let z = t - (2.515_517 + 0.802_853 * t + 0.010_328 * t * t)
        / (1.0 + 1.432_788 * t + 0.189_269 * t * t + 0.001_308 * t * t * t);
    if p < 0.5 {
        -z
    } else {
        z
    }
}

/// Quantile of Gamma(shape, rate): Newton steps from the Wilson–Hilferty
/// approximation, falling back to bisection when a step leaves the bracket.
pub fn gamma_quantile(p: f64, shape: f64, rate: f64) -> f64 {
    debug_assert!((0.0..1.0).contains(&p) && shape > 0.0 && rate > 0.0);
    if p <= 0.0 {
        return 0.0;
    }
    // Work on the unit-rate variable, then rescale.
    let a = shape;
    let mut lo = 0.0;
    let mut hi = a + 10.0 * a.sqrt() + 10.0;
    while gamma_p(a, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    let c = 1.0 / (9.0 * a);
    let wh = a * (1.0 - c + normal_quantile_rough(p) * c.sqrt()).powi(3);
    let mut x = if wh > lo && wh < hi { wh } else { 0.5 * (lo + hi) };
    for _ in 0..200 {
        let f = gamma_p(a, x) - p;
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = unit_density(a, x);
        let newton = x - f / d;
        let next = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let done = (next - x).abs() <= 1e-12 * x.max(1e-300) || hi - lo <= 1e-12 * hi.max(1e-300);
        x = next;
        if done {
            break;
        }
    }
    x / rate
}
