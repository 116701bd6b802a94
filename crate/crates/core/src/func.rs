//! Scalar functions with derivatives, used for branches, deformations and observables.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// A real function of one variable with derivatives up to order 3.
pub trait RealFn: Send + Sync {
    /// Value (`order = 0`) or derivative of the given order at `x`.
    fn eval(&self, x: f64, order: usize) -> f64;

    fn value(&self, x: f64) -> f64 {
        self.eval(x, 0)
    }
}

/// Shared handle to a function.
pub type Fun = Arc<dyn RealFn>;

impl<F: Fn(f64) -> f64 + Send + Sync> RealFn for F {
    /// Plain closures only provide values; derivatives are taken by central differences.
    fn eval(&self, x: f64, order: usize) -> f64 {
        match order {
            0 => self(x),
            1 => {
                let h = 1e-6 * (1.0 + x.abs());
                (self(x + h) - self(x - h)) / (2.0 * h)
            }
            2 => {
                let h = 1e-4 * (1.0 + x.abs());
                (self(x + h) - 2.0 * self(x) + self(x - h)) / (h * h)
            }
            _ => {
                let h = 1e-3 * (1.0 + x.abs());
                (self(x + 2.0 * h) - 2.0 * self(x + h) + 2.0 * self(x - h) - self(x - 2.0 * h)) / (2.0 * h * h * h)
            }
        }
    }
}

/// Serializable closed-form expressions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expr {
    Const {
        value: f64,
    },
    /// Coefficients in ascending powers.
    Poly {
        coeffs: Vec<f64>,
    },
    /// `amp * sin(freq * x + phase)`.
    Sin {
        amp: f64,
        freq: f64,
        phase: f64,
    },
    /// Cubic B-spline with peak `height` at `center`, vanishing outside `center ± half_width`.
    Bump {
        center: f64,
        half_width: f64,
        height: f64,
    },
    /// `height * exp(-(x - center)^2 / (2 width^2))`.
    Gauss {
        center: f64,
        width: f64,
        height: f64,
    },
    Sum {
        terms: Vec<Expr>,
    },
    Scale {
        factor: f64,
        inner: Box<Expr>,
    },
    Mul {
        left: Box<Expr>,
        right: Box<Expr>,
    },
}

impl Expr {
    pub fn zero() -> Self {
        Expr::Const { value: 0.0 }
    }

    pub fn poly(coeffs: &[f64]) -> Self {
        Expr::Poly { coeffs: coeffs.to_vec() }
    }

    pub fn into_fun(self) -> Fun {
        Arc::new(self)
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Expr::Const { value } => *value == 0.0,
            Expr::Poly { coeffs } => coeffs.iter().all(|c| *c == 0.0),
            Expr::Sin { amp, .. } => *amp == 0.0,
            Expr::Bump { height, .. } | Expr::Gauss { height, .. } => *height == 0.0,
            Expr::Sum { terms } => terms.iter().all(Expr::is_zero),
            Expr::Scale { factor, inner } => *factor == 0.0 || inner.is_zero(),
            Expr::Mul { left, right } => left.is_zero() || right.is_zero(),
        }
    }
}

pub fn poly_eval(coeffs: &[f64], x: f64, order: usize) -> f64 {
    // Horner on the differentiated coefficients.
    let mut acc = 0.0;
    for (i, &c) in coeffs.iter().enumerate().skip(order).rev() {
        let fall: f64 = (0..order).map(|j| (i - j) as f64).product();
        acc = acc * x + c * fall;
    }
    acc
}

fn bspline(u: f64, order: usize) -> f64 {
    // Cubic B-spline on [-2, 2] scaled to peak 1.
    let s = u.signum();
    let a = u.abs();
    let v = if a >= 2.0 {
        [0.0, 0.0, 0.0, 0.0]
    } else if a >= 1.0 {
        let w = 2.0 - a;
        [w * w * w / 6.0, -0.5 * w * w * s, w, -s]
    } else {
        [2.0 / 3.0 - a * a + 0.5 * a * a * a, (-2.0 * a + 1.5 * a * a) * s, -2.0 + 3.0 * a, 3.0 * s]
    };
    1.5 * v[order.min(3)]
}

impl RealFn for Expr {
    fn eval(&self, x: f64, order: usize) -> f64 {
        match self {
            Expr::Const { value } => {
                if order == 0 {
                    *value
                } else {
                    0.0
                }
            }
            Expr::Poly { coeffs } => poly_eval(coeffs, x, order),
            Expr::Sin { amp, freq, phase } => {
                let arg = freq * x + phase;
                let fk = freq.powi(order as i32);
                amp * fk
                    * match order % 4 {
                        0 => arg.sin(),
                        1 => arg.cos(),
                        2 => -arg.sin(),
                        _ => -arg.cos(),
                    }
            }
            Expr::Bump { center, half_width, height } => {
                let k = 2.0 / half_width;
                height * k.powi(order as i32) * bspline((x - center) * k, order)
            }
            Expr::Gauss { center, width, height } => {
                let z = (x - center) / width;
                let g = height * (-0.5 * z * z).exp();
                // Probabilists' Hermite polynomials give the derivatives.
                let he = match order {
                    0 => 1.0,
                    1 => -z,
                    2 => z * z - 1.0,
                    _ => -(z * z * z - 3.0 * z),
                };
                g * he / width.powi(order as i32)
            }
            Expr::Sum { terms } => terms.iter().map(|t| t.eval(x, order)).sum(),
            Expr::Scale { factor, inner } => factor * inner.eval(x, order),
            Expr::Mul { left, right } => {
                // Leibniz rule up to order 3.
                let binom = [[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [1.0, 2.0, 1.0, 0.0], [1.0, 3.0, 3.0, 1.0]];
                let n = order.min(3);
                (0..=n).map(|k| binom[n][k] * left.eval(x, k) * right.eval(x, n - k)).sum()
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", serde_json::to_string(self).unwrap_or_default())
    }
}

/// `x ↦ f(x) + coef * g(x)`.
pub struct LinComb {
    pub f: Fun,
    pub g: Fun,
    pub coef: f64,
}

impl RealFn for LinComb {
    fn eval(&self, x: f64, order: usize) -> f64 {
        self.f.eval(x, order) + self.coef * self.g.eval(x, order)
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1], 5 points.
const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_08),
    (0.906_179_845_938_664, 0.236_926_885_056_189_08),
];

/// Five-point Gauss–Legendre rule on `[lo, hi]`.
pub fn gauss5(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let m = 0.5 * (lo + hi);
    let r = 0.5 * (hi - lo);
    GL5.iter().map(|&(u, w)| w * f(m + r * u)).sum::<f64>() * r
}

/// Composite Gauss rule over `pieces` equal subintervals.
pub fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, pieces: usize) -> f64 {
    let pieces = pieces.max(1);
    let h = (hi - lo) / pieces as f64;
    (0..pieces).map(|i| gauss5(&f, lo + i as f64 * h, lo + (i + 1) as f64 * h)).sum()
}

/// Neville extrapolation of `vals(h)` to `h = 0`. The error estimate is the change caused
/// by dropping the point with the largest step.
pub fn extrapolate_to_zero(hs: &[f64], vals: &[f64]) -> (f64, f64) {
    fn neville(hs: &[f64], vals: &[f64]) -> f64 {
        let mut p = vals.to_vec();
        let n = p.len();
        for m in 1..n {
            for i in 0..n - m {
                p[i] = (hs[i + m] * p[i] - hs[i] * p[i + 1]) / (hs[i + m] - hs[i]);
            }
        }
        p[0]
    }
    match hs.len() {
        0 => (f64::NAN, f64::INFINITY),
        1 => (vals[0], f64::INFINITY),
        _ => {
            let imax = (0..hs.len()).max_by(|&i, &j| hs[i].abs().total_cmp(&hs[j].abs())).unwrap_or(0);
            let full = neville(hs, vals);
            let (h2, v2): (Vec<f64>, Vec<f64>) =
                hs.iter().zip(vals).enumerate().filter(|(i, _)| *i != imax).map(|(_, (h, v))| (*h, *v)).unzip();
            (full, (full - neville(&h2, &v2)).abs())
        }
    }
}
