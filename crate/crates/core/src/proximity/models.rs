//! Monotone-decay curve families mapping mean relative depth to distance.
//!
//! Every family is separable: `y = p0 * phi0(x; theta) + p1 * phi1(x; theta)`,
//! with two linear coefficients and one or two nonlinear shape parameters.
//! Rate parameters that must stay positive are optimized in log space.

use std::fmt;

use crate::error::{Error, Result};

/// `y = a * exp(-b x) + c * exp(-d x)` with `b, d > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleExpModel {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl DoubleExpModel {
    /// Coefficients reported for the physical sensor (x = mean relative depth, y in cm).
    pub const REFERENCE: DoubleExpModel = DoubleExpModel {
        a: 85.9058,
        b: 0.3754,
        c: 1.5110e6,
        d: 4.0941,
    };

    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        if !(a.is_finite() && c.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "amplitudes must be finite, got a={a}, c={c}"
            )));
        }
        if !(b > 0.0 && d > 0.0 && b.is_finite() && d.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "decay rates must be positive, got b={b}, d={d}"
            )));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn a(&self) -> f64 {
        self.a
    }
    pub fn b(&self) -> f64 {
        self.b
    }
    pub fn c(&self) -> f64 {
        self.c
    }
    pub fn d(&self) -> f64 {
        self.d
    }

    #[inline]
    pub fn predict(&self, z_img: f64) -> f64 {
        self.a * (-self.b * z_img).exp() + self.c * (-self.d * z_img).exp()
    }

    /// d(prediction)/d(z_img).
    #[inline]
    pub fn slope(&self, z_img: f64) -> f64 {
        -self.a * self.b * (-self.b * z_img).exp() - self.c * self.d * (-self.d * z_img).exp()
    }
}

impl fmt::Display for DoubleExpModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:e},{:e},{:e},{:e}", self.a, self.b, self.c, self.d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    DoubleExponential,
    SingleExponential,
    InverseProportional,
    PowerLaw,
}

impl Family {
    pub const ALTERNATIVES: [Family; 3] = [
        Family::SingleExponential,
        Family::InverseProportional,
        Family::PowerLaw,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::DoubleExponential => "double_exponential",
            Family::SingleExponential => "single_exponential",
            Family::InverseProportional => "inverse_proportional",
            Family::PowerLaw => "power_law",
        }
    }

    pub(crate) fn shape_count(&self) -> usize {
        match self {
            Family::DoubleExponential => 2,
            _ => 1,
        }
    }

    pub fn param_count(&self) -> usize {
        2 + self.shape_count()
    }

    /// Fewest distinct abscissae accepted for a fit.
    pub fn min_distinct(&self) -> usize {
        match self {
            Family::DoubleExponential => 8,
            _ => self.param_count(),
        }
    }

    /// Basis values and their derivatives with respect to the shape parameters:
    /// returns `(phi, dphi)` with `dphi[j][k] = d phi_j / d theta_k`.
    #[inline]
    pub(crate) fn basis(&self, x: f64, theta: &[f64]) -> ([f64; 2], [[f64; 2]; 2]) {
        match self {
            Family::DoubleExponential => {
                let (b, d) = (theta[0].exp(), theta[1].exp());
                let (e0, e1) = ((-b * x).exp(), (-d * x).exp());
                ([e0, e1], [[-b * x * e0, 0.0], [0.0, -d * x * e1]])
            }
            Family::SingleExponential => {
                let b = theta[0].exp();
                let e0 = (-b * x).exp();
                ([e0, 1.0], [[-b * x * e0, 0.0], [0.0, 0.0]])
            }
            Family::InverseProportional => {
                let s = x + theta[0];
                ([1.0 / s, 1.0], [[-1.0 / (s * s), 0.0], [0.0, 0.0]])
            }
            Family::PowerLaw => {
                let b = theta[0].exp();
                let p = x.powf(-b);
                ([p, 1.0], [[-b * x.ln() * p, 0.0], [0.0, 0.0]])
            }
        }
    }

    /// Initial shape parameters for the multi-start search.
    pub(crate) fn starts(&self) -> Vec<Vec<f64>> {
        let grid = log_grid(0.05, 8.0, 8);
        match self {
            Family::DoubleExponential => {
                let mut out = Vec::new();
                for i in 0..grid.len() {
                    for j in i + 1..grid.len() {
                        out.push(vec![grid[i].ln(), grid[j].ln()]);
                    }
                }
                out
            }
            Family::SingleExponential => grid.iter().map(|b| vec![b.ln()]).collect(),
            Family::InverseProportional => [0.0, 0.5, 1.0, 2.0, 5.0, 10.0]
                .iter()
                .map(|&b| vec![b])
                .collect(),
            Family::PowerLaw => [0.1, 0.3, 1.0, 3.0, 10.0]
                .iter()
                .map(|b: &f64| vec![b.ln()])
                .collect(),
        }
    }

    pub(crate) fn check_domain(&self, xs: &[f64]) -> Result<()> {
        if *self == Family::PowerLaw && xs.iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidInput(
                "power law requires strictly positive z_img".into(),
            ));
        }
        Ok(())
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (l0, l1) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (l0 + (l1 - l0) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// A fitted member of any [`Family`], in natural parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecayModel {
    DoubleExponential(DoubleExpModel),
    /// `a * exp(-b x) + c`
    SingleExponential {
        a: f64,
        b: f64,
        c: f64,
    },
    /// `a / (x + b) + c`
    InverseProportional {
        a: f64,
        b: f64,
        c: f64,
    },
    /// `a * x^(-b) + c`
    PowerLaw {
        a: f64,
        b: f64,
        c: f64,
    },
}

impl DecayModel {
    pub fn family(&self) -> Family {
        match self {
            DecayModel::DoubleExponential(_) => Family::DoubleExponential,
            DecayModel::SingleExponential { .. } => Family::SingleExponential,
            DecayModel::InverseProportional { .. } => Family::InverseProportional,
            DecayModel::PowerLaw { .. } => Family::PowerLaw,
        }
    }

    pub fn predict(&self, x: f64) -> f64 {
        match *self {
            DecayModel::DoubleExponential(m) => m.predict(x),
            DecayModel::SingleExponential { a, b, c } => a * (-b * x).exp() + c,
            DecayModel::InverseProportional { a, b, c } => a / (x + b) + c,
            DecayModel::PowerLaw { a, b, c } => a * x.powf(-b) + c,
        }
    }

    /// Parameters in the order `(a, b, c[, d])`.
    pub fn params(&self) -> Vec<f64> {
        match *self {
            DecayModel::DoubleExponential(m) => vec![m.a, m.b, m.c, m.d],
            DecayModel::SingleExponential { a, b, c }
            | DecayModel::InverseProportional { a, b, c }
            | DecayModel::PowerLaw { a, b, c } => vec![a, b, c],
        }
    }

    /// Builds the model from the optimizer vector `[p0, p1, theta...]`.
    pub(crate) fn from_internal(family: Family, p: &[f64]) -> DecayModel {
        match family {
            Family::DoubleExponential => DecayModel::DoubleExponential(DoubleExpModel {
                a: p[0],
                b: p[2].exp(),
                c: p[1],
                d: p[3].exp(),
            }),
            Family::SingleExponential => DecayModel::SingleExponential {
                a: p[0],
                b: p[2].exp(),
                c: p[1],
            },
            Family::InverseProportional => DecayModel::InverseProportional {
                a: p[0],
                b: p[2],
                c: p[1],
            },
            Family::PowerLaw => DecayModel::PowerLaw {
                a: p[0],
                b: p[2].exp(),
                c: p[1],
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_rates() {
        assert!(DoubleExpModel::new(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(DoubleExpModel::new(1.0, 1.0, 1.0, -2.0).is_err());
        assert!(DoubleExpModel::new(f64::NAN, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn prediction_at_origin_sums_amplitudes() {
        let m = DoubleExpModel::new(2.0, 1.0, 0.0, 1.0).unwrap();
        assert_eq!(m.predict(0.0), 2.0);
    }

    #[test]
    fn reference_model_at_ten() {
        // Direct evaluation: 85.9058 e^{-3.754} + 1.511e6 e^{-40.941}.
        let expected = 85.9058 * (-3.754f64).exp() + 1.5110e6 * (-40.941f64).exp();
        let got = DoubleExpModel::REFERENCE.predict(10.0);
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 2.012).abs() < 5e-4, "{got}");
    }

    #[test]
    fn basis_derivatives_match_finite_differences() {
        let cases: [(Family, Vec<f64>); 4] = [
            (Family::DoubleExponential, vec![0.3f64.ln(), 2.0f64.ln()]),
            (Family::SingleExponential, vec![0.7f64.ln()]),
            (Family::InverseProportional, vec![1.3]),
            (Family::PowerLaw, vec![1.1f64.ln()]),
        ];
        for (fam, theta) in cases {
            for &x in &[0.5, 2.0, 7.5] {
                let (_, d) = fam.basis(x, &theta);
                for k in 0..theta.len() {
                    let h = 1e-6;
                    let mut tp = theta.clone();
                    tp[k] += h;
                    let mut tm = theta.clone();
                    tm[k] -= h;
                    let (pp, _) = fam.basis(x, &tp);
                    let (pm, _) = fam.basis(x, &tm);
                    for j in 0..2 {
                        let fd = (pp[j] - pm[j]) / (2.0 * h);
                        assert!(
                            (fd - d[j][k]).abs() < 1e-6 * (1.0 + fd.abs()),
                            "{fam:?} x={x}"
                        );
                    }
                }
            }
        }
    }
}
