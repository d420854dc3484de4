//! Damped Gauss-Newton (Levenberg-Marquardt) with Marquardt diagonal scaling.

use nalgebra::{DMatrix, DVector};

pub trait LeastSquares {
    fn residual_count(&self) -> usize;
    fn param_count(&self) -> usize;
    /// Residuals `r_i = y_i - f(x_i; p)`. Non-finite values reject a step.
    fn residuals(&self, params: &[f64], out: &mut [f64]);
    /// Jacobian of the residuals, `residual_count x param_count`.
    fn jacobian(&self, params: &[f64], out: &mut DMatrix<f64>);
}

#[derive(Debug, Clone, Copy)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Relative reduction of the sum of squares below which an accepted step ends the search.
    pub ftol: f64,
    /// Relative step size below which the search ends.
    pub xtol: f64,
    /// Sum of squares at or below which the fit is exact.
    pub sse_floor: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            ftol: 1e-15,
            xtol: 1e-14,
            sse_floor: 1e-26,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    pub sse: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn sum_squares(r: &[f64]) -> f64 {
    let s: f64 = r.iter().map(|x| x * x).sum();
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

pub fn minimize<P: LeastSquares>(problem: &P, start: &[f64], cfg: &LmConfig) -> LmOutcome {
    let (m, n) = (problem.residual_count(), problem.param_count());
    let mut params = start.to_vec();
    let mut r = vec![0.0; m];
    let mut r_trial = vec![0.0; m];
    let mut jac = DMatrix::zeros(m, n);
    let mut trial = vec![0.0; n];

    problem.residuals(&params, &mut r);
    let mut sse = sum_squares(&r);
    if !sse.is_finite() {
        return LmOutcome {
            params,
            sse,
            iterations: 0,
            converged: false,
        };
    }

    let mut lambda = 1e-3;
    for iter in 1..=cfg.max_iterations {
        if sse <= cfg.sse_floor {
            return LmOutcome {
                params,
                sse,
                iterations: iter - 1,
                converged: true,
            };
        }
        problem.jacobian(&params, &mut jac);
        let jt = jac.transpose();
        let normal = &jt * &jac;
        let grad = &jt * DVector::from_column_slice(&r);

        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = normal.clone();
            for k in 0..n {
                let d = normal[(k, k)].max(1e-300);
                damped[(k, k)] += lambda * d;
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-&grad))) else {
                lambda *= 10.0;
                continue;
            };
            for k in 0..n {
                trial[k] = params[k] + step[k];
            }
            problem.residuals(&trial, &mut r_trial);
            let sse_trial = sum_squares(&r_trial);
            if sse_trial < sse {
                let reduction = sse - sse_trial;
                let step_norm = step.norm();
                let param_norm = trial.iter().map(|x| x * x).sum::<f64>().sqrt();
                params.copy_from_slice(&trial);
                std::mem::swap(&mut r, &mut r_trial);
                sse = sse_trial;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if reduction <= cfg.ftol * sse || step_norm <= cfg.xtol * (param_norm + cfg.xtol) {
                    return LmOutcome {
                        params,
                        sse,
                        iterations: iter,
                        converged: true,
                    };
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction survives at machine precision: a stationary point.
            return LmOutcome {
                params,
                sse,
                iterations: iter,
                converged: true,
            };
        }
    }
    LmOutcome {
        params,
        sse,
        iterations: cfg.max_iterations,
        converged: sse <= cfg.sse_floor,
    }
}
