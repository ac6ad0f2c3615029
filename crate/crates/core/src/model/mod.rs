//! The marginal posterior over rigid transformations.
//!
//! Correspondences are summed out analytically: each observation contributes
//! a log-sum-exp over all reference points of `log pi_ij - |Y_j - T(X_i)|^2 / 2 gamma^2`.
//! Gaussian normalisation constants are dropped, so energies are comparable
//! only for a fixed `(X, Y, gamma)`.

pub mod assignment;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    angle_count, canonicalize_params, param_count, rotation_with_derivatives, PointSet,
    TransformParams,
};
use crate::samplers::{Chain, Potential};

/// Form of the transformation regulariser `R(theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    /// `R(theta) = |t|^2`
    SquaredTranslation,
}

/// Noise scale, correspondence prior and transformation prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub gamma: f64,
    /// `pi_ij = P(C_ij = 1)`, `N x M`, columns summing to one.
    pub corr_prior: DMatrix<f64>,
    pub lambda: f64,
    pub regularizer: Regularizer,
}

impl ModelSpec {
    /// Uniform correspondence prior `pi_ij = 1/N` and a flat transformation prior.
    pub fn uniform(gamma: f64, n_reference: usize, m_observed: usize) -> Self {
        ModelSpec {
            gamma,
            corr_prior: DMatrix::from_element(
                n_reference,
                m_observed,
                1.0 / n_reference.max(1) as f64,
            ),
            lambda: 0.0,
            regularizer: Regularizer::None,
        }
    }

    pub fn with_regularizer(mut self, regularizer: Regularizer, lambda: f64) -> Self {
        self.regularizer = regularizer;
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.corr_prior.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidModel(
                "correspondence prior entries must be finite and non-negative".into(),
            ));
        }
        for (j, col) in self.corr_prior.column_iter().enumerate() {
            let s = col.sum();
            if s == 0.0 {
                return Err(Error::InvalidModel(format!(
                    "correspondence prior column {j} is all zero"
                )));
            }
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel(format!(
                    "correspondence prior column {j} sums to {s}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Precomputed data for repeated evaluation of `E(theta)` and its gradient.
#[derive(Debug, Clone)]
pub struct RegistrationTarget {
    dim: usize,
    n: usize,
    m: usize,
    reference: Vec<f64>,
    observation: Vec<f64>,
    /// `log pi_ij`, column-major `N x M`; `-inf` where `pi_ij = 0`.
    log_prior: Vec<f64>,
    inv_two_gamma2: f64,
    inv_gamma2: f64,
    lambda: f64,
    regularizer: Regularizer,
}

impl RegistrationTarget {
    pub fn new(x: &PointSet, y: &PointSet, spec: &ModelSpec) -> Result<Self> {
        if x.dim() != y.dim() {
            return Err(Error::InvalidArgument(format!(
                "reference is {}D but observation is {}D",
                x.dim(),
                y.dim()
            )));
        }
        let (n, m) = (x.len(), y.len());
        if spec.corr_prior.shape() != (n, m) {
            return Err(Error::InvalidArgument(format!(
                "correspondence prior is {}x{}, expected {}x{}",
                spec.corr_prior.nrows(),
                spec.corr_prior.ncols(),
                n,
                m
            )));
        }
        spec.validate()?;
        let g2 = spec.gamma * spec.gamma;
        let lambda = if spec.regularizer == Regularizer::None {
            0.0
        } else {
            spec.lambda
        };
        Ok(RegistrationTarget {
            dim: x.dim(),
            n,
            m,
            reference: x.points.as_slice().to_vec(),
            observation: y.points.as_slice().to_vec(),
            log_prior: spec.corr_prior.iter().map(|p| p.ln()).collect(),
            inv_two_gamma2: 0.5 / g2,
            inv_gamma2: 1.0 / g2,
            lambda,
            regularizer: spec.regularizer,
        })
    }

    pub fn point_dim(&self) -> usize {
        self.dim
    }

    fn check_theta(&self, theta: &TransformParams) -> Result<()> {
        theta.validate()?;
        if theta.dim != self.dim {
            return Err(Error::InvalidArgument(format!(
                "{}D transform for {}D point sets",
                theta.dim, self.dim
            )));
        }
        Ok(())
    }

    pub fn log_likelihood(&self, theta: &TransformParams) -> Result<f64> {
        self.check_theta(theta)?;
        Ok(self.eval(&theta.to_vector(), None).0)
    }

    pub fn log_prior(&self, theta: &TransformParams) -> f64 {
        -self.prior_penalty(&theta.translation)
    }

    pub fn potential_energy(&self, theta: &TransformParams) -> Result<f64> {
        self.check_theta(theta)?;
        Ok(self.energy(&theta.to_vector()))
    }

    pub fn grad_potential_energy(&self, theta: &TransformParams) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let mut g = vec![0.0; param_count(self.dim)];
        self.energy_and_gradient(&theta.to_vector(), &mut g);
        Ok(g)
    }

    fn prior_penalty(&self, translation: &[f64]) -> f64 {
        match self.regularizer {
            Regularizer::None => 0.0,
            Regularizer::SquaredTranslation => {
                self.lambda * translation.iter().map(|t| t * t).sum::<f64>()
            }
        }
    }

    /// Returns `(log_likelihood, energy)`; fills `grad` with `dE/dtheta` when given.
    fn eval(&self, theta: &[f64], grad: Option<&mut [f64]>) -> (f64, f64) {
        let d = self.dim;
        let na = angle_count(d);
        let angles = &theta[..na];
        let t = &theta[na..];
        let want_grad = grad.is_some();
        let (r, dr) = rotation_with_derivatives(d, angles, want_grad);
        let r = r.as_slice();

        // transformed reference points and their angle derivatives, column-major d x N
        let mut tx = vec![0.0; d * self.n];
        let mut dtx = vec![0.0; if want_grad { na * d * self.n } else { 0 }];
        for i in 0..self.n {
            let xi = &self.reference[i * d..(i + 1) * d];
            for k in 0..d {
                let mut acc = t[k];
                for l in 0..d {
                    acc += r[l * d + k] * xi[l];
                }
                tx[i * d + k] = acc;
            }
            if want_grad {
                for (a, dra) in dr.iter().enumerate() {
                    let dra = dra.as_slice();
                    for k in 0..d {
                        let mut acc = 0.0;
                        for l in 0..d {
                            acc += dra[l * d + k] * xi[l];
                        }
                        dtx[(a * self.n + i) * d + k] = acc;
                    }
                }
            }
        }

        let mut logits = vec![0.0; self.n];
        let mut loglik = 0.0;
        let mut g = vec![0.0; na + d];
        let mut acc_r = [0.0; 3];
        let mut acc_a = [0.0; 3];
        for j in 0..self.m {
            let yj = &self.observation[j * d..(j + 1) * d];
            let lp = &self.log_prior[j * self.n..(j + 1) * self.n];
            let mut max = f64::NEG_INFINITY;
            for i in 0..self.n {
                let txi = &tx[i * d..(i + 1) * d];
                let mut sq = 0.0;
                for k in 0..d {
                    let rk = yj[k] - txi[k];
                    sq += rk * rk;
                }
                let l = lp[i] - sq * self.inv_two_gamma2;
                logits[i] = l;
                if l > max {
                    max = l;
                }
            }
            if max == f64::NEG_INFINITY {
                loglik = f64::NEG_INFINITY;
                continue;
            }
            let mut s = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                s += *l;
            }
            loglik += max + s.ln();
            if want_grad {
                acc_r[..d].iter_mut().for_each(|v| *v = 0.0);
                acc_a[..na].iter_mut().for_each(|v| *v = 0.0);
                for i in 0..self.n {
                    let w = logits[i] / s;
                    if w == 0.0 {
                        continue;
                    }
                    let txi = &tx[i * d..(i + 1) * d];
                    for k in 0..d {
                        let rk = w * (yj[k] - txi[k]);
                        acc_r[k] += rk;
                        for a in 0..na {
                            acc_a[a] += rk * dtx[(a * self.n + i) * d + k];
                        }
                    }
                }
                for a in 0..na {
                    g[a] -= acc_a[a] * self.inv_gamma2;
                }
                for k in 0..d {
                    g[na + k] -= acc_r[k] * self.inv_gamma2;
                }
            }
        }

        let energy = -loglik + self.prior_penalty(t);
        if let Some(out) = grad {
            if self.regularizer == Regularizer::SquaredTranslation {
                for k in 0..d {
                    g[na + k] += 2.0 * self.lambda * t[k];
                }
            }
            out.copy_from_slice(&g);
        }
        (loglik, energy)
    }

    /// Squared distance between observation `j` and transformed reference `i`,
    /// for all pairs, row-major `M x N`.
    fn pair_costs(&self, theta: &TransformParams) -> Vec<f64> {
        let d = self.dim;
        let (r, _) = rotation_with_derivatives(d, &theta.angles, false);
        let r = r.as_slice();
        let mut out = vec![0.0; self.m * self.n];
        for i in 0..self.n {
            let xi = &self.reference[i * d..(i + 1) * d];
            let txi: Vec<f64> = (0..d)
                .map(|k| theta.translation[k] + (0..d).map(|l| r[l * d + k] * xi[l]).sum::<f64>())
                .collect();
            for j in 0..self.m {
                let yj = &self.observation[j * d..(j + 1) * d];
                out[j * self.n + i] = (0..d).map(|k| (yj[k] - txi[k]).powi(2)).sum();
            }
        }
        out
    }
}

impl Potential for RegistrationTarget {
    fn dim(&self) -> usize {
        param_count(self.dim)
    }

    fn energy(&self, theta: &[f64]) -> f64 {
        self.eval(theta, None).1
    }

    fn energy_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(theta, Some(grad)).1
    }
}

/// `sum_j LSE_i(log pi_ij - |Y_j - T(X_i; theta)|^2 / 2 gamma^2)`.
pub fn log_likelihood(
    theta: &TransformParams,
    x: &PointSet,
    y: &PointSet,
    spec: &ModelSpec,
) -> Result<f64> {
    RegistrationTarget::new(x, y, spec)?.log_likelihood(theta)
}

/// `-lambda R(theta)`, unnormalised.
pub fn log_prior(theta: &TransformParams, spec: &ModelSpec) -> f64 {
    match spec.regularizer {
        Regularizer::None => 0.0,
        Regularizer::SquaredTranslation => {
            -spec.lambda * theta.translation.iter().map(|t| t * t).sum::<f64>()
        }
    }
}

/// `E(theta) = -log L(Y | X, theta) - log pi_0(theta)`.
pub fn potential_energy(
    theta: &TransformParams,
    x: &PointSet,
    y: &PointSet,
    spec: &ModelSpec,
) -> Result<f64> {
    RegistrationTarget::new(x, y, spec)?.potential_energy(theta)
}

/// Analytic gradient of [`potential_energy`], ordered angles then translation.
pub fn grad_potential_energy(
    theta: &TransformParams,
    x: &PointSet,
    y: &PointSet,
    spec: &ModelSpec,
) -> Result<Vec<f64>> {
    RegistrationTarget::new(x, y, spec)?.grad_potential_energy(theta)
}

/// Binary `N x M` correspondence, stored as the reference index of every observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrespondenceMatrix {
    pub n_reference: usize,
    pub assignment: Vec<usize>,
}

impl CorrespondenceMatrix {
    pub fn new(n_reference: usize, assignment: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = assignment.iter().find(|&&i| i >= n_reference) {
            return Err(Error::InvalidArgument(format!(
                "reference index {bad} out of range for {n_reference} points"
            )));
        }
        Ok(CorrespondenceMatrix {
            n_reference,
            assignment,
        })
    }

    pub fn m_observed(&self) -> usize {
        self.assignment.len()
    }

    pub fn entries(&self) -> DMatrix<u8> {
        let mut c = DMatrix::zeros(self.n_reference, self.assignment.len());
        for (j, &i) in self.assignment.iter().enumerate() {
            c[(i, j)] = 1;
        }
        c
    }

    pub fn row_sums(&self) -> Vec<usize> {
        let mut rows = vec![0; self.n_reference];
        for &i in &self.assignment {
            rows[i] += 1;
        }
        rows
    }

    pub fn is_injective(&self) -> bool {
        self.row_sums().iter().all(|&r| r <= 1)
    }
}

/// How to recover correspondences from a point estimate of the transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceMode {
    /// Each observation goes to its nearest transformed reference point.
    Closest,
    /// Injective minimum total squared distance matching.
    Assignment,
}

pub fn estimate_correspondence(
    theta: &TransformParams,
    x: &PointSet,
    y: &PointSet,
    mode: CorrespondenceMode,
) -> Result<CorrespondenceMatrix> {
    let spec = ModelSpec::uniform(1.0, x.len(), y.len());
    let target = RegistrationTarget::new(x, y, &spec)?;
    target.check_theta(theta)?;
    let (n, m) = (x.len(), y.len());
    let costs = target.pair_costs(theta);
    let assignment = match mode {
        CorrespondenceMode::Closest => costs
            .chunks_exact(n)
            .map(|row| {
                let mut best = 0;
                for i in 1..n {
                    if row[i] < row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect(),
        CorrespondenceMode::Assignment => {
            if m > n {
                return Err(Error::InfeasibleAssignment {
                    observations: m,
                    references: n,
                });
            }
            assignment::min_cost_assignment(&costs, m, n)
        }
    };
    CorrespondenceMatrix::new(n, assignment)
}

/// Deterministic descent from `start`: Barzilai-Borwein steps with an Armijo
/// safeguard, stopping at `|grad| < 1e-8` or after 500 steps.
pub(crate) fn polish<P: Potential>(target: &P, start: &[f64]) -> (Vec<f64>, f64) {
    const MAX_STEPS: usize = 500;
    const GRAD_TOL: f64 = 1e-8;
    let dim = start.len();
    let mut x = start.to_vec();
    let mut g = vec![0.0; dim];
    let mut e = target.energy_and_gradient(&x, &mut g);
    if !e.is_finite() {
        return (x, e);
    }
    let mut step = 1e-4;
    let mut x_new = vec![0.0; dim];
    let mut g_new = vec![0.0; dim];
    for _ in 0..MAX_STEPS {
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        if gnorm2.sqrt() < GRAD_TOL {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            for k in 0..dim {
                x_new[k] = x[k] - step * g[k];
            }
            let e_new = target.energy_and_gradient(&x_new, &mut g_new);
            if e_new.is_finite() && e_new <= e - 1e-4 * step * gnorm2 {
                accepted = true;
                // Barzilai-Borwein step for the next iteration
                let mut sy = 0.0;
                let mut ss = 0.0;
                for k in 0..dim {
                    let s = x_new[k] - x[k];
                    sy += s * (g_new[k] - g[k]);
                    ss += s * s;
                }
                step = if sy > 0.0 { ss / sy } else { step * 2.0 };
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                e = e_new;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (x, e)
}

/// Minimum-energy sample over all chains, optionally refined by [`polish`].
/// The polished point is kept only if it does not raise the energy.
pub fn map_estimate<P: Potential>(
    target: &P,
    point_dim: usize,
    chains: &[Chain],
    polish_map: bool,
) -> Result<(TransformParams, f64)> {
    let best = chains
        .iter()
        .flat_map(|c| c.samples.iter().zip(c.energies.iter()))
        .filter(|(_, e)| !e.is_nan())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::InvalidArgument("chain has no samples".into()))?;
    let (mut theta, mut energy) = (best.0.to_vector(), *best.1);
    if polish_map {
        let (x, e) = polish(target, &theta);
        if e <= energy {
            theta = x;
            energy = e;
        }
    }
    let params = TransformParams::from_vector(point_dim, &theta)?;
    Ok((canonicalize_params(&params), energy))
}

/// The maximum a posteriori sample of a chain (see [`map_estimate`]).
pub fn map_from_chain(
    chain: &Chain,
    x: &PointSet,
    y: &PointSet,
    spec: &ModelSpec,
    polish_map: bool,
) -> Result<TransformParams> {
    if chain.samples.is_empty() {
        return Err(Error::InvalidArgument("chain has no samples".into()));
    }
    let target = RegistrationTarget::new(x, y, spec)?;
    map_estimate(&target, x.dim(), std::slice::from_ref(chain), polish_map).map(|(p, _)| p)
}

/// Circular mean for angles, arithmetic mean for translations.
pub fn mean_params(samples: &[TransformParams]) -> Result<TransformParams> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples to average".into()))?;
    let dim = first.dim;
    if samples.iter().any(|s| s.dim != dim) {
        return Err(Error::InvalidArgument(
            "cannot average transforms of different dimension".into(),
        ));
    }
    let n = samples.len() as f64;
    let angles = (0..first.angles.len())
        .map(|a| {
            let (s, c) = samples.iter().fold((0.0, 0.0), |(s, c), p| {
                let (sa, ca) = p.angles[a].sin_cos();
                (s + sa, c + ca)
            });
            (s / n).atan2(c / n)
        })
        .collect();
    let translation = (0..dim)
        .map(|k| samples.iter().map(|p| p.translation[k]).sum::<f64>() / n)
        .collect();
    let mut mean = TransformParams::new(dim, angles, translation)?;
    // atan2 can return tiny negatives for a true mean of zero
    for a in mean.angles.iter_mut() {
        if a.abs() < 1e-15 {
            *a = 0.0;
        }
    }
    Ok(canonicalize_params(&mean))
}

pub fn posterior_mean_from_chain(chain: &Chain) -> Result<TransformParams> {
    mean_params(&chain.samples)
}

#[cfg(test)]
pub(crate) mod tests;
