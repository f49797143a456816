//! Online structured linear regression with a high-confidence parameter set.
//!
//! The dynamics are parametrised as `A(theta) = A + sum_i theta_i phi_i`
//! with a known feature tensor `phi`. From observed transitions we maintain
//! a regularised least-squares estimate together with an ellipsoidal
//! confidence set, which can be converted to a vertex polytope (coarse
//! axis-aligned box or tighter eigenbasis-aligned box) for use by the
//! interval predictors. A linear-program membership test rejects candidate
//! structures that cannot explain an observed transition.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::{lp, Error, Result};

/// Vertex-enumeration guard: converting the ellipsoid to a polytope
/// produces `2^d` vertices.
pub const DEFAULT_D_MAX: usize = 8;

/// Known structure of the controlled system (Assumption-style prior):
/// nominal `A`, input matrix `B`, disturbance matrix `D`, feature tensor
/// `phi` and a magnitude bound `S` with `theta in [-S, S]^d`.
#[derive(Debug, Clone)]
pub struct StructuredModel {
    pub state_dim: usize,
    pub control_dim: usize,
    pub disturbance_dim: usize,
    pub param_dim: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub phi: Vec<DMatrix<f64>>,
    pub s_bound: f64,
}

impl StructuredModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        phi: Vec<DMatrix<f64>>,
        s_bound: f64,
    ) -> Result<Self> {
        let p = a.nrows();
        if a.ncols() != p {
            return Err(Error::dimension("A must be square"));
        }
        if b.nrows() != p {
            return Err(Error::dimension("B row count must match A"));
        }
        if d.nrows() != p {
            return Err(Error::dimension("D row count must match A"));
        }
        for (i, f) in phi.iter().enumerate() {
            if f.nrows() != p || f.ncols() != p {
                return Err(Error::dimension(format!("phi[{i}] must be {p}x{p}")));
            }
        }
        if !(s_bound > 0.0) {
            return Err(Error::config("parameter bound S must be positive"));
        }
        Ok(StructuredModel {
            state_dim: p,
            control_dim: b.ncols(),
            disturbance_dim: d.ncols(),
            param_dim: phi.len(),
            a,
            b,
            d,
            phi,
            s_bound,
        })
    }

    /// Assemble `A(theta) = A + sum_i theta_i phi_i`.
    pub fn a_of(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.a.clone();
        for (t, f) in theta.iter().zip(self.phi.iter()) {
            m += f * *t;
        }
        m
    }
}

/// Known disturbance bounds `omega_lower(t) <= omega(t) <= omega_upper(t)`.
#[derive(Clone)]
pub enum OmegaBounds {
    Constant(DVector<f64>, DVector<f64>),
    TimeVarying(Arc<dyn Fn(f64) -> (DVector<f64>, DVector<f64>) + Send + Sync>),
}

impl std::fmt::Debug for OmegaBounds {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OmegaBounds::Constant(lo, hi) => {
                write!(f, "OmegaBounds::Constant({lo:?}, {hi:?})")
            }
            OmegaBounds::TimeVarying(_) => write!(f, "OmegaBounds::TimeVarying(..)"),
        }
    }
}

impl OmegaBounds {
    pub fn constant(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dimension("omega bounds must have equal length"));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::config("omega lower bound exceeds upper bound"));
        }
        Ok(OmegaBounds::Constant(lower, upper))
    }

    pub fn zero(dim: usize) -> Self {
        OmegaBounds::Constant(DVector::zeros(dim), DVector::zeros(dim))
    }

    pub fn at(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        match self {
            OmegaBounds::Constant(lo, hi) => (lo.clone(), hi.clone()),
            OmegaBounds::TimeVarying(f) => f(t),
        }
    }
}

/// Sub-Gaussian covariance proxy of the combined noise plus the known
/// disturbance bounds.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub sigma_p: DMatrix<f64>,
    sigma_p_inv: DMatrix<f64>,
    pub omega: OmegaBounds,
}

impl NoiseModel {
    pub fn new(sigma_p: DMatrix<f64>, omega: OmegaBounds) -> Result<Self> {
        let p = sigma_p.nrows();
        if sigma_p.ncols() != p {
            return Err(Error::dimension("sigma_p must be square"));
        }
        let sym_err = (&sigma_p - sigma_p.transpose()).abs().max();
        if sym_err > 1e-9 {
            return Err(Error::config("sigma_p must be symmetric"));
        }
        let chol = Cholesky::new(sigma_p.clone())
            .ok_or_else(|| Error::config("sigma_p must be positive definite"))?;
        let sigma_p_inv = chol.inverse();
        Ok(NoiseModel {
            sigma_p,
            sigma_p_inv,
            omega,
        })
    }

    pub fn sigma_p_inv(&self) -> &DMatrix<f64> {
        &self.sigma_p_inv
    }
}

/// Running Gram matrix and moment vector of the regularised least squares.
#[derive(Debug, Clone)]
pub struct RegressionState {
    g: DMatrix<f64>,
    b: DVector<f64>,
    n: usize,
    lambda: f64,
}

impl RegressionState {
    pub fn new(param_dim: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::config("regulariser lambda must be positive"));
        }
        Ok(RegressionState {
            g: DMatrix::identity(param_dim, param_dim) * lambda,
            b: DVector::zeros(param_dim),
            n: 0,
            lambda,
        })
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn moment(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn sample_count(&self) -> usize {
        self.n
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn param_dim(&self) -> usize {
        self.g.nrows()
    }
}

/// Feature matrix `Phi = [phi_1 x ... phi_d x]` of shape `p x d`.
pub fn compute_features(model: &StructuredModel, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    if x.len() != model.state_dim {
        return Err(Error::dimension(format!(
            "state has length {}, expected {}",
            x.len(),
            model.state_dim
        )));
    }
    let mut features = DMatrix::zeros(model.state_dim, model.param_dim);
    for (j, f) in model.phi.iter().enumerate() {
        features.set_column(j, &(f * x));
    }
    Ok(features)
}

/// Regression target `y = x_dot_meas - A x - B u`, so that `y = Phi theta + eta`.
pub fn observe(
    model: &StructuredModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    x_dot_meas: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.len() != model.state_dim || x_dot_meas.len() != model.state_dim {
        return Err(Error::dimension("state and measurement must have length p"));
    }
    if u.len() != model.control_dim {
        return Err(Error::dimension("control must have length q"));
    }
    Ok(x_dot_meas - &model.a * x - &model.b * u)
}

/// Accumulate one weighted sample into the Gram matrix and moment vector.
pub fn rls_update(
    state: &mut RegressionState,
    features: &DMatrix<f64>,
    y: &DVector<f64>,
    noise: &NoiseModel,
) -> Result<()> {
    let d = state.param_dim();
    if features.ncols() != d {
        return Err(Error::dimension("feature matrix column count must be d"));
    }
    if features.nrows() != y.len() || features.nrows() != noise.sigma_p.nrows() {
        return Err(Error::dimension("feature matrix rows must match y and sigma_p"));
    }
    let weighted = noise.sigma_p_inv() * features;
    state.g += features.transpose() * &weighted;
    state.b += weighted.transpose() * y;
    state.n += 1;
    Ok(())
}

/// Solve `G theta = b` through a Cholesky factorisation.
pub fn rls_solve(state: &RegressionState) -> Result<DVector<f64>> {
    let chol = Cholesky::new(state.g.clone())
        .ok_or_else(|| Error::Internal("Gram matrix lost positive definiteness".into()))?;
    Ok(chol.solve(&state.b))
}

/// Confidence radius `beta_N(delta)` from the self-normalised bound,
/// computed with log-determinants.
pub fn beta(state: &RegressionState, delta: f64, s_bound: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config("delta must lie in (0, 1)"));
    }
    if !(s_bound > 0.0) {
        return Err(Error::config("parameter bound S must be positive"));
    }
    let d = state.param_dim() as f64;
    let chol = Cholesky::new(state.g.clone())
        .ok_or_else(|| Error::Internal("Gram matrix lost positive definiteness".into()))?;
    let log_det_g: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let arg = log_det_g - d * state.lambda.ln() - 2.0 * delta.ln();
    Ok((arg.max(0.0)).sqrt() + (state.lambda * d).sqrt() * s_bound)
}

/// The set `{theta : ||theta - theta_hat||_G <= beta}`.
#[derive(Debug, Clone)]
pub struct ConfidenceEllipsoid {
    pub theta_hat: DVector<f64>,
    pub g: DMatrix<f64>,
    pub beta: f64,
    pub delta: f64,
}

impl ConfidenceEllipsoid {
    pub fn from_state(state: &RegressionState, delta: f64, s_bound: f64) -> Result<Self> {
        Ok(ConfidenceEllipsoid {
            theta_hat: rls_solve(state)?,
            g: state.gram().clone(),
            beta: beta(state, delta, s_bound)?,
            delta,
        })
    }

    /// Membership test `||theta - theta_hat||_G <= beta`.
    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        let diff = theta - &self.theta_hat;
        let quad = (diff.transpose() * &self.g * &diff)[(0, 0)];
        quad.sqrt() <= self.beta + 1e-12
    }
}

/// Vertex representation of the parameter set and its image in `A`-space:
/// `A(theta)` lies in `a_center + conv{deltas}`.
#[derive(Debug, Clone)]
pub struct ConfidencePolytope {
    pub a_center: DMatrix<f64>,
    pub deltas: Vec<DMatrix<f64>>,
    pub theta_center: DVector<f64>,
    pub theta_deltas: Vec<DVector<f64>>,
}

fn sign_patterns(d: usize) -> Vec<DVector<f64>> {
    (0..1usize << d)
        .map(|k| DVector::from_fn(d, |j, _| if (k >> j) & 1 == 1 { 1.0 } else { -1.0 }))
        .collect()
}

fn delta_a_from_offsets(
    model: &StructuredModel,
    offsets: &[DVector<f64>],
) -> Vec<DMatrix<f64>> {
    offsets
        .iter()
        .map(|off| {
            let mut m = DMatrix::zeros(model.state_dim, model.state_dim);
            for (c, f) in off.iter().zip(model.phi.iter()) {
                m += f * *c;
            }
            m
        })
        .collect()
}

fn check_capacity(d: usize, d_max: usize) -> Result<()> {
    if d > d_max {
        return Err(Error::Capacity(format!(
            "parameter dimension {d} exceeds the vertex-enumeration limit {d_max}"
        )));
    }
    Ok(())
}

/// Enclosing axis-aligned box of the ellipsoid: per-coordinate half-width
/// `w_i = beta * sqrt((G^-1)_ii)`, vertices at all sign patterns.
pub fn ellipsoid_to_box(
    e: &ConfidenceEllipsoid,
    model: &StructuredModel,
    d_max: usize,
) -> Result<ConfidencePolytope> {
    let d = e.theta_hat.len();
    check_capacity(d, d_max)?;
    let chol = Cholesky::new(e.g.clone())
        .ok_or_else(|| Error::Internal("confidence Gram matrix is not SPD".into()))?;
    let g_inv = chol.inverse();
    let widths = DVector::from_fn(d, |i, _| e.beta * g_inv[(i, i)].sqrt());
    let theta_deltas: Vec<_> = sign_patterns(d)
        .into_iter()
        .map(|h| h.component_mul(&widths))
        .collect();
    Ok(ConfidencePolytope {
        a_center: model.a_of(&e.theta_hat),
        deltas: delta_a_from_offsets(model, &theta_deltas),
        theta_center: e.theta_hat.clone(),
        theta_deltas,
    })
}

/// Tighter enclosure aligned with the eigenbasis of `G`: with the spectral
/// decomposition `G = Q L Q^T`, vertex offsets are `beta * Q * L^{-1/2} * h`
/// over all sign patterns `h`.
pub fn ellipsoid_to_polytope_tight(
    e: &ConfidenceEllipsoid,
    model: &StructuredModel,
    d_max: usize,
) -> Result<ConfidencePolytope> {
    let d = e.theta_hat.len();
    check_capacity(d, d_max)?;
    let sym = (&e.g + e.g.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::Internal("confidence Gram matrix is not SPD".into()));
    }
    let theta_deltas: Vec<_> = sign_patterns(d)
        .into_iter()
        .map(|h| {
            let scaled = DVector::from_fn(d, |i, _| h[i] / eig.eigenvalues[i].sqrt());
            &eig.eigenvectors * scaled * e.beta
        })
        .collect();
    Ok(ConfidencePolytope {
        a_center: model.a_of(&e.theta_hat),
        deltas: delta_a_from_offsets(model, &theta_deltas),
        theta_center: e.theta_hat.clone(),
        theta_deltas,
    })
}

/// Per-coordinate bounds on the combined output noise `eta = D omega + nu`:
/// the interval image of the disturbance bounds through `D`, widened by a
/// sub-Gaussian tail at level `delta_prime` union-bounded over `p`
/// coordinates and `n_max` steps.
pub fn noise_output_bounds(
    model: &StructuredModel,
    noise: &NoiseModel,
    t: f64,
    n_max: usize,
    delta_prime: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(delta_prime > 0.0 && delta_prime < 1.0) {
        return Err(Error::config("delta_prime must lie in (0, 1)"));
    }
    let (om_lo, om_hi) = noise.omega.at(t);
    if om_lo.len() != model.disturbance_dim {
        return Err(Error::dimension("omega bounds must have length r"));
    }
    let d_pos = model.d.map(|v| v.max(0.0));
    let d_neg = model.d.map(|v| (-v).max(0.0));
    let lo = &d_pos * &om_lo - &d_neg * &om_hi;
    let hi = &d_pos * &om_hi - &d_neg * &om_lo;
    let p = model.state_dim as f64;
    let tail = DVector::from_fn(model.state_dim, |i, _| {
        (2.0 * noise.sigma_p[(i, i)] * (2.0 * p * n_max as f64 / delta_prime).ln()).sqrt()
    });
    Ok((lo - &tail, hi + tail))
}

/// LP membership test of an observed transition against the polytope:
/// is there `alpha` in the simplex and `eta` within bounds with
/// `y = A_N x + B u + sum_i alpha_i (dA_i x) + eta`?
pub fn consistency_test(
    polytope: &ConfidencePolytope,
    model: &StructuredModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
    eta_lower: &DVector<f64>,
    eta_upper: &DVector<f64>,
    tol: f64,
) -> Result<bool> {
    if x.len() != model.state_dim || y.len() != model.state_dim {
        return Err(Error::dimension("x and y must have length p"));
    }
    if u.len() != model.control_dim {
        return Err(Error::dimension("u must have length q"));
    }
    if eta_lower
        .iter()
        .chain(eta_upper.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::config("eta bounds must be finite"));
    }
    let residual = y - &polytope.a_center * x - &model.b * u;
    let vertices: Vec<_> = polytope.deltas.iter().map(|da| da * x).collect();
    lp::minkowski_membership(&vertices, eta_lower, eta_upper, &residual, tol)
}
