//! Interval enclosure of all trajectories of the uncertain linear system.
//!
//! Two predictors are provided. The simple one only needs entrywise bounds
//! `A_lower <= A(theta) <= A_upper` and applies matrix interval arithmetic
//! to the coupled pair of bound dynamics. The enhanced one exploits the
//! vertex polytope around `A_N` and is much less conservative, but needs
//! `A_N` (possibly after a similarity transform) to be Metzler.

use nalgebra::{DMatrix, DVector};

use crate::estimation::{ConfidencePolytope, OmegaBounds};
use crate::{Error, Result};

/// Off-diagonal tolerance accepted when validating a Metzler matrix
/// produced by a numerical eigendecomposition.
const METZLER_TOL: f64 = 1e-6;
const CONDITION_LIMIT: f64 = 1e8;

pub(crate) fn pos_part_mat(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

pub(crate) fn neg_part_mat(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| (-v).max(0.0))
}

fn pos_part_vec(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

fn neg_part_vec(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| (-x).max(0.0))
}

/// Per-coordinate enclosure `lower <= x(t) <= upper` at a given time.
#[derive(Debug, Clone)]
pub struct StateInterval {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub time: f64,
}

impl StateInterval {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>, time: f64) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dimension("interval bounds must have equal length"));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::config("interval lower bound exceeds upper bound"));
        }
        Ok(StateInterval { lower, upper, time })
    }

    /// Zero-width interval at a known state.
    pub fn degenerate(x: &DVector<f64>, time: f64) -> Self {
        StateInterval {
            lower: x.clone(),
            upper: x.clone(),
            time,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn width(&self) -> DVector<f64> {
        &self.upper - &self.lower
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lower[i] - tol && v <= self.upper[i] + tol)
    }
}

/// Entrywise bounds `lower <= A <= upper`.
#[derive(Debug, Clone)]
pub struct IntervalMatrix {
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
}

impl IntervalMatrix {
    pub fn new(lower: DMatrix<f64>, upper: DMatrix<f64>) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::dimension("interval matrix bounds must have equal shape"));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::config("interval matrix lower bound exceeds upper"));
        }
        Ok(IntervalMatrix { lower, upper })
    }

    pub fn point(m: DMatrix<f64>) -> Self {
        IntervalMatrix {
            lower: m.clone(),
            upper: m,
        }
    }

    /// Entrywise hull `A_N + [min_k dA_k, max_k dA_k]` of a vertex polytope.
    pub fn from_polytope(poly: &ConfidencePolytope) -> Self {
        let mut lo = poly.a_center.clone();
        let mut hi = poly.a_center.clone();
        for da in &poly.deltas {
            for i in 0..lo.nrows() {
                for j in 0..lo.ncols() {
                    let v = poly.a_center[(i, j)] + da[(i, j)];
                    lo[(i, j)] = lo[(i, j)].min(v);
                    hi[(i, j)] = hi[(i, j)].max(v);
                }
            }
        }
        IntervalMatrix { lower: lo, upper: hi }
    }
}

/// True iff every off-diagonal entry is `>= -tol`.
pub fn is_metzler(a: &DMatrix<f64>, tol: f64) -> bool {
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if i != j && a[(i, j)] < -tol {
                return false;
            }
        }
    }
    true
}

/// Find an invertible `Z` such that `Z^-1 A Z` is Metzler, through a real
/// eigendecomposition. Returns `(Z, Z^-1)`, or `None` when the spectrum is
/// complex, the eigenbasis is ill-conditioned, or the matrix is defective.
pub fn metzler_transform(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let p = a.nrows();
    if is_metzler(a, 0.0) {
        let id = DMatrix::identity(p, p);
        return Some((id.clone(), id));
    }
    let scale = a.abs().max().max(1.0);
    let eigs = a.clone().complex_eigenvalues();
    if eigs.iter().any(|l| l.im.abs() > 1e-9 * scale) {
        return None;
    }
    let mut reals: Vec<f64> = eigs.iter().map(|l| l.re).collect();
    reals.sort_by(|x, y| x.partial_cmp(y).unwrap());

    // Cluster nearly equal eigenvalues and take an orthonormal nullspace
    // basis of (A - lambda I) per cluster.
    let mut z = DMatrix::zeros(p, p);
    let mut col = 0usize;
    let cluster_tol = 1e-7 * scale;
    let mut i = 0usize;
    while i < reals.len() {
        let mut j = i + 1;
        while j < reals.len() && reals[j] - reals[j - 1] <= cluster_tol {
            j += 1;
        }
        let mult = j - i;
        let lambda = reals[i..j].iter().sum::<f64>() / mult as f64;
        let shifted = a - DMatrix::identity(p, p) * lambda;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.as_ref()?;
        // Rows of V^T sorted by decreasing singular value; the nullspace
        // vectors are the last `mult` rows.
        for k in 0..mult {
            let row = v_t.row(p - 1 - k);
            if svd.singular_values[p - 1 - k] > 1e-6 * scale {
                return None; // defective: nullspace smaller than multiplicity
            }
            for r in 0..p {
                z[(r, col)] = row[r];
            }
            col += 1;
        }
        i = j;
    }

    let svd_z = z.clone().svd(false, false);
    let smin = svd_z.singular_values.min();
    let smax = svd_z.singular_values.max();
    if smin <= 0.0 || smax / smin > CONDITION_LIMIT {
        return None;
    }
    let z_inv = z.clone().try_inverse()?;
    let transformed = &z_inv * a * &z;
    if !is_metzler(&transformed, METZLER_TOL * scale) {
        return None;
    }
    Some((z, z_inv))
}

/// Image of a state interval under a constant matrix:
/// `M+ x_lower - M- x_upper <= M x <= M+ x_upper - M- x_lower`.
pub fn interval_linear_map(m: &DMatrix<f64>, x: &StateInterval) -> Result<StateInterval> {
    if m.ncols() != x.dim() {
        return Err(Error::dimension("matrix columns must match interval dimension"));
    }
    let mp = pos_part_mat(m);
    let mn = neg_part_mat(m);
    StateInterval::new(
        &mp * &x.lower - &mn * &x.upper,
        &mp * &x.upper - &mn * &x.lower,
        x.time,
    )
}

/// Image of a state interval under an interval matrix.
pub fn interval_matrix_map(m: &IntervalMatrix, x: &StateInterval) -> Result<StateInterval> {
    if m.lower.ncols() != x.dim() {
        return Err(Error::dimension("matrix columns must match interval dimension"));
    }
    let alp = pos_part_mat(&m.lower);
    let aln = neg_part_mat(&m.lower);
    let aup = pos_part_mat(&m.upper);
    let aun = neg_part_mat(&m.upper);
    let xlp = pos_part_vec(&x.lower);
    let xln = neg_part_vec(&x.lower);
    let xup = pos_part_vec(&x.upper);
    let xun = neg_part_vec(&x.upper);
    let lo = &alp * &xlp - &aup * &xln - &aln * &xup + &aun * &xun;
    let hi = &aup * &xup - &alp * &xun - &aun * &xlp + &aln * &xln;
    StateInterval::new(lo, hi, x.time)
}

/// Polytopic uncertain dynamics prepared for the enhanced predictor.
///
/// All matrices live in the stepping frame: when a similarity transform is
/// present the constructor maps the system through it so that the stepped
/// `A_N` is Metzler, and `step_enhanced` converts state intervals in and
/// out of that frame.
#[derive(Debug, Clone)]
pub struct PolytopicDynamics {
    pub a_center: DMatrix<f64>,
    pub delta_plus: DMatrix<f64>,
    pub delta_minus: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub transform: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl PolytopicDynamics {
    /// Build from a confidence polytope; `transform` is `(Z, Z^-1)` from
    /// [`metzler_transform`] or `None` when `A_N` is already Metzler.
    pub fn new(
        poly: &ConfidencePolytope,
        b: &DMatrix<f64>,
        d: &DMatrix<f64>,
        transform: Option<(DMatrix<f64>, DMatrix<f64>)>,
    ) -> Result<Self> {
        let (a_center, vertex_deltas, b, d) = match &transform {
            None => (
                poly.a_center.clone(),
                poly.deltas.clone(),
                b.clone(),
                d.clone(),
            ),
            Some((z, z_inv)) => (
                z_inv * &poly.a_center * z,
                poly.deltas.iter().map(|da| z_inv * da * z).collect(),
                z_inv * b,
                z_inv * d,
            ),
        };
        let scale = a_center.abs().max().max(1.0);
        if !is_metzler(&a_center, METZLER_TOL * scale) {
            return Err(Error::config(
                "enhanced predictor requires a Metzler center matrix (use a transform or the simple predictor)",
            ));
        }
        // Clamp the tiny negative off-diagonals a numerical transform leaves.
        let p = a_center.nrows();
        let mut a_center = a_center;
        for i in 0..p {
            for j in 0..p {
                if i != j && a_center[(i, j)] < 0.0 {
                    a_center[(i, j)] = 0.0;
                }
            }
        }
        let mut delta_plus = DMatrix::zeros(p, p);
        let mut delta_minus = DMatrix::zeros(p, p);
        for da in &vertex_deltas {
            delta_plus += pos_part_mat(da);
            delta_minus += neg_part_mat(da);
        }
        Ok(PolytopicDynamics {
            a_center,
            delta_plus,
            delta_minus,
            b,
            d,
            transform,
        })
    }

    /// Point dynamics with no parametric uncertainty (zero-width polytope).
    pub fn point(a: DMatrix<f64>, b: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let p = a.nrows();
        let poly = ConfidencePolytope {
            a_center: a,
            deltas: vec![DMatrix::zeros(p, p)],
            theta_center: DVector::zeros(0),
            theta_deltas: vec![DVector::zeros(0)],
        };
        PolytopicDynamics::new(&poly, &b, &d, None)
    }
}

/// Bounds-only uncertain dynamics for the simple predictor.
#[derive(Debug, Clone)]
pub struct SimpleDynamics {
    pub a_bounds: IntervalMatrix,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

/// Predictor selection and integration parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorMode {
    Simple,
    Enhanced,
    Auto,
}

#[derive(Debug, Clone)]
pub struct PredictorConfig {
    pub mode: PredictorMode,
    pub dt: f64,
    pub substeps: usize,
}

impl PredictorConfig {
    pub fn new(mode: PredictorMode, dt: f64, substeps: usize) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::config("dt must be positive"));
        }
        if substeps == 0 {
            return Err(Error::config("substeps must be at least 1"));
        }
        Ok(PredictorConfig { mode, dt, substeps })
    }
}

fn disturbance_terms(
    d: &DMatrix<f64>,
    om_lo: &DVector<f64>,
    om_hi: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let dp = pos_part_mat(d);
    let dn = neg_part_mat(d);
    (&dp * om_lo - &dn * om_hi, &dp * om_hi - &dn * om_lo)
}

fn simple_derivatives(
    dynamics: &SimpleDynamics,
    x: &StateInterval,
    u: &DVector<f64>,
    om_lo: &DVector<f64>,
    om_hi: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let body = interval_matrix_map(&dynamics.a_bounds, x).expect("dimensions checked");
    let bu = &dynamics.b * u;
    let (w_lo, w_hi) = disturbance_terms(&dynamics.d, om_lo, om_hi);
    (body.lower + &bu + w_lo, body.upper + bu + w_hi)
}

fn enhanced_derivatives(
    dynamics: &PolytopicDynamics,
    x: &StateInterval,
    u: &DVector<f64>,
    om_lo: &DVector<f64>,
    om_hi: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let xln = neg_part_vec(&x.lower);
    let xup = pos_part_vec(&x.upper);
    let bu = &dynamics.b * u;
    let (w_lo, w_hi) = disturbance_terms(&dynamics.d, om_lo, om_hi);
    let lo = &dynamics.a_center * &x.lower - &dynamics.delta_plus * &xln
        - &dynamics.delta_minus * &xup
        + &bu
        + w_lo;
    let hi = &dynamics.a_center * &x.upper + &dynamics.delta_plus * &xup
        + &dynamics.delta_minus * &xln
        + bu
        + w_hi;
    (lo, hi)
}

fn euler_step<F>(
    x: &StateInterval,
    cfg: &PredictorConfig,
    extra: Option<&(DVector<f64>, DVector<f64>)>,
    mut derivs: F,
) -> Result<StateInterval>
where
    F: FnMut(&StateInterval, f64) -> (DVector<f64>, DVector<f64>),
{
    let h = cfg.dt / cfg.substeps as f64;
    let mut cur = x.clone();
    for s in 0..cfg.substeps {
        let t = x.time + s as f64 * h;
        let (mut dlo, mut dhi) = derivs(&cur, t);
        if let Some((e_lo, e_hi)) = extra {
            dlo += e_lo;
            dhi += e_hi;
        }
        cur.lower += dlo * h;
        cur.upper += dhi * h;
        cur.time = x.time + (s + 1) as f64 * h;
    }
    cur.time = x.time + cfg.dt;
    let tol = 1e-9 * (1.0 + cur.lower.abs().max().max(cur.upper.abs().max()));
    if cur.lower.iter().zip(cur.upper.iter()).any(|(l, u)| *l > *u + tol) {
        return Err(Error::Internal(
            "interval ordering violated after step; dt is too large for this system".into(),
        ));
    }
    Ok(cur)
}

/// One sensing step of the simple predictor.
pub fn step_simple(
    x: &StateInterval,
    dynamics: &SimpleDynamics,
    u: &DVector<f64>,
    omega: &OmegaBounds,
    cfg: &PredictorConfig,
) -> Result<StateInterval> {
    step_simple_with_extra(x, dynamics, u, omega, cfg, None)
}

pub(crate) fn step_simple_with_extra(
    x: &StateInterval,
    dynamics: &SimpleDynamics,
    u: &DVector<f64>,
    omega: &OmegaBounds,
    cfg: &PredictorConfig,
    extra: Option<&(DVector<f64>, DVector<f64>)>,
) -> Result<StateInterval> {
    if dynamics.a_bounds.lower.ncols() != x.dim() {
        return Err(Error::dimension("dynamics do not match interval dimension"));
    }
    euler_step(x, cfg, extra, |cur, t| {
        let (om_lo, om_hi) = omega.at(t);
        simple_derivatives(dynamics, cur, u, &om_lo, &om_hi)
    })
}

/// One sensing step of the enhanced predictor. When a transform is present
/// the interval is mapped into the Metzler frame, stepped, and mapped back.
pub fn step_enhanced(
    x: &StateInterval,
    dynamics: &PolytopicDynamics,
    u: &DVector<f64>,
    omega: &OmegaBounds,
    cfg: &PredictorConfig,
) -> Result<StateInterval> {
    step_enhanced_with_extra(x, dynamics, u, omega, cfg, None)
}

pub(crate) fn step_enhanced_with_extra(
    x: &StateInterval,
    dynamics: &PolytopicDynamics,
    u: &DVector<f64>,
    omega: &OmegaBounds,
    cfg: &PredictorConfig,
    extra: Option<&(DVector<f64>, DVector<f64>)>,
) -> Result<StateInterval> {
    match &dynamics.transform {
        None => euler_step(x, cfg, extra, |cur, t| {
            let (om_lo, om_hi) = omega.at(t);
            enhanced_derivatives(dynamics, cur, u, &om_lo, &om_hi)
        }),
        Some((z, z_inv)) => {
            let mapped = interval_linear_map(z_inv, x)?;
            let extra_mapped = match extra {
                None => None,
                Some((e_lo, e_hi)) => {
                    let e = interval_linear_map(
                        z_inv,
                        &StateInterval::new(e_lo.clone(), e_hi.clone(), x.time)?,
                    )?;
                    Some((e.lower, e.upper))
                }
            };
            let stepped = euler_step(&mapped, cfg, extra_mapped.as_ref(), |cur, t| {
                let (om_lo, om_hi) = omega.at(t);
                enhanced_derivatives(dynamics, cur, u, &om_lo, &om_hi)
            })?;
            interval_linear_map(z, &stepped)
        }
    }
}

/// Dynamics variant fed to [`predict_trajectory`].
#[derive(Debug, Clone)]
pub enum PredictorDynamics {
    Simple(SimpleDynamics),
    Enhanced(PolytopicDynamics),
}

impl PredictorDynamics {
    fn control_input_matrix(&self) -> &DMatrix<f64> {
        match self {
            PredictorDynamics::Simple(d) => &d.b,
            PredictorDynamics::Enhanced(d) => &d.b,
        }
    }
}

/// Propagate the interval over a sequence of affine controllers
/// `u = -K_a x + u_a`, starting from the degenerate interval at `x0`.
///
/// During prediction the feedback term is evaluated at the interval center;
/// the worst-case mismatch `|B K_a| * width / 2` is absorbed into an extra
/// additive disturbance so the enclosure is preserved. For constant
/// controls (`K_a = 0`) the correction is exactly zero.
pub fn predict_trajectory(
    x0: &DVector<f64>,
    controls: &[(DMatrix<f64>, DVector<f64>)],
    dynamics: &PredictorDynamics,
    omega: &OmegaBounds,
    cfg: &PredictorConfig,
) -> Result<Vec<StateInterval>> {
    if controls.is_empty() {
        return Err(Error::config("horizon must be at least 1"));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("initial state must be finite"));
    }
    let mut cur = StateInterval::degenerate(x0, 0.0);
    let mut out = Vec::with_capacity(controls.len());
    for (gain, offset) in controls {
        let center = cur.center();
        let u = offset - gain * &center;
        let extra = if gain.iter().any(|v| *v != 0.0) {
            let half_width = cur.width() * 0.5;
            let bk = (dynamics.control_input_matrix() * gain).abs();
            let e = bk * half_width;
            Some((-e.clone(), e))
        } else {
            None
        };
        cur = match dynamics {
            PredictorDynamics::Simple(d) => {
                step_simple_with_extra(&cur, d, &u, omega, cfg, extra.as_ref())?
            }
            PredictorDynamics::Enhanced(d) => {
                step_enhanced_with_extra(&cur, d, &u, omega, cfg, extra.as_ref())?
            }
        };
        out.push(cur.clone());
    }
    Ok(out)
}
