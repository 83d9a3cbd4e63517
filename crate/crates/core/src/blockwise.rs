//! Blockwise linear model of the multi-task network and its alternating
//! closed-form training.
//!
//! The network is abstracted as `X G F_S Q_u F_u ≈ Y_u` for tasks
//! `u = 1..U`, where `G` (shared block) and `Q_u` (task blocks) are trained
//! and `F_S`, `F_u` are fixed maps. The objective is
//!
//! `F(G, Q) = Σ_u ½‖X G F_S Q_u F_u − Y_u‖² + ρ₁/2 ‖G‖² + ρ₂/2 Σ_u ‖Q_u‖²`.
//!
//! Transposes of the real formulation become conjugate transposes over
//! complex fields. Both block updates reduce to `P Z C + ρ Z = B` with `P`,
//! `C` Hermitian positive semidefinite, which is solved through the two
//! eigendecompositions instead of the `(nr) × (nr)` Kronecker system.

use nalgebra::{ComplexField, DMatrix};
use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Field of a blockwise problem: `f64` or `Complex64`.
pub trait BlockScalar: ComplexField<RealField = f64> + Copy {
    /// Zero-mean Gaussian draw with `E|z|² = scale²`.
    fn gaussian(rng: &mut Rng, scale: f64) -> Self;
}

impl BlockScalar for f64 {
    fn gaussian(rng: &mut Rng, scale: f64) -> Self {
        scale * rng.sample::<f64, _>(StandardNormal)
    }
}

impl BlockScalar for Complex64 {
    fn gaussian(rng: &mut Rng, scale: f64) -> Self {
        let s = scale / 2f64.sqrt();
        Complex64::new(
            s * rng.sample::<f64, _>(StandardNormal),
            s * rng.sample::<f64, _>(StandardNormal),
        )
    }
}

/// Fixed inner maps `F_S`, `F_u` of a generated problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MapPreset {
    /// Gaussian entries scaled to unit spectral norm.
    #[default]
    Random,
    /// Rectangular identities.
    Identity,
}

/// Sizes of a generated problem. `d[u]` and `p[u]` give the task shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemDims {
    pub v: usize,
    pub r: usize,
    pub n: usize,
    pub q: usize,
    pub d: Vec<usize>,
    pub p: Vec<usize>,
    pub rho1: f64,
    pub rho2: f64,
}

impl Default for ProblemDims {
    fn default() -> Self {
        Self {
            v: 20,
            r: 6,
            n: 5,
            q: 4,
            d: vec![3; 3],
            p: vec![2; 3],
            rho1: 0.1,
            rho2: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockwiseProblem<T: BlockScalar> {
    /// `V × r` inputs.
    pub x: DMatrix<T>,
    /// `V × p_u` targets.
    pub y: Vec<DMatrix<T>>,
    /// `n × q` shared map.
    pub f_s: DMatrix<T>,
    /// `d_u × p_u` task maps.
    pub f_u: Vec<DMatrix<T>>,
    pub rho1: f64,
    pub rho2: f64,
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::Shape {
        op,
        left: vec![left.0, left.1],
        right: vec![right.0, right.1],
    }
}

fn norm_sq<T: BlockScalar>(m: &DMatrix<T>) -> f64 {
    m.iter().map(|z| z.modulus_squared()).sum()
}

fn random_matrix<T: BlockScalar>(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<T> {
    DMatrix::from_fn(rows, cols, |_, _| T::gaussian(rng, scale))
}

fn fixed_map<T: BlockScalar>(rng: &mut Rng, rows: usize, cols: usize, preset: MapPreset) -> DMatrix<T> {
    match preset {
        MapPreset::Identity => DMatrix::identity(rows, cols),
        MapPreset::Random => {
            let m = random_matrix::<T>(rng, rows, cols, 1.0);
            let top = m.clone().singular_values().max();
            if top > 0.0 {
                m.unscale(top)
            } else {
                m
            }
        }
    }
}

impl<T: BlockScalar> BlockwiseProblem<T> {
    pub fn new(
        x: DMatrix<T>,
        y: Vec<DMatrix<T>>,
        f_s: DMatrix<T>,
        f_u: Vec<DMatrix<T>>,
        rho1: f64,
        rho2: f64,
    ) -> Result<Self> {
        let p = Self {
            x,
            y,
            f_s,
            f_u,
            rho1,
            rho2,
        };
        p.validate()?;
        Ok(p)
    }

    /// Seeded instance. `X` and `Y_u` have i.i.d. Gaussian entries of
    /// variance `1/V`, so `X^T X` is close to the identity.
    pub fn random(dims: &ProblemDims, preset: MapPreset, seed: u64) -> Result<Self> {
        if dims.d.len() != dims.p.len() {
            return Err(Error::InvalidArgument(format!(
                "{} task widths d_u but {} output widths p_u",
                dims.d.len(),
                dims.p.len()
            )));
        }
        let mut rng = rng_from_seed(seed);
        let scale = 1.0 / (dims.v.max(1) as f64).sqrt();
        let x = random_matrix(&mut rng, dims.v, dims.r, scale);
        let f_s = fixed_map(&mut rng, dims.n, dims.q, preset);
        let f_u = dims
            .d
            .iter()
            .zip(&dims.p)
            .map(|(&d, &p)| fixed_map(&mut rng, d, p, preset))
            .collect();
        let y = dims.p.iter().map(|&p| random_matrix(&mut rng, dims.v, p, scale)).collect();
        Self::new(x, y, f_s, f_u, dims.rho1, dims.rho2)
    }

    pub fn tasks(&self) -> usize {
        self.y.len()
    }

    /// `(r, n)`: shape of `G`.
    pub fn g_shape(&self) -> (usize, usize) {
        (self.x.ncols(), self.f_s.nrows())
    }

    /// `(q, d_u)`: shape of `Q_u`.
    pub fn q_shape(&self, u: usize) -> (usize, usize) {
        (self.f_s.ncols(), self.f_u[u].nrows())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho1 > 0.0 && self.rho1.is_finite() && self.rho2 > 0.0 && self.rho2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "penalties must be positive and finite (rho1={}, rho2={})",
                self.rho1, self.rho2
            )));
        }
        if self.y.is_empty() || self.y.len() != self.f_u.len() {
            return Err(Error::InvalidArgument(format!(
                "{} targets but {} task maps",
                self.y.len(),
                self.f_u.len()
            )));
        }
        let v = self.x.nrows();
        for (y, f) in self.y.iter().zip(&self.f_u) {
            if y.nrows() != v || y.ncols() != f.ncols() {
                return Err(shape_err("blockwise targets", y.shape(), (v, f.ncols())));
            }
        }
        Ok(())
    }

    fn check_iterates(&self, g: &DMatrix<T>, q: &[DMatrix<T>]) -> Result<()> {
        if g.shape() != self.g_shape() {
            return Err(shape_err("blockwise G", g.shape(), self.g_shape()));
        }
        self.check_q(q)
    }

    fn check_q(&self, q: &[DMatrix<T>]) -> Result<()> {
        if q.len() != self.tasks() {
            return Err(Error::Shape {
                op: "blockwise Q",
                left: vec![q.len()],
                right: vec![self.tasks()],
            });
        }
        for (u, qu) in q.iter().enumerate() {
            if qu.shape() != self.q_shape(u) {
                return Err(shape_err("blockwise Q_u", qu.shape(), self.q_shape(u)));
            }
        }
        Ok(())
    }

    /// `A_u = F_S Q_u F_u`, the map applied after the shared block.
    fn task_maps(&self, q: &[DMatrix<T>]) -> Vec<DMatrix<T>> {
        q.iter().zip(&self.f_u).map(|(qu, fu)| &self.f_s * qu * fu).collect()
    }

    /// Seeded Gaussian start, scale 0.1.
    pub fn initial_point(&self, seed: u64) -> (DMatrix<T>, Vec<DMatrix<T>>) {
        let mut rng = rng_from_seed(derive_seed(seed, 0));
        let (r, n) = self.g_shape();
        let g = random_matrix(&mut rng, r, n, 0.1);
        let q = (0..self.tasks())
            .map(|u| {
                let (a, b) = self.q_shape(u);
                random_matrix(&mut rng, a, b, 0.1)
            })
            .collect();
        (g, q)
    }
}

/// `F(G, Q)` including both penalties.
pub fn objective<T: BlockScalar>(prob: &BlockwiseProblem<T>, g: &DMatrix<T>, q: &[DMatrix<T>]) -> Result<f64> {
    prob.check_iterates(g, q)?;
    let xg = &prob.x * g;
    let fit: f64 = prob
        .task_maps(q)
        .iter()
        .zip(&prob.y)
        .map(|(a, y)| 0.5 * norm_sq(&(&xg * a - y)))
        .sum();
    let pen_q: f64 = q.iter().map(norm_sq).sum();
    Ok(fit + 0.5 * prob.rho1 * norm_sq(g) + 0.5 * prob.rho2 * pen_q)
}

/// Gradient of `F` with respect to `G` and each `Q_u`. For complex fields
/// the real and imaginary parts are the partial derivatives along the real
/// and imaginary directions of each entry.
pub fn gradients<T: BlockScalar>(
    prob: &BlockwiseProblem<T>,
    g: &DMatrix<T>,
    q: &[DMatrix<T>],
) -> Result<(DMatrix<T>, Vec<DMatrix<T>>)> {
    prob.check_iterates(g, q)?;
    let xg = &prob.x * g;
    let z = &xg * &prob.f_s;
    let mut grad_g = g * T::from_real(prob.rho1);
    let mut grad_q = Vec::with_capacity(q.len());
    for (u, a) in prob.task_maps(q).iter().enumerate() {
        let resid = &xg * a - &prob.y[u];
        grad_g += prob.x.adjoint() * &resid * a.adjoint();
        grad_q.push(z.adjoint() * &resid * prob.f_u[u].adjoint() + &q[u] * T::from_real(prob.rho2));
    }
    Ok((grad_g, grad_q))
}

/// `sqrt(‖∇_G F‖² + Σ_u ‖∇_{Q_u} F‖²)`.
pub fn joint_grad_norm<T: BlockScalar>(prob: &BlockwiseProblem<T>, g: &DMatrix<T>, q: &[DMatrix<T>]) -> Result<f64> {
    let (gg, gq) = gradients(prob, g, q)?;
    Ok((norm_sq(&gg) + gq.iter().map(norm_sq).sum::<f64>()).sqrt())
}

/// Solves `P Z C + ρ Z = B` for Hermitian positive semidefinite `P`, `C`.
fn solve_sylvester<T: BlockScalar>(p: DMatrix<T>, c: DMatrix<T>, rho: f64, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    let ep = p.symmetric_eigen();
    let ec = c.symmetric_eigen();
    let mut t = ep.eigenvectors.adjoint() * b * &ec.eigenvectors;
    for j in 0..t.ncols() {
        for i in 0..t.nrows() {
            let den = ep.eigenvalues[i] * ec.eigenvalues[j] + rho;
            if !(den > 0.0 && den.is_finite()) {
                return Err(Error::Numerical(format!("Sylvester denominator {den} at ({i}, {j})")));
            }
            t[(i, j)] = t[(i, j)].unscale(den);
        }
    }
    Ok(&ep.eigenvectors * t * ec.eigenvectors.adjoint())
}

/// Coefficients `(P, C, B)` of the normal equation `P G C + ρ₁ G = B`.
fn g_system<T: BlockScalar>(prob: &BlockwiseProblem<T>, q: &[DMatrix<T>]) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>) {
    let xh = prob.x.adjoint();
    let (r, n) = prob.g_shape();
    let mut c = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(r, n);
    for (a, y) in prob.task_maps(q).iter().zip(&prob.y) {
        c += a * a.adjoint();
        b += &xh * y * a.adjoint();
    }
    (&xh * &prob.x, c, b)
}

/// Coefficients of `P Q_u C + ρ₂ Q_u = B` given `G`.
fn q_system<T: BlockScalar>(
    prob: &BlockwiseProblem<T>,
    z: &DMatrix<T>,
    u: usize,
) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>) {
    let zh = z.adjoint();
    let f = &prob.f_u[u];
    (&zh * z, f * f.adjoint(), zh * &prob.y[u] * f.adjoint())
}

fn relative_residual<T: BlockScalar>(
    (p, c, b): (DMatrix<T>, DMatrix<T>, DMatrix<T>),
    rho: f64,
    z: &DMatrix<T>,
) -> f64 {
    let r = &p * z * &c + z * T::from_real(rho) - &b;
    let scale = norm_sq(&b).sqrt();
    norm_sq(&r).sqrt() / if scale > 0.0 { scale } else { 1.0 }
}

/// Minimizer of `F(·, Q)`.
pub fn update_g<T: BlockScalar>(prob: &BlockwiseProblem<T>, q: &[DMatrix<T>]) -> Result<DMatrix<T>> {
    prob.check_q(q)?;
    let (p, c, b) = g_system(prob, q);
    solve_sylvester(p, c, prob.rho1, &b)
}

/// Minimizer of `F(G, ·)`; the tasks decouple and are solved in parallel.
pub fn update_q<T: BlockScalar>(prob: &BlockwiseProblem<T>, g: &DMatrix<T>) -> Result<Vec<DMatrix<T>>> {
    if g.shape() != prob.g_shape() {
        return Err(shape_err("blockwise G", g.shape(), prob.g_shape()));
    }
    let z = &prob.x * g * &prob.f_s;
    (0..prob.tasks())
        .into_par_iter()
        .map(|u| {
            let (p, c, b) = q_system(prob, &z, u);
            solve_sylvester(p, c, prob.rho2, &b)
        })
        .collect()
}

/// Relative residuals of the `G` normal equation (given `Q`) and of each
/// `Q_u` normal equation (given `G`).
pub fn normal_residuals<T: BlockScalar>(
    prob: &BlockwiseProblem<T>,
    g: &DMatrix<T>,
    q: &[DMatrix<T>],
) -> Result<(f64, Vec<f64>)> {
    prob.check_iterates(g, q)?;
    let rg = relative_residual(g_system(prob, q), prob.rho1, g);
    let z = &prob.x * g * &prob.f_s;
    let rq = (0..prob.tasks())
        .map(|u| relative_residual(q_system(prob, &z, u), prob.rho2, &q[u]))
        .collect();
    Ok((rg, rq))
}

/// `(L_G, L_Q)`: Frobenius norms of the Kronecker operators mapping a
/// perturbation of `G` (resp. `Q`) to the change in the data-term gradient.
pub fn lipschitz_estimates<T: BlockScalar>(
    prob: &BlockwiseProblem<T>,
    g: &DMatrix<T>,
    q: &[DMatrix<T>],
) -> Result<(f64, f64)> {
    prob.check_iterates(g, q)?;
    let (p, c, _) = g_system(prob, q);
    let l_g = (norm_sq(&p) * norm_sq(&c)).sqrt();
    let z = &prob.x * g * &prob.f_s;
    let zz = norm_sq(&(z.adjoint() * &z));
    let l_q = prob.f_u.iter().map(|f| norm_sq(&(f * f.adjoint())) * zz).sum::<f64>().sqrt();
    Ok((l_g, l_q))
}

/// Iterates and diagnostics of an alternating run. Entry `i` of each trace
/// describes the iterate after sweep `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct AoState<T: BlockScalar> {
    pub g: DMatrix<T>,
    pub q: Vec<DMatrix<T>>,
    pub iterations: usize,
    pub initial_objective: f64,
    pub objective: Vec<f64>,
    pub grad_norm: Vec<f64>,
    /// `(L_G, L_Q)` per sweep.
    pub lipschitz: Vec<(f64, f64)>,
    /// Stopped on the tolerance rather than `max_iter`.
    pub converged: bool,
}

impl<T: BlockScalar> AoState<T> {
    pub fn final_objective(&self) -> f64 {
        self.objective.last().copied().unwrap_or(self.initial_objective)
    }

    pub fn final_grad_norm(&self) -> f64 {
        self.grad_norm.last().copied().unwrap_or(f64::NAN)
    }
}

/// Alternating minimization from the seeded Gaussian start.
pub fn alternate<T: BlockScalar>(
    prob: &BlockwiseProblem<T>,
    init_seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<AoState<T>> {
    let (g, q) = prob.initial_point(init_seed);
    alternate_from(prob, g, q, max_iter, tol)
}

/// Each sweep solves for every `Q_u` and then for `G`. Stops once a sweep
/// lowers the objective by less than `tol`.
pub fn alternate_from<T: BlockScalar>(
    prob: &BlockwiseProblem<T>,
    mut g: DMatrix<T>,
    mut q: Vec<DMatrix<T>>,
    max_iter: usize,
    tol: f64,
) -> Result<AoState<T>> {
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let initial_objective = objective(prob, &g, &q)?;
    let mut state = AoState {
        g: g.clone(),
        q: q.clone(),
        iterations: 0,
        initial_objective,
        objective: Vec::new(),
        grad_norm: Vec::new(),
        lipschitz: Vec::new(),
        converged: false,
    };
    let mut prev = initial_objective;
    for _ in 0..max_iter {
        q = update_q(prob, &g)?;
        g = update_g(prob, &q)?;
        let obj = objective(prob, &g, &q)?;
        state.iterations += 1;
        state.objective.push(obj);
        state.grad_norm.push(joint_grad_norm(prob, &g, &q)?);
        state.lipschitz.push(lipschitz_estimates(prob, &g, &q)?);
        let done = prev - obj < tol;
        prev = obj;
        if done {
            state.converged = true;
            break;
        }
    }
    state.g = g;
    state.q = q;
    Ok(state)
}
