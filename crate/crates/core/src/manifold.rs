//! Constraint manifolds `M = {u : g(u) = 0}` and the orthogonal projection
//! onto their tangent spaces.
//!
//! For a full-row-rank Jacobian `A = Dg(u)` the projection is
//! `v - Aᵀ (A Aᵀ)⁻¹ A v`. The `m x m` Gram matrix `A Aᵀ` is factored with
//! Cholesky; an SVD route is kept as an independent check.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{axpy, dot, norm_inf, Cholesky, Matrix};
use crate::tape::{CustomOp, NodeId, Tape};

/// Relative pivot floor of the Gram factorization; below it the Jacobian is
/// treated as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Smooth constraint map `g: ℝⁿ → ℝᵐ` with `m < n`.
pub trait ConstraintSet: Send + Sync + Debug {
    fn ambient_dim(&self) -> usize;

    fn constraint_count(&self) -> usize;

    fn residual(&self, u: &[f64]) -> Vec<f64>;

    /// `Dg(u)`, an `m x n` matrix.
    fn jacobian(&self, u: &[f64]) -> Matrix;

    /// `d/dε Dg(u + ε w)` at `ε = 0`.
    fn jacobian_derivative(&self, u: &[f64], w: &[f64]) -> Matrix;

    /// `Σᵢ αᵢ ∇²gᵢ(u) w`, which equals `jacobian_derivative(u, w)ᵀ α` because
    /// each Hessian is symmetric.
    fn hessian_contract(&self, u: &[f64], w: &[f64], alpha: &[f64]) -> Vec<f64> {
        self.jacobian_derivative(u, w)
            .matvec_t(alpha)
            .expect("jacobian_derivative has m rows")
    }
}

fn check_len(op: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(shape_err(op, expected, actual));
    }
    Ok(())
}

/// `g(u) = ‖u‖² - r²`.
#[derive(Clone, Debug)]
pub struct Sphere {
    pub dim: usize,
    pub radius: f64,
}

impl Sphere {
    pub fn unit(dim: usize) -> Self {
        Self { dim, radius: 1.0 }
    }
}

impl ConstraintSet for Sphere {
    fn ambient_dim(&self) -> usize {
        self.dim
    }

    fn constraint_count(&self) -> usize {
        1
    }

    fn residual(&self, u: &[f64]) -> Vec<f64> {
        vec![dot(u, u) - self.radius * self.radius]
    }

    fn jacobian(&self, u: &[f64]) -> Matrix {
        Matrix::from_raw(1, self.dim, u.iter().map(|x| 2.0 * x).collect())
    }

    fn jacobian_derivative(&self, _u: &[f64], w: &[f64]) -> Matrix {
        Matrix::from_raw(1, self.dim, w.iter().map(|x| 2.0 * x).collect())
    }
}

/// `g(u) = A u - b`.
#[derive(Clone, Debug)]
pub struct AffineConstraint {
    pub a: Matrix,
    pub b: Vec<f64>,
}

impl ConstraintSet for AffineConstraint {
    fn ambient_dim(&self) -> usize {
        self.a.cols()
    }

    fn constraint_count(&self) -> usize {
        self.a.rows()
    }

    fn residual(&self, u: &[f64]) -> Vec<f64> {
        let mut r = self.a.matvec(u).expect("state has ambient length");
        axpy(-1.0, &self.b, &mut r);
        r
    }

    fn jacobian(&self, _u: &[f64]) -> Matrix {
        self.a.clone()
    }

    fn jacobian_derivative(&self, _u: &[f64], _w: &[f64]) -> Matrix {
        Matrix::zeros(self.a.rows(), self.a.cols())
    }
}

/// Factored Gram matrix of `Dg(u)` at one point, plus the last coefficient
/// vector `α` computed with it.
#[derive(Clone, Debug)]
pub struct ProjectionWorkspace {
    jacobian: Matrix,
    gram: Matrix,
    factor: Cholesky,
    coeffs: Vec<f64>,
}

impl ProjectionWorkspace {
    pub fn at(c: &dyn ConstraintSet, u: &[f64]) -> Result<Self> {
        check_len("projection state", c.ambient_dim(), u.len())?;
        Self::from_jacobian(c.jacobian(u))
    }

    pub fn from_jacobian(jacobian: Matrix) -> Result<Self> {
        let gram = jacobian.gram();
        let threshold = RANK_TOLERANCE * gram.trace();
        let factor = Cholesky::factor_with_threshold(&gram, threshold).map_err(|e| match e {
            Error::Singular { pivot, .. } => Error::SingularProjection { pivot, threshold },
            other => other,
        })?;
        let m = gram.rows();
        Ok(Self {
            jacobian,
            gram,
            factor,
            coeffs: vec![0.0; m],
        })
    }

    pub fn jacobian(&self) -> &Matrix {
        &self.jacobian
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    /// Coefficients `α` from the most recent [`project`](Self::project).
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// `(A Aᵀ)⁻¹ r`
    pub fn solve_gram(&self, r: &[f64]) -> Vec<f64> {
        let mut x = r.to_vec();
        self.factor.solve_in_place(&mut x);
        x
    }

    /// `A v`
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.jacobian.rows()).map(|i| dot(self.jacobian.row(i), v)).collect()
    }

    /// `Aᵀ α`
    pub fn apply_adjoint(&self, alpha: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.jacobian.cols()];
        for (i, &a) in alpha.iter().enumerate() {
            axpy(a, self.jacobian.row(i), &mut out);
        }
        out
    }

    /// `Aᵀ (A Aᵀ)⁻¹ r`, the pseudoinverse of `Dg(u)` applied to `r`.
    pub fn lift(&self, r: &[f64]) -> Vec<f64> {
        self.apply_adjoint(&self.solve_gram(r))
    }

    pub fn project(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("project_tangent", self.jacobian.cols(), v.len())?;
        self.coeffs = self.solve_gram(&self.apply(v));
        let mut out = v.to_vec();
        for (i, &a) in self.coeffs.iter().enumerate() {
            axpy(-a, self.jacobian.row(i), &mut out);
        }
        Ok(out)
    }
}

/// Orthogonal projection of `v` onto `T_u M`.
pub fn project_tangent(c: &dyn ConstraintSet, u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    ProjectionWorkspace::at(c, u)?.project(v)
}

/// The same projection computed through an SVD pseudoinverse of `Dg(u)ᵀ`.
/// Validation path only.
pub fn project_tangent_svd(c: &dyn ConstraintSet, u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let n = c.ambient_dim();
    check_len("project_tangent_svd", n, u.len())?;
    check_len("project_tangent_svd", n, v.len())?;
    let jac = c.jacobian(u);
    let m = jac.rows();
    // Dgᵀ as an n x m nalgebra matrix.
    let adj = DMatrix::from_fn(n, m, |i, j| jac.get(j, i));
    let svd = adj
        .clone()
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let cutoff = 1e-14 * svd.singular_values.max();
    let pinv = svd
        .pseudo_inverse(cutoff)
        .map_err(|e| Error::Numeric(e.to_string()))?;
    let vv = nalgebra::DVector::from_column_slice(v);
    let alpha = &pinv * &vv;
    let normal = &adj * alpha;
    Ok(v.iter().zip(normal.iter()).map(|(a, b)| a - b).collect())
}

/// Central-difference Jacobian of `g` at `u`.
pub fn fd_jacobian(c: &dyn ConstraintSet, u: &[f64], eps: f64) -> Matrix {
    let (m, n) = (c.constraint_count(), c.ambient_dim());
    let mut jac = Matrix::zeros(m, n);
    let mut p = u.to_vec();
    for j in 0..n {
        p[j] = u[j] + eps;
        let gp = c.residual(&p);
        p[j] = u[j] - eps;
        let gm = c.residual(&p);
        p[j] = u[j];
        for i in 0..m {
            jac.set(i, j, (gp[i] - gm[i]) / (2.0 * eps));
        }
    }
    jac
}

/// Pull `u_guess` onto `M` with minimum-norm Gauss-Newton steps
/// `u ← u - Dgᵀ (Dg Dgᵀ)⁻¹ g(u)` until `‖g‖∞ ≤ tol`.
pub fn newton_retract(c: &dyn ConstraintSet, u_guess: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    check_len("newton_retract", c.ambient_dim(), u_guess.len())?;
    let mut u = u_guess.to_vec();
    for _ in 0..max_iter {
        let g = c.residual(&u);
        if norm_inf(&g) <= tol {
            return Ok(u);
        }
        let ws = ProjectionWorkspace::at(c, &u)?;
        axpy(-1.0, &ws.lift(&g), &mut u);
    }
    let residual = norm_inf(&c.residual(&u));
    if residual <= tol {
        return Ok(u);
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// `Proj_u(v)` recorded on a tape; differentiable in both `u` and `v`.
pub fn record_projection(tape: &mut Tape, c: &Arc<dyn ConstraintSet>, u: NodeId, v: NodeId) -> Result<NodeId> {
    let (value, op) = {
        let uv = tape.value(u).as_slice();
        let vv = tape.value(v).as_slice();
        let mut ws = ProjectionWorkspace::at(c.as_ref(), uv)?;
        let p = ws.project(vv)?;
        (
            Matrix::column(p),
            ProjectOp {
                constraints: Arc::clone(c),
                workspace: ws,
            },
        )
    };
    Ok(tape.custom_with_value(&[u, v], Box::new(op), value))
}

/// `-γ Dg(u)ᵀ (Dg Dgᵀ)⁻¹ g(u)` recorded on a tape.
pub fn record_stabilization(tape: &mut Tape, c: &Arc<dyn ConstraintSet>, u: NodeId, gamma: f64) -> Result<NodeId> {
    let (value, op) = {
        let uv = tape.value(u).as_slice();
        let ws = ProjectionWorkspace::at(c.as_ref(), uv)?;
        let alpha = ws.solve_gram(&c.residual(uv));
        let s = ws.apply_adjoint(&alpha);
        (
            Matrix::column(s.iter().map(|x| -gamma * x).collect()),
            StabilizeOp {
                constraints: Arc::clone(c),
                gamma,
                workspace: ws,
                alpha,
                lifted: s,
            },
        )
    };
    Ok(tape.custom_with_value(&[u], Box::new(op), value))
}

/// `-γ F(u) g(u)` with `F` the pseudoinverse of `Dg(u)`.
pub fn stabilization_term(c: &dyn ConstraintSet, u: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let ws = ProjectionWorkspace::at(c, u)?;
    Ok(ws.lift(&c.residual(u)).into_iter().map(|x| -gamma * x).collect())
}

#[derive(Debug)]
struct ProjectOp {
    constraints: Arc<dyn ConstraintSet>,
    workspace: ProjectionWorkspace,
}

impl CustomOp for ProjectOp {
    fn name(&self) -> &'static str {
        "project_tangent"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        project_tangent(self.constraints.as_ref(), inputs[0].as_slice(), inputs[1].as_slice()).map(Matrix::column)
    }

    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        // With α = G⁻¹Av and β = G⁻¹Ac̄:
        //   v̄ = P c̄
        //   ū = -H(P c̄)ᵀα - H(P v)ᵀβ,   H(x) = d/dε Dg(u + εx)
        let u = inputs[0].as_slice();
        let ws = &self.workspace;
        let alpha = ws.coeffs();
        let c = grad.as_slice();
        let beta = ws.solve_gram(&ws.apply(c));
        let mut pc = c.to_vec();
        axpy(-1.0, &ws.apply_adjoint(&beta), &mut pc);

        let mut gu = self.constraints.hessian_contract(u, &pc, alpha);
        let second = self.constraints.hessian_contract(u, output.as_slice(), &beta);
        for (a, b) in gu.iter_mut().zip(&second) {
            *a = -*a - b;
        }
        Ok(vec![Matrix::column(gu), Matrix::column(pc)])
    }
}

#[derive(Debug)]
struct StabilizeOp {
    constraints: Arc<dyn ConstraintSet>,
    gamma: f64,
    workspace: ProjectionWorkspace,
    alpha: Vec<f64>,
    lifted: Vec<f64>,
}

impl CustomOp for StabilizeOp {
    fn name(&self) -> &'static str {
        "stabilization"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        stabilization_term(self.constraints.as_ref(), inputs[0].as_slice(), self.gamma).map(Matrix::column)
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        // S = Aᵀα, α = G⁻¹g. With β = G⁻¹Ac̄:
        //   ∂⟨c̄, S⟩/∂u = H(P c̄)ᵀα + Aᵀβ - H(S)ᵀβ
        let u = inputs[0].as_slice();
        let ws = &self.workspace;
        let c = grad.as_slice();
        let beta = ws.solve_gram(&ws.apply(c));
        let a_beta = ws.apply_adjoint(&beta);
        let mut pc = c.to_vec();
        axpy(-1.0, &a_beta, &mut pc);

        let mut gu = self.constraints.hessian_contract(u, &pc, &self.alpha);
        axpy(1.0, &a_beta, &mut gu);
        let third = self.constraints.hessian_contract(u, &self.lifted, &beta);
        axpy(-1.0, &third, &mut gu);
        gu.iter_mut().for_each(|x| *x *= -self.gamma);
        Ok(vec![Matrix::column(gu)])
    }
}
