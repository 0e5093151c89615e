//! Dense convex QP solver.
//!
//! Solves `min ½xᵀPx + qᵀx  s.t.  Ax = b,  l ≤ Cx ≤ u` with an
//! operator-splitting (ADMM) iteration on a Ruiz-equilibrated copy of the
//! problem, adaptive step size ρ, primal infeasibility certificates and an
//! active-set polishing step that recovers the exact KKT point once the
//! active set has settled.
//!
//! Multipliers follow the convention `Px + q + Aᵀy_eq + Cᵀy_ineq = 0`, so an
//! active upper bound has a non-negative multiplier and an active lower bound
//! a non-positive one.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem `min ½xᵀPx`.
    pub fn new(p: DMatrix<f64>) -> Self {
        let n = p.ncols();
        Self {
            p,
            q: DVector::zeros(n),
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            c: DMatrix::zeros(0, n),
            l: DVector::zeros(0),
            u: DVector::zeros(0),
        }
    }

    pub fn with_linear_cost(mut self, q: DVector<f64>) -> Self {
        self.q = q;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a = a;
        self.b = b;
        self
    }

    pub fn with_inequalities(mut self, c: DMatrix<f64>, l: DVector<f64>, u: DVector<f64>) -> Self {
        self.c = c;
        self.l = l;
        self.u = u;
        self
    }

    pub fn n(&self) -> usize {
        self.p.ncols()
    }

    pub fn n_eq(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_ineq(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let bad = |msg: String| Err(Error::InvalidQp(msg));
        if self.p.nrows() != n {
            return bad(format!("P is {}x{}", self.p.nrows(), n));
        }
        if self.q.len() != n {
            return bad(format!("q has length {}, expected {n}", self.q.len()));
        }
        if self.a.ncols() != n || self.b.len() != self.a.nrows() {
            return bad("equality dimensions inconsistent".into());
        }
        if self.c.ncols() != n || self.l.len() != self.c.nrows() || self.u.len() != self.c.nrows() {
            return bad("inequality dimensions inconsistent".into());
        }
        let asym = (&self.p - self.p.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + self.p.abs().max()) {
            return bad(format!("P not symmetric (asymmetry {asym:.3e})"));
        }
        if let Some(i) = (0..self.l.len()).find(|&i| self.l[i] > self.u[i] || self.l[i].is_nan() || self.u[i].is_nan()) {
            return bad(format!("bound {i}: l = {} > u = {}", self.l[i], self.u[i]));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !finite(&self.p) || !finite(&self.a) || !finite(&self.c) || !self.b.iter().all(|v| v.is_finite()) {
            return bad("non-finite matrix entry".into());
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// Stacked constraint matrix `[A; C]` with bounds `[b; l]`, `[b; u]`.
    fn stacked(&self) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let (me, mi, n) = (self.n_eq(), self.n_ineq(), self.n());
        let mut k = DMatrix::zeros(me + mi, n);
        k.rows_mut(0, me).copy_from(&self.a);
        k.rows_mut(me, mi).copy_from(&self.c);
        let mut lo = DVector::zeros(me + mi);
        let mut hi = DVector::zeros(me + mi);
        lo.rows_mut(0, me).copy_from(&self.b);
        hi.rows_mut(0, me).copy_from(&self.b);
        lo.rows_mut(me, mi).copy_from(&self.l);
        hi.rows_mut(me, mi).copy_from(&self.u);
        (k, lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub adaptive_rho: bool,
    pub adaptive_interval: usize,
    pub scaling_iters: usize,
    pub polish: bool,
    /// Iterations between polishing attempts.
    pub polish_interval: usize,
    /// Regularization of the polishing KKT system.
    pub polish_delta: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_primal: 1e-6,
            eps_dual: 1e-6,
            eps_infeasible: 1e-6,
            max_iter: 4000,
            adaptive_rho: true,
            adaptive_interval: 25,
            scaling_iters: 10,
            polish: true,
            polish_interval: 25,
            polish_delta: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y_eq: DVector<f64>,
    pub y_ineq: DVector<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub solve_time: Duration,
    /// The returned point comes from the active-set polish.
    pub polished: bool,
    /// Set when P had to be regularized to factor the ADMM system.
    pub regularization: Option<f64>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

/// Initial iterate for [`QpSolver::solve`].
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub x: DVector<f64>,
    /// Stacked `[y_eq; y_ineq]`; zero when absent.
    pub y: Option<DVector<f64>>,
}

impl WarmStart {
    pub fn from_solution(sol: &QpSolution) -> Self {
        let mut y = DVector::zeros(sol.y_eq.len() + sol.y_ineq.len());
        y.rows_mut(0, sol.y_eq.len()).copy_from(&sol.y_eq);
        y.rows_mut(sol.y_eq.len(), sol.y_ineq.len()).copy_from(&sol.y_ineq);
        Self { x: sol.x.clone(), y: Some(y) }
    }
}

/// Solver instance. Keeps the last step size so consecutive solves of
/// similar problems start well; otherwise stateless.
#[derive(Debug, Clone)]
pub struct QpSolver {
    pub settings: QpSettings,
    last_rho: Option<f64>,
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;

struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    cost: f64,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

fn ruiz(p: &mut DMatrix<f64>, q: &mut DVector<f64>, k: &mut DMatrix<f64>, iters: usize) -> Scaling {
    let (m, n) = (k.nrows(), k.ncols());
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let clamp = |norm: f64| if norm < 1e-4 { 1.0 } else { (1.0 / norm.sqrt()).clamp(1e-4, 1e4) };
    for _ in 0..iters {
        let dk: DVector<f64> = DVector::from_fn(n, |j, _| {
            let pc = p.column(j).amax();
            let kc = if m > 0 { k.column(j).amax() } else { 0.0 };
            clamp(pc.max(kc))
        });
        let ek: DVector<f64> = DVector::from_fn(m, |i, _| clamp(k.row(i).amax()));
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= dk[i] * dk[j];
            }
            for i in 0..m {
                k[(i, j)] *= ek[i] * dk[j];
            }
        }
        q.component_mul_assign(&dk);
        d.component_mul_assign(&dk);
        e.component_mul_assign(&ek);
    }
    let mean_col = if n > 0 { (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64 } else { 1.0 };
    let norm = mean_col.max(inf_norm(q));
    let cost = if norm < 1e-4 { 1.0 } else { (1.0 / norm).clamp(1e-4, 1e4) };
    *p *= cost;
    *q *= cost;
    Scaling { d, e, cost }
}

impl Default for QpSolver {
    fn default() -> Self {
        Self::new(QpSettings::default())
    }
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings, last_rho: None }
    }

    /// Solve `problem`. Never panics on infeasible input; the status says what happened.
    pub fn solve(&mut self, problem: &QpProblem, warm: Option<&WarmStart>) -> Result<QpSolution> {
        problem.validate()?;
        let start = Instant::now();
        let s = self.settings;
        let n = problem.n();
        let me = problem.n_eq();
        let (k_orig, lo, hi) = problem.stacked();
        let m = k_orig.nrows();

        let mut p = problem.p.clone();
        let mut q = problem.q.clone();
        let mut k = k_orig.clone();
        let sc = ruiz(&mut p, &mut q, &mut k, s.scaling_iters);
        let lo_s = lo.component_mul(&sc.e);
        let hi_s = hi.component_mul(&sc.e);

        let is_eq: Vec<bool> = (0..m).map(|i| lo[i] == hi[i]).collect();
        let is_free: Vec<bool> = (0..m).map(|i| lo[i] == f64::NEG_INFINITY && hi[i] == f64::INFINITY).collect();
        let mut rho = self.last_rho.unwrap_or(s.rho);
        let rho_vec = |rho: f64| -> DVector<f64> {
            DVector::from_fn(m, |i, _| {
                if is_free[i] {
                    RHO_MIN
                } else if is_eq[i] {
                    (RHO_EQ_SCALE * rho).min(RHO_MAX)
                } else {
                    rho
                }
            })
        };
        let mut rv = rho_vec(rho);

        let mut regularization = None;
        let factor = |rv: &DVector<f64>, extra: f64| {
            let mut mat = &p + DMatrix::identity(n, n) * (s.sigma + extra);
            if m > 0 {
                let kr = DMatrix::from_fn(m, n, |i, j| k[(i, j)] * rv[i]);
                mat += k.transpose() * kr;
            }
            mat.cholesky()
        };
        let mut chol = match factor(&rv, 0.0) {
            Some(c) => c,
            None => {
                // P indefinite beyond the σ shift; regularize and report.
                let eps = 1e-8 * (1.0 + p.amax());
                regularization = Some(eps);
                factor(&rv, eps).ok_or_else(|| Error::InvalidQp("cost matrix is not positive semidefinite".into()))?
            }
        };

        let clip = |v: &DVector<f64>| DVector::from_fn(m, |i, _| v[i].clamp(lo_s[i], hi_s[i]));
        let (mut x, mut y) = match warm {
            Some(w) if w.x.len() == n => {
                let x = w.x.component_div(&sc.d);
                let y = match &w.y {
                    Some(y) if y.len() == m => y.component_div(&sc.e) * sc.cost,
                    _ => DVector::zeros(m),
                };
                (x, y)
            }
            _ => (DVector::zeros(n), DVector::zeros(m)),
        };
        let mut z = clip(&(&k * &x));

        let unscale = |x: &DVector<f64>, y: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
            (x.component_mul(&sc.d), y.component_mul(&sc.e) / sc.cost)
        };

        let mut status = QpStatus::MaxIter;
        let mut iterations = s.max_iter;
        let mut polished_result: Option<(DVector<f64>, DVector<f64>)> = None;

        for it in 1..=s.max_iter {
            let rhs = &x * s.sigma - &q + k.transpose() * (rv.component_mul(&z) - &y);
            let x_tilde = chol.solve(&rhs);
            let z_tilde = &k * &x_tilde;
            let x_new = &x_tilde * s.alpha + &x * (1.0 - s.alpha);
            let z_relax = &z_tilde * s.alpha + &z * (1.0 - s.alpha);
            let z_new = clip(&(&z_relax + y.component_div(&rv)));
            let y_new = &y + rv.component_mul(&(&z_relax - &z_new));
            let delta_y = &y_new - &y;
            x = x_new;
            z = z_new;
            y = y_new;

            let kx = &k * &x;
            let px = &p * &x;
            let kty = k.transpose() * &y;
            let r_prim = (&kx - &z).component_div(&sc.e);
            let r_dual = (&px + &q + &kty).component_div(&sc.d) / sc.cost;
            let r_prim = if m > 0 { inf_norm(&r_prim) } else { 0.0 };
            let r_dual = inf_norm(&r_dual);

            if r_prim <= s.eps_primal && r_dual <= s.eps_dual {
                status = QpStatus::Optimal;
                iterations = it;
                break;
            }

            if m > 0 && self.primal_infeasible(&delta_y, &k, &sc, &lo, &hi) {
                status = QpStatus::Infeasible;
                iterations = it;
                break;
            }

            if s.polish && it % s.polish_interval == 0 {
                let (_, yu) = unscale(&x, &y);
                let zu = z.component_div(&sc.e);
                if let Some(result) = polish(problem, &k_orig, &lo, &hi, &zu, &yu, &s) {
                    polished_result = Some(result);
                    status = QpStatus::Optimal;
                    iterations = it;
                    break;
                }
            }

            if s.adaptive_rho && it % s.adaptive_interval == 0 && m > 0 {
                let prim_scale = inf_norm(&kx).max(inf_norm(&z)).max(1e-10);
                let dual_scale = inf_norm(&px).max(inf_norm(&kty)).max(inf_norm(&q)).max(1e-10);
                let rp = inf_norm(&(&kx - &z)) / prim_scale;
                let rd = inf_norm(&(&px + &q + &kty)) / dual_scale;
                if rd > 0.0 && rp > 0.0 {
                    let new_rho = (rho * (rp / rd).sqrt()).clamp(RHO_MIN, RHO_MAX);
                    if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                        rho = new_rho;
                        rv = rho_vec(rho);
                        let extra = regularization.unwrap_or(0.0);
                        match factor(&rv, extra) {
                            Some(c) => chol = c,
                            None => return Err(Error::InvalidQp("refactorization failed".into())),
                        }
                    }
                }
            }
        }
        self.last_rho = Some(rho);

        let mut polished = false;
        let (x_out, y_out) = match polished_result {
            Some(r) => {
                polished = true;
                r
            }
            None => {
                let (xu, yu) = unscale(&x, &y);
                if status == QpStatus::Optimal && s.polish {
                    let zu = z.component_div(&sc.e);
                    match polish(problem, &k_orig, &lo, &hi, &zu, &yu, &s) {
                        Some(r) => {
                            polished = true;
                            r
                        }
                        None => (xu, yu),
                    }
                } else {
                    (xu, yu)
                }
            }
        };

        let (primal_residual, dual_residual) = kkt_residuals(problem, &k_orig, &lo, &hi, &x_out, &y_out);
        Ok(QpSolution {
            y_eq: y_out.rows(0, me).into_owned(),
            y_ineq: y_out.rows(me, m - me).into_owned(),
            x: x_out,
            status,
            primal_residual,
            dual_residual,
            iterations,
            solve_time: start.elapsed(),
            polished,
            regularization,
        })
    }

    /// Primal infeasibility certificate on the latest dual step.
    fn primal_infeasible(&self, delta_y_s: &DVector<f64>, k_s: &DMatrix<f64>, sc: &Scaling, lo: &DVector<f64>, hi: &DVector<f64>) -> bool {
        let eps = self.settings.eps_infeasible;
        let dy = delta_y_s.component_mul(&sc.e) / sc.cost;
        let norm = inf_norm(&dy);
        if norm < 1e-10 {
            return false;
        }
        let kt_dy = (k_s.transpose() * delta_y_s).component_div(&sc.d) / sc.cost;
        if inf_norm(&kt_dy) > eps * norm {
            return false;
        }
        let mut support = 0.0;
        for i in 0..dy.len() {
            let v = dy[i];
            if v > eps * norm {
                if hi[i].is_infinite() {
                    return false;
                }
                support += hi[i] * v;
            } else if v < -eps * norm {
                if lo[i].is_infinite() {
                    return false;
                }
                support += lo[i] * v;
            }
        }
        support < -eps * norm
    }
}

/// Infinity norms of the primal and dual (stationarity) residuals in the
/// original problem scaling.
fn kkt_residuals(
    problem: &QpProblem,
    k: &DMatrix<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> (f64, f64) {
    let kx = k * x;
    let prim = (0..kx.len()).map(|i| (lo[i] - kx[i]).max(kx[i] - hi[i]).max(0.0)).fold(0.0, f64::max);
    let dual = inf_norm(&(&problem.p * x + &problem.q + k.transpose() * y));
    (prim, dual)
}

/// Solve the equality-constrained QP on the guessed active set and keep the
/// result only if it is a verified KKT point of the full problem.
fn polish(
    problem: &QpProblem,
    k: &DMatrix<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    s: &QpSettings,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = problem.n();
    let m = k.nrows();
    // (row, target bound)
    let mut active: Vec<(usize, f64)> = Vec::new();
    for i in 0..m {
        // Equality rows are always active.
        if lo[i] == hi[i] || z[i] - lo[i] < -y[i] {
            active.push((i, lo[i]));
        } else if hi[i] - z[i] < y[i] {
            active.push((i, hi[i]));
        }
    }
    let na = active.len();
    let dim = n + na;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&problem.p);
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&problem.q));
    for (r, &(row, bound)) in active.iter().enumerate() {
        if !bound.is_finite() {
            return None;
        }
        for j in 0..n {
            kkt[(n + r, j)] = k[(row, j)];
            kkt[(j, n + r)] = k[(row, j)];
        }
        rhs[n + r] = bound;
    }
    let mut reg = kkt.clone();
    for i in 0..n {
        reg[(i, i)] += s.polish_delta;
    }
    for i in n..dim {
        reg[(i, i)] -= s.polish_delta;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..10 {
        let r = &rhs - &kkt * &sol;
        if inf_norm(&r) < 1e-13 * (1.0 + inf_norm(&rhs)) {
            break;
        }
        sol += lu.solve(&r)?;
    }
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let xp = sol.rows(0, n).into_owned();
    let mut yp = DVector::zeros(m);
    for (r, &(row, _)) in active.iter().enumerate() {
        yp[row] = sol[n + r];
    }
    for &(row, bound) in &active {
        if lo[row] == hi[row] {
            continue;
        }
        let mult = yp[row];
        if bound == lo[row] && mult > s.eps_dual {
            return None;
        }
        if bound == hi[row] && mult < -s.eps_dual {
            return None;
        }
    }
    let (prim, dual) = kkt_residuals(problem, k, lo, hi, &xp, &yp);
    (prim <= s.eps_primal && dual <= s.eps_dual).then_some((xp, yp))
}

/// Exact solution of an equality-constrained QP from its KKT system.
///
/// Used as an independent oracle in tests; rejects problems with any finite
/// inequality bound.
pub fn kkt_oracle(problem: &QpProblem) -> Result<DVector<f64>> {
    problem.validate()?;
    if problem.l.iter().chain(problem.u.iter()).any(|v| v.is_finite()) {
        return Err(Error::InvalidQp("KKT oracle handles equality constraints only".into()));
    }
    let (n, me) = (problem.n(), problem.n_eq());
    let mut kkt = DMatrix::zeros(n + me, n + me);
    kkt.view_mut((0, 0), (n, n)).copy_from(&problem.p);
    kkt.view_mut((n, 0), (me, n)).copy_from(&problem.a);
    kkt.view_mut((0, n), (n, me)).copy_from(&problem.a.transpose());
    let mut rhs = DVector::zeros(n + me);
    rhs.rows_mut(0, n).copy_from(&(-&problem.q));
    rhs.rows_mut(n, me).copy_from(&problem.b);
    let sol = kkt.clone().lu().solve(&rhs).ok_or(Error::SingularKkt)?;
    let residual = inf_norm(&(&kkt * &sol - &rhs));
    if !residual.is_finite() || residual > 1e-8 * (1.0 + inf_norm(&rhs)) {
        return Err(Error::SingularKkt);
    }
    Ok(sol.rows(0, n).into_owned())
}
