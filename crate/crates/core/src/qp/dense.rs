use nalgebra::{DMatrix, DVector};

use super::QpStatus;
use crate::error::{invalid, numerical, Result};
use crate::linalg::{all_finite, all_finite_vec};

/// `min ½ zᵀ H z + gᵀ z  s.t.  E z = e,  G z ≤ h`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub e_mat: DMatrix<f64>,
    pub e_vec: DVector<f64>,
    pub g_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
}

/// Multipliers follow `H z + g + Eᵀ ν + Gᵀ λ = 0`, `λ ≥ 0`.
#[derive(Clone, Debug)]
pub struct DenseQpSolution {
    pub z: DVector<f64>,
    pub eq_mult: DVector<f64>,
    pub ineq_mult: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseSettings {
    /// Feasibility tolerance, relative to the row scale.
    pub tol: f64,
}

impl Default for DenseSettings {
    fn default() -> Self {
        Self { tol: 1e-10 }
    }
}

impl DenseQp {
    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.h.shape() != (n, n)
            || self.e_mat.ncols() != n
            || self.e_mat.nrows() != self.e_vec.len()
            || self.g_mat.ncols() != n
            || self.g_mat.nrows() != self.h_vec.len()
        {
            return Err(invalid("dense QP has inconsistent dimensions"));
        }
        if !(all_finite(&self.h)
            && all_finite(&self.e_mat)
            && all_finite(&self.g_mat)
            && all_finite_vec(&self.g)
            && all_finite_vec(&self.e_vec)
            && all_finite_vec(&self.h_vec))
        {
            return Err(invalid("dense QP has non-finite data"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Row {
    /// Index into equalities (`eq = true`) or inequalities.
    idx: usize,
    eq: bool,
    /// -1 when an equality was added as `-E_i z ≤ -e_i`.
    sign: f64,
}

struct Workspace<'a> {
    qp: &'a DenseQp,
}

impl Workspace<'_> {
    fn normal(&self, r: &Row) -> DVector<f64> {
        let m = if r.eq { &self.qp.e_mat } else { &self.qp.g_mat };
        m.row(r.idx).transpose() * r.sign
    }

    fn bound(&self, r: &Row) -> f64 {
        let v = if r.eq { &self.qp.e_vec } else { &self.qp.h_vec };
        v[r.idx] * r.sign
    }

    /// Solves `[H N; Nᵀ 0] [a; b] = [rhs; rhs2]` for the active normals `N`.
    fn kkt_solve(
        &self,
        active: &[Row],
        rhs: &DVector<f64>,
        rhs2: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.qp.n();
        let m = active.len();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&self.qp.h);
        for (j, r) in active.iter().enumerate() {
            let nj = self.normal(r);
            k.view_mut((0, n + j), (n, 1)).copy_from(&nj);
            k.view_mut((n + j, 0), (1, n)).copy_from(&nj.transpose());
        }
        let mut b = DVector::zeros(n + m);
        b.rows_mut(0, n).copy_from(rhs);
        b.rows_mut(n, m).copy_from(rhs2);
        let sol = k.lu().solve(&b)?;
        if !all_finite_vec(&sol) {
            return None;
        }
        Some((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
    }
}

/// Dual active-set method (Goldfarb-Idnani) with dense KKT solves.
///
/// Requires `H` positive definite. Equality rows are added first and are
/// never removed from the active set.
pub fn solve_dense_kkt(qp: &DenseQp, settings: &DenseSettings) -> Result<DenseQpSolution> {
    qp.validate()?;
    let n_eq = qp.e_vec.len();
    let n_in = qp.h_vec.len();
    let ws = Workspace { qp };

    let chol = qp
        .h
        .clone()
        .cholesky()
        .ok_or_else(|| numerical("dense QP Hessian is not positive definite"))?;
    let mut z = -chol.solve(&qp.g);
    let mut active: Vec<Row> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_pivots = 10 * n_in.max(1) + n_eq;
    let mut pivots = 0;
    let mut redundant = vec![false; n_eq];

    let row_scale = |r: &Row| ws.normal(r).amax().max(ws.bound(r).abs()).max(1.0);

    let finish = |z: DVector<f64>, active: &[Row], u: &[f64], status: QpStatus, pivots: usize| {
        let mut eq_mult = DVector::zeros(n_eq);
        let mut ineq_mult = DVector::zeros(n_in);
        for (r, &uj) in active.iter().zip(u) {
            if r.eq {
                eq_mult[r.idx] = r.sign * uj;
            } else {
                ineq_mult[r.idx] = uj;
            }
        }
        let objective = qp.objective(&z);
        DenseQpSolution {
            z,
            eq_mult,
            ineq_mult,
            status,
            iterations: pivots,
            objective,
        }
    };

    loop {
        // Most violated constraint, equalities first.
        let mut pick: Option<(Row, f64)> = None;
        for i in 0..n_eq {
            if redundant[i] || active.iter().any(|r| r.eq && r.idx == i) {
                continue;
            }
            let v = qp.e_mat.row(i).dot(&z.transpose()) - qp.e_vec[i];
            let row = Row {
                idx: i,
                eq: true,
                sign: if v >= 0.0 { 1.0 } else { -1.0 },
            };
            // Equalities enter even when already satisfied so they stay pinned.
            if pick.as_ref().is_none_or(|(_, best)| v.abs() / row_scale(&row) > *best) {
                pick = Some((row, v.abs() / row_scale(&row)));
            }
        }
        if pick.is_none() {
            for i in 0..n_in {
                if active.iter().any(|r| !r.eq && r.idx == i) {
                    continue;
                }
                let row = Row { idx: i, eq: false, sign: 1.0 };
                let v = (qp.g_mat.row(i).dot(&z.transpose()) - qp.h_vec[i]) / row_scale(&row);
                if v > settings.tol && pick.as_ref().is_none_or(|(_, best)| v > *best) {
                    pick = Some((row, v));
                }
            }
        }
        let Some((p, _)) = pick else {
            return Ok(finish(z, &active, &u, QpStatus::Optimal, pivots));
        };
        let np = ws.normal(&p);
        let bp = ws.bound(&p);
        let mut up = 0.0;

        loop {
            pivots += 1;
            if pivots > max_pivots {
                return Err(numerical(format!("dense active-set solver exceeded {max_pivots} pivots")));
            }
            let (zd, r) = ws
                .kkt_solve(&active, &np, &DVector::zeros(active.len()))
                .ok_or_else(|| numerical("singular KKT matrix in dense active-set solver"))?;
            let violation = np.dot(&z) - bp;
            let curvature = np.dot(&zd);
            let dependent = curvature <= 1e-12 * np.dot(&chol.solve(&np));

            // dual step limit over active inequalities
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (j, row) in active.iter().enumerate() {
                if !row.eq && r[j] > 1e-14 {
                    let t = u[j] / r[j];
                    if t < t1 {
                        t1 = t;
                        drop = Some(j);
                    }
                }
            }
            if dependent && p.eq && violation.abs() <= settings.tol * row_scale(&p) {
                redundant[p.idx] = true;
                break;
            }
            let t2 = if dependent { f64::INFINITY } else { violation / curvature };

            if t1.is_infinite() && t2.is_infinite() {
                return Ok(finish(z, &active, &u, QpStatus::Infeasible, pivots));
            }
            let t = t1.min(t2).max(0.0);
            if !dependent {
                z -= &zd * t;
            }
            for (j, uj) in u.iter_mut().enumerate() {
                *uj -= t * r[j];
            }
            up += t;
            if t2 <= t1 {
                active.push(p);
                u.push(up);
                break;
            }
            let j = drop.expect("finite t1 has an index");
            active.remove(j);
            u.remove(j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qp(h: DMatrix<f64>, g: DVector<f64>) -> DenseQp {
        let n = g.len();
        DenseQp {
            h,
            g,
            e_mat: DMatrix::zeros(0, n),
            e_vec: DVector::zeros(0),
            g_mat: DMatrix::zeros(0, n),
            h_vec: DVector::zeros(0),
        }
    }

    fn stationarity(p: &DenseQp, s: &DenseQpSolution) -> f64 {
        (&p.h * &s.z + &p.g + p.e_mat.transpose() * &s.eq_mult + p.g_mat.transpose() * &s.ineq_mult).amax()
    }

    #[test]
    fn equality_only() {
        let mut p = qp(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]), DVector::from_vec(vec![1.0, -1.0]));
        p.e_mat = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.e_vec = DVector::from_vec(vec![1.0]);
        let s = solve_dense_kkt(&p, &DenseSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!(stationarity(&p, &s) <= 1e-10);
        assert!((s.z[0] + s.z[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn two_variable_active_set_by_enumeration() {
        // min (z1-2)² + (z2-1)²  s.t. z1 + z2 ≤ 1, z1 ≥ 0, z2 ≥ 0
        let mut p = qp(DMatrix::identity(2, 2) * 2.0, DVector::from_vec(vec![-4.0, -2.0]));
        p.g_mat = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
        p.h_vec = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let s = solve_dense_kkt(&p, &DenseSettings::default()).unwrap();
        // Only the first row active: projection of (2,1) onto z1+z2=1 is (1,0),
        // which also touches z2 ≥ 0 with zero multiplier.
        assert!((s.z[0] - 1.0).abs() < 1e-12 && s.z[1].abs() < 1e-12);
        assert!((s.ineq_mult[0] - 2.0).abs() < 1e-10);
        assert!(s.ineq_mult[1].abs() < 1e-12);
        assert!(stationarity(&p, &s) <= 1e-10);
    }

    #[test]
    fn contradictory_equalities_are_infeasible() {
        let mut p = qp(DMatrix::identity(2, 2), DVector::zeros(2));
        p.e_mat = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        p.e_vec = DVector::from_vec(vec![1.0, 2.0]);
        let s = solve_dense_kkt(&p, &DenseSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
    }

    #[test]
    fn infeasible_box() {
        let mut p = qp(DMatrix::identity(1, 1), DVector::zeros(1));
        p.g_mat = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        p.h_vec = DVector::from_vec(vec![-1.0, -1.0]);
        let s = solve_dense_kkt(&p, &DenseSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let p = qp(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), DVector::zeros(2));
        assert!(solve_dense_kkt(&p, &DenseSettings::default()).is_err());
    }
}
