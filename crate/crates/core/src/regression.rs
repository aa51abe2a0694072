//! Polynomial least squares for conditional expectations, plus the
//! Gauss-Hermite rules used to take exact one-step expectations of a fitted
//! polynomial under a Gaussian increment.

use nalgebra::{DMatrix, DVector};

use crate::error::{MfgError, Result};

/// Monomials of total degree `<= degree` in `n_vars` variables, constant first.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBasis {
    n_vars: usize,
    degree: usize,
    exponents: Vec<Vec<u8>>,
}

impl PolyBasis {
    pub fn new(n_vars: usize, degree: usize) -> Self {
        let mut exponents = Vec::new();
        for total in 0..=degree {
            let mut cur = vec![0u8; n_vars];
            push_compositions(&mut exponents, &mut cur, 0, total);
        }
        Self { n_vars, degree, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Writes the feature vector of `z` into `out`.
    #[inline]
    pub fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.n_vars);
        if self.degree == 1 {
            out[0] = 1.0;
            out[1..=self.n_vars].copy_from_slice(z);
            return;
        }
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for (x, &p) in z.iter().zip(e) {
                if p > 0 {
                    v *= x.powi(p as i32);
                }
            }
            *o = v;
        }
    }

    /// `beta . features(z)`.
    #[inline]
    pub fn predict(&self, beta: &[f64], z: &[f64]) -> f64 {
        if self.degree == 1 {
            return beta[0] + beta[1..].iter().zip(z).map(|(b, x)| b * x).sum::<f64>();
        }
        let mut acc = 0.0;
        for (b, e) in beta.iter().zip(&self.exponents) {
            let mut v = *b;
            for (x, &p) in z.iter().zip(e) {
                if p > 0 {
                    v *= x.powi(p as i32);
                }
            }
            acc += v;
        }
        acc
    }
}

fn push_compositions(out: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, pos: usize, remaining: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = remaining as u8;
        out.push(cur.clone());
        return;
    }
    for p in (0..=remaining).rev() {
        cur[pos] = p as u8;
        push_compositions(out, cur, pos + 1, remaining - p);
    }
    cur[pos] = 0;
}

/// Accumulated normal equations for several right-hand sides sharing one
/// design. Partial sums from independent workers are merged with
/// [`NormalEquations::merge`] in a fixed order, so results do not depend on
/// the number of threads.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    p: usize,
    gram: Vec<f64>,
    /// `n_rhs * p`, one block per right-hand side.
    rhs: Vec<f64>,
    count: usize,
    sq_sum: Vec<f64>,
}

impl NormalEquations {
    pub fn new(p: usize, n_rhs: usize) -> Self {
        Self { p, gram: vec![0.0; p * p], rhs: vec![0.0; p * n_rhs], count: 0, sq_sum: vec![0.0; n_rhs] }
    }

    #[inline]
    pub fn add(&mut self, phi: &[f64], targets: &[f64]) {
        let p = self.p;
        let phi = &phi[..p];
        for (i, &fi) in phi.iter().enumerate() {
            let row = &mut self.gram[i * p + i..i * p + p];
            for (g, &fj) in row.iter_mut().zip(&phi[i..]) {
                *g += fi * fj;
            }
        }
        for (r, &y) in self.rhs.chunks_exact_mut(p).zip(targets) {
            for (ri, &fi) in r.iter_mut().zip(phi) {
                *ri += fi * y;
            }
        }
        for (s, &y) in self.sq_sum.iter_mut().zip(targets) {
            *s += y * y;
        }
        self.count += 1;
    }

    /// Adds `rows` observations given column-major: `features[i * rows + r]`
    /// is feature `i` of row `r`, `targets[l * rows + r]` target `l`.
    pub fn add_columns(&mut self, rows: usize, features: &[f64], targets: &[f64]) {
        let p = self.p;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for i in 0..p {
            for j in i..p {
                self.gram[i * p + j] += dot(col(features, rows, i), col(features, rows, j));
            }
        }
        for (l, sq) in self.sq_sum.iter_mut().enumerate() {
            let y = col(targets, rows, l);
            for i in 0..p {
                self.rhs[l * p + i] += dot(col(features, rows, i), y);
            }
            *sq += dot(y, y);
        }
        self.count += rows;
    }

    pub fn merge(&mut self, other: &NormalEquations) {
        for (a, b) in self.gram.iter_mut().zip(&other.gram) {
            *a += b;
        }
        for (a, b) in self.rhs.iter_mut().zip(&other.rhs) {
            *a += b;
        }
        for (a, b) in self.sq_sum.iter_mut().zip(&other.sq_sum) {
            *a += b;
        }
        self.count += other.count;
    }

    /// Ridge-regularized solve (ridge `1e-10 max(diag, 1)`). Returns one
    /// coefficient vector per right-hand side and the mean squared residual
    /// of each fit.
    pub fn solve(&self, step: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let p = self.p;
        if self.count == 0 {
            return Err(MfgError::DegenerateBasis { step });
        }
        let n = self.count as f64;
        let mut a = DMatrix::<f64>::zeros(p, p);
        for i in 0..p {
            for j in i..p {
                let v = self.gram[i * p + j] / n;
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        let max_diag = (0..p).map(|i| a[(i, i)]).fold(1.0, f64::max);
        let ridge = 1e-10 * max_diag;
        for i in 0..p {
            a[(i, i)] += ridge;
        }
        let chol = a.clone().cholesky().ok_or(MfgError::DegenerateBasis { step })?;
        let mut betas = Vec::with_capacity(self.sq_sum.len());
        let mut residuals = Vec::with_capacity(self.sq_sum.len());
        for (r, &sq) in self.rhs.chunks_exact(p).zip(&self.sq_sum) {
            let b = DVector::from_iterator(p, r.iter().map(|v| v / n));
            let beta = chol.solve(&b);
            if beta.iter().any(|v| !v.is_finite()) {
                return Err(MfgError::DegenerateBasis { step });
            }
            // E[(y - phi.beta)^2] = E[y^2] - 2 beta.b + beta' A beta
            let ab = (&a * &beta).dot(&beta) - ridge * beta.dot(&beta);
            let res = (sq / n - 2.0 * beta.dot(&b) + ab).max(0.0);
            residuals.push(res);
            betas.push(beta.iter().copied().collect());
        }
        Ok((betas, residuals))
    }
}

#[inline]
fn col(v: &[f64], rows: usize, i: usize) -> &[f64] {
    &v[i * rows..(i + 1) * rows]
}

/// Least-squares fit of `targets` on `features(z)`.
pub fn fit(basis: &PolyBasis, points: &[Vec<f64>], targets: &[f64], step: usize) -> Result<(Vec<f64>, f64)> {
    let mut ne = NormalEquations::new(basis.len(), 1);
    let mut phi = vec![0.0; basis.len()];
    for (z, &y) in points.iter().zip(targets) {
        basis.eval_into(z, &mut phi);
        ne.add(&phi, &[y]);
    }
    let (mut b, r) = ne.solve(step)?;
    Ok((b.remove(0), r[0]))
}

/// Probabilists' Gauss-Hermite rule: `E[h(Z)] = sum w_i h(z_i)` for
/// polynomials `h` of degree `<= 2 n - 1`, `Z ~ N(0, 1)`.
pub fn gauss_hermite(n: usize) -> Result<Vec<(f64, f64)>> {
    let s6 = 6.0f64.sqrt();
    Ok(match n {
        1 => vec![(0.0, 1.0)],
        2 => vec![(-1.0, 0.5), (1.0, 0.5)],
        3 => {
            let r = 3.0f64.sqrt();
            vec![(-r, 1.0 / 6.0), (0.0, 2.0 / 3.0), (r, 1.0 / 6.0)]
        }
        4 => {
            let (a, b) = ((3.0 - s6).sqrt(), (3.0 + s6).sqrt());
            let (wa, wb) = (1.0 / (4.0 * (3.0 - s6)), 1.0 / (4.0 * (3.0 + s6)));
            vec![(-b, wb), (-a, wa), (a, wa), (b, wb)]
        }
        _ => return Err(MfgError::InvalidArgument(format!("no Gauss-Hermite rule with {n} nodes"))),
    })
}

/// Nodes needed so that `E[P(Z) Z]` is exact for a degree-`degree` polynomial.
pub fn nodes_for_degree(degree: usize) -> Result<Vec<(f64, f64)>> {
    if degree == 0 || degree > 6 {
        return Err(MfgError::InvalidArgument(format!("basis degree must be in 1..=6, got {degree}")));
    }
    gauss_hermite(degree.div_ceil(2) + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        assert_eq!(PolyBasis::new(3, 1).len(), 4);
        assert_eq!(PolyBasis::new(3, 2).len(), 10);
        assert_eq!(PolyBasis::new(2, 3).len(), 10);
        let b = PolyBasis::new(2, 2);
        let mut out = vec![0.0; 6];
        b.eval_into(&[2.0, 3.0], &mut out);
        let mut sorted = out.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        let beta = [1.0, -1.0, 0.5, 2.0, 0.0, 1.0];
        let direct: f64 = beta.iter().zip(&out).map(|(a, b)| a * b).sum();
        assert_eq!(b.predict(&beta, &[2.0, 3.0]), direct);
    }

    #[test]
    fn exact_linear_fit() {
        let basis = PolyBasis::new(1, 1);
        let pts: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.1 - 1.0]).collect();
        let ys: Vec<f64> = pts.iter().map(|z| 2.5 * z[0] - 0.75).collect();
        let (beta, res) = fit(&basis, &pts, &ys, 0).unwrap();
        assert!((beta[0] + 0.75).abs() < 1e-8 && (beta[1] - 2.5).abs() < 1e-8, "{beta:?}");
        assert!(res < 1e-12);
    }

    #[test]
    fn column_batches_match_rows() {
        let basis = PolyBasis::new(2, 2);
        let p = basis.len();
        let pts: Vec<[f64; 2]> = (0..17).map(|i| [i as f64 * 0.3 - 2.0, (i * i) as f64 * 0.01]).collect();
        let ys: Vec<[f64; 2]> = pts.iter().map(|z| [z[0] * z[1] + 1.0, z[0].sin()]).collect();
        let mut by_row = NormalEquations::new(p, 2);
        let mut feats = vec![0.0; p * pts.len()];
        let mut targs = vec![0.0; 2 * pts.len()];
        let mut phi = vec![0.0; p];
        for (r, (z, y)) in pts.iter().zip(&ys).enumerate() {
            basis.eval_into(z, &mut phi);
            by_row.add(&phi, y);
            for i in 0..p {
                feats[i * pts.len() + r] = phi[i];
            }
            targs[r] = y[0];
            targs[pts.len() + r] = y[1];
        }
        let mut by_col = NormalEquations::new(p, 2);
        by_col.add_columns(pts.len(), &feats, &targs);
        let (a, ra) = by_row.solve(0).unwrap();
        let (b, rb) = by_col.solve(0).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((ra[0] - rb[0]).abs() < 1e-9 && (ra[1] - rb[1]).abs() < 1e-9);
    }

    #[test]
    fn collinear_design_is_regularized() {
        let basis = PolyBasis::new(2, 1);
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let ys: Vec<f64> = pts.iter().map(|z| 3.0 + z[1]).collect();
        let (beta, _) = fit(&basis, &pts, &ys, 4).unwrap();
        assert!((basis.predict(&beta, &[1.0, 5.0]) - 8.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_design_is_degenerate() {
        let basis = PolyBasis::new(1, 1);
        let err = fit(&basis, &[vec![f64::NAN]], &[1.0], 7).unwrap_err();
        assert!(matches!(err, MfgError::DegenerateBasis { step: 7 }));
    }

    #[test]
    fn hermite_moments() {
        for n in 1..=4 {
            let rule = gauss_hermite(n).unwrap();
            let moment = |p: i32| rule.iter().map(|(z, w)| w * z.powi(p)).sum::<f64>();
            let exact = [1.0, 0.0, 1.0, 0.0, 3.0, 0.0, 15.0, 0.0];
            for p in 0..(2 * n) {
                assert!((moment(p as i32) - exact[p]).abs() < 1e-12, "n={n} p={p}");
            }
        }
    }
}
