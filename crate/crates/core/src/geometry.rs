//! Cotangent bundle of an open subset of `R^n` in a single chart.
//!
//! A point `ℓ = (q, p)` carries a base point and a covector. Tangent vectors
//! to the bundle are pairs `(dq, dp)`. The Liouville form is `Σ p_i dq_i` and
//! the symplectic form is `Σ dp_i ∧ dq_i`, so that
//! `σ(v1, v2) = <dp1, dq2> - <dp2, dq1>`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("dimension must be at least 1")]
    EmptyDimension,
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
}

fn check_finite(v: &DVector<f64>, what: &'static str) -> Result<(), GeometryError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GeometryError::NonFinite(what))
    }
}

fn check_pair(a: &DVector<f64>, b: &DVector<f64>) -> Result<usize, GeometryError> {
    if a.is_empty() {
        return Err(GeometryError::EmptyDimension);
    }
    if a.len() != b.len() {
        return Err(GeometryError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(a.len())
}

/// A point of `T*M` in chart coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotangentPoint {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
}

impl CotangentPoint {
    pub fn new(q: DVector<f64>, p: DVector<f64>) -> Result<Self, GeometryError> {
        check_pair(&q, &p)?;
        check_finite(&q, "base point")?;
        check_finite(&p, "covector")?;
        Ok(Self { q, p })
    }

    pub fn from_slices(q: &[f64], p: &[f64]) -> Result<Self, GeometryError> {
        Self::new(DVector::from_column_slice(q), DVector::from_column_slice(p))
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Stacked `(q, p)` coordinates.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.dim();
        let mut v = DVector::zeros(2 * n);
        v.rows_mut(0, n).copy_from(&self.q);
        v.rows_mut(n, n).copy_from(&self.p);
        v
    }

    /// Inverse of [`CotangentPoint::to_vector`]; reads the first `2n` entries.
    pub fn from_vector(v: &DVector<f64>, n: usize) -> Self {
        Self {
            q: v.rows(0, n).into_owned(),
            p: v.rows(n, n).into_owned(),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.q.norm_squared() + self.p.norm_squared()).sqrt()
    }
}

/// A tangent vector to `T*M` at some point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentToCotangent {
    pub dq: DVector<f64>,
    pub dp: DVector<f64>,
}

impl TangentToCotangent {
    pub fn new(dq: DVector<f64>, dp: DVector<f64>) -> Result<Self, GeometryError> {
        check_pair(&dq, &dp)?;
        check_finite(&dq, "dq")?;
        check_finite(&dp, "dp")?;
        Ok(Self { dq, dp })
    }

    pub fn from_slices(dq: &[f64], dp: &[f64]) -> Result<Self, GeometryError> {
        Self::new(DVector::from_column_slice(dq), DVector::from_column_slice(dp))
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            dq: DVector::zeros(n),
            dp: DVector::zeros(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.dq.len()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.dim();
        let mut v = DVector::zeros(2 * n);
        v.rows_mut(0, n).copy_from(&self.dq);
        v.rows_mut(n, n).copy_from(&self.dp);
        v
    }

    pub fn from_vector(v: &DVector<f64>, n: usize) -> Self {
        Self {
            dq: v.rows(0, n).into_owned(),
            dp: v.rows(n, n).into_owned(),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.dq.norm_squared() + self.dp.norm_squared()).sqrt()
    }
}

/// Differential of a Hamiltonian at a point: `(∂H/∂q, ∂H/∂p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianGradient {
    pub hq: DVector<f64>,
    pub hp: DVector<f64>,
}

impl HamiltonianGradient {
    pub fn new(hq: DVector<f64>, hp: DVector<f64>) -> Result<Self, GeometryError> {
        check_pair(&hq, &hp)?;
        check_finite(&hq, "Hq")?;
        check_finite(&hp, "Hp")?;
        Ok(Self { hq, hp })
    }

    pub fn from_slices(hq: &[f64], hp: &[f64]) -> Result<Self, GeometryError> {
        Self::new(DVector::from_column_slice(hq), DVector::from_column_slice(hp))
    }

    /// Full pairing `<Hq, dq> + <Hp, dp>`.
    pub fn apply(&self, v: &TangentToCotangent) -> Result<f64, GeometryError> {
        check_pair(&self.hq, &v.dq)?;
        Ok(self.hq.dot(&v.dq) + self.hp.dot(&v.dp))
    }
}

/// `ς_ℓ(v) = <p, dq>`.
pub fn liouville_pairing(ell: &CotangentPoint, v: &TangentToCotangent) -> Result<f64, GeometryError> {
    check_pair(&ell.p, &v.dq)?;
    Ok(ell.p.dot(&v.dq))
}

/// `σ(v1, v2) = <dp1, dq2> - <dp2, dq1>`.
pub fn symplectic_form(v1: &TangentToCotangent, v2: &TangentToCotangent) -> Result<f64, GeometryError> {
    check_pair(&v1.dq, &v2.dq)?;
    Ok(v1.dp.dot(&v2.dq) - v2.dp.dot(&v1.dq))
}

/// The vector field `→H` with `<dH, v> = σ(v, →H)` for every `v`, i.e.
/// `(dq, dp) = (Hp, -Hq)`.
pub fn hamiltonian_vector_field(g: &HamiltonianGradient) -> Result<TangentToCotangent, GeometryError> {
    check_pair(&g.hq, &g.hp)?;
    check_finite(&g.hq, "Hq")?;
    check_finite(&g.hp, "Hp")?;
    Ok(TangentToCotangent {
        dq: g.hp.clone(),
        dp: -&g.hq,
    })
}

/// Matrix of `σ` on stacked `(dq, dp)` coordinates: `σ(a, b) = aᵀ Ω b`.
pub fn symplectic_matrix(n: usize) -> DMatrix<f64> {
    let mut omega = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        // dp_i(a) dq_i(b) - dp_i(b) dq_i(a)
        omega[(n + i, i)] = 1.0;
        omega[(i, n + i)] = -1.0;
    }
    omega
}

/// Gram matrix `G_ij = σ(col_i, col_j)` of the columns of a `2n × k` matrix.
pub fn symplectic_gram(cols: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cols.nrows() / 2;
    cols.transpose() * symplectic_matrix(n) * cols
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tv(dq: &[f64], dp: &[f64]) -> TangentToCotangent {
        TangentToCotangent::from_slices(dq, dp).unwrap()
    }

    #[test]
    fn liouville_examples() {
        let ell = CotangentPoint::from_slices(&[0.0], &[0.0]).unwrap();
        assert_eq!(liouville_pairing(&ell, &tv(&[1.0], &[0.0])).unwrap(), 0.0);
        let ell = CotangentPoint::from_slices(&[3.0], &[2.0]).unwrap();
        assert_eq!(liouville_pairing(&ell, &tv(&[5.0], &[7.0])).unwrap(), 10.0);
        let ell = CotangentPoint::from_slices(&[0.0, 0.0], &[1.0, -1.0]).unwrap();
        assert_eq!(liouville_pairing(&ell, &tv(&[1.0, 1.0], &[9.0, 9.0])).unwrap(), 0.0);
    }

    #[test]
    fn symplectic_examples() {
        assert_eq!(symplectic_form(&tv(&[1.0], &[0.0]), &tv(&[0.0], &[1.0])).unwrap(), -1.0);
        let v = tv(&[2.0], &[3.0]);
        assert_eq!(symplectic_form(&v, &v).unwrap(), 0.0);
        let v1 = tv(&[1.0, 0.0], &[0.0, 2.0]);
        let v2 = tv(&[0.0, 1.0], &[1.0, 0.0]);
        assert_eq!(symplectic_form(&v1, &v2).unwrap(), 1.0);
    }

    #[test]
    fn hamiltonian_field_examples() {
        let g = HamiltonianGradient::from_slices(&[0.0], &[0.0]).unwrap();
        assert_eq!(hamiltonian_vector_field(&g).unwrap(), tv(&[0.0], &[0.0]));
        let g = HamiltonianGradient::from_slices(&[1.0], &[2.0]).unwrap();
        assert_eq!(hamiltonian_vector_field(&g).unwrap(), tv(&[2.0], &[-1.0]));
        // H = p^2/2 at (0, 0.5)
        let g = HamiltonianGradient::from_slices(&[0.0], &[0.5]).unwrap();
        assert_eq!(hamiltonian_vector_field(&g).unwrap(), tv(&[0.5], &[0.0]));
    }

    #[test]
    fn dimension_errors() {
        let ell = CotangentPoint::from_slices(&[0.0], &[1.0]).unwrap();
        assert!(matches!(
            liouville_pairing(&ell, &tv(&[1.0, 2.0], &[0.0, 0.0])),
            Err(GeometryError::DimensionMismatch { .. })
        ));
        assert!(symplectic_form(&tv(&[1.0], &[0.0]), &tv(&[1.0, 0.0], &[0.0, 0.0])).is_err());
        assert!(CotangentPoint::from_slices(&[1.0, 2.0], &[1.0]).is_err());
        assert!(CotangentPoint::from_slices(&[], &[]).is_err());
        assert!(CotangentPoint::from_slices(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn matrix_form_agrees() {
        let v1 = tv(&[1.0, -2.0], &[0.5, 3.0]);
        let v2 = tv(&[0.3, 4.0], &[-1.0, 2.0]);
        let direct = symplectic_form(&v1, &v2).unwrap();
        let via = (v1.to_vector().transpose() * symplectic_matrix(2) * v2.to_vector())[(0, 0)];
        assert!((direct - via).abs() < 1e-14);
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn antisymmetry(a in vec_strategy(6), b in vec_strategy(6)) {
            let v1 = tv(&a[..3], &a[3..]);
            let v2 = tv(&b[..3], &b[3..]);
            let s12 = symplectic_form(&v1, &v2).unwrap();
            let s21 = symplectic_form(&v2, &v1).unwrap();
            prop_assert!((s12 + s21).abs() <= 1e-12 * (1.0 + s12.abs()));
        }

        #[test]
        fn defining_identity(g in vec_strategy(4), v in vec_strategy(4)) {
            let grad = HamiltonianGradient::from_slices(&g[..2], &g[2..]).unwrap();
            let v = tv(&v[..2], &v[2..]);
            let field = hamiltonian_vector_field(&grad).unwrap();
            let lhs = grad.apply(&v).unwrap();
            let rhs = symplectic_form(&v, &field).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }

        #[test]
        fn nondegenerate(a in vec_strategy(4)) {
            let v1 = tv(&a[..2], &a[2..]);
            prop_assume!(v1.norm() > 1e-6);
            let found = (0..4).any(|k| {
                let mut e = DVector::zeros(4);
                e[k] = 1.0;
                let v2 = TangentToCotangent::from_vector(&e, 2);
                symplectic_form(&v1, &v2).unwrap() != 0.0
            });
            prop_assert!(found);
        }
    }
}
