//! Delta operator `I − β·k·kᵀ`, Householder reflectors and the small dense
//! eigen/singular-value routines used to check their spectra.

use crate::error::{MgtError, Result};
use crate::tensor::Tensor;

/// Tolerance on `‖k‖` below which a direction is considered zero.
const MIN_DIRECTION_NORM: f64 = 1e-12;
/// Convergence threshold on (scaled) off-diagonal mass for Jacobi sweeps.
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Gate `β` and unit direction `k` of a Delta operator.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSpec {
    beta: f64,
    k: Vec<f64>,
}

impl DeltaSpec {
    /// Normalizes `k` to unit length. `β` may be any real number.
    pub fn new(beta: f64, k: &[f64]) -> Result<Self> {
        if k.len() < 2 {
            return Err(MgtError::InvalidConfig(format!(
                "delta operator needs dimension >= 2, got {}",
                k.len()
            )));
        }
        if !beta.is_finite() || k.iter().any(|x| !x.is_finite()) {
            return Err(MgtError::DegenerateInput(
                "non-finite delta parameters".into(),
            ));
        }
        let norm = l2_norm(k);
        if norm < MIN_DIRECTION_NORM {
            return Err(MgtError::DegenerateInput(format!(
                "direction norm {norm:e} is too small to normalize"
            )));
        }
        Ok(Self {
            beta,
            k: k.iter().map(|x| x / norm).collect(),
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn direction(&self) -> &[f64] {
        &self.k
    }

    pub fn dim(&self) -> usize {
        self.k.len()
    }
}

/// `I − β·k·kᵀ`.
pub fn delta_matrix(spec: &DeltaSpec) -> Tensor {
    let d = spec.dim();
    let k = spec.direction();
    let mut a = Tensor::eye(d);
    for i in 0..d {
        for j in 0..d {
            let v = a.at(i, j) - spec.beta * k[i] * k[j];
            a.set(i, j, v);
        }
    }
    a
}

/// Closed-form spectrum of a Delta operator.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSpectrum {
    /// `d − 1` ones and `1 − β`, sorted descending.
    pub eigenvalues: Vec<f64>,
    pub determinant: f64,
}

pub fn delta_spectrum(spec: &DeltaSpec) -> DeltaSpectrum {
    let mut eigenvalues = vec![1.0; spec.dim() - 1];
    eigenvalues.push(1.0 - spec.beta);
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    DeltaSpectrum {
        eigenvalues,
        determinant: 1.0 - spec.beta,
    }
}

/// Errors of the numerically solved spectrum against [`delta_spectrum`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectrumDeviation {
    pub max_eigenvalue_error: f64,
    /// Error of the eigenvalue product.
    pub eigen_determinant_error: f64,
    /// Error of the LU determinant.
    pub lu_determinant_error: f64,
}

impl SpectrumDeviation {
    pub fn max(&self) -> f64 {
        self.max_eigenvalue_error
            .max(self.eigen_determinant_error)
            .max(self.lu_determinant_error)
    }
}

/// Eigensolves `delta_matrix(spec)` and compares it to the closed form.
pub fn check_delta_spectrum(spec: &DeltaSpec) -> Result<SpectrumDeviation> {
    let predicted = delta_spectrum(spec);
    let a = delta_matrix(spec);
    let solved = symmetric_eigenvalues(&a)?;
    let max_eigenvalue_error = solved
        .iter()
        .zip(&predicted.eigenvalues)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let eig_det: f64 = solved.iter().product();
    Ok(SpectrumDeviation {
        max_eigenvalue_error,
        eigen_determinant_error: (eig_det - predicted.determinant).abs(),
        lu_determinant_error: (determinant(&a)? - predicted.determinant).abs(),
    })
}

/// `I − 2·k·kᵀ/‖k‖²` for any nonzero `k`.
pub fn householder_matrix(k: &[f64]) -> Result<Tensor> {
    let norm_sq: f64 = k.iter().map(|x| x * x).sum();
    if norm_sq.sqrt() < MIN_DIRECTION_NORM {
        return Err(MgtError::DegenerateInput(
            "householder direction is the zero vector".into(),
        ));
    }
    let d = k.len();
    let mut h = Tensor::eye(d);
    for i in 0..d {
        for j in 0..d {
            let v = h.at(i, j) - 2.0 * k[i] * k[j] / norm_sq;
            h.set(i, j, v);
        }
    }
    Ok(h)
}

/// Delta residual block `X + β·k·(vᵀ − kᵀX)` acting on `X ∈ R^{d×d_v}`.
///
/// The matrix form `A·X + β·k·vᵀ` is evaluated alongside and the two must
/// agree; a disagreement is reported as [`MgtError::InternalConsistency`].
/// `x` may also be a length-`d` vector (the `d_v = 1` case), in which case
/// `v` holds a single value.
pub fn apply_delta_block(x: &Tensor, spec: &DeltaSpec, v: &Tensor) -> Result<Tensor> {
    let d = spec.dim();
    let (rows, cols, is_vector) = match x.shape() {
        [n] => (*n, 1, true),
        [r, c] => (*r, *c, false),
        other => {
            return Err(MgtError::Contract(format!(
                "delta block state must be a vector or matrix, got {other:?}"
            )))
        }
    };
    if rows != d || v.len() != cols {
        return Err(MgtError::Dimension {
            op: "apply_delta_block",
            left: x.shape().to_vec(),
            right: vec![d, v.len()],
        });
    }
    let x2 = Tensor::new(vec![rows, cols], x.data().to_vec())?;
    let k = spec.direction();
    let beta = spec.beta();
    let vd = v.data();

    let mut matrix_form = delta_matrix(spec).matmul(&x2)?;
    for i in 0..d {
        for j in 0..cols {
            let e = matrix_form.at(i, j) + beta * k[i] * vd[j];
            matrix_form.set(i, j, e);
        }
    }

    // kᵀX, one entry per column
    let projection: Vec<f64> = (0..cols)
        .map(|j| (0..d).map(|i| k[i] * x2.at(i, j)).sum())
        .collect();
    let mut additive = x2;
    for i in 0..d {
        for j in 0..cols {
            let e = additive.at(i, j) + beta * k[i] * (vd[j] - projection[j]);
            additive.set(i, j, e);
        }
    }

    let diff = additive.max_abs_diff(&matrix_form)?;
    let scale = 1.0_f64.max(additive.max_abs()).max(matrix_form.max_abs());
    if !(diff <= 1e-12 * scale) {
        return Err(MgtError::InternalConsistency {
            what: "delta block additive vs matrix form",
            max_diff: diff,
        });
    }
    if is_vector {
        additive.reshape(&[rows])
    } else {
        Ok(additive)
    }
}

/// Whether `I − β·k·kᵀ` is orthogonal, i.e. `|1 − β| = 1`.
pub fn orthogonality_check(beta: f64) -> bool {
    ((1.0 - beta).abs() - 1.0).abs() <= 1e-12
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted descending.
pub fn symmetric_eigenvalues(a: &Tensor) -> Result<Vec<f64>> {
    let (n, n2) = a.dims2()?;
    if n != n2 {
        return Err(MgtError::Dimension {
            op: "symmetric_eigenvalues",
            left: a.shape().to_vec(),
            right: vec![n2, n],
        });
    }
    let mut m = a.data().to_vec();
    let asym = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (m[i * n + j] - m[j * n + i]).abs())
        .fold(0.0, f64::max);
    if asym > 1e-10 * 1.0_f64.max(a.max_abs()) {
        return Err(MgtError::Contract(format!(
            "matrix is not symmetric (asymmetry {asym:e})"
        )));
    }
    let scale = 1.0_f64.max(a.frobenius_norm());
    let off = |m: &[f64]| {
        let mut s = 0.0_f64;
        for i in 0..n {
            for j in i + 1..n {
                s = s.max(m[i * n + j].abs());
            }
        }
        s
    };
    let mut sweeps = 0;
    loop {
        let residual = off(&m);
        if residual < JACOBI_TOL * scale {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(MgtError::NonConvergence { sweeps, residual });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let g = 100.0 * apq.abs();
                // Negligible relative to both diagonal entries: drop it.
                if sweeps > 4 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    continue;
                }
                let h = aqq - app;
                let t = if h.abs() + g == h.abs() {
                    apq / h
                } else {
                    let theta = 0.5 * h / apq;
                    let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let grp = m[r * n + p];
                    let hrq = m[r * n + q];
                    let new_p = grp - s * (hrq + grp * tau);
                    let new_q = hrq + s * (grp - hrq * tau);
                    m[r * n + p] = new_p;
                    m[p * n + r] = new_p;
                    m[r * n + q] = new_q;
                    m[q * n + r] = new_q;
                }
            }
        }
    }
    let mut values: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// Determinant by LU factorization with partial pivoting.
pub fn determinant(a: &Tensor) -> Result<f64> {
    let (n, n2) = a.dims2()?;
    if n != n2 {
        return Err(MgtError::Dimension {
            op: "determinant",
            left: a.shape().to_vec(),
            right: vec![n2, n],
        });
    }
    let mut m = a.data().to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if m[pivot * n + col] == 0.0 {
            return Ok(0.0);
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            det = -det;
        }
        let p = m[col * n + col];
        det *= p;
        for i in col + 1..n {
            let f = m[i * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m[i * n + j] -= f * m[col * n + j];
            }
        }
    }
    Ok(det)
}

/// Singular values of an `S×D` matrix, non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct SingularSpectrum {
    pub values: Vec<f64>,
    pub source_shape: (usize, usize),
}

/// Singular values by cyclic one-sided Jacobi rotations.
///
/// The rotations diagonalize the Gram matrix of the `min(S, D)` shorter-side
/// vectors without forming it, which keeps small singular values accurate
/// relative to the largest. Sweeps stop once every pair's normalized inner
/// product is below `1e-12`.
pub fn singular_values(x: &Tensor) -> Result<SingularSpectrum> {
    let (s, d) = x.dims2()?;
    if !x.all_finite() {
        return Err(MgtError::DegenerateInput(
            "matrix has non-finite entries".into(),
        ));
    }
    // Rows of `work` are the vectors to orthogonalize.
    let (n, len, mut work) = if s <= d {
        (s, d, x.data().to_vec())
    } else {
        (d, s, x.transpose()?.into_data())
    };
    let mut sweeps = 0;
    loop {
        let mut residual = 0.0_f64;
        for p in 0..n {
            for q in p + 1..n {
                let (head, tail) = work.split_at_mut(q * len);
                let a = &mut head[p * len..(p + 1) * len];
                let b = &mut tail[..len];
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for (x, y) in a.iter().zip(b.iter()) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let cosine = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(cosine);
                if cosine < f64::EPSILON {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                for (x, y) in a.iter_mut().zip(b.iter_mut()) {
                    let (xv, yv) = (*x, *y);
                    *x = c * xv - sn * yv;
                    *y = sn * xv + c * yv;
                }
            }
        }
        if residual < JACOBI_TOL {
            break;
        }
        sweeps += 1;
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(MgtError::NonConvergence { sweeps, residual });
        }
    }
    let mut values: Vec<f64> = work.chunks(len).map(l2_norm).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(SingularSpectrum {
        values,
        source_shape: (s, d),
    })
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.max_abs_diff(b).unwrap() <= tol
    }

    #[test]
    fn zero_beta_is_identity() {
        let spec = DeltaSpec::new(0.0, &[0.3, -0.2, 0.9]).unwrap();
        assert_eq!(delta_matrix(&spec), Tensor::eye(3));
    }

    #[test]
    fn beta_two_flips_first_axis() {
        let spec = DeltaSpec::new(2.0, &[1.0, 0.0]).unwrap();
        assert_eq!(
            delta_matrix(&spec),
            Tensor::from_rows(&[&[-1.0, 0.0], &[0.0, 1.0]])
        );
    }

    #[test]
    fn beta_one_diagonal_projection() {
        let spec = DeltaSpec::new(1.0, &[1.0, 1.0]).unwrap();
        let expected = Tensor::from_rows(&[&[0.5, -0.5], &[-0.5, 0.5]]);
        assert!(close(&delta_matrix(&spec), &expected, 1e-15));
    }

    #[test]
    fn construction_normalizes_and_rejects_zero() {
        let spec = DeltaSpec::new(1.0, &[3.0, 4.0]).unwrap();
        assert!((l2_norm(spec.direction()) - 1.0).abs() < 1e-12);
        assert!(matches!(
            DeltaSpec::new(1.0, &[0.0, 1e-14]),
            Err(MgtError::DegenerateInput(_))
        ));
        assert!(matches!(
            DeltaSpec::new(1.0, &[1.0]),
            Err(MgtError::InvalidConfig(_))
        ));
    }

    #[test]
    fn closed_form_spectra() {
        let k = [0.2, -0.7, 0.4];
        let s = delta_spectrum(&DeltaSpec::new(1.0, &k).unwrap());
        assert_eq!(s.eigenvalues, vec![1.0, 1.0, 0.0]);
        assert_eq!(s.determinant, 0.0);
        let s = delta_spectrum(&DeltaSpec::new(2.0, &k).unwrap());
        assert_eq!(s.determinant, -1.0);
        let s = delta_spectrum(&DeltaSpec::new(0.25, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        assert_eq!(s.determinant, 0.75);
        assert_eq!(s.eigenvalues.len(), 5);
    }

    #[test]
    fn numeric_spectrum_matches_closed_form() {
        for beta in [-1.0, 0.0, 0.25, 1.0, 2.0, 2.5] {
            let spec = DeltaSpec::new(beta, &[0.1, -0.5, 0.3, 0.8, -0.2]).unwrap();
            let dev = check_delta_spectrum(&spec).unwrap();
            assert!(dev.max() < 1e-8, "beta {beta}: {dev:?}");
        }
    }

    #[test]
    fn householder_flips_coordinate() {
        let h = householder_matrix(&[0.0, 1.0, 0.0]).unwrap();
        let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(h.matmul(&x).unwrap().data(), &[1.0, -2.0, 3.0]);
        assert!(matches!(
            householder_matrix(&[0.0, 0.0]),
            Err(MgtError::DegenerateInput(_))
        ));
    }

    #[test]
    fn householder_is_delta_at_beta_two() {
        let k = [1.0, -2.0, 0.5, 3.0];
        let h = householder_matrix(&k).unwrap();
        let a = delta_matrix(&DeltaSpec::new(2.0, &k).unwrap());
        assert!(close(&h, &a, 1e-15));
    }

    #[test]
    fn delta_block_identity_regime() {
        let spec = DeltaSpec::new(0.0, &[0.6, 0.8]).unwrap();
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let v = Tensor::vector(vec![9.0, 9.0, 9.0]);
        assert_eq!(apply_delta_block(&x, &spec, &v).unwrap(), x);
    }

    #[test]
    fn delta_block_vector_case() {
        let spec = DeltaSpec::new(1.0, &[1.0, 0.0]).unwrap();
        let x = Tensor::vector(vec![3.0, 4.0]);
        let out = apply_delta_block(&x, &spec, &Tensor::scalar(7.0)).unwrap();
        assert_eq!(out.data(), &[7.0, 4.0]);
        assert_eq!(out.shape(), &[2]);
    }

    #[test]
    fn delta_block_shape_errors() {
        let spec = DeltaSpec::new(1.0, &[1.0, 0.0]).unwrap();
        let x = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            apply_delta_block(&x, &spec, &Tensor::vector(vec![1.0, 2.0])),
            Err(MgtError::Dimension { .. })
        ));
    }

    #[test]
    fn orthogonality_boundaries() {
        assert!(orthogonality_check(0.0));
        assert!(orthogonality_check(2.0));
        assert!(!orthogonality_check(1.0));
        assert!(!orthogonality_check(1.999999));
        assert!(!orthogonality_check(-0.5));
    }

    #[test]
    fn singular_values_identity_and_rank_one() {
        let sv = singular_values(&Tensor::eye(3)).unwrap();
        assert_eq!(sv.values, vec![1.0, 1.0, 1.0]);

        let u = [1.0, 2.0, -2.0];
        let v = [3.0, 0.0, 4.0, 0.0];
        let mut x = Tensor::zeros(&[3, 4]);
        for i in 0..3 {
            for j in 0..4 {
                x.set(i, j, u[i] * v[j]);
            }
        }
        let sv = singular_values(&x).unwrap();
        assert!((sv.values[0] - 15.0).abs() < 1e-12);
        assert!(sv.values[1..].iter().all(|&s| s < 1e-12 * 15.0));
        assert_eq!(sv.source_shape, (3, 4));
    }

    #[test]
    fn tall_and_wide_agree() {
        let x = Tensor::from_rows(&[
            &[1.0, 2.0],
            &[3.0, -1.0],
            &[0.5, 0.25],
            &[-2.0, 1.0],
            &[0.0, 4.0],
        ]);
        let a = singular_values(&x).unwrap();
        let b = singular_values(&x.transpose().unwrap()).unwrap();
        assert_eq!(a.values.len(), 2);
        for (p, q) in a.values.iter().zip(&b.values) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn determinant_small_cases() {
        assert_eq!(determinant(&Tensor::eye(4)).unwrap(), 1.0);
        let a = Tensor::from_rows(&[&[0.0, 2.0], &[3.0, 1.0]]);
        assert!((determinant(&a).unwrap() + 6.0).abs() < 1e-15);
    }

    #[test]
    fn jacobi_rejects_asymmetric() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(
            symmetric_eigenvalues(&a),
            Err(MgtError::Contract(_))
        ));
    }
}
