//! Analytic eigendecomposition of symmetric 3x3 matrices via the
//! trigonometric (Cardano-form) method, with robust eigenvector recovery
//! including degenerate (repeated-eigenvalue) inputs.

/// Eigenvalues in descending order with matching orthonormal eigenvectors
/// (`vectors[i]` belongs to `values[i]`).
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub values: [f64; 3],
    pub vectors: [[f64; 3]; 3],
}

impl EigenSystem {
    /// `V diag(values) V^T`, for reconstruction checks.
    pub fn reconstruct(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (k, v) in self.vectors.iter().enumerate() {
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += self.values[k] * v[i] * v[j];
                }
            }
        }
        m
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(&a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Any unit vector orthogonal to `v` (assumes `v` is unit).
fn any_orthogonal(v: &[f64; 3]) -> [f64; 3] {
    // cross with the axis least aligned with v
    let axis = if v[0].abs() <= v[1].abs() && v[0].abs() <= v[2].abs() {
        [1.0, 0.0, 0.0]
    } else if v[1].abs() <= v[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    normalize(cross(v, &axis))
}

/// Eigenvalues of a symmetric 3x3 in descending order (trigonometric form).
pub fn eigenvalues_symmetric(a: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    if p1 == 0.0 {
        let mut d = [a[0][0], a[1][1], a[2][2]];
        d.sort_by(|x, y| y.partial_cmp(x).unwrap());
        return d;
    }
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    // B = (A - qI)/p
    let b = [
        [(a[0][0] - q) / p, a[0][1] / p, a[0][2] / p],
        [a[0][1] / p, (a[1][1] - q) / p, a[1][2] / p],
        [a[0][2] / p, a[1][2] / p, (a[2][2] - q) / p],
    ];
    let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let l2 = 3.0 * q - l1 - l3;
    [l1, l2, l3] // cos ordering already gives l1 >= l2 >= l3
}

/// Best eigenvector for eigenvalue `lambda`: the largest cross product of
/// two rows of `A - lambda I` (their common perpendicular). Returns `None`
/// when every cross product is negligible, i.e. the eigenvalue is repeated.
fn eigenvector_for(a: &[[f64; 3]; 3], lambda: f64, scale: f64) -> Option<[f64; 3]> {
    let m = [
        [a[0][0] - lambda, a[0][1], a[0][2]],
        [a[0][1], a[1][1] - lambda, a[1][2]],
        [a[0][2], a[1][2], a[2][2] - lambda],
    ];
    let candidates = [
        cross(&m[0], &m[1]),
        cross(&m[0], &m[2]),
        cross(&m[1], &m[2]),
    ];
    let best = candidates
        .into_iter()
        .max_by(|x, y| dot(x, x).partial_cmp(&dot(y, y)).unwrap())
        .unwrap();
    let n = norm(&best);
    // rows scale like `scale`, cross products like `scale^2`
    if n <= 1e-12 * scale * scale {
        None
    } else {
        Some([best[0] / n, best[1] / n, best[2] / n])
    }
}

/// Full eigensystem of a symmetric 3x3: descending eigenvalues and an
/// orthonormal set of eigenvectors, exact handling of repeated eigenvalues.
pub fn eig3_symmetric(a: &[[f64; 3]; 3]) -> EigenSystem {
    let values = eigenvalues_symmetric(a);
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-300);

    let v0 = eigenvector_for(a, values[0], scale);
    let v2 = eigenvector_for(a, values[2], scale);
    let vectors = match (v0, v2) {
        (Some(v0), Some(v2)) => {
            // re-orthogonalize against roundoff, then complete the basis
            let v2 = {
                let proj = dot(&v2, &v0);
                normalize([
                    v2[0] - proj * v0[0],
                    v2[1] - proj * v0[1],
                    v2[2] - proj * v0[2],
                ])
            };
            let v1 = cross(&v2, &v0);
            [v0, normalize(v1), v2]
        }
        (Some(v0), None) => {
            // values[1] == values[2]: complement of v0
            let v1 = any_orthogonal(&v0);
            let v2 = cross(&v0, &v1);
            [v0, v1, normalize(v2)]
        }
        (None, Some(v2)) => {
            // values[0] == values[1]: complement of v2
            let v0 = any_orthogonal(&v2);
            let v1 = cross(&v2, &v0);
            [v0, normalize(v1), v2]
        }
        (None, None) => {
            // spherical: any orthonormal basis works
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        }
    };
    EigenSystem { values, vectors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;
    use proptest::prelude::*;

    /// Independent oracle: shifted QR iteration with Givens rotations.
    /// Wilkinson-shifted, deflating once the off-diagonal dies.
    fn qr_eigenvalues(a: &[[f64; 3]; 3]) -> [f64; 3] {
        let mut m = *a;
        // tridiagonal form is unnecessary at 3x3; iterate directly until the
        // last row deflates, then finish the leading 2x2 block analytically
        for _ in 0..500 {
            if m[2][0].abs() + m[2][1].abs() < 1e-15 {
                break;
            }
            // Wilkinson shift from the trailing 2x2 block
            let d = (m[1][1] - m[2][2]) / 2.0;
            let sign = if d >= 0.0 { 1.0 } else { -1.0 };
            let denom = d.abs() + (d * d + m[1][2] * m[1][2]).sqrt();
            let mu = if denom == 0.0 {
                m[2][2]
            } else {
                m[2][2] - sign * m[1][2] * m[1][2] / denom
            };
            for i in 0..3 {
                m[i][i] -= mu;
            }
            // QR by Givens rotations, then RQ
            let (q, r) = givens_qr(&m);
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] = (0..3).map(|k| r[i][k] * q[k][j]).sum();
                }
            }
            for i in 0..3 {
                m[i][i] += mu;
            }
        }
        let (p, q2, b) = (m[0][0], m[1][1], m[0][1]);
        let disc = ((p - q2) * (p - q2) + 4.0 * b * b).sqrt();
        let mut d = [(p + q2 + disc) / 2.0, (p + q2 - disc) / 2.0, m[2][2]];
        d.sort_by(|x, y| y.partial_cmp(x).unwrap());
        d
    }

    fn givens_qr(a: &[[f64; 3]; 3]) -> ([[f64; 3]; 3], [[f64; 3]; 3]) {
        let mut r = *a;
        let mut q = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for (col, row) in [(0, 1), (0, 2), (1, 2)] {
            let (x, y) = (r[col][col], r[row][col]);
            let h = (x * x + y * y).sqrt();
            if h == 0.0 {
                continue;
            }
            let (c, s) = (x / h, y / h);
            for j in 0..3 {
                let (rc, rr) = (r[col][j], r[row][j]);
                r[col][j] = c * rc + s * rr;
                r[row][j] = -s * rc + c * rr;
                let (qc, qr_) = (q[j][col], q[j][row]);
                q[j][col] = c * qc + s * qr_;
                q[j][row] = -s * qc + c * qr_;
            }
        }
        (q, r)
    }

    fn random_symmetric(rng: &mut SeedRng) -> [[f64; 3]; 3] {
        let v: Vec<f64> = (0..6).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        [
            [v[0], v[3], v[4]],
            [v[3], v[1], v[5]],
            [v[4], v[5], v[2]],
        ]
    }

    fn assert_valid_eigensystem(a: &[[f64; 3]; 3], e: &EigenSystem) {
        assert!(e.values[0] >= e.values[1] && e.values[1] >= e.values[2]);
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(&e.vectors[i], &e.vectors[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-8, "v{i}.v{j} = {d}");
            }
        }
        let rec = e.reconstruct();
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (rec[i][j] - a[i][j]).abs() < 1e-10,
                    "reconstruction [{i}][{j}]: {} vs {}",
                    rec[i][j],
                    a[i][j]
                );
            }
        }
    }

    #[test]
    fn diagonal_matrix_returns_sorted_diagonal() {
        let a = [[0.3, 0.0, 0.0], [0.0, 1.7, 0.0], [0.0, 0.0, 0.3]];
        let e = eig3_symmetric(&a);
        assert_eq!(e.values, [1.7, 0.3, 0.3]);
        assert_valid_eigensystem(&a, &e);
        // leading eigenvector must be +-y
        assert!((e.vectors[0][1].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_is_fully_degenerate() {
        let a = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let e = eig3_symmetric(&a);
        assert_eq!(e.values, [1.0, 1.0, 1.0]);
        assert_valid_eigensystem(&a, &e);
    }

    #[test]
    fn repeated_pair_with_offdiagonal_coupling() {
        // eigenvalues 2, 2, -1 (rank-one update of the identity)
        let u = normalize([1.0, 2.0, -2.0]);
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = 2.0 * ((i == j) as i32 as f64) - 3.0 * u[i] * u[j];
            }
        }
        let e = eig3_symmetric(&a);
        assert!((e.values[0] - 2.0).abs() < 1e-12);
        assert!((e.values[1] - 2.0).abs() < 1e-12);
        assert!((e.values[2] + 1.0).abs() < 1e-12);
        assert_valid_eigensystem(&a, &e);
        // trailing eigenvector is +-u
        assert!(dot(&e.vectors[2], &u).abs() > 1.0 - 1e-10);
    }

    #[test]
    fn matches_qr_iteration_oracle_on_random_inputs() {
        let mut rng = SeedRng::new(0xe16);
        for _ in 0..500 {
            let a = random_symmetric(&mut rng);
            let trig = eigenvalues_symmetric(&a);
            let qr = qr_eigenvalues(&a);
            for i in 0..3 {
                assert!(
                    (trig[i] - qr[i]).abs() < 1e-10,
                    "trig {trig:?} vs qr {qr:?} for {a:?}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn random_symmetric_eigensystems_are_valid(seed in 0u64..10_000) {
            let mut rng = SeedRng::new(seed);
            let a = random_symmetric(&mut rng);
            let e = eig3_symmetric(&a);
            assert_valid_eigensystem(&a, &e);
        }
    }
}
