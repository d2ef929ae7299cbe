//! Continuous 6D rotation encoding: two matrix columns recovered by Gram–Schmidt.

use nalgebra::{Matrix3, Matrix3x6, Vector3};

use crate::error::{Error, Result};

const MIN_NORM: f64 = 1e-8;

/// Rotation matrix from the 6D encoding `(a1, a2)`.
pub fn orthonormalize_rot6d(rot6d: &[f64; 6]) -> Result<Matrix3<f64>> {
    Ok(rot6d_with_jacobian(rot6d)?.0)
}

/// The inverse direction: the first two columns of `m`.
pub fn rot6d_from_matrix(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation plus the derivative of each column `b_c` with respect to the six
/// encoding entries.
pub(crate) fn rot6d_with_jacobian(
    rot6d: &[f64; 6],
) -> Result<(Matrix3<f64>, [Matrix3x6<f64>; 3])> {
    if !rot6d.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rot6d".into()));
    }
    let a1 = Vector3::new(rot6d[0], rot6d[1], rot6d[2]);
    let a2 = Vector3::new(rot6d[3], rot6d[4], rot6d[5]);
    let n1 = a1.norm();
    if n1 <= MIN_NORM {
        return Err(Error::DegenerateRotation(format!(
            "first column norm {n1:e} is too small"
        )));
    }
    let b1 = a1 / n1;
    let proj = a2.dot(&b1);
    let u = a2 - b1 * proj;
    let nu = u.norm();
    if nu <= MIN_NORM {
        return Err(Error::DegenerateRotation(
            "columns are (nearly) colinear".into(),
        ));
    }
    let b2 = u / nu;
    let b3 = b1.cross(&b2);
    let rot = Matrix3::from_columns(&[b1, b2, b3]);

    let eye = Matrix3::identity();
    let db1_da1 = (eye - b1 * b1.transpose()) / n1;
    // u = a2 - (a2·b1) b1
    let du_db1 = -(b1 * a2.transpose() + eye * proj);
    let du_da1 = du_db1 * db1_da1;
    let du_da2 = eye - b1 * b1.transpose();
    let db2_du = (eye - b2 * b2.transpose()) / nu;
    let db2_da1 = db2_du * du_da1;
    let db2_da2 = db2_du * du_da2;
    // b3 = b1 × b2  ⇒  db3 = -[b2]× db1 + [b1]× db2
    let db3_da1 = -skew(&b2) * db1_da1 + skew(&b1) * db2_da1;
    let db3_da2 = skew(&b1) * db2_da2;

    let mut d = [Matrix3x6::zeros(); 3];
    d[0].fixed_view_mut::<3, 3>(0, 0).copy_from(&db1_da1);
    d[1].fixed_view_mut::<3, 3>(0, 0).copy_from(&db2_da1);
    d[1].fixed_view_mut::<3, 3>(0, 3).copy_from(&db2_da2);
    d[2].fixed_view_mut::<3, 3>(0, 0).copy_from(&db3_da1);
    d[2].fixed_view_mut::<3, 3>(0, 3).copy_from(&db3_da2);
    Ok((rot, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_and_scaled_inputs_give_identity() {
        assert_eq!(
            orthonormalize_rot6d(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
            Matrix3::identity()
        );
        assert_eq!(
            orthonormalize_rot6d(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(),
            Matrix3::identity()
        );
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(orthonormalize_rot6d(&[0.0, 0.0, 1e-9, 0.0, 1.0, 0.0]).is_err());
        assert!(orthonormalize_rot6d(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_err());
        assert!(orthonormalize_rot6d(&[f64::NAN, 0.0, 0.0, 0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn column_jacobian_matches_central_differences() {
        let r = [0.3, -0.7, 0.4, 0.9, 0.2, -0.5];
        let (_, d) = rot6d_with_jacobian(&r).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut rp = r;
            let mut rm = r;
            rp[k] += h;
            rm[k] -= h;
            let fd = (orthonormalize_rot6d(&rp).unwrap() - orthonormalize_rot6d(&rm).unwrap()) / (2.0 * h);
            for c in 0..3 {
                let err = (fd.column(c) - d[c].column(k)).norm();
                assert!(err < 1e-8, "col {c} param {k}: {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn output_is_a_proper_rotation(v in proptest::array::uniform6(-3.0f64..3.0)) {
            let a1 = Vector3::new(v[0], v[1], v[2]);
            let a2 = Vector3::new(v[3], v[4], v[5]);
            prop_assume!(a1.norm() > 1e-3 && a1.cross(&a2).norm() > 1e-3);
            let r = orthonormalize_rot6d(&v).unwrap();
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            let back = rot6d_from_matrix(&r);
            prop_assert!((orthonormalize_rot6d(&back).unwrap() - r).abs().max() < 1e-12);
        }
    }
}
