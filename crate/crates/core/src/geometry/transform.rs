use crate::{Error, Real, Result};

/// Rigid transform `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T> {
    pub rotation: [[T; 3]; 3],
    pub translation: [T; 3],
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            translation: [z; 3],
        }
    }

    pub fn from_translation(t: [T; 3]) -> Self {
        Self { translation: t, ..Self::identity() }
    }

    /// Rotation about +z by `yaw` radians, then translation.
    pub fn from_yaw_translation(yaw: T, t: [T; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self {
            rotation: [[c, -s, z], [s, c, z], [z, z, o]],
            translation: t,
        }
    }

    /// Validates that the rotation is orthonormal with determinant +1.
    pub fn new(rotation: [[T; 3]; 3], translation: [T; 3]) -> Result<Self> {
        let tol = T::lit(1e-6);
        for i in 0..3 {
            for j in 0..3 {
                let dot = (0..3).fold(T::zero(), |acc, k| acc + rotation[k][i] * rotation[k][j]);
                let want = if i == j { T::one() } else { T::zero() };
                if (dot - want).abs() > tol {
                    return Err(Error::InvalidArgument("rotation is not orthonormal".into()));
                }
            }
        }
        if (det3(&rotation) - T::one()).abs() > tol {
            return Err(Error::InvalidArgument("rotation determinant is not +1".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn rotate(&self, v: [T; 3]) -> [T; 3] {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let r = self.rotate(p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let inv = Self { rotation: rt, translation: [T::zero(); 3] };
        let t = inv.rotate(self.translation);
        Self { rotation: rt, translation: [-t[0], -t[1], -t[2]] }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let mut rotation = [[T::zero(); 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).fold(T::zero(), |acc, k| {
                    acc + self.rotation[i][k] * other.rotation[k][j]
                });
            }
        }
        Self { rotation, translation: self.apply(other.translation) }
    }
}

pub(crate) fn det3<T: Real>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_composes_to_identity() {
        let a = RigidTransform::from_yaw_translation(0.7f64, [1.0, -2.0, 3.0]);
        let p = [4.0, 5.0, -6.0];
        let back = a.inverse().apply(a.apply(p));
        for k in 0..3 {
            assert!((back[k] - p[k]).abs() < 1e-12);
        }
        let id = a.compose(&a.inverse());
        assert!(RigidTransform::new(id.rotation, id.translation).is_ok());
    }

    #[test]
    fn rejects_reflection() {
        let r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(RigidTransform::new(r, [0.0; 3]).is_err());
    }
}
