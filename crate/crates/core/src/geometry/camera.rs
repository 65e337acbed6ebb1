use super::transform::det3;
use super::RigidTransform;
use crate::{Error, Real, Result};

/// Pinhole camera with a camera→ego extrinsic. The optical axis is +z in the
/// camera frame and "depth" means camera-frame z.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel<T> {
    intrinsics: [[T; 3]; 3],
    intrinsics_inv: [[T; 3]; 3],
    pub extrinsics: RigidTransform<T>,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraModel<T> {
    pub fn new(
        intrinsics: [[T; 3]; 3],
        extrinsics: RigidTransform<T>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        // Re-validate so hand-built extrinsics get the same checks.
        let extrinsics = RigidTransform::new(extrinsics.rotation, extrinsics.translation)?;
        let det = det3(&intrinsics);
        if !(det.abs() > T::lit(1e-12)) {
            return Err(Error::InvalidArgument("intrinsics are not invertible".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image must be non-empty".into()));
        }
        Ok(Self { intrinsics, intrinsics_inv: inv3(&intrinsics, det), extrinsics, width, height })
    }

    /// Standard pinhole with focal lengths and principal point.
    pub fn pinhole(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        extrinsics: RigidTransform<T>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let (z, o) = (T::zero(), T::one());
        Self::new([[fx, z, cx], [z, fy, cy], [z, z, o]], extrinsics, width, height)
    }

    pub fn intrinsics(&self) -> &[[T; 3]; 3] {
        &self.intrinsics
    }

    /// Lifts pixel `(u, v)` at camera-frame depth `depth` into the ego frame.
    pub fn lift_pixel(&self, u: T, v: T, depth: T) -> Result<[T; 3]> {
        let w = T::from_usize(self.width).unwrap();
        let h = T::from_usize(self.height).unwrap();
        if !(u >= T::zero() && u < w && v >= T::zero() && v < h) {
            return Err(Error::InvalidArgument(format!("pixel ({u}, {v}) outside {w}x{h} image")));
        }
        if !(depth > T::zero()) || !depth.is_finite() {
            return Err(Error::InvalidArgument(format!("depth must be positive, got {depth}")));
        }
        let k = &self.intrinsics_inv;
        let ray = [
            k[0][0] * u + k[0][1] * v + k[0][2],
            k[1][0] * u + k[1][1] * v + k[1][2],
            k[2][0] * u + k[2][1] * v + k[2][2],
        ];
        let s = depth / ray[2];
        Ok(self.extrinsics.apply([ray[0] * s, ray[1] * s, depth]))
    }

    /// Projects an ego-frame point to `(u, v, depth)`.
    pub fn project(&self, p: [T; 3]) -> [T; 3] {
        let pc = self.extrinsics.inverse().apply(p);
        let k = &self.intrinsics;
        let x = k[0][0] * pc[0] + k[0][1] * pc[1] + k[0][2] * pc[2];
        let y = k[1][0] * pc[0] + k[1][1] * pc[1] + k[1][2] * pc[2];
        let w = k[2][0] * pc[0] + k[2][1] * pc[1] + k[2][2] * pc[2];
        [x / w, y / w, pc[2]]
    }
}

fn inv3<T: Real>(m: &[[T; 3]; 3], det: T) -> [[T; 3]; 3] {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 1, 2, 2) / det, -c(0, 1, 2, 2) / det, c(0, 1, 1, 2) / det],
        [-c(1, 0, 2, 2) / det, c(0, 0, 2, 2) / det, -c(0, 0, 1, 2) / det],
        [c(1, 0, 2, 1) / det, -c(0, 0, 2, 1) / det, c(0, 0, 1, 1) / det],
    ]
}
