//! Pure geometry: BEV contraction, log-linear depth bins, pinhole lifting,
//! rigid transforms and Fourier encodings.
//!
//! Everything here is a pure function of immutable inputs.

mod camera;
mod contraction;
mod depth;
mod fourier;
mod transform;

pub use camera::CameraModel;
pub use contraction::ContractionParams;
pub use depth::DepthBinning;
pub use fourier::FourierConfig;
pub use transform::RigidTransform;

use crate::Real;

/// A spatio-temporal query `[x, y, z, t]`: metres in the reference ego frame
/// and seconds relative to the reference timestep.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Query4<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub t: T,
}

impl<T: Real> Query4<T> {
    pub fn new(x: T, y: T, z: T, t: T) -> Self {
        Self { x, y, z, t }
    }

    pub fn from_point(p: [T; 3], t: T) -> Self {
        Self::new(p[0], p[1], p[2], t)
    }

    pub fn position(&self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.t.is_finite()
    }

    pub fn cast<U: Real>(&self) -> Query4<U> {
        Query4 {
            x: U::lit(self.x.as_f64()),
            y: U::lit(self.y.as_f64()),
            z: U::lit(self.z.as_f64()),
            t: U::lit(self.t.as_f64()),
        }
    }
}

#[inline]
pub fn sub3<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add3<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale3<T: Real>(a: [T; 3], s: T) -> [T; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm3<T: Real>(a: [T; 3]) -> T {
    dot3(a, a).sqrt()
}

/// Bilinear footprint of a point on a `width × height` grid of cells tiling
/// `[-1, 1]²`, with cell `(i, j)` centred at `-1 + (i + 0.5)·2/width`.
///
/// Returns the four `(column, row, weight)` triples. Coordinates past the
/// outermost cell centres are clamped, so all mass lands in boundary cells and
/// the weights always sum to one.
pub fn bilinear_footprint<T: Real>(
    cx: T,
    cy: T,
    width: usize,
    height: usize,
) -> [(usize, usize, T); 4] {
    let (i0, i1, fx) = axis_footprint(cx, width);
    let (j0, j1, fy) = axis_footprint(cy, height);
    let one = T::one();
    [
        (i0, j0, (one - fx) * (one - fy)),
        (i1, j0, fx * (one - fy)),
        (i0, j1, (one - fx) * fy),
        (i1, j1, fx * fy),
    ]
}

fn axis_footprint<T: Real>(c: T, n: usize) -> (usize, usize, T) {
    let half = T::lit(0.5);
    let nf = T::from_usize(n).unwrap();
    let max = nf - T::one();
    let mut u = (c + T::one()) * half * nf - half;
    if !(u > T::zero()) {
        u = T::zero();
    }
    if u > max {
        u = max;
    }
    let i0 = u.floor().to_usize().unwrap().min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let f = u - T::from_usize(i0).unwrap();
    (i0, i1, f)
}

/// Centre of cell `i` along an axis of `n` cells over `[-1, 1]`.
pub fn cell_center<T: Real>(i: usize, n: usize) -> T {
    let nf = T::from_usize(n).unwrap();
    -T::one() + (T::from_usize(i).unwrap() + T::lit(0.5)) * T::lit(2.0) / nf
}
