use super::Query4;
use crate::{Error, Real, Result};

/// Axis-aligned BEV contraction around the ego vehicle.
///
/// A coordinate is normalised by the high-resolution half range `k_hr`; inside
/// `|κ̄| ≤ 1` it is scaled linearly by `beta`, outside it is compressed as
/// `sign(κ̄)·(1 − (1 − β)/|κ̄|)`. The result lies in `(-1, 1)` for finite input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionParams<T> {
    k_hr: T,
    beta: T,
}

impl<T: Real> ContractionParams<T> {
    pub fn new(k_hr: T, beta: T) -> Result<Self> {
        if !(k_hr > T::zero()) || !k_hr.is_finite() {
            return Err(Error::InvalidArgument(format!("k_hr must be positive, got {k_hr}")));
        }
        if !(beta > T::zero() && beta < T::one()) {
            return Err(Error::InvalidArgument(format!("beta must be in (0, 1), got {beta}")));
        }
        Ok(Self { k_hr, beta })
    }

    pub fn k_hr(&self) -> T {
        self.k_hr
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn cast<U: Real>(&self) -> ContractionParams<U> {
        ContractionParams {
            k_hr: U::lit(self.k_hr.as_f64()),
            beta: U::lit(self.beta.as_f64()),
        }
    }

    /// Contracts one metric coordinate. Errors on non-finite input.
    pub fn contract_axis(&self, kappa: T) -> Result<T> {
        if !kappa.is_finite() {
            return Err(Error::InvalidArgument(format!("cannot contract non-finite {kappa}")));
        }
        Ok(self.contract(kappa))
    }

    /// Unchecked contraction for hot loops; the caller guarantees finiteness.
    #[inline]
    pub fn contract(&self, kappa: T) -> T {
        let k = kappa / self.k_hr;
        if k.abs() <= T::one() {
            self.beta * k
        } else {
            k.signum() * (T::one() - (T::one() - self.beta) / k.abs())
        }
    }

    pub fn uncontract_axis(&self, c: T) -> Result<T> {
        if !(c.abs() < T::one()) {
            return Err(Error::OutOfRange { value: c.as_f64() });
        }
        let k = if c.abs() <= self.beta {
            c / self.beta
        } else {
            c.signum() * (T::one() - self.beta) / (T::one() - c.abs())
        };
        Ok(k * self.k_hr)
    }

    /// Contracts `x` and `y`; `z` and `t` pass through unchanged.
    pub fn contract_query(&self, q: Query4<T>) -> Result<Query4<T>> {
        if !q.is_finite() {
            return Err(Error::InvalidArgument("query has non-finite components".into()));
        }
        Ok(Query4 {
            x: self.contract(q.x),
            y: self.contract(q.y),
            ..q
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> ContractionParams<f64> {
        ContractionParams::new(40.0, 0.8).unwrap()
    }

    #[test]
    fn reference_values() {
        let p = params();
        assert_eq!(p.contract_axis(0.0).unwrap(), 0.0);
        assert!((p.contract_axis(40.0).unwrap() - 0.8).abs() < 1e-15);
        assert!((p.contract_axis(80.0).unwrap() - 0.9).abs() < 1e-15);
        assert!((p.contract_axis(-80.0).unwrap() + 0.9).abs() < 1e-15);
    }

    #[test]
    fn inverse_reference_values() {
        let p = params();
        assert_eq!(p.uncontract_axis(0.0).unwrap(), 0.0);
        assert!((p.uncontract_axis(0.8).unwrap() - 40.0).abs() < 1e-12);
        assert!((p.uncontract_axis(0.9).unwrap() - 80.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let p = params();
        assert!(matches!(p.contract_axis(f64::NAN), Err(Error::InvalidArgument(_))));
        assert!(matches!(p.contract_axis(f64::INFINITY), Err(Error::InvalidArgument(_))));
        assert!(matches!(p.uncontract_axis(1.0), Err(Error::OutOfRange { .. })));
        assert!(matches!(p.uncontract_axis(-1.5), Err(Error::OutOfRange { .. })));
        assert!(ContractionParams::new(0.0, 0.5).is_err());
        assert!(ContractionParams::new(1.0, 1.0).is_err());
    }

    #[test]
    fn query_contraction_touches_only_xy() {
        let p = params();
        let q = p.contract_query(Query4::new(0.0, 0.0, 1.5, 0.5)).unwrap();
        assert_eq!(q, Query4::new(0.0, 0.0, 1.5, 0.5));
        let q = p.contract_query(Query4::new(80.0, -40.0, 2.0, 0.0)).unwrap();
        assert!((q.x - 0.9).abs() < 1e-15 && (q.y + 0.8).abs() < 1e-15);
        assert_eq!((q.z, q.t), (2.0, 0.0));
    }

    #[test]
    fn branches_meet_at_boundary() {
        let p = params();
        let beta = p.beta();
        let outer_at_one = 1.0 - (1.0 - beta) / 1.0;
        assert!((beta * 1.0 - outer_at_one).abs() < 1e-12);
        let just_out = p.contract(40.0 * (1.0 + 1e-14));
        assert!((just_out - 0.8).abs() < 1e-12);
    }

    #[test]
    fn f32_contraction_agrees() {
        let p32 = params().cast::<f32>();
        assert!((p32.contract(80.0) - 0.9).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn odd_monotone_bounded(a in -1e4f64..1e4, b in -1e4f64..1e4) {
            let p = params();
            let (ca, cb) = (p.contract(a), p.contract(b));
            prop_assert!(ca.abs() < 1.0);
            prop_assert_eq!(p.contract(-a), -ca);
            if a < b { prop_assert!(ca < cb); }
        }

        #[test]
        fn round_trip(k in -400.0f64..400.0) {
            let p = params();
            let back = p.uncontract_axis(p.contract(k)).unwrap();
            prop_assert!((back - k).abs() <= 1e-9 * k.abs().max(1e-12));
        }
    }
}
