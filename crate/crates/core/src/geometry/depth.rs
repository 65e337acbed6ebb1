use crate::{Error, Real, Result};

/// Log-linear depth discretisation.
///
/// Edge `i` sits at `d(i / n_bins)` with
/// `d(r) = (1 − α)·d_near·(d_far/d_near)^r + α·(d_near + r·(d_far − d_near))`,
/// blending exponential (`α = 0`) and uniform (`α = 1`) spacing. An optional
/// infinity bin catches everything beyond `d_far`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBinning<T> {
    pub d_near: T,
    pub d_far: T,
    pub alpha: T,
    pub n_bins: usize,
    pub infinity_bin_depth: Option<T>,
}

impl<T: Real> DepthBinning<T> {
    pub fn new(
        d_near: T,
        d_far: T,
        alpha: T,
        n_bins: usize,
        infinity_bin_depth: Option<T>,
    ) -> Result<Self> {
        if !(d_near > T::zero() && d_near < d_far && d_far.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < d_near < d_far, got d_near={d_near}, d_far={d_far}"
            )));
        }
        if !(alpha >= T::zero() && alpha <= T::one()) {
            return Err(Error::InvalidArgument(format!("alpha must be in [0, 1], got {alpha}")));
        }
        if n_bins == 0 {
            return Err(Error::InvalidArgument("n_bins must be positive".into()));
        }
        if let Some(inf) = infinity_bin_depth {
            if !(inf > d_far) || !inf.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "infinity bin depth {inf} must exceed d_far {d_far}"
                )));
            }
        }
        Ok(Self { d_near, d_far, alpha, n_bins, infinity_bin_depth })
    }

    /// Depth at normalised position `r ∈ [0, 1]`.
    pub fn depth_at(&self, r: T) -> T {
        let one = T::one();
        let exponential = (one - self.alpha) * self.d_near * (self.d_far / self.d_near).powf(r);
        let linear = self.alpha * (self.d_near + r * (self.d_far - self.d_near));
        exponential + linear
    }

    /// `n_bins + 1` finite edges followed by the infinity edge, if configured.
    /// The end points are pinned to `d_near` and `d_far` exactly.
    pub fn edges(&self) -> Vec<T> {
        let n = T::from_usize(self.n_bins).unwrap();
        let mut edges: Vec<T> = (0..=self.n_bins)
            .map(|i| self.depth_at(T::from_usize(i).unwrap() / n))
            .collect();
        edges[0] = self.d_near;
        edges[self.n_bins] = self.d_far;
        if let Some(inf) = self.infinity_bin_depth {
            edges.push(inf);
        }
        edges
    }

    /// Number of categorical bins, counting the infinity bin.
    pub fn total_bins(&self) -> usize {
        self.n_bins + usize::from(self.infinity_bin_depth.is_some())
    }

    /// Representative depth per bin: the midpoint of its edges for finite
    /// bins, and the infinity depth itself for the infinity bin.
    pub fn representative_depths(&self) -> Vec<T> {
        let edges = self.edges();
        let half = T::lit(0.5);
        let mut reps: Vec<T> = edges[..=self.n_bins]
            .windows(2)
            .map(|w| (w[0] + w[1]) * half)
            .collect();
        if let Some(inf) = self.infinity_bin_depth {
            reps.push(inf);
        }
        reps
    }
}
