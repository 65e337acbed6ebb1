use crate::{Error, Real, Result};

/// Sinusoidal encoding with log-linearly spaced frequencies in
/// `[min_freq, max_freq]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierConfig {
    pub n_bands: usize,
    pub min_freq: f64,
    pub max_freq: f64,
}

impl Default for FourierConfig {
    /// 16 bands over `[1, 10]`.
    fn default() -> Self {
        Self { n_bands: 16, min_freq: 1.0, max_freq: 10.0 }
    }
}

impl FourierConfig {
    pub fn new(n_bands: usize, min_freq: f64, max_freq: f64) -> Result<Self> {
        if n_bands == 0 {
            return Err(Error::InvalidArgument("n_bands must be positive".into()));
        }
        if !(min_freq > 0.0 && min_freq <= max_freq && max_freq.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < min_freq <= max_freq, got [{min_freq}, {max_freq}]"
            )));
        }
        Ok(Self { n_bands, min_freq, max_freq })
    }

    pub fn frequencies(&self) -> Vec<f64> {
        if self.n_bands == 1 {
            return vec![self.min_freq];
        }
        let ratio = self.max_freq / self.min_freq;
        let last = (self.n_bands - 1) as f64;
        (0..self.n_bands)
            .map(|k| self.min_freq * ratio.powf(k as f64 / last))
            .collect()
    }

    /// Output length for an input of `dim` components.
    pub fn encoded_len(&self, dim: usize) -> usize {
        2 * self.n_bands * dim
    }

    /// `[sin(f_k·x)…, cos(f_k·x)…]` per input component, components concatenated.
    pub fn encode<T: Real>(&self, values: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.encoded_len(values.len())];
        self.encode_into(values, &mut out);
        out
    }

    pub fn encode_into<T: Real>(&self, values: &[T], out: &mut [T]) {
        assert_eq!(out.len(), self.encoded_len(values.len()), "encoding buffer length");
        let freqs = self.frequencies();
        let nb = self.n_bands;
        for (d, &v) in values.iter().enumerate() {
            let block = &mut out[2 * nb * d..2 * nb * (d + 1)];
            for (k, &f) in freqs.iter().enumerate() {
                let (s, c) = (T::lit(f) * v).sin_cos();
                block[k] = s;
                block[nb + k] = c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_encodes_to_sin0_cos1() {
        let cfg = FourierConfig::default();
        let e = cfg.encode(&[0.0f64]);
        assert_eq!(e.len(), 32);
        assert!(e[..16].iter().all(|&s| s == 0.0));
        assert!(e[16..].iter().all(|&c| c == 1.0));
    }

    #[test]
    fn frequencies_are_log_linear() {
        let f = FourierConfig::default().frequencies();
        assert_eq!(f.len(), 16);
        assert!((f[0] - 1.0).abs() < 1e-15 && (f[15] - 10.0).abs() < 1e-12);
        let r = f[1] / f[0];
        for w in f.windows(2) {
            assert!((w[1] / w[0] - r).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_and_determinism() {
        let cfg = FourierConfig::new(4, 1.0, 8.0).unwrap();
        let a = cfg.encode(&[0.3f32, -1.2]);
        assert_eq!(a.len(), 16);
        assert_eq!(a, cfg.encode(&[0.3f32, -1.2]));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(FourierConfig::new(0, 1.0, 2.0).is_err());
        assert!(FourierConfig::new(4, 0.0, 2.0).is_err());
        assert!(FourierConfig::new(4, 3.0, 2.0).is_err());
    }
}
