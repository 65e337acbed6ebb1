//! Lift-contract-splat onto a bird's-eye-view grid.
//!
//! Grid cells tile contracted space `[-1, 1]²` uniformly, so metric
//! resolution is finest near the ego vehicle. Every splatted grid carries two
//! bookkeeping channels ahead of the features: total weight ("mass") and
//! weight × visibility. Feature channels hold weight × feature.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::error::eof_as_truncated;
use crate::geometry::{bilinear_footprint, CameraModel, ContractionParams, DepthBinning, FourierConfig};
use crate::pointcloud::PointCloud;
use crate::{Error, Real, Result};

/// Channel index of the total splatted weight.
pub const MASS_CHANNEL: usize = 0;
/// Channel index of weight × visibility.
pub const VISIBILITY_CHANNEL: usize = 1;
/// Channels before the first feature channel.
pub const BOOKKEEPING_CHANNELS: usize = 2;

const MAGIC: [u8; 4] = *b"QOBG";
const VERSION: u32 = 1;
const SPLAT_CHUNKS: usize = 16;
const MIN_CHUNK: usize = 4096;

/// Per-pixel categorical depth probabilities, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution<T> {
    pub n_bins: usize,
    pub probs: Vec<T>,
}

impl<T: Real> DepthDistribution<T> {
    pub fn new(n_bins: usize, probs: Vec<T>) -> Result<Self> {
        let d = Self { n_bins, probs };
        d.validate()?;
        Ok(d)
    }

    pub fn n_pixels(&self) -> usize {
        self.probs.len() / self.n_bins.max(1)
    }

    pub fn pixel(&self, i: usize) -> &[T] {
        &self.probs[i * self.n_bins..(i + 1) * self.n_bins]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 || self.probs.len() % self.n_bins != 0 {
            return Err(Error::InvalidDistribution(format!(
                "{} probabilities do not split into pixels of {} bins",
                self.probs.len(),
                self.n_bins
            )));
        }
        for (i, px) in self.probs.chunks(self.n_bins).enumerate() {
            if px.iter().any(|p| !(*p >= T::zero()) || !p.is_finite()) {
                return Err(Error::InvalidDistribution(format!("pixel {i} has a negative or non-finite probability")));
            }
            let s: T = px.iter().copied().sum();
            if (s - T::one()).abs() > T::lit(1e-6) {
                return Err(Error::InvalidDistribution(format!("pixel {i} sums to {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPoint<T> {
    pub position: [T; 3],
    pub weight: T,
    /// Probability that the pixel ray is unoccluded up to this point.
    pub visibility: T,
    pub feature: Vec<T>,
    pub time: T,
}

/// Row-major `height × width × channels` grid; row `j` spans contracted y
/// around `-1 + (j + 0.5)·2/height`, column `i` likewise for x.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
    pub contraction: ContractionParams<T>,
}

impl<T: Real> BevGrid<T> {
    pub fn zeros(width: usize, height: usize, channels: usize, contraction: ContractionParams<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("BEV grid must be non-empty".into()));
        }
        Ok(Self { width, height, channels, data: vec![T::zero(); width * height * channels], contraction })
    }

    /// Zero grid with the bookkeeping channels plus `feature_dim` features.
    pub fn for_features(width: usize, height: usize, feature_dim: usize, contraction: ContractionParams<T>) -> Result<Self> {
        Self::zeros(width, height, BOOKKEEPING_CHANNELS + feature_dim, contraction)
    }

    #[inline]
    pub fn offset(&self, col: usize, row: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    pub fn cell(&self, col: usize, row: usize) -> &[T] {
        let o = self.offset(col, row);
        &self.data[o..o + self.channels]
    }

    pub fn channel_sum(&self, ch: usize) -> T {
        self.data.iter().skip(ch).step_by(self.channels.max(1)).copied().sum()
    }

    pub fn total_mass(&self) -> T {
        self.channel_sum(MASS_CHANNEL)
    }

    pub fn feature_dim(&self) -> usize {
        self.channels.saturating_sub(BOOKKEEPING_CHANNELS)
    }

    /// Contracted `(x, y)` of a metric position.
    pub fn contracted_xy(&self, x: T, y: T) -> (T, T) {
        (self.contraction.contract(x), self.contraction.contract(y))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(Error::InvalidArgument("BEV grid shapes differ".into()));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += *b);
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        for d in [self.width, self.height, self.channels] {
            w.write_u32::<LE>(u32::try_from(d).map_err(|_| Error::InvalidArgument("grid too large".into()))?)?;
        }
        w.write_f32::<LE>(self.contraction.k_hr().as_f64() as f32)?;
        w.write_f32::<LE>(self.contraction.beta().as_f64() as f32)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.write_f32::<LE>(v.as_f64() as f32)?;
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof_as_truncated("magic"))?;
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: magic });
        }
        let version = r.read_u32::<LE>().map_err(eof_as_truncated("version"))?;
        if version != VERSION {
            return Err(Error::VersionMismatch { expected: VERSION, found: version });
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LE>().map_err(eof_as_truncated("dims"))? as usize;
        }
        let k = r.read_f32::<LE>().map_err(eof_as_truncated("contraction"))?;
        let b = r.read_f32::<LE>().map_err(eof_as_truncated("contraction"))?;
        let contraction = ContractionParams::new(T::lit(k as f64), T::lit(b as f64))?;
        let mut raw = vec![0f32; dims[0] * dims[1] * dims[2]];
        r.read_f32_into::<LE>(&mut raw).map_err(eof_as_truncated("grid data"))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::TrailingBytes(rest.len() as u64));
        }
        let mut g = Self::zeros(dims[0], dims[1], dims[2], contraction)?;
        g.data = raw.into_iter().map(|v| T::lit(v as f64)).collect();
        Ok(g)
    }

    /// Binary PPM of the mass channel, log-scaled, +y up.
    pub fn write_mass_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        let vals: Vec<f64> = (0..self.width * self.height)
            .map(|i| self.data[i * self.channels + MASS_CHANNEL].as_f64().max(0.0).ln_1p())
            .collect();
        let max = vals.iter().copied().fold(0.0, f64::max);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut px = Vec::with_capacity(vals.len() * 3);
        for row in (0..self.height).rev() {
            for col in 0..self.width {
                let v = vals[row * self.width + col];
                let g = if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 };
                px.extend_from_slice(&[g, g, g]);
            }
        }
        w.write_all(&px)?;
        Ok(())
    }
}

/// Lifts every pixel into one point per depth bin, at the bin's
/// representative depth along the pixel ray. Pixel `i` is `(i % width,
/// i / width)`, sampled at its centre. With a time encoding, `fourier(time)`
/// is appended to each point's feature.
pub fn lift_depth_distribution<T: Real>(
    cam: &CameraModel<T>,
    bins: &DepthBinning<T>,
    features: &[Vec<T>],
    dist: &DepthDistribution<T>,
    time: T,
    time_encoding: Option<&FourierConfig>,
) -> Result<Vec<LiftedPoint<T>>> {
    dist.validate()?;
    let n_px = cam.width * cam.height;
    if dist.n_bins != bins.total_bins() {
        return Err(Error::InvalidArgument(format!(
            "distribution has {} bins, binning has {}",
            dist.n_bins,
            bins.total_bins()
        )));
    }
    if features.len() != n_px || dist.n_pixels() != n_px {
        return Err(Error::InvalidArgument(format!(
            "{} feature vectors and {} distributions for {n_px} pixels",
            features.len(),
            dist.n_pixels()
        )));
    }
    let depths = bins.representative_depths();
    let t_enc = time_encoding.map(|e| e.encode(&[time])).unwrap_or_default();
    let half = T::lit(0.5);
    let per_pixel: Vec<Result<Vec<LiftedPoint<T>>>> = (0..n_px)
        .into_par_iter()
        .map(|i| {
            let u = T::from_usize(i % cam.width).unwrap() + half;
            let v = T::from_usize(i / cam.width).unwrap() + half;
            let mut feature = features[i].clone();
            feature.extend_from_slice(&t_enc);
            let mut visibility = T::one();
            let mut out = Vec::with_capacity(dist.n_bins);
            for (k, &p) in dist.pixel(i).iter().enumerate() {
                out.push(LiftedPoint {
                    position: cam.lift_pixel(u, v, depths[k])?,
                    weight: p,
                    visibility: visibility.max(T::zero()),
                    feature: feature.clone(),
                    time,
                });
                visibility -= p;
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(n_px * dist.n_bins);
    for px in per_pixel {
        all.extend(px?);
    }
    Ok(all)
}

fn splat_into<T: Real>(points: &[LiftedPoint<T>], grid: &mut BevGrid<T>) {
    let fd = grid.feature_dim();
    for p in points {
        let (cx, cy) = grid.contracted_xy(p.position[0], p.position[1]);
        for (col, row, bw) in bilinear_footprint(cx, cy, grid.width, grid.height) {
            if bw == T::zero() {
                continue;
            }
            let w = bw * p.weight;
            let o = grid.offset(col, row);
            let cell = &mut grid.data[o..o + grid.channels];
            cell[MASS_CHANNEL] += w;
            cell[VISIBILITY_CHANNEL] += w * p.visibility;
            for (c, f) in cell[BOOKKEEPING_CHANNELS..BOOKKEEPING_CHANNELS + fd].iter_mut().zip(&p.feature) {
                *c += w * *f;
            }
        }
    }
}

/// Scatter-adds points into a copy of `grid`. Partial grids over fixed
/// chunks are summed in chunk order, so the result does not depend on the
/// thread count.
pub fn splat<T: Real>(points: &[LiftedPoint<T>], grid: &BevGrid<T>) -> Result<BevGrid<T>> {
    let fd = grid.feature_dim();
    if grid.channels < BOOKKEEPING_CHANNELS {
        return Err(Error::InvalidArgument("grid lacks bookkeeping channels".into()));
    }
    for (i, p) in points.iter().enumerate() {
        if p.feature.len() != fd {
            return Err(Error::FeatureDimMismatch { expected: fd, found: p.feature.len() });
        }
        if !(p.weight >= T::zero()) || p.position.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("point {i} has negative weight or non-finite position")));
        }
    }
    let chunk = points.len().div_ceil(SPLAT_CHUNKS).max(MIN_CHUNK);
    let mut empty = grid.clone();
    empty.data.iter_mut().for_each(|v| *v = T::zero());
    let partials: Vec<BevGrid<T>> = points
        .par_chunks(chunk)
        .map(|c| {
            let mut g = empty.clone();
            splat_into(c, &mut g);
            g
        })
        .collect();
    let mut out = grid.clone();
    for p in &partials {
        out.add_assign(p)?;
    }
    Ok(out)
}

/// Splats a point cloud with unit weight and full visibility. Features are
/// `fourier(z, time)` followed by a one-hot class vector (all zeros for
/// unlabelled points); the class count is whatever the grid has room for.
pub fn splat_pointcloud<T: Real>(pc: &PointCloud, grid: &BevGrid<T>, encoding: &FourierConfig) -> Result<BevGrid<T>> {
    let enc_len = encoding.encoded_len(2);
    let fd = grid.feature_dim();
    if fd < enc_len {
        return Err(Error::InvalidArgument(format!(
            "grid has {fd} feature channels, encoding alone needs {enc_len}"
        )));
    }
    let n_classes = fd - enc_len;
    let points: Vec<LiftedPoint<T>> = pc
        .records
        .par_iter()
        .map(|r| {
            let mut feature = encoding.encode(&[T::lit(r.position[2]), T::lit(r.time)]);
            feature.resize(fd, T::zero());
            if r.is_labeled() {
                let c = r.class_id as usize;
                if c >= n_classes {
                    return Err(Error::InvalidArgument(format!("class {c} exceeds the grid's {n_classes} classes")));
                }
                feature[enc_len + c] = T::one();
            }
            Ok(LiftedPoint {
                position: r.position.map(T::lit),
                weight: T::one(),
                visibility: T::one(),
                feature,
                time: T::lit(r.time),
            })
        })
        .collect::<Result<_>>()?;
    splat(&points, grid)
}
