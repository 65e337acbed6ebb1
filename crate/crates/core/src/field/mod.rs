//! Implicit occupancy field: a learnable feature grid over contracted BEV
//! space decoded by an MLP together with Fourier features of `(z, t)`.
//!
//! Output row layout: `[occupancy logit, semantic logits…, features…]`.

mod render;
mod train;

pub use render::{
    composite, exponential_depths, importance_depths, rays_from_pointcloud, render_loss, render_ray,
    train_rendering_baseline, Composite, RenderConfig, RenderLossReport, RenderRay, RenderResult,
};
pub use train::{
    backward, loss, lr_at, train, write_loss_csv, AdamW, LossReport, QuerySet, TrainConfig,
};

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bev::{BevGrid, BOOKKEEPING_CHANNELS, MASS_CHANNEL};
use crate::error::eof_as_truncated;
use crate::geometry::{bilinear_footprint, ContractionParams, FourierConfig, Query4};
use crate::scalar::softmax_in_place;
use crate::{Error, Real, Result};

const MAGIC: [u8; 4] = *b"QOFM";
const VERSION: u32 = 1;
/// Rows per parallel work item; fixed so reductions do not depend on the
/// thread count.
pub(crate) const CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct FieldArch {
    pub grid_width: usize,
    pub grid_height: usize,
    pub grid_channels: usize,
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub fourier: FourierConfig,
    pub k_hr: f64,
    pub beta: f64,
}

impl Default for FieldArch {
    fn default() -> Self {
        Self {
            grid_width: 128,
            grid_height: 128,
            grid_channels: 16,
            hidden: vec![160; 4],
            n_classes: 1,
            feature_dim: 0,
            fourier: FourierConfig::default(),
            k_hr: 40.0,
            beta: 0.8,
        }
    }
}

impl FieldArch {
    pub fn input_dim(&self) -> usize {
        self.grid_channels + self.fourier.encoded_len(2)
    }

    pub fn output_dim(&self) -> usize {
        1 + self.n_classes + self.feature_dim
    }

    /// Input, hidden and output widths in order.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.input_dim()];
        v.extend(&self.hidden);
        v.push(self.output_dim());
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_width == 0 || self.grid_height == 0 || self.grid_channels == 0 {
            return Err(Error::InvalidArgument("feature grid must be non-empty".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument("hidden layers must have positive width".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::InvalidArgument("need at least one semantic class".into()));
        }
        ContractionParams::new(self.k_hr, self.beta)?;
        FourierConfig::new(self.fourier.n_bands, self.fourier.min_freq, self.fourier.max_freq)?;
        Ok(())
    }
}

/// Fully connected layer `x·w + b` with `w` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

/// All learnable tensors. Gradients and optimizer moments use the same
/// shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    /// `cells × channels`, cell index `row·width + col`.
    pub grid: Array2<T>,
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> Params<T> {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            grid: Array2::zeros(other.grid.raw_dim()),
            layers: other
                .layers
                .iter()
                .map(|l| Dense { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.raw_dim()) })
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.grid.len() + self.layers.iter().map(|l| l.w.len() + l.b.len()).sum::<usize>()
    }

    /// Flat views in declaration order, each tagged with whether weight
    /// decay applies (grid and weight matrices, not biases).
    pub fn tensors(&self) -> Vec<(&[T], bool)> {
        let mut v = vec![(self.grid.as_slice().expect("standard layout"), true)];
        for l in &self.layers {
            v.push((l.w.as_slice().expect("standard layout"), true));
            v.push((l.b.as_slice().expect("standard layout"), false));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&mut [T], bool)> {
        let mut v = vec![(self.grid.as_slice_mut().expect("standard layout"), true)];
        for l in &mut self.layers {
            v.push((l.w.as_slice_mut().expect("standard layout"), true));
            v.push((l.b.as_slice_mut().expect("standard layout"), false));
        }
        v
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(t, _)| t.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((a, _), (b, _)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let c = |v: &T| U::lit(v.as_f64());
        Params {
            grid: self.grid.map(c),
            layers: self.layers.iter().map(|l| Dense { w: l.w.map(c), b: l.b.map(c) }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel<T> {
    pub arch: FieldArch,
    pub params: Params<T>,
    contraction: ContractionParams<T>,
    freqs: Vec<T>,
}

/// Per-query prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput<T> {
    pub occ_prob: T,
    pub semantic_probs: Vec<T>,
    pub feature: Vec<T>,
}

impl<T: Real> FieldOutput<T> {
    pub fn from_logits(row: &[T], n_classes: usize) -> Self {
        let mut semantic_probs = row[1..1 + n_classes].to_vec();
        softmax_in_place(&mut semantic_probs);
        Self { occ_prob: row[0].sigmoid(), semantic_probs, feature: row[1 + n_classes..].to_vec() }
    }
}

pub(crate) type Footprint<T> = [(usize, T); 4];

/// Activations kept for the backward pass.
pub(crate) struct Cache<T> {
    pub foot: Vec<Footprint<T>>,
    /// Input to each layer; `acts[0]` is the encoded query.
    pub acts: Vec<Array2<T>>,
    /// Activation derivatives of hidden layers.
    pub slopes: Vec<Array2<T>>,
}

/// Gradient contribution of one chunk: dense parts plus the rows to scatter
/// into the grid.
pub(crate) struct ChunkGrad<T> {
    pub layers: Vec<Dense<T>>,
    pub grid_rows: Array2<T>,
    pub foot: Vec<Footprint<T>>,
}

impl<T: Real> FieldModel<T> {
    /// Glorot-uniform weights, zero biases, grid features uniform in ±0.01.
    pub fn new(arch: FieldArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = arch.grid_width * arch.grid_height;
        let grid = Array2::from_shape_simple_fn((cells, arch.grid_channels), || T::lit(rng.random_range(-0.01..0.01)));
        let sizes = arch.layer_sizes();
        let layers = sizes
            .windows(2)
            .map(|w| {
                let a = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Dense {
                    w: Array2::from_shape_simple_fn((w[0], w[1]), || T::lit(rng.random_range(-a..a))),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self::from_params(arch, Params { grid, layers })
    }

    pub fn from_params(arch: FieldArch, params: Params<T>) -> Result<Self> {
        arch.validate()?;
        let sizes = arch.layer_sizes();
        let cells = arch.grid_width * arch.grid_height;
        if params.grid.dim() != (cells, arch.grid_channels) || params.layers.len() != sizes.len() - 1 {
            return Err(Error::InvalidArgument("parameters do not match the architecture".into()));
        }
        for (l, w) in params.layers.iter().zip(sizes.windows(2)) {
            if l.w.dim() != (w[0], w[1]) || l.b.len() != w[1] {
                return Err(Error::InvalidArgument("layer shapes do not chain".into()));
            }
        }
        if !params.all_finite() {
            return Err(Error::InvalidArgument("non-finite parameters".into()));
        }
        let contraction = ContractionParams::new(T::lit(arch.k_hr), T::lit(arch.beta))?;
        let freqs = arch.fourier.frequencies().into_iter().map(T::lit).collect();
        Ok(Self { arch, params, contraction, freqs })
    }

    pub fn cast<U: Real>(&self) -> FieldModel<U> {
        FieldModel::from_params(self.arch.clone(), self.params.cast()).expect("same architecture")
    }

    pub fn contraction(&self) -> &ContractionParams<T> {
        &self.contraction
    }

    /// Zeroes the output layer, giving occupancy 0.5 and uniform semantics.
    pub fn zero_head(&mut self) {
        let last = self.params.layers.last_mut().expect("at least one layer");
        last.w.fill(T::zero());
        last.b.fill(T::zero());
    }

    /// Copies mass-normalised splat features into the grid. Grid shapes must
    /// match; surplus channels on either side are ignored.
    pub fn init_grid_from_bev(&mut self, bev: &BevGrid<T>) -> Result<()> {
        if (bev.width, bev.height) != (self.arch.grid_width, self.arch.grid_height) {
            return Err(Error::InvalidArgument("BEV grid size differs from the field grid".into()));
        }
        let n = bev.feature_dim().min(self.arch.grid_channels);
        for (i, mut row) in self.params.grid.rows_mut().into_iter().enumerate() {
            let cell = &bev.data[i * bev.channels..(i + 1) * bev.channels];
            let mass = cell[MASS_CHANNEL];
            if mass > T::zero() {
                for k in 0..n {
                    row[k] = cell[BOOKKEEPING_CHANNELS + k] / mass;
                }
            }
        }
        Ok(())
    }

    fn encode_fourier(&self, v: T, out: &mut [T]) {
        let nb = self.freqs.len();
        for (k, &f) in self.freqs.iter().enumerate() {
            let (s, c) = (f * v).sin_cos();
            out[k] = s;
            out[nb + k] = c;
        }
    }

    /// Encodes a query whose `(x, y)` are already contracted.
    fn encode_contracted(&self, cx: T, cy: T, z: T, t: T, row: &mut [T]) -> Footprint<T> {
        let (w, h, c) = (self.arch.grid_width, self.arch.grid_height, self.arch.grid_channels);
        let fp = bilinear_footprint(cx, cy, w, h);
        let foot = fp.map(|(col, r, wt)| (r * w + col, wt));
        row[..c].fill(T::zero());
        for &(cell, wt) in &foot {
            if wt != T::zero() {
                for (o, g) in row[..c].iter_mut().zip(self.params.grid.row(cell)) {
                    *o += wt * *g;
                }
            }
        }
        let nb2 = 2 * self.freqs.len();
        self.encode_fourier(z, &mut row[c..c + nb2]);
        self.encode_fourier(t, &mut row[c + nb2..c + 2 * nb2]);
        foot
    }

    fn encode_query(&self, q: &Query4<T>, row: &mut [T]) -> Footprint<T> {
        let (cx, cy) = (self.contraction.contract(q.x), self.contraction.contract(q.y));
        self.encode_contracted(cx, cy, q.z, q.t, row)
    }

    fn run_layers(&self, x: Array2<T>, keep: bool) -> (Array2<T>, Vec<Array2<T>>, Vec<Array2<T>>) {
        let n_layers = self.params.layers.len();
        let mut acts = Vec::with_capacity(n_layers);
        let mut slopes = Vec::with_capacity(n_layers - 1);
        let mut cur = x;
        for (l, layer) in self.params.layers.iter().enumerate() {
            let mut a = cur.dot(&layer.w);
            a += &layer.b;
            if keep {
                acts.push(cur);
            }
            if l + 1 == n_layers {
                return (a, acts, slopes);
            }
            if keep {
                cur = a.clone();
                ndarray::Zip::from(&mut cur).and(&mut a).for_each(|c, s| (*c, *s) = c.softplus_with_slope());
                slopes.push(a);
            } else {
                a.mapv_inplace(T::softplus);
                cur = a;
            }
        }
        unreachable!("loop returns at the output layer")
    }

    /// Raw output rows for metric-frame queries.
    pub(crate) fn forward_rows(&self, qs: &[Query4<T>], keep: bool) -> (Array2<T>, Option<Cache<T>>) {
        let mut x = Array2::zeros((qs.len(), self.arch.input_dim()));
        let foot: Vec<_> = qs
            .iter()
            .zip(x.rows_mut())
            .map(|(q, mut row)| self.encode_query(q, row.as_slice_mut().expect("contiguous row")))
            .collect();
        let (out, acts, slopes) = self.run_layers(x, keep);
        (out, keep.then_some(Cache { foot, acts, slopes }))
    }

    /// Backpropagates `d_out` (gradient of the loss w.r.t. output rows).
    pub(crate) fn backward_rows(&self, cache: Cache<T>, d_out: Array2<T>) -> ChunkGrad<T> {
        let n_layers = self.params.layers.len();
        let mut layers = Vec::with_capacity(n_layers);
        let mut d = d_out;
        let mut grid_rows = None;
        for l in (0..n_layers).rev() {
            let input = &cache.acts[l];
            layers.push(Dense { w: input.t().dot(&d), b: d.sum_axis(Axis(0)) });
            let dx = d.dot(&self.params.layers[l].w.t());
            if l > 0 {
                d = dx;
                d.zip_mut_with(&cache.slopes[l - 1], |g, &s| *g = (*g * s).flush());
            } else {
                grid_rows = Some(dx.slice(s![.., ..self.arch.grid_channels]).to_owned());
            }
        }
        layers.reverse();
        ChunkGrad { layers, grid_rows: grid_rows.expect("layer 0 visited"), foot: cache.foot }
    }

    /// Adds chunk gradients into `grads` in call order.
    pub(crate) fn accumulate(grads: &mut Params<T>, chunk: ChunkGrad<T>) {
        for (g, c) in grads.layers.iter_mut().zip(chunk.layers) {
            g.w += &c.w;
            g.b += &c.b;
        }
        for (fp, row) in chunk.foot.iter().zip(chunk.grid_rows.rows()) {
            for &(cell, wt) in fp {
                if wt != T::zero() {
                    grads.grid.row_mut(cell).scaled_add(wt, &row);
                }
            }
        }
    }

    pub fn forward(&self, q: Query4<T>) -> FieldOutput<T> {
        let (out, _) = self.forward_rows(&[q], false);
        FieldOutput::from_logits(out.row(0).as_slice().expect("contiguous"), self.arch.n_classes)
    }

    /// Output logits for many queries, one row each.
    pub fn forward_logits(&self, qs: &[Query4<T>]) -> Array2<T> {
        let parts: Vec<Array2<T>> = qs.par_chunks(4 * CHUNK_ROWS).map(|c| self.forward_rows(c, false).0).collect();
        let mut out = Array2::zeros((qs.len(), self.arch.output_dim()));
        let mut at = 0;
        for p in parts {
            out.slice_mut(s![at..at + p.nrows(), ..]).assign(&p);
            at += p.nrows();
        }
        out
    }

    pub fn forward_batch(&self, qs: &[Query4<T>]) -> Vec<FieldOutput<T>> {
        let logits = self.forward_logits(qs);
        logits
            .rows()
            .into_iter()
            .map(|r| FieldOutput::from_logits(r.as_slice().expect("contiguous"), self.arch.n_classes))
            .collect()
    }

    /// Same as [`forward`](Self::forward) for a query given in contracted
    /// `(x, y)`; used to check that contraction happens exactly once.
    #[doc(hidden)]
    pub fn forward_precontracted(&self, cx: T, cy: T, z: T, t: T) -> FieldOutput<T> {
        let mut x = Array2::zeros((1, self.arch.input_dim()));
        self.encode_contracted(cx, cy, z, t, x.row_mut(0).into_slice().expect("contiguous"));
        let (out, _, _) = self.run_layers(x, false);
        FieldOutput::from_logits(out.row(0).as_slice().expect("contiguous"), self.arch.n_classes)
    }

    /// Writes the `QOFM` format.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let a = &self.arch;
        let u = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()));
        w.write_all(&MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        let sizes = a.layer_sizes();
        w.write_u32::<LE>(u(sizes.len())?)?;
        for s in sizes {
            w.write_u32::<LE>(u(s)?)?;
        }
        w.write_u32::<LE>(u(a.n_classes)?)?;
        w.write_u32::<LE>(u(a.feature_dim)?)?;
        w.write_u32::<LE>(u(a.fourier.n_bands)?)?;
        w.write_f32::<LE>(a.fourier.min_freq as f32)?;
        w.write_f32::<LE>(a.fourier.max_freq as f32)?;
        w.write_f32::<LE>(a.k_hr as f32)?;
        w.write_f32::<LE>(a.beta as f32)?;
        for d in [a.grid_width, a.grid_height, a.grid_channels] {
            w.write_u32::<LE>(u(d)?)?;
        }
        let mut buf = Vec::with_capacity(4 * self.params.n_params());
        for (t, _) in self.params.tensors() {
            for v in t {
                buf.write_f32::<LE>(v.as_f64() as f32)?;
            }
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
        let mut u = || -> Result<usize> { Ok(r.read_u32::<LE>().map_err(eof_as_truncated("header"))? as usize) };
        let n_sizes = u()?;
        if !(2..=64).contains(&n_sizes) {
            return Err(Error::Malformed(format!("implausible layer count {n_sizes}")));
        }
        let sizes = (0..n_sizes).map(|_| u()).collect::<Result<Vec<_>>>()?;
        let (n_classes, feature_dim, n_bands) = (u()?, u()?, u()?);
        let mut f = [0f32; 4];
        r.read_f32_into::<LE>(&mut f).map_err(eof_as_truncated("header"))?;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LE>().map_err(eof_as_truncated("header"))? as usize;
        }
        let arch = FieldArch {
            grid_width: dims[0],
            grid_height: dims[1],
            grid_channels: dims[2],
            hidden: sizes[1..n_sizes - 1].to_vec(),
            n_classes,
            feature_dim,
            fourier: FourierConfig::new(n_bands, f[0] as f64, f[1] as f64)?,
            k_hr: f[2] as f64,
            beta: f[3] as f64,
        };
        arch.validate()?;
        if arch.layer_sizes() != sizes {
            return Err(Error::Malformed("layer sizes disagree with the header".into()));
        }
        let mut params = Params {
            grid: Array2::zeros((dims[0] * dims[1], dims[2])),
            layers: sizes
                .windows(2)
                .map(|w| Dense { w: Array2::zeros((w[0], w[1])), b: Array1::zeros(w[1]) })
                .collect(),
        };
        let mut raw = vec![0f32; params.n_params()];
        r.read_f32_into::<LE>(&mut raw).map_err(eof_as_truncated("parameters"))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::TrailingBytes(rest.len() as u64));
        }
        let mut it = raw.into_iter();
        for (t, _) in params.tensors_mut() {
            t.iter_mut().zip(&mut it).for_each(|(p, v)| *p = T::lit(v as f64));
        }
        Self::from_params(arch, params)
    }
}
