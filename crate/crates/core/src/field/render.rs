//! Alpha-compositing renderer and the rendering-supervised baseline.
//!
//! With opacity `o_i` from the occupancy head, transmittance is
//! `T_i = ∏_{j<i} (1 − o_j)` and the sample weight `w_i = T_i·o_i`. Rendered
//! depth is `Σ w_i d_i / max(Σ w_i, ε)`; rendered semantics are the
//! weight-normalised mixture of per-sample class distributions.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{lr_at, AdamW, FieldModel, LossReport, Params, TrainConfig, CHUNK_ROWS};
use crate::geometry::{norm3, scale3, sub3, Query4};
use crate::pointcloud::PointCloud;
use crate::{Error, Real, Result};

/// Opacity mass below which a ray counts as fully transparent.
pub const TRANSPARENCY_EPS: f64 = 1e-6;
const MIN_PROB: f64 = 1e-12;
const PDF_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Composite<T> {
    pub weights: Vec<T>,
    /// `n + 1` values; the last is the transmittance past the final sample.
    pub transmittances: Vec<T>,
    pub opacity_sum: T,
    pub depth: T,
}

/// Composites opacities at the given depths.
pub fn composite<T: Real>(occ: &[T], depths: &[T]) -> Composite<T> {
    let mut trans = Vec::with_capacity(occ.len() + 1);
    let mut weights = Vec::with_capacity(occ.len());
    let mut t = T::one();
    for &o in occ {
        trans.push(t);
        weights.push(t * o);
        t *= T::one() - o;
    }
    trans.push(t);
    let s: T = weights.iter().copied().sum();
    let n: T = weights.iter().zip(depths).map(|(&w, &d)| w * d).sum();
    Composite { depth: n / s.max(T::lit(TRANSPARENCY_EPS)), weights, transmittances: trans, opacity_sum: s }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult<T> {
    pub rendered_depth: T,
    pub rendered_semantics: Vec<T>,
    pub transmittances: Vec<T>,
    /// Set when the ray is fully transparent; depth is then the last sample
    /// depth and semantics are uniform.
    pub transparent: bool,
}

fn check_depths<T: Real>(depths: &[T]) -> Result<()> {
    if depths.is_empty() || depths.windows(2).any(|w| !(w[0] < w[1])) || !(depths[0] >= T::zero()) {
        return Err(Error::InvalidArgument("sample depths must be non-negative and strictly increasing".into()));
    }
    Ok(())
}

/// Renders one ray through the field.
pub fn render_ray<T: Real>(
    model: &FieldModel<T>,
    origin: [T; 3],
    direction: [T; 3],
    sample_depths: &[T],
    t: T,
) -> Result<RenderResult<T>> {
    check_depths(sample_depths)?;
    if (norm3(direction) - T::one()).abs() > T::lit(1e-6) {
        return Err(Error::InvalidArgument("ray direction must be unit length".into()));
    }
    let qs: Vec<Query4<T>> = sample_depths
        .iter()
        .map(|&d| Query4::new(origin[0] + d * direction[0], origin[1] + d * direction[1], origin[2] + d * direction[2], t))
        .collect();
    let outs = model.forward_batch(&qs);
    let occ: Vec<T> = outs.iter().map(|o| o.occ_prob).collect();
    let c = composite(&occ, sample_depths);
    let ns = model.arch.n_classes;
    let transparent = c.opacity_sum < T::lit(TRANSPARENCY_EPS);
    let (depth, sem) = if transparent {
        (*sample_depths.last().expect("non-empty"), vec![T::one() / T::lit(ns as f64); ns])
    } else {
        let mut sem = vec![T::zero(); ns];
        for (w, o) in c.weights.iter().zip(&outs) {
            for (s, p) in sem.iter_mut().zip(&o.semantic_probs) {
                *s += *w * *p / c.opacity_sum;
            }
        }
        (c.depth, sem)
    };
    Ok(RenderResult { rendered_depth: depth, rendered_semantics: sem, transmittances: c.transmittances, transparent })
}

/// A supervision ray: unit direction, target depth along it, target class.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderRay {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub depth: f64,
    pub class: Option<u16>,
    pub time: f64,
}

/// One ray per record from its origin to its position; degenerate rays are
/// dropped.
pub fn rays_from_pointcloud(pc: &PointCloud) -> Vec<RenderRay> {
    pc.records
        .iter()
        .filter_map(|r| {
            let d = sub3(r.position, r.origin);
            let len = norm3(d);
            (len >= crate::supervision::DEGENERATE_RAY).then(|| RenderRay {
                origin: r.origin,
                direction: scale3(d, 1.0 / len),
                depth: len,
                class: r.is_labeled().then_some(r.class_id),
                time: r.time,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    /// Optimiser settings; `batch_size` counts rays per step and the λ
    /// weights are unused.
    pub train: TrainConfig,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), n_coarse: 48, n_fine: 16, near: 0.5, far: 200.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderLossReport {
    /// `depth + sem`.
    pub total: f64,
    /// Mean absolute depth error.
    pub depth: f64,
    /// Mean cross-entropy over rays with a class target.
    pub sem: f64,
    pub n_rays: usize,
    pub n_sem: usize,
    pub transparent: usize,
}

impl RenderLossReport {
    /// Loss-curve row with the depth term in the occupancy column.
    pub fn to_loss_report(&self) -> LossReport {
        LossReport { total: self.total, occ: self.depth, sem: self.sem, vfm: 0.0, n_occ: self.n_rays, n_sem: self.n_sem, n_vfm: 0 }
    }
}

/// Exponentially spaced depths in `[near, far]`, one per stratum. Without a
/// generator each sample sits mid-stratum.
pub fn exponential_depths<R: Rng>(near: f64, far: f64, n: usize, rng: Option<&mut R>) -> Vec<f64> {
    let ratio = far / near;
    let mut rng = rng;
    (0..n)
        .map(|i| {
            let u = rng.as_mut().map_or(0.5, |r| r.random::<f64>());
            near * ratio.powf((i as f64 + u) / n as f64)
        })
        .collect()
}

/// Draws `n` extra depths from the piecewise-constant density given by the
/// weights on the intervals between consecutive coarse depths (stratified
/// inverse CDF) and returns the merged, sorted set.
pub fn importance_depths<R: Rng>(depths: &[f64], weights: &[f64], n: usize, rng: &mut R) -> Vec<f64> {
    let mut merged = depths.to_vec();
    if depths.len() >= 2 && n > 0 {
        let pdf: Vec<f64> = weights[..depths.len() - 1].iter().map(|w| w.max(0.0) + PDF_FLOOR).collect();
        let total: f64 = pdf.iter().sum();
        let mut cdf = Vec::with_capacity(pdf.len() + 1);
        cdf.push(0.0);
        for p in &pdf {
            cdf.push(cdf.last().unwrap() + p / total);
        }
        for k in 0..n {
            let u = ((k as f64 + rng.random::<f64>()) / n as f64).min(1.0 - 1e-12);
            let i = cdf.partition_point(|&c| c <= u).saturating_sub(1).min(pdf.len() - 1);
            let frac = (u - cdf[i]) / (cdf[i + 1] - cdf[i]);
            merged.push(depths[i] + frac * (depths[i + 1] - depths[i]));
        }
    }
    merged.sort_by(|a, b| a.total_cmp(b));
    merged.dedup();
    merged
}

/// Mean rendering loss over `rays` at fixed sample depths, with its exact
/// gradient when requested.
pub fn render_loss<T: Real>(
    model: &FieldModel<T>,
    rays: &[RenderRay],
    depths: &[Vec<f64>],
    want_grad: bool,
) -> Result<(RenderLossReport, Option<Params<T>>)> {
    if rays.is_empty() || rays.len() != depths.len() {
        return Err(Error::EmptyBatch("need one depth list per ray".into()));
    }
    for d in depths {
        check_depths(d)?;
    }
    let ns = model.arch.n_classes;
    let n_rays = rays.len();
    let n_sem = rays.iter().filter(|r| r.class.is_some()).count();
    let inv_rays = T::one() / T::lit(n_rays as f64);
    let eps = T::lit(TRANSPARENCY_EPS);
    let per_chunk = (CHUNK_ROWS / depths[0].len().max(1)).max(1);
    let items: Vec<usize> = (0..n_rays).collect();

    let parts: Vec<(RenderLossReport, Option<super::ChunkGrad<T>>)> = items
        .par_chunks(per_chunk)
        .map(|chunk| {
            let mut qs = Vec::new();
            let mut spans = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let r = &rays[i];
                spans.push((qs.len(), depths[i].len()));
                for &d in &depths[i] {
                    let p = [0, 1, 2].map(|k| T::lit(r.origin[k] + d * r.direction[k]));
                    qs.push(Query4::from_point(p, T::lit(r.time)));
                }
            }
            let (out, cache) = model.forward_rows(&qs, want_grad);
            let mut dout = Array2::<T>::zeros(out.raw_dim());
            let mut rep = RenderLossReport::default();
            for (&i, &(start, n)) in chunk.iter().zip(&spans) {
                let ray = &rays[i];
                let ds: Vec<T> = depths[i].iter().map(|&d| T::lit(d)).collect();
                let occ: Vec<T> = (0..n).map(|k| out[[start + k, 0]].sigmoid()).collect();
                let probs: Vec<Vec<T>> = (0..n)
                    .map(|k| {
                        let mut p: Vec<T> = (0..ns).map(|j| out[[start + k, 1 + j]]).collect();
                        crate::scalar::softmax_in_place(&mut p);
                        p
                    })
                    .collect();
                let c = composite(&occ, &ds);
                let s = c.opacity_sum;
                let sg = s.max(eps);
                let clamped = s < eps;
                rep.transparent += usize::from(clamped);
                // dL/dw_k from the depth term.
                let target = T::lit(ray.depth);
                let err = c.depth - target;
                rep.depth += err.abs().as_f64();
                let g_d = if err > T::zero() { T::one() } else if err < T::zero() { -T::one() } else { T::zero() };
                let mut g_w: Vec<T> = ds
                    .iter()
                    .map(|&d| if clamped { g_d * d / eps } else { g_d * (d - c.depth) / s })
                    .collect();
                let mut g_p_c = vec![T::zero(); n];
                if let Some(cls) = ray.class {
                    let cls = cls as usize;
                    let sc_raw: T = c.weights.iter().zip(&probs).map(|(&w, p)| w * p[cls]).sum::<T>() / sg;
                    let sc = sc_raw.max(T::lit(MIN_PROB));
                    rep.sem += (-sc.ln()).as_f64();
                    if sc_raw >= T::lit(MIN_PROB) {
                        for k in 0..n {
                            let pk = probs[k][cls];
                            g_w[k] -= if clamped { pk / eps } else { (pk - sc) / s } / sc;
                            g_p_c[k] = -c.weights[k] / (sg * sc);
                        }
                    }
                }
                // Through transmittance: dL/dz_i = o_i(1-o_i)T_i G_i - o_i Σ_{k>i} w_k G_k.
                let mut suffix = T::zero();
                for k in (0..n).rev() {
                    let o = occ[k];
                    let dz = o * (T::one() - o) * c.transmittances[k] * g_w[k] - o * suffix;
                    suffix += c.weights[k] * g_w[k];
                    dout[[start + k, 0]] = dz * inv_rays;
                    if let Some(cls) = ray.class {
                        let cls = cls as usize;
                        let gp = g_p_c[k] * probs[k][cls];
                        for j in 0..ns {
                            let delta = if j == cls { T::one() } else { T::zero() };
                            dout[[start + k, 1 + j]] = gp * (delta - probs[k][j]) * inv_rays;
                        }
                    }
                }
            }
            (rep, cache.map(|c| model.backward_rows(c, dout)))
        })
        .collect();

    let mut rep = RenderLossReport { n_rays, n_sem, ..Default::default() };
    let mut grads = want_grad.then(|| Params::zeros_like(&model.params));
    for (r, g) in parts {
        rep.depth += r.depth;
        rep.sem += r.sem;
        rep.transparent += r.transparent;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            FieldModel::accumulate(acc, g);
        }
    }
    rep.depth /= n_rays as f64;
    // Gradient normalises by all rays; report the same normalisation.
    rep.sem /= n_rays as f64;
    rep.total = rep.depth + rep.sem;
    Ok((rep, grads))
}

/// Trains with rendered depth and semantics as the only supervision.
pub fn train_rendering_baseline<T: Real>(
    model: &FieldModel<T>,
    rays: &[RenderRay],
    cfg: &RenderConfig,
) -> Result<(FieldModel<T>, Vec<RenderLossReport>)> {
    cfg.train.validate()?;
    if rays.is_empty() {
        return Err(Error::EmptyBatch("no supervision rays".into()));
    }
    if !(cfg.near > 0.0 && cfg.near < cfg.far) || cfg.n_coarse < 2 {
        return Err(Error::InvalidArgument("need 0 < near < far and at least two coarse samples".into()));
    }
    let tc = &cfg.train;
    let mut model = model.clone();
    let mut opt = AdamW::new(&model.params, tc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut jitter = ChaCha8Rng::seed_from_u64(tc.seed);
    jitter.set_stream(1);
    let mut perm: Vec<usize> = (0..rays.len()).collect();
    perm.shuffle(&mut rng);
    let bs = tc.batch_size.min(rays.len());
    let mut pos = 0;
    let mut history = Vec::with_capacity(tc.total_steps);
    for step in 0..tc.total_steps {
        if pos + bs > perm.len() {
            perm.shuffle(&mut rng);
            pos = 0;
        }
        let batch: Vec<RenderRay> = perm[pos..pos + bs].iter().map(|&i| rays[i].clone()).collect();
        pos += bs;
        let coarse: Vec<Vec<f64>> =
            batch.iter().map(|_| exponential_depths(cfg.near, cfg.far, cfg.n_coarse, Some(&mut jitter))).collect();
        let qs: Vec<Query4<T>> = batch
            .iter()
            .zip(&coarse)
            .flat_map(|(r, ds)| {
                ds.iter().map(move |&d| {
                    let p = [0, 1, 2].map(|k| T::lit(r.origin[k] + d * r.direction[k]));
                    Query4::from_point(p, T::lit(r.time))
                })
            })
            .collect();
        let logits = model.forward_logits(&qs);
        let depths: Vec<Vec<f64>> = coarse
            .iter()
            .enumerate()
            .map(|(i, ds)| {
                let occ: Vec<f64> = (0..ds.len()).map(|k| logits[[i * cfg.n_coarse + k, 0]].sigmoid().as_f64()).collect();
                let w = composite(&occ, ds).weights;
                importance_depths(ds, &w, cfg.n_fine, &mut jitter)
            })
            .collect();
        let (report, grads) = render_loss(&model, &batch, &depths, true)?;
        let grads = grads.expect("gradient requested");
        if !report.total.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged { step });
        }
        opt.step(&mut model.params, &grads, lr_at(step, tc));
        if step % 500 == 0 {
            log::info!("render step {step}: loss {:.5} (depth {:.4}, sem {:.4})", report.total, report.depth, report.sem);
        }
        history.push(report);
    }
    Ok((model, history))
}
