//! Multi-task query loss, its analytic gradient and the AdamW training loop.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{FieldModel, Params, CHUNK_ROWS};
use crate::geometry::Query4;
use crate::supervision::QueryBatch;
use crate::{Error, Real, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_occ: f64,
    pub lambda_sem: f64,
    pub lambda_vfm: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Per-class semantic loss weights; empty means all ones.
    pub class_weights: Vec<f64>,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_occ: 1.0,
            lambda_sem: 0.5,
            lambda_vfm: 0.5,
            learning_rate: 1e-3,
            warmup_steps: 200,
            total_steps: 5000,
            batch_size: 4096,
            class_weights: Vec::new(),
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_occ, self.lambda_sem, self.lambda_vfm, self.weight_decay];
        if ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || self.class_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("loss and class weights must be non-negative".into()));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("steps and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn class_weight(&self, c: u16) -> f64 {
        self.class_weights.get(c as usize).copied().unwrap_or(1.0)
    }
}

/// Linear warmup to the base rate, then cosine decay to zero at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let base = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return base * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let p = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub occ: f64,
    pub sem: f64,
    pub vfm: f64,
    pub n_occ: usize,
    pub n_sem: usize,
    pub n_vfm: usize,
}

/// Training targets in contiguous form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet<T> {
    pub queries: Vec<Query4<T>>,
    pub occupied: Vec<bool>,
    pub semantic: Vec<Option<u16>>,
    /// `len × feature_dim`; rows without a target are zero.
    pub features: Vec<T>,
    pub has_feature: Vec<bool>,
    pub feature_dim: usize,
}

impl<T: Real> QuerySet<T> {
    pub fn from_batch(batch: &QueryBatch) -> Result<Self> {
        let fd = batch.feature_dim;
        let n = batch.len();
        let mut set = Self {
            queries: Vec::with_capacity(n),
            occupied: Vec::with_capacity(n),
            semantic: Vec::with_capacity(n),
            features: vec![T::zero(); n * fd],
            has_feature: Vec::with_capacity(n),
            feature_dim: fd,
        };
        for (i, s) in batch.samples.iter().enumerate() {
            if !s.query.is_finite() {
                return Err(Error::InvalidArgument(format!("query {i} is not finite")));
            }
            set.queries.push(s.query.cast());
            set.occupied.push(s.occupied);
            set.semantic.push(if s.occupied { s.semantic } else { None });
            let has = s.occupied && fd > 0 && s.feature.is_some();
            if let (true, Some(f)) = (has, &s.feature) {
                if f.len() != fd {
                    return Err(Error::FeatureDimMismatch { expected: fd, found: f.len() });
                }
                for (d, v) in set.features[i * fd..(i + 1) * fd].iter_mut().zip(f) {
                    *d = T::lit(*v as f64);
                }
            }
            set.has_feature.push(has);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Default, Clone, Copy)]
struct Sums {
    occ: f64,
    sem: f64,
    vfm: f64,
}

/// Loss over `idx` and optionally the gradient. Chunks are evaluated in
/// parallel and reduced in chunk order.
fn loss_and_grad<T: Real>(
    model: &FieldModel<T>,
    set: &QuerySet<T>,
    idx: &[usize],
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<(LossReport, Option<Params<T>>)> {
    if idx.is_empty() {
        return Err(Error::EmptyBatch("loss needs at least one query".into()));
    }
    let ns = model.arch.n_classes;
    let fd = model.arch.feature_dim;
    if set.feature_dim != fd && set.has_feature.iter().any(|&h| h) {
        return Err(Error::FeatureDimMismatch { expected: fd, found: set.feature_dim });
    }
    if let Some(c) = idx.iter().filter_map(|&i| set.semantic[i]).find(|&c| c as usize >= ns) {
        return Err(Error::InvalidArgument(format!("semantic target {c} but the model has {ns} classes")));
    }
    let n = idx.len();
    let n_sem = idx.iter().filter(|&&i| set.semantic[i].is_some()).count();
    let n_vfm = idx.iter().filter(|&&i| set.has_feature[i]).count();
    let (lo, ls, lv) = (T::lit(cfg.lambda_occ), T::lit(cfg.lambda_sem), T::lit(cfg.lambda_vfm));
    let inv_n = T::one() / T::lit(n as f64);
    let inv_sem = T::one() / T::lit(n_sem.max(1) as f64);
    let inv_vfm = T::one() / T::lit((n_vfm * fd).max(1) as f64);
    let weights: Vec<T> = (0..ns).map(|c| T::lit(cfg.class_weight(c as u16))).collect();

    let parts: Vec<(Sums, Option<super::ChunkGrad<T>>)> = idx
        .par_chunks(CHUNK_ROWS)
        .map(|chunk| {
            let qs: Vec<Query4<T>> = chunk.iter().map(|&i| set.queries[i]).collect();
            let (out, cache) = model.forward_rows(&qs, want_grad);
            let mut d = Array2::<T>::zeros(out.raw_dim());
            let mut sums = Sums::default();
            let mut probs = vec![T::zero(); ns];
            for (r, &i) in chunk.iter().enumerate() {
                let row = out.row(r);
                let row = row.as_slice().expect("contiguous");
                let z = row[0];
                let y = if set.occupied[i] { T::one() } else { T::zero() };
                sums.occ += (z.softplus() - y * z).as_f64();
                d[[r, 0]] = lo * (z.sigmoid() - y) * inv_n;
                if let Some(c) = set.semantic[i] {
                    let c = c as usize;
                    probs.copy_from_slice(&row[1..1 + ns]);
                    let m = probs.iter().copied().fold(T::neg_infinity(), T::max);
                    let lse = m + probs.iter().map(|&l| (l - m).exp()).sum::<T>().ln();
                    sums.sem += (weights[c] * (lse - row[1 + c])).as_f64();
                    let scale = ls * weights[c] * inv_sem;
                    for j in 0..ns {
                        let p = (row[1 + j] - lse).exp();
                        let target = if j == c { T::one() } else { T::zero() };
                        d[[r, 1 + j]] = scale * (p - target);
                    }
                }
                if set.has_feature[i] {
                    let tgt = &set.features[i * fd..(i + 1) * fd];
                    for k in 0..fd {
                        let diff = row[1 + ns + k] - tgt[k];
                        sums.vfm += diff.abs().as_f64();
                        let sign = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        d[[r, 1 + ns + k]] = lv * sign * inv_vfm;
                    }
                }
            }
            (sums, cache.map(|c| model.backward_rows(c, d)))
        })
        .collect();

    let mut total = Sums::default();
    let mut grads = want_grad.then(|| Params::zeros_like(&model.params));
    for (s, g) in parts {
        total.occ += s.occ;
        total.sem += s.sem;
        total.vfm += s.vfm;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            FieldModel::accumulate(acc, g);
        }
    }
    let occ = total.occ / n as f64;
    let sem = if n_sem > 0 { total.sem / n_sem as f64 } else { 0.0 };
    let vfm = if n_vfm > 0 && fd > 0 { total.vfm / (n_vfm * fd) as f64 } else { 0.0 };
    let report = LossReport {
        total: cfg.lambda_occ * occ + cfg.lambda_sem * sem + cfg.lambda_vfm * vfm,
        occ,
        sem,
        vfm,
        n_occ: n,
        n_sem,
        n_vfm,
    };
    Ok((report, grads))
}

/// Loss over the whole batch.
pub fn loss<T: Real>(model: &FieldModel<T>, batch: &QueryBatch, cfg: &TrainConfig) -> Result<LossReport> {
    let set = QuerySet::from_batch(batch)?;
    let idx: Vec<usize> = (0..set.len()).collect();
    Ok(loss_and_grad(model, &set, &idx, cfg, false)?.0)
}

/// Loss and exact gradient over the whole batch.
pub fn backward<T: Real>(model: &FieldModel<T>, batch: &QueryBatch, cfg: &TrainConfig) -> Result<(LossReport, Params<T>)> {
    let set = QuerySet::from_batch(batch)?;
    let idx: Vec<usize> = (0..set.len()).collect();
    let (r, g) = loss_and_grad(model, &set, &idx, cfg, true)?;
    Ok((r, g.expect("gradient requested")))
}

/// Adam with decoupled weight decay on grid features and weight matrices.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: Params<T>,
    v: Params<T>,
    t: i32,
    pub weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &Params<T>, weight_decay: f64) -> Self {
        Self { m: Params::zeros_like(params), v: Params::zeros_like(params), t: 0, weight_decay }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::one() - b1.powi(self.t);
        let bc2 = T::one() - b2.powi(self.t);
        let step = T::lit(lr) / bc1;
        let eps = T::lit(ADAM_EPS);
        let decay = T::lit(lr * self.weight_decay);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((p, decays), (g, _)), (m, _)), (v, _)) in tensors {
            for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = (b1 * *m + c1 * *g).flush();
                *v = (b2 * *v + c2 * *g * *g).flush();
                if decays {
                    *p -= decay * *p;
                }
                *p -= step * *m / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}

/// Mini-batch training. Batches walk a seeded permutation of the queries,
/// reshuffled every epoch. Returns the trained model and the per-step loss.
pub fn train<T: Real>(
    model: &FieldModel<T>,
    queries: &QueryBatch,
    cfg: &TrainConfig,
) -> Result<(FieldModel<T>, Vec<LossReport>)> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(Error::EmptyBatch("no training queries".into()));
    }
    let set = QuerySet::from_batch(queries)?;
    let mut model = model.clone();
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perm: Vec<usize> = (0..set.len()).collect();
    perm.shuffle(&mut rng);
    let bs = cfg.batch_size.min(set.len());
    let mut pos = 0;
    let mut history = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        if pos + bs > perm.len() {
            perm.shuffle(&mut rng);
            pos = 0;
        }
        let idx = &perm[pos..pos + bs];
        pos += bs;
        let (report, grads) = loss_and_grad(&model, &set, idx, cfg, true)?;
        let grads = grads.expect("gradient requested");
        if !report.total.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged { step });
        }
        opt.step(&mut model.params, &grads, lr_at(step, cfg));
        if step % 500 == 0 {
            log::info!("step {step}: loss {:.5} (occ {:.5}, sem {:.5}, vfm {:.5})", report.total, report.occ, report.sem, report.vfm);
        }
        history.push(report);
    }
    if !model.params.all_finite() {
        return Err(Error::Diverged { step: cfg.total_steps });
    }
    Ok((model, history))
}

/// `step,total,occ,sem,vfm` with a header line.
pub fn write_loss_csv<W: Write>(history: &[LossReport], mut w: W) -> Result<()> {
    writeln!(w, "step,total,occ,sem,vfm")?;
    for (i, r) in history.iter().enumerate() {
        writeln!(w, "{i},{},{},{},{}", r.total, r.occ, r.sem, r.vfm)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_arch;
    use super::*;
    use crate::supervision::QuerySample;
    use rand::Rng;

    pub(crate) fn random_batch(n: usize, n_classes: u16, fd: usize, seed: u64) -> QueryBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let occupied = rng.random_bool(0.5);
                QuerySample {
                    query: Query4::new(
                        rng.random_range(-15.0..15.0),
                        rng.random_range(-15.0..15.0),
                        rng.random_range(-1.0..3.0),
                        rng.random_range(-1.0..1.0),
                    ),
                    occupied,
                    semantic: (occupied && i % 5 != 0).then(|| rng.random_range(0..n_classes)),
                    feature: (occupied && fd > 0).then(|| (0..fd).map(|_| rng.random_range(-1.0f32..1.0)).collect()),
                    source: (0, i as u32),
                }
            })
            .collect();
        QueryBatch::from_samples(samples, fd)
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig { learning_rate: 1.0, warmup_steps: 10, total_steps: 110, ..Default::default() };
        assert!((lr_at(0, &cfg) - 0.1).abs() < 1e-12);
        assert!((lr_at(9, &cfg) - 1.0).abs() < 1e-12);
        assert!((lr_at(10, &cfg) - 1.0).abs() < 1e-12);
        assert!((lr_at(60, &cfg) - 0.5).abs() < 1e-12);
        assert!(lr_at(109, &cfg) < 1e-3);
    }

    #[test]
    fn reference_loss_values() {
        let mut m = FieldModel::<f64>::new(small_arch(), 1).unwrap();
        m.zero_head();
        let b = random_batch(64, 3, 0, 2);
        let cfg = TrainConfig::default();
        let r = loss(&m, &b, &cfg).unwrap();
        assert!((r.occ - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((r.sem - 3f64.ln()).abs() < 1e-12);
        assert!((r.total - (cfg.lambda_occ * r.occ + cfg.lambda_sem * r.sem + cfg.lambda_vfm * r.vfm)).abs() < 1e-9);
        assert!(matches!(loss(&m, &QueryBatch::default(), &cfg), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn perfect_predictions_give_near_zero_loss() {
        // All-free batch with a head biased hard towards "free".
        let mut m = FieldModel::<f64>::new(small_arch(), 1).unwrap();
        m.zero_head();
        m.params.layers.last_mut().unwrap().b[0] = -40.0;
        let mut b = random_batch(32, 3, 2, 3);
        b.samples.iter_mut().for_each(|s| {
            s.occupied = false;
            s.semantic = None;
            s.feature = None;
        });
        let b = QueryBatch::from_samples(b.samples, 2);
        let r = loss(&m, &b, &TrainConfig::default()).unwrap();
        assert!(r.total < 1e-15 && r.sem == 0.0 && r.vfm == 0.0);
    }

    fn param_at<T: Real>(p: &mut Params<T>, tensor: usize, i: usize) -> &mut T {
        let mut t = p.tensors_mut();
        let (slice, _) = t.swap_remove(tensor);
        &mut slice[i]
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = small_arch();
        let cfg = TrainConfig { class_weights: vec![0.5, 1.0, 1.5], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..10 {
            let m = FieldModel::<f64>::new(arch.clone(), trial).unwrap();
            let b = random_batch(100, 3, 2, 100 + trial);
            let (_, g) = backward(&m, &b, &cfg).unwrap();
            let n_tensors = g.tensors().len();
            for _ in 0..20 {
                let t = rng.random_range(0..n_tensors);
                let len = g.tensors()[t].0.len();
                // For the grid, pick a touched entry so the check is informative.
                let i = if t == 0 {
                    let nz: Vec<usize> = (0..len).filter(|&i| g.tensors()[0].0[i] != 0.0).collect();
                    nz[rng.random_range(0..nz.len())]
                } else {
                    rng.random_range(0..len)
                };
                let h = 1e-5;
                let mut plus = m.clone();
                *param_at(&mut plus.params, t, i) += h;
                let mut minus = m.clone();
                *param_at(&mut minus.params, t, i) -= h;
                let num = (loss(&plus, &b, &cfg).unwrap().total - loss(&minus, &b, &cfg).unwrap().total) / (2.0 * h);
                let ana = g.tensors()[t].0[i];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "tensor {t} index {i}: analytic {ana} numeric {num}");
            }
        }
    }

    #[test]
    fn untouched_cells_have_zero_gradient_and_loss_scales() {
        let m = FieldModel::<f64>::new(small_arch(), 3).unwrap();
        let mut b = random_batch(50, 3, 2, 4);
        // Keep every query inside a small metric patch.
        b.samples.iter_mut().for_each(|s| {
            s.query.x = s.query.x * 0.01 + 0.5;
            s.query.y = s.query.y * 0.01 + 0.5;
        });
        let cfg = TrainConfig::default();
        let (_, g) = backward(&m, &b, &cfg).unwrap();
        let touched = g.grid.rows().into_iter().filter(|r| r.iter().any(|&v| v != 0.0)).count();
        assert!(touched > 0 && touched <= 4, "{touched}");
        let k = 3.5;
        let scaled = TrainConfig { lambda_occ: k, lambda_sem: 0.5 * k, lambda_vfm: 0.5 * k, ..cfg };
        let (_, gk) = backward(&m, &b, &scaled).unwrap();
        for ((a, _), (b, _)) in g.tensors().iter().zip(gk.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((k * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let arch = small_arch();
        let m = FieldModel::<f32>::new(arch, 1).unwrap();
        // Learnable targets: occupied below z = 1, class from the sign of x.
        let mut b = random_batch(400, 3, 0, 5);
        for s in &mut b.samples {
            s.occupied = s.query.z < 1.0;
            s.semantic = s.occupied.then_some(u16::from(s.query.x > 0.0));
        }
        let b = QueryBatch::from_samples(b.samples, 0);
        let cfg = TrainConfig { total_steps: 300, warmup_steps: 20, batch_size: 128, learning_rate: 3e-3, ..Default::default() };
        let (a, hist) = train(&m, &b, &cfg).unwrap();
        let (a2, hist2) = train(&m, &b, &cfg).unwrap();
        assert_eq!(a.params, a2.params);
        assert_eq!(hist, hist2);
        let full = |mm: &FieldModel<f32>| loss(mm, &b, &cfg).unwrap().total;
        assert!(full(&a) < 0.5 * full(&m), "{} vs {}", full(&a), full(&m));
        let mut csv = Vec::new();
        write_loss_csv(&hist, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("step,total,occ,sem,vfm\n0,"));
        assert_eq!(text.lines().count(), 301);
    }

    #[test]
    fn divergence_is_reported() {
        let m = FieldModel::<f32>::new(small_arch(), 1).unwrap();
        let b = random_batch(64, 3, 0, 5);
        let cfg = TrainConfig { total_steps: 50, warmup_steps: 1, batch_size: 64, learning_rate: 1e30, ..Default::default() };
        assert!(matches!(train(&m, &b, &cfg), Err(Error::Diverged { .. })));
    }
}
