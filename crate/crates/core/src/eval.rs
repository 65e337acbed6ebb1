//! Voxel prediction, per-class IoU and RayIoU.

use std::io::Write;

use rayon::prelude::*;

use crate::field::FieldModel;
use crate::geometry::Query4;
use crate::scalar::Real;
use crate::scene::{slab_interval, GridSpec, ScanSpec, SceneSpec, VoxelVolume};
use crate::{Error, Result};

/// Queries the field at every cell centre.
///
/// A cell is occupied iff its occupancy probability is at least
/// `occ_threshold`; its class is the semantic argmax, lowest index on ties.
pub fn predict_volume<T: Real>(model: &FieldModel<T>, grid: GridSpec, time: f64, occ_threshold: f64) -> VoxelVolume {
    let n = model.arch.n_classes;
    let queries: Vec<Query4<T>> = (0..grid.len())
        .map(|i| {
            let c = grid.center(grid.coords(i));
            Query4::new(T::lit(c[0]), T::lit(c[1]), T::lit(c[2]), T::lit(time))
        })
        .collect();
    let logits = model.forward_logits(&queries);
    let labels = logits
        .rows()
        .into_iter()
        .map(|row| {
            let p = row[0].sigmoid().as_f64();
            if p >= occ_threshold {
                let sem: Vec<f64> = row.iter().skip(1).take(n).map(|v| v.as_f64()).collect();
                crate::scalar::argmax(&sem) as u16 + 1
            } else {
                0
            }
        })
        .collect();
    VoxelVolume { grid, labels, reference_time: time }
}

/// Class count and which classes count as dynamic.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSet {
    pub n_classes: usize,
    pub dynamic: Vec<u16>,
}

impl ClassSet {
    pub fn new(n_classes: usize, dynamic: Vec<u16>) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::InvalidArgument("need at least one class".into()));
        }
        if let Some(c) = dynamic.iter().find(|&&c| c as usize >= n_classes) {
            return Err(Error::InvalidArgument(format!("dynamic class {c} out of range")));
        }
        Ok(Self { n_classes, dynamic })
    }

    /// Classes of primitives flagged dynamic in `scene`.
    pub fn from_scene(scene: &SceneSpec, n_classes: usize) -> Result<Self> {
        let mut dynamic: Vec<u16> = scene.primitives.iter().filter(|p| p.dynamic).map(|p| p.class_id).collect();
        dynamic.sort_unstable();
        dynamic.dedup();
        Self::new(n_classes, dynamic)
    }
}

/// A mean over a set of defined values. `value` is 1.0 when `support` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub support: usize,
}

impl Score {
    fn mean_of(values: impl Iterator<Item = f64>) -> Self {
        let (mut sum, mut n) = (0.0, 0usize);
        for v in values {
            sum += v;
            n += 1;
        }
        if n == 0 {
            Score { value: 1.0, support: 0 }
        } else {
            Score { value: sum / n as f64, support: n }
        }
    }

    pub fn is_vacuous(&self) -> bool {
        self.support == 0
    }
}

/// Per-class values plus the class, dynamic-class and binary occupancy means.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    /// `None` where the class never occurs in either input.
    pub per_class: Vec<Option<f64>>,
    pub mean: Score,
    pub dynamic_mean: Score,
    pub occupancy: Score,
}

impl ClassScores {
    fn build(per_class: Vec<Option<f64>>, occupancy: Score, classes: &ClassSet) -> Self {
        let mean = Score::mean_of(per_class.iter().flatten().copied());
        let dynamic_mean = Score::mean_of(classes.dynamic.iter().filter_map(|&c| per_class[c as usize]));
        Self { per_class, mean, dynamic_mean, occupancy }
    }
}

fn check_volumes(pred: &VoxelVolume, gt: &VoxelVolume, classes: &ClassSet) -> Result<()> {
    if !pred.grid.matches(&gt.grid) || pred.labels.len() != gt.labels.len() {
        return Err(Error::InvalidArgument("prediction and ground truth grids differ".into()));
    }
    for v in [pred, gt] {
        if let Some(&l) = v.labels.iter().find(|&&l| l as usize > classes.n_classes) {
            return Err(Error::InvalidArgument(format!("voxel class {} out of range", l - 1)));
        }
    }
    Ok(())
}

/// Voxel IoU per class and for binary occupancy.
pub fn iou(pred: &VoxelVolume, gt: &VoxelVolume, classes: &ClassSet) -> Result<ClassScores> {
    check_volumes(pred, gt, classes)?;
    let n = classes.n_classes;
    let mut inter = vec![0usize; n];
    let mut union = vec![0usize; n];
    let (mut occ_i, mut occ_u) = (0usize, 0usize);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if p != 0 || g != 0 {
            occ_u += 1;
            if p != 0 && g != 0 {
                occ_i += 1;
            }
        }
        if p == g {
            if p != 0 {
                inter[p as usize - 1] += 1;
                union[p as usize - 1] += 1;
            }
        } else {
            if p != 0 {
                union[p as usize - 1] += 1;
            }
            if g != 0 {
                union[g as usize - 1] += 1;
            }
        }
    }
    let per_class = (0..n).map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64)).collect();
    let occupancy = if occ_u == 0 {
        Score { value: 1.0, support: 0 }
    } else {
        Score { value: occ_i as f64 / occ_u as f64, support: occ_u }
    };
    Ok(ClassScores::build(per_class, occupancy, classes))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRay {
    pub origin: [f64; 3],
    /// Unit length.
    pub direction: [f64; 3],
}

impl EvalRay {
    /// Normalises `direction`; errors on a zero or non-finite ray.
    pub fn new(origin: [f64; 3], direction: [f64; 3]) -> Result<Self> {
        let n = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() || origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("evaluation ray must be finite and non-zero".into()));
        }
        Ok(Self { origin, direction: direction.map(|v| v / n) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayIoUConfig {
    /// Positive and strictly increasing, in metres.
    pub depth_tolerances: Vec<f64>,
    pub rays: Vec<EvalRay>,
}

impl RayIoUConfig {
    pub const DEFAULT_TOLERANCES: [f64; 3] = [1.0, 2.0, 4.0];

    pub fn new(depth_tolerances: Vec<f64>, rays: Vec<EvalRay>) -> Result<Self> {
        let cfg = Self { depth_tolerances, rays };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The scan's rays from the sensor poses of `frames`.
    pub fn from_scan(scan: &ScanSpec, frames: &[usize], depth_tolerances: Vec<f64>) -> Result<Self> {
        let mut rays = Vec::new();
        for &k in frames {
            if k >= scan.poses.len() {
                return Err(Error::InvalidArgument(format!("scan frame {k} out of range")));
            }
            let (o, dirs) = scan.rays(k);
            for d in dirs {
                rays.push(EvalRay::new(o, d)?);
            }
        }
        Self::new(depth_tolerances, rays)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.depth_tolerances;
        if t.is_empty() || !t.iter().all(|v| *v > 0.0 && v.is_finite()) || t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("depth tolerances must be positive and increasing".into()));
        }
        Ok(())
    }
}

/// Per-tolerance confusion counts. `per_class[k][c]` and `occupancy[k]` hold
/// `[tp, fp, fn]` for tolerance `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RayCounts {
    pub per_class: Vec<Vec<[u64; 3]>>,
    pub occupancy: Vec<[u64; 3]>,
    /// Rays whose ground-truth hit has each class.
    pub support: Vec<u64>,
}

/// First hit along a ray: entry depth and class.
pub type RayHit = Option<(f64, u16)>;

fn grid_span(grid: &GridSpec, ray: &EvalRay) -> Option<(f64, f64)> {
    let (t0, t1) = slab_interval(ray.origin, ray.direction, grid.min, grid.max())?;
    let ts = t0.max(0.0);
    (t1 > ts).then_some((ts, t1))
}

/// Part of the ray inside cell `c` after `ts`, when it has positive length.
fn cell_entry(grid: &GridSpec, ray: &EvalRay, c: [usize; 3], ts: f64) -> Option<f64> {
    let (lo, hi) = grid.cell_bounds(c);
    let (a, b) = slab_interval(ray.origin, ray.direction, lo, hi)?;
    let a = a.max(ts);
    (b > a).then_some(a)
}

/// Integer grid traversal to the first occupied cell.
pub fn march(vol: &VoxelVolume, ray: &EvalRay) -> RayHit {
    let g = &vol.grid;
    let (ts, _) = grid_span(g, ray)?;
    let (o, d, cs) = (ray.origin, ray.direction, g.cell_size);
    let mut c = [0i64; 3];
    for k in 0..3 {
        let p = o[k] + d[k] * ts;
        let u = (p - g.min[k]) / cs;
        let mut i = u.floor() as i64;
        if d[k] < 0.0 && u == u.floor() {
            i -= 1;
        }
        c[k] = i.clamp(0, g.dims[k] as i64 - 1);
    }
    loop {
        let cu = c.map(|v| v as usize);
        let idx = g.index(cu);
        if let Some(class) = vol.class_at(idx) {
            if let Some(a) = cell_entry(g, ray, cu, ts) {
                return Some((a, class));
            }
        }
        let mut axis = 3;
        let mut best = f64::INFINITY;
        for k in 0..3 {
            let tk = if d[k] > 0.0 {
                (g.min[k] + (c[k] + 1) as f64 * cs - o[k]) / d[k]
            } else if d[k] < 0.0 {
                (g.min[k] + c[k] as f64 * cs - o[k]) / d[k]
            } else {
                f64::INFINITY
            };
            if tk < best {
                best = tk;
                axis = k;
            }
        }
        if axis == 3 {
            return None;
        }
        c[axis] += if d[axis] > 0.0 { 1 } else { -1 };
        if c[axis] < 0 || c[axis] >= g.dims[axis] as i64 {
            return None;
        }
    }
}

/// Reference first hit: intersects the ray with every occupied cell and keeps
/// the smallest entry depth (lowest cell index on ties).
pub fn first_hit_exhaustive(vol: &VoxelVolume, ray: &EvalRay) -> RayHit {
    let g = &vol.grid;
    let (ts, _) = grid_span(g, ray)?;
    let mut best: RayHit = None;
    for (idx, &l) in vol.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        if let Some(a) = cell_entry(g, ray, g.coords(idx), ts) {
            if best.is_none_or(|(b, _)| a < b) {
                best = Some((a, l - 1));
            }
        }
    }
    best
}

fn count_rays(gt: &[RayHit], pred: &[RayHit], classes: &ClassSet, tolerances: &[f64]) -> RayCounts {
    let n = classes.n_classes;
    let mut per_class = vec![vec![[0u64; 3]; n]; tolerances.len()];
    let mut occupancy = vec![[0u64; 3]; tolerances.len()];
    let mut support = vec![0u64; n];
    for (g, p) in gt.iter().zip(pred) {
        if let Some((_, c)) = g {
            support[*c as usize] += 1;
        }
        for (k, &tau) in tolerances.iter().enumerate() {
            let near = matches!((g, p), (Some((dg, _)), Some((dp, _))) if (dp - dg).abs() <= tau);
            let same = near && matches!((g, p), (Some((_, cg)), Some((_, cp))) if cg == cp);
            let occ = &mut occupancy[k];
            if near {
                occ[0] += 1;
            } else {
                occ[1] += p.is_some() as u64;
                occ[2] += g.is_some() as u64;
            }
            let pc = &mut per_class[k];
            if same {
                pc[g.unwrap().1 as usize][0] += 1;
            } else {
                if let Some((_, c)) = p {
                    pc[*c as usize][1] += 1;
                }
                if let Some((_, c)) = g {
                    pc[*c as usize][2] += 1;
                }
            }
        }
    }
    RayCounts { per_class, occupancy, support }
}

fn ray_scores(counts: &RayCounts, classes: &ClassSet) -> ClassScores {
    let n_tol = counts.occupancy.len() as f64;
    let ratio = |v: &[u64; 3]| {
        let den = v[0] + v[1] + v[2];
        (den > 0).then(|| v[0] as f64 / den as f64)
    };
    let avg = |vals: Vec<Option<f64>>| -> Option<f64> {
        // Undefined at one tolerance means undefined at all of them.
        vals.iter().all(Option::is_some).then(|| vals.iter().flatten().sum::<f64>() / n_tol)
    };
    let per_class = (0..classes.n_classes)
        .map(|c| avg(counts.per_class.iter().map(|pc| ratio(&pc[c])).collect()))
        .collect();
    let occupancy = match avg(counts.occupancy.iter().map(ratio).collect()) {
        Some(v) => Score { value: v, support: counts.occupancy[0].iter().sum::<u64>() as usize },
        None => Score { value: 1.0, support: 0 },
    };
    ClassScores::build(per_class, occupancy, classes)
}

fn ray_iou_with(
    pred: &VoxelVolume,
    gt: &VoxelVolume,
    classes: &ClassSet,
    cfg: &RayIoUConfig,
    hit: fn(&VoxelVolume, &EvalRay) -> RayHit,
) -> Result<(ClassScores, RayCounts)> {
    check_volumes(pred, gt, classes)?;
    cfg.validate()?;
    let g: Vec<RayHit> = cfg.rays.par_iter().map(|r| hit(gt, r)).collect();
    let p: Vec<RayHit> = cfg.rays.par_iter().map(|r| hit(pred, r)).collect();
    let counts = count_rays(&g, &p, classes, &cfg.depth_tolerances);
    Ok((ray_scores(&counts, classes), counts))
}

/// RayIoU averaged over the configured depth tolerances.
///
/// Each ray marches both volumes to their first occupied cell. At tolerance
/// τ it is a true positive for class `c` when both hit, both hits are `c` and
/// their depths differ by at most τ. Otherwise it is a false positive for the
/// predicted class and a false negative for the ground-truth class.
pub fn ray_iou(pred: &VoxelVolume, gt: &VoxelVolume, classes: &ClassSet, cfg: &RayIoUConfig) -> Result<(ClassScores, RayCounts)> {
    ray_iou_with(pred, gt, classes, cfg, march)
}

/// [`ray_iou`] with the exhaustive per-cell first-hit search.
pub fn brute_force_ray_iou(
    pred: &VoxelVolume,
    gt: &VoxelVolume,
    classes: &ClassSet,
    cfg: &RayIoUConfig,
) -> Result<(ClassScores, RayCounts)> {
    ray_iou_with(pred, gt, classes, cfg, first_hit_exhaustive)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub iou: ClassScores,
    pub rayiou: ClassScores,
    /// Ground-truth voxels per class.
    pub support: Vec<usize>,
    pub ray_counts: RayCounts,
    pub depth_tolerances: Vec<f64>,
    pub occ_threshold: Option<f64>,
}

pub fn evaluate(pred: &VoxelVolume, gt: &VoxelVolume, classes: &ClassSet, cfg: &RayIoUConfig) -> Result<MetricsReport> {
    let iou = iou(pred, gt, classes)?;
    let (rayiou, ray_counts) = ray_iou(pred, gt, classes, cfg)?;
    let mut support = vec![0usize; classes.n_classes];
    for &l in gt.labels.iter().filter(|&&l| l != 0) {
        support[l as usize - 1] += 1;
    }
    Ok(MetricsReport {
        iou,
        rayiou,
        support,
        ray_counts,
        depth_tolerances: cfg.depth_tolerances.clone(),
        occ_threshold: None,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl MetricsReport {
    /// `class,iou,rayiou,support`; undefined values are left empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "class,iou,rayiou,support")?;
        for c in 0..self.support.len() {
            writeln!(
                w,
                "{c},{},{},{}",
                fmt_opt(self.iou.per_class[c]),
                fmt_opt(self.rayiou.per_class[c]),
                self.support[c]
            )?;
        }
        Ok(())
    }

    pub fn summary_header() -> &'static str {
        "mean_iou,dyn_iou,occ_iou,mean_rayiou,dyn_rayiou,occ_rayiou"
    }

    pub fn summary_line(&self) -> String {
        let v = [
            self.iou.mean,
            self.iou.dynamic_mean,
            self.iou.occupancy,
            self.rayiou.mean,
            self.rayiou.dynamic_mean,
            self.rayiou.occupancy,
        ];
        v.iter().map(|s| format!("{:.6}", s.value)).collect::<Vec<_>>().join(",")
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::summary_header())?;
        writeln!(w, "{}", self.summary_line())?;
        Ok(())
    }
}
