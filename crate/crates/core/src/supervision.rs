//! 4D query generation from point clouds.
//!
//! Every surface point `p` seen from origin `o` yields free-space queries on
//! the open segment `o → p` and occupied queries in a buffer of depth `δ`
//! behind `p`. Queries inherit the point's timestamp.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::eof_as_truncated;
use crate::geometry::{add3, norm3, scale3, sub3, Query4, RigidTransform};
use crate::pointcloud::{PointCloud, PointRecord, UNLABELED};
use crate::scene::SceneSpec;
use crate::{Error, Result};

/// Rays shorter than this produce no queries.
pub const DEGENERATE_RAY: f64 = 1e-6;

const MAGIC: [u8; 4] = *b"QOQS";
const VERSION: u32 = 1;

// Stream ids reserved for batch-level draws; per-point streams use
// `(frame << 40) | index` and never reach these.
const STREAM_BALANCE: u64 = u64::MAX;
const STREAM_SHUFFLE: u64 = u64::MAX - 1;
const STREAM_SUBSAMPLE: u64 = u64::MAX - 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RDistribution {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    /// Depth of the occupied buffer behind each surface point, metres.
    pub delta: f64,
    pub n_neg_per_point: usize,
    pub n_pos_per_point: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub r_distribution: RDistribution,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            delta: 0.4,
            n_neg_per_point: 2,
            n_pos_per_point: 2,
            t_min: f64::NEG_INFINITY,
            t_max: f64::INFINITY,
            r_distribution: RDistribution::Uniform,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.t_min <= 0.0 && 0.0 <= self.t_max) {
            return Err(Error::InvalidArgument(format!(
                "temporal window [{}, {}] must contain 0",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    pub fn in_window(&self, t: f64) -> bool {
        t >= self.t_min && t <= self.t_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub query: Query4<f64>,
    pub occupied: bool,
    pub semantic: Option<u16>,
    pub feature: Option<Vec<f32>>,
    /// Cloud index and record index of the source point.
    pub source: (u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GenerationStats {
    pub points_used: usize,
    pub degenerate_skipped: usize,
    pub out_of_window: usize,
    pub positives_generated: usize,
    pub negatives_generated: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryBatch {
    pub samples: Vec<QuerySample>,
    pub positive_count: usize,
    pub negative_count: usize,
    pub feature_dim: usize,
    pub stats: GenerationStats,
}

impl QueryBatch {
    pub fn from_samples(samples: Vec<QuerySample>, feature_dim: usize) -> Self {
        let positive_count = samples.iter().filter(|s| s.occupied).count();
        let negative_count = samples.len() - positive_count;
        Self { samples, positive_count, negative_count, feature_dim, stats: GenerationStats::default() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_balanced(&self) -> bool {
        self.positive_count.abs_diff(self.negative_count) <= 1
    }
}

/// Deterministic generator for one source point.
pub fn point_rng(seed: u64, frame: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((frame as u64) << 40) | index as u64);
    rng
}

/// Uniform draw from the open interval (0, 1).
fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let r: f64 = rng.random();
        if r > 0.0 {
            return r;
        }
    }
}

fn check_ray(point: &PointRecord) -> Option<[f64; 3]> {
    let d = sub3(point.position, point.origin);
    (norm3(d) >= DEGENERATE_RAY).then_some(d)
}

/// Free-space query at `o + r·(p − o)`.
pub fn negative_query_at(point: &PointRecord, r: f64) -> Query4<f64> {
    let d = sub3(point.position, point.origin);
    Query4::from_point(add3(point.origin, scale3(d, r)), point.time)
}

/// Occupied query `r` metres behind `p` along the ray.
pub fn positive_query_at(point: &PointRecord, r: f64) -> Query4<f64> {
    let d = sub3(point.position, point.origin);
    Query4::from_point(add3(point.position, scale3(d, r / norm3(d))), point.time)
}

/// `None` for degenerate rays.
pub fn gen_negative_queries<R: Rng>(point: &PointRecord, cfg: &SamplingConfig, rng: &mut R) -> Option<Vec<QuerySample>> {
    check_ray(point)?;
    Some(
        (0..cfg.n_neg_per_point)
            .map(|_| QuerySample {
                query: negative_query_at(point, open_unit(rng)),
                occupied: false,
                semantic: None,
                feature: None,
                source: (0, 0),
            })
            .collect(),
    )
}

/// `None` for degenerate rays.
pub fn gen_positive_queries<R: Rng>(point: &PointRecord, cfg: &SamplingConfig, rng: &mut R) -> Option<Vec<QuerySample>> {
    check_ray(point)?;
    let semantic = point.is_labeled().then_some(point.class_id);
    let feature = (!point.feature.is_empty()).then(|| point.feature.clone());
    Some(
        (0..cfg.n_pos_per_point)
            .map(|_| QuerySample {
                query: positive_query_at(point, cfg.delta * open_unit(rng)),
                occupied: true,
                semantic,
                feature: feature.clone(),
                source: (0, 0),
            })
            .collect(),
    )
}

/// Both query kinds for one point: negatives first, then positives.
fn point_queries(point: &PointRecord, cfg: &SamplingConfig, frame: usize, index: usize) -> Option<Vec<QuerySample>> {
    let mut rng = point_rng(cfg.seed, frame, index);
    let mut out = gen_negative_queries(point, cfg, &mut rng)?;
    out.extend(gen_positive_queries(point, cfg, &mut rng)?);
    let source = (frame as u32, index as u32);
    out.iter_mut().for_each(|s| s.source = source);
    Some(out)
}

/// Queries from every in-window point of every cloud, balanced by uniform
/// down-sampling of the larger side and shuffled by seed.
pub fn build_query_set(clouds: &[PointCloud], cfg: &SamplingConfig) -> Result<QueryBatch> {
    cfg.validate()?;
    if clouds.is_empty() {
        return Err(Error::EmptyBatch("no point clouds given".into()));
    }
    let feature_dim = clouds[0].feature_dim;
    if let Some(pc) = clouds.iter().find(|pc| pc.feature_dim != feature_dim) {
        return Err(Error::FeatureDimMismatch { expected: feature_dim, found: pc.feature_dim });
    }
    let mut stats = GenerationStats::default();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (frame, pc) in clouds.iter().enumerate() {
        let per_point: Vec<Option<Option<Vec<QuerySample>>>> = pc
            .records
            .par_iter()
            .enumerate()
            .map(|(i, p)| cfg.in_window(p.time).then(|| point_queries(p, cfg, frame, i)))
            .collect();
        for entry in per_point {
            match entry {
                None => stats.out_of_window += 1,
                Some(None) => stats.degenerate_skipped += 1,
                Some(Some(qs)) => {
                    stats.points_used += 1;
                    for q in qs {
                        if q.occupied { positives.push(q) } else { negatives.push(q) }
                    }
                }
            }
        }
    }
    if stats.degenerate_skipped > 0 {
        log::warn!("skipped {} degenerate rays", stats.degenerate_skipped);
    }
    stats.positives_generated = positives.len();
    stats.negatives_generated = negatives.len();
    if positives.is_empty() && negatives.is_empty() {
        return Err(Error::EmptyBatch("no usable points in the temporal window".into()));
    }

    let target = positives.len().min(negatives.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_BALANCE);
    let larger = if positives.len() > target { &mut positives } else { &mut negatives };
    if larger.len() > target {
        let mut keep = index::sample(&mut rng, larger.len(), target).into_vec();
        keep.sort_unstable();
        let old = std::mem::take(larger);
        let mut it = keep.into_iter().peekable();
        *larger = old
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| (it.peek() == Some(&i)).then(|| { it.next(); s }))
            .collect();
    }

    let mut samples = negatives;
    samples.append(&mut positives);
    rng.set_stream(STREAM_SHUFFLE);
    rng.set_word_pos(0);
    samples.shuffle(&mut rng);
    let mut batch = QueryBatch::from_samples(samples, feature_dim);
    batch.stats = stats;
    Ok(batch)
}

/// Uniform balanced subset of `n` queries: `n / 2` positives and the rest
/// negatives, in their original order. Used to compare query sets at equal
/// size.
pub fn subsample_balanced(batch: &QueryBatch, n: usize, seed: u64) -> Result<QueryBatch> {
    let n_pos = n / 2;
    let n_neg = n - n_pos;
    if n_pos > batch.positive_count || n_neg > batch.negative_count {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n_pos} positives and {n_neg} negatives from {} and {}",
            batch.positive_count, batch.negative_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SUBSAMPLE);
    let mut keep = vec![false; batch.len()];
    for (occupied, want) in [(true, n_pos), (false, n_neg)] {
        let side: Vec<usize> = (0..batch.len()).filter(|&i| batch.samples[i].occupied == occupied).collect();
        for j in index::sample(&mut rng, side.len(), want) {
            keep[side[j]] = true;
        }
    }
    let samples = batch.samples.iter().zip(&keep).filter(|(_, &k)| k).map(|(s, _)| s.clone()).collect();
    let mut out = QueryBatch::from_samples(samples, batch.feature_dim);
    out.stats = batch.stats;
    Ok(out)
}

/// Applies a rigid transform to every query position.
pub fn transform_batch(batch: &QueryBatch, tf: &RigidTransform<f64>) -> QueryBatch {
    let mut out = batch.clone();
    for s in &mut out.samples {
        s.query = Query4::from_point(tf.apply(s.query.position()), s.query.t);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OracleReport {
    pub negative_purity: f64,
    pub positive_purity: f64,
    pub semantic_agreement: f64,
    pub negatives: usize,
    pub positives: usize,
    /// Positives with a semantic target that the oracle marks occupied.
    pub semantic_checked: usize,
}

/// Checks each query against the scene oracle. Semantic agreement is
/// measured over labelled positives the oracle marks occupied, so it is not
/// double-penalised for buffer overshoot already counted by positive purity.
pub fn validate_against_oracle(batch: &QueryBatch, scene: &SceneSpec) -> OracleReport {
    let (mut neg_ok, mut pos_ok, mut sem_ok, mut sem_n) = (0usize, 0usize, 0usize, 0usize);
    for s in &batch.samples {
        let truth = scene.oracle_query(s.query);
        if !s.occupied {
            neg_ok += usize::from(truth.is_none());
            continue;
        }
        pos_ok += usize::from(truth.is_some());
        if let (Some(c), Some(t)) = (s.semantic, truth) {
            sem_n += 1;
            sem_ok += usize::from(c == t);
        }
    }
    let frac = |a: usize, n: usize| if n == 0 { 1.0 } else { a as f64 / n as f64 };
    OracleReport {
        negative_purity: frac(neg_ok, batch.negative_count),
        positive_purity: frac(pos_ok, batch.positive_count),
        semantic_agreement: frac(sem_ok, sem_n),
        negatives: batch.negative_count,
        positives: batch.positive_count,
        semantic_checked: sem_n,
    }
}

/// Deterministic per-class prototype vectors in [-1, 1], standing in for
/// foundation-model features.
pub fn class_prototypes(n_classes: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_classes).map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..=1.0)).collect()).collect()
}

/// Sets each labelled record's feature to its class prototype; unlabelled
/// records get zeros.
pub fn attach_prototype_features(pc: &PointCloud, prototypes: &[Vec<f32>]) -> Result<PointCloud> {
    let dim = prototypes.first().map_or(0, Vec::len);
    let mut out = pc.clone();
    out.feature_dim = dim;
    for r in &mut out.records {
        r.feature = match r.class_id {
            UNLABELED => vec![0.0; dim],
            c => prototypes
                .get(c as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("no prototype for class {c}")))?
                .clone(),
        };
    }
    Ok(out)
}

/// Writes the `QOQS` format. Provenance and generation statistics are not
/// stored; samples without a semantic target use the unlabelled sentinel and
/// samples without features store zeros.
pub fn write_query_batch<W: Write>(batch: &QueryBatch, mut w: W) -> Result<()> {
    let fd = u16::try_from(batch.feature_dim).map_err(|_| Error::InvalidArgument("feature_dim exceeds u16".into()))?;
    w.write_all(&MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u64::<LE>(batch.samples.len() as u64)?;
    w.write_u16::<LE>(fd)?;
    let mut buf = Vec::with_capacity(batch.samples.len() * (19 + 4 * batch.feature_dim));
    for s in &batch.samples {
        for v in [s.query.x, s.query.y, s.query.z, s.query.t] {
            buf.write_f32::<LE>(v as f32)?;
        }
        buf.write_u8(u8::from(s.occupied))?;
        buf.write_u16::<LE>(s.semantic.unwrap_or(UNLABELED))?;
        match &s.feature {
            Some(f) if f.len() != batch.feature_dim => {
                return Err(Error::FeatureDimMismatch { expected: batch.feature_dim, found: f.len() })
            }
            Some(f) => f.iter().try_for_each(|&v| buf.write_f32::<LE>(v))?,
            None => (0..batch.feature_dim).try_for_each(|_| buf.write_f32::<LE>(0.0))?,
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_query_batch<R: Read>(mut r: R) -> Result<QueryBatch> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_truncated("magic"))?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let version = r.read_u32::<LE>().map_err(eof_as_truncated("version"))?;
    if version != VERSION {
        return Err(Error::VersionMismatch { expected: VERSION, found: version });
    }
    let count = r.read_u64::<LE>().map_err(eof_as_truncated("count"))?;
    let fd = r.read_u16::<LE>().map_err(eof_as_truncated("feature_dim"))? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 24) as usize);
    for i in 0..count {
        let what = || format!("sample {i}");
        let mut q = [0f32; 4];
        r.read_f32_into::<LE>(&mut q).map_err(eof_as_truncated(&what()))?;
        let occ = r.read_u8().map_err(eof_as_truncated(&what()))?;
        if occ > 1 {
            return Err(Error::Malformed(format!("sample {i}: occupancy byte {occ}")));
        }
        let class = r.read_u16::<LE>().map_err(eof_as_truncated(&what()))?;
        let mut f = vec![0f32; fd];
        r.read_f32_into::<LE>(&mut f).map_err(eof_as_truncated(&what()))?;
        let occupied = occ == 1;
        if !occupied && (class != UNLABELED || f.iter().any(|&v| v != 0.0)) {
            return Err(Error::Malformed(format!("sample {i}: free query carries targets")));
        }
        samples.push(QuerySample {
            query: Query4::new(q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64),
            occupied,
            semantic: (class != UNLABELED).then_some(class),
            feature: (occupied && fd > 0).then_some(f),
            source: (0, 0),
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::TrailingBytes(rest.len() as u64));
    }
    Ok(QueryBatch::from_samples(samples, fd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::SourceTag;
    use crate::scene::{Primitive, Shape};
    use proptest::prelude::*;

    fn rec(p: [f64; 3], o: [f64; 3], t: f64, c: u16) -> PointRecord {
        PointRecord::new(p, o, t, c)
    }

    #[test]
    fn negative_midpoint() {
        let q = negative_query_at(&rec([10.0, 0.0, 0.0], [0.0; 3], 0.5, 2), 0.5);
        assert_eq!(q, Query4::new(5.0, 0.0, 0.0, 0.5));
    }

    #[test]
    fn positive_behind_surface() {
        let q = positive_query_at(&rec([10.0, 0.0, 0.0], [0.0; 3], -1.0, 2), 0.2);
        assert!((q.x - 10.2).abs() < 1e-12 && q.y == 0.0 && q.z == 0.0 && q.t == -1.0);
    }

    #[test]
    fn targets_copied_and_unlabeled_dropped() {
        let cfg = SamplingConfig::default();
        let mut p = rec([3.0, 4.0, 0.0], [0.0; 3], 0.0, 5);
        p.feature = vec![0.25, -1.0];
        let pos = gen_positive_queries(&p, &cfg, &mut point_rng(0, 0, 0)).unwrap();
        assert_eq!(pos.len(), 2);
        assert!(pos.iter().all(|s| s.occupied && s.semantic == Some(5) && s.feature.as_deref() == Some(&[0.25, -1.0][..])));
        p.class_id = UNLABELED;
        let pos = gen_positive_queries(&p, &cfg, &mut point_rng(0, 0, 0)).unwrap();
        assert!(pos.iter().all(|s| s.semantic.is_none()));
        let neg = gen_negative_queries(&p, &cfg, &mut point_rng(0, 0, 0)).unwrap();
        assert!(neg.iter().all(|s| !s.occupied && s.semantic.is_none() && s.feature.is_none()));
    }

    #[test]
    fn degenerate_rays_skipped() {
        let p = rec([1.0, 1.0, 1.0], [1.0, 1.0, 1.0 + 1e-7], 0.0, 0);
        assert!(gen_negative_queries(&p, &SamplingConfig::default(), &mut point_rng(0, 0, 0)).is_none());
        let pc = PointCloud::with_records(vec![p, rec([5.0, 0.0, 0.0], [0.0; 3], 0.0, 0)], SourceTag::Lidar, 0);
        let b = build_query_set(&[pc], &SamplingConfig::default()).unwrap();
        assert_eq!(b.stats.degenerate_skipped, 1);
        assert_eq!(b.len(), 4);
    }

    fn ring_cloud(n: usize, times: &[f64]) -> Vec<PointCloud> {
        times
            .iter()
            .map(|&t| {
                let recs = (0..n)
                    .map(|i| {
                        let a = i as f64 * 0.37;
                        rec([8.0 * a.cos(), 8.0 * a.sin(), -1.0 + 0.01 * i as f64], [0.0, 0.0, 1.5], t, (i % 3) as u16)
                    })
                    .collect();
                PointCloud::with_records(recs, SourceTag::Lidar, 0)
            })
            .collect()
    }

    #[test]
    fn query_count_arithmetic() {
        let clouds = ring_cloud(300, &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        let b = build_query_set(&clouds, &SamplingConfig::default()).unwrap();
        // 1500 points × (2 + 2) queries, already balanced.
        assert_eq!(b.stats.positives_generated + b.stats.negatives_generated, 6000);
        assert_eq!((b.positive_count, b.negative_count), (3000, 3000));
    }

    #[test]
    fn rebalances_by_downsampling() {
        let cfg = SamplingConfig { n_pos_per_point: 5, n_neg_per_point: 2, ..Default::default() };
        let b = build_query_set(&ring_cloud(101, &[0.0]), &cfg).unwrap();
        assert_eq!((b.positive_count, b.negative_count), (202, 202));
        assert!(b.is_balanced());
        assert_eq!(b.samples.iter().filter(|s| s.occupied).count(), 202);
    }

    #[test]
    fn subsample_keeps_balance_and_order() {
        let b = build_query_set(&ring_cloud(100, &[0.0, 0.5]), &SamplingConfig::default()).unwrap();
        let s = subsample_balanced(&b, 301, 9).unwrap();
        assert_eq!((s.positive_count, s.negative_count), (150, 151));
        let mut it = b.samples.iter();
        assert!(s.samples.iter().all(|q| it.any(|o| o == q)));
        assert_eq!(subsample_balanced(&b, 301, 9).unwrap(), s);
        assert!(subsample_balanced(&b, b.len() + 2, 9).is_err());
    }

    #[test]
    fn backward_window_excludes_future() {
        let cfg = SamplingConfig { t_min: -1.0, t_max: 0.0, ..Default::default() };
        let b = build_query_set(&ring_cloud(50, &[-1.0, 0.0, 0.5, 1.0]), &cfg).unwrap();
        assert!(b.samples.iter().all(|s| s.query.t <= 0.0));
        assert_eq!(b.stats.out_of_window, 100);
        let only_future = SamplingConfig { t_min: 0.0, t_max: 0.0, ..Default::default() };
        assert!(matches!(build_query_set(&ring_cloud(5, &[1.0]), &only_future), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let clouds = ring_cloud(200, &[-0.5, 0.0, 0.5]);
        let cfg = SamplingConfig { seed: 9, ..Default::default() };
        let a = build_query_set(&clouds, &cfg).unwrap();
        assert_eq!(a, build_query_set(&clouds, &cfg).unwrap());
        let other = build_query_set(&clouds, &SamplingConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.samples, other.samples);
    }

    #[test]
    fn purity_on_convex_scene() {
        let scene = SceneSpec {
            primitives: vec![
                Primitive::new(Shape::Box { min: [4.0, -2.0, 0.5], max: [6.0, 2.0, 2.5] }, 1),
                Primitive::new(Shape::Ground { top: 0.0, thickness: 2.0 }, 0),
            ],
            bounds: 60.0,
        };
        let scan = crate::scene::ScanSpec {
            poses: vec![(0.0, RigidTransform::from_translation([0.0, 0.0, 2.0]))],
            directions: crate::scene::ScanSpec::azimuth_elevation_grid(180, 10, -40.0, -5.0),
            max_range: 50.0,
            noise_sigma: 0.0,
            seed: 0,
        };
        let pc = crate::scene::raycast_scan(&scene, &scan);
        let b = build_query_set(&[pc], &SamplingConfig::default()).unwrap();
        let rep = validate_against_oracle(&b, &scene);
        assert_eq!(rep.negative_purity, 1.0);
        assert!(rep.positive_purity >= 0.99, "{rep:?}");
        assert_eq!(rep.semantic_agreement, 1.0);
    }

    #[test]
    fn overshoot_fraction_matches_slab_geometry() {
        // Slab of thickness w hit at incidence θ contains a positive drawn at
        // r ~ U(0, δ) iff r < w / cos θ, so the expected purity is
        // min(1, w / (δ cos θ)) per ray.
        let (w, delta) = (0.1, 1.0);
        let scene = SceneSpec {
            primitives: vec![Primitive::new(Shape::Box { min: [10.0, -50.0, -50.0], max: [10.0 + w, 50.0, 50.0] }, 0)],
            bounds: 100.0,
        };
        let angles: [f64; 4] = [0.0, 0.3, 0.6, 0.9];
        let mut recs = Vec::new();
        for &a in &angles {
            for k in 0..20_000 {
                let o = [0.0, 0.0, k as f64 * 1e-3];
                let p = [10.0, 10.0 * a.tan(), o[2]];
                recs.push(rec(p, o, 0.0, 0));
            }
        }
        let cfg = SamplingConfig { delta, n_pos_per_point: 1, n_neg_per_point: 1, seed: 3, ..Default::default() };
        let b = build_query_set(&[PointCloud::with_records(recs, SourceTag::Lidar, 0)], &cfg).unwrap();
        let rep = validate_against_oracle(&b, &scene);
        let expected = angles.iter().map(|a| (w / (delta * a.cos())).min(1.0)).sum::<f64>() / 4.0;
        let sd = (expected * (1.0 - expected) / 80_000.0).sqrt();
        assert!(rep.positive_purity < 1.0);
        assert!((rep.positive_purity - expected).abs() < 4.0 * sd, "{} vs {expected}", rep.positive_purity);
        assert_eq!(rep.negative_purity, 1.0);
    }

    #[test]
    fn prototypes_attach() {
        let protos = class_prototypes(3, 4, 1);
        let pc = PointCloud::with_records(
            vec![rec([1.0, 0.0, 0.0], [0.0; 3], 0.0, 2), rec([2.0, 0.0, 0.0], [0.0; 3], 0.0, UNLABELED)],
            SourceTag::Lidar,
            0,
        );
        let out = attach_prototype_features(&pc, &protos).unwrap();
        assert_eq!(out.feature_dim, 4);
        assert_eq!(out.records[0].feature, protos[2]);
        assert_eq!(out.records[1].feature, vec![0.0; 4]);
        out.validate().unwrap();
    }

    #[test]
    fn batch_io_round_trip() {
        let protos = class_prototypes(3, 2, 1);
        let clouds: Vec<_> = ring_cloud(20, &[0.0, 0.5])
            .iter()
            .map(|pc| attach_prototype_features(pc, &protos).unwrap())
            .collect();
        let b = build_query_set(&clouds, &SamplingConfig::default()).unwrap();
        let mut bytes = Vec::new();
        write_query_batch(&b, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 18 + b.len() * (16 + 1 + 2 + 8));
        let back = read_query_batch(&bytes[..]).unwrap();
        assert_eq!((back.positive_count, back.negative_count), (b.positive_count, b.negative_count));
        for (x, y) in back.samples.iter().zip(&b.samples) {
            assert_eq!((x.occupied, x.semantic, &x.feature), (y.occupied, y.semantic, &y.feature));
            assert!((x.query.x - y.query.x).abs() < 1e-5);
        }
        let mut again = Vec::new();
        write_query_batch(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(matches!(read_query_batch(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    }

    fn arb_point() -> impl Strategy<Value = PointRecord> {
        (prop::array::uniform3(-50.0f64..50.0), prop::array::uniform3(-5.0f64..5.0), -2.0f64..2.0)
            .prop_filter("non-degenerate", |(p, o, _)| norm3(sub3(*p, *o)) > 1e-3)
            .prop_map(|(p, o, t)| rec(p, o, t, 1))
    }

    proptest! {
        #[test]
        fn negatives_on_open_segment(p in arb_point(), seed in any::<u64>()) {
            let cfg = SamplingConfig { n_neg_per_point: 8, seed, ..Default::default() };
            let d = sub3(p.position, p.origin);
            let len = norm3(d);
            for s in gen_negative_queries(&p, &cfg, &mut point_rng(seed, 0, 0)).unwrap() {
                let v = sub3(s.query.position(), p.origin);
                let r = crate::geometry::dot3(v, d) / (len * len);
                prop_assert!(r > 0.0 && r < 1.0);
                let off = sub3(v, scale3(d, r));
                prop_assert!(norm3(off) <= 1e-9 * (1.0 + len));
                prop_assert_eq!(s.query.t, p.time);
            }
        }

        #[test]
        fn positives_within_buffer(p in arb_point(), delta in 0.01f64..2.0) {
            let cfg = SamplingConfig { delta, n_pos_per_point: 8, ..Default::default() };
            let u = scale3(sub3(p.position, p.origin), 1.0 / p.ray_length());
            for s in gen_positive_queries(&p, &cfg, &mut point_rng(0, 1, 2)).unwrap() {
                let v = sub3(s.query.position(), p.position);
                let r = crate::geometry::dot3(v, u);
                prop_assert!(r > 0.0 && r <= delta + 1e-12);
                prop_assert!(norm3(sub3(v, scale3(u, r))) <= 1e-9);
            }
        }

        #[test]
        fn rigid_transform_commutes(
            pts in prop::collection::vec(arb_point(), 1..20),
            yaw in -3.0f64..3.0,
            t in prop::array::uniform3(-20.0f64..20.0),
        ) {
            let tf = RigidTransform::from_yaw_translation(yaw, t);
            let pc = PointCloud::with_records(pts, SourceTag::Lidar, 0);
            let mut moved = pc.clone();
            for r in &mut moved.records {
                r.position = tf.apply(r.position);
                r.origin = tf.apply(r.origin);
            }
            let cfg = SamplingConfig { seed: 5, ..Default::default() };
            let a = transform_batch(&build_query_set(&[pc], &cfg).unwrap(), &tf);
            let b = build_query_set(&[moved], &cfg).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.samples.iter().zip(&b.samples) {
                prop_assert_eq!(x.occupied, y.occupied);
                prop_assert!(norm3(sub3(x.query.position(), y.query.position())) < 1e-9);
            }
        }
    }
}
