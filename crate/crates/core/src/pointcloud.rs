//! Supervision point clouds: data model, the `QOPC` binary format, class
//! tables, min-depth filtering and subsampling strategies.
//!
//! Every record carries its own sensor origin so pseudo clouds (one origin per
//! camera) and lidar sweeps share a single representation.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::str::FromStr;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::eof_as_truncated;
use crate::geometry::{norm3, sub3, RigidTransform};
use crate::{Error, Result};

/// Class id of points without a semantic label.
pub const UNLABELED: u16 = u16::MAX;

const MAGIC: [u8; 4] = *b"QOPC";
const VERSION: u32 = 1;
const FLAG_DYNAMIC: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PointRecord {
    pub position: [f64; 3],
    pub origin: [f64; 3],
    pub time: f64,
    pub class_id: u16,
    /// Empty when the cloud has no features.
    pub feature: Vec<f32>,
    pub dynamic: bool,
}

impl PointRecord {
    pub fn new(position: [f64; 3], origin: [f64; 3], time: f64, class_id: u16) -> Self {
        Self { position, origin, time, class_id, feature: Vec::new(), dynamic: false }
    }

    pub fn is_labeled(&self) -> bool {
        self.class_id != UNLABELED
    }

    pub fn ray_length(&self) -> f64 {
        norm3(sub3(self.position, self.origin))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceTag {
    Pseudo,
    Lidar,
    Unified,
}

impl SourceTag {
    fn to_u8(self) -> u8 {
        match self {
            SourceTag::Pseudo => 0,
            SourceTag::Lidar => 1,
            SourceTag::Unified => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(SourceTag::Pseudo),
            1 => Ok(SourceTag::Lidar),
            2 => Ok(SourceTag::Unified),
            _ => Err(Error::Malformed(format!("unknown source tag {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub records: Vec<PointRecord>,
    pub source_tag: SourceTag,
    pub feature_dim: usize,
}

impl PointCloud {
    pub fn new(source_tag: SourceTag, feature_dim: usize) -> Self {
        Self { records: Vec::new(), source_tag, feature_dim }
    }

    pub fn with_records(records: Vec<PointRecord>, source_tag: SourceTag, feature_dim: usize) -> Self {
        Self { records, source_tag, feature_dim }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `P_pseudo ∪ P_lidar`: concatenation tagged as unified.
    pub fn union(&self, other: &PointCloud) -> Result<PointCloud> {
        if self.feature_dim != other.feature_dim {
            return Err(Error::FeatureDimMismatch {
                expected: self.feature_dim,
                found: other.feature_dim,
            });
        }
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Ok(PointCloud::with_records(records, SourceTag::Unified, self.feature_dim))
    }

    /// Checks the record invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.feature.len() != self.feature_dim {
                return Err(Error::FeatureDimMismatch { expected: self.feature_dim, found: r.feature.len() });
            }
            let finite = r.position.iter().chain(&r.origin).all(|v| v.is_finite()) && r.time.is_finite();
            if !finite {
                return Err(Error::Malformed(format!("record {i} has non-finite coordinates")));
            }
            if r.position == r.origin {
                return Err(Error::Malformed(format!("record {i} coincides with its origin")));
            }
        }
        Ok(())
    }
}

pub fn write_pointcloud<W: Write>(pc: &PointCloud, mut w: W) -> Result<()> {
    let feature_dim = u16::try_from(pc.feature_dim)
        .map_err(|_| Error::InvalidArgument(format!("feature_dim {} exceeds u16", pc.feature_dim)))?;
    for r in &pc.records {
        if r.feature.len() != pc.feature_dim {
            return Err(Error::FeatureDimMismatch { expected: pc.feature_dim, found: r.feature.len() });
        }
    }
    w.write_all(&MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u64::<LE>(pc.records.len() as u64)?;
    w.write_u16::<LE>(feature_dim)?;
    w.write_u8(pc.source_tag.to_u8())?;
    w.write_u8(0)?;
    for r in &pc.records {
        for v in r.position.iter().chain(&r.origin) {
            w.write_f32::<LE>(*v as f32)?;
        }
        w.write_f32::<LE>(r.time as f32)?;
        w.write_u16::<LE>(r.class_id)?;
        w.write_u16::<LE>(if r.dynamic { FLAG_DYNAMIC } else { 0 })?;
        for v in &r.feature {
            w.write_f32::<LE>(*v)?;
        }
    }
    Ok(())
}

pub fn read_pointcloud<R: Read>(mut r: R) -> Result<PointCloud> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_truncated("magic"))?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let version = r.read_u32::<LE>().map_err(eof_as_truncated("version"))?;
    if version != VERSION {
        return Err(Error::VersionMismatch { expected: VERSION, found: version });
    }
    let count = r.read_u64::<LE>().map_err(eof_as_truncated("header"))?;
    let feature_dim = r.read_u16::<LE>().map_err(eof_as_truncated("header"))? as usize;
    let source_tag = SourceTag::from_u8(r.read_u8().map_err(eof_as_truncated("header"))?)?;
    let reserved = r.read_u8().map_err(eof_as_truncated("header"))?;
    if reserved != 0 {
        return Err(Error::Malformed(format!("reserved header byte is {reserved}")));
    }
    // Cap the pre-allocation; a corrupt count must not exhaust memory.
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let what = format!("record {i} of {count}");
        let mut f = [0f32; 7];
        r.read_f32_into::<LE>(&mut f).map_err(eof_as_truncated(&what))?;
        let class_id = r.read_u16::<LE>().map_err(eof_as_truncated(&what))?;
        let flags = r.read_u16::<LE>().map_err(eof_as_truncated(&what))?;
        if flags & !FLAG_DYNAMIC != 0 {
            return Err(Error::Malformed(format!("record {i} has unknown flag bits {flags:#x}")));
        }
        let mut feature = vec![0f32; feature_dim];
        r.read_f32_into::<LE>(&mut feature).map_err(eof_as_truncated(&what))?;
        records.push(PointRecord {
            position: [f[0] as f64, f[1] as f64, f[2] as f64],
            origin: [f[3] as f64, f[4] as f64, f[5] as f64],
            time: f[6] as f64,
            class_id,
            feature,
            dynamic: flags & FLAG_DYNAMIC != 0,
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::TrailingBytes(rest.len() as u64));
    }
    Ok(PointCloud { records, source_tag, feature_dim })
}

/// Per-class names, point frequencies and dynamic flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    pub names: Vec<String>,
    pub frequencies: Vec<f64>,
    pub dynamic_mask: Vec<bool>,
}

impl ClassTable {
    pub fn new(names: Vec<String>, frequencies: Vec<f64>, dynamic_mask: Vec<bool>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("class table needs at least one class".into()));
        }
        if frequencies.len() != names.len() || dynamic_mask.len() != names.len() {
            return Err(Error::InvalidArgument("class table columns differ in length".into()));
        }
        if frequencies.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
            return Err(Error::InvalidArgument("class frequencies must be non-negative".into()));
        }
        if names.len() >= UNLABELED as usize {
            return Err(Error::InvalidArgument("too many classes".into()));
        }
        Ok(Self { names, frequencies, dynamic_mask })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Parses `name,frequency,dynamic` lines. Blank lines and `#` comments are
    /// skipped; `dynamic` accepts `true/false/1/0`.
    pub fn parse(text: &str) -> Result<Self> {
        let (mut names, mut freqs, mut dynamic) = (Vec::new(), Vec::new(), Vec::new());
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |m: &str| Error::Config { line: n + 1, message: m.to_string() };
            if cols.len() != 3 {
                return Err(bad("expected `name,frequency,dynamic`"));
            }
            names.push(cols[0].to_string());
            freqs.push(cols[1].parse::<f64>().map_err(|_| bad("frequency is not a number"))?);
            dynamic.push(match cols[2] {
                "true" | "1" => true,
                "false" | "0" => false,
                _ => return Err(bad("dynamic must be true/false")),
            });
        }
        Self::new(names, freqs, dynamic)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.len() {
            s.push_str(&format!("{},{},{}\n", self.names[i], self.frequencies[i], self.dynamic_mask[i]));
        }
        s
    }

    /// Log-frequency class weights: `w_c ∝ −ln(freq_c)`, normalised to mean 1.
    /// Frequencies are normalised to sum to one and floored at `1e-6` first.
    pub fn log_frequency_weights(&self) -> Vec<f64> {
        let total: f64 = self.frequencies.iter().sum();
        let raw: Vec<f64> = self
            .frequencies
            .iter()
            .map(|f| {
                let p = if total > 0.0 { f / total } else { 1.0 / self.len() as f64 };
                -(p.max(1e-6)).ln()
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        if mean > 0.0 {
            raw.iter().map(|w| w / mean).collect()
        } else {
            vec![1.0; raw.len()]
        }
    }

    pub fn dynamic_classes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.dynamic_mask[c]).collect()
    }
}

/// Angular resolution (radians) that spans `group_radius` at 10 m range.
pub fn min_depth_angular_resolution(group_radius: f64) -> f64 {
    group_radius / 10.0
}

/// Keeps only the nearest point among points that share an exact sensor origin
/// and fall into the same azimuth/elevation cell. Survivors keep input order.
pub fn min_depth_filter(pc: &PointCloud, group_radius: f64) -> Result<PointCloud> {
    if !(group_radius > 0.0) || !group_radius.is_finite() {
        return Err(Error::InvalidArgument(format!("group_radius must be positive, got {group_radius}")));
    }
    let res = min_depth_angular_resolution(group_radius);
    let mut best: HashMap<([u64; 3], i64, i64), (usize, f64)> = HashMap::new();
    for (i, r) in pc.records.iter().enumerate() {
        let d = sub3(r.position, r.origin);
        let range = norm3(d);
        let az = d[1].atan2(d[0]);
        let el = (d[2] / range).clamp(-1.0, 1.0).asin();
        let key = (
            r.origin.map(f64::to_bits),
            (az / res).floor() as i64,
            (el / res).floor() as i64,
        );
        best.entry(key)
            .and_modify(|e| {
                if range < e.1 {
                    *e = (i, range);
                }
            })
            .or_insert((i, range));
    }
    let mut keep: Vec<usize> = best.values().map(|e| e.0).collect();
    keep.sort_unstable();
    Ok(select(pc, &keep))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubsampleStrategy {
    Uniform,
    /// Dynamic records are drawn with this weight relative to static ones.
    DynamicWeighted(f64),
    /// At most one record per cubic cell of this side before uniform fill.
    VoxelUniform(f64),
}

impl FromStr for SubsampleStrategy {
    type Err = Error;

    /// Accepts `uniform`, `dynamic:<w>` and `voxel:<cell>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown subsample strategy `{s}`"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let num = |a: Option<&str>| -> Result<f64> {
            let v: f64 = a.ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(bad())
            }
        };
        match name {
            "uniform" if arg.is_none() => Ok(SubsampleStrategy::Uniform),
            "dynamic" => Ok(SubsampleStrategy::DynamicWeighted(num(arg)?)),
            "voxel" => Ok(SubsampleStrategy::VoxelUniform(num(arg)?)),
            _ => Err(bad()),
        }
    }
}

/// Draws `n` records without replacement. Output preserves input order.
pub fn subsample(pc: &PointCloud, n: usize, strategy: SubsampleStrategy, seed: u64) -> Result<PointCloud> {
    if n >= pc.len() {
        return Ok(pc.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = match strategy {
        SubsampleStrategy::Uniform => index::sample(&mut rng, pc.len(), n).into_vec(),
        SubsampleStrategy::DynamicWeighted(w) => {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!("dynamic weight must be positive, got {w}")));
            }
            let weight = |i: usize| if pc.records[i].dynamic { w } else { 1.0 };
            index::sample_weighted(&mut rng, pc.len(), weight, n)
                .map_err(|e| Error::InvalidArgument(format!("weighted sampling failed: {e}")))?
                .into_vec()
        }
        SubsampleStrategy::VoxelUniform(cell) => {
            if !(cell > 0.0) || !cell.is_finite() {
                return Err(Error::InvalidArgument(format!("voxel cell must be positive, got {cell}")));
            }
            voxel_uniform(pc, n, cell, &mut rng)
        }
    };
    keep.sort_unstable();
    Ok(select(pc, &keep))
}

fn voxel_uniform(pc: &PointCloud, n: usize, cell: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let mut order = Vec::new();
    for (i, r) in pc.records.iter().enumerate() {
        let key = r.position.map(|v| (v / cell).floor() as i64);
        cells.entry(key).or_insert_with(|| {
            order.push(key);
            Vec::new()
        }).push(i);
    }
    // One random representative per cell, in first-seen cell order.
    let reps: Vec<usize> = order
        .iter()
        .map(|k| {
            let members = &cells[k];
            members[index::sample(rng, members.len(), 1).index(0)]
        })
        .collect();
    if reps.len() >= n {
        return index::sample(rng, reps.len(), n).into_iter().map(|j| reps[j]).collect();
    }
    let mut taken = vec![false; pc.len()];
    for &i in &reps {
        taken[i] = true;
    }
    let rest: Vec<usize> = (0..pc.len()).filter(|&i| !taken[i]).collect();
    let mut keep = reps;
    keep.extend(index::sample(rng, rest.len(), n - keep.len()).into_iter().map(|j| rest[j]));
    keep
}

fn select(pc: &PointCloud, keep: &[usize]) -> PointCloud {
    PointCloud {
        records: keep.iter().map(|&i| pc.records[i].clone()).collect(),
        source_tag: pc.source_tag,
        feature_dim: pc.feature_dim,
    }
}

/// Ego poses keyed by timestep; each maps that timestep's ego frame into the
/// reference ego frame.
#[derive(Debug, Clone, Default)]
pub struct PoseTable {
    entries: Vec<(f64, RigidTransform<f64>)>,
}

impl PoseTable {
    pub const TIME_TOLERANCE: f64 = 1e-6;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, time: f64, pose: RigidTransform<f64>) {
        self.entries.retain(|(t, _)| (t - time).abs() > Self::TIME_TOLERANCE);
        self.entries.push((time, pose));
    }

    pub fn get(&self, time: f64) -> Option<&RigidTransform<f64>> {
        self.entries
            .iter()
            .find(|(t, _)| (t - time).abs() <= Self::TIME_TOLERANCE)
            .map(|(_, p)| p)
    }
}

/// Maps positions and origins into the reference ego frame using each
/// record's timestep pose. Times are preserved.
pub fn transform_to_reference(pc: &PointCloud, poses: &PoseTable) -> Result<PointCloud> {
    let mut out = pc.clone();
    for r in &mut out.records {
        let pose = poses.get(r.time).ok_or(Error::MissingPose(r.time))?;
        r.position = pose.apply(r.position);
        r.origin = pose.apply(r.origin);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(p: [f64; 3], o: [f64; 3]) -> PointRecord {
        PointRecord::new(p, o, 0.0, 1)
    }

    fn bytes(pc: &PointCloud) -> Vec<u8> {
        let mut b = Vec::new();
        write_pointcloud(pc, &mut b).unwrap();
        b
    }

    #[test]
    fn empty_cloud_round_trips() {
        let pc = PointCloud::new(SourceTag::Pseudo, 0);
        let b = bytes(&pc);
        assert_eq!(b.len(), 4 + 4 + 8 + 2 + 1 + 1);
        let back = read_pointcloud(&b[..]).unwrap();
        assert_eq!(back, pc);
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn featured_cloud_round_trips() {
        let mut pc = PointCloud::new(SourceTag::Unified, 2);
        for i in 0..3 {
            let mut r = PointRecord::new([i as f64, 1.5, -0.25], [0.0, 0.0, 1.75], 0.5 * i as f64, i as u16);
            r.feature = vec![0.125 * i as f32, -2.0];
            r.dynamic = i == 1;
            pc.records.push(r);
        }
        pc.records[2].class_id = UNLABELED;
        let back = read_pointcloud(&bytes(&pc)[..]).unwrap();
        assert_eq!(back, pc);
    }

    #[test]
    fn corrupt_inputs_give_distinct_errors() {
        let mut pc = PointCloud::new(SourceTag::Lidar, 1);
        let mut r = rec([1.0, 0.0, 0.0], [0.0; 3]);
        r.feature = vec![3.0];
        pc.records.push(r);
        let good = bytes(&pc);

        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(read_pointcloud(&b[..]), Err(Error::BadMagic { .. })));

        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(read_pointcloud(&b[..]), Err(Error::VersionMismatch { found: 2, .. })));

        assert!(matches!(read_pointcloud(&good[..good.len() - 1]), Err(Error::Truncated(_))));

        let mut b = good.clone();
        b.push(0);
        assert!(matches!(read_pointcloud(&b[..]), Err(Error::TrailingBytes(1))));

        pc.records[0].feature.clear();
        assert!(matches!(
            write_pointcloud(&pc, Vec::new()),
            Err(Error::FeatureDimMismatch { expected: 1, found: 0 })
        ));
    }

    #[test]
    fn min_depth_keeps_nearer_collinear_point() {
        let pc = PointCloud::with_records(
            vec![rec([10.0, 0.0, 0.0], [0.0; 3]), rec([5.0, 0.0, 0.0], [0.0; 3])],
            SourceTag::Lidar,
            0,
        );
        let f = min_depth_filter(&pc, 0.1).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.records[0].position, [5.0, 0.0, 0.0]);
    }

    #[test]
    fn min_depth_ignores_other_origins() {
        let pc = PointCloud::with_records(
            vec![rec([10.0, 0.0, 0.0], [0.0; 3]), rec([5.0, 0.0, 0.0], [0.0, 0.0, 1e-3])],
            SourceTag::Lidar,
            0,
        );
        assert_eq!(min_depth_filter(&pc, 0.1).unwrap().len(), 2);
        let single = PointCloud::with_records(vec![rec([1.0, 2.0, 3.0], [0.0; 3])], SourceTag::Lidar, 0);
        assert_eq!(min_depth_filter(&single, 0.1).unwrap(), single);
        assert!(min_depth_filter(&single, 0.0).is_err());
    }

    #[test]
    fn subsample_edge_cases() {
        let pc = PointCloud::with_records(
            (0..10).map(|i| rec([i as f64 + 1.0, 0.0, 0.0], [0.0; 3])).collect(),
            SourceTag::Lidar,
            0,
        );
        assert_eq!(subsample(&pc, 10, SubsampleStrategy::Uniform, 1).unwrap(), pc);
        assert_eq!(subsample(&pc, 50, SubsampleStrategy::Uniform, 1).unwrap(), pc);
        assert!(subsample(&pc, 0, SubsampleStrategy::Uniform, 1).unwrap().is_empty());
        let a = subsample(&pc, 4, SubsampleStrategy::Uniform, 9).unwrap();
        assert_eq!(a, subsample(&pc, 4, SubsampleStrategy::Uniform, 9).unwrap());
        assert_eq!(a.len(), 4);
        assert!(a.records.windows(2).all(|w| w[0].position[0] < w[1].position[0]));
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("uniform".parse::<SubsampleStrategy>().unwrap(), SubsampleStrategy::Uniform);
        assert_eq!("dynamic:2".parse::<SubsampleStrategy>().unwrap(), SubsampleStrategy::DynamicWeighted(2.0));
        assert_eq!("voxel:0.4".parse::<SubsampleStrategy>().unwrap(), SubsampleStrategy::VoxelUniform(0.4));
        for bad in ["importance", "dynamic", "voxel:-1", "uniform:3", ""] {
            assert!(matches!(bad.parse::<SubsampleStrategy>(), Err(Error::InvalidArgument(_))), "{bad}");
        }
    }

    #[test]
    fn dynamic_weighting_matches_binomial_expectation() {
        // 50/50 cloud, large enough that drawing without replacement is close
        // to independent draws.
        let n_each = 100_000;
        let records: Vec<PointRecord> = (0..2 * n_each)
            .map(|i| {
                let mut r = rec([1.0 + i as f64, 0.0, 0.0], [0.0; 3]);
                r.dynamic = i % 2 == 0;
                r
            })
            .collect();
        let pc = PointCloud::with_records(records, SourceTag::Lidar, 0);
        let draws = 10_000;
        let s = subsample(&pc, draws, SubsampleStrategy::DynamicWeighted(2.0), 3).unwrap();
        let frac = s.records.iter().filter(|r| r.dynamic).count() as f64 / draws as f64;
        let p = 2.0 / 3.0;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((frac - p).abs() < 3.0 * sigma, "dynamic fraction {frac}");
    }

    #[test]
    fn voxel_uniform_spreads_across_cells() {
        // 100 points in one cell, 5 points in five other cells.
        let mut records: Vec<PointRecord> = (0..100).map(|i| rec([0.1 + i as f64 * 1e-3, 0.1, 0.1], [0.0, 0.0, 5.0])).collect();
        records.extend((1..6).map(|k| rec([k as f64 + 0.5, 0.1, 0.1], [0.0, 0.0, 5.0])));
        let pc = PointCloud::with_records(records, SourceTag::Lidar, 0);
        let s = subsample(&pc, 6, SubsampleStrategy::VoxelUniform(1.0), 5).unwrap();
        let mut cells: Vec<i64> = s.records.iter().map(|r| r.position[0].floor() as i64).collect();
        cells.dedup();
        assert_eq!(cells, vec![0, 1, 2, 3, 4, 5]);
        let s = subsample(&pc, 10, SubsampleStrategy::VoxelUniform(1.0), 5).unwrap();
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn transform_identity_translation_and_inverse() {
        let pc = PointCloud::with_records(
            vec![PointRecord::new([1.0, 2.0, 3.0], [0.0, 0.0, 1.0], 0.5, 2)],
            SourceTag::Lidar,
            0,
        );
        let mut poses = PoseTable::new();
        poses.insert(0.5, RigidTransform::identity());
        assert_eq!(transform_to_reference(&pc, &poses).unwrap(), pc);

        let t = [3.0, -1.0, 0.5];
        poses.insert(0.5, RigidTransform::from_translation(t));
        let moved = transform_to_reference(&pc, &poses).unwrap();
        assert_eq!(moved.records[0].position, [4.0, 1.0, 3.5]);
        assert_eq!(moved.records[0].origin, [3.0, -1.0, 1.5]);

        let pose = RigidTransform::from_yaw_translation(1.1, t);
        let mut fwd = PoseTable::new();
        fwd.insert(0.5, pose);
        let mut inv = PoseTable::new();
        inv.insert(0.5, pose.inverse());
        let back = transform_to_reference(&transform_to_reference(&pc, &fwd).unwrap(), &inv).unwrap();
        for k in 0..3 {
            assert!((back.records[0].position[k] - pc.records[0].position[k]).abs() < 1e-9);
        }

        assert!(matches!(transform_to_reference(&pc, &PoseTable::new()), Err(Error::MissingPose(_))));
    }

    #[test]
    fn class_table_parsing_and_weights() {
        let t = ClassTable::parse("# name,freq,dyn\nground,0.7,false\ncar,0.1,true\npole,0.2,0\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.dynamic_classes(), vec![1]);
        let w = t.log_frequency_weights();
        assert!((w.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert!(w[1] > w[2] && w[2] > w[0]);
        assert_eq!(ClassTable::parse(&t.to_text()).unwrap(), t);
        assert!(ClassTable::parse("a,1").is_err());
        assert!(ClassTable::parse("").is_err());
    }

    fn arb_cloud() -> impl Strategy<Value = PointCloud> {
        (0usize..4, prop::collection::vec((any::<[i16; 7]>(), any::<u16>(), any::<bool>()), 0..40)).prop_map(
            |(fd, raw)| {
                let records = raw
                    .into_iter()
                    .map(|(v, class_id, dynamic)| PointRecord {
                        position: [v[0] as f64 / 8.0, v[1] as f64 / 8.0, v[2] as f64 / 8.0 + 1e4],
                        origin: [v[3] as f64 / 8.0, v[4] as f64 / 8.0, v[5] as f64 / 8.0],
                        time: v[6] as f64 / 1024.0,
                        class_id,
                        feature: (0..fd).map(|k| v[k] as f32 * 0.5).collect(),
                        dynamic,
                    })
                    .collect();
                PointCloud::with_records(records, SourceTag::Pseudo, fd)
            },
        )
    }

    proptest! {
        #[test]
        fn io_round_trip_is_byte_exact(pc in arb_cloud()) {
            let b = bytes(&pc);
            let back = read_pointcloud(&b[..]).unwrap();
            prop_assert_eq!(&back, &pc);
            prop_assert_eq!(bytes(&back), b);
        }

        #[test]
        fn min_depth_is_idempotent(pc in arb_cloud(), radius in 0.01f64..2.0) {
            let once = min_depth_filter(&pc, radius).unwrap();
            prop_assert!(once.len() <= pc.len());
            prop_assert_eq!(min_depth_filter(&once, radius).unwrap(), once);
        }
    }
}
