//! Synthetic scenes with an exact occupancy oracle, simulated lidar scans and
//! ground-truth voxelisation.
//!
//! Primitives move with constant velocity; a primitive's pose at time `t` is
//! its base pose shifted by `velocity·t`. Overlaps resolve by list order.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::{ConfigDoc, SectionReader};
use crate::error::eof_as_truncated;
use crate::geometry::{add3, norm3, scale3, Query4, RigidTransform};
use crate::pointcloud::{PointCloud, PointRecord, SourceTag};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    /// Horizontal slab covering the scene bounds in x and y.
    Ground { top: f64, thickness: f64 },
    /// Vertical cylinder.
    Cylinder { center: [f64; 2], radius: f64, z_min: f64, z_max: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub class_id: u16,
    pub velocity: [f64; 3],
    /// Marks points on this primitive as dynamic. Defaults to "has velocity".
    pub dynamic: bool,
}

impl Primitive {
    pub fn new(shape: Shape, class_id: u16) -> Self {
        Self { shape, class_id, velocity: [0.0; 3], dynamic: false }
    }

    pub fn moving(mut self, velocity: [f64; 3]) -> Self {
        self.velocity = velocity;
        self.dynamic = velocity != [0.0; 3];
        self
    }

    fn offset(&self, t: f64) -> [f64; 3] {
        scale3(self.velocity, t)
    }

    /// Closed point-in-primitive test at time `t`.
    pub fn contains(&self, p: [f64; 3], t: f64, bounds: f64) -> bool {
        let o = self.offset(t);
        let q = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
        match self.shape {
            Shape::Box { min, max } => (0..3).all(|k| q[k] >= min[k] && q[k] <= max[k]),
            Shape::Ground { top, thickness } => {
                q[0].abs() <= bounds && q[1].abs() <= bounds && q[2] <= top && q[2] >= top - thickness
            }
            Shape::Cylinder { center, radius, z_min, z_max } => {
                let (dx, dy) = (q[0] - center[0], q[1] - center[1]);
                dx * dx + dy * dy <= radius * radius && q[2] >= z_min && q[2] <= z_max
            }
        }
    }

    /// Parametric interval `[t_in, t_out]` where the ray is inside the
    /// primitive at scene time `time`.
    pub fn ray_interval(&self, origin: [f64; 3], dir: [f64; 3], time: f64, bounds: f64) -> Option<(f64, f64)> {
        let off = self.offset(time);
        let o = [origin[0] - off[0], origin[1] - off[1], origin[2] - off[2]];
        match self.shape {
            Shape::Box { min, max } => slab_interval(o, dir, min, max),
            Shape::Ground { top, thickness } => {
                slab_interval(o, dir, [-bounds, -bounds, top - thickness], [bounds, bounds, top])
            }
            Shape::Cylinder { center, radius, z_min, z_max } => {
                let (px, py) = (o[0] - center[0], o[1] - center[1]);
                let a = dir[0] * dir[0] + dir[1] * dir[1];
                let c = px * px + py * py - radius * radius;
                let (r0, r1) = if a < 1e-300 {
                    if c > 0.0 {
                        return None;
                    }
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    let b = px * dir[0] + py * dir[1];
                    let disc = b * b - a * c;
                    if disc < 0.0 {
                        return None;
                    }
                    let s = disc.sqrt();
                    ((-b - s) / a, (-b + s) / a)
                };
                let (z0, z1) = axis_interval(o[2], dir[2], z_min, z_max)?;
                let (t0, t1) = (r0.max(z0), r1.min(z1));
                (t0 <= t1).then_some((t0, t1))
            }
        }
    }
}

fn axis_interval(o: f64, d: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    if d == 0.0 {
        return (o >= lo && o <= hi).then_some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let (a, b) = ((lo - o) / d, (hi - o) / d);
    Some((a.min(b), a.max(b)))
}

/// Slab-method ray/AABB interval.
pub fn slab_interval(o: [f64; 3], d: [f64; 3], min: [f64; 3], max: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let (a, b) = axis_interval(o[k], d[k], min[k], max[k])?;
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// Half extent of the scene in x and y, metres.
    pub bounds: f64,
}

impl SceneSpec {
    pub fn validate(&self, n_classes: Option<usize>) -> Result<()> {
        if !(self.bounds > 0.0) || !self.bounds.is_finite() {
            return Err(Error::InvalidArgument("scene bounds must be positive".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let nums: Vec<f64> = match &p.shape {
                Shape::Box { min, max } => min.iter().chain(max).copied().collect(),
                Shape::Ground { top, thickness } => vec![*top, *thickness],
                Shape::Cylinder { center, radius, z_min, z_max } => {
                    vec![center[0], center[1], *radius, *z_min, *z_max]
                }
            };
            if nums.iter().chain(&p.velocity).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("primitive {i} has non-finite parameters")));
            }
            if let Some(n) = n_classes {
                if p.class_id as usize >= n {
                    return Err(Error::InvalidArgument(format!(
                        "primitive {i} has class {} but only {n} classes exist",
                        p.class_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Class of the first primitive containing `q` at time `q.t`.
    pub fn oracle_query(&self, q: Query4<f64>) -> Option<u16> {
        let p = q.position();
        self.primitives
            .iter()
            .find(|prim| prim.contains(p, q.t, self.bounds))
            .map(|prim| prim.class_id)
    }

    /// First surface hit along a ray, ignoring primitives that contain the
    /// origin. Returns `(distance, primitive index)`.
    pub fn first_hit(&self, origin: [f64; 3], dir: [f64; 3], time: f64, max_range: f64) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, prim) in self.primitives.iter().enumerate() {
            if let Some((t0, _)) = prim.ray_interval(origin, dir, time, self.bounds) {
                if t0 > 0.0 && t0 <= max_range && best.is_none_or(|b| t0 < b.0) {
                    best = Some((t0, i));
                }
            }
        }
        best
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc = ConfigDoc::parse(text)?;
        doc.check_sections(&["scene", "ground", "box", "cylinder"])?;
        let scene = doc.unique("scene")?.ok_or(Error::Config { line: 0, message: "missing [scene]".into() })?;
        let mut r = SectionReader::new(scene);
        let bounds = r.req("bounds")?;
        r.finish()?;
        let mut primitives = Vec::new();
        for s in doc.sections.iter().filter(|s| s.name != "scene") {
            let mut r = SectionReader::new(s);
            let class_id: u16 = r.req("class")?;
            let shape = match s.name.as_str() {
                "ground" => Shape::Ground { top: r.req("top")?, thickness: r.or("thickness", 2.0)? },
                "box" => Shape::Box { min: r.vec_req("min")?, max: r.vec_req("max")? },
                _ => Shape::Cylinder {
                    center: r.vec_req("center")?,
                    radius: r.req("radius")?,
                    z_min: r.req("z_min")?,
                    z_max: r.req("z_max")?,
                },
            };
            let mut prim = Primitive::new(shape, class_id).moving(r.vec_opt("velocity")?.unwrap_or([0.0; 3]));
            if let Some(d) = r.opt::<bool>("dynamic")? {
                prim.dynamic = d;
            }
            r.finish()?;
            primitives.push(prim);
        }
        let scene = SceneSpec { primitives, bounds };
        scene.validate(None)?;
        Ok(scene)
    }

    pub fn to_text(&self) -> String {
        let v3 = |v: [f64; 3]| format!("{}, {}, {}", v[0], v[1], v[2]);
        let mut s = format!("[scene]\nbounds = {}\n", self.bounds);
        for p in &self.primitives {
            match &p.shape {
                Shape::Ground { top, thickness } => {
                    s += &format!("\n[ground]\nclass = {}\ntop = {top}\nthickness = {thickness}\n", p.class_id)
                }
                Shape::Box { min, max } => {
                    s += &format!("\n[box]\nclass = {}\nmin = {}\nmax = {}\n", p.class_id, v3(*min), v3(*max))
                }
                Shape::Cylinder { center, radius, z_min, z_max } => {
                    s += &format!(
                        "\n[cylinder]\nclass = {}\ncenter = {}, {}\nradius = {radius}\nz_min = {z_min}\nz_max = {z_max}\n",
                        p.class_id, center[0], center[1]
                    )
                }
            }
            s += &format!("velocity = {}\ndynamic = {}\n", v3(p.velocity), p.dynamic);
        }
        s
    }
}

/// Sensor trajectory and ray pattern for simulated scans.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSpec {
    /// Sensor pose (sensor → reference frame) per timestep, strictly increasing in time.
    pub poses: Vec<(f64, RigidTransform<f64>)>,
    /// Unit ray directions in the sensor frame.
    pub directions: Vec<[f64; 3]>,
    pub max_range: f64,
    /// Standard deviation of isotropic position noise; 0 for exact hits.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ScanSpec {
    /// Regular azimuth/elevation grid; azimuths cover the full circle.
    pub fn azimuth_elevation_grid(n_az: usize, n_el: usize, el_min_deg: f64, el_max_deg: f64) -> Vec<[f64; 3]> {
        let mut dirs = Vec::with_capacity(n_az * n_el);
        for e in 0..n_el {
            let el = if n_el == 1 {
                el_min_deg
            } else {
                el_min_deg + (el_max_deg - el_min_deg) * e as f64 / (n_el - 1) as f64
            }
            .to_radians();
            for a in 0..n_az {
                let az = std::f64::consts::TAU * (a as f64 + 0.5) / n_az as f64;
                dirs.push([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]);
            }
        }
        dirs
    }

    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(Error::InvalidArgument("scan needs at least one pose".into()));
        }
        if self.poses.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::InvalidArgument("scan timesteps must be strictly increasing".into()));
        }
        if self.directions.iter().any(|d| (norm3(*d) - 1.0).abs() > 1e-9) {
            return Err(Error::InvalidArgument("scan directions must be unit vectors".into()));
        }
        if !(self.max_range > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("max_range must be positive and noise non-negative".into()));
        }
        Ok(())
    }

    pub fn timesteps(&self) -> Vec<f64> {
        self.poses.iter().map(|p| p.0).collect()
    }

    /// World-frame origin and directions for timestep `k`.
    pub fn rays(&self, k: usize) -> ([f64; 3], Vec<[f64; 3]>) {
        let pose = &self.poses[k].1;
        (pose.translation, self.directions.iter().map(|d| pose.rotate(*d)).collect())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc = ConfigDoc::parse(text)?;
        doc.check_sections(&["scan", "pose"])?;
        let scan = doc.unique("scan")?.ok_or(Error::Config { line: 0, message: "missing [scan]".into() })?;
        let mut r = SectionReader::new(scan);
        let max_range = r.req("max_range")?;
        let noise_sigma = r.or("noise_sigma", 0.0)?;
        let seed = r.or("seed", 0u64)?;
        let n_az: usize = r.req("azimuth_steps")?;
        let n_el: usize = r.req("elevation_steps")?;
        let el_min: f64 = r.req("elevation_min_deg")?;
        let el_max: f64 = r.req("elevation_max_deg")?;
        r.finish()?;
        let mut poses = Vec::new();
        for s in doc.sections_named("pose") {
            let mut r = SectionReader::new(s);
            let time: f64 = r.req("time")?;
            let t = r.vec_req::<3>("translation")?;
            let yaw: f64 = r.or("yaw_deg", 0.0)?;
            r.finish()?;
            poses.push((time, RigidTransform::from_yaw_translation(yaw.to_radians(), t)));
        }
        let spec = ScanSpec {
            poses,
            directions: Self::azimuth_elevation_grid(n_az, n_el, el_min, el_max),
            max_range,
            noise_sigma,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Casts every ray of timestep `k`. Records are in ray enumeration order.
pub fn raycast_frame(scene: &SceneSpec, scan: &ScanSpec, k: usize) -> PointCloud {
    let time = scan.poses[k].0;
    let (origin, dirs) = scan.rays(k);
    let noise = (scan.noise_sigma > 0.0).then(|| Normal::new(0.0, scan.noise_sigma).expect("valid sigma"));
    let records: Vec<PointRecord> = dirs
        .par_iter()
        .enumerate()
        .filter_map(|(i, &d)| {
            let (t, idx) = scene.first_hit(origin, d, time, scan.max_range)?;
            let mut p = add3(origin, scale3(d, t));
            if let Some(n) = &noise {
                // Per-ray stream keeps noise independent of evaluation order.
                let mut rng = ChaCha8Rng::seed_from_u64(scan.seed);
                rng.set_stream(((k as u64) << 40) | i as u64);
                p = p.map(|v| v + n.sample(&mut rng));
            }
            let prim = &scene.primitives[idx];
            let mut rec = PointRecord::new(p, origin, time, prim.class_id);
            rec.dynamic = prim.dynamic;
            Some(rec)
        })
        .collect();
    PointCloud::with_records(records, SourceTag::Lidar, 0)
}

/// All timesteps concatenated in timestep order.
pub fn raycast_scan(scene: &SceneSpec, scan: &ScanSpec) -> PointCloud {
    let mut all = PointCloud::new(SourceTag::Lidar, 0);
    for k in 0..scan.poses.len() {
        all.records.extend(raycast_frame(scene, scan, k).records);
    }
    all
}

/// Regular voxel grid: cell `(ix, iy, iz)` spans `min + i·cell_size` to
/// `min + (i+1)·cell_size`. Linear index is `ix + nx·(iy + ny·iz)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub min: [f64; 3],
    pub cell_size: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn from_extents(min: [f64; 3], max: [f64; 3], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::InvalidArgument("cell size must be positive".into()));
        }
        let mut dims = [0usize; 3];
        for k in 0..3 {
            let n = (max[k] - min[k]) / cell_size;
            let r = n.round();
            if !(r >= 1.0) || (n - r).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "extent {}..{} on axis {k} is not a positive multiple of {cell_size}",
                    min[k], max[k]
                )));
            }
            dims[k] = r as usize;
        }
        Ok(Self { min, cell_size, dims })
    }

    pub fn max(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| self.min[k] + self.dims[k] as f64 * self.cell_size)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        [x, y, idx / (self.dims[0] * self.dims[1])]
    }

    pub fn center(&self, c: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| self.min[k] + (c[k] as f64 + 0.5) * self.cell_size)
    }

    pub fn cell_bounds(&self, c: [usize; 3]) -> ([f64; 3], [f64; 3]) {
        let lo = [0, 1, 2].map(|k| self.min[k] + c[k] as f64 * self.cell_size);
        (lo, lo.map(|v| v + self.cell_size))
    }

    /// Same dimensions and geometry up to single-precision storage error.
    pub fn matches(&self, other: &GridSpec) -> bool {
        let tol = 1e-5 * (1.0 + self.cell_size);
        self.dims == other.dims
            && (self.cell_size - other.cell_size).abs() <= tol
            && (0..3).all(|k| (self.min[k] - other.min[k]).abs() <= tol * (1.0 + self.min[k].abs()))
    }
}

const VOXEL_MAGIC: [u8; 4] = *b"QOVX";
const VOXEL_VERSION: u32 = 1;

/// Labelled voxel grid; `labels[i]` is 0 for free, `class + 1` when occupied.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub grid: GridSpec,
    pub labels: Vec<u16>,
    pub reference_time: f64,
}

impl VoxelVolume {
    pub fn empty(grid: GridSpec, reference_time: f64) -> Self {
        Self { grid, labels: vec![0; grid.len()], reference_time }
    }

    #[inline]
    pub fn class_at(&self, idx: usize) -> Option<u16> {
        match self.labels[idx] {
            0 => None,
            l => Some(l - 1),
        }
    }

    pub fn set(&mut self, idx: usize, class: Option<u16>) {
        self.labels[idx] = class.map_or(0, |c| c + 1);
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Writes the `QOVX` format. The reference time is not part of it.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&VOXEL_MAGIC)?;
        w.write_u32::<LE>(VOXEL_VERSION)?;
        for d in self.grid.dims {
            w.write_u32::<LE>(u32::try_from(d).map_err(|_| Error::InvalidArgument("grid too large".into()))?)?;
        }
        w.write_f32::<LE>(self.grid.cell_size as f32)?;
        let max = self.grid.max();
        for k in 0..3 {
            w.write_f32::<LE>(self.grid.min[k] as f32)?;
            w.write_f32::<LE>(max[k] as f32)?;
        }
        for l in &self.labels {
            w.write_u16::<LE>(*l)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof_as_truncated("magic"))?;
        if magic != VOXEL_MAGIC {
            return Err(Error::BadMagic { expected: VOXEL_MAGIC, found: magic });
        }
        let version = r.read_u32::<LE>().map_err(eof_as_truncated("version"))?;
        if version != VOXEL_VERSION {
            return Err(Error::VersionMismatch { expected: VOXEL_VERSION, found: version });
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LE>().map_err(eof_as_truncated("dims"))? as usize;
        }
        let cell_size = r.read_f32::<LE>().map_err(eof_as_truncated("cell size"))? as f64;
        let mut ext = [0f32; 6];
        r.read_f32_into::<LE>(&mut ext).map_err(eof_as_truncated("extents"))?;
        let grid = GridSpec { min: [ext[0] as f64, ext[2] as f64, ext[4] as f64], cell_size, dims };
        let n = grid.len();
        let mut labels = vec![0u16; n];
        r.read_u16_into::<LE>(&mut labels).map_err(eof_as_truncated("labels"))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::TrailingBytes(rest.len() as u64));
        }
        Ok(Self { grid, labels, reference_time: 0.0 })
    }
}

/// Labels each cell with the oracle at its centre at `time`.
pub fn voxelize_ground_truth(scene: &SceneSpec, grid: GridSpec, time: f64) -> VoxelVolume {
    let labels = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let c = grid.center(grid.coords(i));
            scene.oracle_query(Query4::from_point(c, time)).map_or(0, |cl| cl + 1)
        })
        .collect();
    VoxelVolume { grid, labels, reference_time: time }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn boxed(min: [f64; 3], max: [f64; 3], class: u16) -> Primitive {
        Primitive::new(Shape::Box { min, max }, class)
    }

    fn scan_at(origin: [f64; 3], dirs: Vec<[f64; 3]>) -> ScanSpec {
        ScanSpec {
            poses: vec![(0.0, RigidTransform::from_translation(origin))],
            directions: dirs,
            max_range: 100.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn oracle_static_and_moving() {
        let scene = SceneSpec {
            primitives: vec![
                boxed([-1.0, -1.0, 0.0], [1.0, 1.0, 2.0], 3),
                boxed([5.0, -1.0, 0.0], [7.0, 1.0, 2.0], 1).moving([1.0, 0.0, 0.0]),
            ],
            bounds: 50.0,
        };
        for t in [-3.0, 0.0, 10.0] {
            assert_eq!(scene.oracle_query(Query4::new(0.0, 0.0, 1.0, t)), Some(3));
        }
        assert_eq!(scene.oracle_query(Query4::new(0.0, 0.0, 3.0, 0.0)), None);
        assert_eq!(scene.oracle_query(Query4::new(6.0, 0.0, 1.0, 0.0)), Some(1));
        assert_eq!(scene.oracle_query(Query4::new(6.0, 0.0, 1.0, 3.0)), None);
        assert_eq!(scene.oracle_query(Query4::new(9.0, 0.0, 1.0, 3.0)), Some(1));
    }

    #[test]
    fn list_order_resolves_overlap() {
        let scene = SceneSpec {
            primitives: vec![boxed([0.0; 3], [2.0; 3], 4), boxed([1.0; 3], [3.0; 3], 5)],
            bounds: 10.0,
        };
        assert_eq!(scene.oracle_query(Query4::new(1.5, 1.5, 1.5, 0.0)), Some(4));
        assert_eq!(scene.oracle_query(Query4::new(2.5, 2.5, 2.5, 0.0)), Some(5));
    }

    #[test]
    fn ray_hits_face_at_exact_distance() {
        let scene = SceneSpec { primitives: vec![boxed([10.0, -1.0, -1.0], [12.0, 1.0, 1.0], 2)], bounds: 50.0 };
        let pc = raycast_frame(&scene, &scan_at([0.0; 3], vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]), 0);
        assert_eq!(pc.len(), 1);
        assert_eq!(pc.records[0].position, [10.0, 0.0, 0.0]);
        assert_eq!(pc.records[0].class_id, 2);
    }

    #[test]
    fn nearer_box_wins_regardless_of_order() {
        let far = boxed([20.0, -1.0, -1.0], [21.0, 1.0, 1.0], 1);
        let near = boxed([5.0, -1.0, -1.0], [6.0, 1.0, 1.0], 2);
        for prims in [vec![far.clone(), near.clone()], vec![near, far]] {
            let scene = SceneSpec { primitives: prims, bounds: 50.0 };
            let pc = raycast_frame(&scene, &scan_at([0.0; 3], vec![[1.0, 0.0, 0.0]]), 0);
            assert_eq!(pc.records[0].class_id, 2);
            assert_eq!(pc.records[0].position[0], 5.0);
        }
    }

    #[test]
    fn cylinder_side_and_cap() {
        let cyl = Primitive::new(Shape::Cylinder { center: [10.0, 0.0], radius: 1.0, z_min: 0.0, z_max: 2.0 }, 6);
        let scene = SceneSpec { primitives: vec![cyl], bounds: 50.0 };
        let (t, _) = scene.first_hit([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], 0.0, 100.0).unwrap();
        assert!((t - 9.0).abs() < 1e-12);
        let (t, _) = scene.first_hit([10.0, 0.0, 5.0], [0.0, 0.0, -1.0], 0.0, 100.0).unwrap();
        assert!((t - 3.0).abs() < 1e-12);
        assert!(scene.first_hit([0.0, 5.0, 1.0], [1.0, 0.0, 0.0], 0.0, 100.0).is_none());
    }

    #[test]
    fn surface_consistency_on_random_rays() {
        let scene = SceneSpec {
            primitives: vec![
                boxed([3.0, -2.0, 0.0], [5.0, 2.0, 1.5], 1),
                Primitive::new(Shape::Cylinder { center: [-6.0, 3.0], radius: 0.8, z_min: 0.0, z_max: 3.0 }, 2),
                boxed([0.0, 6.0, 0.0], [2.0, 8.0, 1.0], 3).moving([0.0, -1.0, 0.0]),
                Primitive::new(Shape::Ground { top: 0.0, thickness: 1.0 }, 0),
            ],
            bounds: 40.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut hits = 0;
        for _ in 0..2000 {
            let origin = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(1.8..2.5)];
            let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let el: f64 = rng.random_range(-1.2..0.3);
            let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let time = rng.random_range(-1.0..1.0);
            if let Some((t, idx)) = scene.first_hit(origin, d, time, 60.0) {
                hits += 1;
                let p = add3(origin, scale3(d, t));
                let inside = scene.oracle_query(Query4::from_point(add3(p, scale3(d, 1e-4)), time));
                let before = scene.oracle_query(Query4::from_point(add3(p, scale3(d, -1e-4)), time));
                assert_eq!(inside, Some(scene.primitives[idx].class_id));
                assert_eq!(before, None);
            }
        }
        assert!(hits > 1000);
    }

    #[test]
    fn scan_is_order_independent() {
        let scene = SceneSpec {
            primitives: vec![Primitive::new(Shape::Ground { top: 0.0, thickness: 1.0 }, 0), boxed([4.0, -1.0, 0.0], [6.0, 1.0, 2.0], 1)],
            bounds: 40.0,
        };
        let dirs = ScanSpec::azimuth_elevation_grid(64, 8, -30.0, 5.0);
        let mut rev = dirs.clone();
        rev.reverse();
        let key = |pc: PointCloud| {
            let mut v: Vec<[u64; 3]> = pc.records.iter().map(|r| r.position.map(f64::to_bits)).collect();
            v.sort();
            v
        };
        let a = key(raycast_frame(&scene, &scan_at([0.0, 0.0, 2.0], dirs), 0));
        let b = key(raycast_frame(&scene, &scan_at([0.0, 0.0, 2.0], rev), 0));
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn empty_scene_voxelizes_free() {
        let grid = GridSpec::from_extents([-2.0; 3], [2.0; 3], 0.4).unwrap();
        let v = voxelize_ground_truth(&SceneSpec { primitives: vec![], bounds: 10.0 }, grid, 0.0);
        assert_eq!(v.occupied_count(), 0);
        assert_eq!(v.labels.len(), 1000);
    }

    #[test]
    fn box_voxelization_matches_center_containment() {
        let grid = GridSpec::from_extents([-4.0, -4.0, -1.2], [4.0, 4.0, 4.0], 0.4).unwrap();
        let (bmin, bmax) = ([-1.9, -2.1, 0.05], [2.1, 1.9, 4.05]);
        let scene = SceneSpec { primitives: vec![boxed(bmin, bmax, 2)], bounds: 10.0 };
        let v = voxelize_ground_truth(&scene, grid, 0.0);
        // Independent count: centres along each axis that fall inside the box.
        let along = |k: usize| {
            (0..grid.dims[k])
                .filter(|&i| {
                    let c = grid.min[k] + (i as f64 + 0.5) * 0.4;
                    c >= bmin[k] && c <= bmax[k]
                })
                .count()
        };
        assert_eq!(v.occupied_count(), along(0) * along(1) * along(2));
        assert_eq!((along(0), along(1), along(2)), (10, 10, 10));
        assert!(v.labels.iter().all(|&l| l == 0 || l == 3));
    }

    #[test]
    fn voxels_agree_with_oracle_spot_check() {
        let grid = GridSpec::from_extents([-6.0, -6.0, -0.8], [6.0, 6.0, 2.4], 0.4).unwrap();
        let scene = SceneSpec {
            primitives: vec![
                boxed([-1.3, 0.7, 0.5], [1.1, 2.9, 1.7], 2).moving([0.5, -0.3, 0.0]),
                Primitive::new(Shape::Cylinder { center: [-3.1, -2.2], radius: 1.3, z_min: 0.0, z_max: 2.2 }, 1),
                Primitive::new(Shape::Ground { top: 0.0, thickness: 2.0 }, 0),
            ],
            bounds: 30.0,
        };
        let v = voxelize_ground_truth(&scene, grid, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let i = rng.random_range(0..grid.len());
            let q = Query4::from_point(grid.center(grid.coords(i)), 0.7);
            assert_eq!(v.class_at(i), scene.oracle_query(q));
        }
    }

    #[test]
    fn moving_box_shifts_voxels() {
        let grid = GridSpec::from_extents([-4.0, -4.0, 0.0], [4.0, 4.0, 1.2], 0.4).unwrap();
        let scene = SceneSpec {
            primitives: vec![boxed([-2.0, -1.0, 0.0], [0.0, 1.0, 1.2], 1).moving([0.8, 0.0, 0.0])],
            bounds: 10.0,
        };
        let a = voxelize_ground_truth(&scene, grid, 0.0);
        let b = voxelize_ground_truth(&scene, grid, 2.5);
        assert_eq!(a.occupied_count(), b.occupied_count());
        assert_ne!(a.labels, b.labels);
        for i in 0..grid.len() {
            let c = grid.coords(i);
            if c[0] + 5 < grid.dims[0] {
                assert_eq!(a.labels[i], b.labels[grid.index([c[0] + 5, c[1], c[2]])]);
            }
        }
    }

    #[test]
    fn voxel_volume_io() {
        let grid = GridSpec::from_extents([-1.0, -1.0, 0.0], [1.0, 1.0, 0.5], 0.5).unwrap();
        let mut v = VoxelVolume::empty(grid, 0.0);
        v.set(3, Some(7));
        let mut b = Vec::new();
        v.write(&mut b).unwrap();
        assert_eq!(b.len(), 4 + 4 + 12 + 4 + 24 + 2 * grid.len());
        assert_eq!(VoxelVolume::read(&b[..]).unwrap(), v);
        b[1] = 0;
        assert!(matches!(VoxelVolume::read(&b[..]), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn scene_text_round_trip() {
        let scene = SceneSpec {
            primitives: vec![
                Primitive::new(Shape::Ground { top: 0.0, thickness: 2.0 }, 0),
                boxed([1.0, 2.0, 0.5], [2.0, 3.0, 1.5], 1).moving([0.0, 2.0, 0.0]),
                Primitive::new(Shape::Cylinder { center: [3.0, -4.0], radius: 0.5, z_min: 0.0, z_max: 4.0 }, 2),
            ],
            bounds: 30.0,
        };
        assert_eq!(SceneSpec::parse(&scene.to_text()).unwrap(), scene);
        assert!(matches!(
            SceneSpec::parse("[scene]\nbounds = 3\n[box]\nclass=1\nmin=0,0,0\nmax=1,1,1\ncolour=red\n"),
            Err(Error::UnknownKey { .. })
        ));
    }

    #[test]
    fn scan_config_parses() {
        let s = ScanSpec::parse(
            "[scan]\nmax_range = 50\nazimuth_steps = 8\nelevation_steps = 2\nelevation_min_deg = -10\nelevation_max_deg = 0\n\
             [pose]\ntime = -0.5\ntranslation = -1, 0, 2\n[pose]\ntime = 0\ntranslation = 0, 0, 2\nyaw_deg = 90\n",
        )
        .unwrap();
        assert_eq!(s.directions.len(), 16);
        assert_eq!(s.timesteps(), vec![-0.5, 0.0]);
        assert!(ScanSpec::parse(
            "[scan]\nmax_range = 50\nazimuth_steps = 8\nelevation_steps = 2\nelevation_min_deg = -10\nelevation_max_deg = 0\n\
             [pose]\ntime = 0\ntranslation = 0,0,2\n[pose]\ntime = 0\ntranslation = 0,0,2\n"
        )
        .is_err());
    }
}
