//! Run configuration: one INI file with `[run]`, `[sampling]`, `[model]`,
//! `[train]`, `[eval]` and `[geometry]` sections. Unknown sections and keys
//! are errors.

use std::path::{Path, PathBuf};

use occfield::config::{ConfigDoc, Section, SectionReader};
use occfield::field::{FieldArch, RenderConfig, TrainConfig};
use occfield::geometry::FourierConfig;
use occfield::scene::GridSpec;
use occfield::supervision::SamplingConfig;

use crate::error::{CliError, CliResult};
use crate::output::read_text;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Query,
    Rendering,
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "query" => Ok(TrainMode::Query),
            "rendering" => Ok(TrainMode::Rendering),
            _ => Err(format!("unknown training mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassWeights {
    /// Log-frequency weights from the training labels.
    Auto,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub grid: GridSpec,
    pub time: f64,
    pub occ_threshold: f64,
    pub depth_tolerances: Vec<f64>,
    /// Scan frames whose rays are used for RayIoU.
    pub ray_frames: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GeometrySettings {
    pub kappa_max: f64,
    pub kappa_steps: usize,
    pub d_near: f64,
    pub d_far: f64,
    pub alpha: f64,
    pub n_bins: usize,
    pub infinity_bin: Option<f64>,
    pub bev_width: usize,
    pub bev_height: usize,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scene: PathBuf,
    pub scan: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub n_classes: usize,
    /// Dimension of synthetic per-class feature targets; 0 disables them.
    pub feature_dim: usize,
    pub sampling: SamplingConfig,
    pub arch: FieldArch,
    pub mode: TrainMode,
    pub train: TrainConfig,
    pub class_weights: ClassWeights,
    pub render: RenderConfig,
    pub eval: EvalSettings,
    pub geometry: GeometrySettings,
}

fn reader<'a>(doc: &'a ConfigDoc, name: &'a str) -> CliResult<Option<SectionReader<'a>>> {
    Ok(doc.unique(name)?.map(SectionReader::new))
}

fn with_section<T>(
    doc: &ConfigDoc,
    name: &str,
    f: impl FnOnce(&mut SectionReader) -> occfield::Result<T>,
) -> CliResult<T> {
    static EMPTY: std::sync::OnceLock<Section> = std::sync::OnceLock::new();
    let empty = EMPTY.get_or_init(|| Section { name: String::new(), line: 0, entries: Vec::new() });
    let mut r = reader(doc, name)?.unwrap_or_else(|| SectionReader::new(empty));
    let v = f(&mut r)?;
    r.finish()?;
    Ok(v)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> CliResult<Self> {
        let text = read_text(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, seed_override)
    }

    pub fn parse(text: &str, base: &Path, seed_override: Option<u64>) -> CliResult<Self> {
        let doc = ConfigDoc::parse(text)?;
        doc.check_sections(&["run", "sampling", "model", "train", "eval", "geometry"])?;
        if doc.unique("run")?.is_none() {
            return Err(CliError::Config("missing [run] section".into()));
        }

        let (scene, scan, output_dir, seed, n_classes, feature_dim) = with_section(&doc, "run", |r| {
            let scene: String = r.req("scene")?;
            let scan: String = r.req("scan")?;
            let out: String = r.req("output_dir")?;
            let seed: Option<u64> = r.opt("seed")?;
            let n_classes: usize = r.req("n_classes")?;
            let feature_dim: usize = r.or("feature_dim", 0)?;
            Ok((resolve(base, &scene), resolve(base, &scan), resolve(base, &out), seed, n_classes, feature_dim))
        })?;
        let seed = seed_override
            .or(seed)
            .ok_or_else(|| CliError::Config("no seed: set `seed` in [run] or pass --seed".into()))?;
        for p in [&scene, &scan] {
            if !p.is_file() {
                return Err(CliError::Io(format!("{}: no such file", p.display())));
            }
        }

        let sampling = with_section(&doc, "sampling", |r| {
            let d = SamplingConfig::default();
            Ok(SamplingConfig {
                delta: r.or("delta", d.delta)?,
                n_neg_per_point: r.or("n_neg_per_point", d.n_neg_per_point)?,
                n_pos_per_point: r.or("n_pos_per_point", d.n_pos_per_point)?,
                t_min: r.or("t_min", d.t_min)?,
                t_max: r.or("t_max", d.t_max)?,
                r_distribution: d.r_distribution,
                seed,
            })
        })?;
        sampling.validate()?;

        let arch = with_section(&doc, "model", |r| {
            let d = FieldArch::default();
            let df = FourierConfig::default();
            let fourier = FourierConfig::new(
                r.or("fourier_bands", df.n_bands)?,
                r.or("fourier_min_freq", df.min_freq)?,
                r.or("fourier_max_freq", df.max_freq)?,
            )?;
            Ok(FieldArch {
                grid_width: r.or("grid_width", d.grid_width)?,
                grid_height: r.or("grid_height", d.grid_height)?,
                grid_channels: r.or("grid_channels", d.grid_channels)?,
                hidden: r.list_opt("hidden")?.unwrap_or(d.hidden),
                n_classes,
                feature_dim,
                fourier,
                k_hr: r.or("k_hr", d.k_hr)?,
                beta: r.or("beta", d.beta)?,
            })
        })?;
        arch.validate()?;

        let (mode, train, class_weights, render) = with_section(&doc, "train", |r| {
            let d = TrainConfig::default();
            let mode: TrainMode = r.or("mode", TrainMode::Query)?;
            let weights = match r.opt::<String>("class_weights")? {
                None => ClassWeights::Fixed(Vec::new()),
                Some(s) if s.trim() == "auto" => ClassWeights::Auto,
                Some(s) => ClassWeights::Fixed(
                    s.split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| occfield::Error::Config { line: 0, message: format!("bad class_weights `{s}`") })?,
                ),
            };
            let train = TrainConfig {
                lambda_occ: r.or("lambda_occ", d.lambda_occ)?,
                lambda_sem: r.or("lambda_sem", d.lambda_sem)?,
                lambda_vfm: r.or("lambda_vfm", d.lambda_vfm)?,
                learning_rate: r.or("learning_rate", d.learning_rate)?,
                warmup_steps: r.or("warmup_steps", d.warmup_steps)?,
                total_steps: r.or("total_steps", d.total_steps)?,
                batch_size: r.or("batch_size", d.batch_size)?,
                class_weights: match &weights {
                    ClassWeights::Fixed(w) => w.clone(),
                    ClassWeights::Auto => Vec::new(),
                },
                weight_decay: r.or("weight_decay", d.weight_decay)?,
                seed,
            };
            let dr = RenderConfig::default();
            let render = RenderConfig {
                train: TrainConfig { batch_size: r.or("rays_per_step", 32)?, ..train.clone() },
                n_coarse: r.or("n_coarse", dr.n_coarse)?,
                n_fine: r.or("n_fine", dr.n_fine)?,
                near: r.or("near", dr.near)?,
                far: r.or("far", dr.far)?,
            };
            Ok((mode, train, weights, render))
        })?;
        train.validate()?;

        let eval = with_section(&doc, "eval", |r| {
            let grid = GridSpec::from_extents(
                r.vec_opt("min")?.unwrap_or([-20.0, -20.0, -0.4]),
                r.vec_opt("max")?.unwrap_or([20.0, 20.0, 2.8]),
                r.or("cell_size", 0.4)?,
            )?;
            Ok(EvalSettings {
                grid,
                time: r.or("time", 0.0)?,
                occ_threshold: r.or("occ_threshold", 0.5)?,
                depth_tolerances: r.list_opt("depth_tolerances")?.unwrap_or_else(|| vec![1.0, 2.0, 4.0]),
                ray_frames: r.list_opt("ray_frames")?.unwrap_or_else(|| vec![0]),
            })
        })?;

        let geometry = with_section(&doc, "geometry", |r| {
            Ok(GeometrySettings {
                kappa_max: r.or("kappa_max", 400.0)?,
                kappa_steps: r.or("kappa_steps", 81)?,
                d_near: r.or("d_near", 40.0)?,
                d_far: r.or("d_far", 100.0)?,
                alpha: r.or("alpha", 0.3)?,
                n_bins: r.or("n_bins", 64)?,
                infinity_bin: r.opt("infinity_bin")?.or(Some(180.0)).filter(|v: &f64| *v > 0.0),
                bev_width: r.or("bev_width", 128)?,
                bev_height: r.or("bev_height", 128)?,
            })
        })?;
        if geometry.kappa_steps < 2 {
            return Err(CliError::Config("kappa_steps must be at least 2".into()));
        }

        Ok(Self {
            scene,
            scan,
            output_dir,
            seed,
            n_classes,
            feature_dim,
            sampling,
            arch,
            mode,
            train,
            class_weights,
            render,
            eval,
            geometry,
        })
    }
}
