use std::io::Write;
use std::path::PathBuf;

use occfield::bev::{splat_pointcloud, BevGrid};
use occfield::eval::{evaluate, predict_volume, ClassSet, RayIoUConfig};
use occfield::field::{
    rays_from_pointcloud, train, train_rendering_baseline, write_loss_csv, FieldModel, LossReport,
};
use occfield::geometry::{ContractionParams, DepthBinning};
use occfield::pointcloud::{read_pointcloud, write_pointcloud, ClassTable, PointCloud};
use occfield::scene::{raycast_frame, voxelize_ground_truth, ScanSpec, SceneSpec, VoxelVolume};
use occfield::supervision::{
    attach_prototype_features, build_query_set, class_prototypes, read_query_batch, validate_against_oracle,
    write_query_batch, QueryBatch,
};

use crate::config::{ClassWeights, RunConfig, TrainMode};
use crate::error::{CliError, CliResult};
use crate::output::{open, read_text, Staged};

pub const GT_FILE: &str = "gt.qovx";
pub const SCENE_FILE: &str = "scene.ini";
pub const QUERY_FILE: &str = "queries.qoqs";
pub const ORACLE_FILE: &str = "oracle.csv";
pub const MODEL_FILE: &str = "model.qofm";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

pub fn frame_file(k: usize) -> String {
    format!("frame_{k:03}.qopc")
}

fn load_scene(cfg: &RunConfig) -> CliResult<SceneSpec> {
    let scene = SceneSpec::parse(&read_text(&cfg.scene)?)?;
    scene.validate(Some(cfg.n_classes))?;
    Ok(scene)
}

/// The scan with its noise seed replaced by the run seed.
fn load_scan(cfg: &RunConfig) -> CliResult<ScanSpec> {
    let mut scan = ScanSpec::parse(&read_text(&cfg.scan)?)?;
    scan.seed = cfg.seed;
    Ok(scan)
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

pub fn cmd_synth(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let scene = load_scene(cfg)?;
    let gt = voxelize_ground_truth(&scene, cfg.eval.grid, cfg.eval.time);
    log::info!("ground truth: {} of {} cells occupied", gt.occupied_count(), gt.labels.len());
    let mut st = Staged::new(&cfg.output_dir)?;
    st.write(SCENE_FILE, |w| Ok(w.write_all(scene.to_text().as_bytes())?))?;
    st.write(GT_FILE, |w| Ok(gt.write(w)?))?;
    st.commit()
}

pub fn cmd_scan(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let scene = load_scene(cfg)?;
    let scan = load_scan(cfg)?;
    let mut st = Staged::new(&cfg.output_dir)?;
    for k in 0..scan.poses.len() {
        let pc = raycast_frame(&scene, &scan, k);
        log::info!("frame {k} (t={}): {} returns", scan.poses[k].0, pc.len());
        st.write(&frame_file(k), |w| Ok(write_pointcloud(&pc, w)?))?;
    }
    st.commit()
}

fn load_frames(cfg: &RunConfig) -> CliResult<Vec<PointCloud>> {
    let scan = load_scan(cfg)?;
    (0..scan.poses.len()).map(|k| Ok(read_pointcloud(open(&out(cfg, &frame_file(k)))?)?)).collect()
}

pub fn cmd_queries(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let scene = load_scene(cfg)?;
    let mut frames = load_frames(cfg)?;
    if cfg.feature_dim > 0 {
        let protos = class_prototypes(cfg.n_classes, cfg.feature_dim, cfg.seed);
        frames = frames.iter().map(|pc| attach_prototype_features(pc, &protos)).collect::<occfield::Result<_>>()?;
    }
    let batch = build_query_set(&frames, &cfg.sampling)?;
    let rep = validate_against_oracle(&batch, &scene);
    log::info!(
        "{} queries; purity neg {:.4} pos {:.4}, semantic agreement {:.4}",
        batch.len(),
        rep.negative_purity,
        rep.positive_purity,
        rep.semantic_agreement
    );
    let mut st = Staged::new(&cfg.output_dir)?;
    st.write(QUERY_FILE, |w| Ok(write_query_batch(&batch, w)?))?;
    st.write(ORACLE_FILE, |w| {
        writeln!(w, "negative_purity,positive_purity,semantic_agreement,negatives,positives,semantic_checked")?;
        writeln!(
            w,
            "{:.6},{:.6},{:.6},{},{},{}",
            rep.negative_purity, rep.positive_purity, rep.semantic_agreement, rep.negatives, rep.positives, rep.semantic_checked
        )?;
        Ok(())
    })?;
    st.commit()
}

/// Log-frequency weights from the semantic labels of the positives.
fn label_weights(batch: &QueryBatch, n_classes: usize) -> CliResult<Vec<f64>> {
    let mut counts = vec![0.0; n_classes];
    for s in &batch.samples {
        if let Some(c) = s.semantic {
            let slot = counts
                .get_mut(c as usize)
                .ok_or_else(|| CliError::Validation(format!("query label {c} exceeds n_classes")))?;
            *slot += 1.0;
        }
    }
    let names = (0..n_classes).map(|c| c.to_string()).collect();
    Ok(ClassTable::new(names, counts, vec![false; n_classes])?.log_frequency_weights())
}

pub fn cmd_train(cfg: &RunConfig, mode: TrainMode) -> CliResult<Vec<PathBuf>> {
    let init = FieldModel::<f32>::new(cfg.arch.clone(), cfg.seed)?;
    let (model, history): (FieldModel<f32>, Vec<LossReport>) = match mode {
        TrainMode::Query => {
            let batch = read_query_batch(open(&out(cfg, QUERY_FILE))?)?;
            let mut tc = cfg.train.clone();
            if cfg.class_weights == ClassWeights::Auto {
                tc.class_weights = label_weights(&batch, cfg.n_classes)?;
            }
            train(&init, &batch, &tc)?
        }
        TrainMode::Rendering => {
            let frames = load_frames(cfg)?;
            let rays: Vec<_> = frames
                .iter()
                .flat_map(rays_from_pointcloud)
                .filter(|r| cfg.sampling.in_window(r.time))
                .collect();
            log::info!("rendering baseline on {} rays", rays.len());
            let (m, h) = train_rendering_baseline(&init, &rays, &cfg.render)?;
            (m, h.iter().map(|r| r.to_loss_report()).collect())
        }
    };
    if let Some(last) = history.last() {
        log::info!("final loss {:.6}", last.total);
    }
    let mut st = Staged::new(&cfg.output_dir)?;
    st.write(MODEL_FILE, |w| Ok(model.write(w)?))?;
    st.write(LOSS_FILE, |w| Ok(write_loss_csv(&history, w)?))?;
    st.commit()
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let scene = load_scene(cfg)?;
    let scan = load_scan(cfg)?;
    let model = FieldModel::<f32>::read(open(&out(cfg, MODEL_FILE))?)?;
    let gt = VoxelVolume::read(open(&out(cfg, GT_FILE))?)?;
    if !gt.grid.matches(&cfg.eval.grid) {
        return Err(CliError::Validation("ground-truth grid differs from the [eval] grid; rerun synth".into()));
    }
    let gt = VoxelVolume { grid: cfg.eval.grid, ..gt };
    let pred = predict_volume(&model, cfg.eval.grid, cfg.eval.time, cfg.eval.occ_threshold);
    let classes = ClassSet::from_scene(&scene, cfg.n_classes)?;
    let rays = RayIoUConfig::from_scan(&scan, &cfg.eval.ray_frames, cfg.eval.depth_tolerances.clone())?;
    let mut report = evaluate(&pred, &gt, &classes, &rays)?;
    report.occ_threshold = Some(cfg.eval.occ_threshold);
    println!("{}", occfield::eval::MetricsReport::summary_header());
    println!("{}", report.summary_line());
    let mut st = Staged::new(&cfg.output_dir)?;
    st.write(METRICS_FILE, |w| Ok(report.write_csv(w)?))?;
    st.write(SUMMARY_FILE, |w| Ok(report.write_summary(w)?))?;
    st.commit()
}

pub fn cmd_inspect_geometry(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let g = &cfg.geometry;
    let contraction = ContractionParams::new(cfg.arch.k_hr, cfg.arch.beta)?;
    let bins = DepthBinning::new(g.d_near, g.d_far, g.alpha, g.n_bins, g.infinity_bin)?;
    let scene = load_scene(cfg)?;
    let scan = load_scan(cfg)?;
    let fourier = cfg.arch.fourier;
    let fd = fourier.encoded_len(2) + cfg.n_classes;
    let mut bev = BevGrid::<f64>::for_features(g.bev_width, g.bev_height, fd, contraction)?;
    for k in 0..scan.poses.len() {
        bev = splat_pointcloud(&raycast_frame(&scene, &scan, k), &bev, &fourier)?;
    }
    log::info!("BEV mass {:.1}", bev.total_mass());

    let mut st = Staged::new(&cfg.output_dir)?;
    st.write("contraction.csv", |w| {
        writeln!(w, "kappa,contracted,roundtrip_error")?;
        for i in 0..g.kappa_steps {
            let kappa = -g.kappa_max + 2.0 * g.kappa_max * i as f64 / (g.kappa_steps - 1) as f64;
            let c = contraction.contract_axis(kappa)?;
            let back = contraction.uncontract_axis(c)?;
            writeln!(w, "{kappa:.6},{c:.12},{:.3e}", (back - kappa).abs())?;
        }
        Ok(())
    })?;
    st.write("depth_bins.csv", |w| {
        writeln!(w, "bin,lower,upper,representative")?;
        let edges = bins.edges();
        for (i, rep) in bins.representative_depths().iter().enumerate() {
            writeln!(w, "{i},{:.9},{:.9},{rep:.9}", edges[i], edges[i + 1])?;
        }
        Ok(())
    })?;
    st.write("bev_mass.ppm", |w| Ok(bev.write_mass_ppm(w)?))?;
    st.commit()
}
