use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use gloam::cloud::{export_ply, list_kitti_scans, read_kitti_bin, write_kitti_bin};
use gloam::eval::{change_frame, parse_kitti_calib, read_kitti_poses, rte_with, write_kitti_poses, EvalError};
use gloam::features::{classical_descriptors, load_external_features, pca_fit_subsampled, write_external_features};
use gloam::odometry::{prepare_sequence, run_prepared, synth};
use gloam::training::{train, TrainError, TrainingSequence};
use gloam::{AssociationMode, CovarianceMode, MlpPair, PcaModel, PointCloud, RawFeatures};

use crate::config::{Config, DatasetManifest};
use crate::manifest::{sidecar, RunManifest};
use crate::{
    Assoc, Classify, Cli, CmdResult, Command, Cov, EvalArgs, ExportArgs, FeaturesArgs, Failure, ModeArgs, OdomArgs,
    SynthArgs, TrainArgs, World,
};

fn input_err(msg: impl Into<String>) -> Failure {
    Failure::Input(anyhow!(msg.into()))
}

pub fn run(cli: &Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(input_err("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().runtime()?;
    }
    let mut cfg = Config::load(cli.config.as_deref()).input()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Odom(a) => odom(a, cfg),
        Command::Eval(a) => eval(a, cfg),
        Command::Train(a) => train_cmd(a, cfg),
        Command::Features(a) => features(a, cfg),
        Command::Export(a) => export(a, cfg),
        Command::Synth(a) => synth_cmd(a, cfg),
    }
}

/// Applies mode flags and loads the weights the resulting mode needs.
fn resolve_mode(mode: &ModeArgs, cfg: &mut Config) -> CmdResult<MlpPair> {
    let reg = &mut cfg.odometry.registration;
    if let Some(a) = mode.assoc {
        reg.association = match a {
            Assoc::Euclidean => AssociationMode::Euclidean,
            Assoc::Feature => AssociationMode::FeatureExtended,
        };
    }
    if let Some(c) = mode.cov {
        reg.covariance = match c {
            Cov::Plane => CovarianceMode::Plane,
            Cov::Learned => CovarianceMode::Learned,
        };
    }
    match &mode.weights {
        Some(w) => MlpPair::load(&w[0], &w[1]).with_context(|| "loading --weights").input(),
        None if cfg.odometry.needs_features() => {
            Err(input_err("feature association and learned covariances need --weights CONVERSION EIGENVALUE"))
        }
        None => Ok(MlpPair::default()),
    }
}

fn read_scans(dir: &Path) -> CmdResult<(Vec<PathBuf>, Vec<PointCloud>)> {
    let paths = list_kitti_scans(dir).with_context(|| format!("listing scans in {}", dir.display())).input()?;
    let scans = paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut c = read_kitti_bin(p).with_context(|| format!("reading {}", p.display()))?;
            c.frame_id = i as u64;
            Ok(c)
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .input()?;
    Ok((paths, scans))
}

fn read_features(dir: &Path, scan_paths: &[PathBuf], scans: &[PointCloud]) -> CmdResult<Vec<RawFeatures>> {
    scan_paths
        .iter()
        .zip(scans)
        .map(|(p, c)| {
            let stem = p.file_stem().expect("listed scans have names");
            let f = dir.join(stem).with_extension("glf");
            load_external_features(&f, c.len()).with_context(|| format!("reading {}", f.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .input()
}

fn load_pca(path: Option<&PathBuf>) -> CmdResult<Option<PcaModel>> {
    path.map(|p| PcaModel::load(p).with_context(|| format!("reading PCA model {}", p.display()))).transpose().input()
}

fn odom(a: &OdomArgs, mut cfg: Config) -> CmdResult {
    let weights = resolve_mode(&a.mode, &mut cfg)?;
    let (paths, scans) = read_scans(&a.scans)?;
    if scans.len() < 2 {
        return Err(input_err(format!("{} holds {} scans, odometry needs at least 2", a.scans.display(), scans.len())));
    }
    let external = a.features.as_ref().map(|d| read_features(d, &paths, &scans)).transpose()?;
    let pca = load_pca(a.pca.as_ref())?;

    let seq = prepare_sequence(&scans, external.as_deref(), pca, &cfg.odometry).runtime()?;
    let run = run_prepared(&seq, &weights, &cfg.odometry).runtime()?;

    write_kitti_poses(&run.trajectory, &a.out).with_context(|| format!("writing {}", a.out.display())).runtime()?;
    let diag_path = a.diagnostics.clone().unwrap_or_else(|| sidecar(&a.out, "diag.jsonl"));
    let mut diag = String::new();
    for d in &run.diagnostics {
        diag += &serde_json::to_string(d).expect("diagnostics serialize");
        diag.push('\n');
    }
    fs::write(&diag_path, diag).with_context(|| format!("writing {}", diag_path.display())).runtime()?;

    let fallbacks = run.diagnostics.iter().filter(|d| d.fallback).count();
    let mut m = RunManifest::new("odom", &cfg);
    m.input("scans", &a.scans).output("poses", &a.out).output("diagnostics", &diag_path);
    if let Some(w) = &a.mode.weights {
        m.input("conversion_weights", &w[0]).input("eigenvalue_weights", &w[1]);
    }
    if let Some(f) = &a.features {
        m.input("features", f);
    }
    if let Some(p) = &a.pca {
        m.input("pca", p);
    }
    m.note("frames", scans.len()).note("fallback_frames", fallbacks);
    m.write(&sidecar(&a.out, "manifest.json")).runtime()?;
    println!("{} poses written to {} ({fallbacks} fallback frames)", run.trajectory.len(), a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs, cfg: Config) -> CmdResult {
    let gt = read_kitti_poses(&a.gt).with_context(|| format!("reading {}", a.gt.display())).input()?;
    let mut est = read_kitti_poses(&a.est).with_context(|| format!("reading {}", a.est.display())).input()?;
    if let Some(c) = &a.calib {
        let text = fs::read_to_string(c).with_context(|| format!("reading {}", c.display())).input()?;
        est = change_frame(&est, &parse_kitti_calib(&text).input()?);
    }
    let report = match rte_with(&gt, &est, &cfg.rte) {
        Ok(r) => r,
        Err(e @ EvalError::LengthMismatch { .. }) => return Err(Failure::Input(e.into())),
        Err(e) => return Err(Failure::Runtime(e.into())),
    };
    if report.too_short {
        eprintln!("warning: trajectory is shorter than every evaluation length");
    }
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display())).runtime()?;
        let mut m = RunManifest::new("eval", &cfg);
        m.input("gt", &a.gt).input("est", &a.est).output("report", out);
        m.note("t_rte", report.t_rte).note("r_rte", report.r_rte).note("windows", report.windows);
        m.write(&sidecar(out, "manifest.json")).runtime()?;
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs, cfg: Config) -> CmdResult {
    let dataset = DatasetManifest::load(&a.dataset).input()?;
    let mut sequences = Vec::new();
    for (i, entry) in dataset.sequences.iter().enumerate() {
        let (paths, scans) = read_scans(&entry.scans)?;
        let poses = entry.poses.as_ref().expect("manifest loader requires poses");
        let gt = read_kitti_poses(poses).with_context(|| format!("reading {}", poses.display())).input()?;
        if gt.len() != scans.len() {
            return Err(input_err(format!("sequence {i}: {} poses for {} scans", gt.len(), scans.len())));
        }
        let external = entry.features.as_ref().map(|d| read_features(d, &paths, &scans)).transpose()?;
        sequences.push(TrainingSequence { scans, ground_truth: gt, external });
    }

    let mut tcfg = cfg.train_config();
    if let Some(b) = a.budget {
        tcfg.tpe.budget = b;
    }
    tcfg.tpe.parallelism = rayon::current_num_threads();
    let (best, state) = match train(&sequences, &tcfg, Some(&a.study)) {
        Ok(r) => r,
        Err(e @ (TrainError::Journal { .. } | TrainError::Dimension { .. } | TrainError::GroundTruth { .. })) => {
            return Err(Failure::Input(e.into()))
        }
        Err(e) => return Err(Failure::Runtime(e.into())),
    };

    fs::create_dir_all(&a.out_weights).with_context(|| format!("creating {}", a.out_weights.display())).runtime()?;
    let (conv, eig) = (a.out_weights.join("conversion.txt"), a.out_weights.join("eigenvalue.txt"));
    best.save(&conv, &eig).runtime()?;
    let top = state.best().expect("train returns only with a completed trial");
    let mut m = RunManifest::new("train", &cfg);
    m.config.tpe = tcfg.tpe.clone();
    m.input("dataset", &a.dataset).output("study", &a.study).output("conversion", &conv).output("eigenvalue", &eig);
    m.note("trials", state.trials.len()).note("best_trial", top.trial).note("best_loss", top.loss);
    m.write(&a.out_weights.join("manifest.json")).runtime()?;
    println!("best trial {} of {}: rte_loss {:.6}", top.trial, state.trials.len(), top.loss);
    Ok(())
}

fn features(a: &FeaturesArgs, cfg: Config) -> CmdResult {
    let (paths, scans) = read_scans(&a.scans)?;
    if scans.is_empty() {
        return Err(input_err(format!("no .bin scans in {}", a.scans.display())));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display())).runtime()?;
    let k = cfg.odometry.descriptor_k;
    let mut all = Vec::new();
    for (p, scan) in paths.iter().zip(&scans) {
        let raw = classical_descriptors(scan, k).with_context(|| format!("descriptors of {}", p.display())).input()?;
        let out = a.out.join(p.file_stem().expect("listed scans have names")).with_extension("glf");
        write_external_features(&raw, &out).with_context(|| format!("writing {}", out.display())).runtime()?;
        all.push(raw.subsample(cfg.odometry.pca_max_rows / scans.len() + 1));
    }
    let stacked = RawFeatures::vstack(&all).expect("uniform descriptor width");
    let pca = pca_fit_subsampled(&stacked, cfg.odometry.pca_max_rows).runtime()?;
    let pca_path = a.out.join("pca.txt");
    pca.save(&pca_path).runtime()?;
    let mut m = RunManifest::new("features", &cfg);
    m.input("scans", &a.scans).output("features", &a.out).output("pca", &pca_path);
    m.note("scans", scans.len()).note("explained_variance", pca.cumulative_ratio());
    m.write(&a.out.join("manifest.json")).runtime()?;
    println!("{} descriptor files, PCA explains {:.1}% of variance", scans.len(), 100.0 * pca.cumulative_ratio());
    Ok(())
}

fn export(a: &ExportArgs, mut cfg: Config) -> CmdResult {
    let weights = resolve_mode(&a.mode, &mut cfg)?;
    let scan = read_kitti_bin(&a.scan).with_context(|| format!("reading {}", a.scan.display())).input()?;
    if scan.is_empty() {
        return Err(input_err(format!("{} holds no points", a.scan.display())));
    }
    let pca = load_pca(a.pca.as_ref())?;
    let seq = prepare_sequence(std::slice::from_ref(&scan), None, pca, &cfg.odometry).runtime()?;
    let g = seq.frames[0].gaussian(&weights, &cfg.odometry.registration).runtime()?;
    export_ply(&g.cloud, Some(&g.covariances), &a.out).with_context(|| format!("writing {}", a.out.display())).runtime()?;
    let mut m = RunManifest::new("export", &cfg);
    m.input("scan", &a.scan).output("ply", &a.out);
    m.note("points", g.cloud.len()).note("degenerate", g.degenerate);
    m.write(&sidecar(&a.out, "manifest.json")).runtime()?;
    println!("{} points with covariances written to {}", g.cloud.len(), a.out.display());
    Ok(())
}

fn synth_cmd(a: &SynthArgs, cfg: Config) -> CmdResult {
    if a.frames < 1 || !(a.step > 0.0) || !(a.noise >= 0.0) {
        return Err(input_err("--frames must be ≥ 1, --step positive and --noise non-negative"));
    }
    let mut spec = match a.world {
        World::Corridor => synth::corridor(cfg.seed, a.frames, a.step),
        World::Street => synth::street(cfg.seed, a.frames, a.step),
        World::Blocks => synth::blocks(cfg.seed, a.frames, a.step),
    };
    spec.range_noise = a.noise;
    let (scans, gt) = synth::synth_world(&spec, cfg.seed);
    let dir = a.out.join("velodyne");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).runtime()?;
    for (i, s) in scans.iter().enumerate() {
        write_kitti_bin(s, dir.join(format!("{i:06}.bin"))).runtime()?;
    }
    let poses = a.out.join("poses.txt");
    write_kitti_poses(&gt, &poses).runtime()?;
    let mut m = RunManifest::new("synth", &cfg);
    m.output("scans", &dir).output("poses", &poses);
    m.note("world", format!("{:?}", a.world).to_lowercase())
        .note("frames", a.frames)
        .note("step", a.step)
        .note("noise", a.noise);
    m.write(&a.out.join("manifest.json")).runtime()?;
    println!("{} scans and poses written to {}", scans.len(), a.out.display());
    Ok(())
}
