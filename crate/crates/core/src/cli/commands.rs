//! Subcommand implementations; each returns the paths it wrote.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::armodel::train::{write_step_record, TRAIN_LOG_HEADER};
use crate::armodel::{Checkpoint, Model, Trainer};
use crate::error::{DapError, Result};
use crate::kinematics::EgoState;
use crate::pipeline::{
    attach_codebook, bc_windows, checkpoint_codebook, encode_episodes, fit_bev_codebook,
    model_config, rl_windows, train_bc, train_sacbc, ModelDriver, ModelPlanner,
};
use crate::rl::sacbc::write_rl_record;
use crate::rl::{SacBcTrainer, RL_LOG_HEADER};
use crate::seeding::sub_seed;
use crate::simworld::episode::{read_manifest, MANIFEST_FILE};
use crate::simworld::eval::{
    closed_loop_eval, open_loop_eval_refined, ClosedLoopConfig, ClosedLoopResult, DrivingPolicy,
    OpenLoopRow, CLOSED_LOOP_CSV_HEADER,
};
use crate::simworld::{
    episode_seed, expert_trace, generate_dataset, load_dataset, Episode, Manifest, Scene,
};
use crate::tokenize::bench::{recon_benchmark, write_bench_rows, BENCH_CSV_HEADER};
use crate::tokenize::Scheme;

use super::config::RunConfig;

pub const DATASET_DIR: &str = "dataset";
pub const HELDOUT_DIR: &str = "heldout";
pub const BC_CHECKPOINT: &str = "bc.ckpt";
pub const SACBC_CHECKPOINT: &str = "sacbc.ckpt";

/// Seed of the named random sub-stream of a run.
pub fn stream(cfg: &RunConfig, name: &str) -> u64 {
    sub_seed(cfg.seed, name)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| DapError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| DapError::io(path, e))
}

/// Writes a report whose first line records the config hash and seed.
fn write_report(
    path: &Path,
    cfg: &RunConfig,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "# config_hash={} seed={}", cfg.config_hash(), cfg.seed)
        .and_then(|_| body(&mut f))
        .and_then(|_| f.flush())
        .map_err(|e| DapError::io(path, e))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let grid = cfg.ka_grid()?;
    let hash = cfg.dataset_hash();
    let train = out.join(DATASET_DIR);
    generate_dataset(
        cfg.dataset.episodes,
        stream(cfg, "data"),
        &cfg.sim,
        &grid,
        &train,
        &hash,
    )?;
    let mut clean = cfg.sim.clone();
    clean.episode.perturb_prob = 0.0;
    let held = out.join(HELDOUT_DIR);
    generate_dataset(
        cfg.dataset.heldout,
        stream(cfg, "heldout"),
        &clean,
        &grid,
        &held,
        &hash,
    )?;
    Ok(vec![train, held])
}

/// Loads a dataset written by [`gen_data`] under the same data settings.
pub fn load_checked(cfg: &RunConfig, dir: &Path) -> Result<(Manifest, Vec<Episode>)> {
    let (m, eps) = load_dataset(dir)?;
    if m.config_hash != cfg.dataset_hash() {
        return Err(DapError::Validation(format!(
            "dataset at {} was generated with different data settings (manifest hash {}, config {})",
            dir.display(),
            m.config_hash,
            cfg.dataset_hash()
        )));
    }
    if eps.is_empty() {
        return Err(DapError::Size(format!(
            "dataset at {} has no episodes",
            dir.display()
        )));
    }
    Ok((m, eps))
}

/// Loads a checkpoint trained under the same lineage as `cfg`.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.header.config_hash != cfg.lineage_hash() {
        return Err(DapError::Validation(format!(
            "checkpoint {} does not match the configured data and model settings (hash {}, config {})",
            path.display(),
            ck.header.config_hash,
            cfg.lineage_hash()
        )));
    }
    Ok(ck)
}

pub fn cmd_train_bc(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<Vec<PathBuf>> {
    let grid = cfg.ka_grid()?;
    let (_, eps) = load_checked(cfg, &out.join(DATASET_DIR))?;
    let (cb, model, opt) = match resume {
        Some(p) => {
            let ck = load_checkpoint(cfg, p)?;
            let model = ck.model()?;
            let opt = ck.optimizer_for(&model);
            (checkpoint_codebook(&ck)?, model, opt)
        }
        None => {
            let cb = fit_bev_codebook(&eps, &cfg.data, stream(cfg, "codebook"))?;
            let m = cb_tokens_per_frame(cfg, &cb)?;
            let mc = model_config(&cfg.model, &cfg.data, m, &grid)?;
            (cb, Model::init(mc, stream(cfg, "init"))?, None)
        }
    };
    let bev = encode_episodes(&eps, &cb)?;
    let windows = bc_windows(&eps, &bev, &model.config, &cfg.data)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), stream(cfg, "sampling"))?;
    if let Some(o) = opt {
        trainer.opt = o;
    }
    let epoch0 = trainer.completed_epochs(windows.len());
    let mut log = Vec::new();
    train_bc(&mut trainer, &windows, epoch0, &mut log, |_, _| Ok(()))?;

    let ck_path = out.join(BC_CHECKPOINT);
    let mut ck = Checkpoint::from_model(
        &trainer.model,
        Some(&trainer.opt),
        cfg.seed,
        &cfg.lineage_hash(),
        "bc",
    );
    attach_codebook(&mut ck, &cb);
    ck.save(&ck_path)?;
    let log_path = out.join("bc_loss.csv");
    write_report(&log_path, cfg, |f| {
        writeln!(f, "{TRAIN_LOG_HEADER}")?;
        log.iter().try_for_each(|r| write_step_record(f, r))
    })?;
    Ok(vec![ck_path, log_path])
}

pub fn cb_tokens_per_frame(cfg: &RunConfig, cb: &crate::bevq::Codebook) -> Result<usize> {
    let b = &cfg.sim.bev;
    if !b.height.is_multiple_of(cb.patch_h) || !b.width.is_multiple_of(cb.patch_w) {
        return Err(DapError::Config(format!(
            "BEV grid {}x{} is not divisible into {}x{} patches",
            b.height, b.width, cb.patch_h, cb.patch_w
        )));
    }
    Ok((b.height / cb.patch_h) * (b.width / cb.patch_w))
}

pub fn cmd_train_sacbc(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<Vec<PathBuf>> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let cb = checkpoint_codebook(&ck)?;
    let model = ck.model()?;
    let (_, eps) = load_checked(cfg, &out.join(DATASET_DIR))?;
    let bev = encode_episodes(&eps, &cb)?;
    let windows = rl_windows(&eps, &bev, &model.config, &cfg.data, &cfg.sim.reward)?;
    let mut trainer = SacBcTrainer::new(model, cfg.sacbc.clone(), stream(cfg, "rl"))?;
    let mut log = Vec::new();
    train_sacbc(&mut trainer, &windows, &mut log)?;

    let ck_path = out.join(SACBC_CHECKPOINT);
    let mut out_ck = Checkpoint::from_model(
        &trainer.model,
        Some(&trainer.opt),
        cfg.seed,
        &cfg.lineage_hash(),
        "sacbc",
    );
    attach_codebook(&mut out_ck, &cb);
    for (i, q) in trainer.critics.q.iter().enumerate() {
        out_ck
            .extras
            .push((format!("critic_q{}", i + 1), q.params.data.clone()));
    }
    out_ck.save(&ck_path)?;
    let log_path = out.join("sacbc_log.csv");
    write_report(&log_path, cfg, |f| {
        writeln!(f, "{RL_LOG_HEADER}")?;
        log.iter().try_for_each(|r| write_rl_record(f, r))
    })?;
    Ok(vec![ck_path, log_path])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Open,
    Closed,
}

impl EvalMode {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(EvalMode::Open),
            "closed" => Ok(EvalMode::Closed),
            _ => Err(DapError::Usage(format!(
                "unknown evaluation mode '{s}' (expected open or closed)"
            ))),
        }
    }
}

/// Closed-loop evaluation scenes of a run.
pub fn eval_scenes(cfg: &RunConfig) -> Vec<Scene> {
    let root = stream(cfg, "eval");
    (0..cfg.eval.scenes)
        .map(|i| cfg.sim.scene(episode_seed(root, i)))
        .collect()
}

pub fn closed_loop_config(cfg: &RunConfig) -> ClosedLoopConfig {
    ClosedLoopConfig {
        warmup: cfg.eval.warmup,
        horizon: cfg.eval.horizon,
    }
}

/// Closed-loop results of `model`, raw and optionally post-tuned.
pub fn closed_loop_model(
    cfg: &RunConfig,
    model: &Model,
    cb: &crate::bevq::Codebook,
    scenes: &[Scene],
    posttune: bool,
) -> Result<(Vec<ClosedLoopResult>, Option<Vec<ClosedLoopResult>>)> {
    let grid = cfg.ka_grid()?;
    let (m, cb) = (Arc::new(model.clone()), Arc::new(cb.clone()));
    let cl = closed_loop_config(cfg);
    let run = |pt: Option<crate::pipeline::PostTuneDriving>| {
        let make = |_: &Scene| -> Result<Box<dyn DrivingPolicy + Send>> {
            Ok(Box::new(ModelDriver::new(
                m.clone(),
                cb.clone(),
                grid,
                pt.clone(),
            )))
        };
        closed_loop_eval(make, scenes, &cfg.sim, &grid, &cl).map(|(r, _)| r)
    };
    let raw = run(None)?;
    let refined = if posttune {
        Some(run(Some(cfg.eval.posttune.clone()))?)
    } else {
        None
    };
    Ok((raw, refined))
}

/// Open-loop rows of `model` on `episodes`, raw and optionally post-tuned.
pub fn open_loop_model(
    cfg: &RunConfig,
    model: &Model,
    cb: &crate::bevq::Codebook,
    episodes: &[Episode],
    posttune: bool,
) -> Result<(Vec<OpenLoopRow>, Option<Vec<OpenLoopRow>>)> {
    let grid = cfg.ka_grid()?;
    let planner = ModelPlanner {
        model,
        codebook: cb,
    };
    let pt = &cfg.eval.posttune;
    let refine = |ep: &Episode, _t0: usize, pred: &[EgoState]| pt.refine(&ep.scene, pred);
    open_loop_eval_refined(
        &planner,
        episodes,
        &cfg.eval.horizons_s,
        model.config.history,
        cfg.eval.open_loop_stride,
        &grid,
        posttune.then_some(&refine as _),
    )
}

fn closed_row(r: &ClosedLoopResult) -> String {
    format!(
        "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{:.4},{:.4}",
        r.nc,
        r.dac,
        r.ttc,
        r.c,
        r.ep,
        r.pdms,
        r.mean_reward,
        r.collisions,
        r.invalid_tokens,
        r.progress,
        r.expert_progress
    )
}

fn aggregate_row(rs: &[ClosedLoopResult]) -> String {
    let a = crate::simworld::eval::aggregate(rs);
    format!(
        "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},,",
        a.nc, a.dac, a.ttc, a.c, a.ep, a.pdms, a.mean_reward, a.collisions, a.invalid_tokens
    )
}

const PT_CLOSED_COLUMNS: &str =
    "pt_NC,pt_DAC,pt_TTC,pt_C,pt_EP,pt_PDMS_style,pt_mean_reward,pt_collisions,pt_invalid_tokens,pt_progress,pt_expert_progress";

pub fn cmd_eval(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    mode: EvalMode,
    posttune: bool,
) -> Result<Vec<PathBuf>> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let cb = checkpoint_codebook(&ck)?;
    let model = ck.model()?;
    let stage = &ck.header.stage;
    match mode {
        EvalMode::Open => {
            let (_, eps) = load_checked(cfg, &out.join(HELDOUT_DIR))?;
            let (raw, refined) = open_loop_model(cfg, &model, &cb, &eps, posttune)?;
            let path = out.join(format!("eval_open_{stage}.csv"));
            write_report(&path, cfg, |f| {
                let pt_head = if posttune {
                    ",pt_ADE,pt_FDE,pt_AHE"
                } else {
                    ""
                };
                writeln!(f, "horizon_s,ADE,FDE,AHE,samples{pt_head}")?;
                for (i, r) in raw.iter().enumerate() {
                    write!(
                        f,
                        "{},{:.6},{:.6},{:.6},{}",
                        r.horizon_s, r.ade, r.fde, r.ahe, r.samples
                    )?;
                    if let Some(p) = &refined {
                        write!(f, ",{:.6},{:.6},{:.6}", p[i].ade, p[i].fde, p[i].ahe)?;
                    }
                    writeln!(f)?;
                }
                Ok(())
            })?;
            Ok(vec![path])
        }
        EvalMode::Closed => {
            let scenes = eval_scenes(cfg);
            let (raw, refined) = closed_loop_model(cfg, &model, &cb, &scenes, posttune)?;
            let path = out.join(format!("eval_closed_{stage}.csv"));
            write_report(&path, cfg, |f| {
                match refined {
                    Some(_) => writeln!(f, "{CLOSED_LOOP_CSV_HEADER},{PT_CLOSED_COLUMNS}")?,
                    None => writeln!(f, "{CLOSED_LOOP_CSV_HEADER}")?,
                }
                for (i, r) in raw.iter().enumerate() {
                    write!(f, "{},{}", r.seed, closed_row(r))?;
                    if let Some(p) = &refined {
                        write!(f, ",{}", closed_row(&p[i]))?;
                    }
                    writeln!(f)?;
                }
                write!(f, "mean,{}", aggregate_row(&raw))?;
                if let Some(p) = &refined {
                    write!(f, ",{}", aggregate_row(p))?;
                }
                writeln!(f)
            })?;
            Ok(vec![path])
        }
    }
}

/// Benchmark windows of `horizon + 2` poses from continuous-action expert
/// rollouts of the dataset's scenes.
pub fn tok_bench_windows(
    cfg: &RunConfig,
    manifest: &Manifest,
    horizon: usize,
) -> Result<Vec<Vec<EgoState>>> {
    use rayon::prelude::*;
    let grid = cfg.ka_grid()?;
    let mut sim = manifest.sim.clone();
    sim.expert.snap = false;
    let frames = sim.episode.frames;
    let per_scene: Vec<Vec<Vec<EgoState>>> = manifest
        .episodes
        .par_iter()
        .map(|e| {
            let scene = sim.scene(e.seed);
            let (poses, _) = expert_trace(&scene, &sim, &grid, frames)?;
            let n = horizon + 2;
            Ok(if poses.len() < n {
                Vec::new()
            } else {
                (0..=poses.len() - n)
                    .step_by(cfg.tok_bench.window_stride)
                    .map(|s| poses[s..s + n].to_vec())
                    .collect()
            })
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

pub fn cmd_tok_bench(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let schemes = cfg
        .tok_bench
        .schemes
        .iter()
        .map(|n| Scheme::from_name(n))
        .collect::<Result<Vec<_>>>()?;
    let manifest = read_manifest(&out.join(DATASET_DIR).join(MANIFEST_FILE))?;
    let dt = manifest.sim.episode.dt;
    let max_h = cfg
        .tok_bench
        .horizons_s
        .iter()
        .map(|h| (h / dt).round() as usize)
        .max()
        .unwrap_or(0);
    let windows = tok_bench_windows(cfg, &manifest, max_h)?;
    let reports = schemes
        .iter()
        .map(|(s, label)| {
            recon_benchmark(
                &windows,
                s.codec().as_ref(),
                label,
                &cfg.tok_bench.horizons_s,
                dt,
                &cfg.tok_bench.ci_levels,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out.join("tok_bench.csv");
    write_report(&path, cfg, |f| {
        writeln!(f, "{BENCH_CSV_HEADER}")?;
        reports.iter().try_for_each(|r| write_bench_rows(f, r))
    })?;
    Ok(vec![path])
}

/// Reads `x,y,yaw` rows after an optional header line.
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<EgoState>> {
    let file = File::open(path).map_err(|e| DapError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DapError::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || (i == 0 && t.starts_with('x')) {
            continue;
        }
        let v: Vec<f64> = t
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| DapError::format(path, format!("line {}: {e}", i + 1)))?;
        if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(DapError::format(
                path,
                format!("line {}: expected three finite values x,y,yaw", i + 1),
            ));
        }
        out.push(EgoState::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

/// Post-tunes a trajectory file against the lane of scene `scene_seed`.
pub fn cmd_posttune(
    cfg: &RunConfig,
    out: &Path,
    input: &Path,
    scene_seed: u64,
) -> Result<Vec<PathBuf>> {
    let traj = read_trajectory_csv(input)?;
    let scene = cfg.sim.scene(scene_seed);
    let refined = cfg.eval.posttune.refine(&scene, &traj)?;
    let path = out.join("posttuned.csv");
    write_report(&path, cfg, |f| {
        writeln!(f, "x,y,yaw,x_pt,y_pt,yaw_pt")?;
        for (a, b) in traj.iter().zip(&refined) {
            writeln!(
                f,
                "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                a.x, a.y, a.yaw, b.x, b.y, b.yaw
            )?;
        }
        Ok(())
    })?;
    Ok(vec![path])
}
