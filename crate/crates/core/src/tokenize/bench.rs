//! Reconstruction-error benchmarking for trajectory codecs.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{DapError, Result};
use crate::kinematics::{wrap_angle_unchecked, EgoState};

use super::codec::TrajCodec;

/// Empirical two-sided interval at one coverage level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub level: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug)]
pub struct HorizonMetrics {
    pub horizon_s: f64,
    pub ade: f64,
    pub fde: f64,
    pub ahe: f64,
    /// Intervals of the per-window ADE.
    pub ade_ci: Vec<Interval>,
}

/// Intervals of signed per-waypoint errors, one entry per variable.
#[derive(Clone, Debug)]
pub struct VariableIntervals {
    pub name: &'static str,
    pub intervals: Vec<Interval>,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub family: String,
    pub config: String,
    pub codebook_size: usize,
    pub horizons: Vec<HorizonMetrics>,
    pub variables: Vec<VariableIntervals>,
    pub saturated: usize,
    pub windows: usize,
}

/// Linear-interpolated empirical quantile of sorted data, `p ∈ [0, 1]`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    let f = pos - i as f64;
    sorted[i] * (1.0 - f) + sorted[j] * f
}

pub fn empirical_interval(values: &[f64], level: f64) -> Interval {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let tail = (1.0 - level) / 2.0;
    Interval {
        level,
        lo: quantile_sorted(&v, tail),
        hi: quantile_sorted(&v, 1.0 - tail),
    }
}

struct WindowErrors {
    disp: Vec<f64>,
    heading: Vec<f64>,
    signed: [Vec<f64>; 3],
    saturated: usize,
}

/// Reconstructs every window and measures ADE/FDE/AHE at each horizon.
///
/// `horizons_s` are converted to step counts with `dt`; windows need
/// `max_horizon + 2` poses.
pub fn recon_benchmark(
    windows: &[Vec<EgoState>],
    codec: &dyn TrajCodec,
    config_label: &str,
    horizons_s: &[f64],
    dt: f64,
    ci_levels: &[f64],
) -> Result<BenchReport> {
    if windows.is_empty() {
        return Err(DapError::Size("benchmark dataset is empty".into()));
    }
    if horizons_s.is_empty() {
        return Err(DapError::Size("no horizons requested".into()));
    }
    let steps: Vec<usize> = horizons_s
        .iter()
        .map(|h| (h / dt).round() as usize)
        .collect();
    if steps.contains(&0) {
        return Err(DapError::Domain("horizon shorter than one step".into()));
    }
    let max_steps = *steps.iter().max().unwrap();

    // Order-preserving collect keeps the reduction below deterministic.
    let per_window: Vec<WindowErrors> = windows
        .par_iter()
        .map(|w| {
            let rec = codec.reconstruct(w, max_steps, dt)?;
            let origin = w[0];
            let mut e = WindowErrors {
                disp: Vec::with_capacity(max_steps),
                heading: Vec::with_capacity(max_steps),
                signed: [Vec::new(), Vec::new(), Vec::new()],
                saturated: rec.saturated,
            };
            for (p, q) in rec.poses.iter().zip(&w[1..=max_steps]) {
                e.disp.push(p.distance(q));
                e.heading.push(wrap_angle_unchecked(p.yaw - q.yaw).abs());
                let lp = origin.to_local(p);
                let lq = origin.to_local(q);
                e.signed[0].push(lp.x - lq.x);
                e.signed[1].push(lp.y - lq.y);
                e.signed[2].push(wrap_angle_unchecked(lp.yaw - lq.yaw));
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_window.len() as f64;
    let horizons = steps
        .iter()
        .zip(horizons_s)
        .map(|(&h, &hs)| {
            let ades: Vec<f64> = per_window
                .iter()
                .map(|e| e.disp[..h].iter().sum::<f64>() / h as f64)
                .collect();
            let fde = per_window.iter().map(|e| e.disp[h - 1]).sum::<f64>() / n;
            let ahe = per_window
                .iter()
                .map(|e| e.heading[..h].iter().sum::<f64>() / h as f64)
                .sum::<f64>()
                / n;
            HorizonMetrics {
                horizon_s: hs,
                ade: ades.iter().sum::<f64>() / n,
                fde,
                ahe,
                ade_ci: ci_levels
                    .iter()
                    .map(|&l| empirical_interval(&ades, l))
                    .collect(),
            }
        })
        .collect();

    let names = ["x", "y", "yaw"];
    let variables = (0..3)
        .map(|k| {
            let all: Vec<f64> = per_window
                .iter()
                .flat_map(|e| e.signed[k].iter().copied())
                .collect();
            VariableIntervals {
                name: names[k],
                intervals: ci_levels
                    .iter()
                    .map(|&l| empirical_interval(&all, l))
                    .collect(),
            }
        })
        .collect();

    Ok(BenchReport {
        family: codec.family().to_string(),
        config: config_label.to_string(),
        codebook_size: codec.codebook_size(),
        horizons,
        variables,
        saturated: per_window.iter().map(|e| e.saturated).sum(),
        windows: per_window.len(),
    })
}

pub const BENCH_CSV_HEADER: &str =
    "scheme,config,codebook_size,horizon_s,ade_m,fde_m,ahe_rad,ci_level,ci_lo,ci_hi";

/// One CSV row per (horizon, CI level).
pub fn write_bench_rows<W: Write>(out: &mut W, report: &BenchReport) -> std::io::Result<()> {
    for h in &report.horizons {
        for ci in &h.ade_ci {
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6}",
                report.family,
                report.config,
                report.codebook_size,
                h.horizon_s,
                h.ade,
                h.fde,
                h.ahe,
                ci.level,
                ci.lo,
                ci.hi
            )?;
        }
    }
    Ok(())
}
