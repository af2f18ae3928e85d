//! Uniform scalar grids and the fixed-bin trajectory configurations.

use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};

/// `[lo; step; hi]` grid with `bins = (hi - lo) / step` (no `+1`) and
/// bin-center reconstruction. Inputs outside `[lo, hi]` saturate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct UniformGrid {
    lo: f64,
    step: f64,
    hi: f64,
    bins: usize,
}

/// Serialized form of a [`UniformGrid`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub step: f64,
    pub hi: f64,
}

impl TryFrom<GridSpec> for UniformGrid {
    type Error = DapError;
    fn try_from(s: GridSpec) -> Result<Self> {
        UniformGrid::new(s.lo, s.step, s.hi)
    }
}

impl From<UniformGrid> for GridSpec {
    fn from(g: UniformGrid) -> Self {
        GridSpec {
            lo: g.lo,
            step: g.step,
            hi: g.hi,
        }
    }
}

impl UniformGrid {
    pub fn new(lo: f64, step: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && step.is_finite()) || hi <= lo || step <= 0.0 {
            return Err(DapError::Config(format!(
                "invalid grid [{lo}; {step}; {hi}]"
            )));
        }
        let ratio = (hi - lo) / step;
        let bins = ratio.round();
        if (ratio - bins).abs() > 1e-9 || bins < 1.0 {
            return Err(DapError::Config(format!(
                "grid range {} is not a whole number of {step} steps",
                hi - lo
            )));
        }
        Ok(UniformGrid {
            lo,
            step,
            hi,
            bins: bins as usize,
        })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }
    pub fn hi(&self) -> f64 {
        self.hi
    }
    pub fn step(&self) -> f64 {
        self.step
    }
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn quantize(&self, x: f64) -> usize {
        self.quantize_checked(x).0
    }

    /// Bin index plus a flag set when `x` fell outside `[lo, hi]`.
    pub fn quantize_checked(&self, x: f64) -> (usize, bool) {
        let saturated = !(x >= self.lo && x <= self.hi);
        let raw = ((x - self.lo) / self.step).floor();
        let idx = if raw.is_nan() || raw < 0.0 {
            0
        } else {
            (raw as usize).min(self.bins - 1)
        };
        (idx, saturated)
    }

    pub fn dequantize(&self, index: usize) -> f64 {
        self.lo + (index as f64 + 0.5) * self.step
    }
}

/// Fixed-bin curvature–acceleration quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KaGridConfig {
    pub kappa: UniformGrid,
    pub accel: UniformGrid,
}

/// Packed trajectory token `i_kappa · A + i_a`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrajTokenId(pub u32);

impl TrajTokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Packs curvature and acceleration bin indices into one token.
pub fn pack_token(
    i_kappa: usize,
    i_a: usize,
    n_kappa: usize,
    n_accel: usize,
) -> Result<TrajTokenId> {
    if i_kappa >= n_kappa || i_a >= n_accel {
        return Err(DapError::Domain(format!(
            "bin pair ({i_kappa}, {i_a}) outside {n_kappa}x{n_accel}"
        )));
    }
    Ok(TrajTokenId((i_kappa * n_accel + i_a) as u32))
}

/// Inverse of [`pack_token`].
pub fn unpack_token(token: TrajTokenId, n_kappa: usize, n_accel: usize) -> Result<(usize, usize)> {
    let v = token.index();
    if v >= n_kappa * n_accel {
        return Err(DapError::Domain(format!(
            "token {v} outside vocabulary of {}",
            n_kappa * n_accel
        )));
    }
    Ok((v / n_accel, v % n_accel))
}

fn grid(lo: f64, step: f64, hi: f64) -> UniformGrid {
    UniformGrid::new(lo, step, hi).expect("preset grid")
}

impl KaGridConfig {
    pub fn codebook_size(&self) -> usize {
        self.kappa.bins() * self.accel.bins()
    }

    pub fn pack(&self, i_kappa: usize, i_a: usize) -> Result<TrajTokenId> {
        pack_token(i_kappa, i_a, self.kappa.bins(), self.accel.bins())
    }

    pub fn unpack(&self, token: TrajTokenId) -> Result<(usize, usize)> {
        unpack_token(token, self.kappa.bins(), self.accel.bins())
    }

    /// Narrow + coarse: κ[−0.22; 0.01; 0.22], a[−1.3; 0.1; 1.3] → 44 × 26.
    pub fn fb_ka_a() -> Self {
        KaGridConfig {
            kappa: grid(-0.22, 0.01, 0.22),
            accel: grid(-1.3, 0.1, 1.3),
        }
    }
    /// Wide + coarse.
    pub fn fb_ka_b() -> Self {
        KaGridConfig {
            kappa: grid(-0.48, 0.01, 0.48),
            accel: grid(-1.9, 0.1, 1.9),
        }
    }
    /// Narrow + fine.
    pub fn fb_ka_c() -> Self {
        KaGridConfig {
            kappa: grid(-0.22, 0.005, 0.22),
            accel: grid(-1.3, 0.05, 1.3),
        }
    }
    /// Wide + fine.
    pub fn fb_ka_d() -> Self {
        KaGridConfig {
            kappa: grid(-0.48, 0.005, 0.48),
            accel: grid(-1.9, 0.05, 1.9),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "A" | "a" => Some(Self::fb_ka_a()),
            "B" | "b" => Some(Self::fb_ka_b()),
            "C" | "c" => Some(Self::fb_ka_c()),
            "D" | "d" => Some(Self::fb_ka_d()),
            _ => None,
        }
    }
}

impl Default for KaGridConfig {
    fn default() -> Self {
        Self::fb_ka_a()
    }
}

/// Fixed-bin quantizer over waypoint position and heading in the start frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XyGridConfig {
    pub x: UniformGrid,
    pub y: UniformGrid,
    pub yaw: UniformGrid,
}

impl XyGridConfig {
    pub fn codebook_size(&self) -> usize {
        self.x.bins() * self.y.bins() * self.yaw.bins()
    }

    fn square(range: f64, step: f64, yaw_range: f64, yaw_step: f64) -> Self {
        XyGridConfig {
            x: grid(-range, step, range),
            y: grid(-range, step, range),
            yaw: grid(-yaw_range, yaw_step, yaw_range),
        }
    }

    pub fn fb_xy_a() -> Self {
        Self::square(16.0, 0.5, 0.11, 0.02)
    }
    pub fn fb_xy_b() -> Self {
        Self::square(22.0, 0.5, 0.36, 0.02)
    }
    pub fn fb_xy_c() -> Self {
        Self::square(16.0, 0.25, 0.11, 0.01)
    }
    pub fn fb_xy_d() -> Self {
        Self::square(22.0, 0.25, 0.36, 0.01)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "A" | "a" => Some(Self::fb_xy_a()),
            "B" | "b" => Some(Self::fb_xy_b()),
            "C" | "c" => Some(Self::fb_xy_c()),
            "D" | "d" => Some(Self::fb_xy_d()),
            _ => None,
        }
    }
}
