//! C ABI over the planner core.
//!
//! Every function returns a [`DapStatus`]. On failure the message is kept
//! per thread and read with [`dap_last_error_message`]. Handles are opaque
//! and owned by the caller until passed to the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dap_core::armodel::{next_traj_logits, Checkpoint, FrameTokens, Model, TokenSequence};
use dap_core::kinematics::{states_to_ka, EgoState, KaPoint};
use dap_core::tokenize::{
    ka_detokenize, ka_points_to_tokens, token_to_ka, KaGridConfig, TrajTokenId,
};
use dap_core::DapError;

/// Result of every exported call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DapStatus {
    Ok = 0,
    NullPointer = 1,
    /// Unknown name or malformed argument.
    Usage = 2,
    /// Input rejected by domain, size, sequence or format checks.
    Invalid = 3,
    Io = 4,
    Internal = 5,
    /// Output buffer too small; nothing was written.
    BufferTooSmall = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// Planar pose: meters and radians.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DapPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl From<DapPose> for EgoState {
    fn from(p: DapPose) -> Self {
        EgoState::new(p.x, p.y, p.yaw)
    }
}

impl From<EgoState> for DapPose {
    fn from(s: EgoState) -> Self {
        DapPose {
            x: s.x,
            y: s.y,
            yaw: s.yaw,
        }
    }
}

/// Curvature–acceleration grid.
pub struct DapTokenizer {
    grid: KaGridConfig,
}

/// Trained sequence model for next-action queries.
pub struct DapPlanner {
    model: Model,
    grid: KaGridConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Failure {
    Null(&'static str),
    BufferTooSmall { need: usize, cap: usize },
    Core(DapError),
}

impl From<DapError> for Failure {
    fn from(e: DapError) -> Self {
        Failure::Core(e)
    }
}

fn status_of(e: &DapError) -> DapStatus {
    match e {
        DapError::Usage(_) | DapError::Config(_) => DapStatus::Usage,
        DapError::Io { .. } => DapStatus::Io,
        DapError::Training(_) | DapError::Internal(_) => DapStatus::Internal,
        _ => DapStatus::Invalid,
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DapStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            DapStatus::NullPointer
        }
        Ok(Err(Failure::BufferTooSmall { need, cap })) => {
            set_error(format!("output buffer holds {cap} entries, {need} needed"));
            DapStatus::BufferTooSmall
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("panic inside dap".into());
            DapStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

/// Slice view; a null pointer is accepted only for `n == 0`.
unsafe fn slice<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_slice<'a, T>(
    p: *mut T,
    cap: usize,
    need: usize,
    what: &'static str,
) -> Result<&'a mut [T], Failure> {
    if cap < need {
        return Err(Failure::BufferTooSmall { need, cap });
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| DapError::Usage(format!("{what} is not UTF-8")).into())
}

fn grid_by_name(name: &str) -> Result<KaGridConfig, DapError> {
    name.strip_prefix("FB-ka-")
        .and_then(KaGridConfig::preset)
        .ok_or_else(|| DapError::Usage(format!("unknown curvature-acceleration grid {name:?}")))
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `cap` bytes. Returns the untruncated length plus one.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dap_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Creates a tokenizer for grid `FB-ka-A` … `FB-ka-D`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dap_tokenizer_new(
    name: *const c_char,
    out: *mut *mut DapTokenizer,
) -> DapStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let grid = grid_by_name(c_str(name, "name")?)?;
        *out = Box::into_raw(Box::new(DapTokenizer { grid }));
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle from [`dap_tokenizer_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dap_tokenizer_free(t: *mut DapTokenizer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// # Safety
/// `t` must be a live tokenizer; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dap_tokenizer_codebook_size(
    t: *const DapTokenizer,
    out: *mut usize,
) -> DapStatus {
    guard(|| {
        *out_ref(out, "out")? = non_null(t, "tokenizer")?.grid.codebook_size();
        Ok(())
    })
}

/// Quantizes one (κ, a) pair. `saturated` counts clamped components (0–2).
///
/// # Safety
/// `t` must be a live tokenizer; `token` must be writable; `saturated` may be null.
#[no_mangle]
pub unsafe extern "C" fn dap_tokenizer_encode(
    t: *const DapTokenizer,
    kappa: f64,
    accel: f64,
    token: *mut u32,
    saturated: *mut u32,
) -> DapStatus {
    guard(|| {
        let t = non_null(t, "tokenizer")?;
        let token = out_ref(token, "token")?;
        if !kappa.is_finite() || !accel.is_finite() {
            return Err(
                DapError::Domain("curvature and acceleration must be finite".into()).into(),
            );
        }
        let (tok, sat) = ka_points_to_tokens(&[KaPoint::new(kappa, accel)], &t.grid)?;
        *token = tok[0].0;
        if let Some(s) = saturated.as_mut() {
            *s = sat as u32;
        }
        Ok(())
    })
}

/// Bin-center (κ, a) of a token.
///
/// # Safety
/// `t` must be a live tokenizer; `kappa` and `accel` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dap_tokenizer_decode(
    t: *const DapTokenizer,
    token: u32,
    kappa: *mut f64,
    accel: *mut f64,
) -> DapStatus {
    guard(|| {
        let t = non_null(t, "tokenizer")?;
        let (k, a) = (out_ref(kappa, "kappa")?, out_ref(accel, "accel")?);
        let p = token_to_ka(TrajTokenId(token), &t.grid)?;
        *k = p.kappa;
        *a = p.a;
        Ok(())
    })
}

/// Tokenizes `n_poses` poses sampled every `dt` seconds into `n_poses − 2`
/// tokens.
///
/// # Safety
/// `poses` must hold `n_poses` entries; `tokens` must hold `cap` entries;
/// `saturated` may be null.
#[no_mangle]
pub unsafe extern "C" fn dap_tokenizer_tokenize(
    t: *const DapTokenizer,
    poses: *const DapPose,
    n_poses: usize,
    dt: f64,
    tokens: *mut u32,
    cap: usize,
    saturated: *mut usize,
) -> DapStatus {
    guard(|| {
        let t = non_null(t, "tokenizer")?;
        let states: Vec<EgoState> = slice(poses, n_poses, "poses")?
            .iter()
            .map(|&p| p.into())
            .collect();
        let ka = states_to_ka(&states, dt, dap_core::kinematics::DEFAULT_EPS)?;
        let out = out_slice(tokens, cap, ka.len(), "tokens")?;
        let (toks, sat) = ka_points_to_tokens(&ka, &t.grid)?;
        for (o, tok) in out.iter_mut().zip(&toks) {
            *o = tok.0;
        }
        if let Some(s) = saturated.as_mut() {
            *s = sat;
        }
        Ok(())
    })
}

/// Integrates `n_tokens` bin centers from `start` at speed `v0`, writing
/// `n_tokens + 1` poses including `start`.
///
/// # Safety
/// `tokens` must hold `n_tokens` entries; `poses` must hold `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn dap_tokenizer_detokenize(
    t: *const DapTokenizer,
    tokens: *const u32,
    n_tokens: usize,
    start: DapPose,
    v0: f64,
    dt: f64,
    poses: *mut DapPose,
    cap: usize,
) -> DapStatus {
    guard(|| {
        let t = non_null(t, "tokenizer")?;
        let toks: Vec<TrajTokenId> = slice(tokens, n_tokens, "tokens")?
            .iter()
            .map(|&v| TrajTokenId(v))
            .collect();
        let out = out_slice(poses, cap, n_tokens + 1, "poses")?;
        let states = ka_detokenize(&toks, start.into(), v0, dt, &t.grid)?;
        for (o, s) in out.iter_mut().zip(states) {
            *o = s.into();
        }
        Ok(())
    })
}

/// Loads a checkpoint that embeds its trajectory grid size. The grid preset
/// is recovered from the trajectory vocabulary size.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dap_planner_load(
    path: *const c_char,
    out: *mut *mut DapPlanner,
) -> DapStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let ck = Checkpoint::load(Path::new(c_str(path, "path")?))?;
        let model = ck.model()?;
        let n_traj = model.config.vocab.n_traj;
        let grid = ["A", "B", "C", "D"]
            .iter()
            .filter_map(|p| KaGridConfig::preset(p))
            .find(|g| g.codebook_size() == n_traj)
            .ok_or_else(|| {
                DapError::Validation(format!("no grid preset has {n_traj} trajectory tokens"))
            })?;
        *out = Box::into_raw(Box::new(DapPlanner { model, grid }));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from [`dap_planner_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dap_planner_free(p: *mut DapPlanner) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// BEV tokens per frame and the longest context, in frames, the model accepts.
///
/// # Safety
/// `p` must be a live planner; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dap_planner_shape(
    p: *const DapPlanner,
    bev_per_frame: *mut usize,
    max_frames: *mut usize,
) -> DapStatus {
    guard(|| {
        let c = &non_null(p, "planner")?.model.config;
        *out_ref(bev_per_frame, "bev_per_frame")? = c.bev_tokens_per_frame;
        *out_ref(max_frames, "max_frames")? = c.max_frames();
        Ok(())
    })
}

/// Greedy next action for a context of `n_frames` frames. `bev` holds
/// `n_frames × bev_per_frame` codebook indices, `actions` the `n_frames − 1`
/// tokens taken between them. Frames beyond the model's context are dropped
/// from the front. Writes the local trajectory token and its bin center.
///
/// # Safety
/// Input arrays must have the stated lengths; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dap_planner_next_action(
    p: *const DapPlanner,
    command: u32,
    bev: *const u32,
    actions: *const u32,
    n_frames: usize,
    token: *mut u32,
    kappa: *mut f64,
    accel: *mut f64,
) -> DapStatus {
    guard(|| {
        let p = non_null(p, "planner")?;
        let (tok_out, k_out, a_out) = (
            out_ref(token, "token")?,
            out_ref(kappa, "kappa")?,
            out_ref(accel, "accel")?,
        );
        if n_frames == 0 {
            return Err(DapError::Sequence("context needs at least one frame".into()).into());
        }
        let c = &p.model.config;
        let m = c.bev_tokens_per_frame;
        let bev = slice(bev, n_frames * m, "bev")?;
        let actions = slice(actions, n_frames - 1, "actions")?;
        let first = n_frames.saturating_sub(c.max_frames());
        let frames: Vec<FrameTokens> = (first..n_frames)
            .map(|f| FrameTokens {
                bev: bev[f * m..(f + 1) * m].to_vec(),
                traj: (f + 1 < n_frames).then(|| TrajTokenId(actions[f])),
            })
            .collect();
        let seq = TokenSequence::build(command as usize, &frames, &c.vocab, m)?;
        let logits = next_traj_logits(&p.model, &seq)?;
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > logits[b] { i } else { b });
        let ka = token_to_ka(TrajTokenId(best as u32), &p.grid)?;
        *tok_out = best as u32;
        *k_out = ka.kappa;
        *a_out = ka.a;
        Ok(())
    })
}
