//! Discrete BEV tokens: one-hot patch vectors, a k-means codebook and
//! nearest-neighbor encoding (`k* = argmin_k ‖z − e_k‖²`, ties to the
//! lowest index).

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DapError, Result};

/// Semantic classes rasterized into BEV grids.
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const DRIVABLE: u8 = 1;
    pub const LANE_CENTER: u8 = 2;
    pub const OBSTACLE: u8 = 3;
    pub const EGO: u8 = 4;
    pub const COUNT: usize = 5;
}

/// Row-major semantic class raster. Row 0 is the far-forward edge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BevGrid {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub cells: Vec<u8>,
}

impl BevGrid {
    pub fn filled(height: usize, width: usize, n_classes: usize, value: u8) -> Self {
        BevGrid {
            height,
            width,
            n_classes,
            cells: vec![value; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.cells[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.cells[r * self.width + c] = v;
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.height * self.width {
            return Err(DapError::Size(
                "BEV cell count does not match dimensions".into(),
            ));
        }
        if let Some(bad) = self.cells.iter().find(|&&c| c as usize >= self.n_classes) {
            return Err(DapError::Domain(format!("BEV class {bad} out of range")));
        }
        Ok(())
    }

    /// Run-length encoding `class:count,class:count,…`.
    pub fn to_rle(&self) -> String {
        let mut out = String::new();
        let mut i = 0;
        while i < self.cells.len() {
            let v = self.cells[i];
            let mut j = i;
            while j < self.cells.len() && self.cells[j] == v {
                j += 1;
            }
            if !out.is_empty() {
                out.push(',');
            }
            out.push_str(&format!("{}:{}", v, j - i));
            i = j;
        }
        out
    }

    pub fn from_rle(height: usize, width: usize, n_classes: usize, rle: &str) -> Result<Self> {
        let mut cells = Vec::with_capacity(height * width);
        if !rle.is_empty() {
            for run in rle.split(',') {
                let (v, n) = run
                    .split_once(':')
                    .ok_or_else(|| DapError::Domain(format!("bad RLE run '{run}'")))?;
                let v: u8 = v
                    .parse()
                    .map_err(|_| DapError::Domain(format!("bad RLE class '{v}'")))?;
                let n: usize = n
                    .parse()
                    .map_err(|_| DapError::Domain(format!("bad RLE count '{n}'")))?;
                cells.extend(std::iter::repeat_n(v, n));
            }
        }
        let g = BevGrid {
            height,
            width,
            n_classes,
            cells,
        };
        g.validate()?;
        Ok(g)
    }
}

/// Codebook indices over the latent patch grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BevTokenGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub n_classes: usize,
    /// Row-major `k × dim`.
    pub entries: Vec<f64>,
}

impl Codebook {
    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the nearest entry; ties break to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.k {
            let d = sq_dist(z, self.entry(k));
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_patch_dims(grid: &BevGrid, ph: usize, pw: usize) -> Result<()> {
    if ph == 0 || pw == 0 || !grid.height.is_multiple_of(ph) || !grid.width.is_multiple_of(pw) {
        return Err(DapError::Size(format!(
            "{}x{} grid is not divisible into {ph}x{pw} patches",
            grid.height, grid.width
        )));
    }
    Ok(())
}

/// One-hot flattened patch vectors in row-major patch order.
pub fn patchify(grid: &BevGrid, ph: usize, pw: usize) -> Result<Vec<Vec<f64>>> {
    check_patch_dims(grid, ph, pw)?;
    grid.validate()?;
    let (h, w) = (grid.height / ph, grid.width / pw);
    let nc = grid.n_classes;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let mut z = vec![0.0; ph * pw * nc];
            for r in 0..ph {
                for c in 0..pw {
                    let cls = grid.get(i * ph + r, j * pw + c) as usize;
                    z[(r * pw + c) * nc + cls] = 1.0;
                }
            }
            out.push(z);
        }
    }
    Ok(out)
}

/// Rebuilds a grid by per-cell argmax over each patch vector's class block.
pub fn unpatchify(
    vectors: &[Vec<f64>],
    height: usize,
    width: usize,
    ph: usize,
    pw: usize,
    n_classes: usize,
) -> Result<BevGrid> {
    let mut g = BevGrid::filled(height, width, n_classes, 0);
    check_patch_dims(&g, ph, pw)?;
    let w = width / pw;
    if vectors.len() != (height / ph) * w {
        return Err(DapError::Size("patch count does not match grid".into()));
    }
    for (p, z) in vectors.iter().enumerate() {
        if z.len() != ph * pw * n_classes {
            return Err(DapError::Size("patch vector has wrong dimension".into()));
        }
        let (i, j) = (p / w, p % w);
        for r in 0..ph {
            for c in 0..pw {
                let block = &z[(r * pw + c) * n_classes..(r * pw + c + 1) * n_classes];
                let mut best = 0;
                for (k, v) in block.iter().enumerate() {
                    if *v > block[best] {
                        best = k;
                    }
                }
                g.set(i * ph + r, j * pw + c, best as u8);
            }
        }
    }
    Ok(g)
}

/// Options for [`fit_codebook`].
#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Independent k-means++ restarts; the lowest-inertia run wins.
    pub restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 30,
            restarts: 2,
        }
    }
}

/// Sum of squared distances from each vector to its nearest entry.
pub fn inertia(vectors: &[Vec<f64>], entries: &[Vec<f64>]) -> f64 {
    vectors
        .iter()
        .map(|z| {
            entries
                .iter()
                .map(|e| sq_dist(z, e))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn kmeans_run(
    vectors: &[Vec<f64>],
    k: usize,
    rng: &mut ChaCha8Rng,
    max_iters: usize,
) -> Vec<Vec<f64>> {
    let n = vectors.len();
    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = vec![vectors[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = vectors.iter().map(|z| sq_dist(z, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.push(vectors[pick].clone());
        let c = centers.last().unwrap();
        for (d, z) in d2.iter_mut().zip(vectors) {
            *d = d.min(sq_dist(z, c));
        }
    }

    let dim = vectors[0].len();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, z) in vectors.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, e) in centers.iter().enumerate() {
                let d = sq_dist(z, e);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            dists[i] = best_d;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (z, &a) in vectors.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(z) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an empty cluster at the worst-served point.
                let (far, _) =
                    dists
                        .iter()
                        .enumerate()
                        .fold(
                            (0, f64::NEG_INFINITY),
                            |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc },
                        );
                centers[c] = vectors[far].clone();
                dists[far] = 0.0;
                assign[far] = c;
                changed = true;
            } else {
                let inv = 1.0 / counts[c] as f64;
                centers[c] = sums[c].iter().map(|s| s * inv).collect();
            }
        }
        if !changed {
            break;
        }
    }
    centers
}

/// Deterministic k-means codebook over patch vectors.
pub fn fit_codebook(
    vectors: &[Vec<f64>],
    k: usize,
    seed: u64,
    patch_h: usize,
    patch_w: usize,
    n_classes: usize,
    opts: FitOptions,
) -> Result<Codebook> {
    if k == 0 {
        return Err(DapError::Config("codebook size must be at least 1".into()));
    }
    if k > vectors.len() {
        return Err(DapError::Config(format!(
            "codebook size {k} exceeds {} training vectors",
            vectors.len()
        )));
    }
    let dim = patch_h * patch_w * n_classes;
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(DapError::Config(format!(
            "training vectors must have dimension {dim}"
        )));
    }
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for r in 0..opts.restarts.max(1) {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(r as u64 + 1)));
        let centers = kmeans_run(vectors, k, &mut rng, opts.max_iters);
        let j = inertia(vectors, &centers);
        if best.as_ref().is_none_or(|(b, _)| j < *b) {
            best = Some((j, centers));
        }
    }
    let (_, centers) = best.unwrap();
    Ok(Codebook {
        k,
        dim,
        patch_h,
        patch_w,
        n_classes,
        entries: centers.into_iter().flatten().collect(),
    })
}

fn check_codebook(grid: &BevGrid, cb: &Codebook) -> Result<()> {
    if cb.n_classes != grid.n_classes || cb.dim != cb.patch_h * cb.patch_w * cb.n_classes {
        return Err(DapError::Config(format!(
            "codebook ({} classes, dim {}) does not match grid with {} classes",
            cb.n_classes, cb.dim, grid.n_classes
        )));
    }
    Ok(())
}

pub fn encode(grid: &BevGrid, cb: &Codebook) -> Result<BevTokenGrid> {
    check_codebook(grid, cb)?;
    let vectors = patchify(grid, cb.patch_h, cb.patch_w)?;
    Ok(BevTokenGrid {
        h: grid.height / cb.patch_h,
        w: grid.width / cb.patch_w,
        tokens: vectors.iter().map(|z| cb.nearest(z) as u32).collect(),
    })
}

pub fn decode(tokens: &BevTokenGrid, cb: &Codebook) -> Result<BevGrid> {
    if let Some(bad) = tokens.tokens.iter().find(|&&t| t as usize >= cb.k) {
        return Err(DapError::Domain(format!(
            "BEV token {bad} outside codebook of {}",
            cb.k
        )));
    }
    let vectors: Vec<Vec<f64>> = tokens
        .tokens
        .iter()
        .map(|&t| cb.entry(t as usize).to_vec())
        .collect();
    unpatchify(
        &vectors,
        tokens.h * cb.patch_h,
        tokens.w * cb.patch_w,
        cb.patch_h,
        cb.patch_w,
        cb.n_classes,
    )
}

/// Fraction of cells whose class matches.
pub fn cell_accuracy(a: &BevGrid, b: &BevGrid) -> f64 {
    assert_eq!(a.cells.len(), b.cells.len());
    if a.cells.is_empty() {
        return 1.0;
    }
    a.cells.iter().zip(&b.cells).filter(|(x, y)| x == y).count() as f64 / a.cells.len() as f64
}

const CODEBOOK_MAGIC: &[u8; 8] = b"DAPBEVCB";
const CODEBOOK_VERSION: u32 = 1;

pub fn write_codebook<W: Write>(out: &mut W, cb: &Codebook) -> std::io::Result<()> {
    out.write_all(CODEBOOK_MAGIC)?;
    for v in [
        CODEBOOK_VERSION,
        cb.k as u32,
        cb.dim as u32,
        cb.patch_h as u32,
        cb.patch_w as u32,
        cb.n_classes as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for e in &cb.entries {
        out.write_all(&e.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_codebook<R: Read>(input: &mut R, path: &Path) -> Result<Codebook> {
    let err = |m: &str| DapError::format(path, m);
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|e| DapError::io(path, e))?;
    if &magic != CODEBOOK_MAGIC {
        return Err(err("not a BEV codebook file"));
    }
    let mut header = [0u32; 6];
    for h in header.iter_mut() {
        let mut b = [0u8; 4];
        input
            .read_exact(&mut b)
            .map_err(|e| DapError::io(path, e))?;
        *h = u32::from_le_bytes(b);
    }
    let [version, k, dim, ph, pw, nc] = header.map(|v| v as usize);
    if version != CODEBOOK_VERSION as usize {
        return Err(err(&format!("unsupported codebook version {version}")));
    }
    if k == 0 || dim != ph * pw * nc {
        return Err(err("inconsistent codebook header"));
    }
    let mut entries = vec![0.0; k * dim];
    let mut b = [0u8; 8];
    for e in entries.iter_mut() {
        input
            .read_exact(&mut b)
            .map_err(|e| DapError::io(path, e))?;
        *e = f64::from_le_bytes(b);
    }
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(err("non-finite codebook entry"));
    }
    Ok(Codebook {
        k,
        dim,
        patch_h: ph,
        patch_w: pw,
        n_classes: nc,
        entries,
    })
}

pub fn save_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    let mut buf = Vec::new();
    write_codebook(&mut buf, cb).map_err(|e| DapError::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| DapError::io(path, e))
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let bytes = std::fs::read(path).map_err(|e| DapError::io(path, e))?;
    read_codebook(&mut bytes.as_slice(), path)
}
