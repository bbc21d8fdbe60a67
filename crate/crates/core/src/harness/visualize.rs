//! Patch-resolution routing masks as binary PGM (P5) images.

use std::path::Path;

use super::Checkpoint;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::nested::{patchify, Route};
use crate::routing::{epr_assign, solve_capacity, AssignmentVec, RouterProbs, SolverOptions};
use crate::tensor::Tensor;

/// Expert choice of every token of one image, laid out on the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteMap {
    pub rows: usize,
    pub cols: usize,
    pub experts: usize,
    pub assignment: AssignmentVec,
}

impl RouteMap {
    /// `1` where the token went to the widest expert, else `0` (maxval 1).
    pub fn widest_mask_pgm(&self) -> Vec<u8> {
        let px: Vec<u8> = self.assignment.as_slice().iter().map(|&e| u8::from(e + 1 == self.experts)).collect();
        encode_pgm(self.cols, self.rows, 1, &px)
    }

    /// One-based expert index of every token (maxval `E`).
    pub fn expert_index_pgm(&self) -> Vec<u8> {
        let px: Vec<u8> = self.assignment.as_slice().iter().map(|&e| (e + 1) as u8).collect();
        encode_pgm(self.cols, self.rows, self.experts as u8, &px)
    }
}

fn encode_pgm(width: usize, height: usize, maxval: u8, px: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend_from_slice(px);
    out
}

pub fn write_pgm(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Parses a single-byte P5 image into `(width, height, maxval, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, u8, Vec<u8>)> {
    let bad = |m: &str| Error::Format(format!("PGM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("missing P5 magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    // exactly one whitespace byte separates the header from the raster
    let px = bytes.get(i + 1..).ok_or_else(|| bad("missing raster"))?;
    if px.len() != w * h {
        return Err(bad("raster size does not match header"));
    }
    if px.iter().any(|&p| p as usize > maxval) {
        return Err(bad("pixel above maxval"));
    }
    Ok((w, h, maxval as u8, px.to_vec()))
}

/// Routes one `H×W×C` image at effective capacity `ec` with the learned router.
pub fn route_visualize(ckpt: &Checkpoint, image: &[f32], ec: f64, solver: &SolverOptions) -> Result<RouteMap> {
    let cfg = &ckpt.config;
    cfg.validate()?;
    let c = solve_capacity(ec, cfg.spec.experts, solver)?;
    let n = cfg.tokens();
    let px: Vec<f64> = image.iter().map(|&v| v as f64).collect();
    let patches = Tensor::new(&[n, cfg.patch_len()], patchify(&px, cfg)?)?;
    let mut tape = Tape::inference();
    let vars = ckpt.params.bind(&mut tape);
    let mut assign = |_: usize, r: &RouterProbs| epr_assign(r, &c, n);
    let out = cfg.forward(&mut tape, &vars, &patches, Route::Routed(&mut assign))?;
    let (rows, cols) = cfg.grid();
    Ok(RouteMap { rows, cols, experts: cfg.spec.experts, assignment: out.assignments[0].clone() })
}
