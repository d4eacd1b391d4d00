//! Uncertainty masks around pseudo-proposal boundaries.
//!
//! A pseudo proposal `[s, e]` with length `d` marks the bands
//! `[s - alpha d, s + beta d]` and `[e - beta d, e + alpha d]` as uncertain.
//! A snippet is uncertain when its center lies strictly inside a band, so
//! closed-interval ties resolve to certain.

use crate::error::{Error, Result};
use crate::temporal::{PseudoProposal, TimeGrid};

/// Expansion (`alpha`) and shrinking (`beta`) ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskParams {
    alpha: f64,
    beta: f64,
}

impl MaskParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::constraint("alpha", "must be finite and >= 0"));
        }
        if !(beta.is_finite() && (0.0..0.5).contains(&beta)) {
            return Err(Error::constraint("beta", "must lie in [0, 0.5)"));
        }
        Ok(Self { alpha, beta })
    }

    pub fn zero() -> Self {
        Self { alpha: 0.0, beta: 0.0 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Per-snippet certainty bits: `true` = certain (used for training).
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetMask {
    bits: Vec<bool>,
    grid: TimeGrid,
}

impl SnippetMask {
    pub fn all_certain(grid: TimeGrid) -> Self {
        Self {
            bits: vec![true; grid.num_snippets()],
            grid,
        }
    }

    pub fn from_bits(bits: Vec<bool>, grid: TimeGrid) -> Result<Self> {
        if bits.len() != grid.num_snippets() {
            return Err(Error::Shape(format!(
                "mask has {} bits, grid has {} snippets",
                bits.len(),
                grid.num_snippets()
            )));
        }
        Ok(Self { bits, grid })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn uncertain_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| !**b).map(|(i, _)| i)
    }

    /// Run-length encoding as `(value, count)` pairs.
    pub fn run_lengths(&self) -> Vec<(bool, usize)> {
        let mut runs: Vec<(bool, usize)> = Vec::new();
        for &b in &self.bits {
            match runs.last_mut() {
                Some((v, n)) if *v == b => *n += 1,
                _ => runs.push((b, 1)),
            }
        }
        runs
    }

    pub fn from_run_lengths(runs: &[(bool, usize)], grid: TimeGrid) -> Result<Self> {
        let bits = runs
            .iter()
            .flat_map(|&(v, n)| std::iter::repeat_n(v, n))
            .collect();
        Self::from_bits(bits, grid)
    }
}

pub fn mask_for_proposal(p: &PseudoProposal, params: &MaskParams, grid: &TimeGrid) -> SnippetMask {
    let mut mask = SnippetMask::all_certain(*grid);
    mark_uncertain(&mut mask.bits, p, params, grid);
    mask
}

fn mark_uncertain(bits: &mut [bool], p: &PseudoProposal, params: &MaskParams, grid: &TimeGrid) {
    let (s, e) = (p.interval.start_s(), p.interval.end_s());
    let d = e - s;
    let extent = grid.extent_s();
    let bands = [
        (s - params.alpha * d, s + params.beta * d),
        (e - params.beta * d, e + params.alpha * d),
    ];
    for (lo, hi) in bands {
        let (lo, hi) = (lo.max(0.0), hi.min(extent));
        for i in grid.centers_strictly_inside(lo, hi) {
            bits[i] = false;
        }
    }
}

/// Union of uncertain regions: a snippet is uncertain if any mask says so.
pub fn union_masks(masks: &[SnippetMask], grid: &TimeGrid) -> Result<SnippetMask> {
    let mut out = SnippetMask::all_certain(*grid);
    for m in masks {
        if m.grid != *grid {
            return Err(Error::GridMismatch);
        }
        for (o, &b) in out.bits.iter_mut().zip(&m.bits) {
            *o &= b;
        }
    }
    Ok(out)
}

/// Union mask of a whole pseudo-proposal set.
pub fn mask_for_proposals(pseudos: &[PseudoProposal], params: &MaskParams, grid: &TimeGrid) -> SnippetMask {
    let mut mask = SnippetMask::all_certain(*grid);
    for p in pseudos {
        mark_uncertain(&mut mask.bits, p, params, grid);
    }
    mask
}

/// Linear decay of both ratios from `initial` at `warmup` to zero at
/// `total`.
pub fn decay_schedule(epoch: usize, warmup: usize, total: usize, initial: &MaskParams) -> Result<MaskParams> {
    if warmup >= total {
        return Err(Error::constraint("warmup_epochs", format!("{warmup} must be < total {total}")));
    }
    if epoch > total {
        return Err(Error::constraint("epoch", format!("{epoch} exceeds total {total}")));
    }
    if epoch <= warmup {
        return Ok(*initial);
    }
    if epoch == total {
        return Ok(MaskParams::zero());
    }
    let f = (total - epoch) as f64 / (total - warmup) as f64;
    Ok(MaskParams {
        alpha: initial.alpha * f,
        beta: initial.beta * f,
    })
}
