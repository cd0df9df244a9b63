//! Multi-scale MLP block.
//!
//! A feature map is split into channel groups. Each group is cropped into
//! `s×s` patches, and its patch grid is partitioned into `n×n` blocks;
//! token mixing runs inside each block only (local token mixing, LTM). The
//! group outputs are concatenated back along the channel axis. With `n = 1`
//! a group's LTM is ordinary global token mixing.

use crate::error::{Error, Result};
use crate::mixer::{self, MixingMlp};
use crate::params::ParamDecl;
use crate::tensor::{Element, Graph, Var};

/// LTM parameters: pre-norm affine over the `C_g·s²` feature lanes and the
/// two token-axis maps over the `T` tokens of a block. Shared by every block
/// and every lane of the group.
pub type LtmParams = MixingMlp;

/// One channel group of an MMLP block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSpec {
    pub channels: usize,
    pub patch_size: usize,
    pub block_count: usize,
}

impl GroupSpec {
    pub fn new(channels: usize, patch_size: usize, block_count: usize) -> Self {
        Self {
            channels,
            patch_size,
            block_count,
        }
    }

    /// Feature lanes per token, `C_g·s²`.
    pub fn lanes(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Patch grid side `G = R/s` on an `R×R` map, after validating every
    /// divisibility constraint.
    pub fn grid(&self, resolution: usize) -> Result<usize> {
        if self.channels == 0 || self.patch_size == 0 || self.block_count == 0 {
            return Err(Error::config(format!("group {self:?} has a zero field")));
        }
        if !resolution.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "group {self:?}: resolution {resolution} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        let grid = resolution / self.patch_size;
        if !grid.is_multiple_of(self.block_count) {
            return Err(Error::config(format!(
                "group {self:?}: patch grid {grid} is not divisible by block count {}",
                self.block_count
            )));
        }
        Ok(grid)
    }

    /// Tokens per block, `T = (R/(s·n))²`.
    pub fn tokens_per_block(&self, resolution: usize) -> Result<usize> {
        let side = self.grid(resolution)? / self.block_count;
        Ok(side * side)
    }
}

/// Channel grouping and per-group scales of one MMLP block.
#[derive(Debug, Clone, PartialEq)]
pub struct MmlpConfig {
    pub groups: Vec<GroupSpec>,
    /// LTM hidden width as a multiple of the tokens per block.
    pub ratio: f64,
}

impl MmlpConfig {
    pub fn new(groups: Vec<GroupSpec>, ratio: f64) -> Self {
        Self { groups, ratio }
    }

    pub fn channels(&self) -> usize {
        self.groups.iter().map(|g| g.channels).sum()
    }

    /// Interior split points `i₁ < … < i_{k−1}`.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut acc = 0;
        let mut out = Vec::with_capacity(self.groups.len().saturating_sub(1));
        for g in &self.groups[..self.groups.len().saturating_sub(1)] {
            acc += g.channels;
            out.push(acc);
        }
        out
    }

    pub fn validate(&self, channels: usize, resolution: usize) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::config("an MMLP block needs at least one group"));
        }
        if !(self.ratio > 0.0) {
            return Err(Error::config(format!("LTM expansion ratio {} must be positive", self.ratio)));
        }
        if self.channels() != channels {
            return Err(Error::config(format!(
                "group channels {:?} sum to {}, feature map has {channels}",
                self.groups.iter().map(|g| g.channels).collect::<Vec<_>>(),
                self.channels()
            )));
        }
        for (i, g) in self.groups.iter().enumerate() {
            g.grid(resolution)
                .map_err(|e| Error::config(format!("group {i}: {e}")))?;
        }
        Ok(())
    }

    /// Parameter declarations for every group, named `<prefix>.g<i>.*`.
    pub fn decls(&self, prefix: &str, resolution: usize) -> Result<Vec<ParamDecl>> {
        let mut out = Vec::new();
        for (i, g) in self.groups.iter().enumerate() {
            let t = g.tokens_per_block(resolution)?;
            out.extend(MixingMlp::decls(&format!("{prefix}.g{i}"), t, g.lanes(), self.ratio));
        }
        Ok(out)
    }

    pub fn param_count(&self, resolution: usize) -> Result<usize> {
        self.groups
            .iter()
            .map(|g| ltm_param_count(g, resolution, self.ratio))
            .sum()
    }
}

/// `2d + T·h + h + h·T + T` with `d = C_g·s²` lanes, `T` tokens per block and
/// hidden width `h = round(r·T)`.
pub fn ltm_param_count(spec: &GroupSpec, resolution: usize, ratio: f64) -> Result<usize> {
    let t = spec.tokens_per_block(resolution)?;
    Ok(MixingMlp::param_count(t, spec.lanes(), ratio))
}

/// `[B×C×H×W] → [B×(H/s·W/s)×(C·s²)]`: patches row-major over the grid,
/// features row-major over (channel, dy, dx).
pub fn patchify<T: Element>(g: &mut Graph<T>, x: Var, s: usize) -> Result<Var> {
    let [b, c, h, w] = *g.shape(x) else {
        return Err(Error::Shape(format!("patchify expects [B×C×H×W], got {:?}", g.shape(x))));
    };
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::config(format!(
            "{h}×{w} map cannot be cropped into {s}×{s} patches"
        )));
    }
    let (gh, gw) = (h / s, w / s);
    let x = g.reshape(x, &[b, c, gh, s, gw, s])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
    g.reshape(x, &[b, gh * gw, c * s * s])
}

/// Inverse of [`patchify`] for a square `resolution×resolution` map.
pub fn unpatchify<T: Element>(
    g: &mut Graph<T>,
    tokens: Var,
    channels: usize,
    s: usize,
    resolution: usize,
) -> Result<Var> {
    let [b, n, d] = *g.shape(tokens) else {
        return Err(Error::Shape(format!("unpatchify expects [B×n×d], got {:?}", g.shape(tokens))));
    };
    let grid = if s == 0 { 0 } else { resolution / s };
    if grid == 0 || !resolution.is_multiple_of(s) || n != grid * grid || d != channels * s * s {
        return Err(Error::Shape(format!(
            "tokens [{b}×{n}×{d}] do not tile a {channels}×{resolution}×{resolution} map with {s}×{s} patches"
        )));
    }
    let x = g.reshape(tokens, &[b, grid, grid, channels, s, s])?;
    let x = g.permute(x, &[0, 3, 1, 4, 2, 5])?;
    g.reshape(x, &[b, channels, resolution, resolution])
}

/// Local token mixing over a `G×G` token grid split into `n×n` blocks.
///
/// Tokens of each block are stacked row-major and mixed by the shared
/// token-mixing MLP; blocks never see each other.
pub fn ltm<T: Element>(g: &mut Graph<T>, tokens: Var, block_count: usize, params: &LtmParams) -> Result<Var> {
    let [b, count, d] = *g.shape(tokens) else {
        return Err(Error::Shape(format!("ltm expects [B×G²×d], got {:?}", g.shape(tokens))));
    };
    let grid = (count as f64).sqrt().round() as usize;
    if grid * grid != count {
        return Err(Error::config(format!("{count} tokens do not form a square grid")));
    }
    if block_count == 0 || !grid.is_multiple_of(block_count) {
        return Err(Error::config(format!(
            "token grid {grid}×{grid} is not divisible into {block_count}×{block_count} blocks"
        )));
    }
    let (n, side) = (block_count, grid / block_count);
    // [B, n, side, n, side, d] → [B, n, n, side, side, d]
    let x = g.reshape(tokens, &[b, n, side, n, side, d])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let blocks = g.reshape(x, &[b * n * n, side * side, d])?;
    let mixed = mixer::token_mix(g, blocks, params)?;
    let y = g.reshape(mixed, &[b, n, n, side, side, d])?;
    let y = g.permute(y, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(y, &[b, count, d])
}

/// Split → per-group crop + LTM → concat. Output shape equals input shape.
pub fn mmlp_block<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    config: &MmlpConfig,
    params: &[LtmParams],
) -> Result<Var> {
    let [_, c, h, w] = *g.shape(x) else {
        return Err(Error::Shape(format!("mmlp_block expects [B×C×R×R], got {:?}", g.shape(x))));
    };
    if h != w {
        return Err(Error::config(format!("mmlp_block needs a square map, got {h}×{w}")));
    }
    config.validate(c, h)?;
    if params.len() != config.groups.len() {
        return Err(Error::config(format!(
            "{} groups but {} LTM parameter sets",
            config.groups.len(),
            params.len()
        )));
    }
    let parts = g.split_channels(x, &config.boundaries())?;
    let mut outs = Vec::with_capacity(parts.len());
    for ((part, spec), p) in parts.into_iter().zip(&config.groups).zip(params) {
        let tokens = patchify(g, part, spec.patch_size)?;
        let mixed = ltm(g, tokens, spec.block_count, p)?;
        outs.push(unpatchify(g, mixed, spec.channels, spec.patch_size, h)?);
    }
    g.concat_channels(&outs)
}
