//! UNet, MM-UNet, and the global-token-mixing ablation.
//!
//! All three share one five-level encoder/decoder skeleton:
//!
//! - encoder level `l` (1-based): `[conv3×3 + ReLU] × 2` to `c_l = B₀·2^{l−1}`
//!   channels, with 2×2 max pooling between levels;
//! - MM variants pass each level's feature map through an MMLP block right
//!   after its double conv; the block output feeds both the skip connection
//!   and the pooling path;
//! - decoder levels 4..1: bilinear ×2 upsample, concat `[skip, upsampled]`,
//!   `[conv3×3 + ReLU] × 2` down to `c_l`;
//! - a final 1×1 conv to `K` logits.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mixer::MixingMlp;
use crate::mmlp::{self, GroupSpec, MmlpConfig};
use crate::params::{Bound, Init, ParamDecl, ParamStore};
use crate::tensor::{Element, Graph, Tensor, Var};

pub const LEVELS: usize = 5;

/// Block counts `n_i` per level for the three channel groups, at the
/// reference 256×256 input with 4×4 patches.
pub const REFERENCE_BLOCK_COUNTS: [[usize; 3]; LEVELS] =
    [[32, 16, 8], [16, 8, 4], [8, 4, 2], [8, 4, 2], [4, 2, 1]];
pub const REFERENCE_PATCH_SIZE: usize = 4;
pub const REFERENCE_INPUT_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Unet,
    MmUnet,
    MmUnetGlobal,
}

impl Variant {
    pub fn has_mmlp(self) -> bool {
        !matches!(self, Variant::Unet)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Unet => "unet",
            Variant::MmUnet => "mm-unet",
            Variant::MmUnetGlobal => "mm-unet-global",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "unet" => Ok(Variant::Unet),
            "mm-unet" => Ok(Variant::MmUnet),
            "mm-unet-global" => Ok(Variant::MmUnetGlobal),
            other => Err(Error::Parse(format!(
                "unknown variant {other:?} (expected unet, mm-unet, mm-unet-global)"
            ))),
        }
    }
}

/// Declarative description of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub base_width: usize,
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub ltm_ratio: f64,
    /// One block configuration per level; empty for [`Variant::Unet`].
    pub mmlp: Vec<MmlpConfig>,
}

impl ModelSpec {
    /// Spec with the default MMLP schedule for `variant`.
    pub fn new(variant: Variant, base_width: usize, input_size: usize, num_classes: usize) -> Result<Self> {
        Self::with_ratio(variant, base_width, input_size, num_classes, 1.0)
    }

    pub fn with_ratio(
        variant: Variant,
        base_width: usize,
        input_size: usize,
        num_classes: usize,
        ltm_ratio: f64,
    ) -> Result<Self> {
        let mmlp = match variant {
            Variant::Unet => Vec::new(),
            Variant::MmUnet => default_schedule(base_width, input_size, ltm_ratio, false)?,
            Variant::MmUnetGlobal => default_schedule(base_width, input_size, ltm_ratio, true)?,
        };
        let spec = Self {
            variant,
            base_width,
            input_size,
            in_channels: 3,
            num_classes,
            ltm_ratio,
            mmlp,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Base width 64, 256×256 input, 4 classes.
    pub fn reference(variant: Variant) -> Self {
        Self::new(variant, 64, REFERENCE_INPUT_SIZE, 4).expect("reference spec is valid")
    }

    /// Channels at 1-based `level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_width << (level - 1)
    }

    /// Feature map side at 1-based `level`.
    pub fn resolution(&self, level: usize) -> usize {
        self.input_size >> (level - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::config("base width, class count and input channels must be positive"));
        }
        let stride = 1 << (LEVELS - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return Err(Error::config(format!(
                "input size {} must be a positive multiple of {stride}",
                self.input_size
            )));
        }
        match (self.variant.has_mmlp(), self.mmlp.len()) {
            (false, 0) => {}
            (false, _) => return Err(Error::config("unet carries no MMLP blocks")),
            (true, LEVELS) => {}
            (true, n) => {
                return Err(Error::config(format!(
                    "{} needs {LEVELS} MMLP configurations, got {n}",
                    self.variant
                )))
            }
        }
        for (i, cfg) in self.mmlp.iter().enumerate() {
            let level = i + 1;
            cfg.validate(self.channels(level), self.resolution(level))
                .map_err(|e| Error::config(format!("level {level}: {e}")))?;
        }
        Ok(())
    }

    /// Every parameter the model allocates, in a fixed order.
    pub fn decls(&self) -> Result<Vec<ParamDecl>> {
        self.validate()?;
        let mut out = Vec::new();
        let mut in_ch = self.in_channels;
        for level in 1..=LEVELS {
            let c = self.channels(level);
            out.extend(conv_decls(&format!("enc{level}.conv1"), in_ch, c, 3));
            out.extend(conv_decls(&format!("enc{level}.conv2"), c, c, 3));
            if let Some(cfg) = self.mmlp.get(level - 1) {
                out.extend(cfg.decls(&format!("enc{level}.mmlp"), self.resolution(level))?);
            }
            in_ch = c;
        }
        for level in (1..LEVELS).rev() {
            let c = self.channels(level);
            out.extend(conv_decls(&format!("dec{level}.conv1"), c + self.channels(level + 1), c, 3));
            out.extend(conv_decls(&format!("dec{level}.conv2"), c, c, 3));
        }
        out.extend(conv_decls("head", self.channels(1), self.num_classes, 1));
        Ok(out)
    }
}

/// Channel groups `[c/2, c/4, c/4]` per level with the reference block
/// counts, rescaled to the actual patch grid when the input is not 256.
///
/// Patch size is `min(4, R_l)`. A reference count `n` on a reference grid
/// `G_ref` becomes `max(1, n·G/G_ref)` on grid `G`, which keeps the number of
/// tokens per block. `global` sets every count to 1.
pub fn default_schedule(
    base_width: usize,
    input_size: usize,
    ratio: f64,
    global: bool,
) -> Result<Vec<MmlpConfig>> {
    if !base_width.is_multiple_of(4) || base_width == 0 {
        return Err(Error::config(format!(
            "MMLP channel groups need a base width divisible by 4, got {base_width}"
        )));
    }
    let mut out = Vec::with_capacity(LEVELS);
    for (l, counts) in REFERENCE_BLOCK_COUNTS.iter().enumerate() {
        let c = base_width << l;
        let res = input_size >> l;
        if res == 0 {
            return Err(Error::config(format!("input size {input_size} too small for {LEVELS} levels")));
        }
        let s = REFERENCE_PATCH_SIZE.min(res);
        let grid = res / s;
        let ref_grid = (REFERENCE_INPUT_SIZE >> l) / REFERENCE_PATCH_SIZE;
        let groups = [c / 2, c / 4, c / 4]
            .iter()
            .zip(counts)
            .map(|(&ch, &n)| {
                let scaled = if global { 1 } else { (n * grid / ref_grid).clamp(1, grid) };
                GroupSpec::new(ch, s, scaled)
            })
            .collect();
        out.push(MmlpConfig::new(groups, ratio));
    }
    Ok(out)
}

fn conv_decls(prefix: &str, in_ch: usize, out_ch: usize, k: usize) -> [ParamDecl; 2] {
    [
        ParamDecl::new(
            format!("{prefix}.weight"),
            vec![out_ch, in_ch, k, k],
            Init::HeUniform { fan_in: in_ch * k * k },
        ),
        ParamDecl::new(format!("{prefix}.bias"), vec![out_ch], Init::Zeros),
    ]
}

/// Closed-form parameter count of a `k×k` convolution with bias.
pub fn conv_param_count(in_ch: usize, out_ch: usize, k: usize) -> usize {
    k * k * in_ch * out_ch + out_ch
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub total: usize,
    /// Per-module counts (`enc1.conv1`, `enc1.mmlp`, …, `head`), in build order.
    pub breakdown: Vec<(String, usize)>,
    /// Parameters held by MMLP blocks.
    pub mmlp_overhead: usize,
}

fn module_of(name: &str) -> &str {
    let stem = name.rsplit_once('.').map_or(name, |(m, _)| m);
    match stem.find(".mmlp") {
        Some(i) => &stem[..i + ".mmlp".len()],
        None => stem,
    }
}

/// Exact parameter enumeration over the spec's declarations.
pub fn count_params(spec: &ModelSpec) -> Result<ParamReport> {
    let mut breakdown: Vec<(String, usize)> = Vec::new();
    for d in spec.decls()? {
        let module = module_of(&d.name);
        match breakdown.last_mut() {
            Some((m, n)) if m == module => *n += d.numel(),
            _ => breakdown.push((module.to_string(), d.numel())),
        }
    }
    let total = breakdown.iter().map(|(_, n)| n).sum();
    let mmlp_overhead = breakdown
        .iter()
        .filter(|(m, _)| m.ends_with(".mmlp"))
        .map(|(_, n)| n)
        .sum();
    Ok(ParamReport {
        total,
        breakdown,
        mmlp_overhead,
    })
}

/// A spec together with its parameter values.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
}

impl<T: Element> Model<T> {
    /// Allocates and initializes every parameter from `seed` (He-uniform
    /// weights, zero biases, unit/zero norm affines).
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let decls = spec.decls()?;
        let params = ParamStore::from_decls(&decls, seed);
        Ok(Self { spec, params })
    }

    /// Wraps existing parameters after checking them against the spec.
    pub fn from_params(spec: ModelSpec, params: ParamStore<T>) -> Result<Self> {
        params.check_layout(&spec.decls()?)?;
        Ok(Self { spec, params })
    }

    /// Binds the parameters into `g` and runs the network on `input`.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, requires_grad: bool) -> Result<(Var, Bound)> {
        let bound = self.params.bind(g, requires_grad);
        let logits = self.forward_bound(g, input, &bound)?;
        Ok((logits, bound))
    }

    pub fn forward_bound(&self, g: &mut Graph<T>, input: Var, p: &Bound) -> Result<Var> {
        let spec = &self.spec;
        let s = g.shape(input).to_vec();
        if s.len() != 4 || s[1] != spec.in_channels || s[2] != spec.input_size || s[3] != spec.input_size {
            return Err(Error::Shape(format!(
                "model expects [B×{}×{}×{}] input, got {s:?}",
                spec.in_channels, spec.input_size, spec.input_size
            )));
        }
        let conv = |g: &mut Graph<T>, x: Var, name: &str, pad: usize| -> Result<Var> {
            g.conv2d(
                x,
                p.var(&format!("{name}.weight"))?,
                p.var(&format!("{name}.bias"))?,
                1,
                pad,
            )
        };
        let double_conv = |g: &mut Graph<T>, x: Var, prefix: &str| -> Result<Var> {
            let x = conv(g, x, &format!("{prefix}.conv1"), 1)?;
            let x = g.relu(x);
            let x = conv(g, x, &format!("{prefix}.conv2"), 1)?;
            Ok(g.relu(x))
        };

        let mut skips = Vec::with_capacity(LEVELS);
        let mut x = input;
        for level in 1..=LEVELS {
            if level > 1 {
                x = g.maxpool2(x)?;
            }
            x = double_conv(g, x, &format!("enc{level}"))?;
            if let Some(cfg) = spec.mmlp.get(level - 1) {
                let ltm_params = (0..cfg.groups.len())
                    .map(|i| MixingMlp::from_bound(p, &format!("enc{level}.mmlp.g{i}")))
                    .collect::<Result<Vec<_>>>()?;
                x = mmlp::mmlp_block(g, x, cfg, &ltm_params)?;
            }
            skips.push(x);
        }
        for level in (1..LEVELS).rev() {
            let up = g.upsample_bilinear2(x)?;
            let cat = g.concat_channels(&[skips[level - 1], up])?;
            x = double_conv(g, cat, &format!("dec{level}"))?;
        }
        conv(g, x, "head", 0)
    }

    /// Logits for a batch without recording gradients.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let (logits, _) = self.forward(&mut g, x, false)?;
        Ok(g.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_count_formula() {
        assert_eq!(conv_param_count(64, 128, 3), 73_856);
    }

    #[test]
    fn reference_schedule_reproduces_table() {
        let spec = ModelSpec::reference(Variant::MmUnet);
        let expect_channels = [[32, 16, 16], [64, 32, 32], [128, 64, 64], [256, 128, 128], [512, 256, 256]];
        for (l, cfg) in spec.mmlp.iter().enumerate() {
            let ch: Vec<usize> = cfg.groups.iter().map(|g| g.channels).collect();
            let n: Vec<usize> = cfg.groups.iter().map(|g| g.block_count).collect();
            assert_eq!(ch, expect_channels[l]);
            assert_eq!(n, REFERENCE_BLOCK_COUNTS[l]);
            assert!(cfg.groups.iter().all(|g| g.patch_size == 4));
        }
    }

    #[test]
    fn global_variant_sets_every_block_count_to_one() {
        let local = ModelSpec::reference(Variant::MmUnet);
        let global = ModelSpec::reference(Variant::MmUnetGlobal);
        for (a, b) in local.mmlp.iter().zip(&global.mmlp) {
            for (ga, gb) in a.groups.iter().zip(&b.groups) {
                assert_eq!(GroupSpec { block_count: 1, ..*ga }, *gb);
            }
        }
    }

    #[test]
    fn desk_scale_schedule_keeps_tokens_per_block() {
        let spec = ModelSpec::new(Variant::MmUnet, 16, 64, 4).unwrap();
        let n: Vec<Vec<usize>> = spec
            .mmlp
            .iter()
            .map(|c| c.groups.iter().map(|g| g.block_count).collect())
            .collect();
        assert_eq!(n, vec![vec![8, 4, 2], vec![4, 2, 1], vec![2, 1, 1], vec![2, 1, 1], vec![1, 1, 1]]);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(ModelSpec::new(Variant::Unet, 8, 40, 4).is_err());
        assert!(ModelSpec::new(Variant::MmUnet, 6, 64, 4).is_err());
        let mut spec = ModelSpec::reference(Variant::MmUnet);
        spec.mmlp[2].groups[0].block_count = 3;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn report_breakdown_sums_to_total() {
        for v in [Variant::Unet, Variant::MmUnet, Variant::MmUnetGlobal] {
            let r = count_params(&ModelSpec::reference(v)).unwrap();
            assert_eq!(r.total, r.breakdown.iter().map(|(_, n)| n).sum::<usize>());
            assert_eq!(r.mmlp_overhead == 0, v == Variant::Unet);
        }
        let r = count_params(&ModelSpec::reference(Variant::Unet)).unwrap();
        let dec4 = r.breakdown.iter().find(|(m, _)| m == "dec4.conv1").unwrap().1;
        assert_eq!(dec4, conv_param_count(1024 + 512, 512, 3));
    }

    #[test]
    fn variant_parses() {
        assert_eq!("mm-unet".parse::<Variant>().unwrap(), Variant::MmUnet);
        assert_eq!("mm_unet_global".parse::<Variant>().unwrap(), Variant::MmUnetGlobal);
        assert!("resnet".parse::<Variant>().is_err());
    }
}
