//! MLP-Mixer building blocks: per-patch embedding, channel mixing, token
//! mixing, and the pooled classification head.
//!
//! Token mixing here is also the reference for local token mixing: an LTM
//! with a single block is exactly [`token_mix`] over the whole token grid.

use crate::error::{Error, Result};
use crate::mmlp;
use crate::params::{Bound, Init, ParamDecl};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Layer normalization epsilon used by every mixing MLP.
pub const NORM_EPS: f64 = 1e-5;

/// Width of a mixing MLP's hidden layer for an axis of length `extent`.
pub fn hidden_width(extent: usize, ratio: f64) -> usize {
    ((extent as f64 * ratio).round() as usize).max(1)
}

/// Pre-norm residual MLP acting along one axis.
///
/// The norm runs over `lanes` features; the two dense maps act on an axis of
/// length `extent`. For channel mixing `lanes == extent == C`; for token
/// mixing `lanes` is the feature width and `extent` the token count.
#[derive(Debug, Clone, Copy)]
pub struct MixingMlp {
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub w_in: Var,
    pub b_in: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl MixingMlp {
    const FIELDS: [&'static str; 6] = ["norm_gamma", "norm_beta", "w_in", "b_in", "w_out", "b_out"];

    pub fn decls(prefix: &str, extent: usize, lanes: usize, ratio: f64) -> Vec<ParamDecl> {
        let hidden = hidden_width(extent, ratio);
        let name = |f: &str| format!("{prefix}.{f}");
        vec![
            ParamDecl::new(name("norm_gamma"), vec![lanes], Init::Ones),
            ParamDecl::new(name("norm_beta"), vec![lanes], Init::Zeros),
            ParamDecl::new(name("w_in"), vec![extent, hidden], Init::HeUniform { fan_in: extent }),
            ParamDecl::new(name("b_in"), vec![hidden], Init::Zeros),
            ParamDecl::new(name("w_out"), vec![hidden, extent], Init::HeUniform { fan_in: hidden }),
            ParamDecl::new(name("b_out"), vec![extent], Init::Zeros),
        ]
    }

    pub fn param_count(extent: usize, lanes: usize, ratio: f64) -> usize {
        let hidden = hidden_width(extent, ratio);
        2 * lanes + extent * hidden + hidden + hidden * extent + extent
    }

    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        let v = |f: &str| bound.var(&format!("{prefix}.{f}"));
        Ok(Self {
            norm_gamma: v("norm_gamma")?,
            norm_beta: v("norm_beta")?,
            w_in: v("w_in")?,
            b_in: v("b_in")?,
            w_out: v("w_out")?,
            b_out: v("b_out")?,
        })
    }

    /// Places tensors for every field (in declaration order) into `g`.
    pub fn from_tensors<T: Element>(
        g: &mut Graph<T>,
        tensors: [Tensor<T>; 6],
        requires_grad: bool,
    ) -> Self {
        let [a, b, c, d, e, f] = tensors.map(|t| g.leaf(t, requires_grad));
        Self {
            norm_gamma: a,
            norm_beta: b,
            w_in: c,
            b_in: d,
            w_out: e,
            b_out: f,
        }
    }

    /// Freshly initialized leaves (unit norm, He-uniform weights, zero biases).
    pub fn init<T: Element>(
        g: &mut Graph<T>,
        extent: usize,
        lanes: usize,
        ratio: f64,
        seed: u64,
        requires_grad: bool,
    ) -> Self {
        let tensors = Self::decls("mlp", extent, lanes, ratio)
            .iter()
            .map(|d| d.initialize(seed))
            .collect::<Vec<_>>();
        Self::from_tensors(g, tensors.try_into().expect("six fields"), requires_grad)
    }

    /// Unit norm and all-zero dense maps: the block is an exact identity.
    pub fn zeroed<T: Element>(g: &mut Graph<T>, extent: usize, lanes: usize, ratio: f64) -> Self {
        let hidden = hidden_width(extent, ratio);
        Self::from_tensors(
            g,
            [
                Tensor::ones(&[lanes]),
                Tensor::zeros(&[lanes]),
                Tensor::zeros(&[extent, hidden]),
                Tensor::zeros(&[hidden]),
                Tensor::zeros(&[hidden, extent]),
                Tensor::zeros(&[extent]),
            ],
            false,
        )
    }

    pub fn vars(&self) -> [Var; 6] {
        [
            self.norm_gamma,
            self.norm_beta,
            self.w_in,
            self.b_in,
            self.w_out,
            self.b_out,
        ]
    }

    pub fn field_names() -> [&'static str; 6] {
        Self::FIELDS
    }

    fn extent<T: Element>(&self, g: &Graph<T>) -> usize {
        g.shape(self.w_in)[0]
    }
}

/// Parameters of one mixer layer.
#[derive(Debug, Clone, Copy)]
pub struct MixerLayerParams {
    pub channel: MixingMlp,
    pub token: MixingMlp,
}

/// Shared per-patch projection from `in_channels·P²` to the hidden width.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingParams {
    pub patch_size: usize,
    /// `[(in_channels·P²) × C]`
    pub weight: Var,
    /// `[C]`
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    /// `[C × K]`
    pub weight: Var,
    /// `[K]`
    pub bias: Var,
}

fn expect_tokens<T: Element>(g: &Graph<T>, x: Var, op: &str) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [b, n, c] => Ok((b, n, c)),
        ref s => Err(Error::Shape(format!("{op} expects [B×n×C] tokens, got {s:?}"))),
    }
}

/// Crops `[B×3×H×W]` into non-overlapping `P×P` patches (row-major over the
/// patch grid), flattens each over (channel, dy, dx), and projects it.
pub fn patch_embed<T: Element>(g: &mut Graph<T>, image: Var, p: &EmbeddingParams) -> Result<Var> {
    let tokens = mmlp::patchify(g, image, p.patch_size)?;
    let d = g.shape(tokens)[2];
    if g.shape(p.weight)[0] != d {
        return Err(Error::Shape(format!(
            "embedding weight {:?} expects {} features per patch, patches carry {d}",
            g.shape(p.weight),
            g.shape(p.weight)[0]
        )));
    }
    g.linear(tokens, p.weight, Some(p.bias))
}

/// `U = X + W₂·σ(W₁·LN(X))` along the channel axis of each token.
pub fn channel_mix<T: Element>(g: &mut Graph<T>, x: Var, p: &MixingMlp) -> Result<Var> {
    let (_, _, c) = expect_tokens(g, x, "channel_mix")?;
    if p.extent(g) != c {
        return Err(Error::Shape(format!(
            "channel-mixing weights expect {} channels, input has {c}",
            p.extent(g)
        )));
    }
    let normed = g.layernorm(x, p.norm_gamma, p.norm_beta, NORM_EPS)?;
    let h = g.linear(normed, p.w_in, Some(p.b_in))?;
    let h = g.gelu(h);
    let y = g.linear(h, p.w_out, Some(p.b_out))?;
    g.add(x, y)
}

/// `Y = U + σ(LN(U)·W₃)·W₄` along the token axis, weights shared by every
/// channel.
pub fn token_mix<T: Element>(g: &mut Graph<T>, x: Var, p: &MixingMlp) -> Result<Var> {
    let (_, n, _) = expect_tokens(g, x, "token_mix")?;
    if p.extent(g) != n {
        return Err(Error::Shape(format!(
            "token-mixing weights expect {} tokens, input has {n}",
            p.extent(g)
        )));
    }
    let normed = g.layernorm(x, p.norm_gamma, p.norm_beta, NORM_EPS)?;
    let h = g.token_linear(normed, p.w_in, p.b_in)?;
    let h = g.gelu(h);
    let y = g.token_linear(h, p.w_out, p.b_out)?;
    g.add(x, y)
}

/// Channel mixing followed by token mixing.
pub fn mixer_layer<T: Element>(g: &mut Graph<T>, x: Var, p: &MixerLayerParams) -> Result<Var> {
    let u = channel_mix(g, x, &p.channel)?;
    token_mix(g, u, &p.token)
}

/// Global average pooling over tokens, then a dense map to `K` logits.
pub fn classifier_head<T: Element>(g: &mut Graph<T>, y: Var, head: &ClassifierHead) -> Result<Var> {
    let (_, _, c) = expect_tokens(g, y, "classifier_head")?;
    if g.shape(head.weight)[0] != c {
        return Err(Error::Shape(format!(
            "head weight {:?} does not match {c} channels",
            g.shape(head.weight)
        )));
    }
    let pooled = g.mean_axis(y, 1)?;
    g.linear(pooled, head.weight, Some(head.bias))
}
