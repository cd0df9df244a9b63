//! Central finite-difference gradient checking.
//!
//! The numerical side only ever calls forward operators, so it stays
//! independent of every backward rule it is used to verify.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor below which an element's error is treated as absolute.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-element relative error over all checked inputs.
    pub max_rel_err: f64,
    /// Input index and flat element index where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the backward pass of `build` against central differences.
///
/// `build` receives a fresh graph and one parameter leaf per entry of
/// `inputs` and must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_err = 0.0;
    let mut worst = (0, 0);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let mut num = Tensor::zeros(input.shape());
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[ti].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let n = (plus - minus) / (2.0 * step);
            num.data_mut()[e] = n;
            let err = relative_error(analytic[ti].data()[e], n);
            if err > max_rel_err {
                max_rel_err = err;
                worst = (ti, e);
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        analytic,
        numeric,
    })
}

/// Contracts `y` against a fixed weighting so every output element carries
/// a distinct, non-trivial cotangent.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone().reshape(g.shape(y))?);
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

/// Relative-error threshold for single operators.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error threshold for composite blocks.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

/// Names accepted by [`run_suite`], in execution order.
pub const SUITE: &[&str] = &[
    "matmul",
    "conv2d",
    "conv2d_strided",
    "maxpool2",
    "upsample_bilinear2",
    "layernorm",
    "gelu",
    "relu",
    "softmax_ce",
    "split_channels",
    "concat_channels",
    "add",
    "mul",
    "add_bias",
    "scale",
    "mean_axis",
    "permute",
    "linear",
    "token_linear",
    "channel_mix",
    "token_mix",
    "ltm",
    "mmlp_block",
];

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub composite: bool,
    pub max_rel_err: f64,
}

impl SuiteEntry {
    pub fn tolerance(&self) -> f64 {
        if self.composite {
            COMPOSITE_TOLERANCE
        } else {
            OP_TOLERANCE
        }
    }

    pub fn passes(&self) -> bool {
        self.max_rel_err < self.tolerance()
    }
}

fn uniform(r: &mut crate::rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    use rand::Rng as _;
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn mixing_inputs(r: &mut crate::rng::Rng, extent: usize, lanes: usize) -> Vec<Tensor<f64>> {
    let h = crate::mixer::hidden_width(extent, 1.0);
    vec![
        uniform(r, &[lanes], 0.5, 1.5),
        uniform(r, &[lanes], -0.5, 0.5),
        uniform(r, &[extent, h], -1.0, 1.0),
        uniform(r, &[h], -0.5, 0.5),
        uniform(r, &[h, extent], -1.0, 1.0),
        uniform(r, &[extent], -0.5, 0.5),
    ]
}

fn mixing_from(v: &[Var]) -> crate::mixer::MixingMlp {
    crate::mixer::MixingMlp {
        norm_gamma: v[0],
        norm_beta: v[1],
        w_in: v[2],
        b_in: v[3],
        w_out: v[4],
        b_out: v[5],
    }
}

/// Checks one named operator (see [`SUITE`]) on random `f64` inputs drawn
/// from `seed`. Every output is contracted with fixed random weights.
pub fn check_named(name: &str, seed: u64) -> Result<SuiteEntry> {
    use crate::error::Error;
    use crate::mmlp::{GroupSpec, MmlpConfig};

    let mut r = crate::rng::stream(seed, &format!("gradcheck/{name}"));
    let r = &mut r;
    let (composite, name): (bool, &'static str) = match SUITE.iter().find(|&&n| n == name) {
        Some(&n) => (matches!(n, "channel_mix" | "token_mix" | "ltm" | "mmlp_block"), n),
        None => {
            return Err(Error::Usage(format!(
                "unknown operator {name:?}; expected one of {}",
                SUITE.join(", ")
            )))
        }
    };
    // Output weights are drawn after the inputs, once the output size is known.
    let wseed = crate::rng::derive_seed(seed, name);
    let contract = move |g: &mut Graph<f64>, y: Var| -> Result<Var> {
        let mut wr = crate::rng::stream(wseed, "weights");
        let w = uniform(&mut wr, g.shape(y), -1.0, 1.0);
        weighted_sum(g, y, &w)
    };
    let step = DEFAULT_STEP;
    let report = match name {
        "matmul" => {
            let ins = [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0)];
            check_gradients(&ins, step, |g, v| {
                let y = g.matmul(v[0], v[1])?;
                contract(g, y)
            })?
        }
        "conv2d" | "conv2d_strided" => {
            let (stride, pad) = if name == "conv2d" { (1, 1) } else { (2, 0) };
            let ins = [
                uniform(r, &[2, 2, 6, 6], -1.0, 1.0),
                uniform(r, &[3, 2, 2 + stride % 2, 2 + stride % 2], -1.0, 1.0),
                uniform(r, &[3], -0.5, 0.5),
            ];
            check_gradients(&ins, step, |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
                contract(g, y)
            })?
        }
        "maxpool2" => {
            let ins = [uniform(r, &[2, 3, 4, 6], -1.0, 1.0)];
            check_gradients(&ins, step, |g, v| {
                let y = g.maxpool2(v[0])?;
                contract(g, y)
            })?
        }
        "upsample_bilinear2" => {
            let ins = [uniform(r, &[2, 2, 3, 4], -1.0, 1.0)];
            check_gradients(&ins, step, |g, v| {
                let y = g.upsample_bilinear2(v[0])?;
                contract(g, y)
            })?
        }
        "layernorm" => {
            let ins = [
                uniform(r, &[3, 2, 6], -1.0, 1.0),
                uniform(r, &[6], 0.5, 1.5),
                uniform(r, &[6], -0.5, 0.5),
            ];
            check_gradients(&ins, step, |g, v| {
                let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
                contract(g, y)
            })?
        }
        "gelu" | "relu" => {
            let ins = [uniform(r, &[4, 6], -3.0, 3.0)];
            check_gradients(&ins, step, |g, v| {
                let y = if name == "gelu" { g.gelu(v[0]) } else { g.relu(v[0]) };
                contract(g, y)
            })?
        }
        "softmax_ce" => {
            use rand::Rng as _;
            let ins = [uniform(r, &[2, 4, 3, 3], -2.0, 2.0)];
            let labels: Vec<usize> = (0..18).map(|_| r.random_range(0..4)).collect();
            check_gradients(&ins, step, |g, v| g.softmax_ce(v[0], &labels))?
        }
        "split_channels" => {
            let ins = [uniform(r, &[2, 5, 2, 3], -1.0, 1.0)];
            check_gradients(&ins, step, |g, v| {
                let parts = g.split_channels(v[0], &[2, 3])?;
                let scaled: Vec<Var> = parts
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| g.scale(p, 1.0 + i as f64))
                    .collect();
                let y = g.concat_channels(&scaled)?;
                contract(g, y)
            })?
        }
        "concat_channels" => {
            let ins = [uniform(r, &[2, 1, 3, 3], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0)];
            check_gradients(&ins, step, |g, v| {
                let y = g.concat_channels(&[v[0], v[1]])?;
                contract(g, y)
            })?
        }
        "add" | "mul" => {
            let ins = [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)];
            check_gradients(&ins, step, |g, v| {
                let y = if name == "add" { g.add(v[0], v[1])? } else { g.mul(v[0], v[1])? };
                contract(g, y)
            })?
        }
        "add_bias" => {
            let ins = [uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)];
            check_gradients(&ins, step, |g, v| {
                let y = g.add_bias(v[0], v[1])?;
                contract(g, y)
            })?
        }
        "scale" => {
            let ins = [uniform(r, &[5], -1.0, 1.0)];
            check_gradients(&ins, step, |g, v| {
                let y = g.scale(v[0], -1.75);
                contract(g, y)
            })?
        }
        "mean_axis" => {
            let ins = [uniform(r, &[2, 3, 4], -1.0, 1.0)];
            check_gradients(&ins, step, |g, v| {
                let y = g.mean_axis(v[0], 1)?;
                contract(g, y)
            })?
        }
        "permute" => {
            let ins = [uniform(r, &[2, 3, 4, 2], -1.0, 1.0)];
            check_gradients(&ins, step, |g, v| {
                let y = g.permute(v[0], &[2, 0, 3, 1])?;
                let y = g.reshape(y, &[4, 12])?;
                contract(g, y)
            })?
        }
        "linear" => {
            let ins = [
                uniform(r, &[2, 3, 4], -1.0, 1.0),
                uniform(r, &[4, 5], -1.0, 1.0),
                uniform(r, &[5], -0.5, 0.5),
            ];
            check_gradients(&ins, step, |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                contract(g, y)
            })?
        }
        "token_linear" => {
            let ins = [
                uniform(r, &[3, 4, 5], -1.0, 1.0),
                uniform(r, &[4, 2], -1.0, 1.0),
                uniform(r, &[2], -0.5, 0.5),
            ];
            check_gradients(&ins, step, |g, v| {
                let y = g.token_linear(v[0], v[1], v[2])?;
                contract(g, y)
            })?
        }
        "channel_mix" | "token_mix" => {
            let (tokens, channels) = (4, 6);
            let extent = if name == "channel_mix" { channels } else { tokens };
            let mut ins = vec![uniform(r, &[2, tokens, channels], -1.0, 1.0)];
            // Both mixers normalize over channels.
            ins.extend(mixing_inputs(r, extent, channels));
            check_gradients(&ins, step, |g, v| {
                let p = mixing_from(&v[1..]);
                let y = if name == "channel_mix" {
                    crate::mixer::channel_mix(g, v[0], &p)?
                } else {
                    crate::mixer::token_mix(g, v[0], &p)?
                };
                contract(g, y)
            })?
        }
        "ltm" => {
            // 4×4 grid in 2×2 blocks: 4 tokens per block, 3 lanes.
            let mut ins = vec![uniform(r, &[2, 16, 3], -1.0, 1.0)];
            ins.extend(mixing_inputs(r, 4, 3));
            check_gradients(&ins, step, |g, v| {
                let y = crate::mmlp::ltm(g, v[0], 2, &mixing_from(&v[1..]))?;
                contract(g, y)
            })?
        }
        "mmlp_block" => {
            let cfg = MmlpConfig::new(
                vec![GroupSpec::new(2, 2, 2), GroupSpec::new(1, 2, 1), GroupSpec::new(1, 4, 1)],
                1.0,
            );
            let res = 8;
            let mut ins = vec![uniform(r, &[1, 4, res, res], -1.0, 1.0)];
            for gs in &cfg.groups {
                ins.extend(mixing_inputs(r, gs.tokens_per_block(res)?, gs.lanes()));
            }
            check_gradients(&ins, step, |g, v| {
                let params: Vec<_> = v[1..].chunks(6).map(mixing_from).collect();
                let y = crate::mmlp::mmlp_block(g, v[0], &cfg, &params)?;
                contract(g, y)
            })?
        }
        _ => unreachable!("suite names are matched above"),
    };
    Ok(SuiteEntry {
        name,
        composite,
        max_rel_err: report.max_rel_err,
    })
}

/// Runs every entry of [`SUITE`] (or only `only`) for one seed.
pub fn run_suite(seed: u64, only: Option<&str>) -> Result<Vec<SuiteEntry>> {
    match only {
        Some(name) => Ok(vec![check_named(name, seed)?]),
        None => SUITE.iter().map(|n| check_named(n, seed)).collect(),
    }
}
