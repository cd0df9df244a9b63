//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Criterion 9 trains a network end to end twice and takes
//! the bulk of the runtime.

use std::time::Instant;

use mmunet::data::{
    decode_checkpoint, decode_pgm, decode_ppm, encode_checkpoint, encode_pgm, encode_ppm, gen_phantom,
    threshold_segment, Mask, PhantomSpec,
};
use mmunet::gradcheck::{run_suite, SUITE};
use mmunet::mixer::{self, MixingMlp};
use mmunet::mmlp::{self, ltm_param_count};
use mmunet::models::{count_params, Model, ModelSpec, Variant, REFERENCE_BLOCK_COUNTS};
use mmunet::training::{lr_at, train, Confusion, TrainConfig};
use mmunet::{rng, Graph, Tensor};
use rand::Rng;

type Outcome = Result<String, String>;
type Run = Result<(Vec<String>, f64, Model<f32>), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(r: &mut rng::Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn random_mixing(g: &mut Graph<f64>, r: &mut rng::Rng, extent: usize, lanes: usize) -> MixingMlp {
    let h = mixer::hidden_width(extent, 1.0);
    let gamma = uniform(r, &[lanes]).map(|v| 1.0 + 0.5 * v);
    MixingMlp::from_tensors(
        g,
        [
            gamma,
            uniform(r, &[lanes]),
            uniform(r, &[extent, h]),
            uniform(r, &[h]),
            uniform(r, &[h, extent]),
            uniform(r, &[extent]),
        ],
        false,
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst_op = 0.0f64;
    let mut worst_composite = 0.0f64;
    let seeds = [1u64, 2, 3, 4, 5];
    for &seed in &seeds {
        for e in run_suite(seed, None).map_err(|e| e.to_string())? {
            ensure(e.passes(), || format!("seed {seed}: {} rel err {:.3e} >= {:e}", e.name, e.max_rel_err, e.tolerance()))?;
            if e.composite {
                worst_composite = worst_composite.max(e.max_rel_err);
            } else {
                worst_op = worst_op.max(e.max_rel_err);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("suite took {secs:.1}s (limit 120s)"))?;
    Ok(format!(
        "{} checks × {} seeds, max rel err {worst_op:.2e} per-op (< 1e-4), {worst_composite:.2e} composite (< 1e-3), {secs:.1}s",
        SUITE.len(),
        seeds.len()
    ))
}

fn ltm_global_equivalence() -> Outcome {
    let mut r = rng::stream(2, "acceptance/equivalence");
    for grid in [2usize, 4, 8] {
        let lanes = 12;
        let mut g = Graph::new();
        let x = g.constant(uniform(&mut r, &[2, grid * grid, lanes]));
        let p = random_mixing(&mut g, &mut r, grid * grid, lanes);
        let local = mmlp::ltm(&mut g, x, 1, &p).map_err(|e| e.to_string())?;
        let global = mixer::token_mix(&mut g, x, &p).map_err(|e| e.to_string())?;
        ensure(g.value(local).bit_eq(g.value(global)), || format!("G={grid}: outputs differ"))?;
    }
    Ok("ltm(n=1) bit-identical to token_mix for G ∈ {2,4,8}".into())
}

fn locality() -> Outcome {
    let mut r = rng::stream(3, "acceptance/locality");
    let lanes = 3;
    let mut checked = 0;
    for (n, grid) in [(2usize, 2usize), (2, 4), (2, 8), (4, 4), (4, 8)] {
        let side = grid / n;
        let mut g = Graph::new();
        let base = uniform(&mut r, &[1, grid * grid, lanes]);
        let p = random_mixing(&mut g, &mut r, side * side, lanes);
        let x = g.constant(base.clone());
        let y0 = mmlp::ltm(&mut g, x, n, &p).map_err(|e| e.to_string())?;
        let y0 = g.value(y0).clone();
        let block_of = |tok: usize| (tok / grid / side, tok % grid / side);
        for tok in 0..grid * grid {
            let mut pert = base.clone();
            for l in 0..lanes {
                pert.data_mut()[tok * lanes + l] += 0.75;
            }
            let xp = g.constant(pert);
            let yp = mmlp::ltm(&mut g, xp, n, &p).map_err(|e| e.to_string())?;
            let yp = g.value(yp);
            for out_tok in 0..grid * grid {
                let same = yp.data()[out_tok * lanes..(out_tok + 1) * lanes]
                    .iter()
                    .zip(&y0.data()[out_tok * lanes..(out_tok + 1) * lanes])
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if block_of(out_tok) != block_of(tok) {
                    ensure(same, || format!("n={n} G={grid}: token {tok} leaked into token {out_tok}"))?;
                    checked += 1;
                } else if out_tok == tok {
                    ensure(!same, || format!("n={n} G={grid}: token {tok} did not affect itself"))?;
                }
            }
        }
    }
    Ok(format!("{checked} out-of-block (token, output) pairs bit-unchanged for n ∈ {{2,4}}, G ≤ 8"))
}

fn table_conformance() -> Outcome {
    let spec = ModelSpec::reference(Variant::MmUnet);
    let expect_channels = [[32, 16, 16], [64, 32, 32], [128, 64, 64], [256, 128, 128], [512, 256, 256]];
    ensure(spec.mmlp.len() == 5, || "expected five MMLP levels".into())?;
    for (l, cfg) in spec.mmlp.iter().enumerate() {
        let got: Vec<(usize, usize, usize)> =
            cfg.groups.iter().map(|g| (g.channels, g.block_count, g.patch_size)).collect();
        let want: Vec<(usize, usize, usize)> = (0..3)
            .map(|i| (expect_channels[l][i], REFERENCE_BLOCK_COUNTS[l][i], 4))
            .collect();
        ensure(got == want, || format!("level {}: {got:?} != {want:?}", l + 1))?;
        cfg.validate(spec.channels(l + 1), spec.resolution(l + 1))
            .map_err(|e| format!("level {}: {e}", l + 1))?;
        for g in &cfg.groups {
            let grid = g.grid(256 >> l).map_err(|e| e.to_string())?;
            ensure(grid % g.block_count == 0, || format!("level {}: {g:?} does not tile", l + 1))?;
        }
    }
    Ok("channel groups, n_i and s_i = 4 match at all five levels; all groups tile at input 256".into())
}

fn parameter_accounting() -> Outcome {
    let count = |v| count_params(&ModelSpec::reference(v)).map_err(|e| e.to_string());
    let (unet, mm, global) = (count(Variant::Unet)?, count(Variant::MmUnet)?, count(Variant::MmUnetGlobal)?);
    let spec = ModelSpec::reference(Variant::MmUnet);
    let mut closed: usize = 0;
    for (l, cfg) in spec.mmlp.iter().enumerate() {
        for g in &cfg.groups {
            closed += ltm_param_count(g, spec.resolution(l + 1), cfg.ratio).map_err(|e| e.to_string())?;
        }
    }
    ensure(mm.total - unet.total == closed, || format!("difference {} != closed form {closed}", mm.total - unet.total))?;
    let ratio = mm.mmlp_overhead as f64 / unet.total as f64;
    ensure(ratio < 0.025, || format!("overhead ratio {ratio:.4} >= 0.025"))?;
    ensure(global.total > mm.total, || format!("global {} <= local {}", global.total, mm.total))?;
    Ok(format!(
        "unet={} mm-unet={} (+{closed}, {:.2}%) mm-unet-global={}",
        unet.total,
        mm.total,
        100.0 * ratio,
        global.total
    ))
}

fn zero_weight_reduction() -> Outcome {
    let spec = ModelSpec::new(Variant::MmUnet, 16, 64, 4).map_err(|e| e.to_string())?;
    let mut mm = Model::<f32>::build(spec, 6).map_err(|e| e.to_string())?;
    for (name, t) in mm.params.iter_mut() {
        if name.contains(".mmlp.") && (name.contains(".w_") || name.contains(".b_")) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let unet_spec = ModelSpec::new(Variant::Unet, 16, 64, 4).map_err(|e| e.to_string())?;
    let mut unet = Model::<f32>::build(unet_spec, 6).map_err(|e| e.to_string())?;
    for (name, t) in unet.params.iter_mut() {
        *t = mm.params.get(name).ok_or("missing conv weight")?.clone();
    }
    let mut r = rng::stream(6, "acceptance/zero");
    let x = Tensor::<f32>::from_fn(&[2, 3, 64, 64], |_| r.random_range(0.0..1.0));
    let a = mm.predict(&x).map_err(|e| e.to_string())?;
    let b = unet.predict(&x).map_err(|e| e.to_string())?;
    ensure(a.bit_eq(&b), || "logits differ".into())?;
    Ok("zeroed-LTM MM-UNet logits bit-identical to weight-copied UNet (B0=16, 64×64)".into())
}

fn metric_oracle() -> Outcome {
    let mut r = rng::stream(7, "acceptance/metrics");
    for case in 0..200 {
        let side = r.random_range(1..=8);
        let k = r.random_range(1..=5);
        let pred: Vec<u8> = (0..side * side).map(|_| r.random_range(0..k) as u8).collect();
        let truth: Vec<u8> = (0..side * side).map(|_| r.random_range(0..k) as u8).collect();
        let mut c = Confusion::new(k);
        c.add(&pred, &truth).map_err(|e| e.to_string())?;
        let m = c.metrics();
        let mut ious = Vec::new();
        for cls in 0..k as u8 {
            let inter = pred.iter().zip(&truth).filter(|&(&p, &t)| p == cls && t == cls).count();
            let union = pred.iter().zip(&truth).filter(|&(&p, &t)| p == cls || t == cls).count();
            ious.push((union > 0).then(|| inter as f64 / union as f64));
        }
        let inc: Vec<f64> = ious.iter().flatten().copied().collect();
        let miou = inc.iter().sum::<f64>() / inc.len() as f64;
        let acc = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64;
        ensure(m.per_class_iou == ious && m.miou == miou && m.accuracy == acc, || format!("case {case} differs"))?;
    }
    let mut c = Confusion::new(2);
    c.add(&[0, 1, 1, 1], &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
    let m = c.metrics();
    ensure(m.per_class_iou == [Some(0.5), Some(2.0 / 3.0)], || format!("hand case IoU {:?}", m.per_class_iou))?;
    ensure((m.miou - 7.0 / 12.0).abs() < 1e-15, || format!("hand case mIoU {}", m.miou))?;
    Ok("200 random mask pairs match brute force exactly; hand case IoU = (1/2, 2/3), mIoU = 7/12".into())
}

fn schedule() -> Outcome {
    let cfg = TrainConfig::default();
    for e in 1..=120 {
        let want = match e {
            1..=100 => 0.015,
            101..=110 => 0.0015,
            _ => 0.00015,
        };
        let got = lr_at(e, &cfg).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-12 * want, || format!("epoch {e}: {got} != {want}"))?;
    }
    Ok("0.015 (1–100), 0.0015 (101–110), 0.00015 (111–120)".into())
}

fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

fn end_to_end() -> Outcome {
    const MAX_SECS: f64 = 15.0 * 60.0;
    let samples = gen_phantom(&PhantomSpec::new(500, 64, 1));
    let (train_set, val_set) = samples.split_at(400);

    let mut oracle = Confusion::new(4);
    for s in val_set {
        oracle.add(threshold_segment(&s.image).ids(), s.mask.ids()).map_err(|e| e.to_string())?;
    }
    let oracle = oracle.metrics();

    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        input_size: 64,
        seed: 1,
        ..TrainConfig::default()
    };
    let run = || -> Run {
        let spec = ModelSpec::new(Variant::MmUnet, 16, 64, 4).map_err(|e| e.to_string())?;
        let mut model = Model::<f32>::build(spec, cfg.seed).map_err(|e| e.to_string())?;
        let start = Instant::now();
        let mut lines = Vec::new();
        train(&mut model, train_set, val_set, &cfg, |row| {
            eprintln!("    {row}");
            lines.push(row.to_string());
        })
        .map_err(|e| e.to_string())?;
        Ok((lines, start.elapsed().as_secs_f64(), model))
    };
    let (log, secs, _) = run()?;
    let (rerun, rerun_secs, _) = run()?;
    let final_miou: f64 = log
        .last()
        .and_then(|l| l.rsplit("miou=").next())
        .and_then(|v| v.parse().ok())
        .ok_or("missing log")?;
    let rss = peak_rss_mb().ok_or("cannot read VmHWM from /proc/self/status")?;
    let summary = format!(
        "final val mIoU {final_miou:.4} vs threshold oracle {:.4}; runs {secs:.0}s / {rerun_secs:.0}s; peak RSS {rss:.0} MB",
        oracle.miou
    );
    ensure(final_miou >= 0.85, || format!("{summary}: below 0.85"))?;
    ensure(final_miou > oracle.miou, || format!("{summary}: does not beat the oracle"))?;
    ensure(log == rerun, || format!("{summary}: rerun log differs"))?;
    ensure(secs < MAX_SECS && rerun_secs < MAX_SECS, || format!("{summary}: over 15 min"))?;
    ensure(rss < 2048.0, || format!("{summary}: over 2 GB"))?;
    Ok(format!("{summary}; rerun log byte-identical"))
}

fn serialization() -> Outcome {
    let spec = ModelSpec::new(Variant::MmUnet, 16, 64, 4).map_err(|e| e.to_string())?;
    let model = Model::<f32>::build(spec, 10).map_err(|e| e.to_string())?;
    let bytes = encode_checkpoint(&model.params).map_err(|e| e.to_string())?;
    let back = decode_checkpoint::<f32>(&bytes).map_err(|e| e.to_string())?;
    ensure(back.len() == model.params.len(), || "tensor count differs".into())?;
    for (name, t) in model.params.iter() {
        ensure(back.get(name).is_some_and(|b| b.bit_eq(t)), || format!("{name} differs"))?;
    }
    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    ensure(decode_checkpoint::<f32>(&corrupt).is_err(), || "corrupted magic accepted".into())?;

    let mut r = rng::stream(10, "acceptance/pnm");
    let img = Tensor::<f32>::from_fn(&[3, 64, 64], |_| r.random_range(0.0..=1.0));
    let ppm = encode_ppm(&img).map_err(|e| e.to_string())?;
    ensure(ppm.starts_with(b"P6 64 64 255\n") && ppm.len() == 13 + 12288, || "PPM layout".into())?;
    let img_back = decode_ppm(&ppm).map_err(|e| e.to_string())?;
    let err = img_back.max_abs_diff(&img).unwrap_or(f32::INFINITY);
    ensure(err <= 0.5 / 255.0 + 1e-6, || format!("PPM error {err}"))?;
    let mask = Mask::new(64, (0..4096).map(|_| r.random_range(0..4)).collect()).map_err(|e| e.to_string())?;
    ensure(decode_pgm(&encode_pgm(&mask)).map_err(|e| e.to_string())? == mask, || "PGM differs".into())?;
    Ok(format!(
        "checkpoint ({} tensors) bit-exact, PPM within {err:.2e} ≤ 1/510, PGM exact",
        back.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("LTM/global equivalence", ltm_global_equivalence),
        ("locality", locality),
        ("block schedule conformance", table_conformance),
        ("parameter accounting", parameter_accounting),
        ("zero-weight reduction", zero_weight_reduction),
        ("metric oracle", metric_oracle),
        ("schedule", schedule),
        ("end-to-end training", end_to_end),
        ("serialization", serialization),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if filter.as_deref().is_some_and(|f| f != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
