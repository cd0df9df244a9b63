//! Dataset directories and the train/val/test split.
//!
//! A directory holds `img_%05d.ppm` / `msk_%05d.pgm` pairs and a
//! `manifest.txt` with the generator settings followed by one
//! `<image> <mask>` line per sample.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{read_image, read_mask, write_image, write_mask, PhantomSpec, Sample};
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Generator settings, when the set was synthesized.
    pub spec: Option<PhantomSpec>,
    pub pairs: Vec<(String, String)>,
}

pub fn write_dataset(dir: &Path, samples: &[Sample], spec: Option<&PhantomSpec>) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut text = String::from("# mmunet dataset\n");
    if let Some(s) = spec {
        let _ = writeln!(
            text,
            "count={}\nsize={}\nseed={}\nnoise_sigma={}\nnum_classes={}",
            s.count,
            s.size,
            s.seed,
            s.noise_sigma,
            super::NUM_CLASSES
        );
    }
    let mut pairs = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (img, msk) = (format!("img_{i:05}.ppm"), format!("msk_{i:05}.pgm"));
        write_image(&dir.join(&img), &s.image)?;
        write_mask(&dir.join(&msk), &s.mask)?;
        let _ = writeln!(text, "{img} {msk}");
        pairs.push((img, msk));
    }
    fs::write(dir.join(MANIFEST), text)?;
    Ok(Manifest {
        spec: spec.cloned(),
        pairs,
    })
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut pairs = Vec::new();
    let mut spec = PhantomSpec::new(0, 0, 0);
    let mut has_spec = false;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Parse(format!("{MANIFEST} line {}: {what}", n + 1));
        if let Some((key, value)) = line.split_once('=') {
            has_spec = true;
            let num = || value.trim().parse::<u64>().map_err(|_| bad("bad integer"));
            match key.trim() {
                "count" => spec.count = num()? as usize,
                "size" => spec.size = num()? as usize,
                "seed" => spec.seed = num()?,
                "noise_sigma" => spec.noise_sigma = value.trim().parse().map_err(|_| bad("bad real"))?,
                "num_classes" => {}
                other => return Err(bad(&format!("unknown key {other}"))),
            }
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(i), Some(m), None) => pairs.push((i.to_string(), m.to_string())),
            _ => return Err(bad("expected `<image> <mask>`")),
        }
    }
    Ok(Manifest {
        spec: has_spec.then_some(spec),
        pairs,
    })
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<Sample>, Manifest)> {
    let manifest = parse_manifest(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let mut samples = Vec::with_capacity(manifest.pairs.len());
    for (img, msk) in &manifest.pairs {
        let image = read_image(&dir.join(img))?;
        let mask = read_mask(&dir.join(msk))?;
        samples.push(Sample::new(image, mask).map_err(|e| Error::Data(format!("{img}: {e}")))?);
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", dir.join(MANIFEST).display())));
    }
    Ok((samples, manifest))
}

/// Seeded shuffle, then contiguous 6:2:2 partition into (train, val, test).
pub fn split<T>(samples: Vec<T>, seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let n = samples.len();
    if n < 10 {
        return Err(Error::Usage(format!("need at least 10 samples to split, got {n}")));
    }
    let mut slots: Vec<Option<T>> = samples.into_iter().map(Some).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let mut shuffled = order.into_iter().map(|i| slots[i].take().expect("permutation"));
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    let train = shuffled.by_ref().take(n_train).collect();
    let val = shuffled.by_ref().take(n_val).collect();
    let test = shuffled.collect();
    Ok((train, val, test))
}
