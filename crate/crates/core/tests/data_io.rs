use mmunet::data::{
    decode_checkpoint, decode_pgm, decode_ppm, encode_checkpoint, encode_pgm, encode_ppm, gen_phantom, load_checkpoint,
    load_model, read_dataset, save_checkpoint, split, write_dataset, Mask, PhantomSpec,
};
use mmunet::models::{count_params, Model, ModelSpec, Variant};
use mmunet::{rng, Error, Tensor};
use rand::Rng;

#[test]
fn ppm_round_trip_within_quantization() {
    let mut r = rng::stream(1, "ppm");
    let img = Tensor::<f32>::from_fn(&[3, 5, 7], |_| r.random_range(0.0..=1.0));
    let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
    assert_eq!(back.shape(), &[3, 5, 7]);
    assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-6);
    // Quantized values survive a second trip exactly.
    assert!(decode_ppm(&encode_ppm(&back).unwrap()).unwrap().bit_eq(&back));
}

#[test]
fn pgm_round_trip_is_exact() {
    let mut r = rng::stream(2, "pgm");
    let mask = Mask::new(9, (0..81).map(|_| r.random_range(0..4)).collect()).unwrap();
    assert_eq!(decode_pgm(&encode_pgm(&mask)).unwrap(), mask);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec::new(3, 16, 4);
    let samples = gen_phantom(&spec);
    write_dataset(dir.path(), &samples, Some(&spec)).unwrap();
    let (back, manifest) = read_dataset(dir.path()).unwrap();
    assert_eq!(manifest.spec, Some(spec));
    assert_eq!(manifest.pairs[2], ("img_00002.ppm".to_string(), "msk_00002.pgm".to_string()));
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.mask, b.mask);
        assert!(a.image.max_abs_diff(&b.image).unwrap() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn split_is_disjoint_and_seeded() {
    let (a, b, c) = split((0..500).collect::<Vec<_>>(), 1).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (300, 100, 100));
    let mut all: Vec<_> = a.iter().chain(&b).chain(&c).copied().collect();
    all.sort();
    assert_eq!(all, (0..500).collect::<Vec<_>>());
    assert_ne!(split((0..500).collect::<Vec<_>>(), 2).unwrap().0, a);
}

#[test]
fn checkpoint_file_round_trip_and_spec_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mmun");
    let spec = ModelSpec::new(Variant::MmUnet, 8, 32, 4).unwrap();
    let model = Model::<f32>::build(spec.clone(), 7).unwrap();
    save_checkpoint(&path, &model.params).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    for (name, t) in model.params.iter() {
        assert!(t.bit_eq(back.get(name).unwrap()), "{name}");
    }
    assert!(load_model::<f32>(&path, spec).is_ok());
    let other = ModelSpec::new(Variant::MmUnetGlobal, 8, 32, 4).unwrap();
    assert!(matches!(load_model::<f32>(&path, other), Err(Error::Format { .. })));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[1] ^= 0xff;
    assert!(matches!(decode_checkpoint::<f32>(&bytes), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn default_checkpoint_holds_exactly_the_counted_scalars() {
    let spec = ModelSpec::reference(Variant::MmUnet);
    let model = Model::<f32>::build(spec.clone(), 0).unwrap();
    let bytes = encode_checkpoint(&model.params).unwrap();
    drop(model);
    let back = decode_checkpoint::<f32>(&bytes).unwrap();
    let stored: usize = back.iter().map(|(_, t)| t.numel()).sum();
    assert_eq!(stored, count_params(&spec).unwrap().total);
}
