use mmunet::gradcheck::relative_error;
use mmunet::mmlp::ltm_param_count;
use mmunet::models::{conv_param_count, count_params, Model, ModelSpec, Variant, LEVELS};
use mmunet::rng;
use mmunet::{Graph, Tensor};
use rand::Rng;

fn random_tensor<T: mmunet::Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = rng::stream(seed, "test/input");
    Tensor::from_fn(shape, |_| T::from_f64(r.random_range(-1.0..1.0)))
}

#[test]
fn overhead_is_sum_of_ltm_counts() {
    let unet = count_params(&ModelSpec::reference(Variant::Unet)).unwrap();
    let spec = ModelSpec::reference(Variant::MmUnet);
    let mm = count_params(&spec).unwrap();
    let mut closed_form = 0;
    for (l, cfg) in spec.mmlp.iter().enumerate() {
        for g in &cfg.groups {
            closed_form += ltm_param_count(g, spec.resolution(l + 1), cfg.ratio).unwrap();
        }
    }
    assert_eq!(mm.total - unet.total, closed_form);
    assert_eq!(mm.mmlp_overhead, closed_form);
    assert!((mm.mmlp_overhead as f64) / (unet.total as f64) < 0.025);
}

#[test]
fn global_has_more_parameters_than_local() {
    let mm = count_params(&ModelSpec::reference(Variant::MmUnet)).unwrap();
    let global = count_params(&ModelSpec::reference(Variant::MmUnetGlobal)).unwrap();
    assert!(global.total > mm.total);
}

#[test]
fn unet_count_matches_closed_form() {
    let spec = ModelSpec::reference(Variant::Unet);
    let mut expect = 0;
    let mut in_ch = 3;
    for l in 1..=LEVELS {
        let c = spec.channels(l);
        expect += conv_param_count(in_ch, c, 3) + conv_param_count(c, c, 3);
        in_ch = c;
    }
    for l in 1..LEVELS {
        let c = spec.channels(l);
        expect += conv_param_count(c + 2 * c, c, 3) + conv_param_count(c, c, 3);
    }
    expect += conv_param_count(64, 4, 1);
    assert_eq!(count_params(&spec).unwrap().total, expect);
}

#[test]
fn halving_width_quarters_conv_weights() {
    let full = count_params(&ModelSpec::new(Variant::Unet, 64, 256, 4).unwrap()).unwrap();
    let half = count_params(&ModelSpec::new(Variant::Unet, 32, 256, 4).unwrap()).unwrap();
    for ((name, a), (_, b)) in full.breakdown.iter().zip(&half.breakdown) {
        if name == "head" || name == "enc1.conv1" {
            continue;
        }
        // weights scale by exactly 4, biases by 2
        let level: usize = name[3..4].parse().unwrap();
        let c_out = 64 << (level - 1);
        assert_eq!(a - c_out, 4 * (b - c_out / 2), "{name}");
    }
}

#[test]
fn allocated_params_match_count() {
    for v in [Variant::Unet, Variant::MmUnet, Variant::MmUnetGlobal] {
        let spec = ModelSpec::new(v, 8, 32, 4).unwrap();
        let model = Model::<f32>::build(spec.clone(), 3).unwrap();
        assert_eq!(model.params.numel(), count_params(&spec).unwrap().total);
    }
}

#[test]
fn output_shape_and_determinism() {
    for v in [Variant::Unet, Variant::MmUnet, Variant::MmUnetGlobal] {
        let spec = ModelSpec::new(v, 8, 32, 3).unwrap();
        let model = Model::<f32>::build(spec, 11).unwrap();
        let x = random_tensor::<f32>(&[2, 3, 32, 32], 5);
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        assert_eq!(a.shape(), &[2, 3, 32, 32]);
        assert!(a.bit_eq(&b));
        let z = model.predict(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert!(z.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn wrong_input_size_is_shape_error() {
    let model = Model::<f32>::build(ModelSpec::new(Variant::Unet, 8, 32, 4).unwrap(), 0).unwrap();
    let err = model.predict(&Tensor::zeros(&[1, 3, 64, 64])).unwrap_err();
    assert!(matches!(err, mmunet::Error::Shape(_)));
}

#[test]
fn zeroed_ltm_reduces_to_unet() {
    let mm_spec = ModelSpec::new(Variant::MmUnet, 8, 32, 4).unwrap();
    let mut mm = Model::<f32>::build(mm_spec, 21).unwrap();
    for (name, t) in mm.params.iter_mut() {
        if name.contains(".mmlp.") && (name.contains(".w_") || name.contains(".b_")) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut unet = Model::<f32>::build(ModelSpec::new(Variant::Unet, 8, 32, 4).unwrap(), 21).unwrap();
    for (name, t) in unet.params.iter_mut() {
        *t = mm.params.get(name).unwrap().clone();
    }
    let x = random_tensor::<f32>(&[2, 3, 32, 32], 8);
    assert!(mm.predict(&x).unwrap().bit_eq(&unet.predict(&x).unwrap()));
}

#[test]
fn same_seed_shares_conv_initialization() {
    let mm = Model::<f32>::build(ModelSpec::new(Variant::MmUnet, 8, 32, 4).unwrap(), 4).unwrap();
    let unet = Model::<f32>::build(ModelSpec::new(Variant::Unet, 8, 32, 4).unwrap(), 4).unwrap();
    for (name, t) in unet.params.iter() {
        assert!(t.bit_eq(mm.params.get(name).unwrap()), "{name}");
    }
}

#[test]
fn ltm_weight_gradient_matches_finite_differences() {
    let spec = ModelSpec::new(Variant::MmUnet, 8, 32, 2).unwrap();
    let mut model = Model::<f64>::build(spec, 13).unwrap();
    let target = "enc3.mmlp.g0.w_in";
    let x = random_tensor::<f64>(&[1, 3, 32, 32], 17);

    let mean_logit = |m: &Model<f64>| -> f64 {
        let out = m.predict(&x).unwrap();
        out.data().iter().sum::<f64>() / out.numel() as f64
    };

    let mut g = Graph::new();
    let input = g.constant(x.clone());
    let (logits, bound) = model.forward(&mut g, input, true).unwrap();
    let loss = g.mean(logits);
    g.backward(loss).unwrap();
    let analytic = g.grad(bound.var(target).unwrap()).unwrap().clone();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..analytic.numel() {
        let orig = model.params.get(target).unwrap().data()[i];
        model.params.get_mut(target).unwrap().data_mut()[i] = orig + h;
        let plus = mean_logit(&model);
        model.params.get_mut(target).unwrap().data_mut()[i] = orig - h;
        let minus = mean_logit(&model);
        model.params.get_mut(target).unwrap().data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    assert!(analytic.data().iter().any(|v| v.abs() > 1e-9));
    assert!(worst < 1e-3, "max rel err {worst}");
}
