use super::*;
use crate::autodiff::gradcheck::{check_gradients, COMPOSITION_TOLERANCE, DEFAULT_EPSILON};

fn tiny_config() -> UNetConfig {
    UNetConfig {
        input_dims: [16, 8, 8],
        base_width: 2,
        depth: 2,
        se_reduction: 2,
        dropout_rate: 0.1,
        head_hidden: 4,
        seed: 7,
        ..UNetConfig::default()
    }
}

#[test]
fn config_validation() {
    assert!(tiny_config().validate().is_ok());
    let mut bad = tiny_config();
    bad.input_dims = [10, 8, 8]; // 10 not divisible by 4
    assert!(bad.validate().is_err());
    let mut bad = tiny_config();
    bad.kernel_size = 4;
    assert!(bad.validate().is_err());
}

#[test]
fn bottleneck_shape_arithmetic() {
    // The reference resolution and depth 6: bottleneck 4 x 1 x 1.
    let cfg = UNetConfig {
        input_dims: [256, 64, 64],
        depth: 6,
        ..UNetConfig::default()
    };
    assert!(cfg.validate().is_ok());
    assert_eq!(cfg.spatial(6), [4, 1, 1]);

    let tiny = tiny_config();
    assert_eq!(tiny.spatial(2), [4, 2, 2]);
}

#[test]
fn parameter_count_matches_store() {
    for predict_fields in [false, true] {
        let cfg = UNetConfig { predict_fields, ..tiny_config() };
        let model = UNetModel::<f32>::new(cfg.clone()).unwrap();
        assert_eq!(model.stored_parameter_count(), parameter_count(&cfg));
    }
}

#[test]
fn dense_layer_count_formula() {
    // single dense layer K=4, M=2 with bias: 4*2 + 2 = 10
    let (k, m) = (4usize, 2usize);
    assert_eq!(k * m + m, 10);
}

#[test]
fn width_sweep_reaches_reference_count_band() {
    // The reference c_d-only model reports ~23M parameters; exact widths are
    // unpublished. Sweep the base width at depth 6 until the count lands in
    // [20M, 26M] and report the width (informational).
    let mut found = None;
    for base in 8..64 {
        let cfg = UNetConfig {
            input_dims: [256, 64, 64],
            base_width: base,
            max_channels: 4096,
            depth: 6,
            head_hidden: 64,
            predict_fields: false,
            ..UNetConfig::default()
        };
        let count = parameter_count(&cfg);
        if (20_000_000..=26_000_000).contains(&count) {
            found = Some((base, count));
            break;
        }
    }
    let (base, count) = found.expect("some width must land in the 20M..26M band");
    println!("base width {base} gives {count} trainable parameters at depth 6");
}

#[test]
fn forward_shapes_and_determinism() {
    let mut model = UNetModel::<f32>::new(tiny_config()).unwrap();
    let input_t = Tensor::from_fn(&[3, 1, 16, 8, 8], |i| (i % 23) as f32 * 0.05 - 0.5);

    let mut tape = Tape::new();
    let input = tape.constant(input_t.clone());
    let ids = model.bind(&mut tape, false);
    let out = model.forward(&mut tape, input, &ids, BnMode::Eval, 0).unwrap();
    assert_eq!(tape.value(out.cd).shape(), &[3, 1]);
    assert!(out.fields.is_none());
    assert!(tape.value(out.cd).data().iter().all(|v| v.is_finite()));

    // eval idempotence: bitwise identical outputs
    let a = model.predict_cd(&input_t).unwrap();
    let b = model.predict_cd(&input_t).unwrap();
    let bits_a: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
    let bits_b: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
    assert_eq!(bits_a, bits_b);
}

#[test]
fn batch_permutation_permutes_outputs() {
    let model = UNetModel::<f32>::new(tiny_config()).unwrap();
    let a = Tensor::from_fn(&[1, 1, 16, 8, 8], |i| ((i * 13) % 31) as f32 * 0.03);
    let b = Tensor::from_fn(&[1, 1, 16, 8, 8], |i| ((i * 7) % 29) as f32 * -0.04);
    let ab = {
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        Tensor::from_vec(vec![2, 1, 16, 8, 8], data).unwrap()
    };
    let ba = {
        let mut data = b.data().to_vec();
        data.extend_from_slice(a.data());
        Tensor::from_vec(vec![2, 1, 16, 8, 8], data).unwrap()
    };
    let y_ab = model.predict_cd(&ab).unwrap();
    let y_ba = model.predict_cd(&ba).unwrap();
    assert_eq!(y_ab[0].to_bits(), y_ba[1].to_bits());
    assert_eq!(y_ab[1].to_bits(), y_ba[0].to_bits());
}

#[test]
fn se_block_engineered_identity_and_bound() {
    // Force both gates to ~1: fc2 weights 0 with bias 20, spatial conv
    // weights 0 with bias 20. sigmoid(20) = 1 - 2e-9.
    let cfg = tiny_config();
    let mut model = UNetModel::<f64>::new(cfg).unwrap();
    for suffix in ["fc2.w", "spatial.w"] {
        let p = model.parameter_mut(&format!("enc1.se.{suffix}")).unwrap();
        for v in p.data_mut() {
            *v = 0.0;
        }
    }
    for suffix in ["fc2.b", "spatial.b"] {
        let p = model.parameter_mut(&format!("enc1.se.{suffix}")).unwrap();
        for v in p.data_mut() {
            *v = 20.0;
        }
    }
    let mut tape = Tape::new();
    let x_t = Tensor::from_fn(&[2, 2, 4, 4, 4], |i| (i as f64 * 0.711).sin());
    let x = tape.constant(x_t.clone());
    let ids = model.bind(&mut tape, false);
    let pid = |name: &str| model.param_slot(name).unwrap();
    let y = se_block(&mut tape, x, &pid, &ids, "enc1.se").unwrap();
    for (a, b) in x_t.data().iter().zip(tape.value(y).data()) {
        assert!((a - b).abs() < 1e-7, "identity violated: {a} vs {b}");
    }

    // With sigmoid gates both <= 1, |output| <= |input| elementwise.
    let model2 = UNetModel::<f64>::new(tiny_config()).unwrap();
    let mut tape2 = Tape::new();
    let x2 = tape2.constant(x_t.clone());
    let ids2 = model2.bind(&mut tape2, false);
    let pid2 = |name: &str| model2.param_slot(name).unwrap();
    let y2 = se_block(&mut tape2, x2, &pid2, &ids2, "enc1.se").unwrap();
    for (a, b) in x_t.data().iter().zip(tape2.value(y2).data()) {
        assert!(b.abs() <= a.abs() + 1e-12, "gate amplified {a} -> {b}");
    }
}

#[test]
fn head_gradients_reach_every_parameter() {
    let mut model = UNetModel::<f64>::new(tiny_config()).unwrap();
    let mut tape = Tape::new();
    let input = tape.constant(Tensor::from_fn(&[4, 1, 16, 8, 8], |i| ((i * 11) % 19) as f64 * 0.07 - 0.6));
    let ids = model.bind(&mut tape, true);
    let out = model.forward(&mut tape, input, &ids, BnMode::Train, 3).unwrap();
    assert_eq!(tape.value(out.cd).shape(), &[4, 1]);
    let sq = tape.mul(out.cd, out.cd).unwrap();
    let loss = tape.reduce_sum(sq, None).unwrap();
    tape.backward(loss).unwrap();
    for name in ["head.fc1.w", "head.fc1.b", "head.fc2.w", "head.fc2.b", "head.bn.gamma", "head.bn.beta"] {
        let slot = model.param_slot(name).unwrap();
        let g = tape.grad(ids[slot]).expect("head parameter must receive gradient");
        assert!(
            g.data().iter().any(|&v| v != 0.0),
            "gradient to {name} is identically zero"
        );
    }
}

#[test]
fn velocity_decoders_output_full_resolution() {
    let cfg = UNetConfig {
        input_dims: [64, 16, 16],
        base_width: 2,
        depth: 4,
        se_reduction: 2,
        head_hidden: 4,
        predict_fields: true,
        seed: 3,
        ..UNetConfig::default()
    };
    assert_eq!(cfg.spatial(4), [4, 1, 1]);
    let mut model = UNetModel::<f32>::new(cfg).unwrap();
    let mut tape = Tape::new();
    let input = tape.constant(Tensor::from_fn(&[1, 1, 64, 16, 16], |i| (i % 13) as f32 * 0.1));
    let ids = model.bind(&mut tape, false);
    let out = model.forward(&mut tape, input, &ids, BnMode::Eval, 0).unwrap();
    let fields = out.fields.expect("fields requested");
    assert_eq!(tape.value(fields).shape(), &[1, 3, 64, 16, 16]);
    assert!(tape.value(fields).data().iter().all(|v| v.is_finite()));
}

#[test]
fn skip_connections_are_live() {
    let cfg = UNetConfig {
        predict_fields: true,
        ..tiny_config()
    };
    let model = UNetModel::<f32>::new(cfg).unwrap();
    let input_t = Tensor::from_fn(&[1, 1, 16, 8, 8], |i| ((i * 3) % 11) as f32 * 0.09 - 0.4);

    let mut tape = Tape::new();
    let input = tape.constant(input_t.clone());
    let ids = model.bind(&mut tape, false);
    let normal = model.forward_eval(&mut tape, input, &ids).unwrap();
    let normal_fields = tape.value(normal.fields.unwrap()).clone();

    let mut tape2 = Tape::new();
    let input2 = tape2.constant(input_t);
    let ids2 = model.bind(&mut tape2, false);
    let ablated = model.forward_eval_zero_skips(&mut tape2, input2, &ids2).unwrap();
    let ablated_fields = tape2.value(ablated.fields.unwrap()).clone();

    assert_ne!(
        normal_fields.data(),
        ablated_fields.data(),
        "zeroing skip connections must change decoder output"
    );
}

#[test]
fn no_field_allocation_without_decoders() {
    let mut model = UNetModel::<f32>::new(tiny_config()).unwrap();
    let mut tape = Tape::new();
    let input = tape.constant(Tensor::zeros(&[1, 1, 16, 8, 8]));
    let ids = model.bind(&mut tape, false);
    let out = model.forward(&mut tape, input, &ids, BnMode::Eval, 0).unwrap();
    assert!(out.fields.is_none());
    // Memory contract: with decoders off, the largest tape tensor is the
    // first encoder conv output (4 channels at full resolution here); no
    // decoder-sized buffer may appear.
    let enc1_conv_out = 4 * 16 * 8 * 8;
    assert_eq!(
        tape.max_value_elements(),
        enc1_conv_out,
        "largest tensor should be the enc1 conv activation"
    );
    let (_, fields) = model
        .predict_with_fields(&Tensor::zeros(&[1, 1, 16, 8, 8]))
        .unwrap();
    assert!(fields.is_none());
}

#[test]
fn dimension_mismatch_names_axis() {
    let mut model = UNetModel::<f32>::new(tiny_config()).unwrap();
    let mut tape = Tape::new();
    let input = tape.constant(Tensor::zeros(&[1, 1, 16, 8, 4])); // z wrong
    let ids = model.bind(&mut tape, false);
    let err = model.forward(&mut tape, input, &ids, BnMode::Eval, 0).unwrap_err();
    match err {
        UNetError::Ad(AdError::ShapeMismatch { axis, .. }) => assert_eq!(axis, 4),
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn tiny_full_model_gradient_check() {
    // grid 16x8x8, depth 2, width 2, f64: the whole-network composition must
    // match central differences within 1e-3.
    let cfg = UNetConfig {
        predict_fields: true,
        dropout_rate: 0.2,
        ..tiny_config()
    };
    let reference = UNetModel::<f64>::new(cfg.clone()).unwrap();
    let mut leaves: Vec<Tensor<f64>> = reference.parameters().map(|(_, t)| t.clone()).collect();
    // Continuous random input: patterned data would make pooling windows tie
    // exactly and finite differences would disagree at the tie flips.
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    leaves.push(Tensor::from_fn(&[2, 1, 16, 8, 8], |_| {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 1.6 - 0.8
    }));

    let report = check_gradients(
        "tiny unet",
        &leaves,
        |tape, ids| {
            let mut model = reference.clone();
            let (param_ids, input) = (&ids[..ids.len() - 1], ids[ids.len() - 1]);
            let out = model
                .forward(tape, input, param_ids, BnMode::Train, 41)
                .map_err(|e| match e {
                    UNetError::Ad(e) => e,
                    UNetError::Config(c) => AdError::Invalid { op: "unet", detail: c },
                })?;
            let cd_sq = tape.mul(out.cd, out.cd)?;
            let mut loss = tape.reduce_sum(cd_sq, None)?;
            if let Some(fields) = out.fields {
                let w = Tensor::from_fn(tape.value(fields).shape(), |i| 0.5 + ((i % 7) as f64) * 0.1);
                let f_sq = tape.mul(fields, fields)?;
                let f_loss = tape.reduce_sum(f_sq, Some(w))?;
                let f_scaled = tape.scale(f_loss, 0.1);
                loss = tape.add(loss, f_scaled)?;
            }
            Ok(loss)
        },
        DEFAULT_EPSILON,
        COMPOSITION_TOLERANCE,
    )
    .unwrap();
    let leaf_names: Vec<String> = reference
        .parameters()
        .map(|(n, _)| n.to_string())
        .chain(std::iter::once("input".to_string()))
        .collect();
    assert!(
        report.passed(),
        "tiny unet gradcheck: max rel err {} over {} params; worst at {:?} ({:?})",
        report.max_rel_err,
        report.checked_parameters,
        report.worst.map(|(li, ei, a, fd)| (leaf_names[li].clone(), ei, a, fd)),
        report.worst
    );
}
