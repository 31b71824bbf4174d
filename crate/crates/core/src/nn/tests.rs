use super::*;
use crate::data::{SplitAssignment, SplitManifest};
use crate::error::Error;
use crate::seeded_rng;
use crate::tensor::tests::gradcheck;
use crate::tensor::{Tape, Tensor};

fn image(n: usize, size: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[n, 1, size, size], 0.0, 1.0, &mut seeded_rng(seed))
}

#[test]
fn unet_preserves_shape() {
    for depth in 1..=3 {
        let net = UNetDenoiser::new(UNetConfig { depth, base_channels: 4 }, 1).unwrap();
        let x = image(2, 16, 0);
        assert_eq!(net.denoise(&x).unwrap().shape(), &[2, 1, 16, 16]);
    }
}

#[test]
fn unet_rejects_bad_inputs() {
    let net = UNetDenoiser::new(UNetConfig { depth: 3, base_channels: 4 }, 1).unwrap();
    assert!(net.denoise(&image(1, 12, 0)).is_err());
    assert!(net.denoise(&Tensor::zeros(&[1, 2, 16, 16])).is_err());
    assert!(UNetDenoiser::new(UNetConfig { depth: 0, base_channels: 4 }, 1).is_err());
}

#[test]
fn unet_init_is_seeded() {
    let cfg = UNetConfig { depth: 2, base_channels: 4 };
    let a = UNetDenoiser::new(cfg, 7).unwrap();
    let b = UNetDenoiser::new(cfg, 7).unwrap();
    let c = UNetDenoiser::new(cfg, 8).unwrap();
    assert_eq!(a.params().checksum(), b.params().checksum());
    assert_ne!(a.params().checksum(), c.params().checksum());
    assert_eq!(a.params().architecture_hash(), c.params().architecture_hash());
}

#[test]
fn unet_parameter_gradients_match_finite_differences() {
    let net = UNetDenoiser::new(UNetConfig { depth: 1, base_channels: 2 }, 3).unwrap();
    let x = image(1, 4, 1);
    let y = image(1, 4, 2);
    let inputs: Vec<Tensor> = net.params().iter().map(|p| p.value.clone()).collect();
    let err = gradcheck(&inputs, &|t, v| {
        let xv = t.constant(x.clone());
        let yv = t.constant(y.clone());
        let out = net.forward(t, v, xv)?;
        t.mse_mean(out, yv)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn encoder_tap_shapes() {
    let enc = VggEncoder::new(0);
    assert_eq!(enc.tap_names().len(), 16);
    assert_eq!(enc.tap_shape(SHALLOW_TAP, &[2, 1, 32, 32]).unwrap(), [2, 32, 8, 8]);
    assert_eq!(enc.tap_shape(DEEP_TAP, &[2, 1, 32, 32]).unwrap(), [2, 64, 2, 2]);
    assert_eq!(enc.tap_shape("block1_conv1", &[1, 1, 5, 7]).unwrap(), [1, 8, 5, 7]);
    assert!(enc.tap_shape(DEEP_TAP, &[1, 1, 24, 24]).is_err());
    let f = enc.extract_features(SHALLOW_TAP, &image(1, 16, 3)).unwrap();
    assert_eq!(f.shape(), &[1, 32, 4, 4]);
    assert!(f.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn unknown_tap_lists_registered_names() {
    let enc = VggEncoder::new(0);
    match enc.extract_features("block9_conv1", &image(1, 16, 0)) {
        Err(Error::UnknownTap { tap, registered }) => {
            assert_eq!(tap, "block9_conv1");
            assert!(registered.iter().any(|t| t == SHALLOW_TAP));
            assert!(registered.iter().any(|t| t == DEEP_TAP));
        }
        other => panic!("expected an unknown-tap error, got {other:?}"),
    }
}

#[test]
fn encoder_scales_inputs_before_the_first_conv() {
    let enc = VggEncoder::new(2);
    let x = image(1, 8, 4);
    let got = enc.extract_features("block1_conv1", &x).unwrap();
    let mut tape = Tape::new();
    let bound = enc.params().bind(&mut tape, false);
    let xs = tape.constant(x.map(|v| v * INPUT_SCALE));
    let y = tape.conv2d(xs, bound[0], bound[1], 1, 1).unwrap();
    let y = tape.relu(y).unwrap();
    assert_eq!(tape.value(y), &got);
}

#[test]
fn encoder_checkpoint_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.pcal");
    let enc = VggEncoder::new(4);
    enc.save(&path).unwrap();
    let back = VggEncoder::load(&path).unwrap();
    assert_eq!(back.params().checksum(), enc.params().checksum());
    assert_eq!(EncoderSidecar::read(&path).unwrap(), None);
    let side = EncoderSidecar {
        architecture_hash: enc.params().architecture_hash(),
        context: Context::Domain,
        seed: 4,
        epochs: 1,
        summary: serde_json::json!({}),
    };
    side.write(&path).unwrap();
    assert_eq!(EncoderSidecar::path_for(&path), dir.path().join("enc.pcal.json"));
    assert_eq!(EncoderSidecar::read(&path).unwrap(), Some(side));

    let cfg = EncoderConfig { context: Context::Domain, tap: "nope".into(), checkpoint: path };
    assert!(matches!(cfg.load(), Err(Error::UnknownTap { .. })));
}

#[test]
fn context_parsing() {
    assert_eq!("generic".parse::<Context>().unwrap(), Context::Generic);
    assert_eq!("domain".parse::<Context>().unwrap(), Context::Domain);
    assert!("imagenet".parse::<Context>().is_err());
}

#[test]
fn textures_are_balanced_and_seeded() {
    let a = texture_dataset(5, 16, 1);
    assert_eq!(a.len(), 20);
    for class in TextureClass::ALL {
        assert_eq!(a.iter().filter(|s| s.class == class).count(), 5);
    }
    for s in &a {
        assert_eq!(s.image.shape(), &[1, 1, 16, 16]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let b = texture_dataset(5, 16, 1);
    assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image));
}

#[test]
fn generic_pretraining_rejects_unbalanced_classes() {
    let mut enc = VggEncoder::new(0);
    let mut train = texture_dataset(2, 16, 0);
    train.pop();
    let opts = PretrainOptions { epochs: 1, ..Default::default() };
    assert!(pretrain_generic(&mut enc, &train, &[], &opts).is_err());
}

#[test]
fn generic_pretraining_runs_and_reports() {
    let mut enc = VggEncoder::new(0);
    let before = enc.params().checksum();
    let train = texture_dataset(4, 16, 0);
    let held = texture_dataset(2, 16, 1);
    let opts = PretrainOptions { epochs: 1, batch_size: 8, ..Default::default() };
    let r = pretrain_generic(&mut enc, &train, &held, &opts).unwrap();
    assert_eq!(r.steps, 2);
    assert_eq!(r.chance_accuracy, 0.25);
    assert!((0.0..=1.0).contains(&r.held_out_accuracy));
    assert_ne!(enc.params().checksum(), before);
}

fn splits() -> SplitAssignment {
    SplitAssignment::from_manifest(&SplitManifest {
        train: vec!["A".into()],
        validation: vec!["B".into()],
        test: vec!["C".into()],
    })
    .unwrap()
}

#[test]
fn domain_pretraining_refuses_held_out_patients() {
    let mut enc = VggEncoder::new(0);
    let opts = PretrainOptions { epochs: 1, ..Default::default() };
    for id in ["B", "C", "Z"] {
        let slices = vec![
            TaggedSlice { patient_id: "A".into(), image: image(1, 16, 0) },
            TaggedSlice { patient_id: id.into(), image: image(1, 16, 1) },
        ];
        assert!(matches!(pretrain_domain(&mut enc, &slices, &splits(), &opts), Err(Error::Leakage(_))));
    }
    assert!(pretrain_domain(&mut enc, &[], &splits(), &opts).is_err());
}

#[test]
fn domain_pretraining_reduces_reconstruction_error() {
    let mut enc = VggEncoder::new(0);
    let slices: Vec<TaggedSlice> =
        (0..8).map(|i| TaggedSlice { patient_id: "A".into(), image: image(1, 16, i).map(|v| 0.3 + 0.2 * v) }).collect();
    let opts = PretrainOptions { epochs: 6, batch_size: 4, ..Default::default() };
    let r = pretrain_domain(&mut enc, &slices, &splits(), &opts).unwrap();
    assert_eq!(r.steps, 12);
    assert!(r.final_mse < r.initial_mse, "{} -> {}", r.initial_mse, r.final_mse);
}
