//! Model shape contracts, parameter budgets, gradient reachability and
//! checkpoint round trips.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seglab_core::attention::{AttentionConfig, AttentionVariant};
use seglab_core::graph::{Graph, Mode};
use seglab_core::models::*;
use seglab_core::params::ParamKind;
use seglab_core::tensor::Tensor;
use seglab_core::training::loss::Labels;
use seglab_core::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tiny(arch: Architecture, backbone: Backbone, variant: AttentionVariant, size: usize) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        backbone,
        decoder_channels: 4,
        input_size: size,
        attention: AttentionConfig {
            aspp_out_channels: 8,
            ..AttentionConfig::with_variant(variant)
        },
        ..Default::default()
    }
}

fn within(actual: usize, target: f64, tol: f64) -> bool {
    ((actual as f64 - target) / target).abs() <= tol
}

#[test]
fn resnet50_pyramid_sizes() {
    for (size, expected) in [(256, [128, 64, 32, 16, 8]), (224, [112, 56, 28, 14, 7])] {
        let cfg = ModelConfig {
            input_size: size,
            ..ModelConfig::default()
        };
        let model = build_model(&cfg, 0).unwrap();
        let pyr = model.encode(&Tensor::zeros(&[1, 1, size, size])).unwrap();
        let sizes: Vec<usize> = pyr.sizes().iter().map(|&(h, w)| {
            assert_eq!(h, w);
            h
        }).collect();
        assert_eq!(sizes, expected);
        assert_eq!(pyr.channels(), pyramid_channels(Backbone::Resnet50).to_vec());
    }
}

#[test]
fn pyramid_levels_halve_for_every_backbone() {
    for backbone in [Backbone::PlainCnn, Backbone::ResnetTiny, Backbone::Resnet18] {
        let cfg = tiny(Architecture::Unet3p, backbone, AttentionVariant::None, 64);
        let model = build_model(&cfg, 1).unwrap();
        let pyr = model.encode(&Tensor::zeros(&[2, 1, 64, 64])).unwrap();
        let first = 64 / first_level_stride(backbone);
        for (l, (h, w)) in pyr.sizes().into_iter().enumerate() {
            assert_eq!((h, w), (first >> l, first >> l), "{backbone} level {l}");
        }
        assert_eq!(pyr.channels(), pyramid_channels(backbone).to_vec());
    }
}

#[test]
fn encoder_rejects_wrong_spatial_size() {
    let model = build_model(&tiny(Architecture::Unet3p, Backbone::ResnetTiny, AttentionVariant::None, 64), 0).unwrap();
    match model.encode(&Tensor::zeros(&[1, 1, 32, 32])) {
        Err(Error::Shape { expected, actual }) => {
            assert!(expected.contains("64"), "{expected}");
            assert!(actual.contains("32"), "{actual}");
        }
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn parameter_budgets_match_published_counts() {
    let none = build_model(&ModelConfig::default(), 0).unwrap();
    assert!(within(none.param_count(), 31.1e6, 0.10), "{}", none.param_count());
    let mut cfg = ModelConfig::default();
    cfg.attention.variant = AttentionVariant::Cbam;
    let cbam = build_model(&cfg, 0).unwrap();
    assert!(within(cbam.param_count(), 31.2e6, 0.10), "{}", cbam.param_count());
    let extra = (cbam.param_count() - none.param_count()) as f64 / none.param_count() as f64;
    assert!(extra > 0.0 && extra < 0.01, "{extra}");
    cfg.attention.variant = AttentionVariant::CbamAspp;
    let both = build_model(&cfg, 0).unwrap();
    assert!(both.param_count() > cbam.param_count());

    let unet = build_unet_baseline(&ModelConfig::default(), 0).unwrap();
    assert!(within(unet.param_count(), 1.8e6, 0.10), "{}", unet.param_count());
}

#[test]
fn fusion_inputs_are_five_sources_wide() {
    for c in [4, 8, 64] {
        let mut cfg = tiny(Architecture::Unet3p, Backbone::ResnetTiny, AttentionVariant::Cbam, 64);
        cfg.decoder_channels = c;
        let model = build_model(&cfg, 0).unwrap();
        assert_eq!(model.fusion_in_channels().unwrap(), vec![5 * c; 4]);
    }
    let unet = build_model(&tiny(Architecture::Unet, Backbone::PlainCnn, AttentionVariant::None, 64), 0).unwrap();
    assert!(unet.fusion_in_channels().is_none());
}

#[test]
fn batch_of_four_at_full_resolution() {
    let cfg = tiny(Architecture::Unet3p, Backbone::ResnetTiny, AttentionVariant::None, 256);
    let model = build_model(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = model.logits(&random(&mut rng, &[4, 1, 256, 256])).unwrap();
    assert_eq!(logits.shape(), &[4, 2, 256, 256]);
    assert!(logits.data().iter().all(|v| v.is_finite()));
}

/// Every trainable tensor must see a nonzero gradient from the combined loss
/// for at least one of a few random batches.
fn assert_no_dead_branches(cfg: &ModelConfig) {
    // a one-unit attention MLP can start dead behind its ReLU, so widen it
    let cfg = ModelConfig {
        decoder_channels: 8,
        attention: AttentionConfig { reduction: 2, ..cfg.attention.clone() },
        ..cfg.clone()
    };
    let model = build_model(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = cfg.input_size;
    let mut alive = vec![false; model.store().len()];
    for _ in 0..3 {
        let x = random(&mut rng, &[2, 1, s, s]);
        let labels = Labels::new(2, s, s, (0..2 * s * s).map(|_| rng.random_range(0..2)).collect()).unwrap();
        let mut g = Graph::new(model.store(), Mode::Train);
        let xv = g.input(x);
        let logits = model.forward(&mut g, xv).unwrap();
        let ce = g.cross_entropy(logits, &labels).unwrap();
        let p = g.softmax(logits).unwrap();
        let dice = g.soft_dice(p, &labels, 1e-5).unwrap();
        let loss = g.weighted_sum(&[(ce, 0.5), (dice, 0.5)]).unwrap();
        let grads = g.backward(loss, &[]).unwrap();
        for (id, entry) in model.store().iter() {
            match grads.param(id) {
                Some(grad) => {
                    assert_eq!(entry.kind, ParamKind::Trainable, "{} is a statistic", entry.name);
                    assert!(grad.data().iter().all(|v| v.is_finite()), "{}", entry.name);
                    alive[id.index()] |= grad.data().iter().any(|&v| v != 0.0);
                }
                None => assert_ne!(entry.kind, ParamKind::Trainable, "{} got no gradient", entry.name),
            }
        }
    }
    for (id, entry) in model.store().iter() {
        if entry.kind == ParamKind::Trainable {
            assert!(alive[id.index()], "{} has an all-zero gradient", entry.name);
        }
    }
}

#[test]
fn no_dead_branches_in_full_scale_decoder() {
    for variant in AttentionVariant::ALL {
        assert_no_dead_branches(&tiny(Architecture::Unet3p, Backbone::ResnetTiny, variant, 64));
    }
}

#[test]
fn no_dead_branches_in_single_scale_decoder() {
    assert_no_dead_branches(&tiny(Architecture::Unet, Backbone::PlainCnn, AttentionVariant::None, 64));
    assert_no_dead_branches(&tiny(Architecture::Unet, Backbone::ResnetTiny, AttentionVariant::CbamAspp, 64));
}

#[test]
fn doubling_the_batch_leaves_each_sample_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (arch, backbone, variant) in [
        (Architecture::Unet3p, Backbone::ResnetTiny, AttentionVariant::CbamAspp),
        (Architecture::Unet, Backbone::PlainCnn, AttentionVariant::Se),
    ] {
        let model = build_model(&tiny(arch, backbone, variant, 64), 2).unwrap();
        let x = random(&mut rng, &[2, 1, 64, 64]);
        let y = model.logits(&x).unwrap();
        let other = random(&mut rng, &[2, 1, 64, 64]);
        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(other.data());
        let y4 = model.logits(&Tensor::new(&[4, 1, 64, 64], doubled).unwrap()).unwrap();
        assert_eq!(&y4.data()[..y.numel()], y.data());
    }
}

#[test]
fn eval_mode_is_deterministic() {
    let model = build_unet_baseline(&ModelConfig { input_size: 64, ..Default::default() }, 3).unwrap();
    let zeros = Tensor::zeros(&[1, 1, 64, 64]);
    let a = model.encode(&zeros).unwrap();
    let b = model.encode(&zeros).unwrap();
    for (x, y) in a.levels.iter().zip(&b.levels) {
        assert_eq!(x, y);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 1, 64, 64]);
    assert_eq!(model.logits(&x).unwrap(), model.logits(&x).unwrap());
    let same_seed = build_unet_baseline(&ModelConfig { input_size: 64, ..Default::default() }, 3).unwrap();
    assert_eq!(same_seed.logits(&x).unwrap(), model.logits(&x).unwrap());
}

#[test]
fn he_normal_initialization_scale() {
    // std of a He-normal conv weight is sqrt(2 / fan_in)
    let model = build_model(&ModelConfig::default(), 5).unwrap();
    let id = model.store().find("encoder.layer3.0.conv2.weight").unwrap();
    let w = model.store().get(id);
    let fan_in = w.shape()[1] * w.shape()[2] * w.shape()[3];
    let n = w.numel() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let expected = 2.0 / fan_in as f64;
    assert!(mean.abs() < 0.01 * expected.sqrt() * 10.0);
    assert!((var / expected - 1.0).abs() < 0.05, "var {var} expected {expected}");
}

#[test]
fn checkpoint_round_trip_restores_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    let cfg = tiny(Architecture::Unet3p, Backbone::ResnetTiny, AttentionVariant::CbamAspp, 64);
    let model = build_model(&cfg, 9).unwrap();
    let extra = BTreeMap::from([("note".to_string(), "hello".to_string())]);
    save_checkpoint(&model, &path, &extra).unwrap();
    let (loaded, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(meta["note"], "hello");
    assert!(meta.contains_key(CONFIG_KEY));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[1, 1, 64, 64]);
    assert_eq!(loaded.logits(&x).unwrap(), model.logits(&x).unwrap());

    let mut bigger = build_model(&{
        let mut c = cfg.clone();
        c.decoder_channels = 8;
        c
    }, 0).unwrap();
    assert!(matches!(load_weights(&mut bigger, &path), Err(Error::Checkpoint(_))));
}

fn write_subset(model: &Model, path: &std::path::Path, keep: impl Fn(&str) -> bool) {
    use safetensors::tensor::{Dtype, TensorView};
    let owned: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .store()
        .iter()
        .filter(|(_, e)| keep(&e.name))
        .map(|(_, e)| {
            let bytes = e.value.data().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
            (e.name.clone(), e.value.shape().to_vec(), bytes)
        })
        .collect();
    let views: Vec<(&str, TensorView)> = owned
        .iter()
        .map(|(n, s, b)| (n.as_str(), TensorView::new(Dtype::F32, s.clone(), b).unwrap()))
        .collect();
    safetensors::serialize_to_file(views, None, path).unwrap();
}

#[test]
fn pretrained_loading_reports_matches_and_misses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Architecture::Unet3p, Backbone::ResnetTiny, AttentionVariant::None, 64);
    let source = build_model(&cfg, 1).unwrap();
    let encoder_names: Vec<String> = source
        .store()
        .names()
        .filter(|n| n.starts_with("encoder."))
        .map(str::to_string)
        .collect();

    let full = dir.path().join("full.safetensors");
    write_subset(&source, &full, |n| n.starts_with("encoder."));
    let mut target = build_model(&cfg, 2).unwrap();
    let head_before = target.store().get(target.store().find("head.weight").unwrap()).clone();
    let report = load_pretrained(&mut target, &full).unwrap();
    assert!(report.missed.is_empty());
    assert_eq!(report.matched, encoder_names);
    let id = target.store().find("encoder.conv1.weight").unwrap();
    let src = source.store().get(source.store().find("encoder.conv1.weight").unwrap());
    for (a, b) in target.store().get(id).data().iter().zip(src.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    assert_eq!(target.store().get(target.store().find("head.weight").unwrap()), &head_before);

    let dropped: Vec<String> = encoder_names.iter().filter(|n| n.contains("layer4")).cloned().collect();
    assert!(!dropped.is_empty());
    let truncated = dir.path().join("truncated.safetensors");
    write_subset(&source, &truncated, |n| n.starts_with("encoder.") && !n.contains("layer4"));
    let mut target = build_model(&cfg, 2).unwrap();
    let report = load_pretrained(&mut target, &truncated).unwrap();
    assert_eq!(report.missed, dropped);

    let unrelated = dir.path().join("unrelated.safetensors");
    write_subset(&source, &unrelated, |n| n.starts_with("head."));
    assert!(matches!(load_pretrained(&mut target, &unrelated), Err(Error::Checkpoint(_))));
    assert!(load_pretrained(&mut target, &dir.path().join("absent.safetensors")).is_err());
}

#[test]
fn pretrained_stems_take_three_channels() {
    let cfg = ModelConfig {
        backbone: Backbone::Resnet18,
        pretrained: true,
        decoder_channels: 4,
        input_size: 64,
        ..Default::default()
    };
    assert_eq!(cfg.in_channels(), 3);
    let model = build_model(&cfg, 0).unwrap();
    let stem = model.store().get(model.store().find("encoder.conv1.weight").unwrap());
    assert_eq!(stem.shape()[1], 3);
    let logits = model.logits(&Tensor::zeros(&[1, 1, 64, 64])).unwrap();
    assert_eq!(logits.shape(), &[1, 2, 64, 64]);
    let bad = ModelConfig { backbone: Backbone::ResnetTiny, ..cfg };
    assert!(matches!(build_model(&bad, 0), Err(Error::UnsupportedConfig(_))));
}
