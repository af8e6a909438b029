mod common;

use common::*;
use damage_transfer::explain::{grad_cam, overlay};
use damage_transfer::zoo::WeightStore;
use damage_transfer::zoo::{attach_head, build_backbone, build_cbr, BackboneSpec, Family, TaskSpec, Weights};
use damage_transfer::Error;
use image::RgbImage;

#[test]
fn raw_map_matches_closed_form_for_linear_network() {
    for (seed, units, class) in [(1, 1, 0), (2, 2, 1), (3, 3, 2)] {
        let net = linear_cam(4, 4, 2, 3, units, seed);
        let x = random_input(4, 4, 2, seed + 100);
        let cam = grad_cam(&net.model, &x, class, "conv").unwrap();
        let oracle = net.oracle(&x, class);
        assert_eq!(cam.raw_shape, (4, 4));
        for (got, want) in cam.raw.iter().zip(&oracle) {
            assert!((*got as f64 - want).abs() <= 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn zero_gradient_gives_flagged_zero_map() {
    let mut net = linear_cam(4, 4, 2, 3, 1, 5);
    scale_logit_kernel(&mut net.model, 0.0);
    let cam = grad_cam(&net.model, &random_input(4, 4, 2, 6), 0, "conv").unwrap();
    assert!(cam.all_zero);
    assert!(cam.raw.iter().all(|v| *v == 0.0));
    assert!(cam.normalized.iter().all(|v| *v == 0.0));
}

#[test]
fn invariants_and_scaling_on_random_models() {
    for seed in 0..50 {
        let (mut model, layer) = random_small_model(seed);
        let (h, w) = model.input_size;
        let c = model.graph.input_shape()[2];
        let x = random_input(h, w, c, seed + 1000);
        let outputs = model.output_dim().unwrap();
        let class = (seed as usize) % outputs;
        let cam = grad_cam(&model, &x, class, &layer).unwrap();
        assert_eq!(cam.shape, (h, w));
        assert_eq!(cam.normalized.len(), h * w);
        assert!(cam.raw.iter().all(|v| *v >= 0.0));
        assert!(cam.normalized.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(grad_cam(&model, &x, class, &layer).unwrap(), cam);

        scale_logit_kernel(&mut model, 3.0);
        let scaled = grad_cam(&model, &x, class, &layer).unwrap();
        for (a, b) in scaled.raw.iter().zip(&cam.raw) {
            assert!((a - 3.0 * b).abs() <= 1e-5 * (1.0 + b.abs()), "raw {a} vs 3 * {b}");
        }
        if !cam.all_zero {
            for (a, b) in scaled.normalized.iter().zip(&cam.normalized) {
                assert!((a - b).abs() <= 1e-5, "normalized {a} vs {b}");
            }
        }
    }
}

#[test]
fn argument_errors() {
    let net = linear_cam(4, 4, 2, 3, 2, 9);
    let x = random_input(4, 4, 2, 10);
    assert!(matches!(grad_cam(&net.model, &x, 0, "nope"), Err(Error::Argument(_))));
    assert!(matches!(grad_cam(&net.model, &x, 2, "conv"), Err(Error::Argument(_))));
    assert!(matches!(grad_cam(&net.model, &x, 0, "gap"), Err(Error::Argument(_))));
    let cam = grad_cam(&net.model, &x, 0, "conv").unwrap();
    assert!(matches!(
        overlay(&cam, &RgbImage::new(5, 4), 0.5),
        Err(Error::Argument(_))
    ));
}

#[test]
fn last_conv_layer_of_every_family_resolves() {
    let task = TaskSpec::binary();
    let store = WeightStore::new(std::env::temp_dir());
    for family in Family::ALL {
        let model = if family.is_cbr() {
            let n = family.cbr_config().unwrap().min_input();
            build_cbr(family, (n, n), &task, 1).unwrap()
        } else {
            let size = if family == Family::InceptionV3 {
                (75, 75)
            } else {
                (32, 32)
            };
            let spec = BackboneSpec::new(family, Weights::Random).with_input_size(size.0, size.1);
            attach_head(build_backbone(&spec, &store).unwrap(), &task, 0.5, 1).unwrap()
        };
        let (h, w) = model.input_size;
        let x = random_input(h, w, 3, 4);
        let cam = grad_cam(&model, &x, 0, &model.last_conv_layer()).unwrap();
        assert_eq!(cam.shape, (h, w), "{family}");
        assert!(cam.raw.iter().all(|v| *v >= 0.0));
    }
}
