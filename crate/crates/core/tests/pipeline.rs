//! Cross-module integration: the differentiable encode path against the
//! physical acquisition simulator, autoencoder pretraining composition,
//! end-to-end training smoke runs and checkpoint-resume determinism.

use lumoe::brdf::{sample_brdf, BRDFSample, SampleConfig};
use lumoe::device::{DeviceDescription, FaceGrids, VirtualDevice};
use lumoe::lightstage::{acquire, NoiseConfig};
use lumoe::moe::{ModelBundle, ModelConfig, TrainCheckpoint};
use lumoe::nn::{Mode, Tensor2};
use lumoe::seeding::rng_from_seed;
use lumoe::train::{
    generate_dataset, pretrain_latent, train_main, validation_loss, Dataset, PatternMode,
    TrainConfig, TrainOptions,
};

fn tiny_device() -> VirtualDevice {
    let mut desc = DeviceDescription::desk();
    desc.main_grid = FaceGrids { top: [4, 4], side: [4, 2] };
    desc.diffuse_grid = FaceGrids { top: [2, 2], side: [2, 1] };
    VirtualDevice::from_description(desc).unwrap()
}

fn tiny_dataset(device: &VirtualDevice, count: usize, seed: u64) -> Dataset {
    generate_dataset(device, count, seed, &SampleConfig::default(), 0.05).unwrap()
}

#[test]
fn encode_matches_noiseless_acquisition() {
    let device = tiny_device();
    let cfg = ModelConfig::tiny(device.num_leds(), device.num_diffuse_leds(), 4, 3);
    let bundle = ModelBundle::<f32>::new(cfg, 99).unwrap();
    let patterns = bundle.lighting_patterns();

    let mut rng = rng_from_seed(5);
    for _ in 0..10 {
        let sample = sample_brdf(&mut rng, &device.plane, &SampleConfig::default());
        let gray = BRDFSample { params: sample.params.gray(), ..sample };
        let lum = lumoe::lightstage::render_lumitexel(
            &gray,
            &device,
            0,
            lumoe::lightstage::RenderMode::Full,
            lumoe::lightstage::LedSet::Main,
        )
        .unwrap();
        let lum_f32: Vec<f32> = lum.values().iter().map(|v| *v as f32).collect();
        let encoded = bundle.encode(&lum_f32).unwrap();

        let meas =
            acquire(&sample, &patterns, &device, &NoiseConfig::none(), false, &mut rng).unwrap();
        for (e, m) in encoded.iter().zip(&meas.channels[0]) {
            let scale = m.abs().max(1e-6);
            assert!(
                (*e as f64 - m).abs() <= 1e-6 * scale.max(1.0),
                "encode {e} vs acquire {m}"
            );
        }
    }
}

#[test]
fn autoencoder_head_composition_is_bit_exact() {
    let device = tiny_device();
    let ds = tiny_dataset(&device, 300, 3);
    let mcfg = ModelConfig::tiny(device.num_leds(), device.num_diffuse_leds(), 2, 2);
    let tcfg = TrainConfig {
        iterations: 150,
        batch_size: 16,
        learning_rate: 1e-3,
        val_every: 50,
        val_max_rows: 32,
        checkpoint_every: 0,
        seed: 7,
    };
    let result = pretrain_latent(&ds, &mcfg, &tcfg).unwrap();

    // Head layer count: 17 total fc minus the encoder's share. At tiny
    // scale the same split applies structurally: encoder hidden + 1
    // bottleneck fc, head hidden + 1 output fc.
    let head_fc = result
        .head
        .specs()
        .iter()
        .filter(|s| matches!(s, lumoe::nn::LayerSpec::Fc { .. }))
        .count();
    assert_eq!(head_fc, mcfg.head_hidden.len() + 1);

    // Feeding the encoder's own bottleneck code through the standalone head
    // reproduces the full autoencoder output exactly.
    let input = Tensor2::from_vec(4, ds.num_leds, {
        let mut v = Vec::new();
        for i in 0..4 {
            v.extend_from_slice(ds.full_row(i));
        }
        v
    });
    let (code, _) = result.encoder.forward_eval(&input, false).unwrap();
    let (direct, _) = result.head.forward_eval(&code, false).unwrap();
    let (code2, _) = result.encoder.forward_eval(&input, false).unwrap();
    let (via_head, _) = result.head.forward_eval(&code2, false).unwrap();
    assert_eq!(direct.data, via_head.data);

    // Training made progress: the moving-average loss decreased, and the
    // reconstruction beats the best constant predictor on held-out rows.
    let first = result.curves.first().unwrap();
    let last = result.curves.last().unwrap();
    assert!(
        last.train_loss < first.train_loss,
        "autoencoder loss did not decrease: {} -> {}",
        first.train_loss,
        last.train_loss
    );

    // Constant-predictor baseline: mean training labels.
    let val_start = ds.train_count();
    let mut mean_d = vec![0.0f64; ds.num_diffuse_leds];
    let mut mean_s = vec![0.0f64; ds.num_leds];
    for i in 0..val_start {
        for (m, v) in mean_d.iter_mut().zip(ds.diffuse_row(i)) {
            *m += *v as f64;
        }
        for (m, v) in mean_s.iter_mut().zip(ds.specular_row(i)) {
            *m += *v as f64;
        }
    }
    for m in mean_d.iter_mut() {
        *m /= val_start as f64;
    }
    for m in mean_s.iter_mut() {
        *m /= val_start as f64;
    }
    let mut model_sse = 0.0f64;
    let mut const_sse = 0.0f64;
    let mut count = 0usize;
    for i in val_start..ds.count {
        let row = Tensor2::from_vec(1, ds.num_leds, ds.full_row(i).to_vec());
        let (code, _) = result.encoder.forward_eval(&row, false).unwrap();
        let (pred, _) = result.head.forward_eval(&code, false).unwrap();
        for (c, lab) in ds.diffuse_row(i).iter().enumerate() {
            model_sse += (pred.data[c] as f64 - *lab as f64).powi(2);
            const_sse += (mean_d[c] - *lab as f64).powi(2);
        }
        for (c, lab) in ds.specular_row(i).iter().enumerate() {
            model_sse +=
                (pred.data[ds.num_diffuse_leds + c] as f64 - *lab as f64).powi(2);
            const_sse += (mean_s[c] - *lab as f64).powi(2);
        }
        count += 1;
    }
    assert!(count > 0);
    assert!(
        model_sse < const_sse,
        "autoencoder rmse {model_sse} not better than constant predictor {const_sse}"
    );
}

#[test]
fn main_training_improves_validation_loss_and_n1_degenerates() {
    let device = tiny_device();
    let ds = tiny_dataset(&device, 600, 11);
    let mcfg = ModelConfig::tiny(device.num_leds(), device.num_diffuse_leds(), 4, 2);
    let pre_cfg = TrainConfig {
        iterations: 200,
        batch_size: 16,
        learning_rate: 1e-3,
        val_every: 100,
        val_max_rows: 30,
        checkpoint_every: 0,
        seed: 5,
    };
    let pre = pretrain_latent(&ds, &mcfg, &pre_cfg).unwrap();

    let tcfg = TrainConfig {
        iterations: 400,
        batch_size: 16,
        learning_rate: 1e-3,
        val_every: 100,
        val_max_rows: 30,
        checkpoint_every: 0,
        seed: 13,
    };
    let out = train_main(&ds, &mcfg, &tcfg, &pre.head, TrainOptions::default()).unwrap();
    let at_100 = out
        .curves
        .iter()
        .find(|p| p.iteration == 100)
        .and_then(|p| p.val_loss)
        .unwrap();
    assert!(
        out.final_val_loss < at_100,
        "final val loss {} not below iteration-100 value {at_100}",
        out.final_val_loss
    );

    // n = 1: no gating bits, Pr(0) = 1 identically; training still works.
    let mut uni_cfg = mcfg.clone();
    uni_cfg.n_decoders = 1;
    let tcfg1 = TrainConfig { iterations: 60, ..tcfg.clone() };
    let uni = train_main(&ds, &uni_cfg, &tcfg1, &pre.head, TrainOptions::default()).unwrap();
    assert!(uni.final_val_loss.is_finite());
    let gray_meas = vec![0.1f32, -0.2];
    let gating = uni.bundle.gate(&gray_meas).unwrap();
    assert!(gating.bits.is_empty());
    assert_eq!(lumoe::moe::select_decoder(&gating), 0);
    assert_eq!(lumoe::moe::decoder_probability(&gating, 0).unwrap(), 1.0);
}

#[test]
fn resumed_training_is_bitwise_identical() {
    let device = tiny_device();
    let ds = tiny_dataset(&device, 200, 21);
    let mcfg = ModelConfig::tiny(device.num_leds(), device.num_diffuse_leds(), 2, 2);
    let pre_cfg = TrainConfig {
        iterations: 40,
        batch_size: 8,
        learning_rate: 1e-3,
        val_every: 20,
        val_max_rows: 10,
        checkpoint_every: 0,
        seed: 2,
    };
    let pre = pretrain_latent(&ds, &mcfg, &pre_cfg).unwrap();
    let dir = std::env::temp_dir().join("lumoe_resume_test");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();

    // Uninterrupted run: 20 iterations with a checkpoint at 10.
    let tcfg = TrainConfig {
        iterations: 20,
        batch_size: 8,
        learning_rate: 1e-3,
        val_every: 0,
        val_max_rows: 10,
        checkpoint_every: 10,
        seed: 31,
    };
    let full = train_main(
        &ds,
        &mcfg,
        &tcfg,
        &pre.head,
        TrainOptions { checkpoint_dir: Some(&dir), ..Default::default() },
    )
    .unwrap();

    // Resume from iteration 10 and run the next 10 iterations.
    let ck = TrainCheckpoint::load_file(&dir.join("checkpoint_00000010.mtck")).unwrap();
    assert_eq!(ck.iteration, 10);
    let resumed = train_main(
        &ds,
        &mcfg,
        &tcfg,
        &pre.head,
        TrainOptions {
            resume: Some(ck),
            ..Default::default()
        },
    )
    .unwrap();

    assert_eq!(full.bundle.patterns.data, resumed.bundle.patterns.data);
    for (a, b) in full.bundle.decoders.iter().zip(&resumed.bundle.decoders) {
        for (pa, pb) in a.param_arrays().iter().zip(b.param_arrays().iter()) {
            assert_eq!(pa, pb);
        }
    }
    for (a, b) in full.bundle.gating.iter().zip(&resumed.bundle.gating) {
        for (pa, pb) in a.param_arrays().iter().zip(b.param_arrays().iter()) {
            assert_eq!(pa, pb);
        }
    }
}

#[test]
fn fixed_pattern_training_leaves_patterns_untouched() {
    let device = tiny_device();
    let ds = tiny_dataset(&device, 200, 33);
    let mcfg = ModelConfig::tiny(device.num_leds(), device.num_diffuse_leds(), 2, 2);
    let pre_cfg = TrainConfig {
        iterations: 30,
        batch_size: 8,
        learning_rate: 1e-3,
        val_every: 0,
        val_max_rows: 10,
        checkpoint_every: 0,
        seed: 3,
    };
    let pre = pretrain_latent(&ds, &mcfg, &pre_cfg).unwrap();
    let fixed: Vec<Vec<f32>> = (0..2)
        .map(|j| {
            (0..device.num_leds())
                .map(|l| if (l + j) % 2 == 0 { 0.7 } else { -0.4 })
                .collect()
        })
        .collect();
    let tcfg = TrainConfig {
        iterations: 30,
        batch_size: 8,
        learning_rate: 1e-3,
        val_every: 0,
        val_max_rows: 10,
        checkpoint_every: 0,
        seed: 41,
    };
    let out = train_main(
        &ds,
        &mcfg,
        &tcfg,
        &pre.head,
        TrainOptions { pattern_mode: PatternMode::Fixed(fixed.clone()), ..Default::default() },
    )
    .unwrap();
    for (j, row) in fixed.iter().enumerate() {
        for (l, w) in row.iter().enumerate() {
            assert_eq!(out.bundle.patterns.get(j, l), *w);
        }
    }
    let _ = validation_loss(&out.bundle, &ds, 0).unwrap();
}

#[test]
fn stack_forward_eval_mode_is_pure() {
    // Eval forward does not mutate batchnorm state even after training.
    let device = tiny_device();
    let ds = tiny_dataset(&device, 100, 51);
    let mcfg = ModelConfig::tiny(device.num_leds(), device.num_diffuse_leds(), 2, 2);
    let mut bundle = ModelBundle::<f32>::new(mcfg, 7).unwrap();
    let x = Tensor2::from_vec(5, ds.num_leds, {
        let mut v = Vec::new();
        for i in 0..5 {
            v.extend_from_slice(ds.full_row(i));
        }
        v
    });
    let meas = bundle.encode_batch(&x).unwrap();
    let mut rng = rng_from_seed(1);
    let _ = bundle.decoders[0].forward(&meas, Mode::Train, Some(&mut rng), false).unwrap();
    let (a, _) = bundle.decoders[0].forward_eval(&meas, false).unwrap();
    let (b, _) = bundle.decoders[0].forward_eval(&meas, false).unwrap();
    assert_eq!(a.data, b.data);
}
