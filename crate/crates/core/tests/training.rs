use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stftcodec::codec::{CodecConfig, CodecModel};
use stftcodec::config::AppConfig;
use stftcodec::losses::{lsgan_discriminator_loss, lsgan_generator_loss, mel_loss};
use stftcodec::train::{Dataset, Trainer};

fn clip(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t = i as f32 / 48_000.0;
            0.3 * (2.0 * std::f32::consts::PI * 180.0 * t).sin() + 0.02 * rng.random_range(-1.0f32..1.0)
        })
        .collect()
}

fn toy_trainer(batch: usize) -> (Trainer, Dataset) {
    let mut cfg = AppConfig::toy();
    cfg.train.batch_size = batch;
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let data = Dataset::from_clips(
        vec!["a".into(), "b".into()],
        vec![clip(1, 20_000), clip(2, 18_000)],
        cfg.train.chunk_samples,
        cfg.train.seed,
    )
    .unwrap();
    (trainer, data)
}

fn max_abs(t: &Tensor) -> f64 {
    t.abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn resumed_checkpoint_repeats_the_next_step() {
    let (mut trainer, mut data) = toy_trainer(1);
    for _ in 0..2 {
        trainer.train_step(&data.next_batch(1)).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.safetensors");
    trainer.save_checkpoint(&path, Some(data.rng_state())).unwrap();
    let expected = trainer.train_step(&data.next_batch(1)).unwrap();

    let (mut resumed, rng) = Trainer::load_checkpoint(&path).unwrap();
    assert_eq!(resumed.step(), 2);
    let (_, mut data2) = toy_trainer(1);
    data2.set_rng_state(rng.expect("rng state stored"));
    let got = resumed.train_step(&data2.next_batch(1)).unwrap();
    assert_eq!(got, expected);
    assert_eq!(
        resumed.model().store().digest().unwrap(),
        trainer.model().store().digest().unwrap()
    );
}

#[test]
fn adversarial_gradients_stay_on_their_side() {
    let (trainer, mut data) = toy_trainer(1);
    let batch = data.next_batch(1);
    let x = Tensor::from_vec(batch.concat(), (1, batch[0].len()), &Device::Cpu).unwrap();
    let out = trainer.model().forward(&x).unwrap();
    let discs = trainer.discriminators();

    let real = discs.forward(&x).unwrap();
    let fake = discs.forward(&out.audio.detach()).unwrap();
    let grads = lsgan_discriminator_loss(&real, &fake, &Device::Cpu).unwrap().backward().unwrap();
    for (name, var) in trainer.model().store().vars() {
        assert!(grads.get(var.as_tensor()).is_none(), "D loss reached generator parameter {name}");
    }
    assert!(trainer
        .discriminator_store()
        .vars()
        .any(|(_, v)| grads.get(v.as_tensor()).is_some_and(|g| max_abs(g) > 0.0)));

    let fake = discs.forward_frozen(&out.audio).unwrap();
    let grads = lsgan_generator_loss(&fake, &Device::Cpu).unwrap().backward().unwrap();
    for (name, var) in trainer.discriminator_store().vars() {
        assert!(grads.get(var.as_tensor()).is_none(), "G loss reached discriminator parameter {name}");
    }
    assert!(trainer
        .model()
        .store()
        .vars()
        .any(|(_, v)| grads.get(v.as_tensor()).is_some_and(|g| max_abs(g) > 0.0)));
}

#[test]
fn encoder_concatenates_three_independent_branches() {
    let model = CodecModel::new(CodecConfig::toy(), 3).unwrap();
    let g = model.config().generator.clone();
    let x: Vec<f64> = clip(3, 4_000).iter().map(|&v| v as f64).collect();
    let inputs = model.spectral_inputs(&[x]).unwrap();
    let (_, trace) = model
        .encoder()
        .forward_traced(&inputs.log_magnitude, &inputs.phase, &inputs.phase_gradient)
        .unwrap();
    let (b, m, c) = trace.concatenated.dims3().unwrap();
    assert_eq!((b, m), (1, 100));
    assert_eq!(c, g.mag_channels + g.phase_channels + g.grad_channels);
    let parts = [
        (&trace.magnitude_branch, 0, g.mag_channels),
        (&trace.phase_branch, g.mag_channels, g.phase_channels),
        (&trace.gradient_branch, g.mag_channels + g.phase_channels, g.grad_channels),
    ];
    for (branch, start, width) in parts {
        let slice = trace.concatenated.narrow(2, start, width).unwrap();
        assert_eq!(max_abs(&(slice - branch).unwrap()), 0.0);
    }

    let zeros = inputs.log_magnitude.zeros_like().unwrap();
    let (_, other) = model
        .encoder()
        .forward_traced(&zeros, &inputs.phase, &inputs.phase_gradient)
        .unwrap();
    assert_eq!(max_abs(&(&other.phase_branch - &trace.phase_branch).unwrap()), 0.0);
    assert_eq!(max_abs(&(&other.gradient_branch - &trace.gradient_branch).unwrap()), 0.0);
    assert!(max_abs(&(&other.magnitude_branch - &trace.magnitude_branch).unwrap()) > 0.0);
}

#[test]
fn ablated_generators_keep_shapes() {
    for (convnext, gradient) in [(false, true), (true, false)] {
        let mut cfg = CodecConfig::toy();
        cfg.generator.ablation_use_convnext = convnext;
        cfg.generator.use_phase_gradient = gradient;
        let model = CodecModel::new(cfg, 4).unwrap();
        assert_eq!(model.encoder().uses_convnext(), convnext);
        assert_eq!(model.decoder().uses_convnext(), convnext);
        let x = Tensor::from_vec(clip(4, 15_960), (1, 15_960), &Device::Cpu).unwrap();
        let out = model.forward(&x).unwrap();
        assert_eq!(out.audio.dims(), &[1, 15_960]);
        assert_eq!(out.latent.values.dims(), &[1, 50, model.config().generator.latent_channels]);
        assert_eq!(out.decoded.log_magnitude.dims(), &[1, 399, 513]);
        assert!(out.audio.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
        assert_eq!(max_abs(&out.inputs.phase_gradient) == 0.0, !gradient);
    }
}

#[test]
fn mel_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 1000;
    let target: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let probe: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let dev = Device::Cpu;
    let t = Tensor::from_vec(target, (1, n), &dev).unwrap();
    let loss_at = |v: &[f64]| -> f64 {
        let y = Tensor::from_vec(v.to_vec(), (1, n), &dev).unwrap();
        mel_loss(&t, &y, 48_000).unwrap().to_scalar::<f64>().unwrap()
    };
    let var = Var::from_tensor(&Tensor::from_vec(probe.clone(), (1, n), &dev).unwrap()).unwrap();
    let grads = mel_loss(&t, var.as_tensor(), 48_000).unwrap().backward().unwrap();
    let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let eps = 1e-6;
    for i in (0..n).step_by(37) {
        let (mut plus, mut minus) = (probe.clone(), probe.clone());
        plus[i] += eps;
        minus[i] -= eps;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
        assert!((fd - g[i]).abs() <= 1e-3 * fd.abs().max(1e-3), "sample {i}: fd {fd} vs grad {}", g[i]);
    }
}
