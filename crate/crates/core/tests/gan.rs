use std::collections::HashSet;

use image::{Rgb, RgbImage};
use polypforge_core::dataset::toy::{render_toy_tiles, Motif, ToyClass, ToyDomainSpec};
use polypforge_core::dataset::{ImageTile, Provenance};
use polypforge_core::gan::{
    adversarial_loss, build_cyclegan, build_dcgan, continue_training, cycle_consistency_loss, generator_objective,
    sample_dcgan, train_cyclegan, train_dcgan, translate, AdversarialLoss, Checkpoint, CycleGan, CycleNets,
    DcganConfig, Direction, DiscriminatorArch, Domains, GanConfig, GanError, GeneratorArch, IdentityMap, ImageMap,
    ReplayBuffer, ResnetGenerator, Target,
};
use polypforge_core::imaging::images_to_tensor;
use polypforge_nn::gradcheck::{check_param_gradients, GradCheckConfig};
use polypforge_nn::{Graph, Init, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn domains() -> Domains {
    Domains { source: "NO".into(), target: "SSA".into() }
}

fn tiny_config(image_size: u32) -> GanConfig {
    GanConfig {
        image_size,
        ngf: 4,
        ndf: 4,
        n_residual_blocks: Some(1),
        disc_layers: 2,
        edge_kernel: 3,
        epochs: 2,
        checkpoint_epochs: vec![1],
        batch_size: 2,
        replay_capacity: 4,
        seed: 3,
        ..GanConfig::default()
    }
}

fn toy(size: u32, count: usize, seed: u64) -> (Vec<ImageTile>, Vec<ImageTile>) {
    let spec = ToyDomainSpec::new(
        size,
        seed,
        vec![
            ToyClass {
                name: "NO".into(),
                adenomatous: false,
                motif: Motif::PlainDisk,
                count,
                feature_strength: [0.0, 1.0],
            },
            ToyClass {
                name: "SSA".into(),
                adenomatous: true,
                motif: Motif::StripedDisk,
                count,
                feature_strength: [0.5, 1.0],
            },
        ],
    );
    render_toy_tiles(&spec).unwrap().into_iter().partition(|t| t.label() == "NO")
}

#[test]
fn generators_preserve_shape_and_range() {
    for size in [32u32, 64, 128, 224] {
        let cfg = GanConfig { image_size: size, ngf: 4, ndf: 4, ..GanConfig::default() };
        let expected_blocks = if size > 128 { 9 } else { 6 };
        assert_eq!(cfg.residual_blocks(), expected_blocks);
        let model = build_cyclegan(&cfg, domains()).unwrap();
        let img = RgbImage::from_fn(size, size, |x, y| Rgb([(x * 7) as u8, (y * 3) as u8, 90]));
        let x = images_to_tensor(&[&img]);
        for dir in [Direction::SourceToTarget, Direction::TargetToSource] {
            let y = model.generate(&x, dir).unwrap();
            assert_eq!(y.shape(), x.shape(), "size {size}");
            assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
    let bad = GanConfig { image_size: 30, ..tiny_config(30) };
    assert!(matches!(build_cyclegan(&bad, domains()), Err(GanError::InvalidConfig { field: "image_size", .. })));
    let neg = GanConfig { lambda_cyc: -1.0, ..tiny_config(16) };
    assert!(matches!(neg.validate(), Err(GanError::InvalidConfig { field: "lambda_cyc", .. })));
}

#[test]
fn initialisation_is_seed_deterministic() {
    let a = build_cyclegan(&tiny_config(16), domains()).unwrap().param_hash().unwrap();
    let b = build_cyclegan(&tiny_config(16), domains()).unwrap().param_hash().unwrap();
    let c = build_cyclegan(&GanConfig { seed: 4, ..tiny_config(16) }, domains()).unwrap().param_hash().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

struct Constant(f32);

impl ImageMap for Constant {
    fn apply(&self, x: &Tensor<f32>) -> polypforge_core::gan::Result<Tensor<f32>> {
        Ok(x.map(|_| self.0))
    }
}

#[test]
fn cycle_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let x: Tensor<f32> = Init::Normal { mean: 0.0, std: 0.5 }.sample(&[3, 3, 8, 8], &mut rng);
        assert_eq!(cycle_consistency_loss(&x, &IdentityMap, &IdentityMap).unwrap(), 0.0);
    }

    // Black input reconstructed as white: every normalized value moves from -1 to 1.
    let black = RgbImage::new(4, 4);
    let x = images_to_tensor(&[&black]);
    assert_eq!(cycle_consistency_loss(&x, &IdentityMap, &Constant(1.0)).unwrap(), 2.0);

    // 2×2 fixture against an element-by-element sum.
    let vals = [-1.0f32, -0.5, 0.0, 0.25, 0.5, 0.75, 1.0, -0.25, 0.1, 0.2, 0.3, 0.4];
    let x = Tensor::new(vec![1, 3, 2, 2], vals.to_vec()).unwrap();
    let mut total = 0.0f64;
    for v in vals {
        total += (0.3f64 - v as f64).abs();
    }
    let expected = total / 12.0;
    let got = cycle_consistency_loss(&x, &Constant(0.3), &IdentityMap).unwrap();
    assert!((got - expected).abs() < 1e-7, "{got} vs {expected}");
}

#[test]
fn adversarial_loss_forms() {
    let ls = AdversarialLoss::LeastSquares;
    assert_eq!(adversarial_loss(&[1.0, 1.0, 1.0], Target::Real, ls).unwrap(), 0.0);
    assert_eq!(adversarial_loss(&[0.0, 0.0], Target::Fake, ls).unwrap(), 0.0);
    assert_eq!(adversarial_loss(&[0.5, 0.5], Target::Real, ls).unwrap(), 0.25);
    let bce = adversarial_loss(&[0.0], Target::Real, AdversarialLoss::Bce).unwrap();
    assert!((bce - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(matches!(adversarial_loss(&[f64::INFINITY], Target::Fake, ls), Err(GanError::NonFiniteInput(_))));

    // Graph form agrees with the plain form.
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let d = g.input(Tensor::new(vec![4], vec![0.1, -0.4, 0.9, 1.7]).unwrap());
    for form in [ls, AdversarialLoss::Bce] {
        for target in [Target::Real, Target::Fake] {
            let v = polypforge_core::gan::adversarial_term(&mut g, d, target, form);
            let plain = adversarial_loss(&[0.1, -0.4, 0.9, 1.7], target, form).unwrap();
            assert!((g.value(v).item() - plain).abs() < 1e-12);
        }
    }
}

#[test]
fn total_generator_loss_gradients_match_finite_differences() {
    let gen = GeneratorArch { ngf: 2, n_downsampling: 1, n_residual_blocks: 1, edge_kernel: 3 };
    let disc = DiscriminatorArch { ndf: 2, layers: 1 };
    gen.validate(8).unwrap();
    disc.validate(8).unwrap();
    for form in [AdversarialLoss::LeastSquares, AdversarialLoss::Bce] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nets = CycleNets::new(&mut store, &gen, &disc, &mut rng).unwrap();
        // Wider initial weights keep activations away from the flat regime.
        for id in store.param_ids().collect::<Vec<_>>() {
            let t = store.param(id).map(|v| v * 10.0);
            *store.param_mut(id) = t;
        }
        assert!(store.num_elements() <= 5000, "{} parameters", store.num_elements());
        let x: Tensor<f64> = Init::Normal { mean: 0.0, std: 0.5 }.sample(&[2, 3, 8, 8], &mut rng).map(f64::tanh);
        let y: Tensor<f64> = Init::Normal { mean: 0.0, std: 0.5 }.sample(&[2, 3, 8, 8], &mut rng).map(f64::tanh);
        let mut ids = store.ids_with_prefix("G.");
        ids.extend(store.ids_with_prefix("F."));
        let weights = polypforge_core::gan::LossWeights { form, lambda_cyc: 10.0, lambda_id: 5.0 };
        let cfg = GradCheckConfig { samples: 100, eps: 1e-6, floor: 1e-6, seed: 9 };
        let report = check_param_gradients(&mut store, &ids, cfg, |g| {
            let xv = g.input(x.clone());
            let yv = g.input(y.clone());
            Ok(generator_objective(g, &nets, xv, yv, weights)
                .map_err(|e| match e {
                    GanError::Nn(n) => n,
                    other => panic!("{other}"),
                })?
                .total)
        })
        .unwrap();
        assert_eq!(report.samples.len(), 100);
        assert!(report.max_rel_error() < 1e-4, "{form:?}: worst {:?}", report.worst());
    }
}

#[test]
fn replay_buffer_statistics() {
    let k = 5;
    let mut pool = ReplayBuffer::<f32>::new(k, 11);
    let mut seen: HashSet<u32> = HashSet::new();
    let mut stored_returns = 0;
    let queries = 10_000;
    for i in 0..(k + queries) {
        let q = Tensor::new(vec![1, 1], vec![i as f32]).unwrap();
        let out = pool.query(q).item() as u32;
        assert!(pool.len() <= k);
        seen.insert(i as u32);
        if i < k {
            assert_eq!(out, i as u32, "filling phase returns the query");
        } else if out != i as u32 {
            assert!(seen.contains(&out) && out < i as u32);
            stored_returns += 1;
        }
    }
    let rate = stored_returns as f64 / queries as f64;
    assert!((rate - 0.5).abs() <= 0.02, "stored-image rate {rate}");
    let mut empty = ReplayBuffer::<f32>::new(0, 1);
    let q = Tensor::new(vec![1], vec![3.0]).unwrap();
    assert_eq!(empty.query(q.clone()), q);
}

#[test]
fn training_checkpoints_and_translation() {
    let (x, y) = toy(16, 6, 2);
    let cfg = GanConfig { epochs: 3, checkpoint_epochs: vec![1, 10], ..tiny_config(16) };
    assert_eq!(cfg.effective_schedule(), vec![1, 3]);
    let run = train_cyclegan(&x, &y, &cfg).unwrap();
    assert_eq!(run.checkpoints.iter().map(|c| c.epoch).collect::<Vec<_>>(), vec![1, 3]);
    assert_eq!(run.log.len(), 3);
    let csv = run.log_csv().unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,loss_G,loss_F,loss_D_X,loss_D_Y,loss_cyc,loss_id");
    assert_eq!(csv.lines().count(), 4);

    let again = train_cyclegan(&x, &y, &cfg).unwrap();
    assert_eq!(again.checkpoints[1].hash, run.checkpoints[1].hash);

    let ckpt = run.checkpoints.last().unwrap();
    let out = translate(ckpt, &x, Direction::SourceToTarget).unwrap();
    assert_eq!(out.len(), x.len());
    for (o, i) in out.iter().zip(&x) {
        assert_eq!((o.width(), o.height()), (16, 16));
        assert_eq!(o.provenance(), Provenance::Synthetic);
        assert_eq!(o.source_ref(), Some(i.id()));
        assert_eq!(o.generator_ref(), Some(ckpt.hash.as_str()));
        assert_eq!(o.label(), "SSA");
    }
    let twice = translate(ckpt, &[x[0].clone(), x[0].clone()], Direction::SourceToTarget).unwrap();
    assert_eq!(twice[0].pixels(), twice[1].pixels());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gan.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, *ckpt);
    let model = CycleGan::from_checkpoint(&loaded).unwrap();
    assert_eq!(model.epoch, 3);
    let batch = images_to_tensor(&[x[1].pixels(), x[2].pixels()]);
    let before = run.model.generate(&batch, Direction::TargetToSource).unwrap();
    let after = model.generate(&batch, Direction::TargetToSource).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(&after));
    assert_eq!(translate(&loaded, &x, Direction::SourceToTarget).unwrap()[0].pixels(), out[0].pixels());

    assert!(matches!(Checkpoint::load(&dir.path().join("missing.ckpt")), Err(GanError::MissingCheckpoint(_))));
    let (big, _) = toy(32, 1, 3);
    assert!(matches!(translate(ckpt, &big, Direction::SourceToTarget), Err(GanError::SizeMismatch { .. })));
}

#[test]
fn invalid_training_inputs() {
    let (x, y) = toy(16, 2, 4);
    let cfg = tiny_config(16);
    assert!(matches!(train_cyclegan(&[], &y, &cfg), Err(GanError::EmptyDomain("source"))));
    assert!(matches!(train_cyclegan(&x, &[], &cfg), Err(GanError::EmptyDomain("target"))));
    let (big, _) = toy(32, 1, 4);
    assert!(matches!(train_cyclegan(&big, &y, &cfg), Err(GanError::SizeMismatch { .. })));
}

#[test]
fn non_finite_loss_aborts_with_last_checkpoint() {
    let (x, y) = toy(16, 4, 5);
    let cfg = GanConfig { epochs: 1, checkpoint_epochs: vec![1], ..tiny_config(16) };
    let run = train_cyclegan(&x, &y, &cfg).unwrap();
    let good = run.checkpoints[0].clone();
    let mut model = run.model;
    model.config.epochs = 4;
    model.config.learning_rate = 1e38;
    match continue_training(model, &x, &y) {
        Err(GanError::NonFiniteLoss { epoch, last_good, .. }) => {
            assert_eq!(epoch, 2);
            let last_good = last_good.expect("a checkpoint from before the failure");
            assert_eq!(last_good.epoch, 1);
            let restored = CycleGan::from_checkpoint(&last_good).unwrap();
            let original = CycleGan::from_checkpoint(&good).unwrap();
            assert_eq!(restored.param_hash().unwrap(), original.param_hash().unwrap());
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|r| r.log)),
    }
}

#[test]
fn dcgan_sampling() {
    let (_, y) = toy(16, 8, 6);
    let cfg = DcganConfig {
        image_size: 16,
        latent_dim: 8,
        ngf: 4,
        ndf: 4,
        epochs: 2,
        batch_size: 4,
        ..DcganConfig::default()
    };
    let run = train_dcgan(&y, &cfg).unwrap();
    assert_eq!(run.log.len(), 2);
    assert_eq!(run.log_csv().unwrap().lines().next().unwrap(), "epoch,loss_G,loss_D");
    let ckpt = run.checkpoints.last().unwrap();
    let a = sample_dcgan(ckpt, 10, 1).unwrap();
    assert_eq!(a.len(), 10);
    assert!(a.iter().all(|t| t.width() == 16 && t.height() == 16 && t.label() == "SSA" && t.source_ref().is_none()));
    let b = sample_dcgan(ckpt, 10, 1).unwrap();
    let c = sample_dcgan(ckpt, 10, 2).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.pixels() == q.pixels()));
    assert!(a.iter().zip(&c).any(|(p, q)| p.pixels() != q.pixels()));
    assert!(sample_dcgan(ckpt, 0, 1).is_err());
    assert!(build_dcgan(&DcganConfig { image_size: 6, ..cfg.clone() }, "SSA").is_err());
    assert!(matches!(train_dcgan(&[], &cfg), Err(GanError::EmptyDomain(_))));
}

#[test]
fn generator_is_usable_standalone() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let arch = GeneratorArch { ngf: 4, n_downsampling: 2, n_residual_blocks: 2, edge_kernel: 7 };
    let g = ResnetGenerator::new(&mut store, "G", &arch, &mut rng).unwrap();
    let x: Tensor<f32> = Init::Normal { mean: 0.0, std: 1.0 }.sample(&[1, 3, 64, 64], &mut rng);
    let mut graph = Graph::eval(&store);
    let xv = graph.input(x);
    let y = g.forward(&mut graph, xv).unwrap();
    assert_eq!(graph.shape(y), &[1, 3, 64, 64]);
    let _ = rng.random::<u8>();
}
