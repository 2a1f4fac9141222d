use mdif_core::kernel::{grad_check, Tensor};
use mdif_core::latent::{global_connection, hat_latent_at, LatentHierarchy, LevelSpec};
use mdif_core::net::{
    batch_gradients, mean_abs_error, multilevel_loss, train_for, Ablations, Field, Model, ModelConfig, TrainState,
    TrainingShape,
};
use mdif_core::sdf::{bake_grid, sample_near_surface, sample_uniform, PointBatch, PointRole, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn miniature() -> ModelConfig {
    ModelConfig {
        levels: LevelSpec::new(vec![(1, 4), (2, 2)]).unwrap(),
        input_res: 4,
        encoder_channels: vec![2, 3],
        decoder_hidden: vec![5, 4],
        dropout: 0.5,
        batch_size: 2,
        points_per_set: 6,
        seed: 11,
        ..Default::default()
    }
}

fn training_shape(shape: &Shape, res: usize, n: usize, seed: u64) -> TrainingShape {
    TrainingShape {
        grid: bake_grid(shape, res).unwrap(),
        uniform: sample_uniform(shape, n, seed).unwrap(),
        near_surface: sample_near_surface(shape, n, 0.04, seed + 1).unwrap(),
    }
}

fn random_hierarchy(spec: &LevelSpec, scale: f64, rng: &mut ChaCha8Rng) -> LatentHierarchy<f64> {
    let v: Vec<f64> = (0..spec.scalar_count()).map(|_| rng.random_range(-scale..scale)).collect();
    LatentHierarchy::from_flat(spec, &v).unwrap()
}

fn perturb_biases(model: &mut Model<f64>, rng: &mut ChaCha8Rng) {
    for t in model.params.tensors_mut() {
        if t.ndim() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
}

#[test]
fn end_to_end_gradient_every_parameter_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for ablations in [
        Ablations::default(),
        Ablations { no_residual: true, ..Default::default() },
    ] {
        let config = ModelConfig { ablations, ..miniature() };
        let mut model = Model::<f64>::init(&config).unwrap();
        perturb_biases(&mut model, &mut rng);
        let shapes = [
            training_shape(&Shape::sphere(0.3), 4, 32, 3),
            training_shape(&Shape::sphere_union_box(), 4, 32, 5),
        ];
        let refs: Vec<&TrainingShape> = shapes.iter().collect();
        let loss_of = |m: &Model<f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            batch_gradients(m, &refs, &mut r).unwrap().1.loss
        };
        let (grads, _) = batch_gradients(&model, &refs, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let names = model.params.tensor_names();
        let analytic: Vec<Tensor<f64>> = grads.tensors().into_iter().cloned().collect();
        for (i, g) in analytic.iter().enumerate() {
            let base = model.params.tensors()[i].clone();
            let r = grad_check(base.data(), g.data(), |v| {
                let mut m = model.clone();
                m.params.tensors_mut()[i].data_mut().copy_from_slice(v);
                loss_of(&m)
            });
            assert!(r.max_rel_err < 1e-4, "{:?} {}: {r:?}", ablations, names[i]);
        }
    }
}

#[test]
fn residual_identity_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = ModelConfig {
        decoder_hidden: vec![32, 32, 16],
        ..Default::default()
    };
    let mut model = Model::<f64>::init(&config).unwrap();
    perturb_biases(&mut model, &mut rng);
    let spec = model.spec().clone();
    for _ in 0..10 {
        let z = random_hierarchy(&spec, 1.0, &mut rng);
        let field = Field::new(&model, &z).unwrap();
        let pts: Vec<[f64; 3]> = (0..100)
            .map(|_| [0; 3].map(|_| rng.random_range(-0.64..0.64)))
            .collect();
        for m in 1..spec.len() {
            let hi = field.aggregate(&pts, m).unwrap();
            let lo = field.aggregate(&pts, m - 1).unwrap();
            let hat = global_connection(z.grid(0), &model.params.global, m).unwrap();
            for (p, x) in pts.iter().enumerate() {
                let zm = z.latent_at(m, *x).unwrap();
                let zh = hat_latent_at(&hat, *x).unwrap();
                let r = model.decode_residual(m, zm.data(), zh.data()).unwrap();
                assert!((hi[p] - lo[p] - r).abs() < 1e-6);
            }
        }
        let s0 = field.aggregate(&pts[..5], 0).unwrap();
        for (p, x) in pts[..5].iter().enumerate() {
            assert!((s0[p] - model.decode_level0(z.grid(0).data(), *x).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn zeroed_residual_decoders_leave_level_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = ModelConfig {
        decoder_hidden: vec![16, 8],
        ..Default::default()
    };
    let mut model = Model::<f64>::init(&config).unwrap();
    for d in &mut model.params.decoders[1..] {
        d.tensors_mut().for_each(|t| t.fill(0.0));
    }
    let z = random_hierarchy(model.spec(), 1.0, &mut rng);
    let field = Field::new(&model, &z).unwrap();
    let pts = [[0.1, 0.2, -0.3], [0.5, -0.6, 0.0]];
    let s0 = field.aggregate(&pts, 0).unwrap();
    for m in 1..4 {
        assert_eq!(field.aggregate(&pts, m).unwrap(), s0);
    }
}

fn constant_model(level_outputs: &[f64]) -> Model<f64> {
    let levels: Vec<(usize, usize)> = (0..level_outputs.len()).map(|n| (1 << n, 2)).collect();
    let config = ModelConfig {
        levels: LevelSpec::new(levels).unwrap(),
        input_res: 8,
        encoder_channels: vec![2],
        decoder_hidden: vec![3],
        ..Default::default()
    };
    let mut model = Model::<f64>::init(&config).unwrap();
    for (d, &v) in model.params.decoders.iter_mut().zip(level_outputs) {
        d.tensors_mut().for_each(|t| t.fill(0.0));
        d.head.bias.data_mut()[0] = v;
    }
    model
}

#[test]
fn multilevel_loss_hand_values() {
    let one = PointBatch::new(PointRole::Uniform, vec![[0.1, 0.0, 0.0]], vec![0.05]).unwrap();
    let model = constant_model(&[0.03]);
    let z = LatentHierarchy::zeros(model.spec());
    let (l, terms) = multilevel_loss(&model, &z, &one).unwrap();
    assert!((l - 0.02).abs() < 1e-7 && terms.len() == 1);

    let batch = PointBatch::new(PointRole::Uniform, vec![[0.1, 0.2, 0.3], [-0.4, 0.0, 0.2]], vec![0.02, 0.02]).unwrap();
    let model = constant_model(&[0.03, 0.0]);
    let z = LatentHierarchy::zeros(model.spec());
    let (l, terms) = multilevel_loss(&model, &z, &batch).unwrap();
    assert!((l - 0.02).abs() < 1e-7, "{l}");
    assert!(terms.iter().all(|t| (t - 0.01).abs() < 1e-7));

    let exact = constant_model(&[0.02f32 as f64, 0.0]);
    assert_eq!(multilevel_loss(&exact, &z, &batch).unwrap().0, 0.0);
    assert!(multilevel_loss(&exact, &z, &PointBatch::empty(PointRole::Uniform)).is_err());
}

#[test]
fn loss_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Model::<f64>::init(&ModelConfig {
        decoder_hidden: vec![16],
        ..Default::default()
    })
    .unwrap();
    let z = random_hierarchy(model.spec(), 0.5, &mut rng);
    let batch = sample_uniform(&Shape::sphere(0.3), 300, 1).unwrap();
    let mut picks: Vec<usize> = (0..300).collect();
    picks.reverse();
    let a = multilevel_loss(&model, &z, &batch).unwrap().0;
    let b = multilevel_loss(&model, &z, &batch.select(&picks)).unwrap().0;
    assert!((a - b).abs() < 1e-12);
}

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_res: 16,
        encoder_channels: vec![8, 16],
        levels: LevelSpec::new(vec![(1, 32), (2, 8), (4, 4)]).unwrap(),
        decoder_hidden: vec![32, 32, 16],
        batch_size: 1,
        points_per_set: 256,
        seed,
        adam: mdif_core::kernel::AdamConfig::with_lr(1e-3),
        ..Default::default()
    }
}

#[test]
fn seeded_training_is_bit_reproducible() {
    let data = vec![
        training_shape(&Shape::sphere(0.3), 16, 2000, 1),
        training_shape(&Shape::sphere_union_box(), 16, 2000, 7),
    ];
    let config = ModelConfig { batch_size: 1, ..small_config(5) };
    let run = || {
        let mut s = TrainState::new(&config).unwrap();
        train_for(&mut s, &data, 10, |_| {}).unwrap();
        s
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.iteration, 10);

    // Resuming replays the same random streams.
    let mut c = TrainState::new(&config).unwrap();
    train_for(&mut c, &data, 4, |_| {}).unwrap();
    let mut d = c.clone();
    train_for(&mut d, &data, 6, |_| {}).unwrap();
    assert_eq!(d, a);
}

#[test]
fn training_reduces_loss_on_a_sphere() {
    let data = vec![training_shape(&Shape::sphere(0.3), 16, 4000, 2)];
    let mut s = TrainState::new(&small_config(1)).unwrap();
    let probe = sample_near_surface(&Shape::sphere(0.3), 2000, 0.04, 77).unwrap();
    let before = {
        let z = s.model.encode(&data[0].grid).unwrap();
        multilevel_loss(&s.model, &z, &probe).unwrap().0
    };
    train_for(&mut s, &data, 200, |_| {}).unwrap();
    let z = s.model.encode(&data[0].grid).unwrap();
    let after = multilevel_loss(&s.model, &z, &probe).unwrap().0;
    assert!(after < before, "{after} >= {before}");
    assert!(mean_abs_error(&s.model, &z, &probe, 2).unwrap() < 0.05);
    assert!(s.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn ablations_train_without_error() {
    let data = vec![training_shape(&Shape::sphere_union_box(), 16, 1000, 3)];
    let variants = [
        Ablations { no_residual: true, ..Default::default() },
        Ablations { no_global_connection: true, ..Default::default() },
        Ablations { no_dropout: true, ..Default::default() },
        Ablations { global_only: true, ..Default::default() },
        Ablations { local_only: true, ..Default::default() },
    ];
    for ablations in variants {
        let config = ModelConfig { ablations, ..small_config(2) };
        let mut s = TrainState::new(&config).unwrap();
        train_for(&mut s, &data, 3, |_| {}).unwrap();
        assert!(s.model.params.is_finite(), "{ablations:?}");
        let expected = if ablations.global_only || ablations.local_only { 1 } else { 3 };
        assert_eq!(s.model.num_levels(), expected);
    }
}
