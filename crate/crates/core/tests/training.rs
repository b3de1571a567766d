use corncount::augment::Sample;
use corncount::densitymap::{generate_density_map, integrate_count, SigmaPolicy};
use corncount::model::{checkpoint, Network, NetworkConfig};
use corncount::raster::Image;
use corncount::ssl::{self, SslConfig};
use corncount::train::{evaluate_val, train_teacher, CheckpointPlan, TrainingConfig};
use corncount::{Error, ErrorCategory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn patches(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let pts: Vec<(f64, f64)> = (0..rng.gen_range(0..6))
                .map(|_| (rng.gen_range(0.0..24.0), rng.gen_range(0.0..24.0)))
                .collect();
            let mut img = Image::new(24, 24, 3);
            img.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.0..0.2));
            for &(x, y) in &pts {
                for c in 0..3 {
                    img.set(c, y as usize, x as usize, 1.0);
                }
            }
            let map = generate_density_map(24, 24, &pts, &SigmaPolicy::default()).unwrap();
            Sample::new(img, map).unwrap()
        })
        .collect()
}

fn quick(iterations: usize) -> TrainingConfig {
    TrainingConfig {
        iterations,
        batch_size: 4,
        lr_initial: 1e-3,
        lr_final: 1e-4,
        val_every: 2,
        checkpoint_every: 3,
        ..TrainingConfig::default()
    }
}

#[test]
fn teacher_training_is_deterministic_and_checkpointed() {
    let data = patches(20, 1);
    let dir = tempfile::tempdir().unwrap();
    let plan = CheckpointPlan { dir: Some(dir.path().to_path_buf()), role: "teacher".into() };
    let a = train_teacher(&data, Network::build(NetworkConfig::desk()).unwrap(), &quick(7), &plan).unwrap();
    let b = train_teacher(&data, Network::build(NetworkConfig::desk()).unwrap(), &quick(7), &CheckpointPlan::default())
        .unwrap();
    assert_eq!(a.network.params(), b.network.params());
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 7);
    assert_eq!(a.val_indices.len(), 2);
    for f in ["teacher_0000003.ckpt", "teacher_0000006.ckpt", "teacher_final.ckpt", "teacher_history.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let (restored, meta) = checkpoint::load(dir.path().join("teacher_final.ckpt")).unwrap();
    assert_eq!(restored.params(), a.network.params());
    assert_eq!(meta["iteration"], "7");
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut data = patches(8, 2);
    for s in &mut data {
        s.density.values_mut()[0] = f32::NAN;
    }
    let err = train_teacher(&data, Network::build(NetworkConfig::desk()).unwrap(), &quick(3), &CheckpointPlan::default())
        .unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Numerical);
    let msg = err.to_string();
    assert!(msg.contains("iteration 0") && msg.contains("patch"), "{msg}");
}

#[test]
fn empty_validation_set_is_an_error() {
    let net = Network::build(NetworkConfig::desk()).unwrap();
    assert!(matches!(evaluate_val(&net, &[]), Err(Error::Argument(_))));
}

#[test]
fn teacher_pseudo_student_round() {
    let labeled = patches(24, 3);
    let teacher = train_teacher(&labeled, Network::build(NetworkConfig::desk()).unwrap(), &quick(4), &CheckpointPlan::default())
        .unwrap()
        .network;
    let unlabeled: Vec<(String, Image)> = patches(5, 4)
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("u{i}"), s.image))
        .collect();
    let pseudo = ssl::pseudo_label(&teacher, &unlabeled).unwrap();
    assert_eq!(pseudo.len(), 5);
    for (e, (id, img)) in pseudo.entries.iter().zip(&unlabeled) {
        assert_eq!(&e.provenance.source_id, id);
        let direct = integrate_count(&teacher.forward(img).unwrap(), None).unwrap();
        assert_eq!(integrate_count(&e.density, None).unwrap(), direct);
    }
    let cfg = SslConfig {
        noisy_copies_per_image: 3,
        batch_size: 4,
        pseudo_per_batch: 1,
        labeled_per_batch: 3,
        student_iterations: 5,
        seed: 1,
    };
    let noisy = ssl::make_noisy_copies(&pseudo, &cfg, &Default::default()).unwrap();
    assert_eq!(noisy.len(), 15);
    let student = ssl::train_student(
        &labeled,
        &noisy,
        NetworkConfig { seed: 9, ..NetworkConfig::desk() },
        &cfg,
        &quick(100),
        &CheckpointPlan::default(),
    )
    .unwrap();
    assert_eq!(student.history.len(), 5);
    assert_ne!(student.network.params(), teacher.params());
}
