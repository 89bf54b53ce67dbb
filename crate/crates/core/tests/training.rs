use candle_core::{DType, Device};
use vitsplice::dump::dump_features;
use vitsplice::inversion::{capture_target, invert, invert_cls_across_layers, Facet, InversionConfig, InversionMode};
use vitsplice::trainer::{read_loss_log, train, RunDir, TrainConfig, Trainer};
use vitsplice::{Backbone, Error, ExecPolicy, ImageTensor, SyntheticBackbone};

fn tiny_backbone() -> Backbone {
    let archive = SyntheticBackbone {
        patch_size: 8,
        num_layers: 2,
        embed_dim: 16,
        num_heads: 2,
        mlp_hidden: 32,
        native_grid: 4,
        seed: 11,
    }
    .build();
    Backbone::from_archive(&archive, &Device::Cpu, DType::F32).unwrap()
}

fn images() -> (ImageTensor, ImageTensor) {
    (
        ImageTensor::from_fn(32, 32, |c, y, x| ((y / 4 + x / 4 + c) % 3) as f32 / 2.0),
        ImageTensor::from_fn(32, 32, |c, y, x| 0.2 + 0.6 * ((x + 2 * y + 5 * c) % 7) as f32 / 6.0),
    )
}

fn tiny_config(iterations: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.trainer.total_iterations = iterations;
    c.trainer.feature_resize = 32;
    c.trainer.clean_pair_period = 3;
    c.trainer.checkpoint_period = 0;
    c
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let bb = tiny_backbone();
    let (s, t) = images();
    let straight = train(&bb, &s, &t, &tiny_config(6), None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(&bb, s.clone(), t.clone(), tiny_config(6))
        .unwrap()
        .with_run_dir(RunDir::create(dir.path()).unwrap())
        .unwrap();
    for _ in 0..4 {
        first.step().unwrap();
    }
    first.state().save(RunDir::open(dir.path()).unwrap().checkpoint(4)).unwrap();
    drop(first);

    let resumed = Trainer::resume(&bb, s.clone(), t.clone(), RunDir::open(dir.path()).unwrap()).unwrap();
    assert_eq!(resumed.state().iteration, 4);
    let outcome = resumed.run().unwrap();

    assert_eq!(outcome.history, straight.history);
    assert_eq!(outcome.output, straight.output);
    assert_eq!(
        outcome.state.generator.to_archive().unwrap().checksum(),
        straight.state.generator.to_archive().unwrap().checksum()
    );
    let logged = read_loss_log(RunDir::open(dir.path()).unwrap().loss_log()).unwrap();
    assert_eq!(logged, straight.history);
}

#[test]
fn run_directory_layout() {
    let bb = tiny_backbone();
    let (s, t) = images();
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(4);
    config.trainer.checkpoint_period = 2;
    config.trainer.intermediate_period = 2;
    train(&bb, &s, &t, &config, Some(RunDir::create(dir.path()).unwrap())).unwrap();
    let root = dir.path();
    for rel in [
        "config.snapshot",
        "losses.log",
        "checkpoints/iter_2",
        "checkpoints/iter_4",
        "outputs/final.png",
        "outputs/intermediate_2.png",
    ] {
        assert!(root.join(rel).exists(), "{rel} missing");
    }
    let run = RunDir::open(root).unwrap();
    assert_eq!(run.read_config().unwrap(), config);
    assert_eq!(run.latest_checkpoint().unwrap().unwrap().0, 4);
    assert_eq!(run.read_log().unwrap().len(), 4);
}

#[test]
fn clean_pair_joins_the_batch_on_schedule() {
    let bb = tiny_backbone();
    let (s, t) = images();
    let mut trainer = Trainer::new(&bb, s.clone(), t.clone(), tiny_config(6)).unwrap();
    let mut sizes = Vec::new();
    for _ in 0..6 {
        sizes.push(trainer.next_batch().unwrap().len());
        trainer.state_mut().iteration += 1;
    }
    assert_eq!(sizes, vec![1, 1, 2, 1, 1, 2]);
}

#[test]
fn backbone_stays_frozen_during_training() {
    let bb = tiny_backbone();
    let (s, t) = images();
    let before = bb.current_checksum().unwrap();
    train(&bb, &s, &t, &tiny_config(3), None).unwrap();
    assert_eq!(bb.current_checksum().unwrap(), before);
    assert_eq!(bb.checksum(), before);
}

#[test]
fn mismatched_inversion_size_is_reported() {
    let bb = tiny_backbone();
    let (s, _) = images();
    let target = capture_target(&bb, &s, Facet::Keys, 2, 32).unwrap();
    let config = InversionConfig {
        iterations: 2,
        output_size: (48, 32),
        feature_size: 32,
        ..Default::default()
    };
    assert!(matches!(invert(&bb, &target, &config), Err(Error::Shape(_))));
}

#[test]
fn inversion_reduces_distance_and_depends_on_seed() {
    let bb = tiny_backbone();
    let (s, _) = images();
    let target = capture_target(&bb, &s, Facet::Cls, 2, 32).unwrap();
    let config = |seed| InversionConfig {
        iterations: 8,
        learning_rate: 1e-2,
        output_size: (32, 32),
        feature_size: 32,
        noise_seed: seed,
        ..Default::default()
    };
    let a = invert(&bb, &target, &config(0)).unwrap();
    let again = invert(&bb, &target, &config(0)).unwrap();
    let b = invert(&bb, &target, &config(1)).unwrap();
    assert_eq!(a.curve.len(), 9);
    assert!(a.best_distance < a.initial_distance());
    assert_eq!(a.curve, again.curve);
    assert_ne!(a.image, b.image);

    let pixel = invert(
        &bb,
        &target,
        &InversionConfig {
            mode: InversionMode::Pixel,
            ..config(0)
        },
    )
    .unwrap();
    assert!(pixel.best_distance <= pixel.initial_distance());

    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path(), &target, &config(0)).unwrap();
    for f in ["result.png", "distance_curve.log", "target.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn layer_sweep_is_independent_of_policy() {
    let bb = tiny_backbone();
    let (s, _) = images();
    let config = InversionConfig {
        iterations: 2,
        output_size: (32, 32),
        feature_size: 32,
        ..Default::default()
    };
    let seq = invert_cls_across_layers(&bb, &s, &[1, 2, 2], &config, ExecPolicy::Sequential).unwrap();
    let par = invert_cls_across_layers(&bb, &s, &[1, 2, 2], &config, ExecPolicy::Parallel).unwrap();
    assert_eq!(seq.len(), 3);
    for (a, b) in seq.iter().zip(&par) {
        assert_eq!(a.curve, b.curve);
    }
    assert_eq!(seq[1].curve, seq[2].curve);
}

#[test]
fn feature_dump_writes_manifest_and_tensors() {
    let bb = tiny_backbone();
    let (s, _) = images();
    let dir = tempfile::tempdir().unwrap();
    let m = dump_features(&bb, &s, &[1, 2], 32, dir.path()).unwrap();
    assert_eq!(m.grid, (4, 4));
    assert!(dir.path().join("manifest.json").exists());
    for e in &m.entries {
        let len = std::fs::metadata(dir.path().join(&e.file)).unwrap().len() as usize;
        assert_eq!(len, 4 * e.shape.iter().product::<usize>(), "{}", e.file);
    }
}
