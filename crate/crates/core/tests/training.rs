use rislab::channel::{Region, Scenario, ScenarioConfig};
use rislab::dataset::{generate_dataset, load_dataset, GenerationParams, PhaseMode, SampleRecord};
use rislab::localizer::{InputSource, Localizer, LocalizerBackbone, LocalizerConfig};
use rislab::reconstructor::{Reconstructor, ReconstructorConfig, SignalShape};
use rislab::backbone::BackboneFamily;
use rislab::Error;

fn records(count: u64, seed: u64) -> (SignalShape, Vec<SampleRecord>) {
    let mut cfg = ScenarioConfig::reference();
    cfg.noise_power_dbm = -150.0;
    let sc = Scenario::from_config(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.risd");
    let p = GenerationParams {
        region: Region::default_sampling(),
        count,
        phase_mode: PhaseMode::Fixed,
        seed,
        workers: 1,
    };
    generate_dataset(&sc, &p, &path).unwrap();
    (SignalShape::from_scenario(&sc.config), load_dataset(&path).unwrap().1)
}

fn recon_config(epochs: usize) -> ReconstructorConfig {
    let mut c = ReconstructorConfig::new(BackboneFamily::Tiny);
    c.width = Some(16);
    c.upsample_hw = [16, 16];
    c.epochs = epochs;
    c.batch_size = 8;
    c.seed = 4;
    c
}

fn loc_config(source: InputSource, epochs: usize) -> LocalizerConfig {
    let mut c = LocalizerConfig::new(LocalizerBackbone::Tiny, source);
    c.width = Some(16);
    c.upsample_hw = [16, 16];
    c.epochs = epochs;
    c.batch_size = 8;
    c.seed = 5;
    c
}

#[test]
fn reconstructor_overfits_small_set() {
    let (shape, recs) = records(32, 1);
    let (model, history) = Reconstructor::train(&recs, &recs, recon_config(500), shape).unwrap();
    assert_eq!(history.len(), 500);
    assert!(history.iter().all(|h| h.train_loss.is_finite() && h.val_loss.is_finite()));
    let nmse = model.evaluate(&recs).unwrap();
    let mean = nmse.iter().sum::<f64>() / nmse.len() as f64;
    assert!(mean <= 1e-2, "train NMSE {mean}");
}

#[test]
fn overfit_loss_is_non_increasing_per_ten_epoch_window() {
    let (shape, recs) = records(32, 1);
    let (_, history) = Reconstructor::train(&recs, &recs, recon_config(500), shape).unwrap();
    let windows: Vec<f64> = history
        .chunks(10)
        .map(|w| w.iter().map(|h| h.train_loss).sum::<f64>() / w.len() as f64)
        .collect();
    for (k, pair) in windows.windows(2).enumerate() {
        assert!(pair[1] <= pair[0], "window {k}: {} -> {}", pair[0], pair[1]);
    }
}

#[test]
fn reconstructor_training_is_deterministic() {
    let (shape, recs) = records(24, 2);
    let run = || Reconstructor::train(&recs[..16], &recs[16..], recon_config(3), shape).unwrap().1;
    let (a, b) = (run(), run());
    assert_eq!(a.last().unwrap().train_loss.to_bits(), b.last().unwrap().train_loss.to_bits());
}

#[test]
fn reconstructor_checkpoint_round_trip() {
    let (shape, recs) = records(16, 3);
    let (model, history) = Reconstructor::train(&recs, &recs, recon_config(2), shape).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("recon");
    model.save(&ck, false, &history).unwrap();
    assert!(matches!(model.save(&ck, false, &history), Err(Error::AlreadyExists(_))));
    model.save(&ck, true, &history).unwrap();
    let loaded = Reconstructor::load(&ck).unwrap();
    assert_eq!(loaded.config, model.config);
    assert_eq!(loaded.reconstruct_records(&recs).unwrap(), model.reconstruct_records(&recs).unwrap());
    let csv = std::fs::read_to_string(ck.join("history.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_loss"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn reconstructor_rejects_empty_training_set() {
    let (shape, recs) = records(4, 3);
    assert!(matches!(
        Reconstructor::train(&[], &recs, recon_config(1), shape),
        Err(Error::EmptySplit(_))
    ));
}

#[test]
fn localizer_overfits_small_set() {
    let (shape, recs) = records(32, 6);
    let (model, history) = Localizer::train(&recs, &recs, None, loc_config(InputSource::GroundTruthRis, 500), shape).unwrap();
    let est = model.locate(&recs, None).unwrap();
    let err = est.iter().zip(&recs).map(|(p, r)| p.distance(&r.p_u)).sum::<f64>() / recs.len() as f64;
    assert!(err <= 0.1, "mean train error {err} m");
    assert!(history.iter().all(|h| h.val_mean_pos_err_m.is_finite()));
    assert_eq!(history[0].trainable_blocks, 0);
    assert_eq!(history[12].trainable_blocks, 2);
    assert_eq!(history.last().unwrap().trainable_blocks, 4);
}

#[test]
fn frozen_backbone_is_untouched() {
    let (shape, recs) = records(12, 7);
    let mut c = LocalizerConfig::new(LocalizerBackbone::Densenet121LikeRandom, InputSource::BsBaseline);
    c.width = Some(4);
    c.upsample_hw = [16, 16];
    c.epochs = 1;
    c.batch_size = 4;
    c.unfreeze_schedule = vec![(5, 1)];
    let fresh = Localizer::build(
        c.clone(),
        shape,
        rislab::preprocess::ChannelStats { mean: vec![0.0; 2], std: vec![1.0; 2] },
        rislab::preprocess::ChannelStats { mean: vec![0.0; 3], std: vec![1.0; 3] },
    )
    .unwrap();
    let (trained, _) = Localizer::train(&recs, &recs, None, c, shape).unwrap();
    let mut head_changed = false;
    for (a, b) in fresh.store.params().iter().zip(trained.store.params()) {
        if a.name.starts_with("backbone") {
            assert_eq!(a.value.data(), b.value.data(), "{} changed", a.name);
        } else if a.value.data() != b.value.data() {
            head_changed = true;
        }
    }
    for (a, b) in fresh.store.buffers().iter().zip(trained.store.buffers()) {
        assert_eq!(a.value.data(), b.value.data(), "{} changed", a.name);
    }
    assert!(head_changed);
}

#[test]
fn baseline_and_reconstructed_differ_only_in_input() {
    let (shape, recs) = records(16, 8);
    let (rec, _) = Reconstructor::train(&recs, &recs, recon_config(1), shape).unwrap();
    let (a, _) = Localizer::train(&recs, &recs, Some(&rec), loc_config(InputSource::Reconstructed, 1), shape).unwrap();
    let (b, _) = Localizer::train(&recs, &recs, None, loc_config(InputSource::BsBaseline, 1), shape).unwrap();
    for prefix in ["expand", "backbone", "head"] {
        assert_eq!(a.store.num_scalars_with_prefix(prefix), b.store.num_scalars_with_prefix(prefix));
    }
    assert_eq!(a.store.num_scalars(), b.store.num_scalars());
    assert!(matches!(
        Localizer::train(&recs, &recs, None, loc_config(InputSource::Reconstructed, 1), shape),
        Err(Error::MissingArtifact(_))
    ));
}

#[test]
fn localizer_checkpoint_and_determinism() {
    let (shape, recs) = records(16, 9);
    let run = || Localizer::train(&recs, &recs, None, loc_config(InputSource::BsBaseline, 2), shape).unwrap();
    let (model, history) = run();
    assert_eq!(history.last().unwrap().train_loss.to_bits(), run().1.last().unwrap().train_loss.to_bits());
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), false, &history).unwrap();
    let loaded = Localizer::load(dir.path()).unwrap();
    assert_eq!(loaded.locate(&recs, None).unwrap(), model.locate(&recs, None).unwrap());
    let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("val_mean_pos_err_m"));
}
