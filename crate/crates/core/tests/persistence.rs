use std::fs;
use std::io::BufReader;

use evifuse::checkpoint::Checkpoint;
use evifuse::config::ExperimentConfig;
use evifuse::experiment::{fresh_base, prepare_data};
use evifuse::training::{train_stage1, train_stage2, TrainConfig};
use evifuse::synth::Dataset;
use evifuse::Error;

fn small_settings() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.network.feature_layer_sizes = vec![8, 6];
    c.network.mff_start_layer = 1;
    c.network.group_count = 4;
    c
}

#[test]
fn trained_model_survives_the_file_round_trip() {
    let cfg = small_settings();
    let data = prepare_data(2, &cfg.run_settings()).unwrap();
    let train = TrainConfig {
        stage1_batches: 5,
        stage2_batches: 3,
        learning_rate: 1e-3,
        ..cfg.train(2)
    };
    let (mut model, mut rng) = fresh_base(2, &cfg.network(), &data).unwrap();
    for (n, b) in model.branches.iter_mut().enumerate() {
        train_stage1(b, &data.stage1[n], &train).unwrap();
    }
    let refs: Vec<&Dataset> = data.stage2.iter().collect();
    model.attach_cross(&refs, &mut rng).unwrap();
    train_stage2(&mut model, &refs, &train).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.evf");
    let b = dir.path().join("b.evf");
    Checkpoint::Eif(model.clone()).save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let loaded = loaded.into_eif().unwrap();
    assert_eq!(loaded, model);
    let x = evifuse::model::inputs_tensor(&data.target_eval[1].inputs[..50]).unwrap();
    assert_eq!(loaded.eif_forward(&x).unwrap(), model.eif_forward(&x).unwrap());

    let bytes = fs::read(&a).unwrap();
    fs::write(&b, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(Checkpoint::load(&b), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::load(&dir.path().join("missing.evf")), Err(Error::Io(_))));
}

#[test]
fn dataset_files_round_trip() {
    let data = prepare_data(4, &ExperimentConfig::default().run_settings()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for d in data.source_test.iter().chain(&data.adapt).chain([&data.ood]) {
        let p = dir.path().join(format!("{}.csv", d.domain_id));
        d.write_to(fs::File::create(&p).unwrap()).unwrap();
        let back = Dataset::read_from(BufReader::new(fs::File::open(&p).unwrap())).unwrap();
        assert_eq!(&back, d);
    }
}

#[test]
fn desk_preset_parses() {
    let p = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets/desk.toml");
    let c = ExperimentConfig::load(&p).unwrap();
    assert_eq!(c.experiment.seeds.len(), 5);
    assert_eq!(c.experiment.variants.len(), 8);
    assert_eq!(c.train(1).stage1_batches, 4000);
    let text = c.to_text().unwrap();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
}

#[test]
fn config_file_errors_carry_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    fs::write(&p, "[train]\nlambda = 0.0\n").unwrap();
    match ExperimentConfig::load(&p) {
        Err(Error::Config(m)) => {
            assert!(m.contains("c.toml"), "{m}");
            assert!(m.contains("lambda"), "{m}");
        }
        other => panic!("{other:?}"),
    }
}
