use std::collections::BTreeMap;
use std::fs;

use dragan::config::RunConfig;
use dragan::session::{read_metrics_log, run_training, truncate_metrics_log, Session, METRICS_LOG};
use dragan::training::{Circle, SceneSample, TrainingSet};
use dragan::Rng;

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("resolution", "16"),
        ("base_width", "2"),
        ("critic_width", "2"),
        ("scales", "2"),
        ("scale_weights", "1,1"),
        ("batch_size", "2"),
        ("n_critic", "1"),
        ("checkpoint_every", "1"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn data() -> TrainingSet<f32> {
    let mut rng = Rng::new(12);
    let mut samples = Vec::new();
    let mut pictograms = BTreeMap::new();
    for class in [0u32, 1] {
        pictograms.insert(class, rng.uniform_tensor(&[3, 16, 16], -1.0, 1.0));
        for _ in 0..2 {
            samples.push(SceneSample {
                image: rng.uniform_tensor(&[3, 16, 16], -1.0, 1.0),
                class_id: class,
                category: 0,
                circle: Circle { cx: 8.0, cy: 8.0, r: 4.0 },
            });
        }
    }
    TrainingSet::new(16, samples, pictograms).unwrap()
}

#[test]
fn divergence_names_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut session = Session::new(tiny_config()).unwrap();
    run_training(&mut session, &data(), dir.path(), 2, |_| {}).unwrap();
    session.config.train.adam.lr = 1e30;
    let err = run_training(&mut session, &data(), dir.path(), 50, |_| {}).unwrap_err().to_string();
    assert!(err.contains("non-finite"), "{err}");
    assert!(err.contains("last good checkpoint") && err.contains("ckpt_"), "{err}");
    let log = read_metrics_log(&dir.path().join(METRICS_LOG)).unwrap();
    assert_eq!(log.len(), session.iteration);
}

#[test]
fn metrics_log_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let mut session = Session::new(tiny_config()).unwrap();
    run_training(&mut session, &data(), dir.path(), 4, |_| {}).unwrap();
    let path = dir.path().join(METRICS_LOG);
    truncate_metrics_log(&path, 2).unwrap();
    let kept = read_metrics_log(&path).unwrap();
    assert_eq!(kept.iter().map(|m| m.iteration).collect::<Vec<_>>(), [0, 1]);
    let err = truncate_metrics_log(&path, 5).unwrap_err().to_string();
    assert!(err.contains("2 records"), "{err}");

    fs::write(&path, "0 0 0 0 0 0 0 0 0 0\n7 0 0 0 0 0 0 0 0 0\n").unwrap();
    assert!(truncate_metrics_log(&path, 2).is_err());
}

#[test]
fn observer_sees_every_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let mut session = Session::new(tiny_config()).unwrap();
    let mut seen = Vec::new();
    run_training(&mut session, &data(), dir.path(), 3, |m| seen.push(m.iteration)).unwrap();
    assert_eq!(seen, [0, 1, 2]);
    for m in read_metrics_log(&dir.path().join(METRICS_LOG)).unwrap() {
        assert!(m.all_finite());
        assert!(m.gp.iter().all(|&g| g >= 0.0));
        assert_eq!(m.d_loss[0], 0.0, "unused 20 px slot must stay zero with two scales");
    }
}
