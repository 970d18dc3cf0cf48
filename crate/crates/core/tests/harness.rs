//! Training, evaluation and prediction on a reduced model.

use std::fs;
use std::path::Path;

use lafb::checkpoint::{self, manifest_counts};
use lafb::config::RunConfig;
use lafb::harness::{self, CHECKPOINT_FILE, MANIFEST_FILE, TRACE_FILE, TRAIN_LOG_FILE};
use lafb::params::InitScheme;
use lafb::network::Model;
use lafb::synthdata::{self, GenConfig, Mix, Sample, Split};
use lafb::tensor::Tensor;
use lafb::Error;

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.input_size = 32;
    c.model.stem_channels = 4;
    c.model.channels = [4, 6, 8, 8];
    c.model.decoder_width = 6;
    c.optim.batch_size = 4;
    c.optim.epochs = 2;
    c
}

fn data(count: usize, split: Split, size: usize) -> Vec<Sample> {
    synthdata::generate(&GenConfig {
        seed: 3,
        count,
        mix: Mix::uniform(),
        height: size,
        width: size,
        split,
    })
    .unwrap()
}

fn counts(dir: &Path) -> Vec<(String, usize)> {
    manifest_counts(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap())
}

#[test]
fn run_writes_logs_and_checkpoint_and_is_reproducible() {
    let train = data(8, Split::Train, 32);
    let val = data(4, Split::Test, 32);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = harness::train_samples(&small(), &train, Some(&val), Some(&a)).unwrap();
    let rb = harness::train_samples(&small(), &train, Some(&val), Some(&b)).unwrap();
    for f in [CHECKPOINT_FILE, TRAIN_LOG_FILE, TRACE_FILE, harness::VAL_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{}", f);
    }
    assert_eq!(ra.log, rb.log);

    // rows ordered by (epoch, step); two epochs of two steps
    let steps: Vec<(usize, usize)> = ra.log.steps.iter().map(|s| (s.epoch, s.step)).collect();
    assert_eq!(steps, vec![(1, 1), (1, 2), (2, 3), (2, 4)]);
    assert_eq!(ra.log.trace.len(), 2 * 4);
    assert_eq!(ra.log.val.len(), 2);
    let trace = harness::read_trace(&a.join(TRACE_FILE)).unwrap();
    assert_eq!(trace, ra.log.trace);
    let log = fs::read_to_string(a.join(TRAIN_LOG_FILE)).unwrap();
    assert!(log.starts_with("epoch,step,l2,l3,l4,l5,smooth,dice,total\n"));
    assert_eq!(log.lines().count(), 5);

    // the saved checkpoint is the final state
    let (cfg, _, store) = harness::load_run(&a.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(cfg, small());
    assert_eq!(store.to_named(), ra.store.to_named());
}

#[test]
fn loss_halves_on_a_small_set() {
    let mut cfg = small();
    cfg.optim.epochs = 100;
    let train = data(16, Split::Train, 32);
    let r = harness::train_samples(&cfg, &train, None, None).unwrap();
    let first = r.log.steps[0].report.total;
    let last = r.log.epoch_loss(cfg.optim.epochs).unwrap();
    assert!(last < 0.5 * first, "{} -> {}", first, last);
}

#[test]
fn trained_model_beats_untrained_on_its_training_set() {
    let mut cfg = small();
    cfg.optim.epochs = 6;
    let train = data(16, Split::Train, 32);
    let r = harness::train_samples(&cfg, &train, None, None).unwrap();
    let (model, store) = Model::build(cfg.model_config().unwrap(), InitScheme::Uniform, cfg.seed).unwrap();
    let before = harness::evaluate_samples(&model, &store, &train, 4).unwrap();
    let after = harness::evaluate_samples(&r.model, &r.store, &train, 4).unwrap();
    assert!(after.overall.mae < before.overall.mae);
}

#[test]
fn no_afb_has_an_empty_bank_and_no_trace() {
    let mut cfg = small();
    cfg.ablation.no_afb = true;
    cfg.optim.epochs = 1;
    let tmp = tempfile::tempdir().unwrap();
    let r = harness::train_samples(&cfg, &data(4, Split::Train, 32), None, Some(tmp.path())).unwrap();
    assert!(counts(tmp.path()).contains(&("bank".to_string(), 0)));
    assert!(r.log.trace.is_empty());
    let mut cfg = small();
    cfg.ablation.no_aem = true;
    cfg.optim.epochs = 1;
    harness::train_samples(&cfg, &data(4, Split::Train, 32), None, Some(tmp.path())).unwrap();
    assert!(counts(tmp.path()).iter().any(|(k, v)| k == "bank" && *v > 0));
}

#[test]
fn invalid_sample_aborts_before_training_with_its_id() {
    let mut train = data(4, Split::Train, 32);
    train[2].gt.data_mut()[5] = 0.5;
    let tmp = tempfile::tempdir().unwrap();
    match harness::train_samples(&small(), &train, None, Some(tmp.path())) {
        Err(Error::Sample { id, .. }) => assert_eq!(id, "train_00002"),
        Err(other) => panic!("{}", other),
        Ok(_) => panic!("invalid sample accepted"),
    }
    assert!(!tmp.path().join(TRAIN_LOG_FILE).exists());
    let empty = harness::train_samples(&small(), &[], None, None);
    assert!(matches!(empty, Err(Error::Contract(_))));
}

fn zero_run(dir: &Path) {
    let cfg = small();
    let (_, store) = Model::build(cfg.model_config().unwrap(), InitScheme::Zeros, 1).unwrap();
    harness::save_run(dir, &cfg, &store).unwrap();
}

#[test]
fn zero_model_predicts_uniform_128_at_input_size() {
    let tmp = tempfile::tempdir().unwrap();
    zero_run(tmp.path());
    let s = data(1, Split::Test, 48).remove(0);
    let rgb = tmp.path().join("rgb.png");
    let aux = tmp.path().join("aux.png");
    synthdata::save_rgb_png(&rgb, &s.rgb).unwrap();
    synthdata::save_rgb_png(&aux, &s.aux).unwrap();
    let out = tmp.path().join("s.png");
    let ckpt = tmp.path().join(CHECKPOINT_FILE);
    let map = harness::predict_files(&ckpt, &rgb, &aux, &out).unwrap();
    assert_eq!(map.shape(), &[1, 48, 48]);
    let bytes = fs::read(&out).unwrap();
    let img = image::open(&out).unwrap();
    assert_eq!(img.color(), image::ColorType::L8);
    let img = img.to_luma8();
    assert_eq!(img.dimensions(), (48, 48));
    assert!(img.pixels().all(|p| p.0[0] == 128));
    harness::predict_files(&ckpt, &rgb, &aux, &out).unwrap();
    assert_eq!(fs::read(&out).unwrap(), bytes);

    let missing = harness::predict_files(&ckpt, &tmp.path().join("nope.png"), &aux, &out);
    assert!(matches!(missing, Err(Error::Image { .. }) | Err(Error::Io { .. })));
}

#[test]
fn evaluation_reports_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    zero_run(tmp.path());
    let ckpt = tmp.path().join(CHECKPOINT_FILE);
    let test = data(6, Split::Test, 32);
    let labelled = tmp.path().join("labelled");
    synthdata::save_dataset(&labelled, Split::Test, &test, &[]).unwrap();
    let out = tmp.path().join("eval");
    let r = harness::evaluate(&ckpt, &labelled, &out).unwrap();
    assert!(r.per_challenge.is_some());
    // every prediction is 0.5, so each image's MAE is 0.5
    assert!((r.overall.mae - 0.5).abs() < 1e-12);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("LI_MAE"));
    assert_eq!(harness::evaluate(&ckpt, &labelled, &out).unwrap(), r);

    // no label files: no per-challenge columns
    fs::remove_dir_all(labelled.join("labels")).unwrap();
    let r = harness::evaluate(&ckpt, &labelled, &out).unwrap();
    assert!(r.per_challenge.is_none());
    assert!(!fs::read_to_string(out.join("metrics.csv")).unwrap().contains("LI_MAE"));

    let empty = tmp.path().join("empty");
    synthdata::save_dataset(&empty, Split::Test, &[], &[]).unwrap();
    let before = fs::read(out.join("metrics.csv")).unwrap();
    assert!(matches!(harness::evaluate(&ckpt, &empty, &out), Err(Error::Contract(_))));
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), before);
}

#[test]
fn checkpoint_and_config_must_agree() {
    let tmp = tempfile::tempdir().unwrap();
    zero_run(tmp.path());
    let ckpt = tmp.path().join(CHECKPOINT_FILE);
    let m = tmp.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&m).unwrap().replace("decoder_width = 6", "decoder_width = 5");
    fs::write(&m, text).unwrap();
    assert!(harness::load_run(&ckpt).is_err());
    fs::write(&m, "garbage").unwrap();
    assert!(matches!(harness::load_run(&ckpt), Err(Error::Format { .. })));
    fs::write(&ckpt, b"LAFBCKPT").unwrap();
    assert!(checkpoint::load(&ckpt).is_err());
}

#[test]
fn predict_rejects_mismatched_pair() {
    let cfg = small();
    let (model, store) = Model::build(cfg.model_config().unwrap(), InitScheme::Zeros, 1).unwrap();
    let r = harness::predict_pair(&model, &store, &Tensor::zeros([3, 8, 8]), &Tensor::zeros([3, 8, 9]));
    assert!(matches!(r, Err(Error::Dimension { .. })));
}
