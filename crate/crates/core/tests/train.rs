use std::path::Path;

use seld_core::data::{events_to_frames, synth_scene, write_labels, write_manifest, write_wav, ManifestEntry, SceneSpec};
use seld_core::metrics::{seld_score, EventList};
use seld_core::model::{count_params_macs, SeldModel};
use seld_core::objective::{LossWeights, Stage};
use seld_core::params::ParamStore;
use seld_core::train::{
    bench_scan, describe_checkpoint, describe_config, evaluate_checkpoint, loglog_slope, score_events, train, AdamW,
    Checkpoint, Dataset, RunConfig, StagePlan, CHECKPOINT_FILE,
};
use seld_autodiff::Tensor;
use std::collections::BTreeMap;

/// A run small enough for unit tests.
fn micro(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(
        "preset = desk
         model.n_classes = 3
         model.conv_channels = 2,3,3,4
         model.embed_dim = 4
         model.state_dim = 2
         features.n_mels = 32
         schedule.epochs = 2
         schedule.halve_at = 1
         train.batch_size = 2
         data.segments = 3
         data.segment_seconds = 1.0
         data.event_seconds = 0.3,0.8",
    )
    .unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

#[test]
fn presets_follow_the_reference_schedule() {
    let p = RunConfig::default();
    assert_eq!((p.optim.lr, p.schedule.halve_at, p.schedule.epochs), (3e-4, 65, 80));
    assert_eq!((p.optim.beta1, p.optim.beta2, p.optim.weight_decay), (0.9, 0.999, 0.01));
    assert_eq!(p.batch_size, 8);
    assert_eq!(p.sed_threshold, 0.5);
    let d = RunConfig::preset("desk").unwrap();
    assert_eq!((d.schedule.epochs, d.schedule.halve_at), (30, 24));
    assert_eq!(d.data.segments, 200);
    assert!(RunConfig::preset("huge").is_err());
    assert_eq!(p.schedule.lr(1.0, 64), 1.0);
    assert_eq!(p.schedule.lr(1.0, 65), 0.5);
}

#[test]
fn snapshot_round_trips() {
    for name in ["full", "desk"] {
        let cfg = RunConfig::preset(name).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
    let cfg = micro(Path::new("/tmp/x"));
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn parse_errors_name_the_line() {
    let e = RunConfig::parse("optim.lr = 1e-3\nmodel.bogus = 3\n").unwrap_err();
    assert!(e.to_string().contains("line 2") && e.to_string().contains("bogus"), "{e}");
    let e = RunConfig::parse("optim.lr 1e-3\n").unwrap_err();
    assert!(e.to_string().contains("line 1"), "{e}");
    assert!(RunConfig::parse("model.conv_channels = 1,2,3\n").is_err());
    assert!(RunConfig::parse("data.segment_seconds = 1.05\n").is_err());
    assert!(RunConfig::parse("train.stage_plan = three\n").is_err());
}

#[test]
fn environment_overrides_dotted_keys() {
    let mut cfg = RunConfig::default();
    cfg.apply_env([
        ("SELD_OPTIM__LR".to_string(), "0.01".to_string()),
        ("SELD_TRAIN__STAGE_PLAN".to_string(), "two-stage".to_string()),
        ("SELD_MODEL__SDE_USE_IVS".to_string(), "true".to_string()),
        ("HOME".to_string(), "/root".to_string()),
    ])
    .unwrap();
    assert_eq!(cfg.optim.lr, 0.01);
    assert_eq!(cfg.stage_plan, StagePlan::TwoStage);
    assert!(cfg.model.sde_use_ivs && cfg.features.sde_use_ivs);
    assert!(cfg.apply_env([("SELD_NOPE".to_string(), "1".to_string())]).is_err());
}

#[test]
fn adamw_first_step_by_hand() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(&[1], vec![1.0]).unwrap());
    let mut adam = AdamW::new(RunConfig::default().optim);
    let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[1], vec![0.5]).unwrap())]);
    adam.step(&mut store, &grads, 0.1).unwrap();
    // bias-corrected moments give a unit step; decay adds lr·wd·p
    let expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01);
    assert!((store.require("w").unwrap().data()[0] - expected).abs() < 1e-12);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn seeded_runs_repeat() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = train(&micro(a.path())).unwrap();
    let rb = train(&micro(b.path())).unwrap();
    assert_eq!(ra.history[0].loss, rb.history[0].loss);
    assert_eq!(ra.final_report, rb.final_report);
    for f in ["config.txt", "history.csv", CHECKPOINT_FILE, "unified.pack", "report.json", "report.txt"] {
        assert!(a.path().join(f).exists(), "{f} missing");
    }
    let snap = RunConfig::load(a.path().join("config.txt")).unwrap();
    assert_eq!(snap, micro(a.path()));
    let hist = std::fs::read_to_string(a.path().join("history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 3);
}

#[test]
fn two_stage_switches_loss_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro(dir.path());
    cfg.stage_plan = StagePlan::TwoStage;
    let r = train(&cfg).unwrap();
    let w: Vec<LossWeights> = r.history.iter().map(|l| l.weights).collect();
    assert_eq!(w[0], LossWeights::new(25.0, 5.0, 0.0).unwrap());
    assert_eq!(w[1], w[0]);
    assert_eq!(w[2], LossWeights::new(25.0, 5.0, 3.0).unwrap());
    assert_eq!(r.stages.iter().map(|s| s.0).collect::<Vec<_>>(), [Stage::Stage1, Stage::Stage2]);
    assert!(dir.path().join("stage1.pack").exists());
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let full = tempfile::tempdir().unwrap();
    let parts = tempfile::tempdir().unwrap();
    let mut cfg = micro(full.path());
    cfg.stage_plan = StagePlan::TwoStage;
    let whole = train(&cfg).unwrap();

    let mut cfg = micro(parts.path());
    cfg.stage_plan = StagePlan::TwoStage;
    cfg.stop_after = 1;
    let mut runs = 0;
    let last = loop {
        let r = train(&cfg).unwrap();
        runs += 1;
        cfg.resume = true;
        if r.final_report.is_some() {
            break r;
        }
    };
    assert_eq!(runs, 4);
    assert_eq!(last.final_report, whole.final_report);
    assert_eq!(last.stages, whole.stages);
    let a = Checkpoint::load(full.path().join(CHECKPOINT_FILE)).unwrap();
    let b = Checkpoint::load(parts.path().join(CHECKPOINT_FILE)).unwrap();
    for ((n, x), (_, y)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(x, y, "{n}");
    }
}

#[test]
fn resuming_under_another_architecture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro(dir.path());
    cfg.schedule.epochs = 1;
    train(&cfg).unwrap();
    cfg.resume = true;
    cfg.model.embed_dim = 8;
    cfg.model.conv_channels[3] = 8;
    let e = train(&cfg).unwrap_err();
    assert!(e.to_string().contains("model.conv_channels"), "{e}");
}

fn write_dataset(dir: &Path, n: usize) -> std::path::PathBuf {
    let mut entries = Vec::new();
    for i in 0..n {
        let (clip, labels) = synth_scene(&SceneSpec {
            seed: 100 + i as u64,
            duration: 2.0,
            n_classes: 3,
            n_events: 2,
            event_duration: (0.3, 0.8),
            ..SceneSpec::default()
        })
        .unwrap();
        let (wav, csv) = (dir.join(format!("c{i}.wav")), dir.join(format!("c{i}.csv")));
        write_wav(&wav, &clip).unwrap();
        write_labels(&csv, &events_to_frames(&labels, 20).unwrap()).unwrap();
        entries.push(ManifestEntry { clip: wav, labels: csv });
    }
    let man = dir.join("set.txt");
    write_manifest(&man, &entries).unwrap();
    man
}

#[test]
fn checkpoints_score_on_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let man = write_dataset(dir.path(), 2);
    let mut cfg = micro(&dir.path().join("run"));
    cfg.data.manifest = Some(man.clone());
    cfg.data.val_manifest = Some(man.clone());
    let r = train(&cfg).unwrap();
    assert!(r.history.iter().all(|l| l.val.is_some()));
    let rep = evaluate_checkpoint(dir.path().join("run").join(CHECKPOINT_FILE), &man).unwrap();
    assert_eq!(Some(rep.clone()), r.final_report);
    let again = seld_score(rep.f20, rep.doae, rep.rde).unwrap();
    assert!((again - rep.seld_score).abs() < 1e-12);

    let e = evaluate_checkpoint(dir.path().join("missing.pack"), &man).unwrap_err();
    assert!(e.to_string().contains("does not exist"), "{e}");
    std::fs::remove_file(dir.path().join("c1.csv")).unwrap();
    assert!(evaluate_checkpoint(dir.path().join("run").join(CHECKPOINT_FILE), &man).is_err());
}

#[test]
fn oracle_and_empty_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro(dir.path());
    let ds = Dataset::synthetic(&cfg).unwrap();
    let oracle = score_events(&ds.refs, &ds.refs).unwrap();
    assert_eq!((oracle.f20, oracle.doae, oracle.rde, oracle.seld_score), (1.0, 0.0, 0.0, 0.0));
    let empty: Vec<EventList> = ds.refs.iter().map(|r| vec![Vec::new(); r.len()]).collect();
    assert_eq!(score_events(&empty, &ds.refs).unwrap().f20, 0.0);
}

#[test]
fn scan_benchmark_table() {
    let r = bench_scan(&[256, 512, 1024], 16, 4, 3);
    assert_eq!(r.rows.len(), 3);
    assert!(r.rows.iter().all(|row| row.samples.len() == 3 && row.median > 0.0));
    assert!(r.exponent.is_finite());
    assert!(r.to_string().contains("growth exponent"));
    let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0].iter().map(|&x| (x, 3.0 * x * x)).collect();
    assert!((loglog_slope(&pts) - 2.0).abs() < 1e-12);
}

#[test]
fn describe_reports_counts() {
    let cfg = micro(Path::new("/tmp/unused"));
    let text = describe_config(&cfg).unwrap();
    let store = SeldModel::new(cfg.model.clone()).unwrap().init(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
    let c = count_params_macs(&cfg.model, 1.0, 24_000, 300, 32);
    assert_eq!(c.params as usize, store.num_scalars());
    assert!(text.contains(&format!("({})", c.params)), "{text}");
    assert!(text.contains("decoder.sed.track0.head.weight"));
    assert!(describe_checkpoint("/nonexistent/ckpt.pack").is_err());
}

#[test]
fn full_config_prints_millions() {
    let text = describe_config(&RunConfig::default()).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("params: 75.07 M"), "{first}");
}
