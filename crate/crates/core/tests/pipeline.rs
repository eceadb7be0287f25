use std::fs;
use std::path::Path;

use trajloc_core::config::PipelineConfig;
use trajloc_core::error::Error;
use trajloc_core::pipeline::{report, run_pipeline, sha256_file, Manifest, MANIFEST, MODELS, SUMMARY};

fn tiny(dir: &Path, master: u64) -> PipelineConfig {
    let text = format!(
        r#"
[output]
dir = "{}"
[seeds]
master = {master}
[field]
width = 10.0
height = 10.0
spacing = 1.0
aps = 4
[mobility]
t = 11
[data]
crowd = 40
crowd_long = 40
labeled = 12
test = 20
heldout_pairs = 10
[arch]
conv_channels = 8
conv_blocks = 1
f1_out = 8
h1_hidden = 8
f2_hidden = 8
f2_out = 8
h2_hidden = 4
loc_hidden = 8
[stage1]
epochs = 2
batch_size = 16
[stage2]
epochs = 2
batch_size = 16
[labeling]
delta = 0.5
sweep = [0.5, 0.9]
[localization]
epochs = 2
batch_size = 8
"#,
        dir.display()
    );
    PipelineConfig::parse(&text).unwrap()
}

fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

#[test]
fn run_then_rerun_skips_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), 7);
    let first = run_pipeline(&cfg, false, &mut quiet()).unwrap();
    assert!(first.skipped.is_empty());
    for (slug, name) in MODELS {
        assert!(tmp.path().join(format!("eval_{slug}.csv")).exists(), "{slug}");
        assert!(first.report.row(name).is_some(), "{name}");
    }
    assert!(first.report.warnings.is_empty(), "{:?}", first.report.warnings);
    let summary = fs::read_to_string(tmp.path().join(SUMMARY)).unwrap();
    assert_eq!(summary.lines().count(), 1 + MODELS.len());

    let before = sha256_file(&tmp.path().join(MANIFEST)).unwrap();
    let second = run_pipeline(&cfg, false, &mut quiet()).unwrap();
    assert!(second.executed.is_empty(), "{:?}", second.executed);
    assert_eq!(second.skipped, first.executed);
    assert_eq!(sha256_file(&tmp.path().join(MANIFEST)).unwrap(), before);
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&tiny(a.path(), 11), false, &mut quiet()).unwrap();
    run_pipeline(&tiny(b.path(), 11), false, &mut quiet()).unwrap();
    let ma = Manifest::load(&a.path().join(MANIFEST)).unwrap();
    let mb = Manifest::load(&b.path().join(MANIFEST)).unwrap();
    assert_eq!(ma.artifacts(), mb.artifacts());
}

#[test]
fn damaged_artifact_reruns_its_stage_and_force_reruns_all() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), 3);
    let first = run_pipeline(&cfg, false, &mut quiet()).unwrap();

    fs::write(tmp.path().join("eval_knn.csv"), "garbage").unwrap();
    let again = run_pipeline(&cfg, false, &mut quiet()).unwrap();
    assert!(again.executed.contains(&"knn".to_string()));
    assert!(again.skipped.contains(&"stage1".to_string()));

    let forced = run_pipeline(&cfg, true, &mut quiet()).unwrap();
    assert_eq!(forced.executed, first.executed);
}

#[test]
fn changed_setting_reruns_downstream_only() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path(), 5);
    run_pipeline(&cfg, false, &mut quiet()).unwrap();
    cfg.localization.epochs = 3;
    let again = run_pipeline(&cfg, false, &mut quiet()).unwrap();
    for s in ["field", "data", "stage1", "stage2", "label", "knn"] {
        assert!(again.skipped.contains(&s.to_string()), "{s} should be skipped");
    }
    for s in ["ncp", "full", "full_cprime"] {
        assert!(again.executed.contains(&s.to_string()), "{s} should run");
    }
}

#[test]
fn incomplete_config_is_rejected_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path(), 1);
    cfg.labeling.delta = None;
    let e = run_pipeline(&cfg, false, &mut quiet()).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    assert!(e.to_string().contains("labeling.delta"), "{e}");
    assert!(!tmp.path().join(MANIFEST).exists());
}

#[test]
fn report_on_empty_dir_warns_with_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let rep = report(tmp.path()).unwrap();
    assert!(rep.rows.is_empty());
    assert_eq!(rep.warnings.len(), MODELS.len());
    let summary = fs::read_to_string(tmp.path().join(SUMMARY)).unwrap();
    assert_eq!(summary, "model,crowdsourced_c,delta,train_size,cdf68,cdf95\n");
}

#[test]
fn deleting_an_artifact_reruns_only_its_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), 8);
    run_pipeline(&cfg, false, &mut quiet()).unwrap();
    let before = Manifest::load(&tmp.path().join(MANIFEST)).unwrap();
    fs::remove_file(tmp.path().join("stage2.ckpt")).unwrap();
    let again = run_pipeline(&cfg, false, &mut quiet()).unwrap();
    assert_eq!(again.executed, ["stage2"]);
    let after = Manifest::load(&tmp.path().join(MANIFEST)).unwrap();
    assert_eq!(before.artifacts(), after.artifacts());
}

#[test]
fn one_evaluated_model_gives_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("eval_knn.csv"), "index,true_x,true_y,pred_x,pred_y,err_m\n0,0,0,3,4,5\n").unwrap();
    let rep = report(tmp.path()).unwrap();
    assert_eq!(rep.rows.len(), 1);
    assert_eq!(rep.rows[0].model, "KNN");
    assert_eq!(rep.rows[0].cdf68, 5.0);
    let summary = fs::read_to_string(tmp.path().join(SUMMARY)).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(tmp.path().join("cdf_knn.csv").exists());
}
