use std::path::Path;

use noc_core::ablation::{run_ablation, train_entry, write_outputs, ExperimentMatrix, SeedContext};
use noc_core::eval::ErrorKind;
use noc_core::noc::InitProvenance;
use noc_core::synth::{generate_dataset, DatasetManifest, Split, SynthConfig};

fn dataset(dir: &Path) -> (DatasetManifest, std::path::PathBuf) {
    let cfg = SynthConfig {
        n_categories: 4,
        train_small: 8,
        train_large: 16,
        test: 10,
        seed: 3,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, dir).unwrap();
    DatasetManifest::load(dir).unwrap()
}

const MATRIX: &str = r#"
name = "it"

[pipeline]
backbone_width = 6
scales = [1.0, 2.0]
pool_m = 3

[pipeline.train]
epochs = 2
rois_per_image = 8

[[entry]]
name = "1fc"
spec = "f5"

[[entry]]
name = "3fc"
spec = "f16-f16-f5"

[[entry]]
name = "2conv3fc"
spec = "c6-c6-f16-f16-f5"
init = "identity"
donor = "3fc"

[[entry]]
name = "mo"
spec = "c6-mo-c6-f16-f16-f5"
head = "softmax"
"#;

#[test]
fn identity_extension_starts_at_donor_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, root) = dataset(dir.path());
    let matrix = ExperimentMatrix::from_toml(MATRIX).unwrap();
    let entries = matrix.resolve(manifest.n_categories()).unwrap();
    let ctx = SeedContext::prepare(&manifest, &root, &matrix.pipeline, &entries, 4).unwrap();
    let donor = train_entry(&ctx, &matrix.pipeline, &entries[1], None).unwrap();
    let ext = train_entry(&ctx, &matrix.pipeline, &entries[2], donor.net.as_ref()).unwrap();
    let (d_final, e_init) = (donor.final_loss.unwrap(), ext.init_loss.unwrap());
    assert_eq!(d_final, e_init);
    assert!(donor.init_loss.unwrap() > d_final);
    assert!(matches!(
        ext.net.as_ref().unwrap().provenance(),
        InitProvenance::IdentityExtend { donor_spec } if donor_spec == "f16-f16-f5"
    ));
    // identity init without a trained donor is a stage error, not a panic
    assert!(train_entry(&ctx, &matrix.pipeline, &entries[2], None).is_err());
}

#[test]
fn single_fc_svm_needs_no_training() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, root) = dataset(dir.path());
    let matrix = ExperimentMatrix::from_toml(MATRIX).unwrap();
    let entries = matrix.resolve(manifest.n_categories()).unwrap();
    let ctx = SeedContext::prepare(&manifest, &root, &matrix.pipeline, &entries[..1], 0).unwrap();
    let t = train_entry(&ctx, &matrix.pipeline, &entries[0], None).unwrap();
    assert!(t.net.is_none() && t.init_loss.is_none());
    assert_eq!(t.svm.unwrap().heads.len(), 4);
    assert!(!t.detections.is_empty());
}

#[test]
fn ablation_is_deterministic_and_partitions_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, root) = dataset(&dir.path().join("data"));
    let matrix = ExperimentMatrix::from_toml(MATRIX).unwrap();
    let a = run_ablation(&matrix, &manifest, &root, &[0, 1]).unwrap();
    let b = run_ablation(&matrix, &manifest, &root, &[0, 1]).unwrap();
    assert_eq!(a.runs, b.runs);

    let n_gt: usize = manifest.split(Split::Test).map(|e| e.objects.len()).sum();
    assert_eq!(a.runs.len(), 8);
    for run in &a.runs {
        let m = run.outcome.as_ref().unwrap();
        assert_eq!(m.breakdown.total, n_gt, "{} seed {}", run.entry, run.seed);
        assert!((m.breakdown.fraction_sum() - 1.0).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&m.ap50.map));
        assert!(m.ap75.map <= m.ap50.map + 1e-12);
    }
    let s = a.entry("2conv3fc").unwrap();
    assert_eq!((s.seeds_ok, s.seeds_failed), (2, 0));
    assert_eq!(s.fractions.len(), ErrorKind::ALL.len());
    assert_eq!(s.pooled.as_ref().unwrap().n_gt, 2 * n_gt);

    let (o1, o2) = (dir.path().join("o1"), dir.path().join("o2"));
    write_outputs(&o1, &a, &manifest.categories).unwrap();
    write_outputs(&o2, &b, &manifest.categories).unwrap();
    for f in ["results.csv", "runs.csv", "metrics.csv", "breakdown.json"] {
        assert_eq!(
            std::fs::read(o1.join(f)).unwrap(),
            std::fs::read(o2.join(f)).unwrap(),
            "{f}"
        );
    }
    // seed lists are taken as given: a different seed changes the runs
    let c = run_ablation(&matrix, &manifest, &root, &[2]).unwrap();
    assert_ne!(c.runs[0].outcome, a.runs[0].outcome);
}

#[test]
fn failing_entry_is_recorded_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, root) = dataset(dir.path());
    let mut matrix = ExperimentMatrix::from_toml(MATRIX).unwrap();
    matrix.entries.truncate(2);
    // a diverging learning rate
    let mut train = matrix.pipeline.train.clone();
    train.base_lr = 1e6;
    matrix.entries[1].train = Some(train);
    let r = run_ablation(&matrix, &manifest, &root, &[0]).unwrap();
    assert!(r.runs[0].outcome.is_ok());
    assert!(r.runs[1].outcome.is_err());
    let s = r.entry("3fc").unwrap();
    assert_eq!((s.seeds_ok, s.seeds_failed), (0, 1));
    assert!(s.first_error.is_some() && s.ap50.is_none());
}
