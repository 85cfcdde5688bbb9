use mumae::cli::commands::{eval_cmd, finetune_cmd, pretrain_cmd, Init};
use mumae::cli::dataset::generate;
use mumae::cli::{Dataset, RunConfig};

const TINY: &str = "\
data.samples_per_class = 6
pretrain.epochs = 1
finetune.episodes = 3
eval.episodes = 3
";

#[test]
fn training_never_reads_meta_test_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(TINY).unwrap();
    let data = dir.path().join("data");
    generate(&cfg, &data, false).unwrap();

    let ds = Dataset::open(&data).unwrap();
    let pre = dir.path().join("pre.ckpt");
    pretrain_cmd(&cfg, &ds, &pre).unwrap();
    for init in [Init::Checkpoint(pre.clone()), Init::Scratch] {
        finetune_cmd(&cfg, &ds, &init, &dir.path().join("ft.ckpt")).unwrap();
    }
    let touched = ds.accessed();
    assert_eq!(touched.len(), ds.split.meta_train.len() * 6);
    for id in &touched {
        let class = ds.class_of(*id).unwrap();
        assert!(ds.split.meta_train.contains(&class), "sample {id} of meta-test class {class} was read");
    }

    let ds = Dataset::open(&data).unwrap();
    eval_cmd(&cfg, &ds, &dir.path().join("ft.ckpt"), &dir.path().join("ev.metrics")).unwrap();
    for id in ds.accessed() {
        assert!(ds.split.meta_test.contains(&ds.class_of(id).unwrap()));
    }
}
