use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mumae::cli::checkpoint::Checkpoint;
use mumae::cli::commands::initial_params;
use mumae::cli::{Dataset, RunConfig};

const TINY: &str = "\
data.samples_per_class = 6
pretrain.epochs = 1
pretrain.batch_size = 16
finetune.episodes = 2
eval.episodes = 4
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mumae"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Temp dir holding `tiny.cfg` and a generated dataset at `data/`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let o = run(dir.path(), &["gen-data", "--config", "tiny.cfg", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_writes_manifest_and_is_deterministic() {
    let w = workspace();
    let manifest = std::fs::read_to_string(w.path().join("data/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.starts_with("sample =")).count(), 13 * 6);
    let o = run(w.path(), &["gen-data", "--config", "tiny.cfg", "--out", "data"]);
    assert_ne!(code(&o), 0, "non-empty dir must be refused");
    let o = run(w.path(), &["gen-data", "--config", "tiny.cfg", "--out", "again"]);
    assert_eq!(code(&o), 0);
    assert_eq!(manifest, std::fs::read_to_string(w.path().join("again/manifest.txt")).unwrap());
    assert_eq!(read(w.path().join("data/sample_000042.bin")), read(w.path().join("again/sample_000042.bin")));
}

#[test]
fn malformed_key_exits_2_naming_it() {
    let w = workspace();
    std::fs::write(w.path().join("bad.cfg"), "mask.ration = 0.5\n").unwrap();
    let o = run(w.path(), &["gen-data", "--config", "bad.cfg", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mask.ration"));
    std::fs::write(w.path().join("bad.cfg"), "mask.ratio = 2\n").unwrap();
    assert_eq!(code(&run(w.path(), &["pretrain", "--config", "bad.cfg", "--data", "data", "--out", "x"])), 2);
}

#[test]
fn missing_data_exits_3() {
    let w = workspace();
    let o = run(w.path(), &["pretrain", "--config", "tiny.cfg", "--data", "nowhere", "--out", "p.ckpt"]);
    assert_eq!(code(&o), 3);
    std::fs::remove_file(w.path().join("data/sample_000070.bin")).unwrap();
    let o = run(w.path(), &["pretrain", "--config", "tiny.cfg", "--data", "data", "--out", "p.ckpt"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn zero_epochs_writes_initial_parameters() {
    let w = workspace();
    let cfg = TINY.replace("pretrain.epochs = 1", "pretrain.epochs = 0");
    std::fs::write(w.path().join("zero.cfg"), &cfg).unwrap();
    let o = run(w.path(), &["pretrain", "--config", "zero.cfg", "--data", "data", "--out", "p.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(read(w.path().join("p.ckpt.metrics")).is_empty());
    let ck = Checkpoint::load(&w.path().join("p.ckpt")).unwrap();
    let run_cfg = RunConfig::parse(&cfg).unwrap();
    let ds = Dataset::open(&w.path().join("data")).unwrap();
    let init = initial_params(&run_cfg, &ds).unwrap();
    for (name, t) in init.iter() {
        let stored = ck.params.get(name).unwrap();
        let rounded: Vec<f64> = t.data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(stored.data(), &rounded[..], "{name}");
    }
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let w = workspace();
    let p = w.path();
    for tag in ["a", "b"] {
        let pre = format!("pre_{tag}.ckpt");
        let ft = format!("ft_{tag}.ckpt");
        let ev = format!("ev_{tag}.metrics");
        assert_eq!(code(&run(p, &["pretrain", "--config", "tiny.cfg", "--data", "data", "--out", &pre])), 0);
        assert_eq!(code(&run(p, &["finetune", &pre, "--data", "data", "--out", &ft])), 0);
        let o = run(p, &["eval", &ft, "--data", "data", "--out", &ev]);
        assert_eq!(code(&o), 0);
        std::fs::write(p.join(format!("report_{tag}.txt")), &o.stdout).unwrap();
    }
    for (a, b) in [
        ("pre_a.ckpt", "pre_b.ckpt"),
        ("pre_a.ckpt.metrics", "pre_b.ckpt.metrics"),
        ("ft_a.ckpt", "ft_b.ckpt"),
        ("ft_a.ckpt.metrics", "ft_b.ckpt.metrics"),
        ("ev_a.metrics", "ev_b.metrics"),
        ("report_a.txt", "report_b.txt"),
    ] {
        assert_eq!(read(p.join(a)), read(p.join(b)), "{a} vs {b}");
    }
    let o = run(p, &["pretrain", "--config", "tiny.cfg", "--data", "data", "--out", "pre_c.ckpt", "--seed", "9"]);
    assert_eq!(code(&o), 0);
    assert_ne!(read(p.join("pre_a.ckpt")), read(p.join("pre_c.ckpt")));
}

#[test]
fn finetune_arms_compose() {
    let w = workspace();
    let p = w.path();
    assert_eq!(code(&run(p, &["pretrain", "--config", "tiny.cfg", "--data", "data", "--out", "pre.ckpt"])), 0);
    for (args, out) in [
        (vec!["pre.ckpt"], "full.ckpt"),
        (vec!["pre.ckpt", "--no-cross"], "nocross.ckpt"),
        (vec!["--from-scratch", "--config", "tiny.cfg"], "scratch.ckpt"),
        (vec!["--from-scratch", "--no-cross", "--config", "tiny.cfg"], "scratch_nocross.ckpt"),
    ] {
        let mut a = vec!["finetune"];
        a.extend(&args);
        a.extend(["--data", "data", "--out", out]);
        let o = run(p, &a);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        let o = run(p, &["eval", out, "--data", "data"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let nocross = Checkpoint::load(&p.join("nocross.ckpt")).unwrap();
    assert!(nocross.config_text.contains("fusion.mode = no-cross"));
    assert_ne!(code(&run(p, &["finetune", "--data", "data", "--out", "x.ckpt"])), 0);
}

#[test]
fn finetune_refuses_fewer_than_two_meta_train_classes() {
    let w = workspace();
    let m = w.path().join("data/manifest.txt");
    let text = std::fs::read_to_string(&m).unwrap();
    let patched: String = text
        .lines()
        .map(|l| {
            if l.starts_with("split.meta_train") {
                let first = l.split('=').nth(1).unwrap().split_whitespace().next().unwrap();
                format!("split.meta_train = {first}\n")
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    std::fs::write(&m, patched).unwrap();
    let o = run(w.path(), &["finetune", "--from-scratch", "--config", "tiny.cfg", "--data", "data", "--out", "f.ckpt"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("at least 2 meta-train classes"), "{}", stderr(&o));
}

#[test]
fn checkpoint_errors_exit_4() {
    let w = workspace();
    let p = w.path();
    assert_eq!(code(&run(p, &["pretrain", "--config", "tiny.cfg", "--data", "data", "--out", "pre.ckpt"])), 0);
    let mut bytes = read(p.join("pre.ckpt"));
    bytes[5] = 2;
    std::fs::write(p.join("v2.ckpt"), &bytes).unwrap();
    let o = run(p, &["finetune", "v2.ckpt", "--config", "tiny.cfg", "--data", "data", "--out", "f.ckpt"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("version"));
    std::fs::write(p.join("wide.cfg"), format!("{TINY}fusion.heads = 3\n")).unwrap();
    let o = run(p, &["eval", "pre.ckpt", "--config", "wide.cfg", "--data", "data"]);
    assert_eq!(code(&o), 4, "shape mismatch must be a checkpoint error: {}", stderr(&o));
}

#[test]
fn single_episode_eval_flags_undefined_spread() {
    let w = workspace();
    let p = w.path();
    assert_eq!(code(&run(p, &["pretrain", "--config", "tiny.cfg", "--data", "data", "--out", "pre.ckpt"])), 0);
    let o = run(p, &["eval", "pre.ckpt", "--data", "data", "--episodes", "1"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("sd undefined"), "{out}");
    let metrics = std::fs::read_to_string(p.join("pre.ckpt.eval.metrics")).unwrap();
    let last = metrics.lines().last().unwrap();
    assert!(last.contains("summary:true") && last.contains("sd:undefined"), "{last}");
}

#[test]
fn gradcheck_lists_components_and_names_a_corrupted_one() {
    let o = bin().arg("gradcheck").output().unwrap();
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().count(), mumae::cli::gradcheck::COMPONENTS.len());
    assert!(out.lines().all(|l| l.contains("max_rel_err") && l.ends_with("ok")));
    let o = bin().arg("gradcheck").env("MUMAE_GRADCHECK_CORRUPT", "cosine-softmax loss").output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("cosine-softmax loss"));
}

#[test]
fn ablate_rows_duplicates_and_failures() {
    let w = workspace();
    let p = w.path();
    std::fs::write(p.join("two.sweep"), "mask.strategy = synchronized random\nmask.ratio = 0.85\n").unwrap();
    let o = run(p, &["ablate", "two.sweep", "--config", "tiny.cfg", "--data", "data", "--out", "abl", "--workers", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(p.join("abl/table.txt")).unwrap();
    assert_eq!(table.lines().count(), 2 + 2);
    assert_eq!(String::from_utf8_lossy(&o.stdout), table);
    let metrics = std::fs::read_to_string(p.join("abl/metrics.txt")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.lines().all(|l| l.contains("status:ok")));

    std::fs::write(
        p.join("dup.sweep"),
        "cell = random 0.85 on cross sqrt\ncell = random 0.85 on cross sqrt\ncell = synchronized 1.0 on cross sqrt\n",
    )
    .unwrap();
    let o = run(p, &["ablate", "dup.sweep", "--config", "tiny.cfg", "--data", "data", "--out", "dup"]);
    assert_eq!(code(&o), 1, "a failed cell makes the run fail");
    assert!(stderr(&o).contains("duplicate cell"));
    let table = std::fs::read_to_string(p.join("dup/table.txt")).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 2);
    assert!(!rows[0].contains("FAILED"));
    assert!(rows[1].contains("FAILED"), "{table}");
}
