use std::fs;
use std::process::Command;

fn dmoe(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dmoe")).args(args).output().unwrap()
}

const SMALL: [&str; 8] = [
    "--set", "task.n_train=200", "--set", "task.n_test=100", "--set", "train.epochs=2", "--set", "model.hidden=8",
];

#[test]
fn layout_prints_every_head() {
    let out = dmoe(&["layout", "--set", "layout.bins=4", "--set", "layout.heads=3"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("heads 3"));
}

#[test]
fn invalid_config_exits_nonzero() {
    assert!(!dmoe(&["train", "--set", "no.such.key=1"]).status.success());
    assert!(!dmoe(&["train", "--set", "layout.bins=1"]).status.success());
}

#[test]
fn divergence_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = [
        "train", "--out", out, "--set", "loss.mode=l2", "--set", "train.optimizer=sgd", "--set", "train.lr=1e300",
    ];
    let status = dmoe(&[&args[..], &SMALL[..]].concat()).status;
    assert!(!status.success());
}

#[test]
fn grid_and_plot_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let grid = [&["grid", "--out", out, "--set", "grid.modes=l1,dmoe"][..], &SMALL[..]].concat();
    assert!(dmoe(&grid).status.success());
    let results = dir.path().join("results.csv");
    let csv = fs::read_to_string(&results).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);

    let plots = dir.path().join("plots");
    let plot = ["plot", results.to_str().unwrap(), "--out", plots.to_str().unwrap()];
    assert!(dmoe(&plot).status.success());
    let first = fs::read(plots.join("mae.svg")).unwrap();
    assert!(dmoe(&plot).status.success());
    assert_eq!(first, fs::read(plots.join("mae.svg")).unwrap());
    assert!(plots.join("distance_bias.svg").exists());

    fs::write(&results, csv.replacen(",ok,", ",ok,oops,", 1)).unwrap();
    let bad = dmoe(&plot);
    assert!(!bad.status.success());
    assert!(String::from_utf8(bad.stderr).unwrap().contains("line 2"));
}
