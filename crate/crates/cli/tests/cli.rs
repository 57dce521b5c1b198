use std::path::Path;
use std::process::{Command, Output};

fn fginet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fginet")).args(args).current_dir(dir).output().expect("spawn fginet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn params_reports_total() {
    let d = tempfile::tempdir().unwrap();
    let o = fginet(&["params", "--preset", "mpii"], d.path());
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("1313606"), "{}", stdout(&o));
}

#[test]
fn flops_accepts_size() {
    let d = tempfile::tempdir().unwrap();
    let o = fginet(&["flops", "--size", "32"], d.path());
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn gradcheck_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = fginet(&["gradcheck", "--seed", "1"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(fginet(&["params", "--preset", "nope"], d.path()).status.code(), Some(2));
    assert_eq!(fginet(&["bogus"], d.path()).status.code(), Some(2));

    std::fs::write(d.path().join("bad.cfg"), "stage1.block0.kernel = 4\n").unwrap();
    assert_eq!(fginet(&["params", "--config", "bad.cfg"], d.path()).status.code(), Some(3));

    std::fs::write(d.path().join("m.csv"), "path,gx,gy,gz,subject\nmissing.png,0,0,-1,p00\nmissing.png,0,0,-1,p00\n").unwrap();
    let o = fginet(&["eval", "--data", "m.csv", "--checkpoint", "none.ckpt"], d.path());
    assert!(matches!(o.status.code(), Some(4) | Some(6)), "{o:?}");
}

#[test]
fn synth_train_eval_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert!(fginet(&["synth", "--n", "16", "--size", "32"], p).status.success());
    assert!(p.join("synth/manifest.csv").exists());
    let o = fginet(&["train", "--epochs", "1", "--batch-size", "8"], p);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("run/model.ckpt").exists() && p.join("run/history.csv").exists());
    let o = fginet(&["eval", "--data", "synth/manifest.csv", "--checkpoint", "run/model.ckpt"], p);
    assert!(o.status.success());
    assert!(stdout(&o).contains("mean angular error"));
}
