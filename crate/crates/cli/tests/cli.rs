use std::path::Path;
use std::process::{Command, Output};

fn d2moe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2moe")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = d2moe(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    d2moe(dir, args).status.code().unwrap()
}

const SMALL: [&str; 8] = ["--set", "experts=4", "--set", "d_model=8", "--set", "hidden=12", "--set", "tokens=96"];

fn gen(dir: &Path) {
    let mut args = vec!["gen-fixture", "--model", "m.d2m", "--calib", "c.d2m", "--set", "rank_noise=2"];
    args.extend(SMALL);
    ok(dir, &args);
}

#[test]
fn end_to_end_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    ok(d, &["calibrate", "--model", "m.d2m", "--calib", "c.d2m", "--out", "s.d2m"]);
    let common = ["--model", "m.d2m", "--calib", "c.d2m", "--ratio-delta", "0.5", "--sparsity", "0.4", "--merge", "fisher"];
    let mut a = vec!["compress", "--out", "a.d2m", "--report", "a.txt", "--stats", "s.d2m"];
    a.extend(common);
    ok(d, &a);
    let mut b = vec!["compress", "--out", "b.d2m", "--report", "b.txt"];
    b.extend(common);
    ok(d, &b);
    assert_eq!(std::fs::read(d.join("a.d2m")).unwrap(), std::fs::read(d.join("b.d2m")).unwrap());
    let report = std::fs::read_to_string(d.join("a.txt")).unwrap();
    assert_eq!(report, std::fs::read_to_string(d.join("b.txt")).unwrap());
    assert_eq!(ok(d, &["report", "--input", "a.txt"]), report);

    let eval = ok(d, &["eval", "--model", "a.d2m", "--calib", "c.d2m"]);
    assert!(eval.starts_with("loss="), "{eval}");
    let dense = ok(d, &["eval", "--model", "m.d2m", "--calib", "c.d2m"]);
    assert_ne!(eval, dense);

    ok(d, &["analyze", "--model", "m.d2m", "--calib", "c.d2m", "--out-dir", "an", "--cka", "--sensitivity", "--frontier", "--ratios", "0.2,0.6"]);
    let header = |f: &str| std::fs::read_to_string(d.join("an").join(f)).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header("cka.csv"), "i,j,value");
    assert_eq!(header("sensitivity.csv"), "layer,loss_increase,allocated_ratio");
    assert_eq!(header("frontier.csv"), "ratio,loss,params");
    let frontier = std::fs::read_to_string(d.join("an/frontier.csv")).unwrap();
    assert_eq!(frontier.lines().count(), 3);
}

#[test]
fn thread_cap_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    for (threads, out) in [("1", "one"), ("3", "three")] {
        let st = Command::new(env!("CARGO_BIN_EXE_d2moe"))
            .current_dir(d)
            .env("D2MOE_THREADS", threads)
            .args(["compress", "--model", "m.d2m", "--calib", "c.d2m", "--out", &format!("{out}.d2m"), "--report", &format!("{out}.txt")])
            .status()
            .unwrap();
        assert!(st.success());
    }
    assert_eq!(std::fs::read(d.join("one.d2m")).unwrap(), std::fs::read(d.join("three.d2m")).unwrap());
    assert_eq!(std::fs::read(d.join("one.txt")).unwrap(), std::fs::read(d.join("three.txt")).unwrap());
    let bad = Command::new(env!("CARGO_BIN_EXE_d2moe"))
        .current_dir(d)
        .env("D2MOE_THREADS", "zero")
        .args(["compress", "--model", "m.d2m", "--calib", "c.d2m", "--out", "x.d2m", "--report", "x.txt"])
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    let compress = |extra: &[&str]| {
        let mut a = vec!["compress", "--model", "m.d2m", "--calib", "c.d2m", "--out", "o.d2m", "--report", "r.txt"];
        a.extend(extra);
        code(d, &a)
    };
    assert_eq!(compress(&["--merge", "median"]), 2);
    assert_eq!(compress(&["--sparsity", "1.5"]), 2);
    assert_eq!(compress(&["--set", "nonsense=1"]), 2);
    assert_eq!(compress(&["--set", "expert_subset=0,9"]), 2);
    assert_eq!(code(d, &["compress", "--model", "m.d2m"]), 2);
    assert_eq!(code(d, &["frobnicate"]), 2);
    assert_eq!(code(d, &["--help"]), 0);

    assert_eq!(code(d, &["eval", "--model", "missing.d2m", "--calib", "c.d2m"]), 3);
    std::fs::write(d.join("junk.d2m"), b"not a container").unwrap();
    assert_eq!(code(d, &["eval", "--model", "junk.d2m", "--calib", "c.d2m"]), 3);
    assert_eq!(code(d, &["eval", "--model", "c.d2m", "--calib", "c.d2m"]), 3);
    std::fs::write(d.join("bad.txt"), "d2moe-report 1\nversion value=1 extra=2\n").unwrap();
    assert_eq!(code(d, &["report", "--input", "bad.txt"]), 3);

    std::fs::write(d.join("cfg"), "merge = mean\nmerge = fisher\n").unwrap();
    assert_eq!(compress(&["--config", "cfg"]), 2);
    std::fs::write(d.join("cfg"), "# mean merge, lossless\nmerge = mean\nprofile = lossless\n").unwrap();
    assert_eq!(compress(&["--config", "cfg"]), 0);
    let rep = std::fs::read_to_string(d.join("r.txt")).unwrap();
    assert!(rep.contains("config key=merge value=mean") && rep.contains("value=lossless"));
}
