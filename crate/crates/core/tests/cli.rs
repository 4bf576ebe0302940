use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn avtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avtrack"))
        .args(args)
        .env("AVTRACK_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = avtrack(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ck = dir.path().join("teacher.ckpt");
    let small = ["--set", "gen_length=6", "--set", "sequences=2", "--set", "batch_size=2"];

    let gen = |out: &Path| {
        let mut a = vec!["gen-data", "--out", s(out)];
        a.extend(small);
        ok(&a)
    };
    assert!(gen(&data).contains("wrote 2 sequences"));
    let again = dir.path().join("again");
    gen(&again);
    let seq = fs::read_dir(&data).unwrap().next().unwrap().unwrap().file_name();
    for f in ["groundtruth_rect.txt", "frame_000000.ppm", "frame_000005.ppm"] {
        assert_eq!(fs::read(data.join(&seq).join(f)).unwrap(), fs::read(again.join(&seq).join(f)).unwrap(), "{f}");
    }

    let log = dir.path().join("train.csv");
    let mut a = vec!["train", "--out", s(&ck), "--data", s(&data), "--log", s(&log), "--steps", "2"];
    a.extend(small);
    assert!(ok(&a).contains("trained 2 steps"));
    let log = fs::read_to_string(&log).unwrap();
    assert!(log.starts_with("step,lr,total,cls,iou,l1,spar,vir,md,active"));
    assert_eq!(log.lines().count(), 3);

    let inspect = ok(&["inspect", "--checkpoint", s(&ck)]);
    assert!(inspect.contains("# tensors") && inspect.contains("patch_embed.weight,f32,64x3x8x8,0,true"));
    assert!(inspect.contains("batch_size = 2"));

    let one = data.join(&seq);
    let pred = dir.path().join("pred.csv");
    ok(&["track", "--checkpoint", s(&ck), "--data", s(&one), "--out", s(&pred)]);
    let records = fs::read_to_string(&pred).unwrap();
    assert_eq!(records.lines().count(), 7);

    let e1 = ok(&["eval", "--data", s(&one), "--pred", s(&pred)]);
    assert!(e1.starts_with("sequence,frames,precision_5"));
    let e2 = ok(&["eval", "--data", s(&data), "--checkpoint", s(&ck)]);
    assert_eq!(e2.lines().count(), 4);
    let first = |t: &str| t.lines().nth(1).unwrap().to_string();
    let row = e2.lines().find(|l| l.starts_with(seq.to_str().unwrap())).unwrap().to_string();
    assert_eq!(first(&e1), row);

    let bench = ok(&["bench", "--checkpoint", s(&ck), "--frames", "4", "--warmup", "1", "--force-gates", "half"]);
    assert!(bench.lines().count() >= 5);

    let student = dir.path().join("student.ckpt");
    let mut a = vec!["distill", "--teachers", s(&ck), "--out", s(&student), "--data", s(&data), "--steps", "1", "--md-mode", "mse"];
    a.extend(small);
    assert!(ok(&a).contains("4-block student"));
    assert!(ok(&["inspect", "--checkpoint", s(&student)]).contains("depth = 4"));
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    for args in [
        vec!["inspect", "--checkpoint", s(&missing)],
        vec!["frobnicate"],
        vec!["gen-data", "--out", s(dir.path()), "--set", "beta=2"],
        vec!["gen-data", "--out", s(dir.path()), "--set", "nokey"],
    ] {
        let out = avtrack(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty());
    }
}
