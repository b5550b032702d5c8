use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use trajsim::formats::{load_temb, load_tsim, write_tsim};

fn trajsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic dataset, its ground truth and a small run config.
struct Run {
    dir: TempDir,
}

impl Run {
    fn new(count: usize, extra_cfg: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data.txt");
        let o = trajsim(&["synth", "--count", &count.to_string(), "--seed", "11", "--out", p(&data)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let gt = dir.path().join("run/gt-dfd.tsim");
        let o = trajsim(&["gt", p(&data), "--measure", "dfd", "--out", p(&gt)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::write(
            dir.path().join("run.cfg"),
            format!("data = data.txt\nout = run\nd = 16\nheads = 2\nbatch = 16\nepochs = 2\npatience = 2\n{extra_cfg}"),
        )
        .unwrap();
        Run { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, extra: &[&str]) -> Output {
        let cfg = self.path("run.cfg");
        let mut args = vec!["train", "--config", p(&cfg)];
        args.extend_from_slice(extra);
        trajsim(&args)
    }
}

#[test]
fn preprocess_counts_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let short: Vec<String> = (0..19).map(|i| format!("{},41.1", -8.6 + i as f64 * 0.001)).collect();
    let input = dir.path().join("in.txt");
    fs::write(&input, format!("t0\t{}\n", short.join(";"))).unwrap();
    let out = dir.path().join("out.txt");
    let o = trajsim(&["preprocess", p(&input), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "accepted\t0\nrejected\t1\n");

    let data = dir.path().join("synth.txt");
    assert_eq!(code(&trajsim(&["synth", "--count", "50", "--out", p(&data)])), 0);
    let dup = dir.path().join("dup.txt");
    let text = fs::read_to_string(&data).unwrap();
    // Repeat the first point of every line so cleaning has work to do.
    let doubled: String = text
        .lines()
        .map(|l| {
            let (id, pts) = l.split_once('\t').unwrap();
            let first = pts.split(';').next().unwrap();
            format!("{id}\t{first};{pts}\n")
        })
        .collect();
    fs::write(&dup, doubled).unwrap();
    let once = dir.path().join("once.txt");
    let twice = dir.path().join("twice.txt");
    assert_eq!(code(&trajsim(&["preprocess", p(&dup), "--out", p(&once)])), 0);
    assert_eq!(code(&trajsim(&["preprocess", p(&once), "--out", p(&twice)])), 0);
    assert_eq!(fs::read(&once).unwrap(), fs::read(&twice).unwrap());
    assert_eq!(fs::read(&once).unwrap(), fs::read(&data).unwrap());
}

#[test]
fn preprocess_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.txt");
    fs::write(&input, "# comment\nok\t1,2;3,4\nbad\tabc,41.1;2,3\n").unwrap();
    let out = dir.path().join("out.txt");
    let o = trajsim(&["preprocess", p(&input), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn synth_is_deterministic_and_clean() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    assert_eq!(code(&trajsim(&["synth", "--count", "1000", "--seed", "4", "--out", p(&a)])), 0);
    assert_eq!(code(&trajsim(&["synth", "--count", "1000", "--seed", "4", "--out", p(&b)])), 0);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1000);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.txt");
    let o = trajsim(&["preprocess", p(&a), "--out", p(&c)]);
    assert_eq!(stdout(&o), "accepted\t1000\nrejected\t0\n");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let o = trajsim(&["synth", "--bbox", "0,0,0,10", "--out", p(&c)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn ground_truth_files() {
    let dir = tempfile::tempdir().unwrap();
    let pts: Vec<String> = (0..25).map(|i| format!("{},41.1", -8.6 + i as f64 * 0.001)).collect();
    let line = pts.join(";");
    let data = dir.path().join("same.txt");
    fs::write(&data, format!("a\t{line}\nb\t{line}\nc\t{line}\n")).unwrap();
    let out = dir.path().join("gt.tsim");
    let o = trajsim(&["gt", p(&data), "--measure", "dtw", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("scale\t"));
    let m = load_tsim(&out).unwrap();
    assert_eq!(m.n(), 3);
    assert!(m.values().iter().all(|&v| v == 1.0));
    let mut bytes = Vec::new();
    write_tsim(&mut bytes, &m).unwrap();
    assert_eq!(bytes, fs::read(&out).unwrap());

    let synth = dir.path().join("s.txt");
    trajsim(&["synth", "--count", "40", "--out", p(&synth)]);
    let g1 = dir.path().join("g1.tsim");
    let g2 = dir.path().join("g2.tsim");
    for g in [&g1, &g2] {
        assert_eq!(code(&trajsim(&["gt", p(&synth), "--measure", "edwp", "--seed", "3", "--out", p(g)])), 0);
    }
    assert_eq!(fs::read(&g1).unwrap(), fs::read(&g2).unwrap());

    let one = dir.path().join("one.txt");
    fs::write(&one, format!("a\t{line}\n")).unwrap();
    assert_eq!(code(&trajsim(&["gt", p(&one), "--out", p(&g1)])), 1);
}

#[test]
fn train_embed_eval_pipeline() {
    let run = Run::new(80, "");
    let o = run.train(&[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(run.path("run/train.log")).unwrap();
    assert!((1..=2).contains(&log.lines().count()));
    assert!(log.lines().all(|l| l.split('\t').count() == 3));
    let metrics = fs::read_to_string(run.path("run/metrics.txt")).unwrap();
    assert!(metrics.starts_with("hr10\t"));

    // Same seed, same bytes.
    let first = fs::read(run.path("run/checkpoint.tsck")).unwrap();
    assert_eq!(code(&run.train(&[])), 0);
    assert_eq!(first, fs::read(run.path("run/checkpoint.tsck")).unwrap());

    let ck = run.path("run/checkpoint.tsck");
    let data = run.path("data.txt");
    let e1 = run.path("e1.temb");
    let e2 = run.path("e2.temb");
    for e in [&e1, &e2] {
        let o = trajsim(&["embed", "--checkpoint", p(&ck), p(&data), "--out", p(e)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(&e1).unwrap(), fs::read(&e2).unwrap());
    let emb = load_temb(&e1).unwrap();
    assert_eq!((emb.count, emb.d), (80, 16));

    // Longer than anything seen in training.
    let long = run.path("long.txt");
    trajsim(&["synth", "--count", "3", "--min-len", "150", "--max-len", "300", "--out", p(&long)]);
    let e3 = run.path("e3.temb");
    let o = trajsim(&["embed", "--checkpoint", p(&ck), p(&long), "--out", p(&e3)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_temb(&e3).unwrap().count, 3);

    let o = trajsim(&["eval", "--checkpoint", p(&ck), p(&data), "--oracle"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "hr10\t1.000000\nhr50\t1.000000\nr10_50\t1.000000\n");

    for flags in [["--mask", "0.4"], ["--shift", "100"]] {
        let mut args = vec!["eval", "--checkpoint", p(&ck), p(&data)];
        args.extend_from_slice(&flags);
        let o = trajsim(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stderr(&o).contains("delta"));
    }

    let small = run.path("small.txt");
    let text = fs::read_to_string(&data).unwrap();
    fs::write(&small, text.lines().take(20).map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    let o = trajsim(&["eval", "--checkpoint", p(&ck), p(&small), "--out", p(&run.path("ev"))]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("hr50\tabsent"));
    assert!(stderr(&o).contains("too few"));
    assert!(run.path("ev/metrics.txt").exists());
}

#[test]
fn train_options_and_failures() {
    let run = Run::new(48, "lambda = 1\n");
    let nested = run.path("fresh/a/b");
    let gt = run.path("run/gt-dfd.tsim");
    fs::write(
        run.path("nested.cfg"),
        format!("data = data.txt\nout = fresh/a/b\ngt = {}\nd = 16\nheads = 2\nbatch = 16\nepochs = 1\npatience = 1\nlambda = 1\n", p(&gt)),
    )
    .unwrap();
    let o = trajsim(&["train", "--config", p(&run.path("nested.cfg"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(nested.join("checkpoint.tsck").exists());

    // Unknown key.
    fs::write(run.path("bad.cfg"), "data = data.txt\nspeed = 3\n").unwrap();
    assert_eq!(code(&trajsim(&["train", "--config", p(&run.path("bad.cfg"))])), 1);

    // Missing ground truth.
    let o = run.train(&["--out", p(&run.path("elsewhere"))]);
    assert_eq!(code(&o), 2);
    assert!(!run.path("elsewhere").exists());

    // Diverging optimizer.
    fs::write(
        run.path("boom.cfg"),
        "data = data.txt\nout = run\nd = 16\nheads = 2\nbatch = 16\nepochs = 3\npatience = 3\nlr = 1e30\n",
    )
    .unwrap();
    let before = run.path("run/checkpoint.tsck").exists();
    let o = trajsim(&["train", "--config", p(&run.path("boom.cfg"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
    assert_eq!(run.path("run/checkpoint.tsck").exists(), before);
}

#[test]
fn corrupt_files_are_rejected() {
    let run = Run::new(30, "");
    assert_eq!(code(&run.train(&[])), 0);
    let ck = run.path("run/checkpoint.tsck");
    let data = run.path("data.txt");
    let bytes = fs::read(&ck).unwrap();

    let bad_magic = run.path("magic.tsck");
    let mut b = bytes.clone();
    b[0] = b'X';
    fs::write(&bad_magic, b).unwrap();
    let o = trajsim(&["embed", "--checkpoint", p(&bad_magic), p(&data), "--out", p(&run.path("x.temb"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("magic"));
    assert!(!run.path("x.temb").exists());

    let newer = run.path("newer.tsck");
    let mut b = bytes.clone();
    b[4..8].copy_from_slice(&9u32.to_le_bytes());
    fs::write(&newer, b).unwrap();
    let o = trajsim(&["eval", "--checkpoint", p(&newer), p(&data)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("version 9"));

    let gt = run.path("run/gt-dfd.tsim");
    let mut g = fs::read(&gt).unwrap();
    g[1] = b'!';
    fs::write(&gt, g).unwrap();
    assert_eq!(code(&run.train(&[])), 2);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&trajsim(&["frobnicate"])), 1);
    assert_eq!(code(&trajsim(&["synth"])), 1);
    assert_eq!(code(&trajsim(&["--help"])), 0);
    assert_eq!(code(&trajsim(&["train"])), 1);
    assert_eq!(code(&trajsim(&["eval", "--checkpoint", "x", "y", "--mask", "1.5"])), 1);
}
