use std::path::Path;
use std::process::{Command, Output};

fn amar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amar"))
        .current_dir(dir)
        .arg("-q")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "seeds = 2\n[train]\nsamples = 48\nepochs = 2\nbatch_size = 16\n";

#[test]
fn train_eval_simulate() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let cfg = ["--config", "small.toml", "--out", "run"];

    let o = amar(dir.path(), &[&cfg[..], &["train"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("run");
    for f in [
        "config.toml",
        "metrics.txt",
        "seed-0.ckpt",
        "seed-0.log.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 2 + 2 * 2);
    let trained = stdout(&o);
    assert!(trained.contains("seed 0: pps"), "{trained}");

    let o = amar(
        dir.path(),
        &[&cfg[..], &["eval", "--checkpoint", "run"]].concat(),
    );
    assert!(o.status.success());
    let evaluated = stdout(&o);
    // evaluation of the saved checkpoints reproduces the training report
    let first = |s: &str| {
        s.lines()
            .find(|l| l.starts_with("seed 0:"))
            .unwrap()
            .to_owned()
    };
    assert_eq!(first(&trained), first(&evaluated));

    let o = amar(
        dir.path(),
        &[
            &cfg[..],
            &["simulate", "--checkpoint", "run", "--samples", "5"],
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(
        s.contains("5 frames") && s.contains("agreement with the monolithic model: 5/5"),
        "{s}"
    );
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nlr = -1.0\n").unwrap();
    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let cases: [(&[&str], i32); 4] = [
        (&["--config", "bad.toml", "bench"], 2),
        (&["eval", "--checkpoint", "missing.ckpt"], 2),
        (&["eval", "--checkpoint", "junk.ckpt"], 2),
        (
            &[
                "eval",
                "--checkpoint",
                "junk.ckpt",
                "--data",
                "missing.csit",
            ],
            3,
        ),
    ];
    for (args, code) in cases {
        let o = amar(dir.path(), args);
        assert_eq!(
            o.status.code(),
            Some(code),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
    }
}

#[test]
fn socket_needs_a_role() {
    let dir = tempfile::tempdir().unwrap();
    let o = amar(
        dir.path(),
        &["simulate", "--checkpoint", "x", "--transport", "socket"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_reports_full_size_bandwidth() {
    let dir = tempfile::tempdir().unwrap();
    let o = amar(dir.path(), &["bench"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(
        s.contains("3008 bits per sample quantized vs 385024 unquantized, 99.2% reduction"),
        "{s}"
    );
    assert!(s.contains("59049 ordered vs 1287 multisets (45.9x)"), "{s}");
}
