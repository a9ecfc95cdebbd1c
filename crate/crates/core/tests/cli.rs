use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerf-lebm"))
        .args(args)
        .env("NERF_LEBM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cli(&[]).status.code(), Some(2));
    assert_eq!(cli(&["train", "--bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&[
        "gen-data",
        "--objects",
        "2",
        "--views",
        "2",
        "--res",
        "8",
        "--out",
        s(&data),
    ]);
    let run = dir.path().join("r");
    let out = cli(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--set",
        "model.nerf.hiden=3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hiden"));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&[
        "train",
        "--data",
        s(&dir.path().join("missing")),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = cli(&["sample", "--ckpt", s(&junk), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&[
        "gen-data",
        "--objects",
        "2",
        "--views",
        "3",
        "--holdout",
        "1",
        "--res",
        "8",
        "--seed",
        "4",
        "--out",
        s(&data),
    ]);
    let small = [
        "--set",
        "model.render.samples=4",
        "--set",
        "rays=16",
        "--set",
        "batch_size=2",
    ];
    let train = |out: &Path, iters: &str, extra: &[&str]| {
        let mut a = vec![
            "--deterministic",
            "train",
            "--data",
            s(&data),
            "--out",
            s(out),
            "--iters",
            iters,
        ];
        a.extend(small);
        a.extend(extra);
        ok(&a);
    };
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    train(&a, "4", &[]);
    train(&b, "4", &[]);
    let log = |p: &Path| std::fs::read_to_string(p.join("metrics.log")).unwrap();
    assert_eq!(log(&a), log(&b));
    assert_eq!(log(&a).lines().count(), 4);

    train(&c, "2", &[]);
    let ck = c.join("checkpoint.bin");
    train(&c, "4", &["--resume", s(&ck)]);
    assert_eq!(log(&a), log(&c));
    assert_eq!(
        std::fs::read(a.join("checkpoint.bin")).unwrap(),
        std::fs::read(&ck).unwrap()
    );

    // the written config reproduces the run
    let cfg = std::fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(cfg.contains("rays = 16"));

    let ck = a.join("checkpoint.bin");
    let psnr = ok(&["eval-psnr", "--ckpt", s(&ck), "--data", s(&data), "--split", "all"]);
    assert!(psnr.starts_with("images=8 mean_psnr="), "{psnr}");
    for (cmd, extra) in [("sample", vec!["--n", "2"]), ("reconstruct", vec!["--data", s(&data)])] {
        let out = dir.path().join(cmd);
        let mut args = vec![cmd, "--ckpt", s(&ck), "--out", s(&out)];
        args.extend(extra);
        ok(&args);
        assert!(std::fs::read_dir(&out).unwrap().count() > 0, "{cmd} wrote nothing");
    }
    let nv = dir.path().join("nv/view.png");
    ok(&[
        "novel-view",
        "--ckpt",
        s(&ck),
        "--data",
        s(&data),
        "--index",
        "0",
        "--altitude",
        "20",
        "--azimuth",
        "90",
        "--out",
        s(&nv),
    ]);
    assert!(nv.exists());
    let grid = dir.path().join("grid.png");
    ok(&[
        "disentangle-grid",
        "--ckpt",
        s(&ck),
        "--shapes",
        "2",
        "--appearances",
        "2",
        "--out",
        s(&grid),
    ]);
    assert!(grid.exists());
}

#[test]
fn keys_are_listed() {
    let out = ok(&["keys"]);
    assert!(out.contains("model.nerf.hidden"));
    assert!(out.contains("latent_lr"));
}

#[test]
fn smoke_gen_and_train() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("D");
    ok(&[
        "gen-data",
        "--objects",
        "2",
        "--views",
        "2",
        "--res",
        "16",
        "--out",
        s(&d),
    ]);
    let pngs = std::fs::read_dir(&d)
        .unwrap()
        .chain(std::fs::read_dir(d.join("images")).into_iter().flatten())
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 4);
    assert!(d.join("manifest.json").exists());
    let r = dir.path().join("R");
    ok(&[
        "train",
        "--algo",
        "mcmc",
        "--data",
        s(&d),
        "--iters",
        "10",
        "--out",
        s(&r),
        "--set",
        "model.render.samples=4",
    ]);
    assert!(r.join("checkpoint.bin").exists());
    assert_eq!(
        std::fs::read_to_string(r.join("metrics.log")).unwrap().lines().count(),
        10
    );
}
