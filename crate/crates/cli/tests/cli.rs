use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stdgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stdgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) {
    let out = stdgan(args);
    assert_eq!(
        code(&out),
        0,
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synthetic(dir: &Path, name: &str, seed: u64, domains: usize) -> PathBuf {
    let out = dir.join(name);
    ok(&[
        "make-synthetic",
        "--out",
        s(&out),
        "--seed",
        &seed.to_string(),
        "--domains",
        &domains.to_string(),
        "--images",
        "2",
        "--size",
        "64",
    ]);
    out.join("manifest.txt")
}

const TINY_GAN: [&str; 10] = [
    "--set",
    "gan.num_epochs=2",
    "--set",
    "gan.decay_epoch=1",
    "--set",
    "gan.patch_size=32",
    "--set",
    "gan.overlap=0",
    "--set",
    "gan.width=2",
];

fn train_gan(manifest: &Path, out: &Path) -> Output {
    let mut args = vec![
        "train-gan",
        "--manifest",
        s(manifest),
        "--out",
        s(out),
        "--seed",
        "7",
    ];
    args.extend(TINY_GAN);
    stdgan(&args)
}

fn bytes_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_generation_is_deterministic_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synthetic(tmp.path(), "a", 3, 3);
    let b = synthetic(tmp.path(), "b", 3, 3);
    let (da, db) = (a.parent().unwrap(), b.parent().unwrap());
    assert_eq!(bytes_under(da), bytes_under(db));
    assert_eq!(
        fs::read_to_string(&a).unwrap(),
        "domain0\ndomain1\ndomain2\n"
    );
    assert!(da.join("domain2/labels/tile001.png").is_file());

    // existing output needs --force
    let again = stdgan(&[
        "make-synthetic",
        "--out",
        s(da),
        "--seed",
        "4",
        "--size",
        "64",
        "--images",
        "2",
    ]);
    assert_eq!(code(&again), 2);
    ok(&[
        "make-synthetic",
        "--out",
        s(da),
        "--seed",
        "4",
        "--size",
        "64",
        "--images",
        "2",
        "--force",
    ]);
    assert_ne!(bytes_under(da), bytes_under(db));

    assert_eq!(
        code(&stdgan(&[
            "make-synthetic",
            "--out",
            s(&tmp.path().join("c")),
            "--domains",
            "2"
        ])),
        2
    );
}

#[test]
fn baselines_mirror_the_input_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synthetic(tmp.path(), "data", 1, 3);
    for method in ["zscore", "grayworld", "histeq"] {
        let out = tmp.path().join(method);
        ok(&[
            "baseline",
            "--manifest",
            s(&m),
            "--method",
            method,
            "--out",
            s(&out),
        ]);
        for d in 0..3 {
            let dom = format!("domain{d}");
            assert!(out.join(&dom).join("images/tile000.png").is_file());
            assert_eq!(
                fs::read(out.join(&dom).join("labels/tile001.png")).unwrap(),
                fs::read(m.parent().unwrap().join(&dom).join("labels/tile001.png")).unwrap()
            );
        }
        for stage in ["before", "after"] {
            let csv =
                fs::read_to_string(out.join("histograms").join(format!("{stage}.csv"))).unwrap();
            let rows: Vec<&str> = csv.lines().skip(1).collect();
            assert_eq!(rows.len(), 9);
            for row in rows {
                let total: f64 = row
                    .split(',')
                    .skip(2)
                    .map(|v| v.parse::<f64>().unwrap())
                    .sum();
                assert!((total - 1.0).abs() < 1e-9, "{stage}: {total}");
            }
            assert!(out
                .join("histograms")
                .join(format!("{stage}.png"))
                .is_file());
        }
    }
    let bad = stdgan(&[
        "baseline",
        "--manifest",
        s(&m),
        "--method",
        "retinex",
        "--out",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(code(&bad), 2);
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn gan_training_standardization_and_style_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synthetic(tmp.path(), "data", 2, 3);
    let run1 = tmp.path().join("run1");
    let out = train_gan(&m, &run1);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "ckpt_epoch1.bin",
        "ckpt_epoch2.bin",
        "latest",
        "train_log.jsonl",
        "profile.json",
        "config.txt",
    ] {
        assert!(run1.join(f).is_file(), "{f} missing");
    }
    let run2 = tmp.path().join("run2");
    assert_eq!(code(&train_gan(&m, &run2)), 0);
    assert_eq!(
        fs::read(run1.join("train_log.jsonl")).unwrap(),
        fs::read(run2.join("train_log.jsonl")).unwrap()
    );
    // a finished run resumes to a no-op; a fresh run into it needs --force
    let mut resume = vec![
        "train-gan",
        "--manifest",
        s(&m),
        "--out",
        s(&run1),
        "--resume",
    ];
    resume.extend(TINY_GAN);
    ok(&resume);
    assert_eq!(code(&train_gan(&m, &run1)), 2);

    let std_dir = tmp.path().join("std");
    ok(&[
        "standardize",
        "--manifest",
        s(&m),
        "--checkpoint",
        s(&run1),
        "--out",
        s(&std_dir),
    ]);
    assert_eq!(
        fs::read_to_string(std_dir.join("manifest.txt")).unwrap(),
        "domain0\ndomain1\ndomain2\n"
    );
    assert!(std_dir.join("domain1/images/tile001.png").is_file());
    assert!(std_dir.join("profile.json").is_file());
    assert!(std_dir.join("histograms/after.png").is_file());
    assert_eq!(
        fs::read(std_dir.join("domain0/labels/tile000.png")).unwrap(),
        fs::read(m.parent().unwrap().join("domain0/labels/tile000.png")).unwrap()
    );

    let fig = tmp.path().join("matrix.png");
    ok(&[
        "style-matrix",
        "--manifest",
        s(&m),
        "--checkpoint",
        s(&run1.join("ckpt_epoch2.bin")),
        "--out",
        s(&fig),
    ]);
    let (w, h) = image_dims(&fig);
    assert_eq!((w, h), (4 * 64 + 3 * 4, 3 * 64 + 2 * 4));

    // a checkpoint trained on 3 domains does not fit a 4-domain dataset
    let m4 = synthetic(tmp.path(), "four", 2, 4);
    let mismatch = stdgan(&[
        "standardize",
        "--manifest",
        s(&m4),
        "--checkpoint",
        s(&run1),
        "--out",
        s(&tmp.path().join("y")),
    ]);
    assert_eq!(code(&mismatch), 3);
}

fn image_dims(path: &Path) -> (u32, u32) {
    let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(path).unwrap()));
    let reader = decoder.read_info().unwrap();
    let info = reader.info();
    (info.width, info.height)
}

#[test]
fn segmentation_train_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synthetic(tmp.path(), "data", 5, 3);
    let seg = tmp.path().join("seg");
    let cfg = tmp.path().join("seg.cfg");
    fs::write(
        &cfg,
        "seg.epochs=2\nseg.batch_size=4\nseg.patch_size=32\nseg.overlap=0\nseg.width=2\n",
    )
    .unwrap();
    ok(&[
        "train-seg",
        "--manifest",
        s(&m),
        "--sources",
        "0,1",
        "--out",
        s(&seg),
        "--config",
        s(&cfg),
        "--seed",
        "1",
    ]);
    assert!(seg.join("segmenter.bin").is_file());
    assert_eq!(
        fs::read_to_string(seg.join("losses.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let ev = tmp.path().join("eval");
    let model = seg.join("segmenter.bin");
    ok(&[
        "eval",
        "--manifest",
        s(&m),
        "--model",
        s(&model),
        "--target",
        "2",
        "--method",
        "raw",
        "--out",
        s(&ev),
    ]);
    let csv = fs::read_to_string(ev.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,building,road,tree,overall"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "raw");
    let vals: Vec<f64> = row[1..4]
        .iter()
        .filter(|v| **v != "NA")
        .map(|v| v.parse().unwrap())
        .collect();
    let overall: f64 = row[4].parse().unwrap();
    assert!((vals.iter().sum::<f64>() / vals.len() as f64 - overall).abs() < 1e-6);
    assert!(ev.join("predictions/tile000.png").is_file());

    assert_eq!(
        code(&stdgan(&[
            "eval",
            "--manifest",
            s(&m),
            "--model",
            s(&model),
            "--target",
            "7",
            "--out",
            s(&tmp.path().join("e2"))
        ])),
        2
    );
    fs::remove_dir_all(m.parent().unwrap().join("domain2/labels")).unwrap();
    let unlabeled = stdgan(&[
        "eval",
        "--manifest",
        s(&m),
        "--model",
        s(&model),
        "--target",
        "2",
        "--out",
        s(&tmp.path().join("e3")),
    ]);
    assert_eq!(code(&unlabeled), 3);
    assert!(String::from_utf8_lossy(&unlabeled.stderr).contains("label"));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synthetic(tmp.path(), "data", 1, 3);
    let out = s(&tmp.path().join("o")).to_string();
    let bad_key = stdgan(&[
        "train-gan",
        "--manifest",
        s(&m),
        "--out",
        &out,
        "--set",
        "gan.depth=3",
    ]);
    assert_eq!(code(&bad_key), 2);
    let bad_cfg = stdgan(&[
        "train-gan",
        "--manifest",
        s(&m),
        "--out",
        &out,
        "--set",
        "gan.decay_epoch=50",
    ]);
    assert_eq!(code(&bad_cfg), 2);
    let missing = stdgan(&[
        "train-gan",
        "--manifest",
        s(&tmp.path().join("none.txt")),
        "--out",
        &out,
    ]);
    assert_eq!(code(&missing), 3);
    assert!(!tmp.path().join("o").exists());
    assert_eq!(code(&stdgan(&["no-such-command"])), 2);
    let threads = Command::new(env!("CARGO_BIN_EXE_stdgan"))
        .args([
            "baseline",
            "--manifest",
            s(&m),
            "--method",
            "zscore",
            "--out",
            &out,
        ])
        .env("STDGAN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
    let one = Command::new(env!("CARGO_BIN_EXE_stdgan"))
        .args([
            "baseline",
            "--manifest",
            s(&m),
            "--method",
            "zscore",
            "--out",
            &out,
        ])
        .env("STDGAN_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&one), 0);
}
