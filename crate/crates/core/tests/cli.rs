use std::path::Path;

use fmr::cli::{run, EXIT_OK, EXIT_USAGE};

fn fmr(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("fmr").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn gen(dir: &Path, families: &str, count: &str) {
    let (code, _, err) = fmr(&["gen", "--families", families, "--count", count, "--points", "64", "--seed", "7", "--out", p(dir)]);
    assert_eq!(code, EXIT_OK, "{err}");
}

#[test]
fn gen_writes_one_file_per_cloud_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen(&a, "sphere,box", "10");
    gen(&b, "sphere,box", "10");
    let fa = files(&a);
    assert_eq!(fa.len(), 21);
    assert!(fa.iter().any(|(n, _)| n == "manifest.csv"));
    assert_eq!(fa, files(&b));
}

#[test]
fn gen_rejects_empty_clouds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let (code, _, _) = fmr(&["gen", "--families", "box", "--points", "0", "--out", p(&out)]);
    assert_eq!(code, EXIT_USAGE);
    assert!(!out.exists());
}

#[test]
fn train_register_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "box,ellipsoid", "4");
    let run_dir = tmp.path().join("run");
    let common = ["--epochs", "2", "--seed", "1", "--feature-dim", "32", "--cloud-size", "64"];
    let mut args = vec!["train", "--mode", "unsupervised", "--out", p(&run_dir), p(&data)];
    args.extend(common);
    let (code, _, err) = fmr(&args);
    assert_eq!(code, EXIT_OK, "{err}");
    let report = std::fs::read_to_string(run_dir.join("train_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);

    let semi_dir = tmp.path().join("semi");
    let mut args = vec!["train", "--mode", "semi", "--out", p(&semi_dir), p(&data)];
    args.extend(common);
    assert_eq!(fmr(&args).0, EXIT_OK);
    let semi = std::fs::read_to_string(semi_dir.join("train_report.csv")).unwrap();
    let pe: Vec<f64> = semi.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert!(pe.iter().all(|&v| v > 0.0));

    let cloud = data.join("box_0000.xyz");
    let model = run_dir.join("final.ckpt");
    let (code, out, err) = fmr(&["register", "--model", p(&model), "--source", p(&cloud), "--target", p(&cloud)]);
    assert_eq!(code, EXIT_OK, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 5);
    for (i, row) in lines[..3].iter().enumerate() {
        let v: Vec<f64> = row.split_whitespace().map(|x| x.parse().unwrap()).collect();
        assert_eq!(v.len(), 4);
        for (j, x) in v.iter().enumerate() {
            let expected = if i == j { 1.0 } else { 0.0 };
            assert!((x - expected).abs() < 1e-6, "{out}");
        }
    }
    assert!(lines[3].starts_with("r_est=") && lines[4].starts_with("iterations="));
}

#[test]
fn register_validates_its_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "box", "1");
    let cloud = data.join("box_0000.xyz");
    assert_eq!(fmr(&["register", "--source", p(&cloud), "--target", p(&cloud)]).0, EXIT_USAGE);
    let aligned = tmp.path().join("aligned.xyz");
    let (code, _, err) = fmr(&["register", "--method", "icp", "--source", p(&cloud), "--target", p(&cloud), "--out", p(&aligned)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(aligned.exists());
    let missing = tmp.path().join("missing.xyz");
    assert_eq!(fmr(&["register", "--method", "icp", "--source", p(&missing), "--target", p(&cloud)]).0, EXIT_USAGE);
}

#[test]
fn train_names_a_missing_dataset() {
    let (code, _, err) = fmr(&["train", "/nonexistent/fmr-data"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("/nonexistent/fmr-data"));
}

#[test]
fn bench_rows_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "box,ellipsoid", "2");
    let strip = |s: String| s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let (code, _, err) = fmr(&[
            "bench", "rotation", "--methods", "icp", "--data", p(&data), "--angles", "0,30,60", "--trials", "5", "--seed", "3",
            "--out", p(&out),
        ]);
        assert_eq!(code, EXIT_OK, "{err}");
        outputs.push(strip(std::fs::read_to_string(out.join("rotation.csv")).unwrap()));
    }
    assert_eq!(outputs[0].len(), 4);
    assert_eq!(outputs[0], outputs[1]);

    let out = tmp.path().join("t");
    let (code, _, err) = fmr(&["bench", "timing", "--methods", "icp", "--sizes", "64,128", "--out", p(&out)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(std::fs::read_to_string(out.join("timing.csv")).unwrap().lines().count(), 3);

    let (code, _, _) = fmr(&["bench", "rotation", "--methods", "fmr", "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code, EXIT_USAGE);
}
