use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctnode::io::{load_volume, save_volume_tagged};
use serde_json::{json, Value};

fn ctnode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctnode"))
        .args(["--threads", "1"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = ctnode(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn fan(n_angles: usize, n_det: usize) -> Value {
    json!({
        "type": "fan",
        "n_angles": n_angles,
        "angular_range": [0.0, 360.0],
        "source_distance": 80.0,
        "detector_distance": 80.0,
        "n_detectors": n_det,
        "detector_pixel_size": 1.5,
    })
}

/// Runs `simulate` for a 2D disk phantom and returns the output dir.
fn simulate(root: &Path, name: &str, size: usize, n_angles: usize, seed: u64, sigma: f64) -> PathBuf {
    let cfg = json!({
        "phantom": {"kind": "disk_set", "size": [size, size], "seed": seed},
        "geometry": fan(n_angles, size + size / 2),
        "noise": {"kind": "gaussian", "sigma": sigma},
        "seed": 1000 + seed,
    });
    let cfg_path = root.join(format!("{name}.json"));
    write_json(&cfg_path, &cfg);
    let out = root.join(name);
    ok(&["simulate", "--config", s(&cfg_path), "--out", s(&out)]);
    out
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn simulate_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let a = simulate(t.path(), "a", 32, 30, 3, 0.0);
    let b = simulate(t.path(), "b", 32, 30, 3, 0.0);
    let fa = files(&a);
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(
        names,
        ["manifest.json", "phantom.ctv", "phantom.ctv.json", "sinogram.cts", "sinogram.cts.json"]
    );
    assert_eq!(fa, files(&b));
}

#[test]
fn manifest_records_increment() {
    let t = tempfile::tempdir().unwrap();
    let out = simulate(t.path(), "a", 16, 120, 0, 0.0);
    let m = read_json(&out.join("manifest.json"));
    assert!((m["angular_increment_deg"].as_f64().unwrap() - 3.0).abs() < 1e-12);
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["config"]["phantom"]["seed"], 0);
}

#[test]
fn bad_simulate_configs() {
    let t = tempfile::tempdir().unwrap();
    let cfg = json!({
        "phantom": {"kind": "disk_set", "size": [16, 16]},
        "geometry": fan(10, 24),
        "noise": {"kind": "gaussian", "sigma": -0.5},
    });
    let p = t.path().join("neg.json");
    write_json(&p, &cfg);
    let out = ctnode(&["simulate", "--config", s(&p), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigma"));

    let mut unknown = cfg.clone();
    unknown["noise"] = json!({"kind": "none"});
    unknown["colour"] = json!("blue");
    write_json(&p, &unknown);
    let out = ctnode(&["simulate", "--config", s(&p), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    let out = ctnode(&["--threads", "0", "simulate", "--config", s(&p), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

fn reconstruct(data: &Path, out: &Path, method: &str, extra: &[&str]) -> Output {
    let sino = data.join("sinogram.cts");
    let reference = data.join("phantom.ctv");
    let mut args = vec![
        "reconstruct",
        "--method",
        method,
        "--sinogram",
        s(&sino),
        "--reference",
        s(&reference),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ctnode(&args)
}

#[test]
fn all_methods_write_metrics() {
    let t = tempfile::tempdir().unwrap();
    let data = simulate(t.path(), "d", 32, 20, 5, 0.005);
    for m in ["fbp", "sirt", "tv"] {
        let out = t.path().join(m);
        let o = reconstruct(&data, &out, m, &["--iters", "20", "--export-slices"]);
        assert!(o.status.success(), "{m}: {}", String::from_utf8_lossy(&o.stderr));
        let r = read_json(&out.join("metrics.json"));
        assert_eq!(r["method"], m);
        for k in ["rmse", "psnr", "ssim"] {
            assert!(r[k].as_f64().unwrap().is_finite(), "{m} {k}");
        }
        assert!(out.join("recon_axis2.pgm").exists());
        if m != "fbp" {
            let csv = std::fs::read_to_string(out.join("iterations.csv")).unwrap();
            assert_eq!(csv.lines().count(), if m == "tv" { 22 } else { 21 });
        }
    }
    // unit λ is far too stiff for this operator
    let o = reconstruct(&data, &t.path().join("stiff"), "node", &["--untrained", "--gamma", "0.5"]);
    assert_eq!(o.status.code(), Some(4));
    let ode = t.path().join("ode.json");
    write_json(&ode, &json!({"t_end": 1.0, "step_size": 0.05, "lambda": 1e-3, "mu": 1.0}));
    let node = t.path().join("node");
    let o = reconstruct(&data, &node, "node", &["--untrained", "--gamma", "0.5", "--ode", s(&ode)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read_json(&node.join("metrics.json"))["rmse"].as_f64().unwrap().is_finite());
}

#[test]
fn untrained_node_at_zero_gamma_is_fbp() {
    let t = tempfile::tempdir().unwrap();
    let data = simulate(t.path(), "d", 32, 20, 5, 0.005);
    ok(&[
        "reconstruct", "--method", "fbp", "--sinogram", s(&data.join("sinogram.cts")), "--out", s(&t.path().join("fbp")),
    ]);
    ok(&[
        "reconstruct", "--method", "node", "--untrained", "--sinogram", s(&data.join("sinogram.cts")), "--out",
        s(&t.path().join("node")),
    ]);
    let a = std::fs::read(t.path().join("fbp/recon.ctv")).unwrap();
    let b = std::fs::read(t.path().join("node/recon.ctv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn reconstruct_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    let data = simulate(t.path(), "d", 16, 10, 0, 0.0);
    let o = reconstruct(&data, &t.path().join("x"), "node", &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = reconstruct(&data, &t.path().join("x"), "fdk", &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = reconstruct(&data, &t.path().join("x"), "fbp", &["--grid", "16,16,16"]);
    assert_eq!(o.status.code(), Some(3));
    let o = reconstruct(&data, &t.path().join("x"), "fbp", &["--grid", "20,20"]);
    assert_eq!(o.status.code(), Some(3));
    let o = reconstruct(&data, &t.path().join("x"), "node", &["--checkpoint", s(&t.path().join("nope.params"))]);
    assert_eq!(o.status.code(), Some(2));
}

fn train_config(root: &Path, n_train: usize, epochs: usize) -> PathBuf {
    let train: Vec<String> = (0..n_train)
        .map(|i| format!("{}/manifest.json", simulate(root, &format!("t{i}"), 16, 12, i as u64, 0.01).file_name().unwrap().to_str().unwrap()))
        .collect();
    let val = simulate(root, "v0", 16, 12, 50, 0.01);
    let cfg = json!({
        "train_samples": train,
        "val_samples": [val.join("manifest.json")],
        "arch": {"n_levels": 1, "base_channels": 2, "kernel_size": 3, "dims": 2},
        "ode": {"t_end": 1.0, "step_size": 0.05, "lambda": 0.005, "mu": 200.0},
        "train": {"epochs": epochs, "lr_net": 3e-3, "lr_gamma": 0.05, "seed": 7, "gamma_init": 0.2},
    });
    let p = root.join("train.json");
    write_json(&p, &cfg);
    p
}

#[test]
fn train_writes_history_and_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let cfg = train_config(t.path(), 10, 5);
    let (a, b) = (t.path().join("ra"), t.path().join("rb"));
    let o = ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("selected epoch"));
    ok(&["train", "--config", s(&cfg), "--out", s(&b)]);
    let csv = std::fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(files(&a), files(&b));

    // the checkpoint drives `reconstruct --method node`
    let data = t.path().join("t0");
    let o = reconstruct(&data, &t.path().join("n"), "node", &["--checkpoint", s(&a.join("best.params"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_resume_continues_adam() {
    let t = tempfile::tempdir().unwrap();
    let cfg = train_config(t.path(), 2, 2);
    let out = t.path().join("r");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    let mut c = read_json(&cfg);
    c["train"]["epochs"] = json!(4);
    write_json(&cfg, &c);
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--resume"]);
    let h = read_json(&out.join("history.json"));
    let steps: Vec<u64> = h["epochs"].as_array().unwrap().iter().map(|e| e["adam_step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![2, 4, 6, 8]);
    assert_eq!(read_json(&out.join("manifest.json"))["resumed"], true);
}

#[test]
fn train_input_errors() {
    let t = tempfile::tempdir().unwrap();
    let cfg = train_config(t.path(), 1, 1);
    let mut c = read_json(&cfg);
    c["train_samples"] = json!(["missing/manifest.json"]);
    write_json(&cfg, &c);
    let o = ctnode(&["train", "--config", s(&cfg), "--out", s(&t.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
    c["train_samples"] = json!([]);
    write_json(&cfg, &c);
    let o = ctnode(&["train", "--config", s(&cfg), "--out", s(&t.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
}

fn eval(recon: &Path, reference: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["eval", "--recon", s(recon), "--reference", s(reference), "--out", s(out)];
    args.extend_from_slice(extra);
    ctnode(&args)
}

#[test]
fn eval_paths() {
    let t = tempfile::tempdir().unwrap();
    let data = simulate(t.path(), "d", 32, 30, 2, 0.002);
    let phantom = data.join("phantom.ctv");
    let o = eval(&phantom, &phantom, &t.path().join("same"), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(&t.path().join("same/metrics.json"));
    assert_eq!(m["rmse"], 0.0);
    assert_eq!(m["ssim"], 1.0);

    let rec = t.path().join("fbp");
    assert!(reconstruct(&data, &rec, "fbp", &[]).status.success());
    ok(&["eval", "--recon", s(&rec.join("recon.ctv")), "--reference", s(&phantom), "--out", s(&t.path().join("e"))]);
    let a = read_json(&rec.join("metrics.json"));
    let b = read_json(&t.path().join("e/metrics.json"));
    for k in ["rmse", "psnr", "ssim"] {
        assert!((a[k].as_f64().unwrap() - b[k].as_f64().unwrap()).abs() < 1e-12, "{k}");
    }
    assert_eq!(b["method"], "fbp");

    // content outside the field of view only counts without the mask
    let mut v = load_volume(&rec.join("recon.ctv")).unwrap();
    v.data[0] += 1.0;
    let corner = t.path().join("corner.ctv");
    let side = ctnode::io::load_volume_with_sidecar(&rec.join("recon.ctv")).unwrap().1;
    save_volume_tagged(&corner, &v, Some("fbp"), side.geometry.as_ref()).unwrap();
    ok(&["eval", "--recon", s(&corner), "--reference", s(&phantom), "--out", s(&t.path().join("m"))]);
    ok(&["eval", "--recon", s(&corner), "--reference", s(&phantom), "--out", s(&t.path().join("u")), "--no-fov-mask"]);
    let masked = read_json(&t.path().join("m/metrics.json"))["rmse"].as_f64().unwrap();
    let unmasked = read_json(&t.path().join("u/metrics.json"))["rmse"].as_f64().unwrap();
    assert!((masked - b["rmse"].as_f64().unwrap()).abs() < 1e-12);
    assert!(unmasked > masked);

    let small = simulate(t.path(), "s", 16, 10, 0, 0.0);
    let o = eval(&phantom, &small.join("phantom.ctv"), &t.path().join("x"), &[]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn reconstruct_and_eval_are_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let data = simulate(t.path(), "d", 24, 16, 9, 0.003);
    for m in ["fbp", "sirt", "tv"] {
        let (a, b) = (t.path().join(format!("{m}a")), t.path().join(format!("{m}b")));
        assert!(reconstruct(&data, &a, m, &["--iters", "15", "--export-slices"]).status.success());
        assert!(reconstruct(&data, &b, m, &["--iters", "15", "--export-slices"]).status.success());
        let strip = |d: &Path| {
            files(d)
                .into_iter()
                .map(|(n, bytes)| {
                    if n == "metrics.json" {
                        let mut v: Value = serde_json::from_slice(&bytes).unwrap();
                        v.as_object_mut().unwrap().remove("runtime_seconds");
                        (n, serde_json::to_vec(&v).unwrap())
                    } else {
                        (n, bytes)
                    }
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b), "{m}");
    }
    let phantom = data.join("phantom.ctv");
    let recon = t.path().join("fbpa/recon.ctv");
    ok(&["eval", "--recon", s(&recon), "--reference", s(&phantom), "--out", s(&t.path().join("e1"))]);
    ok(&["eval", "--recon", s(&recon), "--reference", s(&phantom), "--out", s(&t.path().join("e2"))]);
    assert_eq!(files(&t.path().join("e1")), files(&t.path().join("e2")));
}
