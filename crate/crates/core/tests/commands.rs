use std::path::Path;
use std::process::Command;

use mfn::commands::*;
use mfn::io::{read_image, write_image};
use mfn::layouts::Region;
use mfn::synth::eye_region;

fn synth(kind: Dataset, dir: &Path, count: usize, seed: u64, width: usize, height: usize) {
    let o = SynthOptions {
        count,
        seed,
        width,
        height,
        ..Default::default()
    };
    cmd_synth(kind, dir, &o).unwrap();
}

fn image_config(json: &str) -> RunConfig {
    parse_config(json.as_bytes()).unwrap()
}

fn trained_textures(root: &Path, count: usize) -> RunConfig {
    synth(Dataset::Textures, &root.join("train"), count, 0, 16, 16);
    let cfg = image_config(r#"{"task": "image"}"#);
    cmd_train(&cfg, &root.join("train"), &root.join("model")).unwrap();
    cfg
}

#[test]
fn table_training_writes_one_payload_per_factor() {
    let tmp = tempfile::tempdir().unwrap();
    synth(Dataset::Textures, &tmp.path().join("train"), 10, 0, 16, 16);
    let cfg = image_config(r#"{"task": "image"}"#);
    let s = cmd_train(&cfg, &tmp.path().join("train"), &tmp.path().join("model")).unwrap();
    assert_eq!(s.samples, 10);
    assert_eq!(s.payloads, s.factors.len());
    let files = std::fs::read_dir(tmp.path().join("model"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "mfnt"))
        .count();
    assert_eq!(files, s.factors.len());
}

#[test]
fn nmf_training_trace_is_non_increasing() {
    let tmp = tempfile::tempdir().unwrap();
    synth(Dataset::Textures, &tmp.path().join("train"), 12, 0, 16, 16);
    let cfg = image_config(r#"{"task": "image", "factor": {"kind": "nmf", "hidden_p": 5}}"#);
    cmd_train(&cfg, &tmp.path().join("train"), &tmp.path().join("model")).unwrap();
    let mut rdr = csv::Reader::from_path(tmp.path().join("model/nmf_trace.csv")).unwrap();
    let mut last: Option<(usize, f64)> = None;
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let factor: usize = rec[0].parse().unwrap();
        let obj: f64 = rec[2].parse().unwrap();
        if let Some((f, prev)) = last {
            if f == factor {
                assert!(obj <= prev, "factor {factor}: {obj} after {prev}");
            }
        }
        last = Some((factor, obj));
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn missing_training_dir_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no_such_dir");
    let err = cmd_train(&RunConfig::default(), &missing, &tmp.path().join("model")).unwrap_err();
    assert!(err.to_string().contains("no_such_dir"), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn seen_image_blob_is_restored_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    trained_textures(tmp.path(), 10);
    let input = tmp.path().join("train/tex_0003.ppm");
    let opts = InferOptions {
        mask: MaskSpec {
            erase: vec![Region { x0: 5, y0: 5, w: 6, h: 6 }],
            ..Default::default()
        },
        original: Some(input.clone()),
        output: tmp.path().join("out.ppm"),
        ..Default::default()
    };
    let out = cmd_infer(&tmp.path().join("model"), None, &input, &opts).unwrap();
    assert!(out.metrics.converged);
    assert!(out.metrics.perfect_restore, "l1 {}", out.metrics.l1_total);
    assert_eq!(read_image(&opts.output).unwrap(), read_image(&input).unwrap());
}

#[test]
fn eye_inpainting_beats_mean_fill() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, h) = (24, 32);
    synth(Dataset::Faces, &tmp.path().join("train"), 40, 0, w, h);
    synth(Dataset::Faces, &tmp.path().join("test"), 3, 500, w, h);
    let cfg = image_config(&format!(
        r#"{{"task": "image", "image": {{"width": {w}, "height": {h}}}, "factor": {{"kind": "nmf", "hidden_p": 5}}}}"#
    ));
    cmd_train(&cfg, &tmp.path().join("train"), &tmp.path().join("model")).unwrap();
    let eye = eye_region(w, h);
    let mask = MaskSpec {
        erase: vec![eye],
        ..Default::default()
    };
    let (mut ours, mut baseline) = (0.0, 0.0);
    for k in 0..3 {
        let input = tmp.path().join(format!("test/face_{k:04}.ppm"));
        let output = tmp.path().join(format!("out_{k}.ppm"));
        let opts = InferOptions {
            mask: mask.clone(),
            output: output.clone(),
            ..Default::default()
        };
        cmd_infer(&tmp.path().join("model"), None, &input, &opts).unwrap();
        ours += cmd_eval(&input, &output, Some(eye), None).unwrap().mse;

        let img = read_image(&input).unwrap();
        let filled = mean_fill(&img, &observed_mask(&mask, w, h).unwrap());
        let fill_path = tmp.path().join(format!("fill_{k}.ppm"));
        write_image(&fill_path, &filled).unwrap();
        baseline += cmd_eval(&input, &fill_path, Some(eye), None).unwrap().mse;
    }
    assert!(ours < baseline, "mfn mse {ours} vs mean fill {baseline}");
}

#[test]
fn all_masked_reports_no_evidence() {
    let tmp = tempfile::tempdir().unwrap();
    trained_textures(tmp.path(), 4);
    let opts = InferOptions {
        mask: MaskSpec {
            erase: vec![Region { x0: 0, y0: 0, w: 16, h: 16 }],
            ..Default::default()
        },
        output: tmp.path().join("out.ppm"),
        ..Default::default()
    };
    let err = cmd_infer(&tmp.path().join("model"), None, &tmp.path().join("train/tex_0000.ppm"), &opts).unwrap_err();
    assert!(matches!(err, CliError::NoEvidence), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn evidence_dominance_returns_the_input() {
    let tmp = tempfile::tempdir().unwrap();
    trained_textures(tmp.path(), 6);
    // an image the tables have never seen
    synth(Dataset::Textures, &tmp.path().join("new"), 1, 900, 16, 16);
    let input = tmp.path().join("new/tex_0000.ppm");
    let mut over = image_config(r#"{"task": "image"}"#);
    over.evidence_weight = 1e6;
    let opts = InferOptions {
        output: tmp.path().join("out.ppm"),
        ..Default::default()
    };
    cmd_infer(&tmp.path().join("model"), Some(&over), &input, &opts).unwrap();
    assert_eq!(read_image(&opts.output).unwrap(), read_image(&input).unwrap());
}

#[test]
fn training_digit_is_classified_correctly() {
    let tmp = tempfile::tempdir().unwrap();
    synth(Dataset::Digits, &tmp.path().join("train"), 20, 0, 32, 32);
    let cfg = image_config(r#"{"task": "digits"}"#);
    cmd_train(&cfg, &tmp.path().join("train"), &tmp.path().join("model")).unwrap();
    let probe = tmp.path().join("probe");
    std::fs::create_dir_all(&probe).unwrap();
    for name in ["3_0003.pgm", "7_0007.pgm", "0_0010.pgm"] {
        std::fs::copy(tmp.path().join("train").join(name), probe.join(name)).unwrap();
    }
    let s = cmd_classify(&tmp.path().join("model"), None, &probe, &tmp.path().join("labels.csv"), 2).unwrap();
    assert_eq!(s.accuracy, Some(1.0));
    for r in &s.rows {
        assert_eq!(r.predicted, r.truth);
    }
    assert!(tmp.path().join("labels.csv").exists());
}

#[test]
fn clean_benchmark_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    trained_textures(tmp.path(), 6);
    let opts = BenchmarkOptions {
        trials: 5,
        noise: 0.0,
        blob: 0,
        ..Default::default()
    };
    let s = cmd_benchmark(&tmp.path().join("model"), None, &tmp.path().join("train"), &opts, &tmp.path().join("bench.csv")).unwrap();
    assert_eq!(s.perfect_fraction, 1.0);
    assert_eq!(s.mean_l1_total, 0.0);
    let zero = BenchmarkOptions { trials: 0, ..opts };
    assert!(cmd_benchmark(&tmp.path().join("model"), None, &tmp.path().join("train"), &zero, &tmp.path().join("b.csv")).is_err());
}

fn mfn(args: &[&str], cwd: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_mfn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(mfn(&["synth", "textures", "--out", "tex", "--count", "3"], d), 0);
    std::fs::write(d.join("cfg.json"), r#"{"task": "image"}"#).unwrap();
    std::fs::write(d.join("bad.json"), r#"{"task": "image", "bogus": 1}"#).unwrap();
    assert_eq!(mfn(&["train", "--config", "bad.json", "--train-dir", "tex", "--model-dir", "m"], d), 2);
    assert_eq!(mfn(&["train", "--config", "cfg.json", "--train-dir", "nope", "--model-dir", "m"], d), 4);
    assert_eq!(mfn(&["train", "--config", "cfg.json", "--train-dir", "tex", "--model-dir", "m"], d), 0);
    let infer = ["infer", "--model-dir", "m", "--input", "tex/tex_0000.ppm", "--output", "o.ppm"];
    assert_eq!(mfn(&infer, d), 0);
    assert_eq!(mfn(&[&infer[..], &["--erase", "0,0,16,16"]].concat(), d), 3);
    assert_eq!(mfn(&[&infer[..], &["--max-iterations", "1"]].concat(), d), 3);
    assert_eq!(mfn(&["infer", "--model-dir", "m", "--input", "missing.ppm", "--output", "o.ppm"], d), 4);
}
