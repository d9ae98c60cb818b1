use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use zstyle::image::write_image;
use zstyle::numerics::Tensor;
use zstyle::pipeline::parse_diagnostics_csv;
use zstyle::toy::{make_texture_dataset, stripes, TextureKind};

fn zstyle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zstyle")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Weights trained once for the whole file with a short schedule.
fn weights() -> &'static PathBuf {
    static W: OnceLock<PathBuf> = OnceLock::new();
    W.get_or_init(|| {
        let dir = scratch("weights");
        let path = dir.join("toy.ztoy");
        let log = dir.join("loss.csv");
        let o = zstyle(&["train-toy-denoiser", "--epochs", "30", "--out", s(&path), "--log", s(&log)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = std::fs::read_to_string(&log).unwrap();
        assert!(text.starts_with("epoch,loss\n"));
        assert_eq!(text.lines().count(), 31);
        path
    })
}

/// Writes a stripes content image and a dots style image into `dir`.
fn inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let content = dir.join("content.ppm");
    let style = dir.join("style.ppm");
    write_image(&content, &stripes(16, 4, true, 0, [0.2, 0.25, 0.3], [0.85, 0.8, 0.6])).unwrap();
    write_image(&style, &make_texture_dataset(&[TextureKind::Dots], 1, 16, 202)[0].image).unwrap();
    (content, style)
}

#[test]
fn no_arguments_is_usage_error() {
    let o = zstyle(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stylize"));
}

#[test]
fn help_succeeds() {
    let o = zstyle(&["stylize", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("--lambda"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = scratch("usage");
    let (c, st) = inputs(&dir);
    let out = dir.join("o.ppm");
    let w = s(weights());
    for extra in [
        vec!["--window", "40:30"],
        vec!["--window", "0:40"],
        vec!["--lambda", "-1"],
        vec!["--sain", "sideways"],
        vec!["--blocks", "9"],
        vec!["--sain-bins", "1"],
    ] {
        let mut args = vec!["stylize", "--content", s(&c), "--style", s(&st), "--out", s(&out), "--weights", w];
        args.extend(extra.iter());
        let o = zstyle(&args);
        assert_eq!(o.status.code(), Some(2), "{extra:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("usage-error:"), "{}", stderr(&o));
        assert_eq!(stderr(&o).lines().count(), 1);
    }
}

#[test]
fn file_errors_exit_three() {
    let dir = scratch("io");
    let (c, st) = inputs(&dir);
    let out = dir.join("o.ppm");
    let missing = dir.join("nope.ppm");
    let o = zstyle(&["stylize", "--content", s(&missing), "--style", s(&st), "--out", s(&out), "--weights", s(weights())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("io-error:"));

    let junk = dir.join("junk.ppm");
    std::fs::write(&junk, b"P6\n16 16\n255\nshort").unwrap();
    let o = zstyle(&["stylize", "--content", s(&junk), "--style", s(&st), "--out", s(&out), "--weights", s(weights())]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = zstyle(&["stylize", "--content", s(&c), "--style", s(&st), "--out", s(&out), "--weights", s(&junk)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn diagnose_identical_inputs() {
    let dir = scratch("diagnose");
    let (c, _) = inputs(&dir);
    let args = [
        "diagnose", "--content", s(&c), "--style", s(&c), "--lambda", "1", "--sain", "off", "--window", "0:30",
        "--weights", s(weights()),
    ];
    let o = zstyle(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = parse_diagnostics_csv(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(rows.len(), 30);
    assert_eq!(rows[0].0, 30);
    assert!(rows.iter().all(|r| r.1 <= 1e-6), "{rows:?}");
}

#[test]
fn stylize_is_byte_deterministic() {
    let dir = scratch("determinism");
    let (c, st) = inputs(&dir);
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.join(format!("out{run}.ppm"));
        let diag = dir.join(format!("diag{run}.csv"));
        let o = zstyle(&[
            "stylize", "--content", s(&c), "--style", s(&st), "--out", s(&out), "--diag", s(&diag), "--weights",
            s(weights()),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push((std::fs::read(&out).unwrap(), std::fs::read(&diag).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0].0.starts_with(b"P6\n16 16\n255\n"));
}

fn write_frames(dir: &Path) -> PathBuf {
    let frames = dir.join("frames");
    std::fs::create_dir_all(&frames).unwrap();
    for i in 0..3 {
        let img = stripes(16, 4, true, i, [0.2, 0.25, 0.3], [0.85, 0.8, 0.6]);
        write_image(frames.join(format!("{i:04}.ppm")), &img).unwrap();
    }
    frames
}

#[test]
fn stylize_video_is_byte_deterministic() {
    let dir = scratch("video");
    let (_, st) = inputs(&dir);
    let frames = write_frames(&dir);
    let mut runs = Vec::new();
    for run in 0..2 {
        let out = dir.join(format!("out{run}"));
        let report = dir.join(format!("report{run}.csv"));
        let o = zstyle(&[
            "stylize-video", "--frames", s(&frames), "--style", s(&st), "--out", s(&out), "--report", s(&report),
            "--weights", s(weights()),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let files: Vec<Vec<u8>> = (0..3).map(|i| std::fs::read(out.join(format!("{i:04}.ppm"))).unwrap()).collect();
        runs.push((files, std::fs::read_to_string(&report).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    let report = &runs[0].1;
    assert!(report.starts_with("i,diff\n"));
    assert_eq!(report.lines().count(), 4);

    let empty = dir.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let o = zstyle(&["stylize-video", "--frames", s(&empty), "--style", s(&st), "--out", s(&dir.join("x"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn config_file_supplies_defaults() {
    let dir = scratch("config");
    let (c, _) = inputs(&dir);
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, format!("# identical-input check\nlambda = 1\nsain=off\nwindow=0:30\nweights={}\n", s(weights())))
        .unwrap();
    let o = zstyle(&["diagnose", "--content", s(&c), "--style", s(&c), "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = parse_diagnostics_csv(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.1 <= 1e-6));

    // The command line wins over the file.
    let o = zstyle(&["diagnose", "--content", s(&c), "--style", s(&c), "--config", s(&cfg), "--window", "50:60"]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(&cfg, "lambda\n").unwrap();
    let o = zstyle(&["diagnose", "--content", s(&c), "--style", s(&c), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let o = zstyle(&["diagnose", "--content", s(&c), "--style", s(&c), "--config", s(&dir.join("none.cfg"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn mask_and_grayscale_inputs() {
    let dir = scratch("mask");
    let (c, st) = inputs(&dir);
    let mask = dir.join("mask.pgm");
    let m: Vec<f64> = (0..256).map(|k| if k % 16 < 8 { 1.0 } else { 0.0 }).collect();
    write_image(&mask, &Tensor::new(vec![16, 16, 1], m).unwrap()).unwrap();
    let out = dir.join("o.ppm");
    for ramp in ["0", "1"] {
        let o = zstyle(&[
            "stylize", "--content", s(&c), "--style", s(&st), "--mask", s(&mask), "--ramp", ramp, "--out", s(&out),
            "--weights", s(weights()),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = zstyle(&[
        "stylize", "--content", s(&c), "--style", s(&st), "--style", s(&st), "--mask", s(&mask), "--out", s(&out),
        "--weights", s(weights()),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let gray = dir.join("gray.pgm");
    write_image(&gray, &Tensor::filled(&[16, 16, 1], 0.4)).unwrap();
    let o = zstyle(&["stylize", "--content", s(&gray), "--style", s(&st), "--out", s(&out), "--weights", s(weights())]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn default_run_trains_on_the_fly_within_a_minute() {
    let dir = scratch("smoke");
    let (c, st) = inputs(&dir);
    let out = dir.join("o.ppm");
    let start = Instant::now();
    let o = zstyle(&["stylize", "--content", s(&c), "--style", s(&st), "--out", s(&out)]);
    let elapsed = start.elapsed();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    assert!(std::fs::read(&out).unwrap().starts_with(b"P6\n16 16\n255\n"));
}
