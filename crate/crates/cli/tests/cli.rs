use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sourceswap::pipeline::imageio;
use sourceswap::{rng, BinaryMask, LatentGrid};

const BIN: &str = env!("CARGO_BIN_EXE_sourceswap");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "bad json ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn texture(seed: u64, n: usize) -> LatentGrid {
    let mut r = rng::seeded(seed);
    LatentGrid::from_fn(3, n, n, |_, _, _| (rng::uniform_below(&mut r, 256) as f64) / 255.0).unwrap()
}

fn rect_mask(n: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> BinaryMask {
    BinaryMask::from_fn(n, n, |y, x| rows.contains(&y) && cols.contains(&x)).unwrap()
}

fn square(n: usize, lo: usize, hi: usize) -> BinaryMask {
    rect_mask(n, lo..hi, lo..hi)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Three 64x64 entries; `c` has a 60-row mask and fails the size filter.
fn dataset(dir: &Path) -> PathBuf {
    let masks = [
        ("a", rect_mask(64, 16..48, 16..48)),
        ("b", rect_mask(64, 20..40, 10..50)),
        ("c", rect_mask(64, 2..62, 20..50)),
    ];
    let mut lines = String::new();
    for (i, (id, mask)) in masks.iter().enumerate() {
        imageio::save_rgb(&texture(i as u64, 64), dir.join(format!("{id}.png"))).unwrap();
        mask.save_png(dir.join(format!("{id}_mask.png"))).unwrap();
        lines.push_str(&format!(
            "{{\"id\":\"{id}\",\"image_path\":\"{id}.png\",\"mask_path\":\"{id}_mask.png\",\"caption\":\"object {id}\"}}\n"
        ));
    }
    let manifest = dir.join("manifest.jsonl");
    fs::write(&manifest, lines).unwrap();
    manifest
}

#[test]
fn help_snapshot() {
    let mut text = String::new();
    for sub in [
        "",
        "make-pairs",
        "perturb",
        "invert",
        "sample",
        "refine",
        "eval-region",
        "assemble-train",
        "protocol-selftest",
    ] {
        let args: Vec<&str> = if sub.is_empty() { vec!["--help"] } else { vec![sub, "--help"] };
        let out = run(&args);
        assert!(out.status.success());
        text.push_str(&format!("$ sourceswap {}\n", args.join(" ")));
        text.push_str(&String::from_utf8(out.stdout).unwrap());
        text.push('\n');
    }
    let snap = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots/help.txt");
    if std::env::var_os("UPDATE_SNAPSHOTS").is_some() {
        fs::create_dir_all(snap.parent().unwrap()).unwrap();
        fs::write(&snap, &text).unwrap();
    }
    let expected = fs::read_to_string(&snap).expect("snapshot exists; run with UPDATE_SNAPSHOTS=1 to create it");
    assert_eq!(text, expected, "help output changed; rerun with UPDATE_SNAPSHOTS=1 if intended");
}

#[test]
fn bad_usage_exits_2() {
    assert_eq!(run(&["perturb", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn make_pairs_skips_filtered_entry() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let out = dir.path().join("pairs");
    let res = run(&[
        "--json",
        "--jobs",
        "2",
        "make-pairs",
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
        "--steps",
        "10",
        "--seed",
        "3",
    ]);
    assert_eq!(res.status.code(), Some(1), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = json_of(&res);
    assert_eq!(summary["status"], "partial");
    assert_eq!(summary["records"], 2);
    assert_eq!(summary["skipped"][0]["id"], "c");
    assert!(summary["skipped"][0]["reason"].as_str().unwrap().contains("mask size"));
    assert_eq!(summary["config"]["schedule"]["steps"], 10);

    let records: Vec<sourceswap::pipeline::PairRecord> =
        sourceswap::pipeline::manifest::read_jsonl(out.join("pairs.jsonl")).unwrap();
    assert_eq!(records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    for r in &records {
        assert!(r.missing_artifacts().is_empty());
    }
    assert!(out.join("run_config.toml").is_file());

    // the echoed config alone reproduces the run
    let again = dir.path().join("again");
    let res = run(&[
        "--config",
        p(&out.join("run_config.toml")),
        "make-pairs",
        "--manifest",
        p(&manifest),
        "--out",
        p(&again),
    ]);
    assert_eq!(res.status.code(), Some(1));
    for id in ["a", "b"] {
        let t = |d: &Path| fs::read(d.join(id).join("perturbed.tensor")).unwrap();
        assert_eq!(t(&out), t(&again));
    }

    // training samples from the pairs
    let train = dir.path().join("train");
    let res =
        run(&["--json", "assemble-train", "--pairs", p(&out.join("pairs.jsonl")), "--out", p(&train), "--seed", "1"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(json_of(&res)["samples"], 2);
    assert!(train.join("a").join("noisy_latent.tensor").is_file());
}

#[test]
fn perturb_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let noise = dir.path().join("z.tensor");
    let mut r = rng::seeded(42);
    let z = LatentGrid::from_fn(4, 16, 16, |_, _, _| rng::standard_normal(&mut r)).unwrap();
    imageio::save_tensor(&z, &noise).unwrap();
    // mask at 4x the latent size is resampled down
    let mask = dir.path().join("m.png");
    rect_mask(64, 16..48, 16..48).save_png(&mask).unwrap();
    let outs: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("p{i}.tensor"));
            let res = run(&[
                "perturb",
                "--noise",
                p(&noise),
                "--mask",
                p(&mask),
                "--out",
                p(&out),
                "--seed",
                "7",
                "--mode",
                "high-only",
                "--stop-freq",
                "0.3",
            ]);
            assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
            fs::read(out).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let res = run(&[
        "perturb",
        "--noise",
        p(&noise),
        "--mask",
        p(&mask),
        "--out",
        p(&dir.path().join("x")),
        "--mode",
        "sideways",
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn invert_then_sample_with_zero_denoiser() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.png");
    let original = texture(9, 16);
    imageio::save_rgb(&original, &img).unwrap();
    let z = dir.path().join("z.tensor");
    let back = dir.path().join("back.png");
    let exact = dir.path().join("back.tensor");
    assert!(run(&["invert", "--image", p(&img), "--out", p(&z), "--denoiser", "zero"]).status.success());
    assert!(run(&["sample", "--noise", p(&z), "--out", p(&back), "--tensor-out", p(&exact), "--denoiser", "zero"])
        .status
        .success());
    // the tensor file stores float32
    let decoded = imageio::load_tensor(&exact).unwrap();
    assert!(decoded.max_abs_diff(&original).unwrap() < 1e-5);
    assert_eq!(imageio::load_rgb(&back).unwrap(), original);
}

#[test]
fn refine_defaults_to_two_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let (reference, source, mask) = (dir.path().join("r.png"), dir.path().join("s.png"), dir.path().join("m.png"));
    imageio::save_rgb(&texture(1, 8), &reference).unwrap();
    imageio::save_rgb(&texture(2, 32), &source).unwrap();
    square(32, 8, 24).save_png(&mask).unwrap();
    let out = dir.path().join("out.png");
    let res = run(&[
        "--json",
        "refine",
        "--reference",
        p(&reference),
        "--source",
        p(&source),
        "--mask",
        p(&mask),
        "--out",
        p(&out),
        "--keep-intermediates",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = json_of(&res);
    assert_eq!(summary["rounds"], 2);
    assert_eq!(summary["round_times_ms"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("out.round2.png").is_file());

    let res = run(&[
        "refine",
        "--reference",
        p(&reference),
        "--source",
        p(&source),
        "--mask",
        p(&mask),
        "--out",
        p(&out),
        "--operator",
        "identity",
        "--k",
        "4",
    ]);
    assert!(res.status.success());
    assert_eq!(imageio::load_rgb(&out).unwrap(), imageio::load_rgb(&source).unwrap());
}

#[test]
fn eval_region_single_and_list() {
    let dir = tempfile::tempdir().unwrap();
    let (src, res_img, mask) = (dir.path().join("s.png"), dir.path().join("r.png"), dir.path().join("m.png"));
    let source = texture(5, 20);
    imageio::save_rgb(&source, &src).unwrap();
    // change only inside the mask
    let m = square(20, 6, 14);
    let edited =
        LatentGrid::from_fn(
            3,
            20,
            20,
            |c, y, x| if m.get(y, x) { 1.0 - source.get(c, y, x) } else { source.get(c, y, x) },
        )
        .unwrap();
    imageio::save_rgb(&edited, &res_img).unwrap();
    m.save_png(&mask).unwrap();
    let out = run(&[
        "--json",
        "eval-region",
        "--source",
        p(&src),
        "--result",
        p(&res_img),
        "--mask",
        p(&mask),
        "--dilate",
        "1",
        "--margin",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_of(&out)["report"]["rows"][0]["value"], 0.0);

    let list = dir.path().join("list.jsonl");
    fs::write(
        &list,
        "{\"id\":\"x\",\"source_path\":\"s.png\",\"result_path\":\"r.png\",\"mask_path\":\"m.png\"}\n\
         {\"id\":\"y\",\"source_path\":\"s.png\",\"result_path\":\"missing.png\",\"mask_path\":\"m.png\"}\n",
    )
    .unwrap();
    let report = dir.path().join("report");
    let out = run(&[
        "eval-region",
        "--list",
        p(&list),
        "--metric",
        "1-ssim",
        "--dilate",
        "1",
        "--margin",
        "2",
        "--out",
        p(&report),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(csv.starts_with("id,region_pixel_count,metric_id,value,status\nx,"));
}

#[test]
fn selftest_passes_against_echo() {
    let out = run(&["--json", "protocol-selftest", "--fuzz-cases", "200"]);
    assert_eq!(out.status.code(), Some(0));
    let s = json_of(&out);
    assert!(s["checks"].as_array().unwrap().iter().all(|c| c["ok"] == true));
}
