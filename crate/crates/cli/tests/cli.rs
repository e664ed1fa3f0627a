use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "steps = 1\nbatch = 2\ncheckpoint_every = 0\n[model]\ndepth = 2\ndim = 32\nheads = 2\n[sampler]\nsteps = 3\n";

fn mupad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mupad"))
        .args(args)
        .env_remove("MUPAD_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mupad(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = mupad(&["sample", "--bogus"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(!mupad(&["frobnicate"]).status.success());
}

#[test]
fn self_comparison_fid_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("d1");
    ok(&["gen-data", "--out", p(&d1), "--n", "24", "--seed", "3"]);
    let text = ok(&["eval", "--real", p(&d1), "--fake", p(&d1)]);
    let fid_line = text.lines().find(|l| l.starts_with("fid\t")).unwrap();
    let value: f64 = fid_line.split('\t').nth(1).unwrap().parse().unwrap();
    assert!(value < 1e-6, "{text}");
    assert!(text.lines().any(|l| l.starts_with("kid\t")));
}

#[test]
fn train_then_sample_translate_and_stain() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--out", p(&data), "--n", "6"]);
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--config", p(&cfg)]);
    let ck = run.join("checkpoints").join("latest.ckpt");
    assert!(ck.exists());
    assert_eq!(std::fs::read_to_string(run.join("loss.tsv")).unwrap().lines().count(), 2);

    let uncond = tmp.path().join("uncond");
    ok(&["sample", "--checkpoint", p(&ck), "--out", p(&uncond), "--n", "2"]);
    assert!(uncond.join("sample_0001.ppm").exists());

    let src = uncond.join("sample_0000.ppm");
    let rna = tmp.path().join("rna.txt");
    std::fs::write(&rna, vec!["0.5"; 331].join(" ")).unwrap();
    let cond = tmp.path().join("cond");
    ok(&[
        "sample", "--checkpoint", p(&ck), "--out", p(&cond), "--n", "1", "--cond-image", p(&src),
        "--cond-text", "dense cellularity", "--cond-rna", p(&rna), "--ode",
    ]);
    assert!(cond.join("sample_0000.ppm").exists());

    let tr = tmp.path().join("tr.ppm");
    ok(&[
        "translate", "--checkpoint", p(&ck), "--src", p(&src), "--src-prompt", "frozen", "--tgt-prompt", "ffpe",
        "--steps", "4", "--inject", "1", "--out", p(&tr),
    ]);
    assert!(tr.exists());
    let bad = mupad(&[
        "translate", "--checkpoint", p(&ck), "--src", p(&src), "--src-prompt", "frozen", "--tgt-prompt", "ffpe",
        "--steps", "4", "--inject", "9", "--out", p(&tr),
    ]);
    assert!(!bad.status.success());

    // the generate-task model has no structural path
    let st = mupad(&["stain", "--checkpoint", p(&ck), "--he", p(&src), "--group", "0", "--out", p(&tr)]);
    assert!(!st.status.success());
}

#[test]
fn stain_task_writes_marker_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--out", p(&data), "--n", "3"]);
    let cfg = tmp.path().join("stain.toml");
    let stain_cfg = SMALL
        .replace("steps = 1\n", "task = \"stain\"\nsteps = 1\n")
        .replace("[model]\n", "[model]\nstruct_channels = 48\nnum_groups = 2\n");
    std::fs::write(&cfg, stain_cfg).unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--config", p(&cfg)]);
    let ck = run.join("checkpoints").join("latest.ckpt");
    let he = tmp.path().join("he.ppm");
    std::fs::write(&he, flat_ppm([230, 160, 200])).unwrap();
    let out = tmp.path().join("groups");
    ok(&["stain", "--checkpoint", p(&ck), "--he", p(&he), "--out", p(&out), "--steps", "2"]);
    assert!(out.join("group_0.ppm").exists() && out.join("group_1.ppm").exists());
    let one = tmp.path().join("g1.ppm");
    ok(&["stain", "--checkpoint", p(&ck), "--he", p(&he), "--group", "1", "--out", p(&one), "--steps", "2"]);
    assert!(one.exists());
}

fn flat_ppm(rgb: [u8; 3]) -> Vec<u8> {
    let mut bytes = b"P6\n32 32\n255\n".to_vec();
    for _ in 0..32 * 32 {
        bytes.extend_from_slice(&rgb);
    }
    bytes
}

#[test]
fn seed_variable_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mupad"))
        .args(["gen-data", "--out", p(&tmp.path().join("d")), "--n", "1"])
        .env("MUPAD_SEED", "nope")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
