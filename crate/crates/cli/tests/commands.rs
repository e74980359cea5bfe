use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use tempfile::TempDir;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn clnet(args: &[&str]) -> Out {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["clnet"];
    full.extend_from_slice(args);
    let code = clnet_cli::run(full, &mut out, &mut err);
    Out {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn ok(args: &[&str]) -> Out {
    let o = clnet(args);
    assert_eq!(o.code, 0, "clnet {args:?} failed:\n{}", o.stderr);
    o
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

const TINY: &str = "preset=\"tiny\"";

/// Generates data and trains a tiny model for `steps` steps inside `dir`.
fn tiny_run(dir: &TempDir, steps: usize) -> (String, String) {
    let data = p(dir, "train.jsonl");
    let ckpt = p(dir, "model.ckpt");
    ok(&["gen-data", "--set", TINY, "--n", "8", "--out", &data]);
    let steps = format!("train.steps={steps}");
    ok(&[
        "train", "--set", TINY, "--set", &steps, "--data", &data, "--checkpoint", &ckpt, "--log", &p(dir, "log.jsonl"),
    ]);
    (data, ckpt)
}

#[test]
fn bad_config_values_exit_2_and_name_the_field() {
    let dir = TempDir::new().unwrap();
    let o = clnet(&["gen-data", "--set", "data.p_occ=2", "--out", &p(&dir, "d.jsonl")]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("p_occ"), "{}", o.stderr);

    let o = clnet(&["gen-data", "--set", "model.heads_x=2", "--out", &p(&dir, "d.jsonl")]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("model.heads_x"), "{}", o.stderr);

    let o = clnet(&["train", "--set", "paths.log=\"a\"", "--set", "paths.checkpoint=\"a\""]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("paths"), "{}", o.stderr);

    assert_eq!(clnet(&["no-such-command"]).code, 2);
    assert_eq!(clnet(&["--help"]).code, 0);
}

#[test]
fn missing_inputs_exit_2() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "d.jsonl");
    ok(&["gen-data", "--set", TINY, "--n", "2", "--out", &data]);
    let missing = p(&dir, "absent.ckpt");
    for args in [
        vec!["eval", "--checkpoint", &missing, "--data", &data],
        vec!["match", "--checkpoint", &missing, "--data", &data],
        vec!["dump-attention", "--checkpoint", &missing, "--data", &data, "--out", &data],
    ] {
        let o = clnet(&args);
        assert_eq!(o.code, 2, "{args:?}");
        assert!(o.stderr.contains("absent.ckpt"), "{}", o.stderr);
    }
    let o = clnet(&["train", "--set", TINY, "--data", &missing]);
    assert_eq!(o.code, 2);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let (data_a, ckpt_a) = tiny_run(&a, 10);
    let (data_b, ckpt_b) = tiny_run(&b, 10);
    assert_eq!(fs::read(&data_a).unwrap(), fs::read(&data_b).unwrap());
    assert_eq!(fs::read(&ckpt_a).unwrap(), fs::read(&ckpt_b).unwrap());
    assert_eq!(fs::read(p(&a, "log.jsonl")).unwrap(), fs::read(p(&b, "log.jsonl")).unwrap());
    assert_eq!(fs::read_to_string(p(&a, "log.jsonl")).unwrap().lines().count(), 10);

    let e1 = ok(&["eval", "--checkpoint", &ckpt_a, "--data", &data_a]).stdout;
    let e2 = ok(&["eval", "--checkpoint", &ckpt_b, "--data", &data_a]).stdout;
    assert_eq!(e1, e2);
    assert!(e1.starts_with("Method"), "{e1}");
}

#[test]
fn untrained_checkpoints_still_give_a_table() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = tiny_run(&dir, 0);
    let o = ok(&["eval", "--checkpoint", &ckpt, "--data", &data, "--json", &p(&dir, "r.json")]);
    let lines: Vec<&str> = o.stdout.lines().collect();
    assert!(lines[0].contains("R@0.25") && lines[0].contains("R@4.0"), "{}", o.stdout);
    assert!(lines[1].starts_with("clnet-mul"), "{}", o.stdout);
    assert!(o.stdout.contains("ExactAcc"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(p(&dir, "r.json")).unwrap()).unwrap();
    assert_eq!(json[0]["report"]["cases"], 8);
}

#[test]
fn add_and_mul_both_appear_in_one_table() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "d.jsonl");
    ok(&["gen-data", "--set", TINY, "--n", "4", "--out", &data]);
    let mut ckpts = Vec::new();
    for form in ["mul", "add"] {
        let ckpt = p(&dir, &format!("{form}.ckpt"));
        let set = format!("model.cost_form=\"{form}\"");
        ok(&[
            "train", "--set", TINY, "--set", &set, "--set", "train.steps=2", "--data", &data, "--checkpoint", &ckpt,
            "--log", &p(&dir, &format!("{form}.log")),
        ]);
        ckpts.push(ckpt);
    }
    let o = ok(&[
        "eval", "--checkpoint", &ckpts[0], "--checkpoint", &ckpts[1], "--data", &data, "--curve-dir", &p(&dir, "curves"),
    ]);
    assert!(o.stdout.contains("clnet-mul") && o.stdout.contains("clnet-add"), "{}", o.stdout);
    assert!(dir.path().join("curves/clnet-add.csv").is_file());
}

#[test]
fn resume_reproduces_the_uninterrupted_log() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "d.jsonl");
    ok(&["gen-data", "--set", TINY, "--n", "8", "--out", &data]);
    let common = ["--set", TINY, "--set", "train.steps=10", "--set", "train.warmup_steps=3", "--set", "train.flip=true"];
    let run = |extra: &[&str]| {
        let mut a: Vec<&str> = vec!["train"];
        a.extend_from_slice(&common);
        a.extend_from_slice(&["--data", &data]);
        a.extend_from_slice(extra);
        ok(&a);
    };
    let full_log = p(&dir, "full.log");
    run(&["--checkpoint", &p(&dir, "full.ckpt"), "--log", &full_log]);
    let part_log = p(&dir, "part.log");
    let part = p(&dir, "part.ckpt");
    run(&["--set", "train.checkpoint_every=5", "--checkpoint", &part, "--log", &part_log]);
    // Restart from the step-5 snapshot, dropping the second half of the log.
    let head: Vec<String> = fs::read_to_string(&part_log).unwrap().lines().take(5).map(String::from).collect();
    fs::write(&part_log, head.join("\n") + "\n").unwrap();
    run(&["--resume", &format!("{part}.step5"), "--checkpoint", &p(&dir, "resumed.ckpt"), "--log", &part_log]);

    let parse = |path: &str| -> Vec<serde_json::Value> {
        fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    };
    let (a, b) = (parse(&full_log), parse(&part_log));
    assert_eq!(a.len(), 10);
    assert_eq!(b.len(), 10);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x["step"], y["step"]);
        assert_eq!(x["samples"], y["samples"]);
        let (lx, ly) = (x["total"].as_f64().unwrap(), y["total"].as_f64().unwrap());
        assert!((lx - ly).abs() < 1e-9, "step {}: {lx} vs {ly}", x["step"]);
    }
    assert_eq!(fs::read(p(&dir, "full.ckpt")).unwrap(), fs::read(p(&dir, "resumed.ckpt")).unwrap());
}

#[test]
fn divergence_aborts_with_a_batch_dump() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "d.jsonl");
    ok(&["gen-data", "--set", TINY, "--n", "4", "--out", &data]);
    let ckpt = p(&dir, "m.ckpt");
    let o = clnet(&[
        "train", "--set", TINY, "--set", "train.lr=1e300", "--set", "train.warmup_steps=0", "--set", "train.steps=5",
        "--set", "train.grad_clip=0.0", "--data", &data, "--checkpoint", &ckpt, "--log", &p(&dir, "l.jsonl"),
    ]);
    assert_eq!(o.code, 1, "{}", o.stderr);
    let dump_path = clnet_cli::nan_dump_path(Path::new(&ckpt));
    assert!(o.stderr.contains(&dump_path.display().to_string()), "{}", o.stderr);
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(&dump_path).unwrap()).unwrap();
    assert!(dump["batch"].as_array().unwrap().len() == 2);
    assert!(dump["error"].as_str().unwrap().contains("non-finite"));
    assert!(!Path::new(&ckpt).exists());
}

#[test]
fn match_writes_one_json_line_per_pair() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = tiny_run(&dir, 3);
    let out = p(&dir, "pairs.jsonl");
    ok(&["match", "--checkpoint", &ckpt, "--data", &data, "--out", &out]);
    let text = fs::read_to_string(&out).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["query_id"].is_u64());
        assert!(v["score"].is_f64());
        for k in ["cc_index", "mlo_index"] {
            assert!(v[k].is_u64() || v[k] == "dustbin", "{line}");
        }
        assert!(!(v["cc_index"] == "dustbin" && v["mlo_index"] == "dustbin"));
    }
}

#[test]
fn attention_dumps_are_row_stochastic() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = tiny_run(&dir, 2);
    let out_dir = p(&dir, "attn");
    let o = ok(&["dump-attention", "--checkpoint", &ckpt, "--data", &data, "--index", "1", "--out", &out_dir]);
    let files: Vec<PathBuf> = o.stdout.lines().map(PathBuf::from).collect();
    let names: Vec<String> = files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for want in ["layer0_cc_from_mlo.csv", "layer0_mlo_from_cc.csv", "layer0_link_cc.csv", "layer0_link_mlo.csv"] {
        assert!(names.iter().any(|n| n == want), "{names:?}");
    }
    for f in &files {
        let text = fs::read_to_string(f).unwrap();
        for row in text.lines() {
            let sum: f64 = row.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "{}: {sum}", f.display());
        }
    }
    let o = clnet(&["dump-attention", "--checkpoint", &ckpt, "--data", &data, "--index", "99", "--out", &out_dir]);
    assert_eq!(o.code, 2);
}

#[test]
fn gradcheck_passes_and_flags_a_corrupted_rule() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "g.json");
    ok(&["gradcheck", "--set", TINY, "--max-entries", "3", "--out", &out]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);

    let o = clnet(&["gradcheck", "--set", TINY, "--max-entries", "3", "--corrupt", "softmax"]);
    assert_eq!(o.code, 1);
    let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(v["passed"], false);
    assert!(o.stderr.contains("link.") || o.stderr.contains("dec.") || o.stderr.contains("enc."), "{}", o.stderr);
    assert_eq!(clnet(&["gradcheck", "--set", TINY, "--corrupt", "nope"]).code, 2);
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let bin = env!("CARGO_BIN_EXE_clnet");
    let gen = |seed_env: Option<&str>, extra: &[&str], out: &str| {
        let mut c = Command::new(bin);
        c.args(["gen-data", "--set", TINY, "--n", "3", "--out", out]).args(extra);
        c.env_remove("CLNET_SEED");
        if let Some(s) = seed_env {
            c.env("CLNET_SEED", s);
        }
        let st = c.output().unwrap();
        (st.status.code().unwrap(), fs::read(out).ok())
    };
    let (c1, env7) = gen(Some("7"), &[], &p(&dir, "a"));
    let (c2, set7) = gen(None, &["--set", "seed=7"], &p(&dir, "b"));
    let (c3, set0) = gen(None, &[], &p(&dir, "c"));
    assert_eq!((c1, c2, c3), (0, 0, 0));
    assert_eq!(env7, set7);
    assert_ne!(env7, set0);
    let (code, _) = gen(Some("x"), &[], &p(&dir, "d"));
    assert_eq!(code, 2);
}

#[test]
fn desk_training_for_100_steps_is_quick() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "d.jsonl");
    let t = Instant::now();
    ok(&["gen-data", "--n", "50", "--out", &data]);
    ok(&[
        "train", "--set", "train.steps=100", "--data", &data, "--checkpoint", &p(&dir, "m.ckpt"), "--log", &p(&dir, "l"),
    ]);
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 600.0, "{secs} s");
}
