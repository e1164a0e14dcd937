use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "n_videos=3",
    "n_heldout=1",
    "embed_dim=8",
    "unified_dim=8",
    "hidden_dim=12",
    "word_dim=8",
    "att_dim=8",
    "pretrain_epochs=2",
    "max_epochs=3",
];

fn rgl(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgl"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny(args: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = TINY.iter().flat_map(|kv| ["--set".to_string(), kv.to_string()]).collect();
    v.extend(args.iter().map(|s| s.to_string()));
    v
}

fn rgl_tiny(cwd: &Path, args: &[&str]) -> Output {
    let full = tiny(args);
    let refs: Vec<&str> = full.iter().map(String::as_str).collect();
    rgl(cwd, &refs)
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file below `root` with its contents.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Checks `value` against the keywords the report schema uses: `$ref` into
/// `$defs`, `type`, `required`, `properties`, `additionalProperties`,
/// `minimum` and `maximum`.
fn validate(root: &Value, schema: &Value, value: &Value, at: &str, errors: &mut Vec<String>) {
    if let Some(r) = schema["$ref"].as_str() {
        let name = r.strip_prefix("#/$defs/").expect("local $ref");
        return validate(root, &root["$defs"][name], value, at, errors);
    }
    if let Some(t) = schema["type"].as_str() {
        let fits = match t {
            "object" => value.is_object(),
            "boolean" => value.is_boolean(),
            "number" => value.is_number(),
            "integer" => value.is_u64() || value.is_i64(),
            other => panic!("unsupported type {other}"),
        };
        if !fits {
            errors.push(format!("{at}: expected {t}, got {value}"));
            return;
        }
    }
    if let Some(x) = value.as_f64() {
        if schema["minimum"].as_f64().is_some_and(|m| x < m) || schema["maximum"].as_f64().is_some_and(|m| x > m) {
            errors.push(format!("{at}: {x} out of range"));
        }
    }
    let Some(obj) = value.as_object() else { return };
    for key in schema["required"].as_array().into_iter().flatten() {
        let key = key.as_str().unwrap();
        if !obj.contains_key(key) {
            errors.push(format!("{at}: missing {key}"));
        }
    }
    for (key, v) in obj {
        match schema["properties"].get(key) {
            Some(sub) => validate(root, sub, v, &format!("{at}/{key}"), errors),
            None if schema["additionalProperties"] == Value::Bool(false) => {
                errors.push(format!("{at}: unexpected {key}"))
            }
            None => {}
        }
    }
}

/// Synthesizes and trains the tiny corpus under `root/data` and `root/run`.
fn trained(root: &Path) -> (PathBuf, PathBuf) {
    ok(&rgl_tiny(root, &["synth", "--out", "data"]));
    ok(&rgl_tiny(root, &["train", "--manifest", "data/manifest.json", "--out", "run", "--quiet"]));
    (root.join("data/manifest.json"), root.join("run"))
}

#[test]
fn synth_default_corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = rgl(dir.path(), &["synth", "--out", "a"]);
    ok(&a);
    ok(&rgl(dir.path(), &["synth", "--out", "b"]));
    let ma = fs::read(dir.path().join("a/manifest.json")).unwrap();
    assert_eq!(ma, fs::read(dir.path().join("b/manifest.json")).unwrap());
    let v: Value = serde_json::from_slice(&ma).unwrap();
    assert_eq!(v["videos"].as_array().unwrap().len(), 20);
    assert!(String::from_utf8_lossy(&a.stdout).contains("videos 20"));

    ok(&rgl(dir.path(), &["--seed", "7", "synth", "--out", "c"]));
    assert_ne!(ma, fs::read(dir.path().join("c/manifest.json")).unwrap());
}

#[test]
fn invalid_configuration_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = rgl(dir.path(), &["--set", "embed_dim=-3", "synth", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("embed_dim"), "{}", stderr(&out));
    assert!(!dir.path().join("x").exists());

    fs::write(dir.path().join("bad.cfg"), "preset = desk\nregions = -1\n").unwrap();
    let out = rgl(dir.path(), &["--config", "bad.cfg", "synth", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("regions"), "{}", stderr(&out));

    let out = rgl(dir.path(), &["--set", "lr", "synth", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = rgl(dir.path(), &["--help"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for code in ["0  success", "2  invalid", "3  training diverged", "4  I/O", "5  gradient audit"] {
        assert!(text.contains(code), "{code} missing from help");
    }
}

#[test]
fn train_logs_one_line_per_epoch_and_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (_, run) = trained(root);
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    let epochs: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(epochs.last().unwrap()["epoch"].as_u64().unwrap() as usize, epochs.len());
    for e in &epochs {
        for key in ["epoch", "L_S", "L_M", "L_R", "L_G", "val_cider"] {
            assert!(e.get(key).is_some(), "{key} missing");
        }
    }
    for f in ["best.ckpt", "final.ckpt", "last.ckpt", "config.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let first = rgl_tiny(
        root,
        &["train", "--manifest", "data/manifest.json", "--out", "resumed", "--halt-after", "3", "--quiet"],
    );
    ok(&first);
    assert!(String::from_utf8_lossy(&first.stdout).contains("halted after epoch 3"));
    assert_eq!(fs::read_to_string(root.join("resumed/log.jsonl")).unwrap().lines().count(), 3);
    ok(&rgl_tiny(
        root,
        &["train", "--manifest", "data/manifest.json", "--out", "resumed", "--resume", "--quiet"],
    ));
    assert_eq!(fs::read_to_string(root.join("resumed/log.jsonl")).unwrap(), log);
    for f in ["final.ckpt", "best.ckpt"] {
        assert_eq!(fs::read(root.join("resumed").join(f)).unwrap(), fs::read(run.join(f)).unwrap(), "{f}");
    }

    // the checkpoint records its configuration
    let out = rgl(
        root,
        &["--set", "lr=0.5", "train", "--manifest", "data/manifest.json", "--out", "resumed", "--resume"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn evaluate_records_mode_and_matches_published_schema() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (manifest, run) = trained(root);
    let ckpt = run.join("final.ckpt");
    let (ckpt, manifest) = (ckpt.to_str().unwrap(), manifest.to_str().unwrap());

    let schema: Value =
        serde_json::from_str(include_str!("../schemas/metric_report.schema.json")).unwrap();

    for (flag, out_dir) in [(None, "plain"), (Some("--teacher-forced"), "tf")] {
        let mut args = vec!["evaluate", "--checkpoint", ckpt, "--manifest", manifest, "--split", "train", "--out", out_dir];
        args.extend(flag);
        ok(&rgl(root, &args));
        let report: Value = serde_json::from_slice(&fs::read(root.join(out_dir).join("report.json")).unwrap()).unwrap();
        let mut errors = Vec::new();
        validate(&schema, &schema, &report, "", &mut errors);
        assert!(errors.is_empty(), "{errors:?}");
        assert_eq!(report["mode"]["teacher_forced"], Value::Bool(flag.is_some()));
        let text = fs::read_to_string(root.join(out_dir).join("report.txt")).unwrap();
        assert!(text.contains("CIDEr") && text.contains("CHAIR"));
    }

    let mut broken: Value = serde_json::from_slice(&fs::read(root.join("tf/report.json")).unwrap()).unwrap();
    broken["extra"] = Value::from(1);
    let mut errors = Vec::new();
    validate(&schema, &schema, &broken, "", &mut errors);
    assert!(!errors.is_empty());

    // idempotent output
    ok(&rgl(root, &["evaluate", "--checkpoint", ckpt, "--manifest", manifest, "--split", "train", "--teacher-forced", "--out", "tf2"]));
    assert_eq!(fs::read(root.join("tf/report.json")).unwrap(), fs::read(root.join("tf2/report.json")).unwrap());

    let out = rgl(root, &["report", "--input", "plain/report.json", "--input", "tf/report.json", "--out", "tables"]);
    ok(&out);
    let table = fs::read_to_string(root.join("tables/table.txt")).unwrap();
    assert!(table.contains("plain") || table.contains("report"));
}

#[test]
fn evaluate_with_missing_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    ok(&rgl_tiny(dir.path(), &["synth", "--out", "data"]));
    let out = rgl(
        dir.path(),
        &["evaluate", "--checkpoint", "nope.ckpt", "--manifest", "data/manifest.json", "--out", "ev"],
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("nope.ckpt"), "{}", stderr(&out));
    assert!(!dir.path().join("ev").exists());

    fs::write(dir.path().join("junk.ckpt"), b"junk").unwrap();
    let out = rgl(
        dir.path(),
        &["evaluate", "--checkpoint", "junk.ckpt", "--manifest", "data/manifest.json", "--out", "ev"],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn generate_writes_traces_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (manifest, run) = trained(root);
    let ckpt = run.join("best.ckpt");
    for out in ["g1", "g2"] {
        ok(&rgl(
            root,
            &["generate", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(), "--beam", "2", "--out", out],
        ));
    }
    let a = fs::read(root.join("g1/traces.json")).unwrap();
    assert_eq!(a, fs::read(root.join("g2/traces.json")).unwrap());
    let traces: Value = serde_json::from_slice(&a).unwrap();
    // one held-out video of three clips
    assert_eq!(traces.as_array().unwrap().len(), 3);
    let out = rgl(
        root,
        &["generate", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(), "--beam", "0", "--out", "g3"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_names_a_corrupted_block() {
    let dir = tempfile::tempdir().unwrap();
    let out = rgl_tiny(dir.path(), &["gradcheck", "--coords", "4", "--out", "audit"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("audit/gradcheck.json")).unwrap()).unwrap();
    assert!(!report["checks"].as_array().unwrap().is_empty());

    let out = rgl_tiny(dir.path(), &["gradcheck", "--coords", "4", "--corrupt", "decoder.w_hy", "--out", "bad"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(stderr(&out).contains("decoder.w_hy"), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));

    let out = rgl_tiny(dir.path(), &["gradcheck", "--corrupt", "no.such.block", "--out", "bad2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn subcommands_write_only_below_out() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::create_dir(root.join("cwd")).unwrap();
    let cwd = root.join("cwd");
    let check = |args: &[&str], out: &str| {
        let before = snapshot(root);
        ok(&rgl_tiny(&cwd, args));
        let after = snapshot(root);
        for (path, bytes) in &after {
            if before.get(path) != Some(bytes) {
                assert!(path.starts_with(Path::new("cwd").join(out)), "{path:?} written outside {out}");
            }
        }
        assert!(before.keys().all(|p| after.contains_key(p)));
    };
    check(&["synth", "--out", "s"], "s");
    check(&["train", "--manifest", "s/manifest.json", "--out", "t", "--quiet"], "t");
    check(&["generate", "--checkpoint", "t/final.ckpt", "--manifest", "s/manifest.json", "--out", "g"], "g");
    check(&["evaluate", "--checkpoint", "t/final.ckpt", "--manifest", "s/manifest.json", "--out", "e"], "e");
    check(&["report", "--input", "e/report.json", "--out", "r"], "r");
    check(&["gradcheck", "--coords", "2", "--out", "a"], "a");
}
