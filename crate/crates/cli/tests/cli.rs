use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn relm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_relm"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn ok(cmd: &mut Command) -> Value {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn fails(cmd: &mut Command) -> Value {
    let out = cmd.output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    let v: Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["status"], "error");
    v
}

fn run_tiny(out: &Path) -> Value {
    ok(relm()
        .args(["run-manifest", "--manifest"])
        .arg(fixture("tiny.toml"))
        .arg("--out")
        .arg(out))
}

#[test]
fn vocab_stats_from_counts() {
    let v = ok(relm().args(["vocab-stats", "--size-hmr", "59009", "--size-lmr", "40583", "--overlap", "21606"]));
    assert_eq!(v["report"]["new_items"], 18977);
    assert!(v["report_line"].as_str().unwrap().contains("new_items=18977"));
    assert!(v["config"]["train"]["patience"].is_u64());
}

#[test]
fn structured_errors() {
    let e = fails(relm().args(["gen-synthetic", "--out", "/tmp/never", "--config", "train.patiense=2"]));
    assert_eq!(e["kind"], "config");
    let e = fails(relm().args(["gen-synthetic", "--config", "synthetic.vocab_size=5", "--out", "/tmp/never"]));
    assert_eq!(e["kind"], "core");
    let e = fails(relm().args(["score-bleu", "--hyp", "/nonexistent/h", "--ref", "/nonexistent/r"]));
    assert_eq!(e["kind"], "io");
    let e = fails(relm().args(["translate", "--bogus"]));
    assert_eq!(e["kind"], "usage");
}

#[test]
fn manifest_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_tiny(&a);
    run_tiny(&b);
    let record = relm_cli::manifest::read_record(&a).unwrap();
    assert_eq!(record.phases.len(), 10);
    for phase in &record.phases {
        for (file, hash) in &phase.outputs {
            let other = relm_cli::manifest::sha256_file(&b.join(file)).unwrap();
            assert_eq!(&other, hash, "{file}");
        }
    }
    let text = |p: &Path| std::fs::read_to_string(p.join("run.json")).unwrap();
    assert_eq!(text(&a), text(&b));
    let unmt = &record.phases.iter().find(|p| p.name == "unmt").unwrap().summary;
    assert_eq!(unmt["config"]["train"]["max_steps"], 3);
    assert_eq!(unmt["config"]["train"]["seed"], 5);
}

#[test]
fn tampered_intermediate_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_tiny(&out);
    relm_cli::manifest::verify_record(&out).unwrap();
    let merges = out.join("bpe/merges.txt");
    let mut text = std::fs::read_to_string(&merges).unwrap();
    text.push_str("x y\n");
    std::fs::write(&merges, text).unwrap();
    let e = relm_cli::manifest::verify_record(&out).unwrap_err();
    assert_eq!(e.kind(), "hash");

    let orphan = dir.path().join("orphan.toml");
    std::fs::write(
        &orphan,
        "id='x'\nseed=1\n[[phase]]\nname='s'\ncommand='score-bleu'\nargs=['--hyp','{out}/h','--ref','{out}/h']\n",
    )
    .unwrap();
    std::fs::write(out.join("h"), "a b\n").unwrap();
    let e = relm_cli::manifest::run_manifest(&orphan, &out).unwrap_err();
    assert_eq!(e.kind(), "manifest");
}

#[test]
fn beam_one_matches_greedy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_tiny(&out);
    let translate = |extra: &[&str], name: &str| {
        let target = dir.path().join(name);
        ok(relm()
            .arg("translate")
            .arg("--checkpoint")
            .arg(out.join("unmt/nmt.ckpt"))
            .arg("--input")
            .arg(out.join("data/dev.lmr"))
            .arg("--merges")
            .arg(out.join("joint/merges.txt"))
            .arg("--output")
            .arg(&target)
            .args(extra));
        std::fs::read(target).unwrap()
    };
    let greedy = translate(&["--greedy"], "g.txt");
    let beam1 = translate(&["--beam", "1"], "b.txt");
    assert!(!greedy.is_empty());
    assert_eq!(greedy, beam1);
    let lines = String::from_utf8(greedy).unwrap().lines().count();
    assert_eq!(lines, std::fs::read_to_string(out.join("data/dev.lmr")).unwrap().lines().count());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, name: &str| {
        let out = dir.path().join(name);
        ok(relm()
            .env("RELM_THREADS", threads)
            .args(["run-manifest", "--manifest"])
            .arg(fixture("tiny.toml"))
            .arg("--out")
            .arg(&out));
        std::fs::read(out.join("unmt/nmt.ckpt")).unwrap()
    };
    assert_eq!(run("1", "one"), run("3", "three"));
    let e = fails(relm().env("RELM_THREADS", "zero").args(["vocab-stats", "--size-hmr", "1", "--size-lmr", "1", "--overlap", "0"]));
    assert_eq!(e["kind"], "config");
}

#[test]
fn extend_and_no_extension_vocab_flow() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_tiny(&out);
    let stats = ok(relm()
        .arg("vocab-stats")
        .arg("--hmr-vocab")
        .arg(out.join("bpe/vocab.txt"))
        .arg("--lmr-vocab")
        .arg(out.join("joint/vocab_lmr.txt"))
        .arg("--corpus")
        .arg(out.join("data/lmr.txt"))
        .arg("--merges")
        .arg(out.join("bpe/merges.txt")));
    assert_eq!(stats["report"]["overlap"], 0);
    assert_eq!(stats["segmentation"]["char_split_rate"], 1.0);
    let seg = dir.path().join("seg.txt");
    ok(relm()
        .arg("apply-bpe")
        .arg("--merges")
        .arg(out.join("joint/merges.txt"))
        .arg("--input")
        .arg(out.join("data/lmr.txt"))
        .arg("--output")
        .arg(&seg));
    assert_eq!(
        std::fs::read_to_string(&seg).unwrap().lines().count(),
        std::fs::read_to_string(out.join("data/lmr.txt")).unwrap().lines().count()
    );
    let random = ok(relm()
        .args(["init-nmt", "--random", "--vocab"])
        .arg(out.join("vocab/vocab.txt"))
        .arg("--out")
        .arg(dir.path().join("rand"))
        .args(["--config", "model.d_model=16", "--config", "model.n_heads=2"]));
    assert_eq!(random["random"], true);
}
