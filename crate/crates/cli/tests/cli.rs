use std::path::Path;
use std::process::{Command, Output};

fn ghostbench(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghostbench"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ghostbench")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn edit_config(path: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

#[test]
fn mock_workspace_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&ghostbench(d, &["init-mock", "ws", "--images", "24", "--k", "8"]));
    let ws = d.join("ws");
    ok(&ghostbench(&ws, &["attack", "--config", "ghostbench.json"]));
    for f in ["manifest.jsonl", "verdicts.csv", "config.json"] {
        assert!(ws.join("out").join(f).is_file(), "{f}");
    }

    let csv = ok(&ghostbench(&ws, &["eval", "--manifest", "out/manifest.jsonl"]));
    assert!(csv.starts_with("class,"));
    assert!(csv.lines().any(|l| l.starts_with("overall,")));
    assert!(ws.join("out/success.json").is_file());

    std::fs::copy(ws.join("ghostbench.json"), ws.join("llava.json")).unwrap();
    edit_config(&ws.join("llava.json"), |v| {
        v["victim"] = "llava".into();
        v["output_dir"] = "out-llava".into();
    });
    ok(&ghostbench(&ws, &["attack", "--config", "llava.json"]));
    let first = ok(&ghostbench(
        &ws,
        &[
            "transfer", "--config", "ghostbench.json", "--source", "out/manifest.jsonl", "out-llava/manifest.jsonl",
            "--cache", "cache.json", "--out", "tr",
        ],
    ));
    assert!(first.starts_with("source,"));
    // A second run reads the cache and reproduces the matrix exactly.
    let second = ok(&ghostbench(
        &ws,
        &[
            "transfer", "--config", "ghostbench.json", "--source", "out/manifest.jsonl", "out-llava/manifest.jsonl",
            "--cache", "cache.json", "--out", "tr",
        ],
    ));
    assert_eq!(first, second);

    let fid: serde_json::Value =
        serde_json::from_str(&ok(&ghostbench(&ws, &["fid", "--a", "out/manifest.jsonl", "--b", "corpus/images", "--dim", "16"])))
            .unwrap();
    assert!(fid["fid"].as_f64().unwrap() >= 0.0);

    ok(&ghostbench(&ws, &["mitigate", "build", "--config", "ghostbench.json", "--manifest", "out/manifest.jsonl", "--out", "mit"]));
    let lines = std::fs::read_to_string(ws.join("mit/instructions.jsonl")).unwrap();
    let answers: Vec<String> = lines
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["answer"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(answers.iter().filter(|a| *a == "No").count(), answers.iter().filter(|a| *a == "Yes").count());

    ok(&ghostbench(
        &ws,
        &["report", "--success", "out/success.json", "--transfer", "tr/transfer.json", "--out", "rep"],
    ));
    for f in ["success.svg", "transfer.svg"] {
        let svg = std::fs::read_to_string(ws.join("rep").join(f)).unwrap();
        assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"), "{f}");
    }
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ghostbench(tmp.path(), &["attack", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ghostbench(tmp.path(), &["attack"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ghostbench(tmp.path(), &["sweep", "--config", "x.json", "--param", "gamma", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));

    ok(&ghostbench(tmp.path(), &["init-mock", "ws", "--images", "12", "--k", "4"]));
    let ws = tmp.path().join("ws");
    edit_config(&ws.join("ghostbench.json"), |v| v["victim"] = "nobody".into());
    assert_eq!(ghostbench(&ws, &["attack", "--config", "ghostbench.json"]).status.code(), Some(2));
}

#[test]
fn unreachable_backend_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&ghostbench(tmp.path(), &["init-mock", "ws", "--images", "12", "--k", "4"]));
    let ws = tmp.path().join("ws");
    // Port 9 (discard) is closed on test machines.
    edit_config(&ws.join("ghostbench.json"), |v| {
        v["profiles"]["qwen"]["backends"]["mllm"] = "tcp://127.0.0.1:9".into();
    });
    let out = ghostbench(&ws, &["attack", "--config", "ghostbench.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn incomplete_manifest_is_a_contract_violation() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&ghostbench(tmp.path(), &["init-mock", "ws", "--images", "24", "--k", "8"]));
    let ws = tmp.path().join("ws");
    ok(&ghostbench(&ws, &["attack", "--config", "ghostbench.json", "--max-samples", "3"]));
    let out = ghostbench(&ws, &["eval", "--manifest", "out/manifest.jsonl"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    // Resuming completes the run, after which evaluation succeeds.
    ok(&ghostbench(&ws, &["attack", "--config", "ghostbench.json", "--resume"]));
    ok(&ghostbench(&ws, &["eval", "--manifest", "out/manifest.jsonl"]));
}

#[test]
fn resume_refuses_a_changed_config() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&ghostbench(tmp.path(), &["init-mock", "ws", "--images", "24", "--k", "8"]));
    let ws = tmp.path().join("ws");
    ok(&ghostbench(&ws, &["attack", "--config", "ghostbench.json", "--max-samples", "2"]));
    edit_config(&ws.join("ghostbench.json"), |v| v["profiles"]["qwen"]["attack"]["tau_yes"] = 0.6.into());
    let out = ghostbench(&ws, &["attack", "--config", "ghostbench.json", "--resume"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}
