use std::path::Path;
use std::process::Command;

use quantpipe_cli::{exit, BUNDLED_FIXTURES};

fn qp(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_quantpipe"))
        .args(args)
        .env("QUANTPIPE_CORPUS_DIR", BUNDLED_FIXTURES)
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn eval_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, err) = qp(&["eval", "--out", out, "--assignment", "block.1=4"]);
    assert_eq!(code, exit::OK, "{err}");
    let v = read_json(&dir.path().join("eval.json"));
    assert_eq!(v["metric"], "perplexity");
    assert!(v["value"].as_f64().unwrap() > 1.0);
    assert_eq!(v["ops"]["linear_macs"].as_u64().unwrap() + v["ops"]["attention_macs"].as_u64().unwrap(), v["analytic_macs"].as_u64().unwrap());
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    let (code, _) = qp(&["eval", "--out", out, "--model", "/definitely/missing.ckpt"]);
    assert_eq!(code, exit::MISSING_FILE);

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"\x10\x00\x00\x00\x00\x00\x00\x00{not json}").unwrap();
    let (code, _) = qp(&["eval", "--out", out, "--model", bad.to_str().unwrap()]);
    assert_eq!(code, exit::MALFORMED_INPUT);

    let plan = dir.path().join("plan.json");
    std::fs::write(&plan, r#"{"blocks_removed": [1], "surprise": true}"#).unwrap();
    let (code, _) = qp(&["compress", "--out", out, "--plan", plan.to_str().unwrap()]);
    assert_eq!(code, exit::MALFORMED_INPUT);

    let (code, _) = qp(&["scan", "--out", out, "--precisions", "5"]);
    assert_eq!(code, exit::USAGE);
    let (code, _) = qp(&["frobnicate"]);
    assert_eq!(code, exit::USAGE);

    let (code, _) = qp(&["compress", "--out", out, "--keep-fraction", "1.5"]);
    assert_eq!(code, exit::INVALID_CONFIG);
    let (code, _) = qp(&["compress", "--out", out, "--remove-blocks", "9"]);
    assert_eq!(code, exit::INVALID_CONFIG);
    let (code, _) = qp(&["eval", "--out", out, "--assignment", "block.9=4"]);
    assert_eq!(code, exit::INVALID_CONFIG);
    let (code, _) = qp(&["decode", "--out", out, "--gamma", "0"]);
    assert_eq!(code, exit::INVALID_CONFIG);
    let (code, _) = qp(&["decode", "--out", out, "--threshold=-0.5"]);
    assert_eq!(code, exit::INVALID_CONFIG);

    let (code, _) = qp(&["explore", "--out", out, "--strategy", "exhaustive"]);
    assert_eq!(code, exit::CONSTRAINT);
    assert!(!Path::new(out).join("pareto.json").exists());
}

#[test]
fn compress_output_round_trips_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, err) = qp(&[
        "compress",
        "--out",
        out,
        "--remove-blocks",
        "4",
        "--prune",
        "0:128",
        "--keep-fraction",
        "0.5",
        "--after-block",
        "2",
        "--assignment",
        "block.5=8",
    ]);
    assert_eq!(code, exit::OK, "{err}");
    let v = read_json(&dir.path().join("compress.json"));
    let c = &v["compressed"];
    assert_eq!(
        c["ops"]["linear_macs"].as_u64().unwrap() + c["ops"]["attention_macs"].as_u64().unwrap(),
        c["analytic_macs"].as_u64().unwrap()
    );
    assert!(c["analytic_macs"].as_u64() < v["baseline"]["analytic_macs"].as_u64());
    // original block 5 is block 4 after removal
    assert_eq!(v["assignment"]["block.4"], 8);
    let ckpt = dir.path().join("compressed.ckpt");
    let eval_out = dir.path().join("e");
    let (code, err) = qp(&["eval", "--model", ckpt.to_str().unwrap(), "--out", eval_out.to_str().unwrap()]);
    assert_eq!(code, exit::OK, "{err}");
    let e = read_json(&eval_out.join("eval.json"));
    assert_eq!(e["value"], c["value"]);
}

#[test]
fn decode_reports_lossless_speculation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, err) = qp(&["decode", "--out", out, "--prompts", "4", "--steps", "24", "--cascade-inputs", "20"]);
    assert_eq!(code, exit::OK, "{err}");
    let v = read_json(&dir.path().join("decode.json"));
    assert_eq!(v["all_match"], true);
    assert!(v["total"]["target_calls"].as_u64().unwrap() <= 4 * 24);
    assert_eq!(v["cascade"]["routes"].as_array().unwrap().len(), 20);
}

#[test]
fn explore_and_scan_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let (code, err) = qp(&[
            "explore",
            "--out",
            out.to_str().unwrap(),
            "--blocks",
            "block.1,head",
            "--precisions",
            "4,8",
        ]);
        assert_eq!(code, exit::OK, "{err}");
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["pareto.json", "pareto.csv", "front.json", "selection.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let v = read_json(&a.join("pareto.json"));
    assert_eq!(v["points"].as_array().unwrap().len(), 5);

    let scan = dir.path().join("scan");
    let (code, err) = qp(&["scan", "--out", scan.to_str().unwrap(), "--precisions", "8"]);
    assert_eq!(code, exit::OK, "{err}");
    let s = read_json(&scan.join("sensitivity.json"));
    assert_eq!(s["profile"]["entries"].as_array().unwrap().len(), 16);
}

#[test]
fn make_fixture_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let (code, err) = qp(&["make-fixture", "--out", out.to_str().unwrap(), "--steps", "2", "--seed", "7"]);
        assert_eq!(code, exit::OK, "{err}");
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["corpus.txt", "target.ckpt", "draft.ckpt", "fixture.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let v = read_json(&a.join("fixture.json"));
    assert_eq!(v["seed"], 7);
}
