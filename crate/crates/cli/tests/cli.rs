use std::io::Write;
use std::net::TcpListener;
use std::process::{Command, Output, Stdio};

use echo_embed::backend::provider::{serve_tcp, ToyProvider};
use echo_embed::templating::{align_spans, render};
use echo_embed::{Backend, SegmentLabel, Strategy, Template, ToyModel, ToyModelConfig};
use serde_json::Value;

fn run(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_echo-embed"))
        .args(args)
        .env_remove("ECHO_EMBED_PROVIDER")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    if let Err(e) = child.stdin.take().unwrap().write_all(stdin.as_bytes()) {
        assert_eq!(e.kind(), std::io::ErrorKind::BrokenPipe, "{e}");
    }
    child.wait_with_output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn rows(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn embed_is_deterministic() {
    let input = "the quick brown fox\nthe quick brown fox\n";
    let a = stdout(&run(&["embed", "--model-seed", "7"], input));
    let b = stdout(&run(&["embed", "--model-seed", "7"], input));
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], lines[1]);
    let c = stdout(&run(&["embed", "--model-seed", "8"], input));
    assert_ne!(a, c);
}

#[test]
fn echo_mean_pools_second_occurrence() {
    let text = "a small dog barks at the moon";
    let row = &rows(&stdout(&run(&["embed", "--strategy", "echo", "--pooling", "mean"], text)))[0];
    let model = ToyModel::<f32>::init(ToyModelConfig::default()).unwrap();
    let rendered = render(&Template::default_for(Strategy::Echo), text).unwrap();
    let (tokens, _) = model.encode(rendered.text()).unwrap();
    let spans = align_spans(&rendered, &tokens.offsets).unwrap();
    let second = spans.indices(SegmentLabel::SecondOccurrence).len();
    assert!(second > 0);
    assert_eq!(row["pooled_tokens"], second);
    assert_eq!(row["strategy"], "echo");
    assert_eq!(row["dim"], 32);
    assert_eq!(row["embedding"].as_array().unwrap().len(), 32);
}

#[test]
fn last_and_summarization_pool_one_token() {
    for (strategy, pooling) in [("classical", "last"), ("summarization", "mean"), ("echo", "final-token")] {
        let row = &rows(&stdout(&run(&["embed", "--strategy", strategy, "--pooling", pooling], "one two three")))[0];
        assert_eq!(row["pooled_tokens"], 1, "{strategy} {pooling}");
    }
}

#[test]
fn bad_provider_address_is_a_runtime_error() {
    let out = run(&["embed", "--backend", "provider", "--provider-addr", "127.0.0.1:1", "--timeout-secs", "2"], "hi there");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("protocol error"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["embed", "--strategy", "nonsense"], "").status.code(), Some(1));
    assert_eq!(run(&["frobnicate"], "").status.code(), Some(1));
    assert_eq!(run(&["train"], "").status.code(), Some(1));
    assert_eq!(run(&["--help"], "").status.code(), Some(0));
}

#[test]
fn provider_backend_matches_toy_backend() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let model = ToyModel::<f32>::init(ToyModelConfig::default().with_seed(5)).unwrap();
    serve_tcp(listener, move || ToyProvider::new(model.clone()));
    let input = "first line here\nand a second one\n";
    let toy = stdout(&run(&["embed", "--model-seed", "5"], input));
    let remote = stdout(&run(&["embed", "--backend", "provider", "--provider-addr", &addr], input));
    assert_eq!(toy, remote);
    let checks = stdout(&run(&["conformance", "--provider-addr", &addr], ""));
    assert!(checks.lines().all(|l| l.starts_with("PASS")), "{checks}");
}

#[test]
fn sample_prompts_is_seeded() {
    let a = stdout(&run(&["sample-prompts", "--strategy", "echo", "--count", "5", "--seed", "11"], ""));
    let b = stdout(&run(&["sample-prompts", "--strategy", "echo", "--count", "5", "--seed", "11"], ""));
    let c = stdout(&run(&["sample-prompts", "--strategy", "echo", "--count", "5", "--seed", "12"], ""));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let rows = rows(&a);
    assert_eq!(rows.len(), 5);
    for r in rows {
        assert_eq!(r["pattern"].as_str().unwrap().matches("{S}").count(), 2);
    }
}

#[test]
fn template_file_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.toml");
    std::fs::write(&path, "pattern = \"Say it: {S} Again: {S}\"\n").unwrap();
    let p = path.to_str().unwrap();
    let custom = stdout(&run(&["embed", "--template-file", p], "red apples fall"));
    let default = stdout(&run(&["embed"], "red apples fall"));
    assert_ne!(custom, default);
    std::fs::write(&path, "pattern = \"only once: {S}\"\n").unwrap();
    assert_eq!(run(&["embed", "--template-file", p], "red apples fall").status.code(), Some(2));
}

#[test]
fn bench_writes_grid_and_margins() {
    let dir = tempfile::tempdir().unwrap();
    let margins = dir.path().join("m.csv");
    let out = stdout(&run(
        &["bench", "--poolings", "mean,last,final-token", "--noise-seed", "3", "--margins", margins.to_str().unwrap()],
        "",
    ));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "structure,strategy,pooling,accuracy,n");
    assert_eq!(lines.len(), 1 + 3 * 2 * 3);
    for l in &lines[1..] {
        let acc: f64 = l.split(',').nth(3).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    let m = std::fs::read_to_string(&margins).unwrap();
    assert!(m.starts_with("structure,strategy,pooling,index,sim_plus,sim_minus,margin\n"));
    assert!(m.lines().count() > 1);
}

#[test]
fn train_writes_checkpoint_and_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.bin");
    let log = dir.path().join("loss.csv");
    let args = [
        "train", "--synthetic", "16", "--steps", "3", "--batch-size", "4", "--d-model", "8", "--n-layers", "1", "--n-heads", "2",
        "--vocab-size", "128", "--grad-check", "--grad-check-samples", "2",
    ];
    let mut full: Vec<&str> = args.to_vec();
    full.extend(["--checkpoint-out", ckpt.to_str().unwrap(), "--loss-log", log.to_str().unwrap()]);
    let out = run(&full, "");
    let summary = &rows(&stdout(&out))[0];
    assert_eq!(summary["steps"], 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("grad-check passed"));
    let log = std::fs::read_to_string(&log).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss"));
    assert_eq!(log.lines().count(), 4);
    let row = &rows(&stdout(&run(&["embed", "--checkpoint", ckpt.to_str().unwrap()], "hello there")))[0];
    assert_eq!(row["dim"], 8);
}

#[test]
fn analyze_reports_subsets() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    let words = ["red", "cat", "runs", "under", "the", "old", "table", "fast", "blue", "sky"];
    let mut src = String::new();
    for i in 0..20usize {
        let x: Vec<&str> = (0..6).map(|j| words[(i * 3 + j * 7) % words.len()]).collect();
        let y: Vec<&str> = (0..6).map(|j| words[(i * 5 + j * 3 + 1) % words.len()]).collect();
        src += &format!("{{\"x\":\"{}\",\"y\":\"{}\",\"score\":{}}}\n", x.join(" "), y.join(" "), (i * 7 % 11) as f64 / 2.0);
    }
    std::fs::write(&pairs, src).unwrap();
    let csv = dir.path().join("hist.csv");
    let out = stdout(&run(
        &["analyze", "--pairs", pairs.to_str().unwrap(), "--fraction", "0.25", "--csv", csv.to_str().unwrap()],
        "",
    ));
    let r = &rows(&out)[0];
    assert_eq!(r["n"], 20);
    assert_eq!(r["first_half"]["count"], 5);
    assert_eq!(r["second_half"]["count"], 5);
    let hist = std::fs::read_to_string(&csv).unwrap();
    assert!(hist.starts_with("subset,err_bin,count\n"));
    assert!(hist.contains("first_half,mean,") && hist.contains("second_half,mean,"));
    let bad = run(&["analyze", "--pairs", pairs.to_str().unwrap(), "--fraction", "0"], "");
    assert_eq!(bad.status.code(), Some(2));
}
