use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_perception"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn perception")
}

fn diagnostics(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter(|v| v.get("level").is_some() && v.get("code").is_some())
        .collect()
}

fn errors(out: &Output) -> Vec<serde_json::Value> {
    diagnostics(out).into_iter().filter(|d| d["level"] == "error").collect()
}

/// Exit status 0 exactly when no error diagnostic was written.
fn assert_status_matches(out: &Output) {
    assert_eq!(out.status.success(), errors(out).is_empty(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn attr(tag: &str, name: &str) -> f64 {
    let key = format!(" {name}=\"");
    let start = tag.find(&key).unwrap() + key.len();
    let end = start + tag[start..].find('"').unwrap();
    tag[start..end].parse().unwrap()
}

fn simulate_records(dir: &Path, participants: &str) -> std::path::PathBuf {
    let path = dir.join("records.jsonl");
    let out = run(&["simulate", "--seed", "7", "--participants", participants, "--out", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn bars_of_a_two_token_sentence_have_equal_widths() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("two.json");
    std::fs::write(&input, r#"{"id":"two","tokens":["a","extraordinarily"],"scores":[0.1,0.8]}"#).unwrap();
    let out = run(&["render", "--mode", "bars", "--input", input.to_str().unwrap()]);
    assert_status_matches(&out);
    assert!(out.status.success());
    let svg = String::from_utf8(out.stdout).unwrap();
    let bars: Vec<&str> = svg.lines().filter(|l| l.starts_with("<rect") && l.contains("data-token")).collect();
    assert_eq!(bars.len(), 2);
    assert_eq!(attr(bars[0], "width"), attr(bars[1], "width"));
    assert!(attr(bars[1], "height") > attr(bars[0], "height"));
}

#[test]
fn heatmap_writes_svg_and_html() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("doc.json");
    std::fs::write(&input, r#"{"id":"s","tokens":["one","two"],"scores":[0.5,0.25]}"#).unwrap();
    let svg = dir.path().join("out/map.svg");
    let html = dir.path().join("out/map.html");
    let out = run(&[
        "render", "--mode", "heatmap", "--input", input.to_str().unwrap(), "--out", svg.to_str().unwrap(), "--html",
        html.to_str().unwrap(),
    ]);
    assert_status_matches(&out);
    let svg = std::fs::read_to_string(svg).unwrap();
    assert!(svg.contains("rgb(255,127,127)") && svg.contains("rgb(255,191,191)"));
    assert!(std::fs::read_to_string(html).unwrap().contains("rgb(255,127,127)"));
}

#[test]
fn fit_with_the_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let records = simulate_records(dir.path(), "12");
    let mut models = Vec::new();
    for name in ["a.json", "b.json"] {
        let path = dir.path().join(name);
        let out = run(&["fit", "--seed", "7", "--input", records.to_str().unwrap(), "--out", path.to_str().unwrap()]);
        assert_status_matches(&out);
        assert!(out.status.success());
        models.push(std::fs::read(path).unwrap());
    }
    assert!(!models[0].is_empty());
    assert_eq!(models[0], models[1]);
}

#[test]
fn simulate_fit_correct_pipeline_runs_on_the_toy_corpus() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let mut sim = bin().args(["simulate", "--seed", "7"]).stdout(Stdio::piped()).spawn().unwrap();
    let mut fit = bin()
        .args(["fit", "--seed", "7"])
        .stdin(sim.stdout.take().unwrap())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let correct = bin()
        .args(["correct", "--seed", "7", "--report", report.to_str().unwrap()])
        .stdin(fit.stdout.take().unwrap())
        .output()
        .unwrap();
    assert!(sim.wait().unwrap().success());
    assert!(fit.wait().unwrap().success());
    assert_status_matches(&correct);
    assert!(correct.status.success(), "{}", String::from_utf8_lossy(&correct.stderr));
    let docs: Vec<serde_json::Value> = String::from_utf8(correct.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(docs.len(), 61);
    for d in &docs {
        for s in d["scores"].as_array().unwrap() {
            let s = s.as_f64().unwrap();
            assert!((0.0..=1.0).contains(&s));
        }
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(report["reports"].as_array().unwrap().len(), 61);
    assert!(start.elapsed() < Duration::from_secs(300));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["fit", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let errs = errors(&out);
    assert_eq!(errs.len(), 1);
    assert_eq!(errs[0]["code"], "usage");
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage:"));
}

#[test]
fn stochastic_commands_require_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    for args in [vec!["simulate"], vec!["serve", "--data-dir", dir.path().to_str().unwrap()]] {
        let out = run(&args);
        assert!(!out.status.success());
        let errs = errors(&out);
        assert_eq!(errs[0]["code"], "missing_seed", "{args:?}");
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    let mut f = std::fs::File::create(&cfg).unwrap();
    writeln!(f, "# study defaults\nseed = 3\nparticipants = 2").unwrap();
    let from_file = run(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert_status_matches(&from_file);
    let explicit = run(&["simulate", "--seed", "3", "--participants", "2"]);
    assert_eq!(from_file.stdout, explicit.stdout);

    let overridden = run(&["--config", cfg.to_str().unwrap(), "simulate", "--participants", "3"]);
    let n = |o: &Output| String::from_utf8_lossy(&o.stdout).lines().count();
    assert!(n(&overridden) > n(&from_file));

    std::fs::write(&cfg, "seed = 3\nbogus_key = 1\n").unwrap();
    let bad = run(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert!(!bad.status.success());
    assert_status_matches(&bad);
}

#[test]
fn partial_effects_writes_curves_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let records = simulate_records(dir.path(), "6");
    let model = dir.path().join("model.json");
    let out = run(&[
        "fit", "--input", records.to_str().unwrap(), "--lambda", "1", "--no-random-effects", "--out",
        model.to_str().unwrap(),
    ]);
    assert_status_matches(&out);
    let pe = dir.path().join("pe");
    let out = run(&["partial-effects", "--model", model.to_str().unwrap(), "--out-dir", pe.to_str().unwrap()]);
    assert_status_matches(&out);
    let csv = std::fs::read_to_string(pe.join("s_saliency.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,estimate,se,lower,upper"));
    assert_eq!(csv.lines().count(), 51);
    assert!(std::fs::read_to_string(pe.join("s_saliency.svg")).unwrap().starts_with("<"));
    assert!(pe.join("edf.csv").exists());
}

#[test]
fn bias_and_render_of_a_bias_strip() {
    let dir = tempfile::tempdir().unwrap();
    let records = simulate_records(dir.path(), "6");
    let model = dir.path().join("model.json");
    let fit = run(&["fit", "--input", records.to_str().unwrap(), "--lambda", "1", "--out", model.to_str().unwrap()]);
    assert_status_matches(&fit);
    let bias = dir.path().join("bias.json");
    let out = run(&[
        "bias", "--model", model.to_str().unwrap(), "--seed", "5", "--samples", "101", "--sentences", "3", "--out",
        bias.to_str().unwrap(),
    ]);
    assert_status_matches(&out);
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&bias).unwrap()).unwrap();
    let sentences = value["sentences"].as_array().unwrap();
    assert_eq!(sentences.len(), 3);
    for t in sentences[0]["tokens"].as_array().unwrap() {
        let (p, p_ref, b) = (t["p"].as_f64().unwrap(), t["p_ref"].as_f64().unwrap(), t["b"].as_f64().unwrap());
        assert_eq!(b, p - p_ref);
    }
    let id = sentences[1]["sentence_id"].as_str().unwrap();
    let out = run(&["render", "--mode", "bias", "--report", bias.to_str().unwrap(), "--sentence-id", id]);
    assert_status_matches(&out);
    assert!(String::from_utf8(out.stdout).unwrap().contains(&format!("data-sentence=\"{id}\"")));

    let ambiguous = run(&["render", "--mode", "bias", "--report", bias.to_str().unwrap()]);
    assert_eq!(errors(&ambiguous)[0]["code"], "usage");
}

#[test]
fn export_of_an_unknown_study_fails_with_a_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["export", "--data-dir", dir.path().to_str().unwrap(), "--study-id", "nope"]);
    assert!(!out.status.success());
    assert_eq!(errors(&out)[0]["code"], "unknown_study");
}

#[test]
fn help_exits_cleanly() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    assert!(errors(&out).is_empty());
    for sub in ["simulate", "fit", "partial-effects", "bias", "correct", "render", "serve", "export"] {
        assert!(String::from_utf8_lossy(&out.stdout).contains(sub), "{sub}");
    }
}
