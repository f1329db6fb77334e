//! Exit-code contract of the command-line verbs, and agreement between each
//! verb's output and the library call it wraps.

mod common;

use std::fs;
use std::path::Path;

use serde_json::Value;
use vinfer::bitstats::{self, Tolerances};
use vinfer::clustering::{self, GameParams};
use vinfer::commitments::{self, HiddenState};
use vinfer::experiments::{self, Scenario};

use common::{run, scenario, stdout};

fn p(path: &Path) -> String {
    path.display().to_string()
}

fn small_honest(dir: &Path, trials: u64) -> std::path::PathBuf {
    let mut s = Scenario::load(&scenario("honest")).unwrap();
    s.trials = trials;
    let path = dir.join("honest.json");
    fs::write(&path, s.to_json()).unwrap();
    path
}

#[test]
fn montecarlo_summary_matches_library_report() {
    let tmp = tempfile::tempdir().unwrap();
    let path = small_honest(tmp.path(), 6);
    let out = tmp.path().join("out");
    let o = run(&["montecarlo", &p(&path), "--seed", "11", "--out", &p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));

    let mut s = Scenario::load(&path).unwrap();
    s.seed = 11;
    let report = experiments::run_scenario(&s).unwrap();
    assert_eq!(fs::read_to_string(out.join("honest.summary.json")).unwrap(), report.summary_json());
    assert_eq!(fs::read_to_string(out.join("honest.trials.csv")).unwrap(), report.trials_csv);
    assert_eq!(fs::read_to_string(out.join("honest.payoffs.csv")).unwrap(), report.payoffs_csv());
}

#[test]
fn bundled_committee_game_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["montecarlo", &p(&scenario("paper-appendix")), "--out", &p(tmp.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS paper-appendix honest_bound > 0.926000 (actual 0.926394)"), "{out}");
    assert!(out.contains("PASS paper-appendix dishonest_bound < 0.125000 (actual 0.124248)"), "{out}");
}

#[test]
fn montecarlo_schema_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = p(&tmp.path().join("out"));
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ \"name\": ").unwrap();
    assert_eq!(run(&["montecarlo", &p(&bad), "--out", &out]).status.code(), Some(2));

    let unknown = tmp.path().join("unknown.json");
    let text = fs::read_to_string(scenario("honest")).unwrap().replacen("\"seed\"", "\"sede\": 1, \"seed\"", 1);
    fs::write(&unknown, text).unwrap();
    assert_eq!(run(&["montecarlo", &p(&unknown), "--out", &out]).status.code(), Some(2));

    let o = run(&["montecarlo", &p(&scenario("honest")), "--trials", "0", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trials"));

    assert_eq!(run(&["montecarlo", "/nonexistent/scenario.json"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-verb"]).status.code(), Some(2));
}

#[test]
fn failed_assertion_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = Scenario::load(&scenario("honest")).unwrap();
    s.trials = 3;
    s.assertions[0].value = 1.5;
    let path = tmp.path().join("strict.json");
    fs::write(&path, s.to_json()).unwrap();
    let o = run(&["montecarlo", &p(&path), "--out", &p(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("FAIL honest inferencer_accept_rate"));
}

/// Structural equality with numbers compared to a few ulps; stdout is parsed
/// without round-trip float precision.
fn assert_json_close(got: &Value, want: &Value) {
    match (got, want) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0), "{a} != {b}");
        }
        (Value::Object(a), Value::Object(b)) => {
            assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
            for (k, v) in a {
                assert_json_close(v, &b[k]);
            }
        }
        _ => assert_eq!(got, want),
    }
}

fn compare_json(o: &std::process::Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn compare_verdicts_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    assert!(run(&["fixtures", "--out", &p(&fx), "--seed", "3"]).status.success());
    let a = fx.join("honest-a.trace");

    let o = run(&["compare", &p(&a), &p(&a)]);
    assert_eq!(o.status.code(), Some(0));
    let v = compare_json(&o);
    assert_eq!(v["stats"]["p_e"], 0.0);
    assert_eq!(v["accept"], true);

    let o = run(&["compare", &p(&a), &p(&fx.join("honest-b.trace"))]);
    assert_eq!(o.status.code(), Some(0));

    let o = run(&["compare", &p(&a), &p(&fx.join("quantized.trace")), "--preset", "off-chain"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(compare_json(&o)["accept"], false);

    // Same stats through the library.
    let ta = commitments::read_trace_file(&a).unwrap();
    let tq = commitments::read_trace_file(&fx.join("quantized.trace")).unwrap();
    let stats = bitstats::compare_traces(&ta, &tq, &Tolerances::OFF_CHAIN).unwrap();
    assert_json_close(&compare_json(&o)["stats"], &serde_json::to_value(stats).unwrap());

    let odd = tmp.path().join("odd.trace");
    let task = ta[0].task_id;
    commitments::write_trace_file(&odd, &[HiddenState::new(task, 1, 1, (2, 3), vec![0.5; 6]).unwrap()]).unwrap();
    assert_eq!(run(&["compare", &p(&a), &p(&odd)]).status.code(), Some(2));
    assert_eq!(run(&["compare", &p(&a), "/nonexistent.trace"]).status.code(), Some(2));
    assert_eq!(run(&["compare", &p(&a), &p(&a), "--preset", "sideways"]).status.code(), Some(2));
}

fn logged_task(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("task");
    let o = run(&["task", &p(&scenario("lazy")), "--out", &p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("contract.jsonl")
}

#[test]
fn replay_untouched_truncated_and_tampered_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let log = logged_task(tmp.path());
    let o = run(&["replay", &p(&log)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    let text = fs::read_to_string(&log).unwrap();
    let cut = tmp.path().join("cut.jsonl");
    fs::write(&cut, &text[..text.len() * 2 / 3]).unwrap();
    let o = run(&["replay", &p(&cut)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));

    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let (pos, mut entry) = lines
        .iter()
        .enumerate()
        .find_map(|(i, l)| {
            let v: Value = serde_json::from_str(l).ok()?;
            (v["call"]["call"] == "post_sampling_package").then_some((i, v))
        })
        .expect("log has a sampling package");
    let sibling = entry["call"]["package"]["proofs"][0]["path"][0]["sibling"].as_str().unwrap().to_string();
    let flipped = format!("{}{}", if sibling.starts_with('0') { '1' } else { '0' }, &sibling[1..]);
    entry["call"]["package"]["proofs"][0]["path"][0]["sibling"] = Value::String(flipped);
    let index = entry["index"].as_u64().unwrap();
    lines[pos] = entry.to_string();
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let o = run(&["replay", &p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with(&format!("diverged at entry {index}:")), "{}", stdout(&o));
}

#[test]
fn bounds_table_and_quorum_check() {
    let o = run(&["bounds", "--n", "6", "--q", "4", "--eps1", "0.01", "--eps2", "0.01", "--r", "0.8", "--json"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let params = GameParams::baseline();
    assert_json_close(&v["honest_lower_bound"], &clustering::honest_accept_lower_bound(&params).into());
    assert_json_close(&v["dishonest"], &serde_json::to_value(clustering::dishonest_accept_upper_bound(&params)).unwrap());

    for q in ["3", "2"] {
        let o = run(&["bounds", "--n", "6", "--q", q, "--eps1", "0.01", "--eps2", "0.01", "--r", "0.8"]);
        assert_eq!(o.status.code(), Some(2));
    }
    assert_eq!(run(&["bounds", "--n", "6"]).status.code(), Some(2));
    assert_eq!(run(&["bounds", "--n", "6", "--q", "4", "--eps1", "2", "--eps2", "0", "--r", "0.8"]).status.code(), Some(2));
}

#[test]
fn task_record_matches_library_trial() {
    let tmp = tempfile::tempdir().unwrap();
    let log = logged_task(tmp.path());
    let record: Value = serde_json::from_str(&fs::read_to_string(log.with_file_name("trial.json")).unwrap()).unwrap();
    let s = Scenario::load(&scenario("lazy")).unwrap();
    let lib = experiments::write_logged_trial(&s, 0, &tmp.path().join("lib")).unwrap();
    assert_eq!(record, serde_json::to_value(&lib).unwrap());
    assert_eq!(fs::read(&log).unwrap(), fs::read(tmp.path().join("lib/contract.jsonl")).unwrap());
}
