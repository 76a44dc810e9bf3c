use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const FIXTURE_RKL: [f64; 6] = [0.0, 0.5, 0.05 / 0.6, 0.02 / 0.6, 1.0, 0.02 / 0.6];
const FIXTURE_ENTROPY: [f64; 6] = [1.0, 0.4, 0.5, 0.7, 0.2, 0.5];

const SMALL_RUN: &str = "\
group_size = 4
groups_per_batch = 2
total_steps = 6
eval_interval = 3
num_eval_instances = 20
seeds = [0, 1]
";

fn gear(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gear"))
        .args(args)
        .env_remove("GEAR_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn traj_lines(group: &str, member: usize, reward: f64, rkl: &[f64], entropy: &[f64], tokens: &[u32]) -> String {
    let mut out = format!(
        "{{\"kind\":\"traj\",\"prompt_id\":\"p-{group}\",\"group_id\":\"{group}\",\"member_index\":{member},\"reward\":{reward}}}\n"
    );
    for (i, ((r, h), t)) in rkl.iter().zip(entropy).zip(tokens).enumerate() {
        out += &format!(
            "{{\"kind\":\"tok\",\"position\":{i},\"token_id\":{t},\"is_policy_token\":true,\"behavior_logp\":-1.0,\"teacher_logp\":{},\"entropy\":{h},\"text\":\"t{t}\"}}\n",
            -1.0 - r
        );
    }
    out
}

fn fixture(dir: &TempDir) -> PathBuf {
    let tokens = [1, 2, 3, 2, 5, 2];
    let text = traj_lines("g0", 0, 1.0, &FIXTURE_RKL, &FIXTURE_ENTROPY, &tokens)
        + &traj_lines("g0", 1, 0.0, &FIXTURE_RKL, &FIXTURE_ENTROPY, &tokens);
    let path = dir.path().join("fixture.jsonl");
    std::fs::write(&path, text).unwrap();
    path
}

fn tokens_of(path: &Path) -> Vec<Vec<Value>> {
    let mut trajs: Vec<Vec<Value>> = Vec::new();
    for line in std::fs::read_to_string(path).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        if v["kind"] == "traj" {
            trajs.push(Vec::new());
        } else {
            trajs.last_mut().unwrap().push(v);
        }
    }
    trajs
}

#[test]
fn reweight_worked_example() {
    let dir = TempDir::new().unwrap();
    let trace = fixture(&dir);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let stdout = ok(gear(&["reweight", "--trace", s(&trace), "--out", s(&a)]));
    assert!(stdout.contains("4 segments"), "{stdout}");
    ok(gear(&["reweight", "--trace", s(&trace), "--out", s(&b)]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let trajs = tokens_of(&a);
    let ids: Vec<Value> = trajs[0].iter().map(|t| t["segment_id"].clone()).collect();
    assert_eq!(ids, serde_json::from_str::<Vec<Value>>("[null,0,0,0,1,1]").unwrap());
    let w: Vec<f64> = trajs[0].iter().map(|t| t["w_kl"].as_f64().unwrap()).collect();
    assert_eq!(w, vec![0.0, 0.5, 0.5, 0.5, 1.0, 1.0]);
    // positive advantage, so high-divergence segments get the smaller weight
    let adv: Vec<f64> = trajs[0].iter().map(|t| t["adv"].as_f64().unwrap()).collect();
    assert!(adv[4] < adv[1] && adv[1] < adv[0]);
    let neg: Vec<f64> = trajs[1].iter().map(|t| t["adv"].as_f64().unwrap()).collect();
    assert!(neg[4] < neg[1] && neg[1] < neg[0] && neg[0] < 0.0);
}

#[test]
fn zero_alpha_gives_flat_scaled_advantage() {
    let dir = TempDir::new().unwrap();
    let trace = fixture(&dir);
    let out = dir.path().join("flat.jsonl");
    ok(gear(&["reweight", "--trace", s(&trace), "--out", s(&out), "--alpha", "0", "--offset", "1.5"]));
    let text = std::fs::read_to_string(&out).unwrap();
    let headers: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["kind"] == "traj")
        .collect();
    for (traj, header) in tokens_of(&out).iter().zip(&headers) {
        let a = header["advantage"].as_f64().unwrap();
        for t in traj {
            assert_eq!(t["adv"].as_f64().unwrap(), 1.5 * a);
        }
    }
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let trace = fixture(&dir);
    let out = dir.path().join("o.jsonl");

    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "lambda_kll = 0.2\n").unwrap();
    let r = gear(&["reweight", "--trace", s(&trace), "--out", s(&out), "--config", s(&bad_cfg)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("lambda_kll"));

    let r = gear(&["reweight", "--trace", s(&trace), "--out", s(&out), "--variant", "bogus"]);
    assert_eq!(r.status.code(), Some(1));

    let r = gear(&["reweight", "--trace", s(&trace), "--out", s(&out), "--lambda-kl", "1.5"]);
    assert_eq!(r.status.code(), Some(1));

    let broken = dir.path().join("broken.jsonl");
    let mut text = std::fs::read_to_string(&trace).unwrap();
    text.push_str("{\"kind\":\"tok\",\"position\":9}\n");
    std::fs::write(&broken, text).unwrap();
    let r = gear(&["reweight", "--trace", s(&broken), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("broken.jsonl:15:"), "{}", String::from_utf8_lossy(&r.stderr));

    let r = gear(&["reweight", "--trace", s(&dir.path().join("missing.jsonl")), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));

    assert_eq!(gear(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn analyze_tokens_tables() {
    let dir = TempDir::new().unwrap();
    let trace = fixture(&dir);
    // > 0.1 keeps positions 1 and 4 of both members: tokens 2 and 5
    let table = ok(gear(&["analyze-tokens", "--trace", s(&trace), "--threshold", "0.1"]));
    assert_eq!(table, "token_id,text,count\n2,\"t2\",2\n5,\"t5\",2\n");
    let top1 = ok(gear(&["analyze-tokens", "--trace", s(&trace), "--threshold", "0.1", "--top", "1"]));
    assert_eq!(top1, "token_id,text,count\n2,\"t2\",2\n");
    let all = ok(gear(&["analyze-tokens", "--trace", s(&trace), "--threshold=-1", "--top", "100"]));
    assert_eq!(all.lines().count(), 1 + 4);
    let empty = ok(gear(&["analyze-tokens", "--trace", s(&trace), "--threshold", "1.0"]));
    assert_eq!(empty, "token_id,text,count\n");
    let file = dir.path().join("tokens.csv");
    ok(gear(&["analyze-tokens", "--trace", s(&trace), "--threshold", "0.1", "--out", s(&file)]));
    assert_eq!(std::fs::read_to_string(file).unwrap(), table);
}

fn small_config(dir: &TempDir, extra: &str) -> PathBuf {
    let path = dir.path().join("run.toml");
    std::fs::write(&path, format!("{SMALL_RUN}{extra}")).unwrap();
    path
}

#[test]
fn train_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir, "trace_file = \"last.jsonl\"\n");
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for run in &runs {
        let stdout = ok(gear(&["train", "--config", s(&cfg), "--out", s(run)]));
        assert!(stdout.contains("final eval success"));
    }
    for file in ["metrics.csv", "params.json", "last.jsonl"] {
        let a = std::fs::read(runs[0].join(file)).unwrap();
        assert_eq!(a, std::fs::read(runs[1].join(file)).unwrap(), "{file}");
    }
    let metrics = std::fs::read_to_string(runs[0].join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 6);

    let other = dir.path().join("c");
    ok(gear(&["train", "--config", s(&cfg), "--out", s(&other), "--seed", "7"]));
    assert_ne!(std::fs::read(other.join("params.json")).unwrap(), std::fs::read(runs[0].join("params.json")).unwrap());
}

#[test]
fn output_dir_from_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir, "");
    let target = dir.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_gear"))
        .args(["train", "--config", s(&cfg)])
        .env("GEAR_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    ok(out);
    assert!(target.join("metrics.csv").exists());
}

fn rows(table: &str) -> Vec<Vec<String>> {
    table
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn sweeps_report_one_row_per_value() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir, "");
    let out = dir.path().join("sweep");
    let table = ok(gear(&["sweep", "--config", s(&cfg), "--param", "lambda_kl", "--values", "0.1,0.2,0.3", "--out", s(&out)]));
    assert_eq!(rows(&table).len(), 3);
    assert_eq!(std::fs::read_to_string(out.join("sweep_lambda_kl.csv")).unwrap(), table);

    let table = ok(gear(&["sweep", "--config", s(&cfg), "--param", "alpha", "--values", "0.2,0.6", "--out", s(&out)]));
    for (row, alpha) in rows(&table).iter().zip([0.2, 0.6]) {
        assert_eq!(row[1].parse::<f64>().unwrap(), 1.0 - 0.5 * alpha);
        assert_eq!(row[4], "2");
    }

    let r = gear(&["sweep", "--config", s(&cfg), "--param", "window_size", "--values", "2", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("sweepable keys"));
}

#[test]
fn ablation_table() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir, "");
    let out = dir.path().join("ablate");
    let table = ok(gear(&["ablate", "--config", s(&cfg), "--out", s(&out)]));
    let labels: Vec<String> = rows(&table).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(labels, ["gear", "token_only", "kl_only", "entropy_only", "marker", "entropy_window", "grpo"]);
    assert!(out.join("ablation.csv").exists());
}
