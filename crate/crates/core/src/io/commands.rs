//! Implementations of the command-line verbs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::engine::{mean_stderr, train, TrainOutcome};
use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::io::metrics::write_metrics;
use crate::io::trace::{parse_trace, write_trace};
use crate::reweighting::gear_credit;
use crate::signals::{minmax_normalize, reverse_kl_sequence};
use crate::trajectory::{policy_token_view, CreditVector, TrajectoryGroup, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct ReweightReport {
    pub groups: usize,
    pub trajectories: usize,
    pub policy_tokens: usize,
    pub segments: usize,
}

/// Reads a trace, computes credit for every group and writes the augmented trace.
pub fn cmd_reweight(trace: &Path, cfg: &RunConfig, out: &Path) -> Result<ReweightReport> {
    let gear = cfg.gear();
    gear.validate()?;
    let groups = parse_trace(trace)?;
    let credit: Vec<Vec<CreditVector>> = groups
        .par_iter()
        .map(|g| gear_credit(g, &gear))
        .collect::<Result<_>>()?;
    write_trace(out, &groups, Some(&credit))?;
    let all = credit.iter().flatten();
    Ok(ReweightReport {
        groups: groups.len(),
        trajectories: groups.iter().map(|g| g.members.len()).sum(),
        policy_tokens: all.clone().map(CreditVector::len).sum(),
        segments: all.map(|c| c.segments.len()).sum(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub metrics_path: PathBuf,
    pub params_path: PathBuf,
    pub trace_path: Option<PathBuf>,
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

/// Trains with `cfg.seed`, writing metrics, final parameters and optionally the
/// reweighted last batch.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let outcome = train(&cfg.train_config(cfg.seed)?)?;
    let metrics_path = cfg.resolve(&cfg.metrics_file);
    create_parent(&metrics_path)?;
    write_metrics(&metrics_path, &outcome.metrics)?;

    let params_path = cfg.resolve(&cfg.params_file);
    create_parent(&params_path)?;
    let json = serde_json::to_string_pretty(&outcome.params).expect("parameters serialize");
    std::fs::write(&params_path, json + "\n").map_err(|e| Error::io(&params_path, e))?;

    let trace_path = match &cfg.trace_file {
        Some(file) => {
            let path = cfg.resolve(file);
            create_parent(&path)?;
            let groups: Vec<TrajectoryGroup> =
                outcome.last_batch.iter().map(|rg| rg.group.clone()).collect();
            write_trace(&path, &groups, Some(&outcome.last_credit))?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainReport {
        outcome,
        metrics_path,
        params_path,
        trace_path,
    })
}

/// Final evaluation success of one run per seed, in seed order.
pub fn final_successes(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds
        .par_iter()
        .map(|&seed| train(&cfg.train_config(seed)?).map(|o| o.final_eval_success))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    /// Effective affine offset of the run.
    pub offset: f64,
    pub successes: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

impl SummaryRow {
    fn new(label: String, cfg: &RunConfig, successes: Vec<f64>) -> Self {
        let (mean, stderr) = mean_stderr(&successes);
        Self {
            label,
            offset: cfg.gear().modulation().affine_offset,
            successes,
            mean,
            stderr,
        }
    }
}

/// Label of the plain-GRPO baseline in ablation tables.
pub const GRPO_LABEL: &str = "grpo";

/// Configuration of every ablation row: the six variants, then plain GRPO.
pub fn ablation_configs(cfg: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut rows: Vec<(String, RunConfig)> = Variant::ALL
        .iter()
        .map(|&v| {
            (
                v.to_string(),
                RunConfig {
                    variant: v,
                    ..cfg.clone()
                },
            )
        })
        .collect();
    rows.push((
        GRPO_LABEL.to_string(),
        RunConfig {
            alpha: 0.0,
            offset: Some(1.0),
            ..cfg.clone()
        },
    ));
    rows
}

/// Final eval success of every ablation row over `cfg.seeds`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<SummaryRow>> {
    ablation_configs(cfg)
        .into_iter()
        .map(|(label, c)| {
            let successes = final_successes(&c, &cfg.seeds)?;
            Ok(SummaryRow::new(label, &c, successes))
        })
        .collect()
}

/// One row per value of `param`, each over `cfg.seeds`.
pub fn cmd_sweep(cfg: &RunConfig, param: &str, values: &[f64]) -> Result<Vec<SummaryRow>> {
    // reject unknown keys before any training
    cfg.clone().set_param(param, 0.0)?;
    values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.set_param(param, v)?;
            let successes = final_successes(&c, &cfg.seeds)?;
            Ok(SummaryRow::new(format!("{param}={v}"), &c, successes))
        })
        .collect()
}

/// `label,offset,mean_success,stderr,num_seeds` table.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("label,offset,mean_success,stderr,num_seeds\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.label,
            r.offset,
            r.mean,
            r.stderr,
            r.successes.len()
        )
        .expect("writing to a string");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCount {
    pub token_id: u32,
    /// First text seen for the token, if any.
    pub text: Option<String>,
    pub count: usize,
}

/// Counts policy tokens whose normalized reverse-KL exceeds `threshold`, most
/// frequent first with ties by ascending `token_id`.
pub fn analyze_tokens(
    groups: &[TrajectoryGroup],
    threshold: f64,
    top_n: usize,
) -> Result<Vec<TokenCount>> {
    let mut counts: BTreeMap<u32, (Option<String>, usize)> = BTreeMap::new();
    for traj in groups.iter().flat_map(|g| &g.members) {
        let view = policy_token_view(traj);
        if view.is_empty() {
            continue;
        }
        let raw = reverse_kl_sequence(&view.behavior_logp, &view.teacher_logp)?;
        let norm = minmax_normalize(&raw.values)?;
        for (&idx, &v) in view.indices.iter().zip(&norm.values) {
            if v > threshold {
                let rec = &traj.records[idx];
                let entry = counts.entry(rec.token_id).or_insert((None, 0));
                if entry.0.is_none() {
                    entry.0 = rec.text.clone();
                }
                entry.1 += 1;
            }
        }
    }
    let mut rows: Vec<TokenCount> = counts
        .into_iter()
        .map(|(token_id, (text, count))| TokenCount {
            token_id,
            text,
            count,
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.token_id.cmp(&b.token_id)));
    rows.truncate(top_n);
    Ok(rows)
}

pub fn cmd_analyze_tokens(trace: &Path, threshold: f64, top_n: usize) -> Result<Vec<TokenCount>> {
    analyze_tokens(&parse_trace(trace)?, threshold, top_n)
}

/// `token_id,text,count` table; text is quoted JSON.
pub fn token_counts_csv(rows: &[TokenCount]) -> String {
    let mut out = String::from("token_id,text,count\n");
    for r in rows {
        let text = r
            .text
            .as_ref()
            .map(|t| serde_json::to_string(t).expect("string serializes"))
            .unwrap_or_default();
        writeln!(out, "{},{},{}", r.token_id, text, r.count).expect("writing to a string");
    }
    out
}
