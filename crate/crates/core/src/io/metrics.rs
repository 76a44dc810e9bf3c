//! Per-step metrics as CSV.

use std::path::Path;

use crate::engine::StepMetrics;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,mean_reward,mean_entropy,mean_abs_adv,segment_fraction,clipped_fraction,loss,kl,eval_success";

/// Header plus one row per step; `eval_success` is empty on non-evaluation steps.
pub fn metrics_to_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::with_capacity(64 * (metrics.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let eval = m.eval_success.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            m.step,
            m.mean_reward,
            m.mean_entropy,
            m.mean_abs_adv,
            m.segment_fraction,
            m.clipped_fraction,
            m.loss,
            m.kl,
            eval
        ));
    }
    out
}

pub fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    std::fs::write(path, metrics_to_csv(metrics)).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics(text: &str) -> Result<Vec<StepMetrics>> {
    let bad = |line: usize, message: String| Error::Parse {
        path: "<metrics>".into(),
        line,
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(METRICS_HEADER) => {}
        other => return Err(bad(1, format!("unexpected header {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let n = i + 2;
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 9 {
                return Err(bad(n, format!("expected 9 columns, found {}", cols.len())));
            }
            let num = |j: usize| {
                cols[j]
                    .parse::<f64>()
                    .map_err(|e| bad(n, format!("column {j}: {e}")))
            };
            Ok(StepMetrics {
                step: cols[0]
                    .parse()
                    .map_err(|e| bad(n, format!("column 0: {e}")))?,
                mean_reward: num(1)?,
                mean_entropy: num(2)?,
                mean_abs_adv: num(3)?,
                segment_fraction: num(4)?,
                clipped_fraction: num(5)?,
                loss: num(6)?,
                kl: num(7)?,
                eval_success: if cols[8].is_empty() { None } else { Some(num(8)?) },
            })
        })
        .collect()
}
