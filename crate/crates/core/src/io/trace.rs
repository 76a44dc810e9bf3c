//! Line-delimited JSON trace files.
//!
//! Each trajectory is a header line `{"kind":"traj",...}` followed by one
//! `{"kind":"tok",...}` line per record. Trajectories of a group are contiguous and
//! share `group_id`. Reweighted traces carry the credit fields as extra keys.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::trajectory::{CreditVector, TokenRecord, Trajectory, TrajectoryGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeaderLine {
    pub kind: String,
    pub prompt_id: String,
    pub group_id: String,
    pub member_index: usize,
    pub reward: f64,
    #[serde(default = "default_terminated")]
    pub terminated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
}

fn default_terminated() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenLine {
    pub kind: String,
    pub position: usize,
    pub token_id: u32,
    pub is_policy_token: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_logp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_logp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_rkl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_signed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_final: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv: Option<f64>,
    /// Segment index of a policy token; `null` outside every segment.
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "present_nullable"
    )]
    pub segment_id: Option<Option<usize>>,
}

/// Keeps an explicit `null` distinct from an absent key.
fn present_nullable<'de, D>(d: D) -> std::result::Result<Option<Option<usize>>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    Option::<usize>::deserialize(d).map(Some)
}

impl TokenLine {
    fn from_record(rec: &TokenRecord) -> Self {
        Self {
            kind: "tok".into(),
            position: rec.position,
            token_id: rec.token_id,
            is_policy_token: rec.is_policy_token,
            behavior_logp: rec.behavior_logp,
            teacher_logp: rec.teacher_logp,
            entropy: rec.entropy,
            text: rec.text.clone(),
            norm_rkl: None,
            w_kl: None,
            w_signed: None,
            w_final: None,
            adv: None,
            segment_id: None,
        }
    }

    fn to_record(&self) -> TokenRecord {
        TokenRecord {
            position: self.position,
            token_id: self.token_id,
            is_policy_token: self.is_policy_token,
            behavior_logp: self.behavior_logp,
            teacher_logp: self.teacher_logp,
            entropy: self.entropy,
            text: self.text.clone(),
        }
    }
}

/// One parsed line.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceLine {
    Header(HeaderLine),
    Token(TokenLine),
}

fn trajectory_lines(
    traj: &Trajectory,
    group_id: &str,
    member_index: usize,
    credit: Option<&CreditVector>,
) -> Vec<TraceLine> {
    let mut lines = Vec::with_capacity(traj.records.len() + 1);
    lines.push(TraceLine::Header(HeaderLine {
        kind: "traj".into(),
        prompt_id: traj.prompt_id.clone(),
        group_id: group_id.to_string(),
        member_index,
        reward: traj.reward,
        terminated: traj.terminated,
        advantage: credit.map(|c| c.advantage),
    }));
    let segment_ids = credit.map(CreditVector::segment_ids);
    let mut t = 0;
    for rec in &traj.records {
        let mut line = TokenLine::from_record(rec);
        if let (Some(c), Some(ids)) = (credit, &segment_ids) {
            if rec.is_policy_token {
                line.norm_rkl = Some(c.norm_rkl[t]);
                line.w_kl = Some(c.w_kl[t]);
                line.w_signed = Some(c.w_signed[t]);
                line.w_final = Some(c.w_final[t]);
                line.adv = Some(c.adv[t]);
                line.segment_id = Some(ids[t]);
                t += 1;
            }
        }
        lines.push(TraceLine::Token(line));
    }
    lines
}

fn write_lines<W: Write>(out: &mut W, lines: &[TraceLine]) -> std::io::Result<()> {
    for line in lines {
        match line {
            TraceLine::Header(h) => serde_json::to_writer(&mut *out, h)?,
            TraceLine::Token(t) => serde_json::to_writer(&mut *out, t)?,
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Serializes groups, optionally with per-token credit aligned to `groups`.
pub fn trace_to_writer<W: Write>(
    out: &mut W,
    groups: &[TrajectoryGroup],
    credit: Option<&[Vec<CreditVector>]>,
) -> Result<()> {
    for (g, group) in groups.iter().enumerate() {
        let group_credit = credit.map(|c| &c[g]);
        if let Some(c) = group_credit {
            if c.len() != group.members.len() {
                return Err(Error::LengthMismatch {
                    context: "credit members",
                    expected: group.members.len(),
                    found: c.len(),
                });
            }
        }
        for (k, traj) in group.members.iter().enumerate() {
            let cv = group_credit.map(|c| &c[k]);
            if let Some(cv) = cv {
                if cv.len() != traj.num_policy_tokens() {
                    return Err(Error::LengthMismatch {
                        context: "credit tokens",
                        expected: traj.num_policy_tokens(),
                        found: cv.len(),
                    });
                }
            }
            write_lines(out, &trajectory_lines(traj, &group.group_id, k, cv))
                .map_err(|e| Error::io("<trace>", e))?;
        }
    }
    Ok(())
}

pub fn write_trace(
    path: &Path,
    groups: &[TrajectoryGroup],
    credit: Option<&[Vec<CreditVector>]>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    trace_to_writer(&mut out, groups, credit).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn parse_line(text: &str) -> std::result::Result<TraceLine, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
    let kind = value
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| "record lacks a string `kind`".to_string())?;
    match kind {
        "traj" => serde_json::from_value(value)
            .map(TraceLine::Header)
            .map_err(|e| format!("bad trajectory header: {e}")),
        "tok" => serde_json::from_value(value)
            .map(TraceLine::Token)
            .map_err(|e| format!("bad token record: {e}")),
        other => Err(format!("unknown record kind `{other}`")),
    }
}

/// Parses every non-blank line, keeping the 1-based line number.
pub fn read_trace_lines(path: &Path) -> Result<Vec<(usize, TraceLine)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let text = line.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed = parse_line(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        lines.push((i + 1, parsed));
    }
    Ok(lines)
}

struct Pending {
    line: usize,
    header: HeaderLine,
    records: Vec<TokenRecord>,
}

/// Reads and validates a trace file into groups.
pub fn parse_trace(path: &Path) -> Result<Vec<TrajectoryGroup>> {
    let lines = read_trace_lines(path)?;
    let fail = |line: usize, err: Error| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: err.to_string(),
    };

    let mut trajectories: Vec<Pending> = Vec::new();
    for (n, line) in lines {
        match line {
            TraceLine::Header(header) => trajectories.push(Pending {
                line: n,
                header,
                records: Vec::new(),
            }),
            TraceLine::Token(tok) => {
                let current = trajectories.last_mut().ok_or_else(|| {
                    fail(
                        n,
                        Error::invariant("header_before_tokens", "token record before any header"),
                    )
                })?;
                let rec = tok.to_record();
                if rec.position != current.records.len() {
                    return Err(fail(
                        n,
                        Error::invariant(
                            "consecutive_positions",
                            format!(
                                "position {} where {} was expected",
                                rec.position,
                                current.records.len()
                            ),
                        ),
                    ));
                }
                rec.validate().map_err(|e| fail(n, e))?;
                current.records.push(rec);
            }
        }
    }

    let mut groups: Vec<TrajectoryGroup> = Vec::new();
    let mut seen = HashSet::new();
    let mut open: Option<(String, usize, Vec<Trajectory>)> = None;
    let close = |open: &mut Option<(String, usize, Vec<Trajectory>)>,
                     groups: &mut Vec<TrajectoryGroup>|
     -> Result<()> {
        if let Some((id, line, members)) = open.take() {
            groups.push(TrajectoryGroup::new(id, members).map_err(|e| fail(line, e))?);
        }
        Ok(())
    };
    for p in trajectories {
        let h = p.header;
        if !h.reward.is_finite() {
            return Err(fail(
                p.line,
                Error::invariant("finite_reward", format!("reward {}", h.reward)),
            ));
        }
        let continues = matches!(&open, Some((id, _, _)) if *id == h.group_id);
        if !continues {
            close(&mut open, &mut groups)?;
            if !seen.insert(h.group_id.clone()) {
                return Err(fail(
                    p.line,
                    Error::invariant(
                        "groups_contiguous",
                        format!("group {} resumes after another group", h.group_id),
                    ),
                ));
            }
            open = Some((h.group_id.clone(), p.line, Vec::new()));
        }
        let (_, _, members) = open.as_mut().expect("group opened above");
        if h.member_index != members.len() {
            return Err(fail(
                p.line,
                Error::invariant(
                    "member_index_consecutive",
                    format!(
                        "member_index {} where {} was expected",
                        h.member_index,
                        members.len()
                    ),
                ),
            ));
        }
        members.push(Trajectory {
            records: p.records,
            prompt_id: h.prompt_id,
            reward: h.reward,
            terminated: h.terminated,
        });
    }
    close(&mut open, &mut groups)?;
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_group(id: &str) -> TrajectoryGroup {
        let a = Trajectory {
            records: vec![
                TokenRecord::policy(0, 0, -0.25, -1.5, 0.75).with_text("<call>"),
                TokenRecord::observation(1, 6),
                TokenRecord::policy(2, 6, -0.1, -0.1, 1.0 / 3.0),
            ],
            prompt_id: "p7".into(),
            reward: 1.0,
            terminated: true,
        };
        let b = Trajectory {
            records: vec![TokenRecord::policy(0, 1, -2.0, -0.3, 2.5)],
            prompt_id: "p7".into(),
            reward: 0.0,
            terminated: false,
        };
        TrajectoryGroup::new(id, vec![a, b]).unwrap()
    }

    fn write_raw(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn round_trip() {
        let groups = vec![sample_group("g0"), sample_group("g1")];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_trace(f.path(), &groups, None).unwrap();
        assert_eq!(parse_trace(f.path()).unwrap(), groups);
    }

    #[test]
    fn teacher_logp_on_observation_rejected() {
        let f = write_raw(&[
            r#"{"kind":"traj","prompt_id":"p","group_id":"g","member_index":0,"reward":1.0}"#,
            r#"{"kind":"tok","position":0,"token_id":3,"is_policy_token":false,"teacher_logp":-0.5}"#,
        ]);
        let err = parse_trace(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{msg}");
        assert!(msg.contains("observation_fields_absent"), "{msg}");
    }

    #[test]
    fn malformed_lines_named() {
        let cases: [(&[&str], usize, &str); 5] = [
            (&["{not json"], 1, "invalid JSON"),
            (&[r#"{"kind":"xyz"}"#], 1, "unknown record kind"),
            (
                &[r#"{"kind":"tok","position":0,"token_id":3,"is_policy_token":false}"#],
                1,
                "header_before_tokens",
            ),
            (
                &[
                    r#"{"kind":"traj","prompt_id":"p","group_id":"g","member_index":0,"reward":1.0,"bogus":2}"#,
                ],
                1,
                "unknown field",
            ),
            (
                &[
                    r#"{"kind":"traj","prompt_id":"p","group_id":"g","member_index":0,"reward":1.0}"#,
                    r#"{"kind":"tok","position":1,"token_id":3,"is_policy_token":false}"#,
                ],
                2,
                "consecutive_positions",
            ),
        ];
        for (lines, line, needle) in cases {
            let f = write_raw(lines);
            match parse_trace(f.path()).unwrap_err() {
                Error::Parse { line: l, message, .. } => {
                    assert_eq!(l, line, "{message}");
                    assert!(message.contains(needle), "{message}");
                }
                other => panic!("unexpected error {other}"),
            }
        }
    }

    #[test]
    fn non_contiguous_group_rejected() {
        let h = |g: &str, k: usize| {
            format!(r#"{{"kind":"traj","prompt_id":"p","group_id":"{g}","member_index":{k},"reward":1.0}}"#)
        };
        let lines = [h("a", 0), h("b", 0), h("a", 1)];
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let msg = parse_trace(write_raw(&refs).path()).unwrap_err().to_string();
        assert!(msg.contains(":3:") && msg.contains("groups_contiguous"), "{msg}");
    }

    #[test]
    fn reweighted_lines_round_trip() {
        let line = r#"{"kind":"tok","position":0,"token_id":1,"is_policy_token":true,"behavior_logp":-0.5,"teacher_logp":-0.25,"entropy":1.0,"norm_rkl":0.0,"w_kl":0.0,"w_signed":1.0,"w_final":1.1,"adv":0.55,"segment_id":null}"#;
        let TraceLine::Token(tok) = parse_line(line).unwrap() else {
            panic!("token line expected");
        };
        assert_eq!(tok.segment_id, Some(None));
        assert_eq!(serde_json::to_string(&tok).unwrap(), line);
    }

    #[test]
    fn mixed_group_sizes_allowed() {
        let mut small = sample_group("s");
        small.members.truncate(1);
        let groups = vec![sample_group("g"), small];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_trace(f.path(), &groups, None).unwrap();
        let parsed = parse_trace(f.path()).unwrap();
        assert_eq!(parsed[0].members.len(), 2);
        assert_eq!(parsed[1].members.len(), 1);
    }
}
