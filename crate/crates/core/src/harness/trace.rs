//! Per-step run traces, stored as JSON Lines.
//!
//! The first line is a header carrying the run configuration; every further
//! line is one [`StepRecord`]. Keys appear in declaration order and floats
//! round-trip exactly, so two traces can be compared with `diff`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::TokenId;
use crate::engine::{RunConfig, Strategy};
use crate::signals::{instantaneous_score, trajectory_score, zscore_normalize, RawSignals};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("trace has no header line")]
    MissingHeader,
    #[error("trace line {0}: header may only appear first")]
    MisplacedHeader(usize),
    #[error(
        "replay mismatch at timestep {timestep}, branch {branch}: {field} logged {logged}, recomputed {recomputed}"
    )]
    ReplayMismatch { timestep: usize, branch: usize, field: &'static str, logged: f64, recomputed: f64 },
    #[error("gating record at timestep {0} has no score timestep")]
    MissingScoreTimestep(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Draft,
    Gating,
    Buffer,
    Continuation,
    Sampling,
    Greedy,
}

/// Signals of one branch at one gating step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSignals {
    pub branch: usize,
    pub raw: RawSignals,
    pub z_ema: f64,
    pub z_conf: f64,
    pub z_ent: f64,
    /// Instantaneous score.
    pub score: f64,
    /// Trajectory score after this step.
    pub trajectory: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub branch: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Position (1-based) of the tokens sampled in this step.
    pub timestep: usize,
    pub phase: Phase,
    /// Timestep whose distribution was scored; set on gating steps only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_timestep: Option<usize>,
    /// Alive branches when the step began.
    pub alive: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub signals: Vec<BranchSignals>,
    pub sampled: Vec<(usize, TokenId)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pruned: Vec<PruneEvent>,
    /// Generated tokens held by resident branches after sampling, before
    /// pruning.
    pub resident_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub strategy: Strategy,
    pub config: RunConfig,
    pub vocab_size: usize,
    /// Draft cutoff, for strategies that draft.
    pub cutoff_c: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Header(TraceHeader),
    Step(StepRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
}

impl RunTrace {
    pub fn new(header: TraceHeader) -> Self {
        Self { header, steps: Vec::new() }
    }

    pub fn push(&mut self, record: StepRecord) {
        debug_assert!(self.steps.last().is_none_or(|last| last.timestep < record.timestep));
        self.steps.push(record);
    }

    pub fn sampled_tokens(&self) -> usize {
        self.steps.iter().map(|s| s.sampled.len()).sum()
    }

    pub fn peak_resident(&self) -> usize {
        self.steps.iter().map(|s| s.resident_tokens).max().unwrap_or(0)
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.steps.windows(2).all(|w| w[0].timestep < w[1].timestep)
    }

    /// Token sequence of one branch rebuilt from the sampled-token events.
    pub fn branch_tokens(&self, branch: usize) -> Vec<TokenId> {
        self.steps.iter().flat_map(|s| s.sampled.iter()).filter(|(b, _)| *b == branch).map(|&(_, t)| t).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), TraceError> {
        // clone-free: serialize through borrowed wrappers
        #[derive(Serialize)]
        #[serde(tag = "kind", rename_all = "snake_case")]
        enum Line<'a> {
            Header(&'a TraceHeader),
            Step(&'a StepRecord),
        }
        let mut write = |line: Line| -> Result<(), TraceError> {
            serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
            Ok(())
        };
        write(Line::Header(&self.header))?;
        for step in &self.steps {
            write(Line::Step(step))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, TraceError> {
        let mut header = None;
        let mut steps = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine =
                serde_json::from_str(&line).map_err(|source| TraceError::Parse { line: i + 1, source })?;
            match parsed {
                TraceLine::Header(h) if header.is_none() && steps.is_empty() => header = Some(h),
                TraceLine::Header(_) => return Err(TraceError::MisplacedHeader(i + 1)),
                TraceLine::Step(s) => steps.push(s),
            }
        }
        Ok(Self { header: header.ok_or(TraceError::MissingHeader)?, steps })
    }

    /// Recomputes z-scores, instantaneous and trajectory scores of every
    /// gating step from the logged raw signals and checks them against the
    /// logged values. Returns the number of branch-steps checked.
    pub fn replay_scores(&self, tol: f64) -> Result<usize, TraceError> {
        let cfg = &self.header.config;
        let clamp = cfg.signal.clamp_bound;
        let mut history: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        let mut checked = 0;
        for step in self.steps.iter().filter(|s| s.phase == Phase::Gating && !s.signals.is_empty()) {
            let t = step.score_timestep.ok_or(TraceError::MissingScoreTimestep(step.timestep))?;
            let column = |f: fn(&RawSignals) -> f64| -> Vec<f64> { step.signals.iter().map(|b| f(&b.raw)).collect() };
            let z_ema = zscore_normalize(&column(|r| r.ema), clamp);
            let z_conf = zscore_normalize(&column(|r| r.confidence), clamp);
            let z_ent = zscore_normalize(&column(|r| r.entropy), clamp);
            for (j, b) in step.signals.iter().enumerate() {
                let score = instantaneous_score(z_ema[j], z_conf[j], z_ent[j], &cfg.weights);
                let hist = history.entry(b.branch).or_default();
                hist.push((t, score));
                let trajectory = trajectory_score(hist, hist[0].0);
                let checks = [
                    ("z_ema", b.z_ema, z_ema[j]),
                    ("z_conf", b.z_conf, z_conf[j]),
                    ("z_ent", b.z_ent, z_ent[j]),
                    ("score", b.score, score),
                    ("trajectory", b.trajectory, trajectory),
                ];
                for (field, logged, recomputed) in checks {
                    if (logged - recomputed).abs() > tol {
                        return Err(TraceError::ReplayMismatch {
                            timestep: t,
                            branch: b.branch,
                            field,
                            logged,
                            recomputed,
                        });
                    }
                }
                checked += 1;
            }
        }
        Ok(checked)
    }
}
