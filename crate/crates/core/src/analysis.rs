//! Final-layer attention at the recommendation sites (state tokens),
//! aggregated per key timestep and modality.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dtmodel::{forward, DTParams, Mode, Real};
use crate::error::{Error, Result};
use crate::trajectory::TrainingWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Return,
    State,
    Action,
    All,
}

impl Modality {
    pub const TOKENS: [Modality; 3] = [Modality::Return, Modality::State, Modality::Action];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Return => "return",
            Modality::State => "state",
            Modality::Action => "action",
            Modality::All => "all",
        }
    }

    fn of_token(j: usize) -> Modality {
        Modality::TOKENS[j % 3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportMode {
    Absolute,
    Relative,
}

impl ReportMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportMode::Absolute => "absolute",
            ReportMode::Relative => "relative",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Modality::Return, Modality::State, Modality::Action, Modality::All]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown modality {s:?}")))
    }
}

impl FromStr for ReportMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [ReportMode::Absolute, ReportMode::Relative]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown report mode {s:?}")))
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One key of one attention row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyWeight {
    pub modality: Modality,
    /// Absolute timestep of the key's slot (0 on padding).
    pub timestep: usize,
    /// Query step minus key step, in window slots.
    pub offset: isize,
    pub is_padding: bool,
    /// Later in token order than the query.
    pub is_future: bool,
    pub weight: f64,
}

/// Final-layer attention of one real state-token query, averaged over heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub window: usize,
    pub query_timestep: usize,
    pub keys: Vec<KeyWeight>,
}

/// Runs the model without dropout and returns one row per real state token.
pub fn collect_attention<F: Real>(p: &DTParams<F>, windows: &[TrainingWindow]) -> Result<Vec<AttentionRow>> {
    let trace = forward(p, windows, Mode::Eval)?;
    let n = p.cfg.seq_len();
    let h = p.cfg.n_heads;
    let mut rows = Vec::new();
    for (b, w) in windows.iter().enumerate() {
        let att = trace.final_attention(b);
        for qs in (0..w.len()).filter(|&s| w.pad_mask[s]) {
            let i = 3 * qs + 1;
            let keys = (0..n)
                .map(|j| {
                    let ks = j / 3;
                    let weight = (0..h).map(|hd| att[hd * n * n + i * n + j].as_f64()).sum::<f64>() / h as f64;
                    KeyWeight {
                        modality: Modality::of_token(j),
                        timestep: w.timesteps[ks],
                        offset: qs as isize - ks as isize,
                        is_padding: !w.pad_mask[ks],
                        is_future: j > i,
                        weight,
                    }
                })
                .collect();
            rows.push(AttentionRow { window: b, query_timestep: w.timesteps[qs], keys });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub mode: ReportMode,
    pub modality: Modality,
    /// Normalized score per absolute timestep or relative offset.
    pub scores: BTreeMap<usize, f64>,
    /// Mass before normalization.
    pub total_mass: f64,
}

fn aggregate(rows: &[AttentionRow], mode: ReportMode, exclude_padding: bool) -> Result<Vec<AttentionReport>> {
    let mut sums: BTreeMap<Modality, BTreeMap<usize, f64>> = BTreeMap::new();
    for row in rows {
        for k in &row.keys {
            // future keys are masked to exactly zero; skipping them keeps
            // offsets nonnegative
            if k.is_future || (exclude_padding && k.is_padding) {
                continue;
            }
            let key = match mode {
                ReportMode::Absolute => k.timestep,
                ReportMode::Relative => k.offset as usize,
            };
            for m in [k.modality, Modality::All] {
                *sums.entry(m).or_default().entry(key).or_default() += k.weight;
            }
        }
    }
    let mut out = Vec::with_capacity(4);
    for m in [Modality::Return, Modality::State, Modality::Action, Modality::All] {
        let map = sums.remove(&m).unwrap_or_default();
        let total: f64 = map.values().sum();
        if !(total > 0.0) {
            return Err(Error::InsufficientData(format!("no {m} attention mass to normalize")));
        }
        let scores = map.into_iter().map(|(k, v)| (k, v / total)).collect();
        out.push(AttentionReport { mode, modality: m, scores, total_mass: total });
    }
    Ok(out)
}

/// Reports keyed by absolute key timestep: return, state, action, then all.
pub fn aggregate_absolute(rows: &[AttentionRow], exclude_padding: bool) -> Result<Vec<AttentionReport>> {
    aggregate(rows, ReportMode::Absolute, exclude_padding)
}

/// Reports keyed by offset from the query step (0 = current step); padding
/// is always excluded.
pub fn aggregate_relative(rows: &[AttentionRow]) -> Result<Vec<AttentionReport>> {
    aggregate(rows, ReportMode::Relative, true)
}

pub const REPORT_HEADER: &str = "mode,modality,key,normalized_score";

pub fn report_to_csv(reports: &[AttentionReport]) -> String {
    let mut lines: Vec<(ReportMode, Modality, usize, f64)> = reports
        .iter()
        .flat_map(|r| r.scores.iter().map(move |(&k, &v)| (r.mode, r.modality, k, v)))
        .collect();
    lines.sort_by_key(|l| (l.0, l.1, l.2));
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for (mode, m, k, v) in lines {
        let _ = writeln!(s, "{},{},{k},{v}", mode.as_str(), m.as_str());
    }
    s
}

/// Parses `report_to_csv` output. `total_mass` is not stored and comes back
/// as the sum of the scores.
pub fn parse_report_csv(text: &str) -> Result<Vec<AttentionReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: format!("expected header {REPORT_HEADER:?}") }),
    }
    let mut out: Vec<AttentionReport> = Vec::new();
    for (i, line) in lines {
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", f.len())));
        }
        let mode: ReportMode = f[0].parse().map_err(|e: Error| err(e.to_string()))?;
        let modality: Modality = f[1].parse().map_err(|e: Error| err(e.to_string()))?;
        let key: usize = f[2].parse().map_err(|_| err(format!("bad key {:?}", f[2])))?;
        let v: f64 = f[3].parse().map_err(|_| err(format!("bad score {:?}", f[3])))?;
        match out.last_mut() {
            Some(r) if r.mode == mode && r.modality == modality => {
                r.scores.insert(key, v);
            }
            _ => out.push(AttentionReport { mode, modality, scores: BTreeMap::from([(key, v)]), total_mass: 0.0 }),
        }
    }
    for r in &mut out {
        r.total_mass = r.scores.values().sum();
    }
    Ok(out)
}

pub fn export_report(reports: &[AttentionReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report_to_csv(reports)).map_err(|e| Error::io(path, e))
}

/// Static bar chart of one report.
pub fn report_svg(r: &AttentionReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 240.0;
    const PAD: f64 = 32.0;
    let n = r.scores.len().max(1) as f64;
    let max = r.scores.values().cloned().fold(0.0, f64::max).max(1e-12);
    let bar = (W - 2.0 * PAD) / n;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">{} attention, {} timesteps</text>\n",
        r.modality.as_str(),
        r.mode.as_str()
    );
    for (i, (k, v)) in r.scores.iter().enumerate() {
        let h = (H - 2.0 * PAD - 12.0) * v / max;
        let x = PAD + i as f64 * bar;
        let y = H - PAD - h;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"#4a6fa5\"><title>{k}: {v:.4}</title></rect>",
            (bar * 0.8).max(1.0)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"middle\">{k}</text>",
            x + bar * 0.4,
            H - PAD + 12.0
        );
    }
    s.push_str("</svg>\n");
    s
}
