//! Trial scoring and verification metrics.
//!
//! Conventions, fixed so numbers reproduce exactly:
//!
//! * A trial is accepted when `score >= threshold`.
//! * Candidate thresholds are the distinct scores plus `+inf` (reject all),
//!   giving at most `n + 1` operating points ordered by increasing threshold.
//! * The EER is read off the polyline through those points at the first
//!   segment where the miss rate meets or exceeds the false-alarm rate,
//!   interpolating linearly in the difference `P_fa − P_miss`.
//! * minDCF is normalized by `min(c_miss·p_target, c_fa·(1 − p_target))`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Unknown,
}

impl TrialLabel {
    pub fn is_target(self) -> Option<bool> {
        match self {
            TrialLabel::Target => Some(true),
            TrialLabel::Nontarget => Some(false),
            TrialLabel::Unknown => None,
        }
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
            TrialLabel::Unknown => "unknown",
        })
    }
}

impl FromStr for TrialLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(TrialLabel::Target),
            "nontarget" => Ok(TrialLabel::Nontarget),
            "unknown" => Ok(TrialLabel::Unknown),
            other => Err(Error::Format(format!("unknown trial label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: TrialLabel,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Every unordered pair of distinct segments, labeled by speaker identity.
    /// `segments` holds `(segment_id, speaker_id)`.
    pub fn all_pairs(segments: &[(String, String)]) -> Self {
        let mut trials = Vec::with_capacity(segments.len() * segments.len().saturating_sub(1) / 2);
        for (i, (enroll, spk_e)) in segments.iter().enumerate() {
            for (test, spk_t) in &segments[i + 1..] {
                trials.push(Trial {
                    enroll: enroll.clone(),
                    test: test.clone(),
                    label: if spk_e == spk_t {
                        TrialLabel::Target
                    } else {
                        TrialLabel::Nontarget
                    },
                });
            }
        }
        Self { trials }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Format(format!(
                    "trial list line {}: expected 3 tab-separated columns",
                    i + 1
                )));
            }
            trials.push(Trial {
                enroll: cols[0].to_string(),
                test: cols[1].to_string(),
                label: cols[2].trim().parse()?,
            });
        }
        Ok(Self { trials })
    }

    pub fn render(&self) -> String {
        self.trials
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.enroll, t.test, t.label))
            .collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

/// Segment embeddings keyed by segment id, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let id = id.into();
        if let Some(first) = self.vectors.first() {
            if first.len() != vector.len() {
                return Err(Error::Input(format!(
                    "embedding `{id}` has length {}, table holds length {}",
                    vector.len(),
                    first.len()
                )));
            }
        }
        if self.index.contains_key(&id) {
            return Err(Error::Input(format!("duplicate embedding id `{id}`")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.index
            .get(id)
            .map(|&i| self.vectors[i].as_slice())
            .ok_or_else(|| Error::Lookup(format!("no embedding for id `{id}`")))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }

    /// One line per embedding: id, then values with 17 significant digits.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (id, v) in self.iter() {
            out.push_str(id);
            for x in v {
                out.push('\t');
                out.push_str(&format!("{x:.16e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let id = cols.next().unwrap_or_default();
            let vector = cols
                .map(|c| {
                    c.parse::<f64>().map_err(|_| {
                        Error::Format(format!("embedding line {}: bad value `{c}`", i + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            table.insert(id, vector)?;
        }
        Ok(table)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub enroll: String,
    pub test: String,
    pub label: TrialLabel,
    pub score: f64,
}

/// Cosine similarity. A zero vector scores 0 against everything.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Scores every trial in input order: cosine similarity, or the raw dot
/// product when `length_normalize` is off.
pub fn score_trials(trials: &TrialList, embeddings: &EmbeddingTable, length_normalize: bool) -> Result<Vec<TrialScore>> {
    trials
        .trials
        .iter()
        .map(|t| {
            let e = embeddings.get(&t.enroll)?;
            let v = embeddings.get(&t.test)?;
            let score = if length_normalize {
                cosine(e, v)
            } else {
                e.iter().zip(v).map(|(x, y)| x * y).sum()
            };
            Ok(TrialScore {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                label: t.label,
                score,
            })
        })
        .collect()
}

pub fn render_scores(scores: &[TrialScore]) -> String {
    scores
        .iter()
        .map(|s| format!("{}\t{}\t{:.16e}\n", s.enroll, s.test, s.score))
        .collect()
}

/// `(score, is_target)` pairs for trials with a known label.
pub fn labeled_scores(scores: &[TrialScore]) -> Vec<(f64, bool)> {
    scores
        .iter()
        .filter_map(|s| s.label.is_target().map(|t| (s.score, t)))
        .collect()
}

/// Detection cost parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!(
                "eval: p_target must lie in (0, 1), got {}",
                self.p_target
            )));
        }
        if !(self.c_miss > 0.0) || !(self.c_fa > 0.0) {
            return Err(Error::Config("eval: c_miss and c_fa must be positive".into()));
        }
        Ok(())
    }

    fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// One operating point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    /// Trials scoring at or above this are accepted; `+inf` rejects all.
    pub threshold: f64,
    pub misses: usize,
    pub false_alarms: usize,
}

/// Miss and false-alarm counts at every candidate threshold, ordered by
/// increasing threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub num_target: usize,
    pub num_nontarget: usize,
    pub points: Vec<OperatingPoint>,
}

impl Sweep {
    pub fn new(scores: &[(f64, bool)]) -> Result<Self> {
        if let Some((s, _)) = scores.iter().find(|(s, _)| s.is_nan()) {
            return Err(Error::Metric(format!("score {s} is not a number")));
        }
        let num_target = scores.iter().filter(|(_, t)| *t).count();
        let num_nontarget = scores.len() - num_target;
        if num_target == 0 || num_nontarget == 0 {
            return Err(Error::Metric(format!(
                "metrics need both classes, got {num_target} target and {num_nontarget} nontarget trials"
            )));
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut points = Vec::new();
        let mut misses = 0;
        let mut i = 0;
        while i < sorted.len() {
            let threshold = sorted[i].0;
            points.push(OperatingPoint {
                threshold,
                misses,
                false_alarms: num_nontarget - (i - misses),
            });
            while i < sorted.len() && sorted[i].0 == threshold {
                if sorted[i].1 {
                    misses += 1;
                }
                i += 1;
            }
        }
        points.push(OperatingPoint {
            threshold: f64::INFINITY,
            misses: num_target,
            false_alarms: 0,
        });
        Ok(Self {
            num_target,
            num_nontarget,
            points,
        })
    }

    pub fn p_miss(&self, p: &OperatingPoint) -> f64 {
        p.misses as f64 / self.num_target as f64
    }

    pub fn p_fa(&self, p: &OperatingPoint) -> f64 {
        p.false_alarms as f64 / self.num_nontarget as f64
    }

    /// `(P_fa, P_miss)` at every operating point.
    pub fn det_points(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (self.p_fa(p), self.p_miss(p))).collect()
    }

    pub fn eer(&self) -> (f64, f64) {
        let rates: Vec<(f64, f64)> = self.det_points();
        let i = rates
            .iter()
            .position(|&(fa, miss)| miss >= fa)
            .expect("the reject-all point always has miss >= fa");
        let (eer, alpha) = interpolate_crossing(&rates, i);
        let threshold = if i == 0 {
            self.points[0].threshold
        } else {
            let lo = self.points[i - 1].threshold;
            let hi = self.points[i].threshold;
            if hi.is_finite() {
                lo + alpha * (hi - lo)
            } else {
                lo
            }
        };
        (eer, threshold)
    }

    pub fn min_dcf(&self, params: &DcfParams) -> (f64, f64) {
        let norm = params.default_cost();
        let mut best = (f64::INFINITY, f64::INFINITY);
        for p in &self.points {
            let cost = (params.c_miss * params.p_target * self.p_miss(p)
                + params.c_fa * (1.0 - params.p_target) * self.p_fa(p))
                / norm;
            if cost < best.0 {
                best = (cost, p.threshold);
            }
        }
        best
    }
}

/// EER on a `(P_fa, P_miss)` polyline whose first point with
/// `miss >= fa` is at index `i`. Returns the EER and the interpolation
/// fraction along segment `i − 1 → i`.
fn interpolate_crossing(rates: &[(f64, f64)], i: usize) -> (f64, f64) {
    if i == 0 {
        let (fa, miss) = rates[0];
        return ((fa + miss) / 2.0, 0.0);
    }
    let (fa0, miss0) = rates[i - 1];
    let (fa1, miss1) = rates[i];
    let d0 = fa0 - miss0;
    let d1 = fa1 - miss1;
    let alpha = d0 / (d0 - d1);
    (miss0 + alpha * (miss1 - miss0), alpha)
}

/// EER read from an already emitted DET curve (points ordered by
/// increasing threshold, as [`det_points`] returns them).
pub fn eer_from_det(points: &[(f64, f64)]) -> Result<f64> {
    let i = points
        .iter()
        .position(|&(fa, miss)| miss >= fa)
        .ok_or_else(|| Error::Metric("DET curve never crosses the diagonal".into()))?;
    Ok(interpolate_crossing(points, i).0)
}

/// Equal error rate and the interpolated threshold where it occurs.
pub fn compute_eer(scores: &[(f64, bool)]) -> Result<(f64, f64)> {
    Ok(Sweep::new(scores)?.eer())
}

/// Normalized minimum detection cost and its threshold.
pub fn compute_min_dcf(scores: &[(f64, bool)], params: &DcfParams) -> Result<(f64, f64)> {
    params.validate()?;
    Ok(Sweep::new(scores)?.min_dcf(params))
}

pub fn det_points(scores: &[(f64, bool)]) -> Result<Vec<(f64, f64)>> {
    Ok(Sweep::new(scores)?.det_points())
}

pub fn render_det(points: &[(f64, f64)]) -> String {
    let mut out = String::from("p_fa\tp_miss\n");
    for (fa, miss) in points {
        out.push_str(&format!("{fa:.16e}\t{miss:.16e}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_threshold: f64,
    pub dcf_params: DcfParams,
    pub num_target: usize,
    pub num_nontarget: usize,
    pub det_points: Vec<(f64, f64)>,
}

impl MetricReport {
    pub fn compute(scores: &[(f64, bool)], params: &DcfParams) -> Result<Self> {
        params.validate()?;
        let sweep = Sweep::new(scores)?;
        let (eer, eer_threshold) = sweep.eer();
        let (min_dcf, min_dcf_threshold) = sweep.min_dcf(params);
        Ok(Self {
            eer,
            eer_threshold,
            min_dcf,
            min_dcf_threshold,
            dcf_params: *params,
            num_target: sweep.num_target,
            num_nontarget: sweep.num_nontarget,
            det_points: sweep.det_points(),
        })
    }

    /// Key/value TSV.
    pub fn render(&self) -> String {
        let rows: [(&str, String); 9] = [
            ("eer", format!("{:.16e}", self.eer)),
            ("eer_threshold", format!("{:.16e}", self.eer_threshold)),
            ("min_dcf", format!("{:.16e}", self.min_dcf)),
            ("min_dcf_threshold", format!("{:.16e}", self.min_dcf_threshold)),
            ("p_target", format!("{}", self.dcf_params.p_target)),
            ("c_miss", format!("{}", self.dcf_params.c_miss)),
            ("c_fa", format!("{}", self.dcf_params.c_fa)),
            ("num_target", self.num_target.to_string()),
            ("num_nontarget", self.num_nontarget.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect()
    }
}
