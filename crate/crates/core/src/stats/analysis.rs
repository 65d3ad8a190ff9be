//! Trace-level analyses relating insertion timing to response quality.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::hypothesis::{pearson, t_test_two_sample, upper_quantile, TTestVariant};
use crate::error::{Error, Result};
use crate::trace::TraceRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseScorePair {
    pub question_id: String,
    /// Share of this response's insertions made during a strong attention shift.
    pub proportion_synchronized: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncAnalysis {
    pub quantile: f64,
    pub pairs: Vec<ResponseScorePair>,
    /// Responses without insertions, left out of the correlation.
    pub excluded: Vec<String>,
    pub r: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub mean_high: f64,
    pub mean_low: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub n_high: usize,
    pub n_low: usize,
}

/// Parses `question_id<TAB>score` lines. Blank lines and `#` comments are skipped.
pub fn parse_scores(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, score) =
            line.split_once('\t').ok_or_else(|| Error::Data(format!("score line {}: expected id<TAB>score", n + 1)))?;
        let score: f64 =
            score.trim().parse().map_err(|_| Error::Data(format!("score line {}: bad score {score:?}", n + 1)))?;
        out.insert(id.to_string(), score);
    }
    Ok(out)
}

/// Proportion of synchronized insertions in one response, or `None` without insertions.
///
/// The threshold is the nearest-rank `quantile` of the response's own shift series; an
/// insertion is synchronized when its shift is strictly above it.
pub fn synchronized_proportion(trace: &TraceRecord, quantile: f64) -> Result<Option<f64>> {
    let total = trace.insertion_count();
    if total == 0 {
        return Ok(None);
    }
    let deltas = trace.deltas();
    if deltas.is_empty() {
        return Ok(Some(0.0));
    }
    let threshold = upper_quantile(&deltas, quantile)?;
    let synced = trace.insertions().filter(|(e, _)| e.delta.is_some_and(|d| d > threshold)).count();
    Ok(Some(synced as f64 / total as f64))
}

pub fn synchronized_insertion_analysis(
    traces: &[TraceRecord],
    scores: &BTreeMap<String, f64>,
    quantile: f64,
) -> Result<SyncAnalysis> {
    let mut pairs = Vec::new();
    let mut excluded = Vec::new();
    for trace in traces {
        let score = *scores
            .get(&trace.question_id)
            .ok_or_else(|| Error::Data(format!("no score for question {}", trace.question_id)))?;
        match synchronized_proportion(trace, quantile)? {
            Some(p) => pairs.push(ResponseScorePair {
                question_id: trace.question_id.clone(),
                proportion_synchronized: p,
                score,
            }),
            None => excluded.push(trace.question_id.clone()),
        }
    }
    if pairs.len() < 3 {
        return Err(Error::InsufficientData(format!("{} responses with insertions; at least 3 needed", pairs.len())));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.proportion_synchronized).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    let (r, p) = pearson(&xs, &ys)?;
    Ok(SyncAnalysis { quantile, pairs, excluded, r, p })
}

/// Compares the synchronized share between the top and bottom 30% of responses by score.
pub fn group_analysis(pairs: &[ResponseScorePair], variant: TTestVariant) -> Result<GroupReport> {
    if pairs.len() < 7 {
        return Err(Error::InsufficientData(format!("group analysis needs 7 responses, got {}", pairs.len())));
    }
    let mut ranked: Vec<&ResponseScorePair> = pairs.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.question_id.cmp(&b.question_id)));
    let size = pairs.len() * 3 / 10;
    let high: Vec<f64> = ranked[..size].iter().map(|p| p.proportion_synchronized).collect();
    let low: Vec<f64> = ranked[ranked.len() - size..].iter().map(|p| p.proportion_synchronized).collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (t_stat, p_value) = t_test_two_sample(&high, &low, variant)?;
    Ok(GroupReport { mean_high: mean(&high), mean_low: mean(&low), t_stat, p_value, n_high: size, n_low: size })
}

impl GroupReport {
    pub fn to_line(&self) -> String {
        format!(
            "mean_high={:.4} mean_low={:.4} t={:.4} p={:.4} n_high={} n_low={}",
            self.mean_high, self.mean_low, self.t_stat, self.p_value, self.n_high, self.n_low
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: BTreeMap<&str, &str> = line.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Data(format!("group report missing {k}")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Data(format!("group report field {k} is not a number")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Data(format!("group report field {k} is not an integer")))
        };
        Ok(Self {
            mean_high: num("mean_high")?,
            mean_low: num("mean_low")?,
            t_stat: num("t")?,
            p_value: num("p")?,
            n_high: int("n_high")?,
            n_low: int("n_low")?,
        })
    }
}

/// Everything the `analyze` command reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub responses: usize,
    pub sync: SyncAnalysis,
    pub group: Option<GroupReport>,
    pub t_test: TTestVariant,
    pub p_exp_mean: Option<f64>,
    pub p_exp_responses: usize,
    /// Sidedness of the reported p-values.
    pub sidedness: String,
}

pub fn analyze(
    traces: &[TraceRecord],
    scores: &BTreeMap<String, f64>,
    quantile: f64,
    variant: TTestVariant,
) -> Result<AnalysisReport> {
    let sync = synchronized_insertion_analysis(traces, scores, quantile)?;
    let group = if sync.pairs.len() >= 7 { Some(group_analysis(&sync.pairs, variant)?) } else { None };
    let p_exps: Vec<f64> = traces.iter().filter_map(TraceRecord::p_exp).collect();
    let p_exp_mean = (!p_exps.is_empty()).then(|| p_exps.iter().sum::<f64>() / p_exps.len() as f64);
    Ok(AnalysisReport {
        responses: traces.len(),
        sync,
        group,
        t_test: variant,
        p_exp_mean,
        p_exp_responses: p_exps.len(),
        sidedness: "two-sided".into(),
    })
}

pub fn render_report(report: &AnalysisReport) -> String {
    let mut s = String::new();
    let sync = &report.sync;
    let _ = writeln!(s, "# synchronized insertion analysis");
    let _ = writeln!(
        s,
        "responses: {} ({} with insertions, {} excluded without insertions)",
        report.responses,
        sync.pairs.len(),
        sync.excluded.len()
    );
    let _ =
        writeln!(s, "threshold: nearest-rank upper quantile q={:.2} of each response's shift series", sync.quantile);
    let _ = writeln!(s, "Pearson Correlation: r={:.4} p={:.4} ({})", sync.r, sync.p, report.sidedness);
    let _ = writeln!(s, "# group analysis (top/bottom 30% by score)");
    match &report.group {
        Some(g) => {
            let variant = match report.t_test {
                TTestVariant::Student => "student",
                TTestVariant::Welch => "welch",
            };
            let _ = writeln!(s, "{} ({variant}, {})", g.to_line(), report.sidedness);
        }
        None => {
            let _ = writeln!(s, "skipped: fewer than 7 responses with insertions");
        }
    }
    let _ = writeln!(s, "# region sources");
    match report.p_exp_mean {
        Some(p) => {
            let _ = writeln!(
                s,
                "P_exp={:.2}% P_attn={:.2}% over {} responses",
                100.0 * p,
                100.0 * (1.0 - p),
                report.p_exp_responses
            );
        }
        None => {
            let _ = writeln!(s, "no selected regions");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Insertion, TokenEntry};

    /// A response whose shift series is `deltas` with insertions at the listed indices.
    fn trace(id: &str, deltas: &[f64], inserted: &[usize]) -> TraceRecord {
        let mut entries =
            vec![TokenEntry { index: 0, token: 300, a_visual: 0.5, delta: None, fired: false, insertion: None }];
        for (i, &d) in deltas.iter().enumerate() {
            let idx = i + 1;
            let ins = inserted.contains(&idx).then(|| Insertion {
                regions: vec![],
                sources: vec![],
                gains: vec![],
                backend_calls: 0,
            });
            entries.push(TokenEntry {
                index: idx,
                token: 300,
                a_visual: 0.5,
                delta: Some(d),
                fired: ins.is_some(),
                insertion: ins,
            });
        }
        TraceRecord { question_id: id.into(), entries, ..Default::default() }
    }

    #[test]
    fn parse_scores_lines() {
        let s = parse_scores("# c\nq1\t0.5\n\nq2\t1\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s["q2"], 1.0);
        assert!(parse_scores("q1 0.5\n").is_err());
        assert!(parse_scores("q1\tx\n").is_err());
    }

    #[test]
    fn proportion_uses_strict_quantile_threshold() {
        // ten deltas 0.1..1.0, q=0.8 → threshold 0.8; insertions at deltas 0.9 and 0.5
        let deltas: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let t = trace("a", &deltas, &[9, 5]);
        assert_eq!(synchronized_proportion(&t, 0.8).unwrap(), Some(0.5));
        let t = trace("b", &deltas, &[8]);
        assert_eq!(synchronized_proportion(&t, 0.8).unwrap(), Some(0.0));
        assert_eq!(synchronized_proportion(&trace("c", &deltas, &[]), 0.8).unwrap(), None);
    }

    #[test]
    fn missing_score_and_too_few_responses() {
        let deltas = [0.1, 0.2, 0.9];
        let traces = vec![trace("a", &deltas, &[3]), trace("b", &deltas, &[3])];
        let scores: BTreeMap<_, _> = [("a".to_string(), 1.0)].into_iter().collect();
        assert!(matches!(synchronized_insertion_analysis(&traces, &scores, 0.8), Err(Error::Data(_))));
        let scores: BTreeMap<_, _> = [("a".to_string(), 1.0), ("b".to_string(), 0.0)].into_iter().collect();
        assert!(matches!(synchronized_insertion_analysis(&traces, &scores, 0.8), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn all_synchronized_is_constant_input() {
        let deltas: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let traces: Vec<_> = (0..4).map(|i| trace(&format!("q{i}"), &deltas, &[10])).collect();
        let scores = traces.iter().enumerate().map(|(i, t)| (t.question_id.clone(), i as f64)).collect();
        assert!(matches!(synchronized_insertion_analysis(&traces, &scores, 0.8), Err(Error::ConstantInput)));
    }

    #[test]
    fn groups_split_by_score() {
        let pairs: Vec<ResponseScorePair> = (0..10)
            .map(|i| ResponseScorePair {
                question_id: format!("q{i}"),
                proportion_synchronized: if i >= 7 {
                    1.0
                } else if i < 3 {
                    0.0
                } else {
                    0.5
                },
                score: i as f64,
            })
            .collect();
        let g = group_analysis(&pairs, TTestVariant::Student).unwrap();
        assert_eq!((g.mean_high, g.mean_low, g.n_high, g.n_low), (1.0, 0.0, 3, 3));
        assert_eq!(g.p_value, 0.0);

        let same: Vec<_> =
            pairs.iter().map(|p| ResponseScorePair { proportion_synchronized: 0.4, score: 1.0, ..p.clone() }).collect();
        let g = group_analysis(&same, TTestVariant::Student).unwrap();
        assert_eq!(g.mean_high, g.mean_low);
        assert_eq!(g.p_value, 1.0);
        assert!(group_analysis(&pairs[..6], TTestVariant::Student).is_err());
    }

    #[test]
    fn group_line_roundtrip() {
        let g = GroupReport { mean_high: 0.8889, mean_low: 0.5, t_stat: 3.4, p_value: 0.0019, n_high: 18, n_low: 18 };
        let back = GroupReport::parse_line(&g.to_line()).unwrap();
        assert_eq!(back, g);
        assert!(GroupReport::parse_line("mean_high=1").is_err());
    }
}
