//! Closed-set error rate, pairwise detection rates and the average detection
//! cost, reported per test-duration condition.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;

use crate::error::{LidError, Result};

/// Test-duration conditions in seconds.
pub const DURATIONS: [u32; 3] = [3, 10, 30];

const NORM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub utt_id: String,
    pub true_language: usize,
    pub duration_s: u32,
    pub posteriors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub languages: Vec<String>,
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn new(languages: Vec<String>, trials: Vec<Trial>) -> Result<Self> {
        let k = languages.len();
        if k < 2 {
            return Err(LidError::InvalidInput("trial set needs at least two languages".into()));
        }
        for t in &trials {
            if t.posteriors.len() != k {
                return Err(LidError::DimensionMismatch {
                    context: "trial posterior length",
                    expected: k,
                    actual: t.posteriors.len(),
                });
            }
            if t.true_language >= k {
                return Err(LidError::InvalidInput(format!("trial {} has unknown language", t.utt_id)));
            }
            if !DURATIONS.contains(&t.duration_s) {
                return Err(LidError::InvalidInput(format!(
                    "trial {} has duration {} s outside {DURATIONS:?}",
                    t.utt_id, t.duration_s
                )));
            }
            let sum: f64 = t.posteriors.iter().sum();
            if (sum - 1.0).abs() > NORM_TOL || t.posteriors.iter().any(|p| !(*p >= 0.0)) {
                return Err(LidError::InvalidInput(format!(
                    "trial {} posteriors are not normalized (sum {sum})",
                    t.utt_id
                )));
            }
        }
        Ok(Self { languages, trials })
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    /// Trials of one duration condition.
    pub fn condition(&self, duration_s: u32) -> TrialSet {
        TrialSet {
            languages: self.languages.clone(),
            trials: self.trials.iter().filter(|t| t.duration_s == duration_s).cloned().collect(),
        }
    }
}

/// Index of the largest posterior; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Percentage of misclassified trials in a set.
pub fn error_rate_of(trials: &[Trial]) -> Option<f64> {
    if trials.is_empty() {
        return None;
    }
    let wrong = trials.iter().filter(|t| argmax(&t.posteriors) != t.true_language).count();
    Some(100.0 * wrong as f64 / trials.len() as f64)
}

/// ER per duration condition; empty conditions are left out with a warning.
pub fn error_rate(set: &TrialSet) -> BTreeMap<u32, f64> {
    let mut out = BTreeMap::new();
    for d in DURATIONS {
        match error_rate_of(&set.condition(d).trials) {
            Some(er) => {
                out.insert(d, er);
            }
            None => warn!("no trials for the {d} s condition"),
        }
    }
    out
}

/// `(P_miss, P_fa)` for deciding `target` over `nontarget` at log-odds 0,
/// counted over the trials of those two languages.
pub fn pairwise_rates(set: &TrialSet, target: usize, nontarget: usize) -> Result<(f64, f64)> {
    let (mut n_t, mut miss, mut n_n, mut fa) = (0usize, 0usize, 0usize, 0usize);
    for t in &set.trials {
        let log_odds = t.posteriors[target].ln() - t.posteriors[nontarget].ln();
        let accept = log_odds > 0.0;
        if t.true_language == target {
            n_t += 1;
            miss += usize::from(!accept);
        } else if t.true_language == nontarget {
            n_n += 1;
            fa += usize::from(accept);
        }
    }
    let name = |i: usize| set.languages.get(i).cloned().unwrap_or_else(|| i.to_string());
    if n_t == 0 || n_n == 0 {
        let missing = if n_t == 0 { target } else { nontarget };
        return Err(LidError::InvalidInput(format!("no trials of language {}", name(missing))));
    }
    Ok((miss as f64 / n_t as f64, fa as f64 / n_n as f64))
}

/// Two-way error rate in percent, averaged over every unordered pair of
/// `languages`: a trial of `a` counts as wrong when its posterior for `b`
/// is higher than for `a`. Trials of other languages are ignored.
pub fn pairwise_error_rate(set: &TrialSet, languages: &[usize]) -> Result<f64> {
    if languages.len() < 2 {
        return Err(LidError::InvalidInput("pairwise error needs at least two languages".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, &a) in languages.iter().enumerate() {
        for &b in &languages[i + 1..] {
            let (mut n, mut wrong) = (0usize, 0usize);
            for t in &set.trials {
                let other = match t.true_language {
                    l if l == a => b,
                    l if l == b => a,
                    _ => continue,
                };
                n += 1;
                wrong += usize::from(t.posteriors[other] > t.posteriors[t.true_language]);
            }
            if n == 0 {
                return Err(LidError::InvalidInput(format!("no trials for languages {a} and {b}")));
            }
            total += 100.0 * wrong as f64 / n as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Pairwise miss and false-alarm rates indexed `[target][nontarget]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTable {
    pub p_miss: Vec<Vec<Option<f64>>>,
    pub p_fa: Vec<Vec<Option<f64>>>,
}

impl PairTable {
    pub fn empty(k: usize) -> Self {
        Self {
            p_miss: vec![vec![None; k]; k],
            p_fa: vec![vec![None; k]; k],
        }
    }

    pub fn uniform(k: usize, p_miss: f64, p_fa: f64) -> Self {
        let mut t = Self::empty(k);
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    t.set(a, b, p_miss, p_fa);
                }
            }
        }
        t
    }

    pub fn num_languages(&self) -> usize {
        self.p_miss.len()
    }

    pub fn set(&mut self, target: usize, nontarget: usize, p_miss: f64, p_fa: f64) {
        self.p_miss[target][nontarget] = Some(p_miss);
        self.p_fa[target][nontarget] = Some(p_fa);
    }

    pub fn from_trials(set: &TrialSet) -> Result<Self> {
        let k = set.num_languages();
        let mut t = Self::empty(k);
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    let (m, f) = pairwise_rates(set, a, b)?;
                    t.set(a, b, m, f);
                }
            }
        }
        Ok(t)
    }
}

/// Average detection cost in percent with unit costs and a target prior of
/// 0.5: per target, `0.5 * mean P_miss + Σ 0.5/(K-1) * P_fa`, averaged over
/// targets.
pub fn c_avg(table: &PairTable) -> Result<f64> {
    let k = table.num_languages();
    if k < 2 {
        return Err(LidError::InvalidInput("C_avg needs at least two languages".into()));
    }
    let p_non = 0.5 / (k - 1) as f64;
    let mut total = 0.0;
    for t in 0..k {
        let mut miss = 0.0;
        let mut fa = 0.0;
        for n in (0..k).filter(|&n| n != t) {
            let (m, f) = match (table.p_miss[t][n], table.p_fa[t][n]) {
                (Some(m), Some(f)) => (m, f),
                _ => return Err(LidError::InvalidInput(format!("pair table missing entry ({t}, {n})"))),
            };
            miss += m;
            fa += p_non * f;
        }
        total += 0.5 * miss / (k - 1) as f64 + fa;
    }
    Ok(100.0 * total / k as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub duration_s: u32,
    pub num_trials: usize,
    pub error_rate: f64,
    pub c_avg: f64,
    pub pairs: Option<PairTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub title: String,
    pub conditions: Vec<ConditionResult>,
}

impl EvalReport {
    pub fn evaluate(title: impl Into<String>, set: &TrialSet) -> Result<Self> {
        let mut conditions = Vec::new();
        for d in DURATIONS {
            let sub = set.condition(d);
            let Some(er) = error_rate_of(&sub.trials) else {
                warn!("no trials for the {d} s condition");
                continue;
            };
            let pairs = PairTable::from_trials(&sub)?;
            conditions.push(ConditionResult {
                duration_s: d,
                num_trials: sub.trials.len(),
                error_rate: er,
                c_avg: c_avg(&pairs)?,
                pairs: Some(pairs),
            });
        }
        if conditions.is_empty() {
            return Err(LidError::InvalidInput("no trials to evaluate".into()));
        }
        Ok(Self {
            title: title.into(),
            conditions,
        })
    }

    /// Report from precomputed `(duration, ER, C_avg)` rows.
    pub fn from_rates(title: impl Into<String>, rows: &[(u32, f64, f64)]) -> Self {
        Self {
            title: title.into(),
            conditions: rows
                .iter()
                .map(|&(d, er, c)| ConditionResult {
                    duration_s: d,
                    num_trials: 0,
                    error_rate: er,
                    c_avg: c,
                    pairs: None,
                })
                .collect(),
        }
    }

    pub fn condition(&self, duration_s: u32) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.duration_s == duration_s)
    }

    pub fn average_error_rate(&self) -> f64 {
        self.conditions.iter().map(|c| c.error_rate).sum::<f64>() / self.conditions.len() as f64
    }

    pub fn average_c_avg(&self) -> f64 {
        self.conditions.iter().map(|c| c.c_avg).sum::<f64>() / self.conditions.len() as f64
    }

    /// Aligned text table: one column per duration plus the average.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(s, "{}", self.title);
        }
        let _ = write!(s, "{:<16}", "Duration (sec)");
        for c in &self.conditions {
            let _ = write!(s, "{:>10}", format!("{} sec", c.duration_s));
        }
        let _ = writeln!(s, "{:>10}", "Average");
        let _ = write!(s, "{:<16}", "ER (%)");
        for c in &self.conditions {
            let _ = write!(s, "{:>10.2}", c.error_rate);
        }
        let _ = writeln!(s, "{:>10.2}", self.average_error_rate());
        let _ = write!(s, "{:<16}", "Cavg (%)");
        for c in &self.conditions {
            let _ = write!(s, "{:>10.2}", c.c_avg);
        }
        let _ = writeln!(s, "{:>10.2}", self.average_c_avg());
        s
    }

    /// Machine-readable form: `metric`, one column per duration, `average`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric");
        for c in &self.conditions {
            let _ = write!(s, "\t{}s", c.duration_s);
        }
        s.push_str("\taverage\n");
        let mut row = |name: &str, vals: Vec<f64>, avg: f64| {
            s.push_str(name);
            for v in vals {
                let _ = write!(s, "\t{v:.6}");
            }
            let _ = writeln!(s, "\t{avg:.6}");
        };
        row("er", self.conditions.iter().map(|c| c.error_rate).collect(), self.average_error_rate());
        row("cavg", self.conditions.iter().map(|c| c.c_avg).collect(), self.average_c_avg());
        s
    }
}

/// Score file: header `utt_id true_lang duration <languages...>`, then one
/// trial per line, tab separated.
pub fn write_scores(set: &TrialSet) -> String {
    let mut s = String::from("utt_id\ttrue_lang\tduration");
    for l in &set.languages {
        let _ = write!(s, "\t{l}");
    }
    s.push('\n');
    for t in &set.trials {
        let _ = write!(s, "{}\t{}\t{}", t.utt_id, set.languages[t.true_language], t.duration_s);
        for p in &t.posteriors {
            // Shortest representation that round-trips exactly.
            let _ = write!(s, "\t{p:?}");
        }
        s.push('\n');
    }
    s
}

pub fn read_scores(text: &str, source: &str) -> Result<TrialSet> {
    let err = |line: usize, reason: String| LidError::Format {
        path: source.to_string(),
        offset: line as u64,
        reason,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(0, "empty score file".into()))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 5 || cols[..3] != ["utt_id", "true_lang", "duration"] {
        return Err(err(1, format!("bad score header {header:?}")));
    }
    let languages: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
    let mut trials = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != cols.len() {
            return Err(err(i + 1, format!("expected {} fields, got {}", cols.len(), f.len())));
        }
        let true_language = languages
            .iter()
            .position(|l| l == f[1])
            .ok_or_else(|| err(i + 1, format!("unknown language {:?}", f[1])))?;
        let duration_s = f[2].parse().map_err(|_| err(i + 1, format!("bad duration {:?}", f[2])))?;
        let posteriors = f[3..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| err(i + 1, format!("bad posterior {v:?}"))))
            .collect::<Result<_>>()?;
        trials.push(Trial {
            utt_id: f[0].to_string(),
            true_language,
            duration_s,
            posteriors,
        });
    }
    TrialSet::new(languages, trials)
}
