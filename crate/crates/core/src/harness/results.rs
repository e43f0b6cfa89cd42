use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const RESULTS_HEADER: [&str; 9] = [
    "trial_id",
    "method",
    "epsilon",
    "epsilon_prime",
    "covered",
    "set_size",
    "q_hat",
    "lambda",
    "seed",
];

pub const SUMMARY_HEADER: [&str; 7] = [
    "method",
    "epsilon",
    "mean_coverage",
    "std_coverage",
    "mean_size",
    "std_size",
    "n_trials",
];

pub const CONDITIONAL_HEADER: [&str; 7] = [
    "resample_id",
    "epsilon",
    "epsilon_prime",
    "lambda",
    "coverage",
    "mean_set_size",
    "n_inner",
];

/// Marker written in `epsilon_prime` and `lambda` for infeasible rows.
pub const INFEASIBLE: &str = "infeasible";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    FullCp,
    /// Split conformal on halves of the support; the regression stand-in for
    /// full CP.
    SplitCp,
    MetaCp,
    MetaCpDelta,
    Naive,
    TopK(usize),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::FullCp => f.write_str("full-cp"),
            Method::SplitCp => f.write_str("split-cp"),
            Method::MetaCp => f.write_str("meta-cp"),
            Method::MetaCpDelta => f.write_str("meta-cp-delta"),
            Method::Naive => f.write_str("naive"),
            Method::TopK(k) => write!(f, "top-{k}"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "full-cp" => Method::FullCp,
            "split-cp" => Method::SplitCp,
            "meta-cp" => Method::MetaCp,
            "meta-cp-delta" => Method::MetaCpDelta,
            "naive" => Method::Naive,
            other => match other.strip_prefix("top-").and_then(|k| k.parse().ok()) {
                Some(k) => Method::TopK(k),
                None => return Err(format!("unknown method `{other}`")),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial_id: u64,
    pub method: Method,
    pub epsilon: f64,
    pub epsilon_prime: Option<f64>,
    /// Fraction of the trial's query points covered; `None` when infeasible.
    pub covered: Option<f64>,
    /// Mean label count, or mean interval width for regression.
    pub set_size: Option<f64>,
    pub q_hat: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub infeasible: bool,
}

/// Decimal with 6 significant digits, without exponent notation.
pub fn format_sig6(v: f64) -> String {
    if !v.is_finite() || v == 0.0 {
        return format!("{}", if v == 0.0 { 0.0 } else { v });
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

fn opt(v: Option<f64>) -> String {
    v.map(format_sig6).unwrap_or_default()
}

pub fn write_results<W: Write>(out: W, rows: &[TrialResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        let (eps_prime, lambda) = if r.infeasible {
            (INFEASIBLE.to_string(), INFEASIBLE.to_string())
        } else {
            (opt(r.epsilon_prime), opt(r.lambda))
        };
        w.write_record([
            r.trial_id.to_string(),
            r.method.to_string(),
            format_sig6(r.epsilon),
            eps_prime,
            opt(r.covered),
            opt(r.set_size),
            opt(r.q_hat),
            lambda,
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_opt(field: &str, line: usize) -> Result<Option<f64>> {
    if field.is_empty() || field == INFEASIBLE {
        return Ok(None);
    }
    field.parse::<f64>().map(Some).map_err(|e| Error::Parse {
        line,
        msg: format!("`{field}`: {e}"),
    })
}

pub fn read_results<R: Read>(input: R) -> Result<Vec<TrialResult>> {
    let mut reader = csv::Reader::from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header {}", header.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let perr = |msg: String| Error::Parse { line, msg };
        if rec.len() != RESULTS_HEADER.len() {
            return Err(perr(format!(
                "expected {} fields, got {}",
                RESULTS_HEADER.len(),
                rec.len()
            )));
        }
        let num = |j: usize| parse_opt(&rec[j], line);
        rows.push(TrialResult {
            trial_id: rec[0].parse().map_err(|e| perr(format!("trial_id: {e}")))?,
            method: rec[1].parse().map_err(perr)?,
            epsilon: num(2)?.ok_or_else(|| perr("missing epsilon".into()))?,
            epsilon_prime: num(3)?,
            covered: num(4)?,
            set_size: num(5)?,
            q_hat: num(6)?,
            lambda: num(7)?,
            seed: rec[8].parse().map_err(|e| perr(format!("seed: {e}")))?,
            infeasible: &rec[3] == INFEASIBLE || &rec[7] == INFEASIBLE,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub epsilon: f64,
    pub mean_coverage: f64,
    pub std_coverage: f64,
    pub mean_size: f64,
    pub std_size: f64,
    pub n_trials: usize,
}

/// Mean and sample standard deviation (zero for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per `(method, ε)` coverage and size statistics over feasible rows, sorted
/// by method name then ε. Rows are aggregated in trial order, so the output
/// does not depend on the order rows appear in the input.
pub fn summarize(rows: &[TrialResult]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, u64), Vec<&TrialResult>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.infeasible && r.covered.is_some()) {
        groups
            .entry((r.method.to_string(), r.epsilon.to_bits()))
            .or_default()
            .push(r);
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((method, eps_bits), mut members)| {
            members.sort_by_key(|r| r.trial_id);
            let cov: Vec<f64> = members.iter().filter_map(|r| r.covered).collect();
            let size: Vec<f64> = members.iter().filter_map(|r| r.set_size).collect();
            let (mean_coverage, std_coverage) = mean_std(&cov);
            let (mean_size, std_size) = mean_std(&size);
            SummaryRow {
                method,
                epsilon: f64::from_bits(eps_bits),
                mean_coverage,
                std_coverage,
                mean_size,
                std_size,
                n_trials: members.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.method.cmp(&b.method).then(a.epsilon.total_cmp(&b.epsilon)));
    out
}

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            format_sig6(r.epsilon),
            format_sig6(r.mean_coverage),
            format_sig6(r.std_coverage),
            format_sig6(r.mean_size),
            format_sig6(r.std_size),
            r.n_trials.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalResult {
    pub resample_id: u64,
    pub epsilon: f64,
    pub epsilon_prime: f64,
    pub lambda: f64,
    pub coverage: f64,
    pub mean_set_size: f64,
    pub n_inner: usize,
}

pub fn write_conditional<W: Write>(out: W, rows: &[ConditionalResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CONDITIONAL_HEADER)?;
    for r in rows {
        w.write_record([
            r.resample_id.to_string(),
            format_sig6(r.epsilon),
            format_sig6(r.epsilon_prime),
            format_sig6(r.lambda),
            format_sig6(r.coverage),
            format_sig6(r.mean_set_size),
            r.n_inner.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
