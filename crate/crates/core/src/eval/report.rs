use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{AgreementMetrics, BenchPoint, RteReport};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HeadRte {
    pub layer: usize,
    pub query_head: usize,
    pub rte_target: f64,
    pub rte_score: f64,
}

/// Everything measured for one trained stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub family: String,
    pub rho: f64,
    pub lambda_alpha: f64,
    pub lambda_a: f64,
    pub lambda_kl: f64,
    pub surrogate_params: usize,
    pub agreement: AgreementMetrics,
    pub rte: RteReport,
    #[serde(default)]
    pub bench: Vec<BenchPoint>,
}

pub const CSV_HEADER: &str = "label,family,rho,lambda_alpha,lambda_a,lambda_kl,surrogate_params,positions,\
token_accuracy_gap,lm_ce_gap,eval_kl,constant_baseline_gap,rte_target,rte_score,\
rte_floored_target,rte_floored_score,rte_excluded_target,rte_excluded_score";

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("report json: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("report json: {e}")))
    }

    /// One line matching [`CSV_HEADER`], no trailing newline.
    pub fn csv_row(&self) -> String {
        let a = &self.agreement;
        let r = &self.rte;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&self.label),
            csv_field(&self.family),
            self.rho,
            self.lambda_alpha,
            self.lambda_a,
            self.lambda_kl,
            self.surrogate_params,
            a.positions,
            a.token_accuracy_gap,
            a.lm_ce_gap,
            a.eval_kl,
            a.constant_baseline_gap,
            r.rte_target,
            r.rte_score,
            r.floored_target,
            r.floored_score,
            r.excluded_target,
            r.excluded_score,
        )
    }

    /// Per-(layer, query head) breakdown: `layer,query_head,rte_target,rte_score`.
    pub fn heatmap_csv(&self) -> String {
        let mut s = String::from("layer,query_head,rte_target,rte_score\n");
        for h in &self.rte.heads {
            let _ = writeln!(s, "{},{},{},{}", h.layer, h.query_head, h.rte_target, h.rte_score);
        }
        s
    }
}

/// Joins report rows under the shared header.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EvalReport {
        EvalReport {
            label: "a,b".into(),
            family: "quadrature".into(),
            rho: 0.02,
            lambda_alpha: 0.0,
            lambda_a: 1.0,
            lambda_kl: 0.0,
            surrogate_params: 64,
            agreement: AgreementMetrics { positions: 3, token_accuracy_gap: 1.5, ..Default::default() },
            rte: RteReport {
                rte_target: -2.0,
                heads: vec![HeadRte { layer: 0, query_head: 1, rte_target: -2.0, rte_score: 0.5 }],
                ..Default::default()
            },
            bench: Vec::new(),
        }
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn csv_row_matches_header_width() {
        let row = sample().csv_row();
        assert!(row.starts_with("\"a,b\",quadrature,"));
        let unquoted = row.replacen("\"a,b\"", "x", 1);
        assert_eq!(unquoted.split(',').count(), CSV_HEADER.split(',').count());
        assert!(reports_csv(&[sample()]).lines().count() == 2);
    }

    #[test]
    fn heatmap_lists_heads() {
        assert_eq!(sample().heatmap_csv(), "layer,query_head,rte_target,rte_score\n0,1,-2,0.5\n");
    }
}
