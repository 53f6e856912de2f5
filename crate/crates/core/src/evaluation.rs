//! Side-by-side comparison of the decentralised ranking with the central
//! SHAP importances: endpoint alignment, rank agreement and report files.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::SHARED_ACTOR_ID;
use crate::dataset::{csv_field, format_f64, NOISE_ACTOR_ID};
use crate::error::{Error, Result};
use crate::protocol::ContributionRanking;

pub const RANK_TABLE_FILE: &str = "rank_table.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CHART_FILE: &str = "comparison.svg";

/// Affine map sending the series' (min, max) onto (target_min, target_max).
pub fn minmax_align(series: &[f64], target_min: f64, target_max: f64) -> Result<Vec<f64>> {
    if !(target_min < target_max) {
        return Err(Error::invalid(format!(
            "alignment target ({target_min}, {target_max}) is empty"
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("cannot align non-finite values".into()));
    }
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        return Err(Error::Domain("cannot align a constant series".into()));
    }
    let span = target_max - target_min;
    Ok(series
        .iter()
        .map(|v| {
            if *v == hi {
                target_max
            } else {
                target_min + (v - lo) / (hi - lo) * span
            }
        })
        .collect())
}

/// Higher score means larger estimated contribution: the negated
/// uncertainty of every entry, keyed by actor.
pub fn invert_for_comparison(ranking: &ContributionRanking) -> BTreeMap<String, f64> {
    ranking
        .entries
        .iter()
        .map(|e| (e.actor_id.clone(), -e.total_uncertainty))
        .collect()
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Arity {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::invalid("rank correlation needs at least two items"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN in rank correlation input".into()));
    }
    Ok(())
}

/// Kendall's tau-b of two paired score (or rank) vectors.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len();
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i].partial_cmp(&a[j]).expect("no NaN");
            let db = b[i].partial_cmp(&b[j]).expect("no NaN");
            match (da, db) {
                (Ordering::Equal, Ordering::Equal) => {
                    ties_a += 1;
                    ties_b += 1;
                }
                (Ordering::Equal, _) => ties_a += 1,
                (_, Ordering::Equal) => ties_b += 1,
                (x, y) if x == y => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = (((pairs - ties_a) * (pairs - ties_b)) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Domain("tau undefined for a constant ranking".into()));
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// Ranks starting at 1 for the smallest value; ties share their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let mean = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = mean;
        }
        start = end;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of the average ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Domain("rho undefined for a constant ranking".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub actor_id: String,
    pub uncertainty: f64,
    pub aligned_uncertainty: f64,
    pub shap: f64,
    pub aligned_shap: f64,
    pub rank_dec: usize,
    pub rank_shap: usize,
    pub below_floor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// In decentralised rank order.
    pub rows: Vec<RankRow>,
    pub kendall_tau: f64,
    pub spearman_rho: f64,
    /// Noise-to-weakest-actor gap of the aligned decentralised scores divided
    /// by the same gap on the SHAP side. `None` without a noise row or when
    /// the SHAP gap is zero.
    pub noise_contrast: Option<f64>,
}

impl ComparisonReport {
    pub fn row(&self, actor_id: &str) -> Option<&RankRow> {
        self.rows.iter().find(|r| r.actor_id == actor_id)
    }
}

fn ranks_desc(scores: &[(String, f64)]) -> BTreeMap<String, usize> {
    let mut order: Vec<&(String, f64)> = scores.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    order
        .into_iter()
        .enumerate()
        .map(|(i, (id, _))| (id.clone(), i + 1))
        .collect()
}

/// Aligns the inverted decentralised scores to the SHAP series' endpoints and
/// measures agreement. The `shared` pseudo-actor is not compared.
pub fn compare(
    ranking: &ContributionRanking,
    shap: &BTreeMap<String, f64>,
) -> Result<ComparisonReport> {
    let dec = invert_for_comparison(ranking);
    let shap: BTreeMap<&String, f64> = shap
        .iter()
        .filter(|(k, _)| k.as_str() != SHARED_ACTOR_ID)
        .map(|(k, v)| (k, *v))
        .collect();
    if dec.len() != shap.len() || dec.keys().any(|k| !shap.contains_key(k)) {
        let a: Vec<&String> = dec.keys().collect();
        let b: Vec<&&String> = shap.keys().collect();
        return Err(Error::invalid(format!(
            "actor sets differ: ranking {a:?} vs importances {b:?}"
        )));
    }
    let ids: Vec<String> = ranking.entries.iter().map(|e| e.actor_id.clone()).collect();
    let dec_scores: Vec<f64> = ids.iter().map(|id| dec[id]).collect();
    let shap_scores: Vec<f64> = ids.iter().map(|id| shap[id]).collect();
    let lo = shap_scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = shap_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let aligned_dec = minmax_align(&dec_scores, lo, hi)?;
    let aligned_shap = shap_scores.clone();

    let rank_shap = ranks_desc(
        &ids.iter()
            .cloned()
            .zip(shap_scores.iter().copied())
            .collect::<Vec<_>>(),
    );
    let rows: Vec<RankRow> = ranking
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| RankRow {
            actor_id: e.actor_id.clone(),
            uncertainty: e.total_uncertainty,
            aligned_uncertainty: aligned_dec[i],
            shap: shap_scores[i],
            aligned_shap: aligned_shap[i],
            rank_dec: e.rank,
            rank_shap: rank_shap[&e.actor_id],
            below_floor: e.below_floor,
        })
        .collect();

    let noise_contrast = rows
        .iter()
        .find(|r| r.actor_id == NOISE_ACTOR_ID)
        .and_then(|noise| {
            let real = rows.iter().filter(|r| r.actor_id != NOISE_ACTOR_ID);
            let weakest_dec = real.clone().map(|r| r.aligned_uncertainty).fold(f64::INFINITY, f64::min);
            let weakest_shap = real.map(|r| r.aligned_shap).fold(f64::INFINITY, f64::min);
            let shap_gap = weakest_shap - noise.aligned_shap;
            (weakest_dec.is_finite() && shap_gap != 0.0)
                .then(|| (weakest_dec - noise.aligned_uncertainty) / shap_gap)
        });

    Ok(ComparisonReport {
        kendall_tau: kendall_tau(&dec_scores, &shap_scores)?,
        spearman_rho: spearman_rho(&dec_scores, &shap_scores)?,
        rows,
        noise_contrast,
    })
}

pub fn rank_table_csv(report: &ComparisonReport) -> String {
    let mut out = String::from(
        "actor_id,uncertainty,aligned_uncertainty,shap,aligned_shap,rank_dec,rank_shap,below_floor\n",
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&r.actor_id),
            format_f64(r.uncertainty),
            format_f64(r.aligned_uncertainty),
            format_f64(r.shap),
            format_f64(r.aligned_shap),
            r.rank_dec,
            r.rank_shap,
            r.below_floor
        );
    }
    out
}

pub fn summary_text(report: &ComparisonReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "actors={}", report.rows.len());
    let _ = writeln!(out, "kendall_tau={}", format_f64(report.kendall_tau));
    let _ = writeln!(out, "spearman_rho={}", format_f64(report.spearman_rho));
    let _ = writeln!(
        out,
        "noise_contrast={}",
        report.noise_contrast.map_or_else(|| "none".to_string(), format_f64)
    );
    let order: Vec<&str> = report.rows.iter().map(|r| r.actor_id.as_str()).collect();
    let _ = writeln!(out, "order_decentralised={}", order.join(" "));
    let mut by_shap: Vec<&RankRow> = report.rows.iter().collect();
    by_shap.sort_by_key(|r| r.rank_shap);
    let order: Vec<&str> = by_shap.iter().map(|r| r.actor_id.as_str()).collect();
    let _ = writeln!(out, "order_shap={}", order.join(" "));
    let flagged: Vec<&str> = report
        .rows
        .iter()
        .filter(|r| r.below_floor)
        .map(|r| r.actor_id.as_str())
        .collect();
    let _ = writeln!(out, "below_floor={}", flagged.join(" "));
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Grouped bars: aligned decentralised score and SHAP importance per actor.
pub fn chart_svg(report: &ComparisonReport) -> String {
    let n = report.rows.len().max(1);
    let (group, bar, left, top, plot_h) = (90.0, 30.0, 60.0, 40.0, 240.0);
    let width = left + group * n as f64 + 20.0;
    let height = top + plot_h + 80.0;
    let max = report
        .rows
        .iter()
        .flat_map(|r| [r.aligned_uncertainty, r.aligned_shap])
        .fold(0.0f64, f64::max);
    let max = if max > 0.0 { max } else { 1.0 };
    let y_of = |v: f64| top + plot_h - (v.max(0.0) / max) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + plot_h,
        width - 10.0,
        top + plot_h
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + plot_h
    );
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="10" width="10" height="10" fill="#1f77b4"/><text x="{}" y="19">decentralised (aligned, inverted uncertainty)</text>"##,
        left + 14.0
    );
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="10" width="10" height="10" fill="#ff7f0e"/><text x="{}" y="19">central SHAP</text>"##,
        left + 280.0,
        left + 294.0
    );
    for (i, r) in report.rows.iter().enumerate() {
        let x0 = left + group * i as f64 + 12.0;
        let label = xml_escape(&r.actor_id);
        for (k, (v, color)) in [(r.aligned_uncertainty, "#1f77b4"), (r.aligned_shap, "#ff7f0e")]
            .into_iter()
            .enumerate()
        {
            let x = x0 + bar * k as f64;
            let y = y_of(v);
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{bar}" height="{:.2}" fill="{color}"><title>{label}: {}</title></rect>"#,
                top + plot_h - y,
                format_f64(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" transform="rotate(-35 {:.2} {:.2})">{label}</text>"#,
            x0 + bar,
            top + plot_h + 14.0,
            x0 + bar,
            top + plot_h + 14.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the rank table, summary and chart into `out_dir`.
pub fn emit_report(report: &ComparisonReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = [
        (RANK_TABLE_FILE, rank_table_csv(report)),
        (SUMMARY_FILE, summary_text(report)),
        (CHART_FILE, chart_svg(report)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
