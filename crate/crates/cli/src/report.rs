//! Plain-text, key-value and JSON renderings of evaluation reports and the
//! ablation tables.

use std::fmt::Write as _;

use serde_json::{json, Map, Value};
use ucorr_core::metrics::{EvalReport, REPORT_COLUMNS};
use ucorr_core::Variant;

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "null".into(),
    }
}

fn flags(r: &EvalReport) -> String {
    if r.flags.is_empty() {
        "none".into()
    } else {
        r.flags.iter().map(|f| f.name()).collect::<Vec<_>>().join(",")
    }
}

/// Header plus one row per labelled report, columns in report order.
pub fn metrics_table(rows: &[(String, &EvalReport)]) -> String {
    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(7);
    let mut s = format!("{:<label_w$}", "variant");
    for c in REPORT_COLUMNS {
        let _ = write!(s, " {c:>10}");
    }
    s.push('\n');
    for (label, r) in rows {
        let _ = write!(s, "{label:<label_w$}");
        for (_, v) in r.columns() {
            let _ = write!(s, " {:>10}", cell(v));
        }
        s.push('\n');
    }
    s
}

/// `key=value` lines; undefined metrics are written as `null`.
pub fn key_values(r: &EvalReport) -> String {
    let mut s = String::new();
    for (k, v) in r.columns() {
        let _ = writeln!(s, "{k}={}", v.map_or("null".into(), |x| format!("{x}")));
    }
    let _ = writeln!(s, "n_samples={}", r.n_samples);
    let _ = writeln!(s, "threshold={}", r.threshold);
    let _ = writeln!(s, "flags={}", flags(r));
    s
}

pub fn to_json(r: &EvalReport) -> Value {
    let mut m = Map::new();
    for (k, v) in r.columns() {
        m.insert(k.into(), v.map_or(Value::Null, Value::from));
    }
    m.insert("n_samples".into(), r.n_samples.into());
    m.insert("threshold".into(), f64::from(r.threshold).into());
    m.insert("flags".into(), r.flags.iter().map(|f| f.name()).collect::<Vec<_>>().into());
    Value::Object(m)
}

/// Percent change `100 (m - ref) / ref`. Equal values give 0; otherwise a
/// zero or missing reference leaves the delta undefined.
pub fn percent_delta(m: Option<f64>, reference: Option<f64>) -> Option<f64> {
    let (m, r) = (m?, reference?);
    if m == r {
        Some(0.0)
    } else if r == 0.0 {
        None
    } else {
        Some(100.0 * (m - r) / r)
    }
}

/// Columns shown in the ablation tables.
pub const ABLATION_COLUMNS: [&str; 5] = ["precision", "recall", "f1", "abs_rel", "abs_rel_wd"];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub values: Vec<Option<f64>>,
    pub deltas: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub title: &'static str,
    pub reference: Variant,
    pub rows: Vec<AblationRow>,
}

/// The three comparison tables: correlation placement, input frame count
/// and skip connections.
pub const TABLE_LAYOUT: [(&str, Variant, &[Variant]); 3] = [
    (
        "correlation placement",
        Variant::UcorrDeep,
        &[Variant::UcorrPixel, Variant::UcorrShallow, Variant::UcorrDeep],
    ),
    (
        "input frames",
        Variant::Unet1f,
        &[Variant::Unet1f, Variant::Unet2f, Variant::Unet3f],
    ),
    (
        "skip connections",
        Variant::UcorrDeep,
        &[Variant::UcorrDeep, Variant::UcorrNoskip],
    ),
];

/// Builds every table whose variants all have results.
pub fn ablation_tables(results: &[(Variant, EvalReport)]) -> Vec<AblationTable> {
    let find = |v: Variant| results.iter().find(|r| r.0 == v).map(|r| &r.1);
    TABLE_LAYOUT
        .iter()
        .filter_map(|&(title, reference, variants)| {
            let ref_report = find(reference)?;
            let rows = variants
                .iter()
                .map(|&v| {
                    let r = find(v)?;
                    let values: Vec<Option<f64>> = ABLATION_COLUMNS.iter().map(|c| r.get(c)).collect();
                    let deltas = ABLATION_COLUMNS
                        .iter()
                        .zip(&values)
                        .map(|(c, &m)| percent_delta(m, ref_report.get(c)))
                        .collect();
                    Some(AblationRow { variant: v, values, deltas })
                })
                .collect::<Option<Vec<_>>>()?;
            Some(AblationTable { title, reference, rows })
        })
        .collect()
}

fn signed(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:+.1}%"),
        None => "n/a".into(),
    }
}

pub fn render_ablation_table(t: &AblationTable) -> String {
    let mut s = format!("{} (deltas vs {})\n", t.title, t.reference);
    let _ = write!(s, "{:<14}", "variant");
    for c in ABLATION_COLUMNS {
        let _ = write!(s, " {c:>10} {:>8}", "delta");
    }
    s.push('\n');
    for row in &t.rows {
        let _ = write!(s, "{:<14}", row.variant.name());
        for (v, d) in row.values.iter().zip(&row.deltas) {
            let _ = write!(s, " {:>10} {:>8}", cell(*v), signed(*d));
        }
        s.push('\n');
    }
    s
}

/// One line comparing the correlation model against the single-frame
/// baseline, or `None` if either is missing.
pub fn headline(results: &[(Variant, EvalReport)]) -> Option<String> {
    let find = |v: Variant| results.iter().find(|r| r.0 == v).map(|r| &r.1);
    let (u, b) = (find(Variant::UcorrDeep)?, find(Variant::Unet1f)?);
    let d = percent_delta(Some(u.iou), Some(b.iou));
    let direction = match u.iou.partial_cmp(&b.iou) {
        Some(std::cmp::Ordering::Greater) => "ucorr_deep ahead",
        Some(std::cmp::Ordering::Less) => "unet_1f ahead",
        _ => "tie",
    };
    Some(format!(
        "ucorr_deep vs unet_1f: iou {:.4} vs {:.4} ({}), f1 {:.4} vs {:.4}, abs_rel_wd {} vs {} [{direction}]",
        u.iou,
        b.iou,
        signed(d),
        u.f1,
        b.f1,
        cell(u.abs_rel_wd),
        cell(b.abs_rel_wd),
    ))
}

pub fn ablation_json(results: &[(Variant, EvalReport)], tables: &[AblationTable]) -> Value {
    let per_variant: Map<String, Value> = results
        .iter()
        .map(|(v, r)| (v.name().to_string(), to_json(r)))
        .collect();
    let tables: Vec<Value> = tables
        .iter()
        .map(|t| {
            json!({
                "title": t.title,
                "reference": t.reference.name(),
                "columns": ABLATION_COLUMNS,
                "rows": t.rows.iter().map(|r| json!({
                    "variant": r.variant.name(),
                    "values": r.values,
                    "deltas_percent": r.deltas,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({ "variants": per_variant, "tables": tables, "headline": headline(results) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(iou: f64, p: f64, r: f64, abs_rel: Option<f64>) -> EvalReport {
        EvalReport {
            iou,
            auc: Some(0.9),
            ap: None,
            precision: p,
            recall: r,
            f1: 2.0 * p * r / (p + r),
            abs_rel,
            depth_mae: Some(1.0),
            abs_rel_wd: Some(0.5),
            n_samples: 3,
            threshold: 0.5,
            flags: vec![],
        }
    }

    #[test]
    fn delta_arithmetic() {
        assert_eq!(percent_delta(Some(0.15), Some(0.1)).map(|d| (d * 1e9).round() / 1e9), Some(50.0));
        assert_eq!(percent_delta(Some(0.05), Some(0.1)).map(|d| (d * 1e9).round() / 1e9), Some(-50.0));
        assert_eq!(percent_delta(Some(0.0), Some(0.0)), Some(0.0));
        assert_eq!(percent_delta(Some(0.2), Some(0.0)), None);
        assert_eq!(percent_delta(None, Some(0.1)), None);
    }

    #[test]
    fn tables_have_expected_shapes_and_zero_reference_deltas() {
        let results: Vec<(Variant, EvalReport)> = Variant::ALL
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, report(0.1 + i as f64 * 0.01, 0.3 + i as f64 * 0.02, 0.4, Some(0.2))))
            .collect();
        let tables = ablation_tables(&results);
        assert_eq!(tables.iter().map(|t| t.rows.len()).collect::<Vec<_>>(), vec![3, 3, 2]);
        for t in &tables {
            let r = t.rows.iter().find(|r| r.variant == t.reference).unwrap();
            assert!(r.deltas.iter().all(|d| *d == Some(0.0)));
        }
        let text = render_ablation_table(&tables[1]);
        assert!(text.contains("unet_3f"));
        assert!(headline(&results).unwrap().starts_with("ucorr_deep vs unet_1f"));
    }

    #[test]
    fn kv_writes_null_for_undefined() {
        let r = report(0.1, 0.2, 0.3, None);
        let kv = key_values(&r);
        assert!(kv.contains("ap=null") && kv.contains("abs_rel=null") && kv.contains("flags=none"));
        let table = metrics_table(&[("x".into(), &r)]);
        let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().skip(1).collect();
        assert_eq!(header, REPORT_COLUMNS);
    }
}
