//! Flat tabular forms of the analysis results, for CSV output.
//!
//! Column sets are fixed per result type. Reals use Rust's shortest
//! round-trip formatting; absent values are empty cells.

use serde::Serialize;

use crate::audit::{AttributionGraph, AuditReport};
use crate::error::{LensError, Result};
use crate::metrics::MetricsReport;
use crate::query::{ClusterLabel, Comparison, DissectionRow, LabelAssignment, SearchHit};
use crate::vector::{ComponentId, Sign};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

fn real(v: f64) -> String {
    v.to_string()
}

fn opt_real(v: Option<f64>) -> String {
    v.map(real).unwrap_or_default()
}

fn sign(s: Sign) -> &'static str {
    match s {
        Sign::Positive => "positive",
        Sign::Negative => "negative",
    }
}

impl Table {
    fn new(columns: &[&'static str]) -> Self {
        Table {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let err = |e: csv::Error| LensError::InvalidArgument(format!("csv encoding failed: {e}"));
        w.write_record(&self.columns).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| LensError::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of UTF-8 cells is UTF-8"))
    }
}

fn id_cells(c: &ComponentId) -> [String; 4] {
    [c.key(), c.layer.clone(), c.index.to_string(), sign(c.sign).to_string()]
}

pub fn search_table(hits: &[SearchHit]) -> Table {
    let mut t = Table::new(&["rank", "component_id", "layer", "index", "sign", "score"]);
    for h in hits {
        let mut row = vec![h.rank.to_string()];
        row.extend(id_cells(&h.component));
        row.push(real(h.score));
        t.push(row);
    }
    t
}

pub fn label_table(assignments: &[LabelAssignment]) -> Table {
    let mut t = Table::new(&["component_id", "layer", "index", "sign", "label", "category", "alignment"]);
    for a in assignments {
        let mut row: Vec<String> = id_cells(&a.component).into();
        row.push(a.label.clone().unwrap_or_default());
        row.push(a.category.clone().unwrap_or_default());
        row.push(real(a.alignment));
        t.push(row);
    }
    t
}

pub fn dissection_table(rows: &[DissectionRow]) -> Table {
    let mut t = Table::new(&["layer", "group", "count", "relative_share"]);
    for r in rows {
        t.push(vec![r.layer.clone(), r.group.clone(), r.count.to_string(), real(r.relative_share)]);
    }
    t
}

pub fn comparison_table(c: &Comparison) -> Table {
    let mut t = Table::new(&["forward", "backward"]);
    t.push(vec![real(c.forward), real(c.backward)]);
    t
}

pub fn audit_table(report: &AuditReport) -> Table {
    let mut t = Table::new(&[
        "component_id",
        "layer",
        "index",
        "sign",
        "relevance",
        "a_valid",
        "a_spur",
        "best_valid_label",
        "best_spur_label",
        "bucket",
    ]);
    for r in &report.rows {
        let mut row: Vec<String> = id_cells(&r.component).into();
        row.extend([
            real(r.relevance),
            real(r.a_valid),
            real(r.a_spur),
            r.best_valid_label.clone().unwrap_or_default(),
            r.best_spur_label.clone().unwrap_or_default(),
            r.bucket.as_str().to_string(),
        ]);
        t.push(row);
    }
    t
}

/// One row per component, then one layer row whose `component_id` is the
/// layer name and which carries only `redundancy`.
pub fn metrics_table(report: &MetricsReport) -> Table {
    let mut t = Table::new(&["component_id", "clarity", "polysemanticity", "degenerate", "redundancy"]);
    for c in &report.components {
        t.push(vec![
            c.component.key(),
            opt_real(c.clarity),
            opt_real(c.polysemanticity),
            c.degenerate.to_string(),
            String::new(),
        ]);
    }
    t.push(vec![
        report.layer.clone(),
        String::new(),
        String::new(),
        String::new(),
        opt_real(report.redundancy),
    ]);
    t
}

pub fn projection_table(ids: &[ComponentId], coords: &[[f64; 2]]) -> Table {
    let mut t = Table::new(&["component_id", "x", "y"]);
    for (id, c) in ids.iter().zip(coords) {
        t.push(vec![id.key(), real(c[0]), real(c[1])]);
    }
    t
}

pub fn cluster_table(clusters: &[ClusterLabel]) -> Table {
    let mut t = Table::new(&["cluster", "size", "labels"]);
    for c in clusters {
        let labels: Vec<String> = c.labels.iter().map(|(l, a)| format!("{l}={a}")).collect();
        t.push(vec![c.cluster.to_string(), c.members.len().to_string(), labels.join(";")]);
    }
    t
}

pub fn graph_edge_table(g: &AttributionGraph) -> Table {
    let mut t = Table::new(&["upper_layer", "upper_group", "lower_layer", "lower_group", "weight"]);
    for e in &g.edges {
        t.push(vec![
            e.upper_layer.clone(),
            e.upper_group.clone(),
            e.lower_layer.clone(),
            e.lower_group.clone(),
            real(e.weight),
        ]);
    }
    t
}
