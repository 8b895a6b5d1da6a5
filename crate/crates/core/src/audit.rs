//! Alignment audits against valid and spurious concept sets, labelling
//! faithfulness, output separability and attribution graphs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::probe::{ProbeSet, Validity};
use crate::query::{LabelAssignment, UNLABELLED};
use crate::store::{LayerRef, LensDb};
use crate::vector::{AlignmentProbe, ComponentId, ComponentKey, Sign};

/// Floor of the default relevance filter.
pub const RELEVANCE_FLOOR: f64 = 0.01;
/// Default node threshold for attribution graphs.
pub const DEFAULT_NODE_THRESHOLD: f64 = 0.01;

/// Default relevance threshold for a layer of `n` components: the larger of
/// 1 % and `5/n` %.
pub fn default_relevance_threshold(n: usize) -> f64 {
    RELEVANCE_FLOOR.max(0.05 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    ValidOnly,
    Spurious,
    Both,
    Unexpected,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [
        Bucket::ValidOnly,
        Bucket::Spurious,
        Bucket::Both,
        Bucket::Unexpected,
    ];

    /// Positive alignment counts; zero does not.
    pub fn classify(a_valid: f64, a_spur: f64) -> Bucket {
        match (a_valid > 0.0, a_spur > 0.0) {
            (true, false) => Bucket::ValidOnly,
            (false, true) => Bucket::Spurious,
            (true, true) => Bucket::Both,
            (false, false) => Bucket::Unexpected,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::ValidOnly => "valid_only",
            Bucket::Spurious => "spurious",
            Bucket::Both => "both",
            Bucket::Unexpected => "unexpected",
        }
    }
}

fn relevance_rows<'a>(
    db: &'a LensDb,
    target: &str,
    layer: &str,
    threshold: Option<f64>,
) -> Result<(LayerRef<'a>, f64, Vec<(usize, f64)>)> {
    let layer = db.layer(layer)?;
    let t = db.manifest().target_index(target)?;
    if layer.data.relevance.is_none() {
        return Err(LensError::MissingRelevance(layer.name().to_string()));
    }
    let threshold = threshold.unwrap_or_else(|| default_relevance_threshold(layer.decl.n_components));
    if !threshold.is_finite() {
        return Err(LensError::InvalidArgument("relevance threshold must be finite".into()));
    }
    let rows = (0..layer.rows())
        .filter_map(|row| {
            let r = f64::from(layer.relevance_row(row).expect("relevance present")[t]);
            (r >= threshold).then_some((row, r))
        })
        .collect();
    Ok((layer, threshold, rows))
}

/// Components of `layer` whose maximal relevance for `target` reaches the
/// threshold (default: [`default_relevance_threshold`]).
pub fn relevance_filter(
    db: &LensDb,
    target: &str,
    layer: &str,
    threshold: Option<f64>,
) -> Result<Vec<ComponentId>> {
    let (layer, _, rows) = relevance_rows(db, target, layer, threshold)?;
    Ok(rows.into_iter().map(|(row, _)| layer.component_id(row)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub component: ComponentId,
    pub a_valid: f64,
    pub a_spur: f64,
    pub best_valid_label: Option<String>,
    pub best_spur_label: Option<String>,
    pub relevance: f64,
    pub bucket: Bucket,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BucketTotals<T> {
    pub valid_only: T,
    pub spurious: T,
    pub both: T,
    pub unexpected: T,
}

impl<T> BucketTotals<T> {
    pub fn get_mut(&mut self, b: Bucket) -> &mut T {
        match b {
            Bucket::ValidOnly => &mut self.valid_only,
            Bucket::Spurious => &mut self.spurious,
            Bucket::Both => &mut self.both,
            Bucket::Unexpected => &mut self.unexpected,
        }
    }

    pub fn get(&self, b: Bucket) -> &T {
        match b {
            Bucket::ValidOnly => &self.valid_only,
            Bucket::Spurious => &self.spurious,
            Bucket::Both => &self.both,
            Bucket::Unexpected => &self.unexpected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditAggregates {
    pub counts: BucketTotals<usize>,
    /// Share of total relevance per bucket; all zero when no row carries
    /// positive relevance.
    pub relevance_share: BucketTotals<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub target: String,
    pub layer: String,
    pub probe_set: String,
    pub threshold: f64,
    /// Relevance-filtered rows, most relevant first.
    pub rows: Vec<AuditRow>,
    pub aggregates: AuditAggregates,
}

impl AuditReport {
    /// Components aligned to spurious concepts only; candidates for pruning.
    pub fn prune_candidates(&self) -> Vec<&ComponentId> {
        self.rows
            .iter()
            .filter(|r| r.bucket == Bucket::Spurious)
            .map(|r| &r.component)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditOptions {
    /// Relevance threshold; `None` applies the default rule.
    pub threshold: Option<f64>,
    /// Audit even though the probe set has no null embedding.
    pub allow_missing_null: bool,
}

/// Scores every relevance-filtered component of `layer` against the valid
/// and spurious concepts of `probes`.
pub fn audit(
    db: &LensDb,
    probes: &ProbeSet,
    target: &str,
    layer: &str,
    options: AuditOptions,
) -> Result<AuditReport> {
    probes.validate(db.dim())?;
    if probes.null_embedding.is_none() && !options.allow_missing_null {
        return Err(LensError::MissingNull(probes.name.clone()));
    }
    let prepare = |validity| -> Result<Vec<(&str, AlignmentProbe<'_>)>> {
        probes
            .concepts_with(validity)
            .map(|c| Ok((c.label.as_str(), AlignmentProbe::new(&c.embedding, probes.null())?)))
            .collect()
    };
    let valid = prepare(Validity::Valid)?;
    let spurious = prepare(Validity::Spurious)?;
    if valid.is_empty() {
        return Err(LensError::NoValidConcepts);
    }
    if spurious.is_empty() {
        return Err(LensError::NoSpuriousConcepts);
    }
    let (layer_ref, threshold, filtered) = relevance_rows(db, target, layer, options.threshold)?;

    let best = |set: &[(&str, AlignmentProbe<'_>)], theta: &[f32]| -> Result<(f64, String)> {
        let mut best = (f64::NEG_INFINITY, "");
        for (label, p) in set {
            let a = p.score(theta)?;
            if a > best.0 {
                best = (a, label);
            }
        }
        Ok((best.0, best.1.to_string()))
    };

    let mut rows = filtered
        .into_iter()
        .map(|(row, relevance)| {
            let theta = layer_ref.theta(row);
            let (a_valid, valid_label) = best(&valid, theta)?;
            let (a_spur, spur_label) = best(&spurious, theta)?;
            Ok(AuditRow {
                component: layer_ref.component_id(row),
                a_valid,
                a_spur,
                best_valid_label: Some(valid_label),
                best_spur_label: Some(spur_label),
                relevance,
                bucket: Bucket::classify(a_valid, a_spur),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        b.relevance
            .total_cmp(&a.relevance)
            .then(a.component.sign.cmp(&b.component.sign))
            .then(a.component.index.cmp(&b.component.index))
    });

    let mut counts = BucketTotals::<usize>::default();
    let mut mass = BucketTotals::<f64>::default();
    for r in &rows {
        *counts.get_mut(r.bucket) += 1;
        *mass.get_mut(r.bucket) += r.relevance;
    }
    let total: f64 = Bucket::ALL.iter().map(|&b| *mass.get(b)).sum();
    let mut relevance_share = BucketTotals::<f64>::default();
    if total > 0.0 {
        for b in Bucket::ALL {
            *relevance_share.get_mut(b) = mass.get(b) / total;
        }
    }
    Ok(AuditReport {
        target: target.to_string(),
        layer: layer.to_string(),
        probe_set: probes.name.clone(),
        threshold,
        rows,
        aggregates: AuditAggregates {
            counts,
            relevance_share,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiReport {
    /// One score per assignment, in input order.
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; absent for one assignment.
    pub std_error: Option<f64>,
}

/// Min-max normalised response of each assigned (neuron, concept) pair.
///
/// `responses[i][k]` is neuron `i`'s mean activation on synthetic examples
/// of concept `k`.
pub fn label_faithfulness_phi(
    responses: &[Vec<f64>],
    assignments: &[(usize, usize)],
) -> Result<PhiReport> {
    if assignments.is_empty() {
        return Err(LensError::EmptySet("no labelling assignments to score"));
    }
    let scores = assignments
        .iter()
        .map(|&(neuron, concept)| {
            let row = responses.get(neuron).ok_or_else(|| {
                LensError::InvalidArgument(format!("neuron {neuron} has no response row"))
            })?;
            let value = *row.get(concept).ok_or_else(|| {
                LensError::InvalidArgument(format!("concept {concept} is not a response column"))
            })?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(LensError::NonFinite {
                    context: format!("response row {neuron}"),
                });
            }
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max <= min {
                return Err(LensError::DegenerateResponse { row: neuron });
            }
            Ok(((value - min) / (max - min)).clamp(0.0, 1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std_error = (scores.len() > 1).then(|| {
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        var.sqrt() / n.sqrt()
    });
    Ok(PhiReport {
        scores,
        mean,
        std_error,
    })
}

/// Exact Mann-Whitney tally: twice the number of winning pairs (ties count
/// one) and twice the number of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AucCounts {
    pub wins_x2: u64,
    pub pairs_x2: u64,
}

impl AucCounts {
    pub fn value(&self) -> f64 {
        self.wins_x2 as f64 / self.pairs_x2 as f64
    }
}

/// Rank-based pair tally for [`separability_auc`].
pub fn separability_counts(positive: &[f64], negative: &[f64]) -> Result<AucCounts> {
    if positive.is_empty() || negative.is_empty() {
        return Err(LensError::EmptySet("separability needs both output sets"));
    }
    if positive.iter().chain(negative).any(|v| !v.is_finite()) {
        return Err(LensError::NonFinite {
            context: "separability input".into(),
        });
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&v| (v, true))
        .chain(negative.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut wins_x2 = 0u64;
    let mut negatives_below = 0u64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut p, mut q) = (0u64, 0u64);
        // -0.0 and 0.0 compare equal as scores
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        wins_x2 += p * (2 * negatives_below + q);
        negatives_below += q;
        i = j;
    }
    Ok(AucCounts {
        wins_x2,
        pairs_x2: 2 * positive.len() as u64 * negative.len() as u64,
    })
}

/// Probability that a positive output exceeds a negative one (ties ½).
pub fn separability_auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    separability_counts(positive, negative).map(|c| c.value())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphNode {
    pub layer: String,
    pub group: String,
    pub members: Vec<String>,
    pub max_relevance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphEdge {
    pub upper_layer: String,
    pub upper_group: String,
    pub lower_layer: String,
    pub lower_group: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionGraph {
    pub target: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// Groups components by label and sums relevance flows between groups of
/// adjacent layers.
///
/// Members are the labelled components plus every component touched by an
/// edge for `target`; components without a label form the `?` group of
/// their layer. Groups whose best member relevance is below
/// `node_threshold` are dropped together with their edges.
pub fn build_attribution_graph(
    db: &LensDb,
    assignments: &[LabelAssignment],
    target: &str,
    node_threshold: f64,
) -> Result<AttributionGraph> {
    let t = db.manifest().target_index(target)?;
    let layers: Vec<LayerRef<'_>> = db.layers().collect();
    if layers.iter().all(|l| l.data.edges.is_none()) {
        return Err(LensError::MissingEdges);
    }
    let position = |name: &str| layers.iter().position(|l| l.name() == name);

    let mut groups: HashMap<ComponentKey, String> = HashMap::new();
    let mut members: BTreeMap<(usize, usize, Sign), ComponentKey> = BTreeMap::new();
    let mut add = |key: &ComponentKey, group: Option<&str>| -> Result<()> {
        let pos = position(&key.layer).ok_or_else(|| LensError::UnknownLayer(key.layer.clone()))?;
        members.insert((pos, key.index, key.sign), key.clone());
        let entry = groups.entry(key.clone()).or_insert_with(|| UNLABELLED.to_string());
        if let Some(g) = group {
            *entry = g.to_string();
        }
        Ok(())
    };
    for a in assignments {
        let key = ComponentKey {
            layer: a.component.layer.clone(),
            index: a.component.index,
            sign: a.component.sign,
        };
        add(&key, Some(a.label.as_deref().unwrap_or(UNLABELLED)))?;
    }
    let edges: Vec<_> = layers
        .iter()
        .filter_map(|l| l.data.edges.as_deref())
        .flatten()
        .filter(|e| e.target == target)
        .collect();
    for e in &edges {
        add(&e.upper, None)?;
        add(&e.lower, None)?;
    }

    // (layer position, group) -> (members, max relevance)
    let mut nodes: BTreeMap<(usize, String), (Vec<String>, f64)> = BTreeMap::new();
    for ((pos, _, _), key) in &members {
        let layer = &layers[*pos];
        if layer.data.relevance.is_none() {
            return Err(LensError::MissingRelevance(layer.name().to_string()));
        }
        let row = layer
            .row_of(key.index, key.sign)
            .ok_or_else(|| LensError::UnknownComponent(format!("{}:{}", key.layer, key.index)))?;
        let relevance = f64::from(layer.relevance_row(row).expect("relevance present")[t]);
        let node = nodes
            .entry((*pos, groups[key].clone()))
            .or_insert_with(|| (Vec::new(), f64::NEG_INFINITY));
        node.0.push(layer.key_of(row).to_string());
        node.1 = node.1.max(relevance);
    }
    nodes.retain(|_, (_, rel)| *rel >= node_threshold);

    let mut flows: BTreeMap<(usize, String, usize, String), f64> = BTreeMap::new();
    for e in &edges {
        let (up, low) = (position(&e.upper.layer), position(&e.lower.layer));
        let (Some(up), Some(low)) = (up, low) else { continue };
        if up != low + 1 {
            continue;
        }
        let ug = groups[&e.upper].clone();
        let lg = groups[&e.lower].clone();
        if !nodes.contains_key(&(up, ug.clone())) || !nodes.contains_key(&(low, lg.clone())) {
            continue;
        }
        *flows.entry((up, ug, low, lg)).or_default() += e.weight;
    }

    let mut node_list: Vec<GraphNode> = nodes
        .into_iter()
        .map(|((pos, group), (members, max_relevance))| GraphNode {
            layer: layers[pos].name().to_string(),
            group,
            members,
            max_relevance,
        })
        .collect();
    node_list.sort_by(|a, b| {
        let pa = position(&a.layer);
        let pb = position(&b.layer);
        pb.cmp(&pa)
            .then(b.max_relevance.total_cmp(&a.max_relevance))
            .then(a.group.cmp(&b.group))
    });
    let edge_list = flows
        .into_iter()
        .rev()
        .map(|((up, ug, low, lg), weight)| GraphEdge {
            upper_layer: layers[up].name().to_string(),
            upper_group: ug,
            lower_layer: layers[low].name().to_string(),
            lower_group: lg,
            weight,
        })
        .collect();
    Ok(AttributionGraph {
        target: target.to_string(),
        nodes: node_list,
        edges: edge_list,
    })
}

impl AttributionGraph {
    pub fn nodes_tsv(&self) -> String {
        let mut out = String::from("layer\tgroup\tmax_relevance\tmembers\n");
        for n in &self.nodes {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                n.layer,
                n.group,
                n.max_relevance,
                n.members.join(",")
            );
        }
        out
    }

    pub fn edges_tsv(&self) -> String {
        let mut out = String::from("upper_layer\tupper_group\tlower_layer\tlower_group\tweight\n");
        for e in &self.edges {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                e.upper_layer, e.upper_group, e.lower_layer, e.lower_group, e.weight
            );
        }
        out
    }

    /// Graphviz rendering: one cluster per layer, edge pen width by weight.
    pub fn to_dot(&self) -> String {
        let id = |layer: &str, group: &str| format!("{:?}", format!("{layer}/{group}"));
        let mut out = format!("digraph {:?} {{\n  rankdir=TB;\n", self.target);
        let mut layers: Vec<&str> = Vec::new();
        for n in &self.nodes {
            if !layers.contains(&n.layer.as_str()) {
                layers.push(&n.layer);
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            let _ = writeln!(out, "  subgraph cluster_{i} {{\n    label={layer:?};");
            for n in self.nodes.iter().filter(|n| n.layer == *layer) {
                let _ = writeln!(
                    out,
                    "    {} [label={:?}];",
                    id(&n.layer, &n.group),
                    format!("{}\n{:.3}", n.group, n.max_relevance)
                );
            }
            out.push_str("  }\n");
        }
        let max = self
            .edges
            .iter()
            .map(|e| e.weight.abs())
            .fold(0.0f64, f64::max);
        for e in &self.edges {
            let width = if max > 0.0 { 0.5 + 4.5 * e.weight.abs() / max } else { 1.0 };
            let _ = writeln!(
                out,
                "  {} -> {} [label=\"{:.3}\", penwidth={:.2}];",
                id(&e.upper_layer, &e.upper_group),
                id(&e.lower_layer, &e.lower_group),
                e.weight,
                width
            );
        }
        out.push_str("}\n");
        out
    }
}
