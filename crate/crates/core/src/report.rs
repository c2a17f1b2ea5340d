//! Nearest-prototype explanations for individual queries, as JSON-ready
//! records and a static HTML page.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingSet;
use crate::error::{Error, Result};
use crate::kmeans::sq_dist;
use crate::mapping::predict;
use crate::prototypes::PrototypeSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub cluster: u32,
    pub sample_id: String,
    pub label: u32,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainNeighbors {
    pub domain: String,
    /// Ascending by distance.
    pub neighbors: Vec<Neighbor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborReport {
    pub query_id: String,
    pub query_domain: String,
    pub true_label: Option<u32>,
    pub predicted_label: u32,
    /// The query's own domain first, then the other domain.
    pub neighbors: Vec<DomainNeighbors>,
    /// Set when `top_k` exceeded a domain's prototype count.
    pub truncated: bool,
}

/// Prototypes of one domain together with the label table used for them.
#[derive(Clone, Copy)]
pub struct ReportDomain<'a> {
    pub set: &'a EmbeddingSet,
    pub protos: &'a PrototypeSet,
    pub labels: &'a [u32],
}

#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    pub id: &'a str,
    pub vector: &'a [f32],
    pub true_label: Option<u32>,
}

fn nearest_k(query: &[f32], domain: &ReportDomain<'_>, top_k: usize) -> Vec<Neighbor> {
    let mut order: Vec<(f64, usize)> = (0..domain.protos.len())
        .map(|j| (sq_dist(query, domain.protos.vector(j)), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order
        .into_iter()
        .take(top_k)
        .map(|(d, j)| Neighbor {
            cluster: j as u32,
            sample_id: domain.set.sample_ids()[domain.protos.indices[j] as usize].clone(),
            label: domain.labels[j],
            distance: d.sqrt(),
        })
        .collect()
}

/// The `top_k` nearest prototypes of `query` in its own domain and in the
/// other one, by Euclidean distance in the shared embedding space.
pub fn nearest_prototype_report(
    query: Query<'_>,
    own: ReportDomain<'_>,
    other: ReportDomain<'_>,
    top_k: usize,
) -> Result<NeighborReport> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be positive".into()));
    }
    for d in [&own, &other] {
        if d.protos.dim != query.vector.len() {
            return Err(Error::shape(d.protos.dim, query.vector.len()));
        }
        if d.labels.len() != d.protos.len() {
            return Err(Error::shape(d.protos.len(), d.labels.len()));
        }
    }
    let prediction = predict(query.id, query.vector, own.protos, own.labels)?;
    let truncated = top_k > own.protos.len() || top_k > other.protos.len();
    let neighbors = [own, other]
        .iter()
        .map(|d| DomainNeighbors {
            domain: d.set.domain_name().to_owned(),
            neighbors: nearest_k(query.vector, d, top_k),
        })
        .collect();
    Ok(NeighborReport {
        query_id: query.id.to_owned(),
        query_domain: own.set.domain_name().to_owned(),
        true_label: query.true_label,
        predicted_label: prediction.predicted_label,
        neighbors,
        truncated,
    })
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn sample_cell(sample_id: &str, image_root: Option<&Path>) -> String {
    match image_root.map(|root| root.join(sample_id)) {
        Some(path) if path.is_file() => format!(
            "<img src=\"{}\" alt=\"{}\"><br>{}",
            escape(&path.to_string_lossy()),
            escape(sample_id),
            escape(sample_id)
        ),
        _ => escape(sample_id),
    }
}

const STYLE: &str = "body{font-family:sans-serif;margin:1.5em}\
table{border-collapse:collapse;margin-bottom:1.5em}\
td,th{border:1px solid #bbb;padding:4px 8px;vertical-align:top;font-size:0.9em}\
img{max-width:128px;max-height:128px}\
.wrong{color:#b00}";

/// Renders reports as one self-contained HTML page. Samples resolve to
/// thumbnails under `image_root` when such a file exists and fall back to
/// text otherwise.
pub fn emit_html(reports: &[NeighborReport], image_root: Option<&Path>) -> String {
    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">");
    html.push_str("<title>Nearest prototypes</title>");
    let _ = writeln!(html, "<style>{STYLE}</style></head><body>");
    html.push_str("<h1>Nearest prototypes</h1>\n");
    if reports.is_empty() {
        html.push_str("<p>No queries to report.</p>\n");
    }
    for r in reports {
        let wrong = r.true_label.is_some_and(|t| t != r.predicted_label);
        let _ = writeln!(
            html,
            "<h2{}>{} <small>({})</small></h2>",
            if wrong { " class=\"wrong\"" } else { "" },
            escape(&r.query_id),
            escape(&r.query_domain)
        );
        let truth = r.true_label.map_or_else(|| "unknown".to_owned(), |t| t.to_string());
        let _ = writeln!(
            html,
            "<p>true label: {truth}; predicted: {}{}</p>",
            r.predicted_label,
            if r.truncated { "; fewer prototypes than requested" } else { "" }
        );
        html.push_str("<table><tr><th>query</th>");
        for d in &r.neighbors {
            let _ = write!(html, "<th colspan=\"{}\">{}</th>", d.neighbors.len().max(1), escape(&d.domain));
        }
        html.push_str("</tr>\n<tr>");
        let _ = write!(html, "<td>{}</td>", sample_cell(&r.query_id, image_root));
        for d in &r.neighbors {
            if d.neighbors.is_empty() {
                html.push_str("<td></td>");
            }
            for n in &d.neighbors {
                let _ = write!(
                    html,
                    "<td>{}<br>cluster {} · label {}<br>d = {:.4}</td>",
                    sample_cell(&n.sample_id, image_root),
                    n.cluster,
                    n.label,
                    n.distance
                );
            }
        }
        html.push_str("</tr></table>\n");
    }
    html.push_str("</body></html>\n");
    html
}
