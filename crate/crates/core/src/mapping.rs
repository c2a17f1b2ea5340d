//! Label transfer between domains and nearest-prototype classification.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{DistanceMatrix, Metric};
use crate::embeddings::{read_json, write_json, EmbeddingSet};
use crate::error::{Error, Result};
use crate::kmeans::nearest;
use crate::prototypes::PrototypeSet;

/// Target cluster → closest source cluster, with the labels carried over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMapping {
    pub target_to_source: Vec<u32>,
    pub target_labels: Vec<u32>,
    pub metric: Metric,
}

impl DomainMapping {
    pub fn save(&self, path: &Path, fingerprint: Option<&str>) -> Result<()> {
        write_json(
            path,
            &MappingFile {
                fingerprint: fingerprint.map(str::to_owned),
                mapping: self.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(read_json::<MappingFile>(path)?.mapping)
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct MappingFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub(crate) fingerprint: Option<String>,
    #[serde(flatten)]
    mapping: DomainMapping,
}

/// For every target cluster, the source cluster at minimal distance (ties
/// to the lowest source index) and its label.
pub fn closest_mapping(d: &DistanceMatrix, source_labels: &[u32]) -> Result<DomainMapping> {
    if source_labels.len() != d.k_source {
        return Err(Error::shape(d.k_source, source_labels.len()));
    }
    if d.values.len() != d.k_source * d.k_target {
        return Err(Error::shape(d.k_source * d.k_target, d.values.len()));
    }
    if let Some(c) = d.values.iter().position(|v| v.is_nan()) {
        return Err(Error::Validation(format!(
            "NaN distance at cell ({}, {})",
            c / d.k_target,
            c % d.k_target
        )));
    }
    let target_to_source: Vec<u32> = (0..d.k_target)
        .map(|j| {
            let mut best = 0;
            for i in 1..d.k_source {
                if d.get(i, j) < d.get(best, j) {
                    best = i;
                }
            }
            best as u32
        })
        .collect();
    let target_labels = target_to_source
        .iter()
        .map(|&i| source_labels[i as usize])
        .collect();
    Ok(DomainMapping {
        target_to_source,
        target_labels,
        metric: d.metric,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: String,
    pub predicted_label: u32,
    pub nearest_prototype_index: u32,
    /// Euclidean (not squared) distance to the nearest prototype.
    pub distance: f64,
}

/// Label of the nearest prototype by squared L2, ties to the lowest index.
///
/// The same routine serves both domains: pass the source label table for
/// source queries and the transferred table for target queries.
pub fn predict(query_id: &str, query: &[f32], protos: &PrototypeSet, labels: &[u32]) -> Result<Prediction> {
    if labels.len() != protos.len() {
        return Err(Error::shape(protos.len(), labels.len()));
    }
    if query.len() != protos.dim {
        return Err(Error::shape(protos.dim, query.len()));
    }
    let (j, sq) = nearest(query, &protos.vectors, protos.dim);
    Ok(Prediction {
        query_id: query_id.to_owned(),
        predicted_label: labels[j],
        nearest_prototype_index: j as u32,
        distance: sq.sqrt(),
    })
}

/// [`predict`] for every sample of `set`, in row order.
pub fn predict_set(set: &EmbeddingSet, protos: &PrototypeSet, labels: &[u32]) -> Result<Vec<Prediction>> {
    (0..set.len())
        .into_par_iter()
        .map(|i| predict(&set.sample_ids()[i], set.row(i), protos, labels))
        .collect()
}

/// Fraction of predictions matching `truth`.
pub fn accuracy(predictions: &[Prediction], truth: &[u32]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::shape(truth.len(), predictions.len()));
    }
    if truth.is_empty() {
        return Err(Error::Precondition("accuracy of an empty set".into()));
    }
    let correct = predictions
        .iter()
        .zip(truth)
        .filter(|(p, &t)| p.predicted_label == t)
        .count();
    Ok(correct as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::LabelRule;

    fn matrix(ks: usize, kt: usize, values: Vec<f64>) -> DistanceMatrix {
        DistanceMatrix {
            k_source: ks,
            k_target: kt,
            values,
            metric: Metric::L2Centroid,
            sinkhorn_params: None,
            converged_cells: ks * kt,
        }
    }

    fn protos(vectors: Vec<f32>, dim: usize) -> PrototypeSet {
        let k = vectors.len() / dim;
        PrototypeSet {
            domain_name: "d".into(),
            dim,
            indices: (0..k as u32).collect(),
            vectors,
            labels: None,
            label_source: LabelRule::PrototypeSample,
            majority_labels: None,
        }
    }

    #[test]
    fn unique_zero_per_column() {
        let d = matrix(3, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0, 2.0, 3.0, 0.0]);
        let m = closest_mapping(&d, &[10, 11, 12]).unwrap();
        assert_eq!(m.target_to_source, vec![1, 0, 2]);
        assert_eq!(m.target_labels, vec![11, 10, 12]);
    }

    #[test]
    fn tied_minimum_takes_lower_row() {
        let mut values = vec![5.0; 5];
        values[1] = 0.5;
        values[4] = 0.5;
        let d = matrix(5, 1, values);
        assert_eq!(closest_mapping(&d, &[0, 1, 2, 3, 4]).unwrap().target_to_source, vec![1]);
    }

    #[test]
    fn nan_cell_named() {
        let d = matrix(2, 2, vec![0.0, 1.0, f64::NAN, 2.0]);
        let err = closest_mapping(&d, &[0, 1]).unwrap_err();
        assert!(err.to_string().contains("(1, 0)"), "{err}");
    }

    #[test]
    fn label_length_checked() {
        let d = matrix(2, 1, vec![0.0, 1.0]);
        assert!(matches!(closest_mapping(&d, &[0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn query_on_prototype() {
        let p = protos(vec![0.0, 0.0, 1.0, 1.0, 5.0, 5.0, 3.0, 4.0], 2);
        let pred = predict("q", &[3.0, 4.0], &p, &[9, 8, 7, 6]).unwrap();
        assert_eq!(pred.predicted_label, 6);
        assert_eq!(pred.nearest_prototype_index, 3);
        assert_eq!(pred.distance, 0.0);
    }

    #[test]
    fn label_table_substitution() {
        let p = protos(vec![0.0, 10.0], 1);
        let source = predict("q", &[1.0], &p, &[4, 5]).unwrap();
        let target = predict("q", &[1.0], &p, &[7, 5]).unwrap();
        assert_eq!(source.nearest_prototype_index, target.nearest_prototype_index);
        assert_eq!((source.predicted_label, target.predicted_label), (4, 7));
        assert_eq!(source.distance, 1.0);
    }

    #[test]
    fn predict_shape_errors() {
        let p = protos(vec![0.0, 10.0], 1);
        assert!(matches!(predict("q", &[1.0, 2.0], &p, &[0, 1]), Err(Error::Shape { .. })));
        assert!(matches!(predict("q", &[1.0], &p, &[0]), Err(Error::Shape { .. })));
    }
}
