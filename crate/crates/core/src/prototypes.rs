//! Prototype selection: the real sample nearest to each centroid, and the
//! labels attached to source prototypes.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{read_json, write_json, Emb1, EmbeddingSet};
use crate::error::{Error, Result};
use crate::kmeans::{sq_dist, ClusterModel};

/// How a source prototype obtains its class label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// The label of the prototype sample itself.
    #[default]
    PrototypeSample,
    /// The most frequent label in the prototype's cluster, ties to the
    /// lowest class index.
    ClusterMajority,
}

/// Which samples may serve as the prototype of a cluster.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeScope {
    /// Any sample of the domain.
    #[default]
    Global,
    /// Only members of the cluster.
    ClusterMembers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub domain_name: String,
    pub dim: usize,
    pub indices: Vec<u32>,
    pub vectors: Vec<f32>,
    pub labels: Option<Vec<u32>>,
    pub label_source: LabelRule,
    pub majority_labels: Option<Vec<u32>>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn vector(&self, j: usize) -> &[f32] {
        &self.vectors[j * self.dim..(j + 1) * self.dim]
    }

    pub fn save(&self, json_path: &Path, emb_path: &Path, fingerprint: Option<&str>) -> Result<()> {
        Emb1 {
            rows: self.len(),
            dim: self.dim,
            vectors: self.vectors.clone(),
            labels: self.labels.clone(),
        }
        .write(emb_path)?;
        write_json(
            json_path,
            &PrototypeFile {
                fingerprint: fingerprint.map(str::to_owned),
                domain_name: self.domain_name.clone(),
                indices: self.indices.clone(),
                labels: self.labels.clone(),
                label_source: self.label_source,
                majority_labels: self.majority_labels.clone(),
            },
        )
    }

    pub fn load(json_path: &Path, emb_path: &Path) -> Result<Self> {
        let file: PrototypeFile = read_json(json_path)?;
        let raw = Emb1::read(emb_path)?;
        if raw.rows != file.indices.len() {
            return Err(Error::shape(file.indices.len(), raw.rows));
        }
        Ok(Self {
            domain_name: file.domain_name,
            dim: raw.dim,
            indices: file.indices,
            vectors: raw.vectors,
            labels: file.labels,
            label_source: file.label_source,
            majority_labels: file.majority_labels,
        })
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct PrototypeFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub(crate) fingerprint: Option<String>,
    domain_name: String,
    indices: Vec<u32>,
    labels: Option<Vec<u32>>,
    label_source: LabelRule,
    majority_labels: Option<Vec<u32>>,
}

fn check_model(set: &EmbeddingSet, model: &ClusterModel) -> Result<()> {
    if model.dim != set.dim() {
        return Err(Error::shape(set.dim(), model.dim));
    }
    if model.assignments.len() != set.len() {
        return Err(Error::shape(set.len(), model.assignments.len()));
    }
    Ok(())
}

/// Picks, for every centroid, the sample at minimal squared distance (ties
/// to the lowest row).
///
/// With [`PrototypeScope::Global`] the search covers the whole domain, so a
/// centroid may be served by a sample assigned to another cluster; such
/// cases are logged.
pub fn select_prototypes(
    set: &EmbeddingSet,
    model: &ClusterModel,
    scope: PrototypeScope,
) -> Result<PrototypeSet> {
    check_model(set, model)?;
    let members = match scope {
        PrototypeScope::Global => None,
        PrototypeScope::ClusterMembers => Some(model.all_members()),
    };
    let indices: Vec<u32> = (0..model.k)
        .into_par_iter()
        .map(|j| {
            let centroid = model.centroid(j);
            let mut best = (0usize, f64::INFINITY);
            let mut consider = |i: usize| {
                let d = sq_dist(set.row(i), centroid);
                if d < best.1 {
                    best = (i, d);
                }
            };
            match &members {
                None => (0..set.len()).for_each(&mut consider),
                Some(m) => m[j].iter().copied().for_each(&mut consider),
            }
            best.0 as u32
        })
        .collect();

    let outside = indices
        .iter()
        .enumerate()
        .filter(|&(j, &i)| model.assignments[i as usize] as usize != j)
        .count();
    if outside > 0 {
        log::warn!(
            "{}: {outside} of {} prototypes lie outside the cluster they represent",
            set.domain_name(),
            model.k
        );
    }

    let vectors = indices
        .iter()
        .flat_map(|&i| set.row(i as usize).iter().copied())
        .collect();
    Ok(PrototypeSet {
        domain_name: set.domain_name().to_owned(),
        dim: set.dim(),
        indices,
        vectors,
        labels: None,
        label_source: LabelRule::PrototypeSample,
        majority_labels: None,
    })
}

/// Most frequent label per cluster, ties to the lowest class index.
pub fn majority_labels(labels: &[u32], model: &ClusterModel) -> Vec<u32> {
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut hist = vec![0usize; model.k * classes];
    for (&a, &l) in model.assignments.iter().zip(labels) {
        hist[a as usize * classes + l as usize] += 1;
    }
    hist.chunks_exact(classes.max(1))
        .take(model.k)
        .map(|counts| {
            let mut best = 0;
            for (c, &count) in counts.iter().enumerate() {
                if count > counts[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

/// Attaches labels to prototypes according to `rule`; the per-cluster
/// majority is always recorded for diagnostics.
pub fn retrieve_labels(
    protos: &PrototypeSet,
    set: &EmbeddingSet,
    model: &ClusterModel,
    rule: LabelRule,
) -> Result<PrototypeSet> {
    check_model(set, model)?;
    let labels = set
        .labels()
        .ok_or_else(|| Error::MissingLabels(set.domain_name().to_owned()))?;
    if protos.len() != model.k {
        return Err(Error::shape(model.k, protos.len()));
    }
    let majority = majority_labels(labels, model);
    let chosen = match rule {
        LabelRule::PrototypeSample => protos
            .indices
            .iter()
            .map(|&i| labels[i as usize])
            .collect(),
        LabelRule::ClusterMajority => majority.clone(),
    };
    Ok(PrototypeSet {
        labels: Some(chosen),
        label_source: rule,
        majority_labels: Some(majority),
        ..protos.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(values: Vec<f32>, dim: usize, labels: Option<Vec<u32>>) -> EmbeddingSet {
        let n = values.len() / dim;
        EmbeddingSet::new("d", dim, values, labels, (0..n).map(|i| i.to_string()).collect(), None)
            .unwrap()
    }

    fn model(centroids: Vec<f32>, assignments: Vec<u32>) -> ClusterModel {
        ClusterModel {
            k: centroids.len(),
            dim: 1,
            centroids,
            assignments,
            inertia: 0.0,
            seed: 0,
            n_iter: 0,
        }
    }

    #[test]
    fn sample_at_centroid_is_selected() {
        let s = set(vec![0.0, 1.0, 2.0, 10.0], 1, None);
        let m = model(vec![1.0, 10.0], vec![0, 0, 0, 1]);
        let p = select_prototypes(&s, &m, PrototypeScope::Global).unwrap();
        assert_eq!(p.indices, vec![1, 3]);
        assert_eq!(p.vectors, vec![1.0, 10.0]);
        assert!(p.labels.is_none());
    }

    #[test]
    fn equidistant_samples_pick_lower_index() {
        let s = set(vec![2.0, 0.0, 1.0], 1, None);
        let m = model(vec![1.0, 1.0, 1.0], vec![0, 1, 2]);
        let p = select_prototypes(&s, &m, PrototypeScope::Global).unwrap();
        assert_eq!(p.indices[0], 2);
        let s = set(vec![2.0, 0.0, 5.0], 1, None);
        let p = select_prototypes(&s, &m, PrototypeScope::Global).unwrap();
        assert_eq!(p.indices[0], 0);
    }

    #[test]
    fn scope_restricts_search_to_members() {
        // Centroid 0 sits closer to a member of cluster 1.
        let s = set(vec![0.0, 3.0, 4.0, 10.0], 1, None);
        let m = model(vec![3.9, 7.0], vec![0, 0, 1, 1]);
        let global = select_prototypes(&s, &m, PrototypeScope::Global).unwrap();
        assert_eq!(global.indices[0], 2);
        let local = select_prototypes(&s, &m, PrototypeScope::ClusterMembers).unwrap();
        assert_eq!(local.indices[0], 1);
    }

    #[test]
    fn uniform_cluster_label_under_both_rules() {
        let s = set(vec![0.0, 0.1, 0.2], 1, Some(vec![7, 7, 7]));
        let m = model(vec![0.1], vec![0, 0, 0]);
        let p = select_prototypes(&s, &m, PrototypeScope::Global).unwrap();
        for rule in [LabelRule::PrototypeSample, LabelRule::ClusterMajority] {
            let l = retrieve_labels(&p, &s, &m, rule).unwrap();
            assert_eq!(l.labels, Some(vec![7]));
            assert_eq!(l.label_source, rule);
        }
    }

    #[test]
    fn rules_disagree_when_prototype_is_in_minority() {
        let s = set(vec![0.0, 1.0, 2.0, 3.0], 1, Some(vec![3, 2, 3, 3]));
        let m = model(vec![1.0], vec![0, 0, 0, 0]);
        let p = select_prototypes(&s, &m, PrototypeScope::Global).unwrap();
        assert_eq!(p.indices, vec![1]);
        let sample = retrieve_labels(&p, &s, &m, LabelRule::PrototypeSample).unwrap();
        assert_eq!(sample.labels, Some(vec![2]));
        assert_eq!(sample.majority_labels, Some(vec![3]));
        let major = retrieve_labels(&p, &s, &m, LabelRule::ClusterMajority).unwrap();
        assert_eq!(major.labels, Some(vec![3]));
    }

    #[test]
    fn majority_ties_to_lowest_class() {
        let m = model(vec![0.0], vec![0, 0, 0, 0]);
        assert_eq!(majority_labels(&[5, 1, 5, 1], &m), vec![1]);
    }

    #[test]
    fn unlabeled_set_is_an_error() {
        let s = set(vec![0.0, 1.0], 1, None);
        let m = model(vec![0.5], vec![0, 0]);
        let p = select_prototypes(&s, &m, PrototypeScope::Global).unwrap();
        assert!(matches!(
            retrieve_labels(&p, &s, &m, LabelRule::PrototypeSample),
            Err(Error::MissingLabels(_))
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let s = set(vec![0.0, 1.0], 2, None);
        let m = model(vec![0.5], vec![0]);
        assert!(matches!(
            select_prototypes(&s, &m, PrototypeScope::Global),
            Err(Error::Shape { .. })
        ));
    }
}
