//! The full adaptation pipeline for one (source, target, seed) triple,
//! held in memory.

use serde::{Deserialize, Serialize};

use crate::distance::{build_distance_matrix, DistanceMatrix, DistanceSettings, DomainClusters, L2On, Metric};
use crate::embeddings::EmbeddingSet;
use crate::error::{Error, Result};
use crate::kmeans::{fit_kmeans, ClusterModel, KMeansConfig};
use crate::mapping::{closest_mapping, predict_set, DomainMapping, Prediction};
use crate::prototypes::{retrieve_labels, select_prototypes, LabelRule, PrototypeScope, PrototypeSet};
use crate::sinkhorn::SinkhornParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansSettings {
    pub n_init: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansSettings {
    fn default() -> Self {
        let d = KMeansConfig::new(1, 0);
        Self {
            n_init: d.n_init,
            max_iter: d.max_iter,
            tol: d.tol,
        }
    }
}

/// Everything that shapes a pipeline run apart from its inputs and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Clusters per class; k = clusters_per_class × num_classes.
    pub clusters_per_class: usize,
    /// Inferred from the source domain when absent.
    pub num_classes: Option<usize>,
    pub metric: Metric,
    pub l2_on: L2On,
    pub label_rule: LabelRule,
    pub prototype_scope: PrototypeScope,
    pub kmeans: KMeansSettings,
    pub sinkhorn: SinkhornParams,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            clusters_per_class: 5,
            num_classes: None,
            metric: Metric::L2Centroid,
            l2_on: L2On::Centroids,
            label_rule: LabelRule::PrototypeSample,
            prototype_scope: PrototypeScope::Global,
            kmeans: KMeansSettings::default(),
            sinkhorn: SinkhornParams::default(),
        }
    }
}

impl AdaptConfig {
    pub fn num_classes(&self, source: &EmbeddingSet) -> Result<usize> {
        self.num_classes
            .or_else(|| source.num_classes())
            .filter(|&c| c > 0)
            .ok_or_else(|| {
                Error::Config(format!(
                    "num_classes is not set and cannot be inferred from {}",
                    source.domain_name()
                ))
            })
    }

    /// Clusters per domain, checked against both domain sizes.
    pub fn num_clusters(&self, source: &EmbeddingSet, target: &EmbeddingSet) -> Result<usize> {
        if self.clusters_per_class == 0 {
            return Err(Error::Config("clusters_per_class must be positive".into()));
        }
        let k = self.clusters_per_class * self.num_classes(source)?;
        let n = source.len().min(target.len());
        if k > n {
            return Err(Error::Config(format!(
                "k = {k} clusters exceeds the smaller domain size {n}"
            )));
        }
        Ok(k)
    }

    pub fn kmeans_config(&self, k: usize, seed: u64) -> KMeansConfig {
        KMeansConfig {
            k,
            seed,
            n_init: self.kmeans.n_init,
            max_iter: self.kmeans.max_iter,
            tol: self.kmeans.tol,
        }
    }

    pub fn distance_settings(&self) -> DistanceSettings {
        DistanceSettings {
            metric: self.metric,
            l2_on: self.l2_on,
            sinkhorn: self.sinkhorn,
        }
    }
}

/// Artifacts of one pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub seed: u64,
    pub source_model: ClusterModel,
    pub target_model: ClusterModel,
    /// Source prototypes with labels attached.
    pub source_protos: PrototypeSet,
    pub target_protos: PrototypeSet,
    pub distances: DistanceMatrix,
    pub mapping: DomainMapping,
}

impl PipelineRun {
    pub fn source_labels(&self) -> &[u32] {
        self.source_protos
            .labels
            .as_deref()
            .expect("source prototypes are labeled")
    }

    /// Nearest source prototype with the source label table.
    pub fn predict_source(&self, set: &EmbeddingSet) -> Result<Vec<Prediction>> {
        predict_set(set, &self.source_protos, self.source_labels())
    }

    /// Nearest target prototype with the transferred label table.
    pub fn predict_target(&self, set: &EmbeddingSet) -> Result<Vec<Prediction>> {
        predict_set(set, &self.target_protos, &self.mapping.target_labels)
    }
}

/// Clusters one domain and selects its prototypes.
pub fn cluster_domain(
    set: &EmbeddingSet,
    k: usize,
    seed: u64,
    cfg: &AdaptConfig,
) -> Result<(ClusterModel, PrototypeSet)> {
    let model = fit_kmeans(set, &cfg.kmeans_config(k, seed))?;
    let protos = select_prototypes(set, &model, cfg.prototype_scope)?;
    Ok((model, protos))
}

/// Runs clustering, prototype selection, label retrieval, distance
/// computation and label transfer for one seed.
pub fn run_pipeline(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    seed: u64,
    cfg: &AdaptConfig,
) -> Result<PipelineRun> {
    if source.dim() != target.dim() {
        return Err(Error::shape(source.dim(), target.dim()));
    }
    let k = cfg.num_clusters(source, target)?;
    let (source_model, source_protos) = cluster_domain(source, k, seed, cfg)?;
    let source_protos = retrieve_labels(&source_protos, source, &source_model, cfg.label_rule)?;
    let (target_model, target_protos) = cluster_domain(target, k, seed, cfg)?;
    let distances = build_distance_matrix(
        DomainClusters {
            set: source,
            model: &source_model,
            protos: &source_protos,
        },
        DomainClusters {
            set: target,
            model: &target_model,
            protos: &target_protos,
        },
        cfg.distance_settings(),
    )?;
    let mapping = closest_mapping(&distances, source_protos.labels.as_deref().unwrap())?;
    Ok(PipelineRun {
        seed,
        source_model,
        target_model,
        source_protos,
        target_protos,
        distances,
        mapping,
    })
}
