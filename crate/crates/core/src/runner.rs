//! Resumable, file-backed execution of the pipeline stages.
//!
//! Every artifact records a fingerprint of everything it was computed from
//! (input file hashes, relevant configuration, upstream fingerprints). A
//! stage whose output already exists with the same fingerprint is skipped;
//! an output with a different fingerprint is only replaced under `force`.
//!
//! Output names, per seed `s` and role `source`/`target`:
//! `clusters_<role>_<s>.json/.emb`, `protos_<role>_<s>.json/.emb`,
//! `dst_<s>.json/.dst`, `mapping_<s>.json`, `predictions_<s>.json`,
//! `eval.json`, `report.json`, `report.html`.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::distance::{DistanceBuilder, DistanceMatrix, DomainClusters, L2On, Metric};
use crate::embeddings::{read_embeddings, read_json, sidecar_path, write_atomic, write_json, EmbeddingSet};
use crate::error::{Error, Result};
use crate::evaluate::{summarize, DomainPair, EvaluationReport, Split};
use crate::fingerprint;
use crate::kmeans::ClusterModel;
use crate::mapping::{accuracy, closest_mapping, predict_set, DomainMapping, Prediction};
use crate::pipeline::{AdaptConfig, KMeansSettings};
use crate::prototypes::{retrieve_labels, LabelRule, PrototypeScope, PrototypeSet};
use crate::report::{emit_html, nearest_prototype_report, NeighborReport, Query, ReportDomain};
use crate::sinkhorn::SinkhornParams;

/// Rows of the Sinkhorn matrix computed between checkpoint appends.
const CHECKPOINT_ROWS: usize = 8;

/// Reproducible pipeline configuration, usually read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    /// Held-out target samples to score instead of the clustered target set.
    pub target_test_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub clusters_per_class: usize,
    /// Inferred from the source domain when absent.
    pub num_classes: Option<usize>,
    pub metric: Metric,
    pub l2_on: L2On,
    pub label_rule: LabelRule,
    pub prototype_scope: PrototypeScope,
    pub seeds: Vec<u64>,
    /// Nearest prototypes listed per domain in the report.
    pub top_k: usize,
    /// Number of target queries included in the report.
    pub report_queries: usize,
    pub image_root: Option<PathBuf>,
    /// Append Sinkhorn matrix rows to a resumable partial file.
    pub checkpoint: bool,
    pub kmeans: KMeansSettings,
    pub sinkhorn: SinkhornParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let adapt = AdaptConfig::default();
        Self {
            source_path: PathBuf::from("source.emb"),
            target_path: PathBuf::from("target.emb"),
            target_test_path: None,
            output_dir: PathBuf::from("out"),
            clusters_per_class: adapt.clusters_per_class,
            num_classes: adapt.num_classes,
            metric: adapt.metric,
            l2_on: adapt.l2_on,
            label_rule: adapt.label_rule,
            prototype_scope: adapt.prototype_scope,
            seeds: vec![0, 1, 2],
            top_k: 5,
            report_queries: 50,
            image_root: None,
            checkpoint: true,
            kmeans: adapt.kmeans,
            sinkhorn: adapt.sinkhorn,
        }
    }
}

impl PipelineConfig {
    /// Parses a TOML file. Relative paths are resolved against the file's
    /// directory.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.source_path);
        resolve(&mut cfg.target_path);
        resolve(&mut cfg.output_dir);
        if let Some(p) = cfg.target_test_path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.image_root.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn adapt(&self) -> AdaptConfig {
        AdaptConfig {
            clusters_per_class: self.clusters_per_class,
            num_classes: self.num_classes,
            metric: self.metric,
            l2_on: self.l2_on,
            label_rule: self.label_rule,
            prototype_scope: self.prototype_scope,
            kmeans: self.kmeans,
            sinkhorn: self.sinkhorn,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the rayon default.
    pub threads: Option<usize>,
    /// Recompute and overwrite artifacts even when they exist.
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactStatus {
    Computed,
    Reused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Target => "target",
        }
    }
}

/// Accuracies and per-sample predictions of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    #[serde(default)]
    pub fingerprint: Option<String>,
    pub seed: u64,
    pub split: Split,
    pub source_accuracy: Option<f64>,
    pub target_accuracy: Option<f64>,
    pub source: Vec<Prediction>,
    pub target: Vec<Prediction>,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    fingerprint: Option<String>,
    seed: u64,
    reports: Vec<NeighborReport>,
}

#[derive(Serialize, Deserialize)]
struct EvalFile {
    fingerprint: Option<String>,
    #[serde(flatten)]
    report: EvaluationReport,
}

#[derive(Deserialize)]
struct Fingerprinted {
    fingerprint: Option<String>,
}

/// Artifacts of the clustering and prototype stages for one domain.
struct DomainArtifacts {
    model: ClusterModel,
    protos: PrototypeSet,
    fingerprint: String,
}

struct MatchArtifacts {
    source: DomainArtifacts,
    target: DomainArtifacts,
    mapping: DomainMapping,
    fingerprint: String,
}

fn input_fingerprint(path: &Path) -> Result<String> {
    let sidecar = sidecar_path(path);
    let meta = if sidecar.exists() {
        fingerprint::of_file(&sidecar)?
    } else {
        String::new()
    };
    fingerprint::of_json(&[fingerprint::of_file(path)?, meta])
}

/// Drives the stages for one configuration.
pub struct Runner {
    cfg: PipelineConfig,
    adapt: AdaptConfig,
    opts: RunOptions,
    pool: rayon::ThreadPool,
    source: EmbeddingSet,
    target: EmbeddingSet,
    target_test: Option<EmbeddingSet>,
    inputs: [String; 3],
    k: usize,
    events: Mutex<Vec<(PathBuf, ArtifactStatus)>>,
}

impl Runner {
    pub fn new(cfg: PipelineConfig, opts: RunOptions) -> Result<Self> {
        if cfg.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if cfg.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        cfg.sinkhorn.validate()?;
        let source = read_embeddings(&cfg.source_path)?;
        let target = read_embeddings(&cfg.target_path)?;
        if source.dim() != target.dim() {
            return Err(Error::shape(source.dim(), target.dim()));
        }
        let target_test = match &cfg.target_test_path {
            Some(p) => {
                let set = read_embeddings(p)?;
                if set.dim() != source.dim() {
                    return Err(Error::shape(source.dim(), set.dim()));
                }
                Some(set)
            }
            None => None,
        };
        if source.labels().is_none() {
            return Err(Error::MissingLabels(source.domain_name().to_owned()));
        }
        let inputs = [
            input_fingerprint(&cfg.source_path)?,
            input_fingerprint(&cfg.target_path)?,
            match &cfg.target_test_path {
                Some(p) => input_fingerprint(p)?,
                None => String::new(),
            },
        ];
        let adapt = cfg.adapt();
        let k = adapt.num_clusters(&source, &target)?;
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = opts.threads {
            builder = builder.num_threads(n.max(1));
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
        Ok(Self {
            cfg,
            adapt,
            opts,
            pool,
            source,
            target,
            target_test,
            inputs,
            k,
            events: Mutex::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn num_clusters(&self) -> usize {
        self.k
    }

    /// Artifacts written or reused so far, in order.
    pub fn events(&self) -> Vec<(PathBuf, ArtifactStatus)> {
        self.events.lock().unwrap().clone()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn record(&self, path: &Path, status: ArtifactStatus) {
        log::info!(
            "{} {}",
            match status {
                ArtifactStatus::Computed => "wrote",
                ArtifactStatus::Reused => "reusing",
            },
            path.display()
        );
        self.events.lock().unwrap().push((path.to_path_buf(), status));
    }

    /// Whether `json_path` can be reused for `fingerprint`.
    fn reusable(&self, json_path: &Path, fingerprint: &str, companions: &[&Path]) -> Result<bool> {
        if !json_path.exists() {
            return Ok(false);
        }
        if self.opts.force {
            return Ok(false);
        }
        let found = read_json::<Fingerprinted>(json_path)?.fingerprint.unwrap_or_default();
        if found != fingerprint {
            return Err(Error::StaleArtifact {
                path: json_path.to_path_buf(),
                expected: fingerprint.to_owned(),
                found,
            });
        }
        Ok(companions.iter().all(|p| p.exists()))
    }

    fn set(&self, role: Role) -> &EmbeddingSet {
        match role {
            Role::Source => &self.source,
            Role::Target => &self.target,
        }
    }

    /// Target samples that are predicted and scored.
    pub fn scored_target(&self) -> &EmbeddingSet {
        self.target_test.as_ref().unwrap_or(&self.target)
    }

    fn split(&self) -> Split {
        if self.target_test.is_some() {
            Split::HeldOut
        } else {
            Split::Full
        }
    }

    fn cluster_fingerprint(&self, role: Role, seed: u64) -> Result<String> {
        let input = match role {
            Role::Source => &self.inputs[0],
            Role::Target => &self.inputs[1],
        };
        fingerprint::of_json(&json!({
            "stage": "cluster",
            "input": input,
            "k": self.k,
            "kmeans": self.cfg.kmeans,
            "seed": seed,
        }))
    }

    fn ensure_cluster(&self, role: Role, seed: u64) -> Result<(ClusterModel, String)> {
        let fp = self.cluster_fingerprint(role, seed)?;
        let json_path = self.out(&format!("clusters_{}_{seed}.json", role.name()));
        let emb_path = self.out(&format!("clusters_{}_{seed}.emb", role.name()));
        if self.reusable(&json_path, &fp, &[&emb_path])? {
            self.record(&json_path, ArtifactStatus::Reused);
            return Ok((ClusterModel::load(&json_path, &emb_path)?, fp));
        }
        let cfg = self.adapt.kmeans_config(self.k, seed);
        let model = self
            .pool
            .install(|| crate::kmeans::fit_kmeans(self.set(role), &cfg))?;
        model.save(&json_path, &emb_path, Some(&fp))?;
        self.record(&json_path, ArtifactStatus::Computed);
        Ok((model, fp))
    }

    fn ensure_prototypes(&self, role: Role, seed: u64) -> Result<DomainArtifacts> {
        let (model, cluster_fp) = self.ensure_cluster(role, seed)?;
        let fp = fingerprint::of_json(&json!({
            "stage": "prototypes",
            "clusters": cluster_fp,
            "scope": self.cfg.prototype_scope,
            "label_rule": match role {
                Role::Source => Some(self.cfg.label_rule),
                Role::Target => None,
            },
        }))?;
        let json_path = self.out(&format!("protos_{}_{seed}.json", role.name()));
        let emb_path = self.out(&format!("protos_{}_{seed}.emb", role.name()));
        if self.reusable(&json_path, &fp, &[&emb_path])? {
            self.record(&json_path, ArtifactStatus::Reused);
            let protos = PrototypeSet::load(&json_path, &emb_path)?;
            return Ok(DomainArtifacts {
                model,
                protos,
                fingerprint: fp,
            });
        }
        let set = self.set(role);
        let protos = self.pool.install(|| -> Result<PrototypeSet> {
            let protos = crate::prototypes::select_prototypes(set, &model, self.cfg.prototype_scope)?;
            match role {
                Role::Source => retrieve_labels(&protos, set, &model, self.cfg.label_rule),
                Role::Target => Ok(protos),
            }
        })?;
        protos.save(&json_path, &emb_path, Some(&fp))?;
        self.record(&json_path, ArtifactStatus::Computed);
        Ok(DomainArtifacts {
            model,
            protos,
            fingerprint: fp,
        })
    }

    fn ensure_match(&self, seed: u64) -> Result<MatchArtifacts> {
        let source = self.ensure_prototypes(Role::Source, seed)?;
        let target = self.ensure_prototypes(Role::Target, seed)?;
        let settings = self.adapt.distance_settings();
        let fp = fingerprint::of_json(&json!({
            "stage": "match",
            "source": source.fingerprint,
            "target": target.fingerprint,
            "metric": settings.metric,
            "l2_on": match settings.metric {
                Metric::L2Centroid => Some(settings.l2_on),
                Metric::SinkhornW2 => None,
            },
            "sinkhorn": match settings.metric {
                Metric::L2Centroid => None,
                Metric::SinkhornW2 => Some(settings.sinkhorn),
            },
        }))?;
        let header = self.out(&format!("dst_{seed}.json"));
        let dst = self.out(&format!("dst_{seed}.dst"));
        let mapping_path = self.out(&format!("mapping_{seed}.json"));
        let source_labels = source
            .protos
            .labels
            .clone()
            .ok_or_else(|| Error::MissingLabels(format!("source prototypes of seed {seed}")))?;

        if self.reusable(&mapping_path, &fp, &[])? && self.reusable(&header, &fp, &[&dst])? {
            self.record(&header, ArtifactStatus::Reused);
            self.record(&mapping_path, ArtifactStatus::Reused);
            return Ok(MatchArtifacts {
                source,
                target,
                mapping: DomainMapping::load(&mapping_path)?,
                fingerprint: fp,
            });
        }

        let distances = if self.reusable(&header, &fp, &[&dst])? {
            self.record(&header, ArtifactStatus::Reused);
            DistanceMatrix::load(&header, &dst)?
        } else {
            let matrix = self.pool.install(|| -> Result<DistanceMatrix> {
                let builder = DistanceBuilder::new(
                    DomainClusters {
                        set: &self.source,
                        model: &source.model,
                        protos: &source.protos,
                    },
                    DomainClusters {
                        set: &self.target,
                        model: &target.model,
                        protos: &target.protos,
                    },
                    settings,
                )?;
                if self.cfg.checkpoint && settings.metric == Metric::SinkhornW2 {
                    let partial = self.out(&format!("dst_{seed}.dst.partial"));
                    let m = builder.build_checkpointed(&partial, &fp, CHECKPOINT_ROWS)?;
                    for p in [partial.clone(), PathBuf::from(format!("{}.json", partial.display()))] {
                        std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                    }
                    Ok(m)
                } else {
                    builder.build()
                }
            })?;
            if matrix.converged_cells < matrix.values.len() {
                log::warn!(
                    "seed {seed}: {} of {} Sinkhorn cells hit the iteration budget",
                    matrix.values.len() - matrix.converged_cells,
                    matrix.values.len()
                );
            }
            matrix.save(&header, &dst, Some(&fp))?;
            self.record(&header, ArtifactStatus::Computed);
            matrix
        };
        let mapping = closest_mapping(&distances, &source_labels)?;
        mapping.save(&mapping_path, Some(&fp))?;
        self.record(&mapping_path, ArtifactStatus::Computed);
        Ok(MatchArtifacts {
            source,
            target,
            mapping,
            fingerprint: fp,
        })
    }

    fn predict_fingerprint(&self, match_fp: &str) -> Result<String> {
        fingerprint::of_json(&json!({
            "stage": "predict",
            "match": match_fp,
            "scored": &self.inputs[2],
        }))
    }

    fn ensure_predictions(&self, seed: u64) -> Result<(PredictionsFile, MatchArtifacts)> {
        let m = self.ensure_match(seed)?;
        let fp = self.predict_fingerprint(&m.fingerprint)?;
        let path = self.out(&format!("predictions_{seed}.json"));
        if self.reusable(&path, &fp, &[])? {
            self.record(&path, ArtifactStatus::Reused);
            return Ok((read_json(&path)?, m));
        }
        let scored = self.scored_target();
        let source_labels = m.source.protos.labels.as_deref().unwrap_or_default();
        let (source, target) = self.pool.install(|| -> Result<_> {
            Ok((
                predict_set(&self.source, &m.source.protos, source_labels)?,
                predict_set(scored, &m.target.protos, &m.mapping.target_labels)?,
            ))
        })?;
        let source_accuracy = match self.source.labels() {
            Some(truth) => Some(accuracy(&source, truth)?),
            None => None,
        };
        let target_accuracy = match scored.labels() {
            Some(truth) => Some(accuracy(&target, truth)?),
            None => None,
        };
        let file = PredictionsFile {
            fingerprint: Some(fp),
            seed,
            split: self.split(),
            source_accuracy,
            target_accuracy,
            source,
            target,
        };
        write_json(&path, &file)?;
        self.record(&path, ArtifactStatus::Computed);
        Ok((file, m))
    }

    pub fn cluster(&self, seed: u64) -> Result<()> {
        self.ensure_cluster(Role::Source, seed)?;
        self.ensure_cluster(Role::Target, seed)?;
        Ok(())
    }

    pub fn prototypes(&self, seed: u64) -> Result<()> {
        self.ensure_prototypes(Role::Source, seed)?;
        self.ensure_prototypes(Role::Target, seed)?;
        Ok(())
    }

    pub fn match_domains(&self, seed: u64) -> Result<DomainMapping> {
        Ok(self.ensure_match(seed)?.mapping)
    }

    pub fn predict(&self, seed: u64) -> Result<PredictionsFile> {
        Ok(self.ensure_predictions(seed)?.0)
    }

    /// Fingerprint of the full configuration and the input file hashes.
    pub fn config_fingerprint(&self) -> Result<String> {
        let mut cfg = self.cfg.clone();
        // Locations do not affect results; file contents are hashed instead.
        cfg.source_path = PathBuf::new();
        cfg.target_path = PathBuf::new();
        cfg.target_test_path = None;
        cfg.output_dir = PathBuf::new();
        cfg.image_root = None;
        fingerprint::of_json(&json!({ "config": cfg, "inputs": self.inputs }))
    }

    /// Runs (or reuses) every seed and writes `eval.json`.
    pub fn evaluate(&self) -> Result<EvaluationReport> {
        let scored = self.scored_target();
        if scored.labels().is_none() {
            return Err(Error::MissingLabels(scored.domain_name().to_owned()));
        }
        let mut runs = Vec::with_capacity(self.cfg.seeds.len());
        let mut fps = Vec::with_capacity(self.cfg.seeds.len());
        for &seed in &self.cfg.seeds {
            let (p, _) = self.ensure_predictions(seed)?;
            runs.push((
                p.target_accuracy.expect("target labels checked above"),
                p.source_accuracy.expect("source labels checked at startup"),
            ));
            fps.push(p.fingerprint.unwrap_or_default());
        }
        let fp = fingerprint::of_json(&json!({ "stage": "evaluate", "predictions": fps }))?;
        let path = self.out("eval.json");
        if self.reusable(&path, &fp, &[])? {
            self.record(&path, ArtifactStatus::Reused);
            return Ok(read_json::<EvalFile>(&path)?.report);
        }
        let pair = DomainPair {
            source: &self.source,
            target: &self.target,
            target_test: self.target_test.as_ref(),
        };
        let report = EvaluationReport {
            pairs: vec![summarize(&pair, self.cfg.metric, &self.cfg.seeds, &runs)],
            config_fingerprint: self.config_fingerprint()?,
        };
        write_json(
            &path,
            &EvalFile {
                fingerprint: Some(fp),
                report: report.clone(),
            },
        )?;
        self.record(&path, ArtifactStatus::Computed);
        Ok(report)
    }

    /// Nearest-prototype reports for the first `report_queries` target
    /// queries, written as `report.json` and `report.html`.
    pub fn report(&self, seed: u64) -> Result<Vec<NeighborReport>> {
        let m = self.ensure_match(seed)?;
        let fp = fingerprint::of_json(&json!({
            "stage": "report",
            "match": m.fingerprint,
            "scored": &self.inputs[2],
            "top_k": self.cfg.top_k,
            "queries": self.cfg.report_queries,
            "image_root": self.cfg.image_root,
        }))?;
        let json_path = self.out("report.json");
        let html_path = self.out("report.html");
        if self.reusable(&json_path, &fp, &[&html_path])? {
            let file: ReportFile = read_json(&json_path)?;
            if file.seed == seed {
                self.record(&json_path, ArtifactStatus::Reused);
                return Ok(file.reports);
            }
        }
        let scored = self.scored_target();
        let source_labels = m.source.protos.labels.as_deref().unwrap_or_default();
        let own = ReportDomain {
            set: &self.target,
            protos: &m.target.protos,
            labels: &m.mapping.target_labels,
        };
        let other = ReportDomain {
            set: &self.source,
            protos: &m.source.protos,
            labels: source_labels,
        };
        let reports = (0..scored.len().min(self.cfg.report_queries))
            .map(|i| {
                let query = Query {
                    id: &scored.sample_ids()[i],
                    vector: scored.row(i),
                    true_label: scored.labels().map(|l| l[i]),
                };
                let mut r = nearest_prototype_report(query, own, other, self.cfg.top_k)?;
                r.query_domain = scored.domain_name().to_owned();
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        let html = emit_html(&reports, self.cfg.image_root.as_deref());
        write_atomic(&html_path, html.as_bytes())?;
        write_json(
            &json_path,
            &ReportFile {
                fingerprint: Some(fp),
                seed,
                reports: reports.clone(),
            },
        )?;
        self.record(&json_path, ArtifactStatus::Computed);
        Ok(reports)
    }
}
