//! Source-cluster × target-cluster distance matrices.

use std::fs::OpenOptions;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{read_json, write_atomic, write_json, EmbeddingSet};
use crate::error::{Error, Result};
use crate::kmeans::ClusterModel;
use crate::prototypes::PrototypeSet;
use crate::sinkhorn::{debias, entropic_transport, self_transport, PointCloud, SelfTransport, SinkhornParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Euclidean distance between cluster representatives.
    #[default]
    L2Centroid,
    /// Debiased Sinkhorn divergence between cluster member clouds.
    SinkhornW2,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::L2Centroid => "l2_centroid",
            Metric::SinkhornW2 => "sinkhorn_w2",
        })
    }
}

/// Representative used by [`Metric::L2Centroid`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2On {
    #[default]
    Centroids,
    Prototypes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub k_source: usize,
    pub k_target: usize,
    /// Row-major `k_source × k_target`.
    pub values: Vec<f64>,
    pub metric: Metric,
    pub sinkhorn_params: Option<SinkhornParams>,
    pub converged_cells: usize,
}

impl DistanceMatrix {
    pub fn get(&self, source: usize, target: usize) -> f64 {
        self.values[source * self.k_target + target]
    }

    pub fn save(&self, header_path: &Path, dst_path: &Path, fingerprint: Option<&str>) -> Result<()> {
        write_atomic(dst_path, &f64_bytes(&self.values))?;
        write_json(header_path, &self.header(fingerprint))
    }

    fn header(&self, fingerprint: Option<&str>) -> DistanceHeader {
        DistanceHeader {
            fingerprint: fingerprint.map(str::to_owned),
            metric: self.metric,
            k_source: self.k_source,
            k_target: self.k_target,
            sinkhorn_params: self.sinkhorn_params,
            converged_cells: self.converged_cells,
        }
    }

    pub fn load(header_path: &Path, dst_path: &Path) -> Result<Self> {
        let header: DistanceHeader = read_json(header_path)?;
        let bytes = std::fs::read(dst_path).map_err(|e| Error::io(dst_path, e))?;
        let expected = 8 * header.k_source as u64 * header.k_target as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::Truncated {
                path: dst_path.to_path_buf(),
                expected,
                found: bytes.len() as u64,
            });
        }
        Ok(Self {
            k_source: header.k_source,
            k_target: header.k_target,
            values: read_f64s(&bytes),
            metric: header.metric,
            sinkhorn_params: header.sinkhorn_params,
            converged_cells: header.converged_cells,
        })
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct DistanceHeader {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub(crate) fingerprint: Option<String>,
    metric: Metric,
    k_source: usize,
    k_target: usize,
    sinkhorn_params: Option<SinkhornParams>,
    converged_cells: usize,
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// `‖cs − ct‖₂` accumulated in f64.
pub fn l2_centroid_distance(cs: &[f32], ct: &[f32]) -> Result<f64> {
    if cs.len() != ct.len() {
        return Err(Error::shape(cs.len(), ct.len()));
    }
    Ok(crate::kmeans::sq_dist(cs, ct).sqrt())
}

/// One clustered domain as seen by the distance builder.
#[derive(Clone, Copy)]
pub struct DomainClusters<'a> {
    pub set: &'a EmbeddingSet,
    pub model: &'a ClusterModel,
    pub protos: &'a PrototypeSet,
}

impl DomainClusters<'_> {
    fn dim(&self) -> usize {
        self.set.dim()
    }
}

/// How cells of the matrix are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistanceSettings {
    pub metric: Metric,
    pub l2_on: L2On,
    pub sinkhorn: SinkhornParams,
}

enum Prepared {
    L2 {
        dim: usize,
        source: Vec<f32>,
        target: Vec<f32>,
    },
    Sinkhorn {
        source: Vec<(PointCloud, SelfTransport)>,
        target: Vec<(PointCloud, SelfTransport)>,
        params: SinkhornParams,
    },
}

/// Computes rows of the distance matrix on demand.
///
/// Every cell is a pure function of its cluster pair. Prototypes take part
/// only through [`L2On::Prototypes`].
pub struct DistanceBuilder {
    k_source: usize,
    k_target: usize,
    settings: DistanceSettings,
    prepared: Prepared,
}

fn member_clouds(d: &DomainClusters<'_>, params: &SinkhornParams) -> Result<Vec<(PointCloud, SelfTransport)>> {
    d.model
        .all_members()
        .into_par_iter()
        .map(|members| {
            let rows: Vec<f32> = members.iter().flat_map(|&i| d.set.row(i).iter().copied()).collect();
            let cloud = PointCloud::from_f32_rows(&rows, d.dim())?;
            let own = self_transport(&cloud, params)?;
            Ok((cloud, own))
        })
        .collect()
}

impl DistanceBuilder {
    pub fn new(source: DomainClusters<'_>, target: DomainClusters<'_>, settings: DistanceSettings) -> Result<Self> {
        if source.dim() != target.dim() {
            return Err(Error::shape(source.dim(), target.dim()));
        }
        for d in [&source, &target] {
            if d.model.dim != d.dim() || d.model.assignments.len() != d.set.len() {
                return Err(Error::Precondition(format!(
                    "cluster model does not belong to domain {}",
                    d.set.domain_name()
                )));
            }
        }
        let prepared = match settings.metric {
            Metric::L2Centroid => {
                let pick = |d: &DomainClusters<'_>| match settings.l2_on {
                    L2On::Centroids => d.model.centroids.clone(),
                    L2On::Prototypes => d.protos.vectors.clone(),
                };
                Prepared::L2 {
                    dim: source.dim(),
                    source: pick(&source),
                    target: pick(&target),
                }
            }
            Metric::SinkhornW2 => {
                settings.sinkhorn.validate()?;
                Prepared::Sinkhorn {
                    source: member_clouds(&source, &settings.sinkhorn)?,
                    target: member_clouds(&target, &settings.sinkhorn)?,
                    params: settings.sinkhorn,
                }
            }
        };
        Ok(Self {
            k_source: source.model.k,
            k_target: target.model.k,
            settings,
            prepared,
        })
    }

    pub fn k_source(&self) -> usize {
        self.k_source
    }

    pub fn k_target(&self) -> usize {
        self.k_target
    }

    fn cell(&self, i: usize, j: usize) -> Result<(f64, bool)> {
        match &self.prepared {
            Prepared::L2 { dim, source, target } => {
                let d = l2_centroid_distance(&source[i * dim..(i + 1) * dim], &target[j * dim..(j + 1) * dim])?;
                Ok((d, true))
            }
            Prepared::Sinkhorn { source, target, params } => {
                let (a, self_a) = &source[i];
                let (b, self_b) = &target[j];
                let cross = entropic_transport(a, b, params)?;
                let div = debias(&cross, self_a, self_b);
                Ok((div.value, div.converged))
            }
        }
    }

    fn cells(&self, rows: Range<usize>) -> Result<Vec<(f64, bool)>> {
        let kt = self.k_target;
        (rows.start * kt..rows.end * kt)
            .into_par_iter()
            .map(|c| self.cell(c / kt, c % kt))
            .collect()
    }

    /// Values of source rows `rows`, row-major, and the number of converged
    /// cells among them.
    pub fn rows(&self, rows: Range<usize>) -> Result<(Vec<f64>, usize)> {
        let cells = self.cells(rows)?;
        let converged = cells.iter().filter(|c| c.1).count();
        Ok((cells.into_iter().map(|c| c.0).collect(), converged))
    }

    fn finish(&self, values: Vec<f64>, converged_cells: usize) -> DistanceMatrix {
        DistanceMatrix {
            k_source: self.k_source,
            k_target: self.k_target,
            values,
            metric: self.settings.metric,
            sinkhorn_params: match self.settings.metric {
                Metric::SinkhornW2 => Some(self.settings.sinkhorn),
                Metric::L2Centroid => None,
            },
            converged_cells,
        }
    }

    pub fn build(&self) -> Result<DistanceMatrix> {
        let (values, converged) = self.rows(0..self.k_source)?;
        Ok(self.finish(values, converged))
    }

    /// Builds the matrix while appending completed rows to `partial`.
    ///
    /// Each record is one full row of f64 values followed by a u64 count of
    /// converged cells, written with a single append. On restart, records
    /// already present are reused when `<partial>.json` carries the same
    /// `tag`; a torn trailing record is discarded.
    pub fn build_checkpointed(&self, partial: &Path, tag: &str, batch_rows: usize) -> Result<DistanceMatrix> {
        let record = 8 * (self.k_target + 1);
        let meta_path = with_suffix(partial, ".json");
        let meta = CheckpointMeta {
            tag: tag.to_owned(),
            k_source: self.k_source,
            k_target: self.k_target,
        };
        let resumable = partial.exists()
            && meta_path.exists()
            && read_json::<CheckpointMeta>(&meta_path).is_ok_and(|m| m == meta);
        let mut done = Vec::new();
        if resumable {
            done = std::fs::read(partial).map_err(|e| Error::io(partial, e))?;
            done.truncate(done.len() / record * record);
            log::info!("resuming distance matrix at row {}", done.len() / record);
        } else {
            write_json(&meta_path, &meta)?;
        }
        write_atomic(partial, &done)?;

        let mut file = OpenOptions::new()
            .append(true)
            .open(partial)
            .map_err(|e| Error::io(partial, e))?;
        let mut row = (done.len() / record).min(self.k_source);
        while row < self.k_source {
            let end = (row + batch_rows.max(1)).min(self.k_source);
            let cells = self.cells(row..end)?;
            let mut bytes = Vec::with_capacity((end - row) * record);
            for chunk in cells.chunks_exact(self.k_target) {
                let values: Vec<f64> = chunk.iter().map(|c| c.0).collect();
                let converged = chunk.iter().filter(|c| c.1).count() as u64;
                bytes.extend(f64_bytes(&values));
                bytes.extend(converged.to_le_bytes());
            }
            for rec in bytes.chunks_exact(record) {
                file.write_all(rec).map_err(|e| Error::io(partial, e))?;
            }
            file.flush().map_err(|e| Error::io(partial, e))?;
            done.extend(bytes);
            row = end;
        }

        let mut values = Vec::with_capacity(self.k_source * self.k_target);
        let mut converged = 0usize;
        for rec in done.chunks_exact(record).take(self.k_source) {
            values.extend(read_f64s(&rec[..record - 8]));
            converged += u64::from_le_bytes(rec[record - 8..].try_into().unwrap()) as usize;
        }
        Ok(self.finish(values, converged))
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    tag: String,
    k_source: usize,
    k_target: usize,
}

/// The source-by-target cluster distance matrix, computed in one pass.
pub fn build_distance_matrix(
    source: DomainClusters<'_>,
    target: DomainClusters<'_>,
    settings: DistanceSettings,
) -> Result<DistanceMatrix> {
    DistanceBuilder::new(source, target, settings)?.build()
}
