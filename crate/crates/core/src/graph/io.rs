use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Cfg, Dataset, Label};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    id: String,
    label: Label,
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    features: Vec<Vec<f64>>,
}

/// One line of a dataset manifest: a graph file (relative to the manifest's
/// directory) and its label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    }
}

impl GraphFile {
    fn into_cfg(self) -> Result<Cfg> {
        if self.features.len() != self.num_nodes {
            return Err(Error::InvalidGraph {
                id: self.id,
                msg: format!("{} feature rows for {} nodes", self.features.len(), self.num_nodes),
            });
        }
        let features = if self.num_nodes > 0 && self.features[0].is_empty() {
            Tensor::zeros(self.num_nodes, 0)
        } else {
            Tensor::from_rows(&self.features).map_err(|e| Error::InvalidGraph {
                id: self.id.clone(),
                msg: e.to_string(),
            })?
        };
        Cfg::new(
            self.id,
            self.label,
            self.num_nodes,
            self.edges.into_iter().map(|[s, d]| (s, d)).collect(),
            features,
        )
    }

    fn from_cfg(g: &Cfg) -> Self {
        GraphFile {
            id: g.id().to_string(),
            label: g.label(),
            num_nodes: g.num_nodes(),
            edges: g.edges().iter().map(|&(s, d)| [s, d]).collect(),
            features: g.features().to_rows(),
        }
    }
}

pub fn graph_from_json(text: &str) -> Result<Cfg> {
    serde_json::from_str::<GraphFile>(text).map_err(json_error)?.into_cfg()
}

pub fn graph_to_json(g: &Cfg) -> String {
    serde_json::to_string(&GraphFile::from_cfg(g)).expect("graph serializes")
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<Cfg> {
    graph_from_json(&fs::read_to_string(path)?)
}

pub fn save_graph(g: &Cfg, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, graph_to_json(g))?;
    Ok(())
}

/// Writes every graph as `<dir>/<id>.json` plus `<dir>/manifest.json`, and
/// returns the manifest path.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(ds.len());
    for g in &ds.graphs {
        let name = format!("{}.json", g.id());
        save_graph(g, dir.join(&name))?;
        manifest.push(ManifestEntry {
            path: name,
            label: g.label(),
        });
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Dataset> {
    let manifest = manifest.as_ref();
    let entries: Vec<ManifestEntry> = serde_json::from_str(&fs::read_to_string(manifest)?).map_err(json_error)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut graphs = Vec::with_capacity(entries.len());
    for e in entries {
        let g = load_graph(base.join(&e.path))?;
        if g.label() != e.label {
            return Err(Error::InvalidGraph {
                id: g.id().to_string(),
                msg: format!("manifest label {:?} disagrees with file label {:?}", e.label, g.label()),
            });
        }
        graphs.push(g);
    }
    Ok(Dataset::new(graphs))
}
