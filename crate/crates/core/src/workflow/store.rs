//! On-disk project layout.
//!
//! ```text
//! project.json                      manifest
//! corpus.jsonl
//! audit.jsonl
//! splits.json
//! annotations/iter-<k>/<author>.jsonl
//! annotations/iter-<k>/draft.jsonl
//! annotations/iter-<k>/merged.jsonl
//! annotations/iter-<k>/gold.jsonl
//! conflicts/iter-<k>.jsonl
//! resolutions/iter-<k>.jsonl
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{AuditEvent, IterationData, Manifest, Project, Splits};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::model::{AnnotationSet, Document};

const MANIFEST: &str = "project.json";
const RESERVED_FILES: [&str; 3] = ["draft", "merged", "gold"];

#[derive(Debug, Clone)]
pub struct ProjectStore {
    root: PathBuf,
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("domain types serialize");
    s.push('\n');
    s
}

/// Write `content` if it is non-empty and differs from what is on disk;
/// remove the file when there is nothing to store.
fn sync(path: &Path, content: Option<String>) -> Result<()> {
    match content.filter(|c| !c.is_empty()) {
        Some(c) => {
            if fs::read(path).ok().as_deref() == Some(c.as_bytes()) {
                return Ok(());
            }
            jsonl::write_atomic(path, c.as_bytes())
        }
        None if path.exists() => fs::remove_file(path).map_err(|e| Error::io(path, e)),
        None => Ok(()),
    }
}

fn read_if_exists<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if path.exists() {
        jsonl::read(path)
    } else {
        Ok(Vec::new())
    }
}

fn by_doc(sets: Vec<AnnotationSet>) -> BTreeMap<String, AnnotationSet> {
    sets.into_iter().map(|s| (s.doc_id().to_string(), s)).collect()
}

fn values<V: Clone>(map: &BTreeMap<String, V>) -> Vec<V> {
    map.values().cloned().collect()
}

impl ProjectStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn exists(&self) -> bool {
        self.root.join(MANIFEST).is_file()
    }

    fn iter_dir(&self, index: usize) -> PathBuf {
        self.root.join("annotations").join(format!("iter-{index}"))
    }

    /// Save a freshly created project; refuses to overwrite an existing one.
    pub fn init(&self, project: &Project) -> Result<()> {
        if self.exists() {
            return Err(Error::ProjectLoad(format!(
                "a project already exists at {}",
                self.root.display()
            )));
        }
        self.save(project)
    }

    pub fn save(&self, project: &Project) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        sync(&self.root.join("corpus.jsonl"), Some(jsonl::to_string(&project.corpus)))?;
        for (&index, data) in &project.data {
            self.save_iteration(index, data)?;
        }
        sync(
            &self.root.join("splits.json"),
            project.splits.as_ref().map(pretty),
        )?;
        sync(&self.root.join("audit.jsonl"), Some(jsonl::to_string(&project.audit)))?;
        // The manifest goes last so a crash never leaves it pointing at
        // files that were not written yet.
        sync(&self.root.join(MANIFEST), Some(pretty(&project.manifest)))
    }

    fn save_iteration(&self, index: usize, data: &IterationData) -> Result<()> {
        let dir = self.iter_dir(index);
        let mut keep = BTreeSet::new();
        let mut put = |name: &str, sets: Vec<AnnotationSet>| -> Result<()> {
            let file = format!("{name}.jsonl");
            let content = jsonl::to_string(&sets);
            if !content.is_empty() {
                keep.insert(file.clone());
            }
            sync(&dir.join(file), Some(content))
        };
        put("draft", values(&data.drafts))?;
        put("merged", values(&data.merged))?;
        put("gold", values(&data.gold))?;
        for (author, sets) in &data.individual {
            put(author, values(sets))?;
        }
        if dir.is_dir() {
            for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let path = entry.map_err(|e| Error::io(&dir, e))?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                if name.ends_with(".jsonl") && !keep.contains(name) {
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
            }
        }
        let file = format!("iter-{index}.jsonl");
        sync(
            &self.root.join("conflicts").join(&file),
            Some(jsonl::to_string(&data.conflicts)),
        )?;
        sync(
            &self.root.join("resolutions").join(&file),
            Some(jsonl::to_string(&data.resolutions)),
        )
    }

    pub fn load(&self) -> Result<Project> {
        let manifest_path = self.root.join(MANIFEST);
        if !manifest_path.is_file() {
            return Err(Error::ProjectLoad(format!("no project at {}", self.root.display())));
        }
        let raw = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: manifest_path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if manifest.schemes.is_empty() {
            return Err(Error::ProjectLoad("manifest lists no label scheme".into()));
        }
        let corpus: Vec<Document> = jsonl::read(&self.root.join("corpus.jsonl"))?;
        let audit: Vec<AuditEvent> = read_if_exists(&self.root.join("audit.jsonl"))?;

        let mut data = BTreeMap::new();
        for it in &manifest.iterations {
            data.insert(it.index, self.load_iteration(it.index)?);
        }

        let splits_path = self.root.join("splits.json");
        let splits = if splits_path.is_file() {
            let raw = fs::read_to_string(&splits_path).map_err(|e| Error::io(&splits_path, e))?;
            Some(serde_json::from_str::<Splits>(&raw).map_err(|e| Error::Parse {
                path: splits_path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?)
        } else {
            None
        };
        Project::from_parts(manifest, corpus, data, audit, splits)
    }

    fn load_iteration(&self, index: usize) -> Result<IterationData> {
        let dir = self.iter_dir(index);
        let mut data = IterationData {
            drafts: by_doc(read_if_exists(&dir.join("draft.jsonl"))?),
            merged: by_doc(read_if_exists(&dir.join("merged.jsonl"))?),
            gold: by_doc(read_if_exists(&dir.join("gold.jsonl"))?),
            ..IterationData::default()
        };
        if dir.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            files.sort();
            for path in files {
                let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                    continue;
                };
                if path.extension().and_then(|e| e.to_str()) != Some("jsonl") || RESERVED_FILES.contains(&stem) {
                    continue;
                }
                let sets: Vec<AnnotationSet> = jsonl::read(&path)?;
                if let Some(bad) = sets.iter().find(|s| s.author().to_string() != stem) {
                    return Err(Error::ProjectLoad(format!(
                        "{} holds a set by {} for {}",
                        path.display(),
                        bad.author(),
                        bad.doc_id()
                    )));
                }
                data.individual.insert(stem.to_string(), by_doc(sets));
            }
        }
        let file = format!("iter-{index}.jsonl");
        data.conflicts = read_if_exists(&self.root.join("conflicts").join(&file))?;
        data.resolutions = read_if_exists(&self.root.join("resolutions").join(&file))?;
        Ok(data)
    }
}
