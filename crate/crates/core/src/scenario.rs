//! Scenario manifests: the ordered CL task list and the stacks behind it.
//!
//! A stack reference in the manifest is a directory (relative to the
//! manifest file) holding `layer_0.fmap`, `layer_1.fmap`, ... in extraction
//! order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fmap::{fmap_to_bytes, read_fmap, Label, LayerStack};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub name: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioManifest {
    pub image_size: [usize; 2],
    pub tasks: Vec<ManifestTask>,
}

impl ScenarioManifest {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    pub train: Vec<LayerStack>,
    pub test: Vec<LayerStack>,
}

/// A manifest with every stack loaded into memory.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub image_size: (usize, usize),
    pub tasks: Vec<TaskData>,
    /// SHA-256 over the manifest bytes followed by every referenced layer in
    /// manifest order; matches reports produced on the same data.
    pub manifest_hash: String,
}

pub fn layer_file(stack_dir: &Path, layer: usize) -> PathBuf {
    stack_dir.join(format!("layer_{layer}.fmap"))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a manifest together with the serialized layers it references.
pub fn content_hash(manifest_bytes: &[u8], tasks: &[TaskData]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(manifest_bytes);
    for task in tasks {
        for stack in task.train.iter().chain(&task.test) {
            for layer in &stack.layers {
                h.update(fmap_to_bytes(layer)?);
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn load_stack(stack_dir: &Path) -> Result<LayerStack> {
    let mut layers = Vec::new();
    loop {
        let path = layer_file(stack_dir, layers.len());
        if !path.exists() {
            break;
        }
        let file = fs::File::open(&path).map_err(|e| Error::path(&path, e))?;
        let map = read_fmap(std::io::BufReader::new(file)).map_err(|e| match e {
            Error::Io(source) => Error::path(&path, source),
            other => other,
        })?;
        layers.push(map);
    }
    if layers.is_empty() {
        return Err(Error::config(format!(
            "stack {} has no layer_0.fmap",
            stack_dir.display()
        )));
    }
    let image_id = layers[0].image_id.clone();
    LayerStack::new(image_id, layers)
}

pub fn write_stack(stack: &LayerStack, stack_dir: &Path) -> Result<()> {
    fs::create_dir_all(stack_dir).map_err(|e| Error::path(stack_dir, e))?;
    for (j, layer) in stack.layers.iter().enumerate() {
        let path = layer_file(stack_dir, j);
        fs::write(&path, fmap_to_bytes(layer)?).map_err(|e| Error::path(&path, e))?;
    }
    Ok(())
}

impl Scenario {
    pub fn new(image_size: (usize, usize), tasks: Vec<TaskData>) -> Result<Self> {
        let mut s = Scenario {
            image_size,
            tasks,
            manifest_hash: String::new(),
        };
        s.validate()?;
        s.manifest_hash = content_hash(&s.manifest().to_bytes()?, &s.tasks)?;
        Ok(s)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let bytes = fs::read(manifest_path).map_err(|e| Error::path(manifest_path, e))?;
        let manifest: ScenarioManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::config(format!("{}: {e}", manifest_path.display())))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let load_all = |refs: &[String]| -> Result<Vec<LayerStack>> {
            refs.iter().map(|r| load_stack(&base.join(r))).collect()
        };
        let mut tasks = Vec::with_capacity(manifest.tasks.len());
        for t in &manifest.tasks {
            tasks.push(TaskData {
                name: t.name.clone(),
                train: load_all(&t.train)?,
                test: load_all(&t.test)?,
            });
        }
        let s = Scenario {
            image_size: (manifest.image_size[0], manifest.image_size[1]),
            manifest_hash: content_hash(&bytes, &tasks)?,
            tasks,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("scenario has no tasks"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        let mut names = std::collections::BTreeSet::new();
        for task in &self.tasks {
            if !names.insert(task.name.as_str()) {
                return Err(Error::config(format!("duplicate task name {}", task.name)));
            }
            if task.train.is_empty() {
                return Err(Error::config(format!("task {} has no training stacks", task.name)));
            }
            if let Some(bad) = task.train.iter().find(|s| s.label() != Label::Normal) {
                return Err(Error::config(format!(
                    "task {}: training stack {} is labeled {:?}; training data must be normal",
                    task.name,
                    bad.image_id,
                    bad.label()
                )));
            }
            for stack in task.train.iter().chain(&task.test) {
                if let Some(m) = stack.mask() {
                    if (m.height, m.width) != self.image_size {
                        return Err(Error::config(format!(
                            "stack {}: mask is {}x{}, scenario image_size is {}x{}",
                            stack.image_id, m.height, m.width, self.image_size.0, self.image_size.1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// The manifest this scenario is written as, with canonical relative paths.
    pub fn manifest(&self) -> ScenarioManifest {
        let refs = |t: usize, name: &str, split: &str, stacks: &[LayerStack]| {
            stacks
                .iter()
                .map(|s| format!("task_{:02}_{}/{}/{}", t + 1, name, split, s.image_id))
                .collect()
        };
        ScenarioManifest {
            image_size: [self.image_size.0, self.image_size.1],
            tasks: self
                .tasks
                .iter()
                .enumerate()
                .map(|(t, task)| ManifestTask {
                    name: task.name.clone(),
                    train: refs(t, &task.name, "train", &task.train),
                    test: refs(t, &task.name, "test", &task.test),
                })
                .collect(),
        }
    }

    /// Writes the FMAP tree and `manifest.json` under `dir`; returns the manifest path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        let manifest = self.manifest();
        for (task, entry) in self.tasks.iter().zip(&manifest.tasks) {
            for (stack, r) in task.train.iter().zip(&entry.train) {
                write_stack(stack, &dir.join(r))?;
            }
            for (stack, r) in task.test.iter().zip(&entry.test) {
                write_stack(stack, &dir.join(r))?;
            }
        }
        let path = dir.join("manifest.json");
        fs::write(&path, manifest.to_bytes()?).map_err(|e| Error::path(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fmap::FeatureMap;

    fn stack(id: &str, label: Label) -> LayerStack {
        let l0 = FeatureMap::new(id, 2, 2, 2, vec![0.5; 8], label).unwrap();
        let l1 = FeatureMap::new(id, 1, 1, 1, vec![1.0], label).unwrap();
        LayerStack::new(id, vec![l0, l1]).unwrap()
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let s = Scenario::new(
            (4, 4),
            vec![TaskData {
                name: "nut".into(),
                train: vec![stack("a", Label::Normal)],
                test: vec![stack("b", Label::Anomalous)],
            }],
        )
        .unwrap();
        let path = s.write_to(dir.path()).unwrap();
        let back = Scenario::load(&path).unwrap();
        assert_eq!(back.manifest_hash, s.manifest_hash);
        assert_eq!(back.tasks[0].train[0], s.tasks[0].train[0]);
        assert_eq!(back.tasks[0].test[0].layers.len(), 2);
    }

    #[test]
    fn hash_follows_layer_data() {
        let make = |v: f32| {
            let mut a = stack("a", Label::Normal);
            a.layers[1].data[0] = v;
            Scenario::new(
                (4, 4),
                vec![TaskData {
                    name: "nut".into(),
                    train: vec![a],
                    test: vec![],
                }],
            )
            .unwrap()
        };
        assert_eq!(make(1.0).manifest(), make(2.0).manifest());
        assert_ne!(make(1.0).manifest_hash, make(2.0).manifest_hash);
        assert_eq!(make(1.0).manifest_hash, make(1.0).manifest_hash);
    }

    #[test]
    fn anomalous_training_rejected_at_load() {
        let err = Scenario::new(
            (4, 4),
            vec![TaskData {
                name: "nut".into(),
                train: vec![stack("a", Label::Anomalous)],
                test: vec![],
            }],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
