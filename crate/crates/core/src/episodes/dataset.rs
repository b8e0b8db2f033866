//! Class-indexed dataset with named splits.
//!
//! On disk a dataset is a JSON manifest plus one headerless CSV per class
//! (one example per row, `feature_dim` columns). In memory every class owns
//! its examples; splits are lists of class ids, disjoint by construction.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}', expected train, val, or test"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// One class: its global id, optional coarse group id, and example rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    pub id: usize,
    pub coarse_id: Option<usize>,
    pub examples: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    feature_dim: usize,
    classes: Vec<ClassRecord>,
    splits: Splits,
}

impl Dataset {
    pub fn new(
        name: String,
        feature_dim: usize,
        classes: Vec<ClassRecord>,
        splits: Splits,
    ) -> Result<Self> {
        let ds = Dataset {
            name,
            feature_dim,
            classes,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let mut seen_ids = BTreeSet::new();
        for class in &self.classes {
            if !seen_ids.insert(class.id) {
                return Err(Error::Config(format!(
                    "class id {} declared more than once",
                    class.id
                )));
            }
            for row in &class.examples {
                if row.len() != self.feature_dim {
                    return Err(Error::Dimension {
                        context: "class example width",
                        expected: self.feature_dim,
                        actual: row.len(),
                    });
                }
            }
        }
        let mut assigned = BTreeSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut in_split = BTreeSet::new();
            for &id in self.splits.get(split) {
                if !seen_ids.contains(&id) {
                    return Err(Error::Config(format!(
                        "split '{split}' references unknown class id {id}"
                    )));
                }
                if !in_split.insert(id) {
                    return Err(Error::Config(format!(
                        "split '{split}' lists class id {id} twice"
                    )));
                }
                if !assigned.insert(id) {
                    return Err(Error::OverlappingSplits { class_id: id });
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn class_by_id(&self, id: usize) -> Option<&ClassRecord> {
        self.classes.iter().find(|c| c.id == id)
    }

    /// Number of coarse groups, `max coarse id + 1`, when any class carries
    /// a coarse id.
    pub fn coarse_group_count(&self) -> Option<usize> {
        self.classes
            .iter()
            .filter_map(|c| c.coarse_id)
            .max()
            .map(|m| m + 1)
    }

    /// True when every class in `split` carries a coarse id.
    pub fn split_fully_coarse(&self, split: Split) -> bool {
        self.splits.get(split).iter().all(|&id| {
            self.class_by_id(id)
                .is_some_and(|c| c.coarse_id.is_some())
        })
    }

    /// Content hash over name, dimensions, class data, and splits. Two
    /// loads of the same data always agree.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.name.as_bytes());
        hasher.update((self.feature_dim as u64).to_le_bytes());
        let mut ordered: Vec<&ClassRecord> = self.classes.iter().collect();
        ordered.sort_by_key(|c| c.id);
        for class in ordered {
            hasher.update((class.id as u64).to_le_bytes());
            match class.coarse_id {
                Some(c) => {
                    hasher.update([1u8]);
                    hasher.update((c as u64).to_le_bytes());
                }
                None => hasher.update([0u8]),
            }
            for row in &class.examples {
                for &v in row {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        for split in [Split::Train, Split::Val, Split::Test] {
            for &id in self.splits.get(split) {
                hasher.update((id as u64).to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Manifest serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestClass {
    id: usize,
    coarse_id: Option<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    feature_dim: usize,
    classes: Vec<ManifestClass>,
    splits: Splits,
}

/// Reads a manifest and every class CSV it references. Violations are
/// reported with file and line context.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut classes = Vec::with_capacity(manifest.classes.len());
    for mc in &manifest.classes {
        let path = base.join(&mc.file);
        let examples = read_class_csv(&path, manifest.feature_dim)?;
        classes.push(ClassRecord {
            id: mc.id,
            coarse_id: mc.coarse_id,
            examples,
        });
    }
    Dataset::new(manifest.name, manifest.feature_dim, classes, manifest.splits)
}

fn read_class_csv(path: &Path, feature_dim: usize) -> Result<Vec<Vec<f64>>> {
    let file =
        fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(feature_dim);
        for field in line.split(',') {
            let value = field.trim().parse::<f64>().map_err(|_| Error::DataFormat {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("cannot parse '{}' as a number", field.trim()),
            })?;
            row.push(value);
        }
        if row.len() != feature_dim {
            return Err(Error::DataFormat {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected {feature_dim} columns, found {}", row.len()),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Writes the dataset as `manifest.json` plus one CSV per class in `dir`.
/// Returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut manifest_classes = Vec::with_capacity(dataset.classes.len());
    for class in &dataset.classes {
        let file_name = format!("class_{:04}.csv", class.id);
        let path = dir.join(&file_name);
        let mut out = fs::File::create(&path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        for row in &class.examples {
            let line = row
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(out, "{line}")
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        manifest_classes.push(ManifestClass {
            id: class.id,
            coarse_id: class.coarse_id,
            file: file_name,
        });
    }
    let manifest = Manifest {
        name: dataset.name.clone(),
        feature_dim: dataset.feature_dim,
        classes: manifest_classes,
        splits: dataset.splits.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json("dataset manifest", e))?;
    fs::write(&manifest_path, json)
        .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;
    Ok(manifest_path)
}
