//! On-disk dataset: grayscale PNG images, one JSON-lines annotation file per
//! split, a manifest per task and a root index carrying the protocol and
//! the dataset hash.
//!
//! ```text
//! root/dataset.json
//! root/task1/manifest.json
//! root/task1/train.jsonl
//! root/task1/train/t1-train-0000.png
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use owod_core::shapeworld::{Annotation, ProtocolSpec, Scene, Split, TaskClasses, TaskSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;

pub const FORMAT_VERSION: u32 = 1;
pub const ROOT_MANIFEST: &str = "dataset.json";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset manifest {0} not found")]
    MissingManifest(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed manifest: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("{path}:{line}: record `{scene_id}`: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        scene_id: String,
        message: String,
    },
    #[error("record `{scene_id}`: image file {path} is missing")]
    MissingImage { scene_id: String, path: PathBuf },
    #[error("{path}: checksum mismatch (expected {expected}, found {found})")]
    Checksum { path: PathBuf, expected: String, found: String },
    #[error("{path}: {message}")]
    Png { path: PathBuf, message: String },
    #[error("unsupported dataset format version {0}")]
    Version(u32),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One line of a split's annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub scene_id: String,
    pub seed: u64,
    /// Image path relative to the task directory.
    pub image: String,
    pub objects: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub split: Split,
    pub annotations: String,
    pub scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub task_id: usize,
    pub classes: TaskClasses,
    pub splits: Vec<SplitEntry>,
    /// SHA-256 of every file of the task, keyed by path relative to the task
    /// directory.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootManifest {
    pub format_version: u32,
    pub protocol: ProtocolSpec,
    pub tasks: Vec<String>,
    pub dataset_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub protocol: ProtocolSpec,
    pub tasks: Vec<TaskSpec>,
    pub hash: String,
}

impl Dataset {
    pub fn task(&self, task_id: usize) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.classes.task_id == task_id)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn encode_png(scene: &Scene) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, scene.width as u32, scene.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&scene.pixels)?;
    }
    Ok(out)
}

/// Decodes an 8-bit grayscale PNG into `(width, height, pixels)`.
pub fn decode_png(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let bad = |message: String| DataError::Png {
        path: path.to_path_buf(),
        message,
    };
    let dec = png::Decoder::new(bytes);
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("expected 8-bit grayscale, found {:?} {:?}", info.color_type, info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn task_dir(task_id: usize) -> String {
    format!("task{task_id}")
}

fn hash_of_manifests(manifests: &[TaskManifest]) -> String {
    let mut h = Sha256::new();
    for m in manifests {
        for (path, sum) in &m.checksums {
            h.update(format!("{}/{path} {sum}\n", task_dir(m.task_id)).as_bytes());
        }
    }
    hex(&h.finalize())
}

/// Writes every task and returns the dataset hash.
pub fn write_dataset(protocol: &ProtocolSpec, tasks: &[TaskSpec], root: &Path) -> Result<String, DataError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut manifests = Vec::with_capacity(tasks.len());
    for task in tasks {
        let t = task.classes.task_id;
        let dir = root.join(task_dir(t));
        let mut checksums = BTreeMap::new();
        let mut splits = Vec::new();
        for split in Split::ALL {
            let scenes = task.split(split);
            let mut lines = Vec::new();
            for s in scenes {
                let rel = format!("{}/{}.png", split.name(), s.scene_id);
                let png = encode_png(s).map_err(|e| DataError::Png {
                    path: dir.join(&rel),
                    message: e.to_string(),
                })?;
                checksums.insert(rel.clone(), sha256_hex(&png));
                write_file(&dir.join(&rel), &png)?;
                let rec = SceneRecord {
                    scene_id: s.scene_id.clone(),
                    seed: s.seed,
                    image: rel,
                    objects: s.annotations.clone(),
                };
                lines.extend(serde_json::to_vec(&rec).expect("record serialises"));
                lines.push(b'\n');
            }
            let ann = format!("{}.jsonl", split.name());
            checksums.insert(ann.clone(), sha256_hex(&lines));
            write_file(&dir.join(&ann), &lines)?;
            splits.push(SplitEntry {
                split,
                annotations: ann,
                scenes: scenes.len(),
            });
        }
        let m = TaskManifest {
            task_id: t,
            classes: task.classes.clone(),
            splits,
            checksums,
        };
        let bytes = serde_json::to_vec_pretty(&m).expect("manifest serialises");
        write_file(&dir.join("manifest.json"), &bytes)?;
        manifests.push(m);
    }
    let hash = hash_of_manifests(&manifests);
    let root_manifest = RootManifest {
        format_version: FORMAT_VERSION,
        protocol: protocol.clone(),
        tasks: manifests.iter().map(|m| format!("{}/manifest.json", task_dir(m.task_id))).collect(),
        dataset_hash: hash.clone(),
    };
    let bytes = serde_json::to_vec_pretty(&root_manifest).expect("manifest serialises");
    write_file(&root.join(ROOT_MANIFEST), &bytes)?;
    Ok(hash)
}

fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    if !path.exists() {
        return Err(DataError::MissingManifest(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| DataError::Manifest {
        path: path.to_path_buf(),
        source,
    })
}

fn read_checked(path: &Path, rel: &str, checksums: &BTreeMap<String, String>) -> Result<Vec<u8>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = checksums.get(rel).ok_or_else(|| DataError::Checksum {
        path: path.to_path_buf(),
        expected: "<no entry>".to_string(),
        found: sha256_hex(&bytes),
    })?;
    let found = sha256_hex(&bytes);
    if &found != expected {
        return Err(DataError::Checksum {
            path: path.to_path_buf(),
            expected: expected.clone(),
            found,
        });
    }
    Ok(bytes)
}

/// Reads only the root index, e.g. to compare dataset hashes.
pub fn read_root_manifest(root: &Path) -> Result<RootManifest, DataError> {
    read_manifest(&root.join(ROOT_MANIFEST))
}

pub fn load_dataset(root: &Path) -> Result<Dataset, DataError> {
    let index = read_root_manifest(root)?;
    if index.format_version != FORMAT_VERSION {
        return Err(DataError::Version(index.format_version));
    }
    let num_classes = index.protocol.num_classes;
    let mut manifests = Vec::new();
    let mut tasks = Vec::new();
    for rel in &index.tasks {
        let mpath = root.join(rel);
        let m: TaskManifest = read_manifest(&mpath)?;
        let dir = mpath.parent().expect("manifest has a parent").to_path_buf();
        let mut by_split: BTreeMap<&'static str, Vec<Scene>> = BTreeMap::new();
        for entry in &m.splits {
            let apath = dir.join(&entry.annotations);
            let bytes = read_checked(&apath, &entry.annotations, &m.checksums)?;
            let mut scenes = Vec::with_capacity(entry.scenes);
            for (i, line) in BufReader::new(&bytes[..]).lines().enumerate() {
                let line = line.map_err(io_err(&apath))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record_err = |scene_id: &str, message: String| DataError::Record {
                    path: apath.clone(),
                    line: i + 1,
                    scene_id: scene_id.to_string(),
                    message,
                };
                let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| {
                    let id = serde_json::from_str::<serde_json::Value>(&line)
                        .ok()
                        .and_then(|v| v.get("scene_id").and_then(|s| s.as_str()).map(str::to_string))
                        .unwrap_or_else(|| "?".to_string());
                    record_err(&id, e.to_string())
                })?;
                for a in &rec.objects {
                    a.validate(num_classes).map_err(|e| record_err(&rec.scene_id, e.to_string()))?;
                }
                let ipath = dir.join(&rec.image);
                if !ipath.exists() {
                    return Err(DataError::MissingImage {
                        scene_id: rec.scene_id,
                        path: ipath,
                    });
                }
                let png = read_checked(&ipath, &rec.image, &m.checksums)?;
                let (width, height, pixels) = decode_png(&png, &ipath)?;
                scenes.push(Scene {
                    scene_id: rec.scene_id,
                    seed: rec.seed,
                    width,
                    height,
                    pixels,
                    annotations: rec.objects,
                });
            }
            if scenes.len() != entry.scenes {
                return Err(DataError::Record {
                    path: apath,
                    line: 0,
                    scene_id: String::new(),
                    message: format!("manifest lists {} scenes, file has {}", entry.scenes, scenes.len()),
                });
            }
            by_split.insert(entry.split.name(), scenes);
        }
        let mut take = |s: Split| by_split.remove(s.name()).unwrap_or_default();
        tasks.push(TaskSpec {
            classes: m.classes.clone(),
            train: take(Split::Train),
            val: take(Split::Val),
            test: take(Split::Test),
        });
        manifests.push(m);
    }
    let hash = hash_of_manifests(&manifests);
    if hash != index.dataset_hash {
        return Err(DataError::Checksum {
            path: root.join(ROOT_MANIFEST),
            expected: index.dataset_hash,
            found: hash,
        });
    }
    Ok(Dataset {
        protocol: index.protocol,
        tasks,
        hash,
    })
}
