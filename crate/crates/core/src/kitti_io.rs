//! SemanticKITTI scan and label files.
//!
//! Scans are `N × 16` bytes of little-endian `f32` quadruples `(x, y, z,
//! remission)`. Labels are one little-endian `u32` per point with the
//! semantic id in the low 16 bits and the instance id in the high 16 bits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of train ids including the ignore class 0.
pub const NUM_CLASSES: usize = 20;

const POINT_BYTES: usize = 16;
const LABEL_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub remission: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, remission: f32) -> Self {
        Point { x, y, z, remission }
    }

    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }
}

/// One LiDAR sweep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloudScan {
    pub points: Vec<Point>,
}

impl PointCloudScan {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloudScan { points }
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelScan {
    /// Train ids, `0..20`.
    pub semantic: Vec<u8>,
    /// Raw instance ids, carried through untouched.
    pub instance: Vec<u16>,
}

impl LabelScan {
    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }
}

/// Checks that a scan and its labels describe the same points.
pub fn check_pair(scan: &PointCloudScan, labels: &LabelScan) -> Result<()> {
    if scan.count() != labels.len() {
        return Err(Error::Input(format!(
            "scan has {} points but label file has {} entries",
            scan.count(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloudScan> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_point_cloud(&bytes).map_err(|reason| Error::malformed(path, reason))
}

fn decode_point_cloud(bytes: &[u8]) -> std::result::Result<PointCloudScan, String> {
    if !bytes.len().is_multiple_of(POINT_BYTES) {
        return Err(format!(
            "size {} is not a multiple of {POINT_BYTES} bytes",
            bytes.len()
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / POINT_BYTES);
    for (i, rec) in bytes.chunks_exact(POINT_BYTES).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        let p = Point::new(f(0), f(1), f(2), f(3));
        if ![p.x, p.y, p.z, p.remission].iter().all(|v| v.is_finite()) {
            return Err(format!("point {i} has a non-finite field"));
        }
        points.push(p);
    }
    Ok(PointCloudScan { points })
}

pub fn write_point_cloud(scan: &PointCloudScan, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(scan.count() * POINT_BYTES);
    for p in &scan.points {
        for v in [p.x, p.y, p.z, p.remission] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>, remap: &ClassRemap) -> Result<LabelScan> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % LABEL_BYTES != 0 {
        return Err(Error::malformed(
            path,
            format!("size {} is not a multiple of {LABEL_BYTES} bytes", bytes.len()),
        ));
    }
    let n = bytes.len() / LABEL_BYTES;
    let mut semantic = Vec::with_capacity(n);
    let mut instance = Vec::with_capacity(n);
    for word in bytes.chunks_exact(LABEL_BYTES) {
        let word = u32::from_le_bytes(word.try_into().unwrap());
        semantic.push(remap.to_train((word & 0xFFFF) as u16));
        instance.push((word >> 16) as u16);
    }
    Ok(LabelScan { semantic, instance })
}

/// Writes predictions in submission format: one `u32` raw id per point,
/// instance bits zero.
pub fn write_labels(labels: &[u8], remap: &ClassRemap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(labels.len() * LABEL_BYTES);
    for (i, &id) in labels.iter().enumerate() {
        if id as usize >= NUM_CLASSES {
            return Err(Error::Input(format!("label {i} has train id {id} >= {NUM_CLASSES}")));
        }
        bytes.extend_from_slice(&(remap.to_raw(id) as u32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Raw SemanticKITTI ids to the 20 train ids and back.
#[derive(Debug, Clone)]
pub struct ClassRemap {
    raw_to_train: Vec<u8>,
    train_to_raw: [u16; NUM_CLASSES],
    class_names: Vec<String>,
}

/// On-disk form of [`ClassRemap`]. Keys are decimal id strings.
///
/// ```json
/// { "class_names": ["car", ...19 names],
///   "learning_map": { "<raw id>": <train id>, ... },
///   "learning_map_inv": { "<train id>": <raw id>, ... } }
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassRemapFile {
    pub class_names: Vec<String>,
    pub learning_map: BTreeMap<String, u8>,
    pub learning_map_inv: BTreeMap<String, u16>,
}

const STANDARD_REMAP: &str = include_str!("../assets/semantic_kitti_remap.json");

impl ClassRemap {
    pub fn new(
        raw_to_train: &BTreeMap<u16, u8>,
        train_to_raw: &BTreeMap<u8, u16>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if class_names.len() != NUM_CLASSES - 1 {
            return Err(Error::Config(format!(
                "expected {} class names, got {}",
                NUM_CLASSES - 1,
                class_names.len()
            )));
        }
        let mut table = vec![0u8; u16::MAX as usize + 1];
        for (&raw, &train) in raw_to_train {
            if train as usize >= NUM_CLASSES {
                return Err(Error::Config(format!("raw id {raw} maps to train id {train}")));
            }
            table[raw as usize] = train;
        }
        let mut inv = [0u16; NUM_CLASSES];
        for train in 1..NUM_CLASSES as u8 {
            let raw = *train_to_raw.get(&train).ok_or_else(|| {
                Error::Config(format!("train id {train} has no inverse mapping"))
            })?;
            if table[raw as usize] != train {
                return Err(Error::Config(format!(
                    "train id {train} maps back to raw {raw}, which maps to {}",
                    table[raw as usize]
                )));
            }
            inv[train as usize] = raw;
        }
        inv[0] = train_to_raw.get(&0).copied().unwrap_or(0);
        Ok(ClassRemap {
            raw_to_train: table,
            train_to_raw: inv,
            class_names,
        })
    }

    /// The standard 19-class SemanticKITTI learning map.
    pub fn semantic_kitti() -> Self {
        Self::from_json(STANDARD_REMAP).expect("bundled remap table is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ClassRemapFile = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("remap table: {e}")))?;
        let parse = |k: &str| {
            k.parse::<u16>()
                .map_err(|_| Error::Config(format!("remap key {k:?} is not an integer id")))
        };
        let mut fwd = BTreeMap::new();
        for (k, &v) in &file.learning_map {
            fwd.insert(parse(k)?, v);
        }
        let mut inv = BTreeMap::new();
        for (k, &v) in &file.learning_map_inv {
            let k = parse(k)?;
            let k = u8::try_from(k)
                .map_err(|_| Error::Config(format!("train id {k} out of range")))?;
            inv.insert(k, v);
        }
        Self::new(&fwd, &inv, file.class_names)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Unknown raw ids map to the ignore class.
    #[inline]
    pub fn to_train(&self, raw: u16) -> u8 {
        self.raw_to_train[raw as usize]
    }

    #[inline]
    pub fn to_raw(&self, train: u8) -> u16 {
        self.train_to_raw[train as usize]
    }

    /// Names of train ids `1..20`.
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_name(&self, train: u8) -> &str {
        match train {
            0 => "unlabeled",
            t => &self.class_names[t as usize - 1],
        }
    }
}

impl Default for ClassRemap {
    fn default() -> Self {
        Self::semantic_kitti()
    }
}

/// Two-digit SemanticKITTI sequence number.
pub type SequenceId = u8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSplit {
    pub train: BTreeSet<SequenceId>,
    pub valid: BTreeSet<SequenceId>,
    pub test: BTreeSet<SequenceId>,
}

impl SequenceSplit {
    pub fn contains(&self, seq: SequenceId) -> bool {
        self.train.contains(&seq) || self.valid.contains(&seq) || self.test.contains(&seq)
    }
}

/// Train on 00–07, 09, 10; validate on 08; test on 11–21.
pub fn official_split() -> SequenceSplit {
    SequenceSplit {
        train: (0..=7).chain([9, 10]).collect(),
        valid: [8].into_iter().collect(),
        test: (11..=21).collect(),
    }
}

/// `<root>/sequences/<seq>/velodyne`.
pub fn scan_dir(root: impl AsRef<Path>, seq: SequenceId) -> PathBuf {
    root.as_ref()
        .join("sequences")
        .join(format!("{seq:02}"))
        .join("velodyne")
}

/// `<root>/sequences/<seq>/labels`.
pub fn label_dir(root: impl AsRef<Path>, seq: SequenceId) -> PathBuf {
    root.as_ref()
        .join("sequences")
        .join(format!("{seq:02}"))
        .join("labels")
}

/// Files under `dir` (recursively) with the given extension, sorted.
pub fn list_files(dir: impl AsRef<Path>, extension: &str) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, ext: &str, out: &mut Vec<PathBuf>) -> Result<()> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, ext, out)?;
            } else if path.extension().is_some_and(|e| e == ext) {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir.as_ref(), extension, &mut out)?;
    out.sort();
    Ok(out)
}
