//! Dataset files, the shared scene store, and frame patches.
//!
//! A dataset is a JSON manifest next to four JSON-lines record files and an
//! optional `frames/{vid}/{fid}.png` image tree. See `docs/formats.md`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use image::{Rgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use scenequery_core::dsl::Arity;
use scenequery_core::scene::{
    ActiveDomains, AttributeRecord, FrameIdx, FrameRecord, ObjectRecord, RelationshipRecord, SceneError, VideoId,
};
use scenequery_core::{BBox, SceneTables, UnitId};

pub const MANIFEST_FORMAT: &str = "scenequery-dataset/1";

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed manifest: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("{file}:{line}: malformed record: {message}")]
    Record { file: PathBuf, line: usize, message: String },
    #[error("{file}:{line}: {source}")]
    Invariant { file: PathBuf, line: usize, source: SceneError },
    #[error("{0}")]
    Scene(#[from] SceneError),
    #[error("frame (vid {vid}, fid {fid}) has no image")]
    MissingImage { vid: VideoId, fid: FrameIdx },
    #[error("{path}: cannot decode image: {message}")]
    Image { path: PathBuf, message: String },
    #[error("box ({}, {}, {}, {}) is outside the {width}x{height} frame", .bbox.x1, .bbox.y1, .bbox.x2, .bbox.y2)]
    BoxOutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("a patch needs one or two boxes, got {0}")]
    BoxCount(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |source| StorageError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_format")]
    pub format: String,
    pub width: u32,
    pub height: u32,
    pub frames: String,
    pub objects: String,
    pub relationships: String,
    pub attributes: String,
    /// Predicate descriptions for the concepts already in the tables.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub descriptions: BTreeMap<String, String>,
    /// Program UDF metadata files to evaluate and materialize at ingest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub udfs: Vec<String>,
}

fn default_format() -> String {
    MANIFEST_FORMAT.to_string()
}

impl Manifest {
    pub fn standard(width: u32, height: u32) -> Self {
        Self {
            format: default_format(),
            width,
            height,
            frames: "frames.jsonl".into(),
            objects: "objects.jsonl".into(),
            relationships: "relationships.jsonl".into(),
            attributes: "attributes.jsonl".into(),
            descriptions: BTreeMap::new(),
            udfs: Vec::new(),
        }
    }
}

/// Conventional image location for a frame, relative to the dataset root.
pub fn frame_image_path(vid: VideoId, fid: FrameIdx) -> String {
    format!("frames/{vid}/{fid}.png")
}

/// Which region of a patch keeps its pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mask {
    #[default]
    None,
    KeepFirst,
    KeepSecond,
}

pub const SUBJECT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const TARGET_COLOR: Rgb<u8> = Rgb([0, 0, 255]);
const OVERLAY_THICKNESS: i32 = 2;
const IMAGE_CACHE: usize = 64;

/// Lazy frame-pixel access.
pub trait ImageSource: Send + Sync {
    fn frame_image(&self, vid: VideoId, fid: FrameIdx) -> Result<Arc<RgbImage>, StorageError>;
}

/// Scene tables plus the dataset they came from. One writer, many readers.
pub struct Store {
    root: Option<PathBuf>,
    manifest: Manifest,
    tables: RwLock<SceneTables>,
    /// Frames held in memory; consulted before image references.
    pinned: BTreeMap<(VideoId, FrameIdx), Arc<RgbImage>>,
    images: Mutex<(BTreeMap<(VideoId, FrameIdx), Arc<RgbImage>>, VecDeque<(VideoId, FrameIdx)>)>,
}

impl Store {
    /// Wraps in-memory tables. Image references resolve against `root`.
    pub fn from_tables(tables: SceneTables, root: Option<PathBuf>) -> Self {
        let manifest = Manifest::standard(tables.width(), tables.height());
        Self { root, manifest, tables: RwLock::new(tables), pinned: BTreeMap::new(), images: Mutex::default() }
    }

    pub fn ingest(manifest_path: &Path) -> Result<Self, StorageError> {
        let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|source| StorageError::Manifest { path: manifest_path.to_path_buf(), source })?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut tables = SceneTables::new(manifest.width, manifest.height);

        let path = root.join(&manifest.frames);
        for_each_record::<FrameRecord>(&path, |line, rec| {
            tables.insert_frame(rec).map_err(|source| StorageError::Invariant { file: path.clone(), line, source })
        })?;
        tables
            .check_complete()
            .map_err(|source| StorageError::Invariant { file: path.clone(), line: 0, source })?;
        let path = root.join(&manifest.objects);
        for_each_record::<ObjectRecord>(&path, |line, rec| {
            tables.insert_object(rec).map_err(|source| StorageError::Invariant { file: path.clone(), line, source })
        })?;
        let path = root.join(&manifest.relationships);
        for_each_record::<RelationshipRecord>(&path, |line, rec| {
            tables
                .insert_relationship(rec)
                .map_err(|source| StorageError::Invariant { file: path.clone(), line, source })
        })?;
        let path = root.join(&manifest.attributes);
        for_each_record::<AttributeRecord>(&path, |line, rec| {
            tables.insert_attribute(rec).map_err(|source| StorageError::Invariant { file: path.clone(), line, source })
        })?;
        Ok(Self { root: Some(root), manifest, tables: RwLock::new(tables), pinned: BTreeMap::new(), images: Mutex::default() })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn read(&self) -> RwLockReadGuard<'_, SceneTables> {
        self.tables.read().unwrap_or_else(|e| e.into_inner())
    }

    /// Runs `f` under the write lock.
    pub fn write<T>(&self, f: impl FnOnce(&mut SceneTables) -> T) -> T {
        let mut guard = self.tables.write().unwrap_or_else(|e| e.into_inner());
        f(&mut guard)
    }

    pub fn active_domains(&self) -> ActiveDomains {
        self.read().active_domains()
    }

    pub fn has_images(&self) -> bool {
        self.read().frames().next().is_some_and(|(_, _, f)| f.image_ref.is_some())
    }

    pub fn sample_tuples(
        &self,
        arity: Arity,
        n: usize,
        class_filter: Option<&BTreeSet<String>>,
        seed: u64,
    ) -> Result<Vec<UnitId>, StorageError> {
        Ok(self.read().sample_units(arity, n, class_filter, seed)?)
    }

    /// Writes the manifest and canonical record files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), StorageError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tables = self.read();
        let m = &self.manifest;
        write_records(&dir.join(&m.frames), tables.frame_records())?;
        write_records(&dir.join(&m.objects), tables.object_records())?;
        write_records(&dir.join(&m.relationships), tables.relationship_records())?;
        write_records(&dir.join(&m.attributes), tables.attribute_records())?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(m).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    pub fn set_manifest(&mut self, manifest: Manifest) {
        self.manifest = manifest;
    }

    /// Keeps `image` in memory as the pixels of frame `(vid, fid)`.
    pub fn pin_image(&mut self, vid: VideoId, fid: FrameIdx, image: RgbImage) {
        self.pinned.insert((vid, fid), Arc::new(image));
    }

    /// Crops the minimal box around `boxes` after masking and overlays.
    ///
    /// Masking blacks out everything outside the kept box; overlays outline
    /// the first box in red and the second in blue.
    pub fn get_frame_patch(
        &self,
        vid: VideoId,
        fid: FrameIdx,
        boxes: &[BBox],
        overlay: bool,
        mask: Mask,
    ) -> Result<RgbImage, StorageError> {
        let frame = self.frame_image(vid, fid)?;
        frame_patch(&frame, boxes, overlay, mask)
    }
}

impl ImageSource for Store {
    fn frame_image(&self, vid: VideoId, fid: FrameIdx) -> Result<Arc<RgbImage>, StorageError> {
        if let Some(img) = self.pinned.get(&(vid, fid)) {
            return Ok(img.clone());
        }
        {
            let cache = self.images.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(img) = cache.0.get(&(vid, fid)) {
                return Ok(img.clone());
            }
        }
        let image_ref = self
            .read()
            .frame(vid, fid)
            .and_then(|f| f.image_ref.clone())
            .ok_or(StorageError::MissingImage { vid, fid })?;
        let path = match &self.root {
            Some(root) => root.join(&image_ref),
            None => PathBuf::from(&image_ref),
        };
        let img = image::open(&path)
            .map_err(|e| StorageError::Image { path: path.clone(), message: e.to_string() })?
            .to_rgb8();
        let img = Arc::new(img);
        let mut cache = self.images.lock().unwrap_or_else(|e| e.into_inner());
        if cache.0.insert((vid, fid), img.clone()).is_none() {
            cache.1.push_back((vid, fid));
            if cache.1.len() > IMAGE_CACHE {
                if let Some(old) = cache.1.pop_front() {
                    cache.0.remove(&old);
                }
            }
        }
        Ok(img)
    }
}

/// Patch extraction on an already loaded frame.
pub fn frame_patch(frame: &RgbImage, boxes: &[BBox], overlay: bool, mask: Mask) -> Result<RgbImage, StorageError> {
    if boxes.is_empty() || boxes.len() > 2 {
        return Err(StorageError::BoxCount(boxes.len()));
    }
    let (width, height) = frame.dimensions();
    for b in boxes {
        if !b.is_proper() || !b.within(width, height) {
            return Err(StorageError::BoxOutOfBounds { bbox: *b, width, height });
        }
    }
    let mut img = frame.clone();
    let keep = match mask {
        Mask::None => None,
        Mask::KeepFirst => Some(boxes[0]),
        Mask::KeepSecond => Some(*boxes.get(1).ok_or(StorageError::BoxCount(1))?),
    };
    if let Some(k) = keep {
        for (x, y, px) in img.enumerate_pixels_mut() {
            if !k.contains_point(x as i32, y as i32) {
                *px = Rgb([0, 0, 0]);
            }
        }
    }
    if overlay {
        draw_outline(&mut img, boxes[0], SUBJECT_COLOR);
        if let Some(b) = boxes.get(1) {
            draw_outline(&mut img, *b, TARGET_COLOR);
        }
    }
    let crop = boxes.iter().skip(1).fold(boxes[0], |acc, b| acc.union(b));
    Ok(image::imageops::crop_imm(&img, crop.x1 as u32, crop.y1 as u32, crop.width() as u32, crop.height() as u32)
        .to_image())
}

fn draw_outline(img: &mut RgbImage, b: BBox, color: Rgb<u8>) {
    for y in b.y1..b.y2 {
        for x in b.x1..b.x2 {
            let edge = x - b.x1 < OVERLAY_THICKNESS
                || b.x2 - 1 - x < OVERLAY_THICKNESS
                || y - b.y1 < OVERLAY_THICKNESS
                || b.y2 - 1 - y < OVERLAY_THICKNESS;
            if edge {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

fn for_each_record<T: DeserializeOwned>(
    path: &Path,
    mut f: impl FnMut(usize, T) -> Result<(), StorageError>,
) -> Result<(), StorageError> {
    let file = File::open(path).map_err(io_err(path))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| StorageError::Record {
            file: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        f(i + 1, rec)?;
    }
    Ok(())
}

pub fn write_records<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<(), StorageError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for rec in records {
        serde_json::to_writer(&mut out, &rec).expect("records serialize");
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}
