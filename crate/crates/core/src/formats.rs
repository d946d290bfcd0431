//! On-disk formats: the COCO subset, YOLO label trees, the detection
//! interchange stream, grid manifests, class maps and report tables.
//!
//! All text writers are deterministic: fixed key order and floats printed
//! with six decimals.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError};
use crate::merging::Detection;
use crate::scalar::Scalar;
use crate::slicing::{AnnotatedImage, Annotation};
use crate::tiling::{plan_grid, TileGrid, TileSpec};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {error}")]
    Io { path: PathBuf, error: io::Error },
    #[error("{path}: invalid JSON: {error}")]
    Json { path: PathBuf, error: serde_json::Error },
    #[error("{path}:{line}: {message}")]
    Line { path: PathBuf, line: usize, message: String },
    #[error("{} invalid record(s); first: {}", .0.len(), .0.first().map(|i| i.to_string()).unwrap_or_default())]
    Records(Vec<RecordIssue>),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FormatError {
    fn io(path: &Path, error: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            error,
        }
    }
}

/// A problem with one record of an input file; non-strict readers skip the
/// record and keep going.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordIssue {
    pub kind: String,
    pub id: Option<String>,
    pub message: String,
}

impl std::fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.id {
            Some(id) => write!(f, "{} {}: {}", self.kind, id, self.message),
            None => write!(f, "{}: {}", self.kind, self.message),
        }
    }
}

fn issue(kind: &str, id: Option<String>, message: impl Into<String>) -> RecordIssue {
    RecordIssue {
        kind: kind.to_string(),
        id,
        message: message.into(),
    }
}

// ---------------------------------------------------------------- JSON output

/// Wraps a serde_json formatter so every float is printed with six decimals.
pub struct SixDecimals<F>(pub F);

fn write_fixed<W: ?Sized + Write>(w: &mut W, v: f64) -> io::Result<()> {
    if !v.is_finite() {
        return w.write_all(b"null");
    }
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        w.write_all(b"0.000000")
    } else {
        w.write_all(s.as_bytes())
    }
}

impl<F: Formatter> Formatter for SixDecimals<F> {
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        write_fixed(w, v as f64)
    }
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write_fixed(w, v)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn end_object_key<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_key(w)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json_bytes<V: Serialize + ?Sized>(value: &V) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SixDecimals(PrettyFormatter::new()));
    value
        .serialize(&mut ser)
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Single-line JSON without a trailing newline.
pub fn to_json_line<V: Serialize + ?Sized>(value: &V) -> Result<String, FormatError> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SixDecimals(CompactFormatter));
    value
        .serialize(&mut ser)
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
    String::from_utf8(out).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| FormatError::io(path, e))
}

pub fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<(), FormatError> {
    write_bytes(path, &to_json_bytes(value)?)
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    serde_json::from_str(&text).map_err(|error| FormatError::Json {
        path: path.to_path_buf(),
        error,
    })
}

// ---------------------------------------------------------------- class maps

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub index: u32,
    pub name: String,
    /// Category id in the source annotation file, when there was one.
    pub source_id: Option<i64>,
}

/// Contiguous class indices `0..n` with names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    pub entries: Vec<ClassEntry>,
}

impl ClassMap {
    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        Self {
            entries: names
                .into_iter()
                .enumerate()
                .map(|(i, n)| ClassEntry {
                    index: i as u32,
                    name: n.into(),
                    source_id: None,
                })
                .collect(),
        }
    }

    /// Indices follow the category ids in ascending order.
    pub fn from_categories(mut cats: Vec<(i64, String)>) -> Self {
        cats.sort_by_key(|c| c.0);
        Self {
            entries: cats
                .into_iter()
                .enumerate()
                .map(|(i, (id, name))| ClassEntry {
                    index: i as u32,
                    name,
                    source_id: Some(id),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, index: u32) -> Option<&str> {
        self.entries.get(index as usize).map(|e| e.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<u32> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.index)
    }

    pub fn indices(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.index).collect()
    }

    /// One name per line, in index order.
    pub fn names_text(&self) -> String {
        self.entries.iter().map(|e| format!("{}\n", e.name)).collect()
    }

    /// `index<TAB>source id or -<TAB>name` per line.
    pub fn map_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                let src = e.source_id.map_or_else(|| "-".to_string(), |s| s.to_string());
                format!("{}\t{}\t{}\n", e.index, src, e.name)
            })
            .collect()
    }

    /// Reads either a plain names file or the tab-separated class map.
    pub fn read(path: &Path) -> Result<Self, FormatError> {
        let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        let lines: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.trim().is_empty()).collect();
        if !lines.is_empty() && lines.iter().all(|l| l.split('\t').count() == 3) {
            let mut entries = Vec::with_capacity(lines.len());
            for (i, l) in lines.iter().enumerate() {
                let parts: Vec<&str> = l.split('\t').collect();
                let bad = |m: &str| FormatError::Line {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: m.to_string(),
                };
                let index: u32 = parts[0].parse().map_err(|_| bad("class index is not an integer"))?;
                if index as usize != i {
                    return Err(bad("class indices must be 0..n in order"));
                }
                let source_id = match parts[1] {
                    "-" => None,
                    s => Some(s.parse().map_err(|_| bad("source id is not an integer"))?),
                };
                entries.push(ClassEntry {
                    index,
                    name: parts[2].to_string(),
                    source_id,
                });
            }
            return Ok(Self { entries });
        }
        Ok(Self::from_names(lines.iter().map(|l| l.trim().to_string())))
    }
}

/// Explicit class-name aliases (`alias = canonical` per line, `#` comments).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasMap(pub BTreeMap<String, String>);

impl AliasMap {
    pub fn read(path: &Path) -> Result<Self, FormatError> {
        let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (a, c) = line.split_once('=').ok_or_else(|| FormatError::Line {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected 'alias = canonical'".into(),
            })?;
            map.insert(a.trim().to_string(), c.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn resolve<'a>(&'a self, name: &'a str) -> &'a str {
        self.0.get(name).map_or(name, String::as_str)
    }
}

// ---------------------------------------------------------------------- COCO

#[derive(Debug, Deserialize)]
struct CocoImageIn {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotationIn {
    image_id: u64,
    category_id: i64,
    bbox: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct CocoCategoryIn {
    id: i64,
    name: String,
}

#[derive(Debug, Deserialize)]
struct CocoFileIn {
    images: Vec<serde_json::Value>,
    annotations: Vec<serde_json::Value>,
    categories: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Default)]
pub struct CocoReadOptions {
    /// Abort on the first batch of record errors instead of skipping records.
    pub strict: bool,
    pub aliases: AliasMap,
    /// Map category names onto this class list instead of deriving one.
    pub classes: Option<ClassMap>,
}

#[derive(Debug, Clone)]
pub struct CocoDataset {
    pub images: Vec<AnnotatedImage<f64>>,
    pub classes: ClassMap,
    pub issues: Vec<RecordIssue>,
    pub warnings: usize,
}

fn record_id(v: &serde_json::Value) -> Option<String> {
    v.get("id").map(|id| id.to_string())
}

pub fn read_coco(path: &Path, opts: &CocoReadOptions) -> Result<CocoDataset, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    parse_coco(&text, opts).map_err(|e| match e {
        FormatError::Json { error, .. } => FormatError::Json {
            path: path.to_path_buf(),
            error,
        },
        other => other,
    })
}

pub fn parse_coco(text: &str, opts: &CocoReadOptions) -> Result<CocoDataset, FormatError> {
    let raw: CocoFileIn = serde_json::from_str(text).map_err(|error| FormatError::Json {
        path: PathBuf::from("<coco>"),
        error,
    })?;
    let mut issues = Vec::new();
    let mut warnings = 0usize;

    let mut cats = Vec::new();
    for v in &raw.categories {
        match CocoCategoryIn::deserialize(v) {
            Ok(c) => cats.push((c.id, c.name)),
            Err(e) => issues.push(issue("category", record_id(v), e.to_string())),
        }
    }
    let derived = ClassMap::from_categories(cats.clone());
    let classes = opts.classes.clone().unwrap_or_else(|| derived.clone());
    let mut cat_to_class: HashMap<i64, u32> = HashMap::new();
    for (id, name) in &cats {
        let canonical = opts.aliases.resolve(name);
        match classes.index_of(canonical) {
            Some(idx) => {
                cat_to_class.insert(*id, idx);
            }
            None => issues.push(issue(
                "category",
                Some(id.to_string()),
                format!("name '{name}' matches no declared class"),
            )),
        }
    }

    let mut images: Vec<AnnotatedImage<f64>> = Vec::new();
    let mut by_id: HashMap<u64, usize> = HashMap::new();
    for v in &raw.images {
        match CocoImageIn::deserialize(v) {
            Ok(im) if im.width == 0 || im.height == 0 => {
                issues.push(issue("image", Some(im.id.to_string()), "zero width or height"))
            }
            Ok(im) => {
                if by_id.insert(im.id, images.len()).is_some() {
                    issues.push(issue("image", Some(im.id.to_string()), "duplicate image id"));
                    continue;
                }
                images.push(AnnotatedImage {
                    id: im.id,
                    file_name: im.file_name,
                    width: im.width,
                    height: im.height,
                    annotations: Vec::new(),
                });
            }
            Err(e) => issues.push(issue("image", record_id(v), e.to_string())),
        }
    }

    let mut ignored_extras = 0usize;
    for v in &raw.annotations {
        let id = record_id(v);
        let a = match CocoAnnotationIn::deserialize(v) {
            Ok(a) => a,
            Err(e) => {
                issues.push(issue("annotation", id, e.to_string()));
                continue;
            }
        };
        if v.get("segmentation").is_some_and(|s| !s.is_null() && s != &serde_json::json!([]))
            || v.get("iscrowd").and_then(|c| c.as_i64()).is_some_and(|c| c != 0)
        {
            ignored_extras += 1;
        }
        let Some(&slot) = by_id.get(&a.image_id) else {
            issues.push(issue("annotation", id, format!("references unknown image_id {}", a.image_id)));
            continue;
        };
        let Some(&class_id) = cat_to_class.get(&a.category_id) else {
            issues.push(issue("annotation", id, format!("references unknown category_id {}", a.category_id)));
            continue;
        };
        let &[x, y, w, h] = a.bbox.as_slice() else {
            issues.push(issue("annotation", id, format!("bbox has {} values, expected 4", a.bbox.len())));
            continue;
        };
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            issues.push(issue("annotation", id, "bbox contains a non-finite value"));
            continue;
        }
        if w < 0.0 || h < 0.0 {
            issues.push(issue("annotation", id, format!("negative extent w={w} h={h}")));
            continue;
        }
        if w == 0.0 || h == 0.0 {
            issues.push(issue("annotation", id, "zero-area bbox"));
            continue;
        }
        let img = &mut images[slot];
        let (iw, ih) = (img.width as f64, img.height as f64);
        let (x1, y1, x2, y2) = (x, y, x + w, y + h);
        let (cx1, cy1, cx2, cy2) = (x1.max(0.0), y1.max(0.0), x2.min(iw), y2.min(ih));
        if cx2 <= cx1 || cy2 <= cy1 {
            issues.push(issue("annotation", id, "bbox lies entirely outside the image"));
            continue;
        }
        if (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2) {
            log::warn!("annotation {} clipped to image {} bounds", id.as_deref().unwrap_or("?"), img.id);
            warnings += 1;
        }
        img.annotations.push(Annotation {
            class_id,
            bbox: BBox::new(cx1, cy1, cx2, cy2).expect("clipped box is well formed"),
        });
    }
    if ignored_extras > 0 {
        log::warn!("ignored segmentation/crowd fields on {ignored_extras} annotation(s)");
        warnings += 1;
    }
    if opts.strict && !issues.is_empty() {
        return Err(FormatError::Records(issues));
    }
    for i in &issues {
        log::warn!("skipped {i}");
    }
    Ok(CocoDataset {
        images,
        classes,
        issues,
        warnings,
    })
}

#[derive(Serialize)]
struct CocoImageOut<'a> {
    id: u64,
    file_name: &'a str,
    width: u32,
    height: u32,
}

#[derive(Serialize)]
struct CocoAnnotationOut {
    id: u64,
    image_id: u64,
    category_id: i64,
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
}

#[derive(Serialize)]
struct CocoCategoryOut<'a> {
    id: i64,
    name: &'a str,
}

#[derive(Serialize)]
struct CocoFileOut<'a> {
    images: Vec<CocoImageOut<'a>>,
    annotations: Vec<CocoAnnotationOut>,
    categories: Vec<CocoCategoryOut<'a>>,
}

/// Serializes images as the COCO subset. Category ids are the source ids
/// when known, otherwise the class indices.
pub fn coco_bytes<T: Scalar>(images: &[AnnotatedImage<T>], classes: &ClassMap) -> Result<Vec<u8>, FormatError> {
    let cat_id = |c: u32| -> Result<i64, FormatError> {
        classes
            .entries
            .get(c as usize)
            .map(|e| e.source_id.unwrap_or(e.index as i64))
            .ok_or_else(|| FormatError::Invalid(format!("class id {c} is not in the class map")))
    };
    let mut annotations = Vec::new();
    for img in images {
        for a in &img.annotations {
            let [x, y, w, h] = a.bbox.to_xywh().map(|v| v.as_f64());
            annotations.push(CocoAnnotationOut {
                id: annotations.len() as u64 + 1,
                image_id: img.id,
                category_id: cat_id(a.class_id)?,
                bbox: [x, y, w, h],
                area: w * h,
                iscrowd: 0,
            });
        }
    }
    let out = CocoFileOut {
        images: images
            .iter()
            .map(|i| CocoImageOut {
                id: i.id,
                file_name: &i.file_name,
                width: i.width,
                height: i.height,
            })
            .collect(),
        annotations,
        categories: classes
            .entries
            .iter()
            .map(|e| CocoCategoryOut {
                id: e.source_id.unwrap_or(e.index as i64),
                name: &e.name,
            })
            .collect(),
    };
    to_json_bytes(&out)
}

pub fn write_coco<T: Scalar>(path: &Path, images: &[AnnotatedImage<T>], classes: &ClassMap) -> Result<(), FormatError> {
    write_bytes(path, &coco_bytes(images, classes)?)
}

// ---------------------------------------------------------------------- YOLO

/// `class cx cy w h`, normalized by the frame dimensions.
pub fn yolo_line<T: Scalar>(class_id: u32, b: &BBox<T>, frame_w: u32, frame_h: u32) -> String {
    let (w, h) = (frame_w as f64, frame_h as f64);
    let (cx, cy) = b.center();
    format!(
        "{class_id} {:.6} {:.6} {:.6} {:.6}",
        cx.as_f64() / w,
        cy.as_f64() / h,
        b.width().as_f64() / w,
        b.height().as_f64() / h
    )
}

/// Parses one label line into the class and normalized `[cx, cy, w, h]`.
pub fn parse_yolo_line(line: &str) -> Result<(u32, [f64; 4]), String> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 5 {
        return Err(format!("expected 5 tokens, found {}", tokens.len()));
    }
    let class: u32 = tokens[0]
        .parse()
        .map_err(|_| format!("class '{}' is not a non-negative integer", tokens[0]))?;
    let mut v = [0.0; 4];
    for (slot, (tok, name)) in v.iter_mut().zip(tokens[1..].iter().zip(["cx", "cy", "w", "h"])) {
        let x: f64 = tok.parse().map_err(|_| format!("{name} '{tok}' is not a number"))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(format!("{name} = {x} outside [0, 1]"));
        }
        *slot = x;
    }
    Ok((class, v))
}

/// Converts normalized `[cx, cy, w, h]` to a pixel box clamped to the frame.
pub fn denormalize_yolo(v: [f64; 4], frame_w: u32, frame_h: u32) -> Result<BBox<f64>, GeometryError> {
    let (w, h) = (frame_w as f64, frame_h as f64);
    let [cx, cy, bw, bh] = v;
    let x1 = ((cx - bw / 2.0) * w).clamp(0.0, w);
    let y1 = ((cy - bh / 2.0) * h).clamp(0.0, h);
    let x2 = ((cx + bw / 2.0) * w).clamp(0.0, w);
    let y2 = ((cy + bh / 2.0) * h).clamp(0.0, h);
    BBox::new(x1, y1, x2, y2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

fn label_stem(file_name: &str) -> String {
    Path::new(file_name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file_name.to_string())
}

#[derive(Debug, Clone)]
pub struct YoloDataset {
    pub images: Vec<AnnotatedImage<f64>>,
    pub classes: ClassMap,
    pub issues: Vec<RecordIssue>,
}

/// Reads `<labels_dir>/<stem>.txt` for every image. A missing or empty label
/// file means a background image; bad lines are reported and skipped.
pub fn read_yolo(labels_dir: &Path, images: &[ImageMeta], class_file: &Path, strict: bool) -> Result<YoloDataset, FormatError> {
    let classes = ClassMap::read(class_file)?;
    let mut issues = Vec::new();
    let mut out = Vec::with_capacity(images.len());
    for meta in images {
        let path = labels_dir.join(format!("{}.txt", label_stem(&meta.file_name)));
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                log::debug!("no label file for {}", meta.file_name);
                String::new()
            }
            Err(e) => return Err(FormatError::io(&path, e)),
        };
        let mut annotations = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let where_ = Some(format!("{}:{}", path.display(), i + 1));
            match parse_yolo_line(line) {
                Ok((c, _)) if c as usize >= classes.len() => {
                    issues.push(issue("label", where_, format!("class {c} not in class file")))
                }
                Ok((c, v)) => match denormalize_yolo(v, meta.width, meta.height) {
                    Ok(bbox) => annotations.push(Annotation { class_id: c, bbox }),
                    Err(e) => issues.push(issue("label", where_, e.to_string())),
                },
                Err(m) => issues.push(issue("label", where_, m)),
            }
        }
        out.push(AnnotatedImage {
            id: meta.id,
            file_name: meta.file_name.clone(),
            width: meta.width,
            height: meta.height,
            annotations,
        });
    }
    if strict && !issues.is_empty() {
        return Err(FormatError::Records(issues));
    }
    Ok(YoloDataset {
        images: out,
        classes,
        issues,
    })
}

/// Writes one label file per image under `labels_dir`.
pub fn write_yolo<T: Scalar>(labels_dir: &Path, images: &[AnnotatedImage<T>]) -> Result<(), FormatError> {
    for img in images {
        let text: String = img
            .annotations
            .iter()
            .map(|a| yolo_line(a.class_id, &a.bbox, img.width, img.height) + "\n")
            .collect();
        write_bytes(&labels_dir.join(format!("{}.txt", label_stem(&img.file_name))), text.as_bytes())?;
    }
    Ok(())
}

/// Lists `<root>/images` and reads dimensions from the image headers; ids
/// follow the sorted file names starting at 1.
#[cfg(feature = "imageio")]
pub fn scan_image_dir(dir: &Path) -> Result<Vec<ImageMeta>, FormatError> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| FormatError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| {
            let lower = n.to_ascii_lowercase();
            [".png", ".jpg", ".jpeg"].iter().any(|x| lower.ends_with(x))
        })
        .collect();
    names.sort();
    names
        .into_iter()
        .enumerate()
        .map(|(i, file_name)| {
            let path = dir.join(&file_name);
            let (width, height) = image::image_dimensions(&path).map_err(|e| FormatError::Invalid(format!("{}: {e}", path.display())))?;
            Ok(ImageMeta {
                id: i as u64 + 1,
                file_name,
                width,
                height,
            })
        })
        .collect()
}

// ---------------------------------------------------------- detection stream

/// One detection in the interchange stream. Field order is the on-disk key
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    #[serde(default)]
    pub strategy: String,
    #[serde(default)]
    pub tile: Option<TileSpec>,
    #[serde(default)]
    pub box_tile: Option<[f64; 4]>,
    pub box_global: [f64; 4],
    pub score: f64,
    pub class_id: u32,
    #[serde(default)]
    pub class_name: String,
    #[serde(default)]
    pub boundary_distance: Option<f64>,
    #[serde(default)]
    pub agreement: Option<f64>,
    #[serde(default)]
    pub adjusted_score: Option<f64>,
}

fn check_box(field: &str, b: &[f64; 4]) -> Result<(), String> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err(format!("field {field} contains a non-finite value"));
    }
    if b[2] < b[0] || b[3] < b[1] {
        return Err(format!("field {field} has x2 < x1 or y2 < y1"));
    }
    Ok(())
}

impl DetectionRecord {
    pub fn validate(&self) -> Result<(), String> {
        for (field, v) in [
            ("score", Some(self.score)),
            ("agreement", self.agreement),
            ("adjusted_score", self.adjusted_score),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("field {field} = {v} outside [0, 1]"));
                }
            }
        }
        if let Some(d) = self.boundary_distance {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(format!("field boundary_distance = {d} must be a finite value >= 0"));
            }
        }
        check_box("box_global", &self.box_global)?;
        if let Some(b) = &self.box_tile {
            check_box("box_tile", b)?;
        }
        if self.box_tile.is_some() != self.tile.is_some() {
            return Err("fields tile and box_tile must both be present or both be null".into());
        }
        Ok(())
    }

    pub fn from_detection<T: Scalar>(image_id: u64, strategy: &str, det: &Detection<T>, classes: Option<&ClassMap>) -> Self {
        let arr = |b: &BBox<T>| b.to_array().map(|v| v.as_f64());
        Self {
            image_id,
            strategy: strategy.to_string(),
            tile: det.tile,
            box_tile: det.box_tile.as_ref().map(arr),
            box_global: arr(&det.box_global),
            score: det.score.as_f64(),
            class_id: det.class_id,
            class_name: classes
                .and_then(|c| c.name(det.class_id))
                .unwrap_or_default()
                .to_string(),
            boundary_distance: det.boundary.map(|b| b.min.as_f64()),
            agreement: det.agreement.map(|v| v.as_f64()),
            adjusted_score: det.adjusted_score.map(|v| v.as_f64()),
        }
    }

    /// Rebuilds a detection. Boundary information is recomputed by the
    /// merger, so it is not carried over.
    pub fn to_detection<T: Scalar>(&self) -> Result<Detection<T>, GeometryError> {
        let mk = |b: &[f64; 4]| BBox::new(T::of(b[0]), T::of(b[1]), T::of(b[2]), T::of(b[3]));
        let mut det = Detection::full_image(self.class_id, T::of(self.score), mk(&self.box_global)?);
        det.tile = self.tile;
        det.box_tile = self.box_tile.as_ref().map(mk).transpose()?;
        det.agreement = self.agreement.map(T::of);
        det.adjusted_score = self.adjusted_score.map(T::of);
        Ok(det)
    }
}

pub fn detections_to_string(records: &[DetectionRecord]) -> Result<String, FormatError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&to_json_line(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<(), FormatError> {
    write_bytes(path, detections_to_string(records)?.as_bytes())
}

/// Reads newline-delimited records; blank lines are skipped and unknown keys
/// ignored. `origin` names the source in error messages.
pub fn read_detections_from<R: Read>(reader: R, origin: &Path) -> Result<Vec<DetectionRecord>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| FormatError::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| FormatError::Line {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        rec.validate().map_err(bad)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>, FormatError> {
    let f = fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    read_detections_from(f, path)
}

// -------------------------------------------------------------- grid manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridManifest {
    pub image_id: u64,
    pub image_w: u32,
    pub image_h: u32,
    pub tile_size: u32,
    pub stride: u32,
    pub tiles: Vec<TileSpec>,
}

impl GridManifest {
    pub fn from_grid(image_id: u64, grid: &TileGrid) -> Self {
        Self {
            image_id,
            image_w: grid.image_w,
            image_h: grid.image_h,
            tile_size: grid.tile_size,
            stride: grid.stride,
            tiles: grid.tiles().to_vec(),
        }
    }

    /// Re-plans the grid and checks the tiles agree with the manifest.
    pub fn to_grid(&self) -> Result<TileGrid, FormatError> {
        let grid = plan_grid(self.image_w, self.image_h, self.tile_size, self.stride)
            .map_err(|e| FormatError::Invalid(format!("grid manifest for image {}: {e}", self.image_id)))?;
        if grid.tiles() != self.tiles.as_slice() {
            return Err(FormatError::Invalid(format!(
                "grid manifest for image {} does not match the planned grid",
                self.image_id
            )));
        }
        Ok(grid)
    }
}

// --------------------------------------------------------------------- tables

/// A rectangular report table rendered as CSV or Markdown.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Six-decimal cell; `-` for a missing value.
pub fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl Table {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(columns: I) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String, FormatError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| FormatError::Invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| FormatError::Invalid(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let esc = |s: &str| s.replace('|', "\\|");
        let mut out = format!("| {} |\n", self.columns.iter().map(|c| esc(c)).collect::<Vec<_>>().join(" | "));
        out.push_str(&format!("|{}\n", "---|".repeat(self.columns.len())));
        for r in &self.rows {
            out.push_str(&format!("| {} |\n", r.iter().map(|c| esc(c)).collect::<Vec<_>>().join(" | ")));
        }
        out
    }
}

/// Writes `<name>.json`, `<name>.csv` and `<name>.md` under `dir`.
pub fn write_report<V: Serialize + ?Sized>(dir: &Path, name: &str, json: &V, table: &Table) -> Result<(), FormatError> {
    write_json(&dir.join(format!("{name}.json")), json)?;
    write_bytes(&dir.join(format!("{name}.csv")), table.to_csv()?.as_bytes())?;
    write_bytes(&dir.join(format!("{name}.md")), table.to_markdown().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "images": [{"id": 3, "file_name": "a.png", "width": 100, "height": 200}],
        "annotations": [{"id": 9, "image_id": 3, "category_id": 5, "bbox": [10, 20, 30, 40]}],
        "categories": [{"id": 5, "name": "short"}, {"id": 2, "name": "open"}]
    }"#;

    #[test]
    fn coco_minimal() {
        let ds = parse_coco(MINIMAL, &CocoReadOptions::default()).unwrap();
        assert_eq!(ds.images.len(), 1);
        let a = ds.images[0].annotations[0];
        assert_eq!(a.bbox.to_array(), [10.0, 20.0, 40.0, 60.0]);
        // categories sorted by id: open=0, short=1
        assert_eq!(a.class_id, 1);
        assert_eq!(ds.classes.name(0), Some("open"));
    }

    #[test]
    fn coco_bad_reference_names_annotation() {
        let text = MINIMAL.replace("\"image_id\": 3", "\"image_id\": 4");
        let ds = parse_coco(&text, &CocoReadOptions::default()).unwrap();
        assert_eq!(ds.issues.len(), 1);
        assert_eq!(ds.issues[0].id.as_deref(), Some("9"));
        assert!(ds.issues[0].message.contains("unknown image_id 4"));
        let strict = CocoReadOptions {
            strict: true,
            ..Default::default()
        };
        let err = parse_coco(&text, &strict).unwrap_err();
        assert!(err.to_string().contains("annotation 9"));
    }

    #[test]
    fn coco_negative_and_overflowing_boxes() {
        let text = MINIMAL.replace("[10, 20, 30, 40]", "[10, 20, -3, 40]");
        assert!(parse_coco(&text, &CocoReadOptions::default()).unwrap().issues[0].message.contains("negative"));
        let text = MINIMAL.replace("[10, 20, 30, 40]", "[90, 20, 30, 40]");
        let ds = parse_coco(&text, &CocoReadOptions::default()).unwrap();
        assert_eq!(ds.images[0].annotations[0].bbox.to_array(), [90.0, 20.0, 100.0, 60.0]);
        assert_eq!(ds.warnings, 1);
        let text = MINIMAL.replace("[10, 20, 30, 40]", "[150, 20, 30, 40]");
        assert_eq!(parse_coco(&text, &CocoReadOptions::default()).unwrap().issues.len(), 1);
    }

    #[test]
    fn coco_aliases_map_names() {
        let classes = ClassMap::from_names(["missing_hole", "short"]);
        let mut aliases = AliasMap::default();
        aliases.0.insert("open".into(), "missing_hole".into());
        let opts = CocoReadOptions {
            strict: true,
            aliases,
            classes: Some(classes),
        };
        let ds = parse_coco(MINIMAL, &opts).unwrap();
        assert_eq!(ds.images[0].annotations[0].class_id, 1);
        let no_alias = CocoReadOptions {
            strict: true,
            classes: Some(ClassMap::from_names(["missing_hole", "short"])),
            ..Default::default()
        };
        assert!(parse_coco(MINIMAL, &no_alias).is_err());
    }

    #[test]
    fn coco_round_trip() {
        let ds = parse_coco(MINIMAL, &CocoReadOptions::default()).unwrap();
        let bytes = coco_bytes(&ds.images, &ds.classes).unwrap();
        let again = parse_coco(std::str::from_utf8(&bytes).unwrap(), &CocoReadOptions::default()).unwrap();
        assert_eq!(again.images, ds.images);
        assert_eq!(again.classes, ds.classes);
        assert_eq!(coco_bytes(&again.images, &again.classes).unwrap(), bytes);
    }

    #[test]
    fn yolo_lines() {
        let full = BBox::new(0.0, 0.0, 640.0, 640.0).unwrap();
        assert_eq!(yolo_line(2, &full, 640, 640), "2 0.500000 0.500000 1.000000 1.000000");
        let half = BBox::new(160.0, 160.0, 480.0, 480.0).unwrap();
        assert_eq!(yolo_line(0, &half, 640, 640), "0 0.500000 0.500000 0.500000 0.500000");
        let (c, v) = parse_yolo_line("0 0.5 0.5 1.0 1.0").unwrap();
        assert_eq!(c, 0);
        assert_eq!(denormalize_yolo(v, 100, 200).unwrap().to_array(), [0.0, 0.0, 100.0, 200.0]);
        assert!(parse_yolo_line("0 0.5 0.5 1.0").unwrap_err().contains("5 tokens"));
        assert!(parse_yolo_line("0 0.5 1.5 1.0 1.0").unwrap_err().contains("cy"));
    }

    #[test]
    fn detection_score_out_of_range() {
        let line = r#"{"image_id":1,"box_global":[0,0,1,1],"score":1.2,"class_id":0,"extra":true}"#;
        let err = read_detections_from(line.as_bytes(), Path::new("d.jsonl")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("d.jsonl:1") && msg.contains("score"), "{msg}");
        assert!(read_detections_from(&b""[..], Path::new("e")).unwrap().is_empty());
        let ok = line.replace("1.2", "0.5");
        let recs = read_detections_from(ok.as_bytes(), Path::new("d")).unwrap();
        assert_eq!(recs[0].score, 0.5);
    }

    #[test]
    fn six_decimal_floats() {
        #[derive(Serialize)]
        struct S {
            a: f64,
            b: f32,
            c: u32,
            d: Option<f64>,
        }
        let s = to_json_line(&S {
            a: 1.0 / 3.0,
            b: 2.0,
            c: 7,
            d: Some(-1e-9),
        })
        .unwrap();
        assert_eq!(s, r#"{"a":0.333333,"b":2.000000,"c":7,"d":0.000000}"#);
    }

    #[test]
    fn tables() {
        let mut t = Table::new(["Method", "mAP@50"]);
        t.push(vec!["Full-640".into(), cell(Some(0.5))]);
        t.push(vec!["Tile|x".into(), cell(None)]);
        assert_eq!(t.to_csv().unwrap(), "Method,mAP@50\nFull-640,0.500000\nTile|x,-\n");
        assert_eq!(
            t.to_markdown(),
            "| Method | mAP@50 |\n|---|---|\n| Full-640 | 0.500000 |\n| Tile\\|x | - |\n"
        );
    }
}
