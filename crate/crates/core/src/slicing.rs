//! Turns annotated full-resolution images into tile-level training records:
//! each box is clipped to every tile it touches and kept when enough of it is
//! visible. Tiles without annotations are kept as background examples.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{self, ClassMap, FormatError};
use crate::geometry::{clip_box, BBox};
use crate::scalar::Scalar;
use crate::tiling::{plan_grid, TileSpec, TilingError};

#[derive(Debug, Error)]
pub enum SliceError {
    #[error("min_visibility must lie in (0, 1], got {0}")]
    MinVisibility(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image {image_id}: {error}")]
    Tiling { image_id: u64, error: TilingError },
    #[error("image {image_id}: annotation {index} lies outside the {width}x{height} image")]
    OutsideImage {
        image_id: u64,
        index: usize,
        width: u32,
        height: u32,
    },
    #[error("writing {path}: {error} ({written} files written before the failure)")]
    Write {
        path: PathBuf,
        written: usize,
        error: io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Annotation<T> {
    pub class_id: u32,
    pub bbox: BBox<T>,
}

/// One full-resolution image and its boxes in global pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct AnnotatedImage<T> {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation<T>>,
}

impl<T: Scalar> AnnotatedImage<T> {
    /// Checks every box against the image bounds.
    pub fn validate(&self) -> Result<(), SliceError> {
        let rect = BBox::new(T::zero(), T::zero(), T::of_u32(self.width), T::of_u32(self.height))
            .expect("image dims are non-negative");
        for (index, a) in self.annotations.iter().enumerate() {
            if !rect.contains(&a.bbox) {
                return Err(SliceError::OutsideImage {
                    image_id: self.id,
                    index,
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceParams {
    pub tile_size: u32,
    pub stride: u32,
    pub min_visibility: f64,
}

impl Default for SliceParams {
    fn default() -> Self {
        Self {
            tile_size: 640,
            stride: 512,
            min_visibility: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct TileAnnotation<T> {
    pub class_id: u32,
    /// Clipped box in tile-local pixels.
    pub bbox: BBox<T>,
    pub visible_fraction: T,
    /// Index of the source box in the image's annotation list.
    pub source_index: usize,
    /// Whether the same source box is also retained in another tile.
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct TileRecord<T> {
    pub image_id: u64,
    pub file_name: String,
    pub tile: TileSpec,
    pub annotations: Vec<TileAnnotation<T>>,
    pub is_background: bool,
    /// The tile is smaller than the nominal tile size (image smaller than a
    /// tile); the backend is expected to letterbox it.
    pub undersized: bool,
}

impl<T> TileRecord<T> {
    /// File stem used for the tile's label and crop.
    pub fn stem(&self) -> String {
        let base = Path::new(&self.file_name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_id.to_string());
        format!("{base}_r{}_c{}", self.tile.row, self.tile.col)
    }
}

/// Slices one image; tiles come out row-major, annotations in source order.
pub fn slice_image<T: Scalar>(img: &AnnotatedImage<T>, params: &SliceParams) -> Result<Vec<TileRecord<T>>, SliceError> {
    if !(params.min_visibility > 0.0 && params.min_visibility <= 1.0) {
        return Err(SliceError::MinVisibility(params.min_visibility));
    }
    let grid = plan_grid(img.width, img.height, params.tile_size, params.stride).map_err(|error| SliceError::Tiling {
        image_id: img.id,
        error,
    })?;
    let min_vis = T::of(params.min_visibility);

    let mut records: Vec<TileRecord<T>> = grid
        .tiles()
        .iter()
        .map(|tile| {
            let rect = tile.rect::<T>();
            let (ox, oy) = tile.origin::<T>();
            let annotations: Vec<TileAnnotation<T>> = img
                .annotations
                .iter()
                .enumerate()
                .filter_map(|(source_index, a)| {
                    let (clipped, visible_fraction) = clip_box(&a.bbox, &rect);
                    let clipped = clipped?;
                    (visible_fraction >= min_vis).then(|| TileAnnotation {
                        class_id: a.class_id,
                        bbox: clipped.translate(-ox, -oy),
                        visible_fraction,
                        source_index,
                        shared: false,
                    })
                })
                .collect();
            TileRecord {
                image_id: img.id,
                file_name: img.file_name.clone(),
                tile: *tile,
                is_background: annotations.is_empty(),
                annotations,
                undersized: tile.width < params.tile_size || tile.height < params.tile_size,
            }
        })
        .collect();

    let mut uses = vec![0usize; img.annotations.len()];
    for a in records.iter().flat_map(|r| &r.annotations) {
        uses[a.source_index] += 1;
    }
    for a in records.iter_mut().flat_map(|r| &mut r.annotations) {
        a.shared = uses[a.source_index] > 1;
    }
    Ok(records)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub images: usize,
    pub tiles: usize,
    pub positive_tiles: usize,
    pub background_tiles: usize,
    pub positive_ratio: f64,
    pub undersized_tiles: usize,
    /// Retained annotations per class id.
    pub per_class: BTreeMap<u32, usize>,
    pub failed_images: Vec<u64>,
}

impl SliceSummary {
    fn add(&mut self, records: &[TileRecord<impl Scalar>]) {
        self.images += 1;
        for r in records {
            self.tiles += 1;
            if r.is_background {
                self.background_tiles += 1;
            } else {
                self.positive_tiles += 1;
            }
            if r.undersized {
                self.undersized_tiles += 1;
            }
            for a in &r.annotations {
                *self.per_class.entry(a.class_id).or_default() += 1;
            }
        }
        self.positive_ratio = if self.tiles == 0 {
            0.0
        } else {
            self.positive_tiles as f64 / self.tiles as f64
        };
    }
}

/// Slices every image (in parallel, output in input order). Images that fail
/// validation are reported in the summary and skipped.
pub fn slice_dataset<T: Scalar>(
    dataset: &[AnnotatedImage<T>],
    params: &SliceParams,
) -> Result<(Vec<TileRecord<T>>, SliceSummary), SliceError> {
    if dataset.is_empty() {
        return Err(SliceError::EmptyDataset);
    }
    if !(params.min_visibility > 0.0 && params.min_visibility <= 1.0) {
        return Err(SliceError::MinVisibility(params.min_visibility));
    }
    let per_image: Vec<Result<Vec<TileRecord<T>>, SliceError>> = dataset
        .par_iter()
        .map(|img| {
            img.validate()?;
            slice_image(img, params)
        })
        .collect();

    let mut summary = SliceSummary::default();
    let mut records = Vec::new();
    for (img, res) in dataset.iter().zip(per_image) {
        match res {
            Ok(r) => {
                summary.add(&r);
                records.extend(r);
            }
            Err(e) => {
                log::warn!("skipping image {}: {e}", img.id);
                summary.failed_images.push(img.id);
            }
        }
    }
    Ok((records, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelFormat {
    YoloTxt,
    CocoJson,
}

impl std::str::FromStr for LabelFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "yolo-txt" | "yolo" => Ok(Self::YoloTxt),
            "coco-json" | "coco" => Ok(Self::CocoJson),
            _ => Err(format!("unknown label format '{s}' (expected yolo-txt or coco-json)")),
        }
    }
}

/// Where to find source pixels when tile crops are wanted.
#[derive(Debug, Clone)]
pub struct CropSource {
    pub image_root: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmitReport {
    pub label_files: usize,
    pub crops: usize,
    pub crop_failures: Vec<String>,
}

struct Emitter {
    written: usize,
}

impl Emitter {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), SliceError> {
        let res = path
            .parent()
            .map_or(Ok(()), fs::create_dir_all)
            .and_then(|_| fs::File::create(path))
            .and_then(|mut f| f.write_all(bytes));
        match res {
            Ok(()) => {
                self.written += 1;
                Ok(())
            }
            Err(error) => {
                log::warn!("aborting label emission: {} files were already written", self.written);
                Err(SliceError::Write {
                    path: path.to_path_buf(),
                    written: self.written,
                    error,
                })
            }
        }
    }
}

/// Writes the tile dataset under `out_dir`:
///
/// * `labels/<stem>.txt` (yolo-txt) or `annotations.json` (coco-json),
/// * `tiles.json`, the tile manifest with per-tile annotation lists,
/// * `classes.txt` and `class_map.txt`,
/// * `images/<stem>.png` crops when `crops` is given and image decoding is
///   compiled in.
pub fn emit_training_labels<T: Scalar + Serialize>(
    records: &[TileRecord<T>],
    out_dir: &Path,
    format: LabelFormat,
    classes: &ClassMap,
    crops: Option<&CropSource>,
) -> Result<EmitReport, SliceError> {
    let mut em = Emitter { written: 0 };
    let mut report = EmitReport::default();
    match format {
        LabelFormat::YoloTxt => {
            for r in records {
                let mut text = String::new();
                for a in &r.annotations {
                    text.push_str(&formats::yolo_line(a.class_id, &a.bbox, r.tile.width, r.tile.height));
                    text.push('\n');
                }
                em.write(&out_dir.join("labels").join(format!("{}.txt", r.stem())), text.as_bytes())?;
                report.label_files += 1;
            }
        }
        LabelFormat::CocoJson => {
            let images: Vec<AnnotatedImage<T>> = records
                .iter()
                .enumerate()
                .map(|(i, r)| AnnotatedImage {
                    id: i as u64 + 1,
                    file_name: format!("{}.png", r.stem()),
                    width: r.tile.width,
                    height: r.tile.height,
                    annotations: r
                        .annotations
                        .iter()
                        .map(|a| Annotation {
                            class_id: a.class_id,
                            bbox: a.bbox,
                        })
                        .collect(),
                })
                .collect();
            em.write(&out_dir.join("annotations.json"), &formats::coco_bytes(&images, classes)?)?;
            report.label_files += 1;
        }
    }
    em.write(&out_dir.join("tiles.json"), &formats::to_json_bytes(&records)?)?;
    em.write(&out_dir.join("classes.txt"), classes.names_text().as_bytes())?;
    em.write(&out_dir.join("class_map.txt"), classes.map_text().as_bytes())?;

    if let Some(src) = crops {
        write_crops(records, out_dir, src, &mut report);
    }
    Ok(report)
}

#[cfg(feature = "imageio")]
fn write_crops<T>(records: &[TileRecord<T>], out_dir: &Path, src: &CropSource, report: &mut EmitReport) {
    let dir = out_dir.join("images");
    if let Err(e) = fs::create_dir_all(&dir) {
        report.crop_failures.push(format!("{}: {e}", dir.display()));
        return;
    }
    let mut cache: Option<(String, image::DynamicImage)> = None;
    for r in records {
        if cache.as_ref().is_none_or(|(name, _)| *name != r.file_name) {
            match image::open(src.image_root.join(&r.file_name)) {
                Ok(img) => cache = Some((r.file_name.clone(), img)),
                Err(e) => {
                    log::warn!("cannot read {}: {e}", r.file_name);
                    report.crop_failures.push(format!("{}: {e}", r.file_name));
                    cache = None;
                    continue;
                }
            }
        }
        let Some((_, img)) = &cache else { continue };
        let t = &r.tile;
        let crop = img.crop_imm(t.x0, t.y0, t.width, t.height);
        match crop.save(dir.join(format!("{}.png", r.stem()))) {
            Ok(()) => report.crops += 1,
            Err(e) => report.crop_failures.push(format!("{}: {e}", r.stem())),
        }
    }
}

#[cfg(not(feature = "imageio"))]
fn write_crops<T>(records: &[TileRecord<T>], _out_dir: &Path, _src: &CropSource, report: &mut EmitReport) {
    log::warn!("built without image support; skipping {} tile crops", records.len());
    report.crop_failures.push("image decoding not compiled in".to_string());
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

/// Seeded shuffle followed by a train/val/test cut. Train and val sizes are
/// rounded down; the remainder goes to test.
pub fn split_dataset(ids: &[u64], train: f64, val: f64, seed: u64) -> DatasetSplit {
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_train = ((n as f64) * train).floor() as usize;
    let n_val = (((n as f64) * val).floor() as usize).min(n - n_train);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    DatasetSplit {
        train: ids,
        val,
        test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(w: u32, h: u32, boxes: &[[f64; 4]]) -> AnnotatedImage<f64> {
        AnnotatedImage {
            id: 1,
            file_name: "board.png".into(),
            width: w,
            height: h,
            annotations: boxes
                .iter()
                .map(|b| Annotation {
                    class_id: 0,
                    bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
                })
                .collect(),
        }
    }

    #[test]
    fn interior_box_is_fully_visible() {
        let recs = slice_image(&image(1280, 640, &[[100.0, 100.0, 150.0, 150.0]]), &SliceParams::default()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].annotations.len(), 1);
        assert_eq!(recs[0].annotations[0].visible_fraction, 1.0);
        assert!(!recs[0].annotations[0].shared);
        assert!(recs[1].is_background && recs[2].is_background);
    }

    #[test]
    fn visibility_threshold_is_inclusive() {
        let params = SliceParams {
            tile_size: 640,
            stride: 640,
            min_visibility: 0.4,
        };
        // 40 of 100 px inside tile 0
        let recs = slice_image(&image(1280, 640, &[[600.0, 0.0, 700.0, 10.0]]), &params).unwrap();
        assert_eq!(recs[0].annotations[0].visible_fraction, 0.4);
        assert_eq!(recs[1].annotations[0].visible_fraction, 0.6);
        assert!(recs[0].annotations[0].shared);
        // 39 of 100 px
        let recs = slice_image(&image(1280, 640, &[[601.0, 0.0, 701.0, 10.0]]), &params).unwrap();
        assert!(recs[0].is_background);
        assert_eq!(recs[1].annotations[0].bbox.to_array(), [0.0, 0.0, 61.0, 10.0]);
    }

    #[test]
    fn straddling_box_on_stride_boundary() {
        // x = 512 is where the second tile starts; the first covers [0, 640)
        let recs = slice_image(&image(1280, 640, &[[448.0, 10.0, 576.0, 50.0]]), &SliceParams::default()).unwrap();
        let full: Vec<_> = recs.iter().filter(|r| r.annotations.iter().any(|a| a.visible_fraction == 1.0)).collect();
        assert!(!full.is_empty());
    }

    #[test]
    fn no_annotations_means_all_background() {
        let (recs, summary) = slice_dataset(&[image(2000, 1500, &[])], &SliceParams::default()).unwrap();
        assert!(recs.iter().all(|r| r.is_background));
        assert_eq!(summary.positive_ratio, 0.0);
        assert_eq!(summary.tiles, recs.len());
    }

    #[test]
    fn small_image_yields_one_undersized_tile() {
        let recs = slice_image(&image(500, 300, &[[0.0, 0.0, 10.0, 10.0]]), &SliceParams::default()).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].undersized);
        assert_eq!((recs[0].tile.width, recs[0].tile.height), (500, 300));
    }

    #[test]
    fn invalid_params_and_images() {
        let img = image(640, 640, &[]);
        let bad = SliceParams {
            min_visibility: 0.0,
            ..Default::default()
        };
        assert!(matches!(slice_image(&img, &bad), Err(SliceError::MinVisibility(_))));
        assert!(matches!(slice_dataset::<f64>(&[], &SliceParams::default()), Err(SliceError::EmptyDataset)));
        let outside = image(640, 640, &[[600.0, 600.0, 700.0, 700.0]]);
        let (_, summary) = slice_dataset(&[outside], &SliceParams::default()).unwrap();
        assert_eq!(summary.failed_images, vec![1]);
    }

    #[test]
    fn split_is_seeded_and_complete() {
        let ids: Vec<u64> = (0..100).collect();
        let a = split_dataset(&ids, 0.7, 0.15, 42);
        assert_eq!(a, split_dataset(&ids, 0.7, 0.15, 42));
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (70, 15, 15));
        let mut all: Vec<u64> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ids);
        assert_ne!(a, split_dataset(&ids, 0.7, 0.15, 7));
    }

    proptest! {
        #[test]
        fn stride_equal_tile_full_visibility_keeps_contained_boxes(
            w in 100u32..2000, h in 100u32..2000,
            boxes in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 1.0..300.0f64, 1.0..300.0f64), 0..10),
        ) {
            let boxes: Vec<[f64; 4]> = boxes
                .into_iter()
                .map(|(fx, fy, bw, bh)| {
                    let x1 = (fx * w as f64).floor().min(w as f64 - 1.0);
                    let y1 = (fy * h as f64).floor().min(h as f64 - 1.0);
                    [x1, y1, (x1 + bw.round()).min(w as f64), (y1 + bh.round()).min(h as f64)]
                })
                .collect();
            let img = image(w, h, &boxes);
            let params = SliceParams { tile_size: 640, stride: 640, min_visibility: 1.0 };
            let recs = slice_image(&img, &params).unwrap();
            for (i, a) in img.annotations.iter().enumerate() {
                let holders: Vec<_> = recs.iter().filter(|r| r.tile.rect::<f64>().contains(&a.bbox)).collect();
                let retained: Vec<_> = recs.iter().filter(|r| r.annotations.iter().any(|t| t.source_index == i)).collect();
                prop_assert_eq!(holders.len(), retained.len());
            }
        }
    }
}
