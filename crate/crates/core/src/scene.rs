//! Scene annotations, density grids and annotation file I/O.
//!
//! Axis convention used throughout the crate: `x` is horizontal, `y` is
//! vertical. Cell index `u` counts cells along `x` (columns of the grid) and
//! `v` counts cells along `y` (rows). Cells are half-open, so a point lying
//! on a shared edge belongs to the higher-index cell.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box extent of an annotated head, used for per-point evaluation radii.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxExtent {
    pub h: f64,
    pub w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthPoint {
    pub x: f64,
    pub y: f64,
    pub extent: Option<BoxExtent>,
}

impl GroundTruthPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, extent: None }
    }

    pub fn with_box(x: f64, y: f64, h: f64, w: f64) -> Self {
        Self {
            x,
            y,
            extent: Some(BoxExtent { h, w }),
        }
    }
}

/// Size of one grid cell in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellSize {
    pub w: u32,
    pub h: u32,
}

impl CellSize {
    pub fn new(w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::invalid("cell", "cell sizes must be positive"));
        }
        Ok(Self { w, h })
    }

    pub fn square(side: u32) -> Result<Self> {
        Self::new(side, side)
    }

    /// Cell containing `(x, y)` under the half-open convention.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        (
            (x / f64::from(self.w)).floor() as usize,
            (y / f64::from(self.h)).floor() as usize,
        )
    }
}

/// An annotated image: its size and head points.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    width: u32,
    height: u32,
    points: Vec<GroundTruthPoint>,
}

impl Scene {
    /// Builds a scene, rejecting points outside `[0, width) x [0, height)`
    /// and malformed box extents.
    pub fn new(width: u32, height: u32, points: Vec<GroundTruthPoint>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("scene", "width and height must be positive"));
        }
        let (w, h) = (f64::from(width), f64::from(height));
        let offending: Vec<usize> = points
            .iter()
            .enumerate()
            .filter(|(_, p)| !(p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h))
            .map(|(i, _)| i)
            .collect();
        if !offending.is_empty() {
            return Err(Error::OutOfBounds { indices: offending });
        }
        for (i, p) in points.iter().enumerate() {
            if let Some(b) = p.extent {
                if !(b.h > 0.0 && b.w > 0.0 && b.h.is_finite() && b.w.is_finite()) {
                    return Err(Error::invalid(
                        "points",
                        format!("point {i} has a non-positive box extent"),
                    ));
                }
            }
        }
        Ok(Self {
            width,
            height,
            points,
        })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, Vec::new())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn points(&self) -> &[GroundTruthPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Grid shape `(cols, rows)` for the given cell size; partial edge cells count.
    pub fn grid_shape(&self, cell: CellSize) -> (usize, usize) {
        (
            self.width.div_ceil(cell.w) as usize,
            self.height.div_ceil(cell.h) as usize,
        )
    }
}

/// Per-cell count field. Values are stored row-major: `values[v * cols + u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    cols: usize,
    rows: usize,
    cell: CellSize,
    values: Vec<f64>,
}

impl DensityGrid {
    pub fn zeros(cols: usize, rows: usize, cell: CellSize) -> Self {
        Self {
            cols,
            rows,
            cell,
            values: vec![0.0; cols * rows],
        }
    }

    /// Wraps row-major values; every value must be finite and non-negative.
    pub fn from_values(cols: usize, rows: usize, cell: CellSize, values: Vec<f64>) -> Result<Self> {
        if values.len() != cols * rows {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values ({cols}x{rows})", cols * rows),
                actual: format!("{} values", values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("density grid cell {i}")));
        }
        if let Some(i) = values.iter().position(|&v| v < 0.0) {
            return Err(Error::invalid(
                "density",
                format!("cell {i} is negative ({})", values[i]),
            ));
        }
        Ok(Self {
            cols,
            rows,
            cell,
            values,
        })
    }

    /// Builds a grid from nested rows (`rows[v][u]`).
    pub fn from_rows(cell: CellSize, rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("density", "ragged rows"));
        }
        Self::from_values(cols, rows.len(), cell, rows.concat())
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cell(&self) -> CellSize {
        self.cell
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.cols + u]
    }

    pub fn index_of(&self, u: usize, v: usize) -> usize {
        v * self.cols + u
    }

    /// `(u, v)` of a flat index.
    pub fn cell_of_index(&self, idx: usize) -> (usize, usize) {
        (idx % self.cols, idx / self.cols)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn same_shape(&self, other: &DensityGrid) -> bool {
        self.cols == other.cols && self.rows == other.rows
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks(self.cols.max(1))
            .map(<[f64]>::to_vec)
            .collect()
    }
}

/// Ground-truth count grid: each point is binned into the cell containing it.
pub fn gt_density_grid(scene: &Scene, cell: CellSize) -> DensityGrid {
    let (cols, rows) = scene.grid_shape(cell);
    let mut grid = DensityGrid::zeros(cols, rows, cell);
    for p in scene.points() {
        let (u, v) = cell.cell_of(p.x, p.y);
        grid.values[v * cols + u] += 1.0;
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationFormat {
    Json,
    Csv,
}

impl AnnotationFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "json" => Some(Self::Json),
            "csv" => Some(Self::Csv),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct PointRecord {
    x: f64,
    y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    width: u32,
    height: u32,
    points: Vec<PointRecord>,
}

/// Sidecar carrying image dimensions for CSV annotations: `scene.csv` -> `scene.size.json`.
pub fn csv_size_sidecar(path: &Path) -> PathBuf {
    path.with_extension("size.json")
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn json_parse_error(path: &Path, e: &serde_json::Error) -> Error {
    let message = e.to_string();
    // serde names the offending field between backticks
    let field = message
        .split('`')
        .nth(1)
        .map_or_else(|| "<document>".to_string(), str::to_string);
    Error::Parse {
        path: path.to_path_buf(),
        line: Some(e.line() as u64),
        field,
        message,
    }
}

fn record_to_point(path: &Path, line: Option<u64>, r: PointRecord) -> Result<GroundTruthPoint> {
    match (r.h, r.w) {
        (None, None) => Ok(GroundTruthPoint::new(r.x, r.y)),
        (Some(h), Some(w)) => Ok(GroundTruthPoint::with_box(r.x, r.y, h, w)),
        (Some(_), None) | (None, Some(_)) => Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            field: if r.h.is_some() { "w" } else { "h" }.to_string(),
            message: "box height and width must be given together".to_string(),
        }),
    }
}

fn point_to_record(p: &GroundTruthPoint) -> PointRecord {
    PointRecord {
        x: p.x,
        y: p.y,
        h: p.extent.map(|b| b.h),
        w: p.extent.map(|b| b.w),
    }
}

/// Loads a scene. CSV files take their image size from `size`, falling back
/// to the [`csv_size_sidecar`] file; JSON files carry their own size.
pub fn load_annotations(
    path: &Path,
    format: AnnotationFormat,
    size: Option<ImageSize>,
) -> Result<Scene> {
    match format {
        AnnotationFormat::Json => {
            let text = read_to_string(path)?;
            let file: SceneFile =
                serde_json::from_str(&text).map_err(|e| json_parse_error(path, &e))?;
            let points = file
                .points
                .into_iter()
                .map(|r| record_to_point(path, None, r))
                .collect::<Result<Vec<_>>>()?;
            Scene::new(file.width, file.height, points)
        }
        AnnotationFormat::Csv => {
            let size = match size {
                Some(s) => s,
                None => {
                    let sidecar = csv_size_sidecar(path);
                    let text = read_to_string(&sidecar)?;
                    serde_json::from_str(&text).map_err(|e| json_parse_error(&sidecar, &e))?
                }
            };
            let points = read_csv_points(path)?;
            Scene::new(size.width, size.height, points)
        }
    }
}

fn read_csv_points(path: &Path) -> Result<Vec<GroundTruthPoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut points = Vec::new();
    for record in reader.deserialize::<PointRecord>() {
        let record = record.map_err(|e| csv_error(path, e))?;
        points.push(record_to_point(path, None, record)?);
    }
    Ok(points)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(csv::Position::line);
    let field = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err
            .field()
            .map_or_else(|| "<record>".to_string(), |f| format!("column {}", f + 1)),
        csv::ErrorKind::Io(_) => "<file>".to_string(),
        _ => "<record>".to_string(),
    };
    if let csv::ErrorKind::Io(_) = e.kind() {
        if let csv::ErrorKind::Io(source) = e.into_kind() {
            return Error::Io {
                path: path.to_path_buf(),
                source,
            };
        }
        unreachable!();
    }
    Error::Parse {
        path: path.to_path_buf(),
        line,
        field,
        message: e.to_string(),
    }
}

/// Writes a scene. CSV output also writes the size sidecar next to it.
pub fn save_annotations(scene: &Scene, path: &Path, format: AnnotationFormat) -> Result<()> {
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| Error::Io { path: p, source }
    };
    match format {
        AnnotationFormat::Json => {
            let text = scene_to_json(scene);
            fs::write(path, text).map_err(io_err(path))
        }
        AnnotationFormat::Csv => {
            let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
            writer
                .write_record(["x", "y", "h", "w"])
                .map_err(|e| csv_error(path, e))?;
            for p in scene.points() {
                let (h, w) = p.extent.map_or((String::new(), String::new()), |b| {
                    (b.h.to_string(), b.w.to_string())
                });
                writer
                    .write_record([p.x.to_string(), p.y.to_string(), h, w])
                    .map_err(|e| csv_error(path, e))?;
            }
            writer.flush().map_err(io_err(path))?;
            let size = ImageSize {
                width: scene.width(),
                height: scene.height(),
            };
            let sidecar = csv_size_sidecar(path);
            let text = serde_json::to_string(&size).expect("size serializes");
            fs::write(&sidecar, text).map_err(io_err(&sidecar))
        }
    }
}

/// Canonical JSON text of a scene.
pub fn scene_to_json(scene: &Scene) -> String {
    let file = SceneFile {
        width: scene.width,
        height: scene.height,
        points: scene.points.iter().map(point_to_record).collect(),
    };
    serde_json::to_string_pretty(&file).expect("scene serializes")
}
