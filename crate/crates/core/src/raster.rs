//! Grid value types shared by every other module, the dB <-> [0,1] mapping,
//! and the `.nfr` raster container.
//!
//! `.nfr` layout (all integers little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `NFR1`                   |
//! | 4      | 4    | width (u32)                    |
//! | 8      | 4    | height (u32)                   |
//! | 12     | 4    | channels (u32)                 |
//! | 16     | 1    | dtype code (1 = f32-LE)        |
//! | 17     | ...  | payload, row-major, channel-minor |

use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Lower bound of the sound-pressure range; also the level assigned to building interiors.
pub const DB_MIN: f32 = 0.0;
/// Upper bound of the sound-pressure range.
pub const DB_MAX: f32 = 100.0;

pub const RASTER_MAGIC: &[u8; 4] = b"NFR1";
pub const RASTER_HEADER_LEN: usize = 17;
pub const DTYPE_F32_LE: u8 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("value {value} at pixel (row {row}, col {col}) is outside [{min}, {max}]")]
    OutOfRange {
        row: usize,
        col: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("bad magic: expected \"NFR1\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated raster: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("raster has {extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Grid cell coordinate as (row, col).
pub type Cell = (usize, usize);

/// Binary building occupancy plus the point-source position.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutMask {
    size: usize,
    cells: Vec<u8>,
    source: Cell,
    cell_size_m: f64,
}

impl LayoutMask {
    /// Square layout of `size × size` cells. `cells` is row-major, 1 = building.
    pub fn new(size: usize, cells: Vec<u8>, source: Cell) -> Result<Self, RasterError> {
        if size == 0 {
            return Err(RasterError::InvalidLayout("grid size must be positive".into()));
        }
        if cells.len() != size * size {
            return Err(RasterError::Shape(format!(
                "{} cells for a {size}x{size} grid",
                cells.len()
            )));
        }
        if let Some(i) = cells.iter().position(|&v| v > 1) {
            return Err(RasterError::InvalidLayout(format!(
                "cell (row {}, col {}) holds {}, expected 0 or 1",
                i / size,
                i % size,
                cells[i]
            )));
        }
        let (r, c) = source;
        if r >= size || c >= size {
            return Err(RasterError::InvalidLayout(format!(
                "source ({r}, {c}) outside {size}x{size} grid"
            )));
        }
        if cells[r * size + c] != 0 {
            return Err(RasterError::InvalidLayout(format!(
                "source ({r}, {c}) is inside a building"
            )));
        }
        Ok(Self {
            size,
            cells,
            source,
            cell_size_m: 1.0,
        })
    }

    /// Layout without buildings.
    pub fn empty(size: usize, source: Cell) -> Result<Self, RasterError> {
        Self::new(size, vec![0; size * size], source)
    }

    pub fn with_cell_size(mut self, cell_size_m: f64) -> Result<Self, RasterError> {
        if !(cell_size_m.is_finite() && cell_size_m > 0.0) {
            return Err(RasterError::InvalidLayout(format!(
                "cell size {cell_size_m} must be positive"
            )));
        }
        self.cell_size_m = cell_size_m;
        Ok(self)
    }

    /// Grid side length; the grid is always square.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn width(&self) -> usize {
        self.size
    }

    pub fn height(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn source(&self) -> Cell {
        self.source
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    #[inline]
    pub fn is_building(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.size + col] != 0
    }

    /// Bounds-checked occupancy with signed coordinates; outside the grid is free.
    #[inline]
    pub fn is_building_at(&self, row: isize, col: isize) -> bool {
        row >= 0
            && col >= 0
            && (row as usize) < self.size
            && (col as usize) < self.size
            && self.is_building(row as usize, col as usize)
    }

    pub fn building_count(&self) -> usize {
        self.cells.iter().filter(|&&v| v != 0).count()
    }

    /// Same buildings, different source. Fails if the new source is occupied.
    pub fn with_source(&self, source: Cell) -> Result<Self, RasterError> {
        Self::new(self.size, self.cells.clone(), source)
            .and_then(|m| m.with_cell_size(self.cell_size_m))
    }

    /// Two-channel raster: occupancy, then a one-hot source indicator.
    pub fn to_raster(&self) -> RasterFile {
        let mut data = Vec::with_capacity(self.cells.len() * 2);
        for (i, &v) in self.cells.iter().enumerate() {
            data.push(v as f32);
            let is_src = i == self.source.0 * self.size + self.source.1;
            data.push(if is_src { 1.0 } else { 0.0 });
        }
        RasterFile::new(self.size as u32, self.size as u32, 2, data)
            .expect("layout raster shape is consistent")
    }

    pub fn from_raster(raster: &RasterFile) -> Result<Self, RasterError> {
        if raster.width != raster.height {
            return Err(RasterError::Shape(format!(
                "layout must be square, got {}x{}",
                raster.width, raster.height
            )));
        }
        if raster.channels != 2 {
            return Err(RasterError::Shape(format!(
                "layout raster needs 2 channels, got {}",
                raster.channels
            )));
        }
        let size = raster.width as usize;
        let mut cells = Vec::with_capacity(size * size);
        let mut source = None;
        for (i, px) in raster.data.chunks_exact(2).enumerate() {
            cells.push(match px[0] {
                v if v == 0.0 => 0,
                v if v == 1.0 => 1,
                v => {
                    return Err(RasterError::InvalidLayout(format!(
                        "occupancy {v} at index {i} is not 0/1"
                    )))
                }
            });
            if px[1] == 1.0 {
                if source.is_some() {
                    return Err(RasterError::InvalidLayout("more than one source cell".into()));
                }
                source = Some((i / size, i % size));
            }
        }
        let source = source.ok_or_else(|| RasterError::InvalidLayout("no source cell".into()))?;
        Self::new(size, cells, source)
    }

    /// ASCII PGM (P2): buildings black, free cells white, source mid-grey.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.size, self.size);
        for r in 0..self.size {
            let row: Vec<String> = (0..self.size)
                .map(|c| {
                    if (r, c) == self.source {
                        "128".to_string()
                    } else if self.is_building(r, c) {
                        "0".to_string()
                    } else {
                        "255".to_string()
                    }
                })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Sound-pressure levels in dB, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DbMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl DbMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self, RasterError> {
        if values.len() != width * height {
            return Err(RasterError::Shape(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        if let Some(i) = values
            .iter()
            .position(|v| !(*v >= DB_MIN && *v <= DB_MAX))
        {
            return Err(RasterError::OutOfRange {
                row: i / width,
                col: i % width,
                value: values[i] as f64,
                min: DB_MIN as f64,
                max: DB_MAX as f64,
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self, RasterError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn to_raster(&self) -> RasterFile {
        RasterFile::new(self.width as u32, self.height as u32, 1, self.values.clone())
            .expect("db map raster shape is consistent")
    }

    pub fn from_raster(raster: &RasterFile) -> Result<Self, RasterError> {
        if raster.channels != 1 {
            return Err(RasterError::Shape(format!(
                "sound map raster needs 1 channel, got {}",
                raster.channels
            )));
        }
        Self::new(
            raster.width as usize,
            raster.height as usize,
            raster.data.clone(),
        )
    }
}

/// Sound map scaled onto [0, 1]. Stored in f64 so that the dB round trip is
/// exact for every f32 level.
#[derive(Clone, Debug, PartialEq)]
pub struct NormMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl NormMap {
    /// Values are taken as-is; use [`denormalize`] to clamp model output.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self, RasterError> {
        if values.len() != width * height {
            return Err(RasterError::Shape(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// f32 export; lossy below f32 precision.
    pub fn to_raster(&self) -> RasterFile {
        let data = self.values.iter().map(|&v| v as f32).collect();
        RasterFile::new(self.width as u32, self.height as u32, 1, data)
            .expect("norm map raster shape is consistent")
    }
}

/// Elementwise affine map of [DB_MIN, DB_MAX] onto [0, 1].
pub fn normalize(map: &DbMap) -> Result<NormMap, RasterError> {
    let span = (DB_MAX - DB_MIN) as f64;
    let mut values = Vec::with_capacity(map.values.len());
    for (i, &v) in map.values.iter().enumerate() {
        if !(v >= DB_MIN && v <= DB_MAX) {
            return Err(RasterError::OutOfRange {
                row: i / map.width,
                col: i % map.width,
                value: v as f64,
                min: DB_MIN as f64,
                max: DB_MAX as f64,
            });
        }
        values.push((v as f64 - DB_MIN as f64) / span);
    }
    Ok(NormMap {
        width: map.width,
        height: map.height,
        values,
    })
}

/// Inverse of [`normalize`]. Out-of-range (or non-finite) inputs are clamped;
/// the number of clamped pixels is returned alongside the map.
pub fn denormalize(map: &NormMap) -> (DbMap, usize) {
    let span = (DB_MAX - DB_MIN) as f64;
    let mut clamped = 0;
    let values = map
        .values
        .iter()
        .map(|&v| {
            let v = if v.is_nan() {
                clamped += 1;
                0.0
            } else if v < 0.0 {
                clamped += 1;
                0.0
            } else if v > 1.0 {
                clamped += 1;
                1.0
            } else {
                v
            };
            ((DB_MIN as f64 + v * span) as f32).clamp(DB_MIN, DB_MAX)
        })
        .collect();
    (
        DbMap {
            width: map.width,
            height: map.height,
            values,
        },
        clamped,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32Le,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32Le => DTYPE_F32_LE,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, RasterError> {
        match code {
            DTYPE_F32_LE => Ok(DType::F32Le),
            other => Err(RasterError::UnknownDtype(other)),
        }
    }
}

/// In-memory form of an `.nfr` file.
#[derive(Clone, PartialEq)]
pub struct RasterFile {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub dtype: DType,
    /// Row-major, channel-minor.
    pub data: Vec<f32>,
}

impl fmt::Debug for RasterFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RasterFile")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .field("dtype", &self.dtype)
            .field("len", &self.data.len())
            .finish()
    }
}

impl RasterFile {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self, RasterError> {
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(RasterError::Shape(format!(
                "{} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            dtype: DType::F32Le,
            data,
        })
    }

    pub fn payload_len(&self) -> usize {
        self.data.len() * 4
    }
}

pub fn write_raster(raster: &RasterFile) -> Vec<u8> {
    let mut out = Vec::with_capacity(RASTER_HEADER_LEN + raster.payload_len());
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(&raster.width.to_le_bytes());
    out.extend_from_slice(&raster.height.to_le_bytes());
    out.extend_from_slice(&raster.channels.to_le_bytes());
    out.push(raster.dtype.code());
    for v in &raster.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_raster(bytes: &[u8]) -> Result<RasterFile, RasterError> {
    if bytes.len() < 4 {
        return Err(RasterError::Truncated {
            expected: RASTER_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != RASTER_MAGIC {
        return Err(RasterError::BadMagic(magic));
    }
    if bytes.len() < RASTER_HEADER_LEN {
        return Err(RasterError::Truncated {
            expected: RASTER_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (width, height, channels) = (u32_at(4), u32_at(8), u32_at(12));
    let dtype = DType::from_code(bytes[16])?;
    let count = (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(channels as usize))
        .ok_or_else(|| RasterError::Shape("declared dimensions overflow".into()))?;
    let expected = RASTER_HEADER_LEN + count * 4;
    if bytes.len() < expected {
        return Err(RasterError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(RasterError::TrailingBytes {
            extra: bytes.len() - expected,
        });
    }
    let data = bytes[RASTER_HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(RasterFile {
        width,
        height,
        channels,
        dtype,
        data,
    })
}

pub fn save_raster(path: &Path, raster: &RasterFile) -> Result<(), RasterError> {
    crate::io_util::write_atomic(path, &write_raster(raster)).map_err(|e| RasterError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_raster(path: &Path) -> Result<RasterFile, RasterError> {
    let bytes = std::fs::read(path).map_err(|e| RasterError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    read_raster(&bytes)
}
