//! Dataset directories: a `manifest.json` plus one raw little-endian binary
//! file per array. Complex values are interleaved `(re, im)` pairs; every
//! array is stored first-index-fastest, which for grids means x fastest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{
    all_finite_complex, all_finite_real, MaskPair, PrescanData, RawCoilData, SensitivityMaps,
    TemporalBasis,
};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
    C128,
    C64,
    U8,
}

impl Dtype {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "f64" => Ok(Dtype::F64),
            "f32" => Ok(Dtype::F32),
            "c128" => Ok(Dtype::C128),
            "c64" => Ok(Dtype::C64),
            "u8" => Ok(Dtype::U8),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
            Dtype::C128 => "c128",
            Dtype::C64 => "c64",
            Dtype::U8 => "u8",
        }
    }

    pub fn element_bytes(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::C128 => 16,
            Dtype::C64 => 8,
            Dtype::U8 => 1,
        }
    }

    pub fn is_complex(self) -> bool {
        matches!(self, Dtype::C128 | Dtype::C64)
    }
}

/// Storage precision requested when saving floating-point arrays.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

/// Memory layout the reconstruction kernels should assume for matrices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElementOrder {
    #[default]
    ColumnMajor,
    RowMajor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

impl ArrayEntry {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub grid: Grid,
    /// K
    pub samples: usize,
    /// Γ
    pub coils: usize,
    /// P, dynamic field terms excluding the time column
    pub terms: usize,
    /// N
    pub echoes: usize,
    #[serde(default)]
    pub echo_times_s: Vec<f64>,
    pub byte_order: String,
    pub element_order: ElementOrder,
    pub b0_unit: String,
    /// solid-harmonic order of the field terms in `ktemporal`
    #[serde(default = "first_order")]
    pub harmonic_order: u8,
    /// whether `ktemporal` carries the global `k_0` term before the harmonics
    #[serde(default)]
    pub constant_term: bool,
    #[serde(default)]
    pub arrays: BTreeMap<String, ArrayEntry>,
}

fn first_order() -> u8 {
    1
}

impl DatasetManifest {
    pub fn new(grid: Grid, samples: usize, coils: usize, terms: usize, echo_times_s: Vec<f64>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            grid,
            samples,
            coils,
            terms,
            echoes: echo_times_s.len(),
            echo_times_s,
            byte_order: "little".into(),
            element_order: ElementOrder::ColumnMajor,
            b0_unit: "rad/s".into(),
            harmonic_order: 1,
            constant_term: false,
            arrays: BTreeMap::new(),
        }
    }

    /// Shape implied by the manifest counts for the well-known array names.
    pub fn expected_shape(&self, name: &str) -> Option<Vec<usize>> {
        let [nx, ny, nz] = self.grid.dims;
        let grid = vec![nx, ny, nz];
        let with = |mut v: Vec<usize>, extra: &[usize]| {
            v.extend_from_slice(extra);
            v
        };
        match name {
            "sigma" => Some(vec![self.samples, self.coils]),
            "ktemporal" => Some(vec![self.samples, self.terms + 1]),
            "prescan" => Some(with(grid, &[self.coils, self.echoes])),
            "sens" | "sens_true" => Some(with(grid, &[self.coils])),
            "b0" | "b0_stderr" | "b0_beta" | "b0_true" | "mask_t" | "mask_r" | "kfilter"
            | "rho" | "phantom" | "mask_true" | "bias" => Some(grid),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                found: self.version,
                expected: MANIFEST_VERSION,
            });
        }
        Grid::new(self.grid.dims, self.grid.fov_m)?;
        if self.byte_order != "little" {
            return Err(Error::Manifest(format!(
                "unsupported byte order `{}`",
                self.byte_order
            )));
        }
        if self.b0_unit != "rad/s" {
            return Err(Error::Manifest(format!(
                "unsupported B0 unit `{}`",
                self.b0_unit
            )));
        }
        if !self.echo_times_s.is_empty() && self.echo_times_s.len() != self.echoes {
            return Err(Error::Manifest(format!(
                "{} echo times listed for {} echoes",
                self.echo_times_s.len(),
                self.echoes
            )));
        }
        Ok(())
    }
}

/// An on-disk dataset whose arrays are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Creates (or overwrites the manifest of) a dataset directory.
    pub fn create(dir: impl AsRef<Path>, manifest: DatasetManifest) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        manifest.validate()?;
        let ds = Self { dir, manifest };
        ds.write_manifest()?;
        Ok(ds)
    }

    /// Parses and validates `manifest.json`, checking every referenced file.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        manifest.validate()?;
        let ds = Self { dir, manifest };
        for name in ds.manifest.arrays.keys() {
            ds.check_entry(name)?;
        }
        Ok(ds)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn grid(&self) -> Grid {
        self.manifest.grid
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.arrays.contains_key(name)
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn entry(&self, name: &str) -> Result<&ArrayEntry> {
        self.manifest
            .arrays
            .get(name)
            .ok_or_else(|| Error::UnknownArray(name.to_string()))
    }

    fn check_entry(&self, name: &str) -> Result<Dtype> {
        let entry = self.entry(name)?;
        let dtype = Dtype::parse(&entry.dtype)?;
        if let Some(expected) = self.manifest.expected_shape(name) {
            if expected != entry.shape {
                return Err(Error::Dimension(format!(
                    "array `{name}` has shape {:?}, manifest counts imply {:?}",
                    entry.shape, expected
                )));
            }
        }
        let path = self.dir.join(&entry.file);
        let meta = fs::metadata(&path).map_err(|_| Error::MissingFile(path.clone()))?;
        let expected = (entry.element_count() * dtype.element_bytes()) as u64;
        if meta.len() != expected {
            return Err(Error::SizeMismatch {
                name: name.to_string(),
                expected,
                actual: meta.len(),
            });
        }
        Ok(dtype)
    }

    fn read_bytes(&self, name: &str) -> Result<(Dtype, Vec<u8>)> {
        let dtype = self.check_entry(name)?;
        let path = self.dir.join(&self.entry(name)?.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok((dtype, bytes))
    }

    pub fn shape(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.entry(name)?.shape.clone())
    }

    pub fn read_real(&self, name: &str) -> Result<Vec<f64>> {
        let (dtype, bytes) = self.read_bytes(name)?;
        match dtype {
            Dtype::F64 => Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()),
            Dtype::F32 => Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()),
            other => Err(Error::Manifest(format!(
                "array `{name}` has dtype {}, expected a real type",
                other.tag()
            ))),
        }
    }

    pub fn read_complex(&self, name: &str) -> Result<Vec<Complex64>> {
        let (dtype, bytes) = self.read_bytes(name)?;
        match dtype {
            Dtype::C128 => Ok(bytes
                .chunks_exact(16)
                .map(|c| {
                    Complex64::new(
                        f64::from_le_bytes(c[..8].try_into().unwrap()),
                        f64::from_le_bytes(c[8..].try_into().unwrap()),
                    )
                })
                .collect()),
            Dtype::C64 => Ok(bytes
                .chunks_exact(8)
                .map(|c| {
                    Complex64::new(
                        f32::from_le_bytes(c[..4].try_into().unwrap()) as f64,
                        f32::from_le_bytes(c[4..].try_into().unwrap()) as f64,
                    )
                })
                .collect()),
            other => Err(Error::Manifest(format!(
                "array `{name}` has dtype {}, expected a complex type",
                other.tag()
            ))),
        }
    }

    pub fn read_mask(&self, name: &str) -> Result<Vec<bool>> {
        let (dtype, bytes) = self.read_bytes(name)?;
        if dtype != Dtype::U8 {
            return Err(Error::Manifest(format!("mask `{name}` must be u8")));
        }
        Ok(bytes.into_iter().map(|b| b != 0).collect())
    }

    fn store(&mut self, name: &str, dtype: Dtype, shape: &[usize], bytes: Vec<u8>) -> Result<()> {
        let count: usize = shape.iter().product();
        if count * dtype.element_bytes() != bytes.len() {
            return Err(Error::Dimension(format!(
                "array `{name}` with shape {shape:?} cannot hold {} bytes",
                bytes.len()
            )));
        }
        if let Some(expected) = self.manifest.expected_shape(name) {
            if expected != shape {
                return Err(Error::Dimension(format!(
                    "array `{name}` must have shape {expected:?}, got {shape:?}"
                )));
            }
        }
        let file = format!("{name}.{}", dtype.tag());
        let path = self.dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.arrays.insert(
            name.to_string(),
            ArrayEntry {
                file,
                dtype: dtype.tag().to_string(),
                shape: shape.to_vec(),
            },
        );
        self.write_manifest()
    }

    pub fn save_real(&mut self, name: &str, shape: &[usize], data: &[f64], precision: Precision) -> Result<()> {
        if !all_finite_real(data) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let (dtype, bytes) = match precision {
            Precision::Double => (Dtype::F64, data.iter().flat_map(|v| v.to_le_bytes()).collect()),
            Precision::Single => (
                Dtype::F32,
                data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
            ),
        };
        self.store(name, dtype, shape, bytes)
    }

    pub fn save_complex(
        &mut self,
        name: &str,
        shape: &[usize],
        data: &[Complex64],
        precision: Precision,
    ) -> Result<()> {
        if !all_finite_complex(data) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let (dtype, bytes) = match precision {
            Precision::Double => (
                Dtype::C128,
                data.iter()
                    .flat_map(|v| v.re.to_le_bytes().into_iter().chain(v.im.to_le_bytes()))
                    .collect(),
            ),
            Precision::Single => (
                Dtype::C64,
                data.iter()
                    .flat_map(|v| {
                        (v.re as f32)
                            .to_le_bytes()
                            .into_iter()
                            .chain((v.im as f32).to_le_bytes())
                    })
                    .collect(),
            ),
        };
        self.store(name, dtype, shape, bytes)
    }

    pub fn save_mask(&mut self, name: &str, mask: &[bool]) -> Result<()> {
        let shape = self.grid_shape();
        self.store(name, Dtype::U8, &shape, mask.iter().map(|&m| m as u8).collect())
    }

    pub fn grid_shape(&self) -> Vec<usize> {
        self.manifest.grid.dims.to_vec()
    }

    pub fn save_grid_real(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let shape = self.grid_shape();
        self.save_real(name, &shape, data, Precision::Double)
    }

    pub fn save_grid_complex(&mut self, name: &str, data: &[Complex64]) -> Result<()> {
        let shape = self.grid_shape();
        self.save_complex(name, &shape, data, Precision::Double)
    }

    pub fn raw_coil_data(&self) -> Result<RawCoilData> {
        let m = &self.manifest;
        let v = self.read_complex("sigma")?;
        RawCoilData::new(DMatrix::from_vec(m.samples, m.coils, v))
    }

    pub fn save_raw_coil_data(&mut self, sigma: &RawCoilData) -> Result<()> {
        let shape = [sigma.n_samples(), sigma.n_coils()];
        self.save_complex("sigma", &shape, sigma.samples.as_slice(), Precision::Double)
    }

    pub fn temporal_basis(&self) -> Result<TemporalBasis> {
        let m = &self.manifest;
        let v = self.read_real("ktemporal")?;
        TemporalBasis::new(DMatrix::from_vec(m.samples, m.terms + 1, v))
    }

    pub fn save_temporal_basis(&mut self, k: &TemporalBasis) -> Result<()> {
        let shape = [k.matrix.nrows(), k.matrix.ncols()];
        self.save_real("ktemporal", &shape, k.matrix.as_slice(), Precision::Double)
    }

    pub fn prescan(&self) -> Result<PrescanData> {
        let m = &self.manifest;
        let v = self.read_complex("prescan")?;
        PrescanData::new(m.grid, m.coils, m.echo_times_s.clone(), v)
    }

    pub fn save_prescan(&mut self, p: &PrescanData) -> Result<()> {
        let mut shape = self.grid_shape();
        shape.extend([p.n_coils, p.n_echoes()]);
        self.save_complex("prescan", &shape, &p.images, Precision::Double)
    }

    pub fn sensitivity_maps(&self, name: &str) -> Result<SensitivityMaps> {
        let m = &self.manifest;
        let v = self.read_complex(name)?;
        SensitivityMaps::new(DMatrix::from_vec(m.grid.len(), m.coils, v))
    }

    pub fn save_sensitivity_maps(&mut self, name: &str, s: &SensitivityMaps) -> Result<()> {
        let mut shape = self.grid_shape();
        shape.push(s.n_coils());
        self.save_complex(name, &shape, s.maps.as_slice(), Precision::Double)
    }

    pub fn masks(&self) -> Result<MaskPair> {
        MaskPair::new(self.read_mask("mask_t")?, self.read_mask("mask_r")?)
    }
}
