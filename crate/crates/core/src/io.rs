//! PNG rasters, dataset manifests and metric tables.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage};

use crate::error::{Error, Result};
use crate::field::{Field, ImageGrid, Mask};
use crate::metrics::MetricsReport;

fn open(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.display().to_string(),
            source,
        })
}

/// Reads an 8-bit grayscale or RGB PNG, scaling intensities to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    match open(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
            ImageGrid::new(w as usize, h as usize, 1, data)
        }
        DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            let n = (w * h) as usize;
            let mut data = vec![0.0; 3 * n];
            for (i, px) in img.pixels().enumerate() {
                for c in 0..3 {
                    data[c * n + i] = f64::from(px[c]) / 255.0;
                }
            }
            ImageGrid::new(w as usize, h as usize, 3, data)
        }
        other => Err(Error::UnsupportedFormat(format!(
            "{}: {:?}, expected 8-bit grayscale or RGB",
            path.display(),
            other.color()
        ))),
    }
}

/// Reads an 8-bit grayscale PNG mask; values of 128 and above are foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    match open(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Mask::new(w as usize, h as usize, img.as_raw().iter().map(|&v| v >= 128).collect())
        }
        other => Err(Error::UnsupportedFormat(format!(
            "{}: {:?}, masks must be 8-bit grayscale",
            path.display(),
            other.color()
        ))),
    }
}

fn save_gray_bytes(path: &Path, w: usize, h: usize, bytes: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.display().to_string(),
            source,
        })
}

/// Quantizes to 8 bits: round-to-nearest of `255 * clamp(v, 0, 1)`.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let bytes = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    save_gray_bytes(path.as_ref(), mask.width(), mask.height(), bytes)
}

/// Writes a field with values in `[0, 1]` as grayscale.
pub fn save_gray(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    let bytes = field.data().iter().map(|&v| to_byte(v)).collect();
    save_gray_bytes(path.as_ref(), field.width(), field.height(), bytes)
}

/// Writes a field rescaled so its minimum maps to 0 and maximum to 255.
/// A constant field renders as mid-gray.
pub fn save_normalized(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    let (lo, hi) = field.min_max();
    let span = hi - lo;
    let scaled = if span > 0.0 {
        field.map(|v| (v - lo) / span)
    } else {
        Field::filled(field.width(), field.height(), 0.5)
    };
    save_gray(&scaled, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Paths relative to the manifest root.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

/// Image/mask pairs listed in a `manifest.csv` with columns
/// `image,mask,split`. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.csv";

impl DatasetManifest {
    /// Reads a manifest file, or `manifest.csv` inside a directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(MANIFEST_NAME);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::InvalidValue(format!("{}: missing column `{name}`", path.display())))
        };
        let (ci, cm, cs) = (col("image")?, col("mask")?, col("split")?);
        let mut entries = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            let split = Split::parse(&record[cs]).ok_or_else(|| {
                Error::InvalidValue(format!(
                    "{} row {}: split must be train or test, got `{}`",
                    path.display(),
                    row + 1,
                    &record[cs]
                ))
            })?;
            entries.push(ManifestEntry {
                image: PathBuf::from(&record[ci]),
                mask: PathBuf::from(&record[cm]),
                split,
            });
        }
        Ok(DatasetManifest { root, entries })
    }

    pub fn write(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_NAME);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["image", "mask", "split"])?;
        for e in &self.entries {
            w.write_record([
                e.image.to_string_lossy().as_ref(),
                e.mask.to_string_lossy().as_ref(),
                e.split.as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    /// Loads every pair of the given split, checking that image and mask
    /// dimensions agree.
    pub fn load(&self, split: Split) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let id = e.image.to_string_lossy().into_owned();
                let load = || -> Result<Sample> {
                    let image = load_image(self.root.join(&e.image))?;
                    let mask = load_mask(self.root.join(&e.mask))?;
                    mask.ensure_dims(image.dims())?;
                    Ok(Sample {
                        id: id.clone(),
                        image,
                        mask,
                    })
                };
                load().map_err(|err| err.for_sample(&id))
            })
            .collect()
    }
}

/// An image with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageGrid,
    pub mask: Mask,
}

/// Writes one row per image plus a final `mean` row.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[(String, MetricsReport)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "dice", "miou", "wcov", "boundf"])?;
    let mut write = |id: &str, r: &MetricsReport| {
        w.write_record([
            id.to_string(),
            r.dice.to_string(),
            r.miou.to_string(),
            r.wcov.to_string(),
            r.boundf.to_string(),
        ])
    };
    for (id, r) in rows {
        write(id, r)?;
    }
    let reports: Vec<_> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(mean) = MetricsReport::mean(&reports) {
        write("mean", &mean)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
