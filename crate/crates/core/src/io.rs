//! File formats: dataset manifests, 8-bit PNG images, `PFF1` feature files
//! and key-sorted single-line JSON.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dedup::FeatureSet;
use crate::error::{ensure, Error, Result};
use crate::spatial::{center_crop_resize, BBox, LabeledSample};
use crate::tensor::Tensor;

/// Serializes `value` as single-line JSON with object keys sorted.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is a BTreeMap, so a round trip through
    // `Value` sorts every object.
    let v = serde_json::to_value(value).map_err(|e| Error::Data(e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| Error::Data(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = to_sorted_json(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// One manifest record. `image_path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<[usize; 4]>,
}

impl ManifestEntry {
    pub fn bboxes(&self) -> Vec<BBox> {
        self.boxes.iter().map(|&b| BBox::from_array(b)).collect()
    }
}

/// A dataset manifest: a JSON array of entries plus the directory that image
/// paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries: Vec<ManifestEntry> = read_json(path)?;
        for e in &entries {
            for b in e.bboxes() {
                b.validate(e.height, e.width).map_err(|err| {
                    Error::format(path, format!("entry `{}`: {err}", e.image_path))
                })?;
            }
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { entries, base_dir })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.image_path)
    }

    /// Loads every image and maps it to a `res x res` [`LabeledSample`] by
    /// center crop and bilinear resize.
    pub fn load_samples(&self, res: usize) -> Result<Vec<LabeledSample>> {
        self.entries
            .iter()
            .map(|e| {
                let path = self.resolve(e);
                let img = load_png(&path)?;
                let (_, h, w) = img.chw()?;
                if (h, w) != (e.height, e.width) {
                    return Err(Error::format(
                        &path,
                        format!("image is {w}x{h}, manifest says {}x{}", e.width, e.height),
                    ));
                }
                center_crop_resize(&img, &e.bboxes(), res)
            })
            .collect()
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `{prefix}{i:05}.png` for every sample plus `manifest.json` into
/// `dir`; returns the manifest.
pub fn write_samples(dir: &Path, samples: &[LabeledSample], prefix: &str) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{prefix}{i:05}.png");
        save_png(&dir.join(&name), &s.image)?;
        entries.push(ManifestEntry {
            image_path: name,
            width: s.width(),
            height: s.height(),
            boxes: s.boxes.iter().map(BBox::to_array).collect(),
        });
    }
    let m = Manifest::new(entries, dir);
    m.save(&dir.join(MANIFEST_FILE))?;
    Ok(m)
}

/// Loads an 8-bit PNG as a `(3, H, W)` tensor scaled by `v / 127.5 - 1`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set3(c, y as usize, x as usize, px[c] as f64 / 127.5 - 1.0);
        }
    }
    Ok(t)
}

/// `[-1, 1] -> 0..=255` by rounding `(v + 1) * 127.5`.
pub fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Writes a 1- or 3-channel tensor in `[-1, 1]` as an 8-bit PNG.
pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.chw()?;
    ensure!(
        c == 1 || c == 3,
        Shape,
        "PNG output needs 1 or 3 channels, got {c}"
    );
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(to_u8(t.at3(if c == 1 { 0 } else { ch }, y, x)));
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Data("PNG buffer size mismatch".into()))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub const PFF_MAGIC: &[u8; 4] = b"PFF1";

/// Encodes a feature set: magic, `u32` N and D, N*D `f32` values (all little
/// endian), then N newline-separated ids.
pub fn encode_pff(fs: &FeatureSet) -> Vec<u8> {
    let (n, d) = (fs.len(), fs.dim());
    let mut out = Vec::with_capacity(12 + 4 * n * d);
    out.extend_from_slice(PFF_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in fs.matrix() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(fs.ids().join("\n").as_bytes());
    out
}

pub fn decode_pff(bytes: &[u8], source: &str) -> Result<FeatureSet> {
    let bad = |m: &str| Error::Data(format!("{source}: {m}"));
    if bytes.len() < 12 || &bytes[..4] != PFF_MAGIC {
        return Err(bad("missing PFF1 header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let end = 12 + 4 * n * d;
    if bytes.len() < end {
        return Err(bad("truncated feature block"));
    }
    let matrix: Vec<f64> = bytes[12..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let tail = std::str::from_utf8(&bytes[end..]).map_err(|_| bad("ids are not UTF-8"))?;
    let ids: Vec<String> = if n == 0 {
        Vec::new()
    } else {
        tail.split('\n').map(str::to_string).collect()
    };
    if ids.len() != n {
        return Err(bad(&format!("expected {n} ids, found {}", ids.len())));
    }
    FeatureSet::new(matrix, d, ids, source)
}

pub fn read_pff(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pff(&bytes, &path.display().to_string()).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_pff(path: &Path, fs: &FeatureSet) -> Result<()> {
    write_bytes(path, &encode_pff(fs))
}
