//! Scalar volumes, the raw `.vol` + `.vol.hdr` file pair, normalization,
//! synthetic phantoms and aligned crop sampling.
//!
//! The payload is raw little-endian `f32` in `(H, W, D)` raster order (D is
//! the fastest axis). The sidecar is UTF-8 text with one `key=value` per line:
//!
//! ```text
//! dims=32 32 32
//! dtype=f32
//! endian=LE
//! spacing=0.7 0.7 0.7
//! id=subject-000
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::VolumeError;
use crate::tensor::Tensor;

/// A single-channel intensity volume stored as a `[1, H, W, D]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Tensor<f32>,
    pub spacing: [f32; 3],
    pub id: String,
}

/// Parsed contents of a `.vol.hdr` sidecar.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub dtype: String,
    pub endian: String,
    pub spacing: [f32; 3],
    pub id: String,
}

impl Volume {
    pub fn new(data: Tensor<f32>, spacing: [f32; 3], id: impl Into<String>) -> Result<Self, VolumeError> {
        if data.rank() != 4 || data.shape()[0] != 1 {
            return Err(VolumeError::Invalid(format!(
                "volume tensor must be [1, H, W, D], got {:?}",
                data.shape()
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::Invalid(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self {
            data,
            spacing,
            id: id.into(),
        })
    }

    /// Wraps raw `(H, W, D)` raster data with unit spacing.
    pub fn from_raw(dims: [usize; 3], values: Vec<f32>, id: impl Into<String>) -> Result<Self, VolumeError> {
        let t = Tensor::new(vec![1, dims[0], dims[1], dims[2]], values)?;
        Self::new(t, [1.0; 3], id)
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn voxels(&self) -> &[f32] {
        self.data.data()
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            dims: self.dims(),
            dtype: "f32".into(),
            endian: "LE".into(),
            spacing: self.spacing,
            id: self.id.clone(),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Same metadata, different voxels.
    pub fn with_data(&self, data: Tensor<f32>) -> Result<Self, VolumeError> {
        Self::new(data, self.spacing, self.id.clone())
    }
}

/// Sidecar path for a payload path: `x.vol` → `x.vol.hdr`.
pub fn header_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

impl VolumeHeader {
    pub fn to_text(&self) -> String {
        let [h, w, d] = self.dims;
        let [sx, sy, sz] = self.spacing;
        format!(
            "dims={h} {w} {d}\ndtype={}\nendian={}\nspacing={sx} {sy} {sz}\nid={}\n",
            self.dtype, self.endian, self.id
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, VolumeError> {
        let bad = |msg: String| VolumeError::Header {
            path: path.to_path_buf(),
            msg,
        };
        let (mut dims, mut dtype, mut endian, mut spacing, mut id) = (None, None, None, None, None);
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value", lineno + 1)))?;
            match k.trim() {
                "dims" => {
                    let parsed: Result<Vec<usize>, _> = v.split_whitespace().map(str::parse).collect();
                    match parsed.as_deref() {
                        Ok(&[a, b, c]) if a > 0 && b > 0 && c > 0 => dims = Some([a, b, c]),
                        _ => return Err(bad(format!("dims {v:?} must be three positive integers"))),
                    }
                }
                "dtype" => dtype = Some(v.trim().to_string()),
                "endian" => endian = Some(v.trim().to_string()),
                "spacing" => {
                    let parsed: Result<Vec<f32>, _> = v.split_whitespace().map(str::parse).collect();
                    match parsed.as_deref() {
                        Ok(&[a, b, c]) => spacing = Some([a, b, c]),
                        _ => return Err(bad(format!("spacing {v:?} must be three numbers"))),
                    }
                }
                "id" => id = Some(v.to_string()),
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let header = VolumeHeader {
            dims: dims.ok_or_else(|| bad("missing dims".into()))?,
            dtype: dtype.ok_or_else(|| bad("missing dtype".into()))?,
            endian: endian.ok_or_else(|| bad("missing endian".into()))?,
            spacing: spacing.unwrap_or([1.0; 3]),
            id: id.unwrap_or_default(),
        };
        if header.dtype != "f32" {
            return Err(VolumeError::UnknownDtype(header.dtype));
        }
        if header.endian != "LE" {
            return Err(VolumeError::UnknownEndian(header.endian));
        }
        Ok(header)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `path` (payload) and `path.hdr` (sidecar).
pub fn save_volume(v: &Volume, path: &Path) -> Result<(), VolumeError> {
    let mut bytes = Vec::with_capacity(v.voxels().len() * 4);
    for x in v.voxels() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    let hp = header_path(path);
    fs::write(&hp, v.header().to_text()).map_err(io_err(&hp))?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume, VolumeError> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(io_err(&hp))?;
    let header = VolumeHeader::parse(&text, &hp)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let n: usize = header.dims.iter().product();
    let expected = n * 4;
    if bytes.len() < expected {
        return Err(VolumeError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() != expected {
        return Err(VolumeError::SizeMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Tensor::new(vec![1, header.dims[0], header.dims[1], header.dims[2]], values)?;
    Volume::new(data, header.spacing, header.id)
}

/// Lists `.vol` payloads in a directory, sorted by file name.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>, VolumeError> {
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(io_err(dir))?.path();
        if p.extension().is_some_and(|x| x == "vol") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Min-max scaling to `[0, 1]`.
pub fn normalize(v: &Volume) -> Result<Volume, VolumeError> {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(VolumeError::DegenerateRange(lo));
    }
    let (lo, range) = (lo as f64, (hi - lo) as f64);
    let data = v.data.map(|x| (((x as f64) - lo) / range).clamp(0.0, 1.0) as f32);
    v.with_data(data)
}

/// Smallest phantom edge accepted by [`synth_phantom`].
pub const MIN_PHANTOM_SIZE: usize = 16;

/// Deterministic synthetic head-like phantom: 5–12 ellipsoids with distinct
/// intensities and sharp boundaries over a smooth low-amplitude background.
/// The result is not normalized.
pub fn synth_phantom(seed: u64, size: [usize; 3]) -> Result<Volume, VolumeError> {
    if size.iter().any(|&s| s < MIN_PHANTOM_SIZE) {
        return Err(VolumeError::Invalid(format!(
            "phantom size {size:?} below minimum {MIN_PHANTOM_SIZE} per axis"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_blobs = rng.gen_range(5..=12);

    let mut levels: Vec<f64> = (0..n_blobs).map(|i| 0.15 + 0.85 * (i as f64 + 1.0) / n_blobs as f64).collect();
    levels.shuffle(&mut rng);

    struct Blob {
        center: [f64; 3],
        radii: [f64; 3],
        rot: [[f64; 3]; 3],
        level: f64,
    }
    let blobs: Vec<Blob> = levels
        .into_iter()
        .map(|level| {
            let center = [0; 3].map(|_| rng.gen_range(0.25..0.75));
            let radii = [0; 3].map(|_| rng.gen_range(0.08..0.3));
            let (a, b) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
            let (ca, sa, cb, sb) = (a.cos(), a.sin(), b.cos(), b.sin());
            // rotation about the depth axis, then about the height axis
            let rot = [
                [ca, -sa * cb, sa * sb],
                [sa, ca * cb, -ca * sb],
                [0.0, sb, cb],
            ];
            Blob { center, radii, rot, level }
        })
        .collect();

    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let freq = [0; 3].map(|_| rng.gen_range(0.5..2.0) * std::f64::consts::TAU);
            (freq, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();

    let [h, w, d] = size;
    let mut values = Vec::with_capacity(h * w * d);
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let p = [
                    (i as f64 + 0.5) / h as f64,
                    (j as f64 + 0.5) / w as f64,
                    (k as f64 + 0.5) / d as f64,
                ];
                let mut v = 0.0;
                for (freq, phase) in &waves {
                    v += 0.03 * (freq[0] * p[0] + freq[1] * p[1] + freq[2] * p[2] + phase).cos();
                }
                for b in &blobs {
                    let q = [p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]];
                    let mut r2 = 0.0;
                    for (row, radius) in b.rot.iter().zip(b.radii) {
                        let u = row[0] * q[0] + row[1] * q[1] + row[2] * q[2];
                        r2 += (u / radius) * (u / radius);
                    }
                    if r2 <= 1.0 {
                        v += b.level;
                    }
                }
                values.push(v as f32);
            }
        }
    }
    Volume::from_raw(size, values, format!("phantom-{seed}"))
}

/// Copies the `[1, size, size, size]` block starting at `origin`.
pub fn crop_block(t: &Tensor<f32>, origin: [usize; 3], size: [usize; 3]) -> Tensor<f32> {
    let s = t.shape();
    let (w, d) = (s[2], s[3]);
    let mut out = Vec::with_capacity(size.iter().product());
    for i in origin[0]..origin[0] + size[0] {
        for j in origin[1]..origin[1] + size[1] {
            let base = (i * w + j) * d + origin[2];
            out.extend_from_slice(&t.data()[base..base + size[2]]);
        }
    }
    Tensor::new(vec![1, size[0], size[1], size[2]], out).expect("crop size consistent")
}

/// Samples one cubic crop origin and returns aligned `(hr, lr)` crops.
pub fn random_crop_pair<R: Rng + ?Sized>(
    hr: &Volume,
    lr: &Volume,
    crop: usize,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>), VolumeError> {
    if hr.dims() != lr.dims() {
        return Err(VolumeError::Invalid(format!(
            "HR dims {:?} differ from LR dims {:?}",
            hr.dims(),
            lr.dims()
        )));
    }
    let dims = hr.dims();
    if crop == 0 || dims.iter().any(|&d| crop > d) {
        return Err(VolumeError::Invalid(format!("crop {crop} larger than volume {dims:?}")));
    }
    let origin = dims.map(|d| rng.gen_range(0..=d - crop));
    let size = [crop; 3];
    Ok((crop_block(&hr.data, origin, size), crop_block(&lr.data, origin, size)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn random_volume(seed: u64, dims: [usize; 3]) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        let v = (0..n).map(|_| rng.gen::<f32>()).collect();
        Volume::from_raw(dims, v, format!("rand-{seed}")).unwrap()
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.vol");
        let mut v = random_volume(1, [16, 16, 16]);
        v.spacing = [0.7, 0.7, 1.3];
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back, v);
        assert!(header_path(&p).ends_with("a.vol.hdr"));
    }

    #[test]
    fn truncated_and_oversized_payloads() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.vol");
        save_volume(&random_volume(2, [4, 4, 4]), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_volume(&p), Err(VolumeError::Truncated { .. })));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 4]);
        fs::write(&p, longer).unwrap();
        assert!(matches!(load_volume(&p), Err(VolumeError::SizeMismatch { .. })));
    }

    #[test]
    fn unknown_dtype_is_distinct_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.vol");
        fs::write(&p, [0u8; 32]).unwrap();
        fs::write(header_path(&p), "dims=2 2 2\ndtype=f64\nendian=LE\n").unwrap();
        assert!(matches!(load_volume(&p), Err(VolumeError::UnknownDtype(t)) if t == "f64"));
        fs::write(header_path(&p), "dims=2 2 2\ndtype=f32\nendian=BE\n").unwrap();
        assert!(matches!(load_volume(&p), Err(VolumeError::UnknownEndian(_))));
        fs::write(header_path(&p), "dims=2 2 2\ndtype=f32\nendian=LE\ncolor=red\n").unwrap();
        assert!(matches!(load_volume(&p), Err(VolumeError::Header { .. })));
    }

    #[test]
    fn handwritten_constant_volume() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.vol");
        let bytes: Vec<u8> = (0..8).flat_map(|_| 1.0f32.to_le_bytes()).collect();
        fs::write(&p, bytes).unwrap();
        fs::write(header_path(&p), "dims=2 2 2\ndtype=f32\nendian=LE\nspacing=1 1 1\nid=c\n").unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.dims(), [2, 2, 2]);
        assert!(v.voxels().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn normalize_cases() {
        let ramp = Volume::from_raw([4, 8, 8], (0..256).map(|i| i as f32).collect(), "r").unwrap();
        let n = normalize(&ramp).unwrap();
        assert_eq!(n.min_max(), (0.0, 1.0));
        let again = normalize(&n).unwrap();
        assert!(again.data.max_abs_diff(&n.data) < 1e-6);
        let c = Volume::from_raw([2, 2, 2], vec![3.0; 8], "c").unwrap();
        assert!(matches!(normalize(&c), Err(VolumeError::DegenerateRange(_))));
    }

    #[test]
    fn phantom_determinism_and_range() {
        let a = synth_phantom(7, [16, 16, 16]).unwrap();
        let b = synth_phantom(7, [16, 16, 16]).unwrap();
        assert_eq!(a, b);
        let c = synth_phantom(8, [16, 16, 16]).unwrap();
        assert!(a.data.max_abs_diff(&c.data) > 0.0);
        let n = normalize(&a).unwrap();
        assert_eq!(n.min_max(), (0.0, 1.0));
        assert!(synth_phantom(0, [15, 16, 16]).is_err());
    }

    #[test]
    fn crop_pair_cases() {
        let v = random_volume(3, [16, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = random_crop_pair(&v, &v, 16, &mut rng).unwrap();
        assert_eq!(a, v.data);
        assert_eq!(a, b);
        let (a1, _) = random_crop_pair(&v, &v, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (a2, _) = random_crop_pair(&v, &v, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a1, a2);
        assert!(random_crop_pair(&v, &v, 17, &mut rng).is_err());
        let other = random_volume(4, [16, 16, 8]);
        assert!(random_crop_pair(&v, &other, 8, &mut rng).is_err());
    }
}
