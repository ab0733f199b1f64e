//! Low-resolution volume synthesis by k-space truncation.
//!
//! `degrade` runs FFT → keep the central block of k-space → inverse FFT →
//! trilinear resize back to the original grid. The output has the same dims
//! as the input but only the retained band of spatial frequencies.
//!
//! Layout conventions:
//! * k-space is stored DC-centered: along an axis of length `n`, position
//!   `p` holds signed frequency `p - n/2` (integer division).
//! * truncation keeps positions `n/2 - m/2 .. n/2 - m/2 + m` with `m = n/f`,
//!   so an even-sized block spans `-m/2 ..= m/2 - 1`.

use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::error::VolumeError;
use crate::kernels::trilinear_resize;
use crate::tensor::Tensor;
use crate::volume::Volume;

/// Largest imaginary residue tolerated after the inverse transform.
pub const IMAG_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum DegradeError {
    #[error("factor {factor} does not divide axis {axis} of length {len}")]
    NonDividingFactor { axis: usize, len: usize, factor: usize },
    #[error("imaginary residue {0:e} after inverse FFT exceeds {IMAG_TOLERANCE:e}")]
    ImaginaryResidue(f64),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// DC-centered complex spectrum of a 3D field.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpace {
    pub dims: [usize; 3],
    pub data: Vec<Complex64>,
}

/// Complex spatial-domain field returned by [`ifft3d`].
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    pub dims: [usize; 3],
    pub data: Vec<Complex64>,
}

impl KSpace {
    /// `Σ |X|²`
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Coefficient at signed frequency `(kh, kw, kd)`.
    pub fn at_freq(&self, f: [i64; 3]) -> Complex64 {
        let [h, w, d] = self.dims;
        let pos = |k: i64, n: usize| (k + (n / 2) as i64).rem_euclid(n as i64) as usize;
        self.data[(pos(f[0], h) * w + pos(f[1], w)) * d + pos(f[2], d)]
    }
}

impl ComplexField {
    pub fn max_imag(&self) -> f64 {
        self.data.iter().map(|c| c.im.abs()).fold(0.0, f64::max)
    }

    /// Real part, failing loudly if the imaginary residue exceeds
    /// [`IMAG_TOLERANCE`].
    pub fn real_part(&self) -> Result<Vec<f64>, DegradeError> {
        let r = self.max_imag();
        if r > IMAG_TOLERANCE {
            return Err(DegradeError::ImaginaryResidue(r));
        }
        Ok(self.data.iter().map(|c| c.re).collect())
    }
}

/// In-place 1D transform along `axis` of a row-major 3D complex array.
fn transform_axis(data: &mut [Complex64], dims: [usize; 3], axis: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let n = dims[axis];
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut line = vec![Complex64::default(); n];
    for o in 0..outer {
        for i in 0..stride {
            let base = o * n * stride + i;
            for (j, l) in line.iter_mut().enumerate() {
                *l = data[base + j * stride];
            }
            fft.process(&mut line);
            for (j, l) in line.iter().enumerate() {
                data[base + j * stride] = *l;
            }
        }
    }
}

/// Moves natural FFT order to DC-centered order (`inverse` undoes it).
fn shift(data: &[Complex64], dims: [usize; 3], inverse: bool) -> Vec<Complex64> {
    let [h, w, d] = dims;
    let mut out = vec![Complex64::default(); data.len()];
    let off = |n: usize| if inverse { n - n / 2 } else { n / 2 };
    let (oh, ow, od) = (off(h), off(w), off(d));
    for i in 0..h {
        let ii = (i + oh) % h;
        for j in 0..w {
            let jj = (j + ow) % w;
            for k in 0..d {
                let kk = (k + od) % d;
                out[(ii * w + jj) * d + kk] = data[(i * w + j) * d + k];
            }
        }
    }
    out
}

fn fft_raw(values: &[f64], dims: [usize; 3]) -> KSpace {
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    for axis in 0..3 {
        transform_axis(&mut data, dims, axis, false, &mut planner);
    }
    KSpace {
        dims,
        data: shift(&data, dims, false),
    }
}

/// Forward 3D FFT (unnormalized) with DC-centered output.
pub fn fft3d(v: &Volume) -> KSpace {
    let values: Vec<f64> = v.voxels().iter().map(|&x| x as f64).collect();
    fft_raw(&values, v.dims())
}

/// Inverse of [`fft3d`], normalized by `1/N`.
pub fn ifft3d(k: &KSpace) -> ComplexField {
    let mut data = shift(&k.data, k.dims, true);
    let mut planner = FftPlanner::new();
    for axis in 0..3 {
        transform_axis(&mut data, k.dims, axis, true, &mut planner);
    }
    let n = data.len() as f64;
    for c in &mut data {
        *c /= n;
    }
    ComplexField { dims: k.dims, data }
}

/// Dims of the k-space block retained for `factors`.
pub fn truncated_dims(dims: [usize; 3], factors: [usize; 3]) -> Result<[usize; 3], DegradeError> {
    let mut keep = [0; 3];
    for axis in 0..3 {
        let (n, f) = (dims[axis], factors[axis]);
        if f == 0 || n % f != 0 {
            return Err(DegradeError::NonDividingFactor { axis, len: n, factor: f });
        }
        keep[axis] = n / f;
    }
    Ok(keep)
}

/// Keeps the centered `(H/f_h, W/f_w, D/f_d)` block of a DC-centered
/// spectrum.
///
/// Along every truncated axis with an even retained length the block's
/// lowest frequency `-m/2` has no conjugate partner inside the block; that
/// plane is zeroed so the retained spectrum stays Hermitian and the inverse
/// transform of a real volume stays real.
pub fn truncate_kspace(k: &KSpace, factors: [usize; 3]) -> Result<KSpace, DegradeError> {
    let keep = truncated_dims(k.dims, factors)?;
    let start: [usize; 3] = std::array::from_fn(|a| k.dims[a] / 2 - keep[a] / 2);
    let [_, w, d] = k.dims;
    let [mh, mw, md] = keep;
    let nyquist = |axis: usize, p: usize| factors[axis] > 1 && keep[axis] % 2 == 0 && p == 0;
    let mut data = Vec::with_capacity(mh * mw * md);
    for i in 0..mh {
        for j in 0..mw {
            for l in 0..md {
                let src = ((start[0] + i) * w + start[1] + j) * d + start[2] + l;
                if nyquist(0, i) || nyquist(1, j) || nyquist(2, l) {
                    data.push(Complex64::default());
                } else {
                    data.push(k.data[src]);
                }
            }
        }
    }
    Ok(KSpace { dims: keep, data })
}

/// Resize a volume to `target` with align-corners-false trilinear
/// interpolation.
pub fn trilinear_resize_volume(v: &Volume, target: [usize; 3]) -> Result<Volume, DegradeError> {
    let data = trilinear_resize(&v.data, target).map_err(VolumeError::from)?;
    Ok(v.with_data(data)?)
}

/// Full degradation: FFT, centered truncation by `factors`, inverse FFT,
/// trilinear resize back to the input grid, clamp to `[0, 1]`.
///
/// The retained spectrum is phase-shifted so that the low-resolution samples
/// sit at the centers of their `f`-voxel cells, matching the align-corners-
/// false resize, and rescaled by `M/N` so that the DC level (mean intensity)
/// is preserved.
pub fn degrade(hr: &Volume, factors: [usize; 3]) -> Result<Volume, DegradeError> {
    let dims = hr.dims();
    let k = fft3d(hr);
    let mut t = truncate_kspace(&k, factors)?;
    let [mh, mw, md] = t.dims;
    let scale = (t.len() as f64) / (k.len() as f64);
    let phase_axis = |axis: usize, p: usize| -> f64 {
        let m = t.dims[axis];
        let freq = p as f64 - (m / 2) as f64;
        let delta = (factors[axis] as f64 - 1.0) / 2.0;
        std::f64::consts::TAU * freq * delta / dims[axis] as f64
    };
    for i in 0..mh {
        for j in 0..mw {
            for l in 0..md {
                let angle = phase_axis(0, i) + phase_axis(1, j) + phase_axis(2, l);
                let c = &mut t.data[(i * mw + j) * md + l];
                *c = *c * Complex64::from_polar(scale, angle);
            }
        }
    }
    let low = ifft3d(&t).real_part()?;
    let low = Tensor::new(vec![1, mh, mw, md], low.into_iter().map(|v| v as f32).collect())
        .map_err(VolumeError::from)?;
    let up = trilinear_resize(&low, dims).map_err(VolumeError::from)?;
    Ok(hr.with_data(up.map(|v| v.clamp(0.0, 1.0)))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64, dims: [usize; 3]) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Volume::from_raw(dims, (0..n).map(|_| rng.gen::<f32>()).collect(), "r").unwrap()
    }

    #[test]
    fn constant_volume_has_single_dc_bin() {
        let v = Volume::from_raw([4, 6, 5], vec![0.5; 120], "c").unwrap();
        let k = fft3d(&v);
        let dc = k.at_freq([0, 0, 0]);
        assert!((dc.re - 60.0).abs() < 1e-9 && dc.im.abs() < 1e-9);
        let others: f64 = k.data.iter().map(|c| c.norm()).sum::<f64>() - dc.norm();
        assert!(others < 1e-9);
    }

    #[test]
    fn roundtrip_random() {
        let v = random_volume(3, [16, 16, 16]);
        let back = ifft3d(&fft3d(&v));
        let re = back.real_part().unwrap();
        for (a, b) in re.iter().zip(v.voxels()) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn truncation_shapes_and_errors() {
        let k = KSpace {
            dims: [8, 8, 6],
            data: vec![Complex64::new(1.0, 0.0); 384],
        };
        assert_eq!(truncate_kspace(&k, [1, 1, 1]).unwrap(), k);
        assert_eq!(truncate_kspace(&k, [2, 2, 1]).unwrap().dims, [4, 4, 6]);
        assert!(matches!(
            truncate_kspace(&k, [3, 1, 1]),
            Err(DegradeError::NonDividingFactor { axis: 0, .. })
        ));
    }

    #[test]
    fn truncation_keeps_centered_block() {
        let v = random_volume(4, [8, 8, 8]);
        let k = fft3d(&v);
        let t = truncate_kspace(&k, [2, 1, 1]).unwrap();
        // freq -2 is the zeroed unpaired plane; -1..=1 are copied verbatim
        for f in -1..=1i64 {
            assert_eq!(t.at_freq([f, 3, -2]), k.at_freq([f, 3, -2]));
        }
        assert_eq!(t.at_freq([-2, 1, 1]), Complex64::default());
    }

    #[test]
    fn constant_volume_is_fixed_point() {
        let v = Volume::from_raw([16, 16, 16], vec![0.375; 4096], "c").unwrap();
        let d = degrade(&v, [2, 2, 1]).unwrap();
        assert!(d.data.max_abs_diff(&v.data) < 1e-6);
    }

    #[test]
    fn resize_same_size_identity() {
        let v = random_volume(9, [5, 6, 7]);
        let r = trilinear_resize_volume(&v, [5, 6, 7]).unwrap();
        assert!(r.data.max_abs_diff(&v.data) < 1e-6);
    }

    #[test]
    fn in_band_cosine_reconstructed() {
        let n = 32;
        let mut vals = Vec::new();
        for x in 0..n {
            for _ in 0..n * n {
                vals.push((0.5 + 0.5 * (std::f64::consts::TAU * x as f64 / n as f64).cos()) as f32);
            }
        }
        let v = Volume::from_raw([n, n, n], vals, "cos").unwrap();
        let d = degrade(&v, [2, 2, 1]).unwrap();
        let err = d.data.max_abs_diff(&v.data);
        assert!(err < 2e-2, "max abs error {err}");
    }

    #[test]
    fn phantom_degradation_is_real_and_lossy() {
        let hr = crate::volume::normalize(&crate::volume::synth_phantom(1, [32, 32, 32]).unwrap()).unwrap();
        let d = degrade(&hr, [2, 2, 1]).unwrap();
        let diff = d.data.max_abs_diff(&hr.data);
        assert!(diff > 1e-3, "{diff}");
    }
}
