//! Region-of-interest extraction, resampling, intensity windowing and
//! rotation augmentation for paired image/mask volumes.
//!
//! Volumes are indexed `(z, y, x)` with `x` fastest. Images are resampled
//! trilinearly and masks by nearest neighbour, so masks stay binary through
//! every transform here.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
    kind: VolumeKind,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>, kind: VolumeKind) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Validation(format!("volume dims must be positive, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if n != data.len() {
            return Err(Error::Validation(format!(
                "volume dims {dims:?} need {n} voxels, got {}",
                data.len()
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Validation(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        if kind == VolumeKind::Mask && data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation("mask voxels must be 0 or 1".into()));
        }
        Ok(Volume {
            dims,
            spacing,
            data,
            kind,
        })
    }

    pub fn filled(dims: [usize; 3], value: f32, kind: VolumeKind) -> Result<Self> {
        Self::new(dims, [1.0; 3], vec![value; dims[0] * dims[1] * dims[2]], kind)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_cubic(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    fn with_data(&self, dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Volume {
        Volume {
            dims,
            spacing,
            data,
            kind: self.kind,
        }
    }
}

/// Half-open box `[lo, hi)` in `(z, y, x)` voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Roi {
    pub fn extent(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }

    /// Clamps to `dims` and rejects empty boxes.
    pub fn clamped(&self, dims: [usize; 3]) -> Result<Roi> {
        let lo = [0, 1, 2].map(|a| self.lo[a].min(dims[a]));
        let hi = [0, 1, 2].map(|a| self.hi[a].min(dims[a]));
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return Err(Error::DegenerateRoi { lo, hi });
        }
        Ok(Roi { lo, hi })
    }

    /// Middle half of the volume along each axis.
    pub fn center_half(dims: [usize; 3]) -> Roi {
        let lo = dims.map(|d| d / 4);
        let hi = [0, 1, 2].map(|a| lo[a] + (dims[a] / 2).max(1));
        Roi { lo, hi }
    }
}

/// Tight box around the foreground, grown by `pad` voxels on every side and
/// clamped to the volume.
pub fn bounding_box(mask: &Volume, pad: usize) -> Result<Roi> {
    let [d, h, w] = mask.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..d {
        for y in 0..h {
            let row = &mask.data[(z * h + y) * w..(z * h + y + 1) * w];
            for (x, &v) in row.iter().enumerate() {
                if v > 0.5 {
                    let p = [z, y, x];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a] + 1);
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(Error::EmptyMask);
    }
    Ok(Roi {
        lo: lo.map(|v| v.saturating_sub(pad)),
        hi: [0, 1, 2].map(|a| (hi[a] + pad).min(mask.dims[a])),
    })
}

/// Trilinear interpolation at fractional voxel coordinates already inside
/// `[0, dim - 1]` on every axis.
fn trilinear(v: &Volume, p: [f32; 3]) -> f32 {
    let [d, h, w] = v.dims;
    let i0 = [0, 1, 2].map(|a| (libm::floorf(p[a]) as usize).min(v.dims[a] - 1));
    let i1 = [
        i0[0].saturating_add(1).min(d - 1),
        (i0[1] + 1).min(h - 1),
        (i0[2] + 1).min(w - 1),
    ];
    let t = [0, 1, 2].map(|a| p[a] - i0[a] as f32);
    let c = |z: usize, y: usize, x: usize| v.get(z, y, x);
    let c00 = c(i0[0], i0[1], i0[2]) * (1.0 - t[2]) + c(i0[0], i0[1], i1[2]) * t[2];
    let c01 = c(i0[0], i1[1], i0[2]) * (1.0 - t[2]) + c(i0[0], i1[1], i1[2]) * t[2];
    let c10 = c(i1[0], i0[1], i0[2]) * (1.0 - t[2]) + c(i1[0], i0[1], i1[2]) * t[2];
    let c11 = c(i1[0], i1[1], i0[2]) * (1.0 - t[2]) + c(i1[0], i1[1], i1[2]) * t[2];
    let c0 = c00 * (1.0 - t[1]) + c01 * t[1];
    let c1 = c10 * (1.0 - t[1]) + c11 * t[1];
    c0 * (1.0 - t[0]) + c1 * t[0]
}

/// Crops image and mask to `roi` and resamples both to `out_side` cubed.
/// Output voxel centers are spread evenly over the box; the image is
/// interpolated trilinearly, the mask by nearest neighbour.
pub fn crop_and_resample(image: &Volume, mask: &Volume, roi: &Roi, out_side: usize) -> Result<(Volume, Volume)> {
    if image.dims != mask.dims {
        return Err(Error::Validation(format!(
            "image dims {:?} differ from mask dims {:?}",
            image.dims, mask.dims
        )));
    }
    if out_side == 0 {
        return Err(Error::Config("out_side must be positive".into()));
    }
    let roi = roi.clamped(image.dims)?;
    let extent = roi.extent();
    let scale = extent.map(|e| e as f32 / out_side as f32);
    let n = out_side * out_side * out_side;
    let mut img = Vec::with_capacity(n);
    let mut msk = Vec::with_capacity(n);
    // Per-axis source coordinates, shared by every output row.
    let lin: Vec<[f32; 3]> = (0..out_side)
        .map(|o| {
            [0, 1, 2].map(|a| {
                let c = (o as f32 + 0.5) * scale[a] - 0.5;
                roi.lo[a] as f32 + c.clamp(0.0, (extent[a] - 1) as f32)
            })
        })
        .collect();
    let near: Vec<[usize; 3]> = (0..out_side)
        .map(|o| [0, 1, 2].map(|a| roi.lo[a] + (((o * extent[a]) * 2 + extent[a]) / (2 * out_side)).min(extent[a] - 1)))
        .collect();
    for z in 0..out_side {
        for y in 0..out_side {
            for x in 0..out_side {
                img.push(trilinear(image, [lin[z][0], lin[y][1], lin[x][2]]));
                msk.push(mask.get(near[z][0], near[y][1], near[x][2]));
            }
        }
    }
    let dims = [out_side; 3];
    let ispace = [0, 1, 2].map(|a| image.spacing[a] * scale[a]);
    let mspace = [0, 1, 2].map(|a| mask.spacing[a] * scale[a]);
    Ok((image.with_data(dims, ispace, img), mask.with_data(dims, mspace, msk)))
}

pub const HU_WINDOW: (f32, f32) = (-100.0, 240.0);

/// Clamps intensities to `[lo_hu, hi_hu]` and maps them linearly onto `[0, 1]`.
pub fn normalize_hu(image: &Volume, lo_hu: f32, hi_hu: f32) -> Result<Volume> {
    if lo_hu.is_nan() || hi_hu.is_nan() || lo_hu >= hi_hu {
        return Err(Error::Config(format!("HU window [{lo_hu}, {hi_hu}] is empty")));
    }
    if image.kind != VolumeKind::Image {
        return Err(Error::Validation("intensity windowing applies to image volumes".into()));
    }
    let span = hi_hu - lo_hu;
    let data = image
        .data
        .iter()
        .map(|&v| (v.clamp(lo_hu, hi_hu) - lo_hu) / span)
        .collect();
    Ok(image.with_data(image.dims, image.spacing, data))
}

type Mat3 = [[f32; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0f32; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotation in `(z, y, x)` coordinates: about z first, then y, then x.
fn rotation(angles_deg: [f32; 3]) -> Mat3 {
    let [az, ay, ax] = angles_deg.map(|a| a.to_radians());
    let (sz, cz) = (libm::sinf(az), libm::cosf(az));
    let (sy, cy) = (libm::sinf(ay), libm::cosf(ay));
    let (sx, cx) = (libm::sinf(ax), libm::cosf(ax));
    // About z: the (y, x) plane turns.
    let rz = [[1.0, 0.0, 0.0], [0.0, cz, -sz], [0.0, sz, cz]];
    // About y: the (z, x) plane turns.
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    // About x: the (z, y) plane turns.
    let rx = [[cx, -sx, 0.0], [sx, cx, 0.0], [0.0, 0.0, 1.0]];
    matmul(&rx, &matmul(&ry, &rz))
}

/// Rotates image and mask by the same `[z, y, x]` angles (degrees) about the
/// volume center. Voxels that map from outside the volume become 0.
pub fn rotate_pair(image: &Volume, mask: &Volume, angles_deg: [f32; 3]) -> Result<(Volume, Volume)> {
    if image.dims != mask.dims {
        return Err(Error::Validation(format!(
            "image dims {:?} differ from mask dims {:?}",
            image.dims, mask.dims
        )));
    }
    if angles_deg == [0.0; 3] {
        return Ok((image.clone(), mask.clone()));
    }
    let r = rotation(angles_deg);
    let [d, h, w] = image.dims;
    let center = image.dims.map(|n| (n as f32 - 1.0) * 0.5);
    let limit = image.dims.map(|n| (n - 1) as f32);
    let mut img = vec![0.0f32; d * h * w];
    let mut msk = vec![0.0f32; d * h * w];
    const SLACK: f32 = 1e-4;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let q = [z as f32 - center[0], y as f32 - center[1], x as f32 - center[2]];
                // inverse rotation = transpose
                let src = [0, 1, 2].map(|i| r[0][i] * q[0] + r[1][i] * q[1] + r[2][i] * q[2] + center[i]);
                let idx = (z * h + y) * w + x;
                if (0..3).all(|a| src[a] >= -SLACK && src[a] <= limit[a] + SLACK) {
                    let p = [0, 1, 2].map(|a| src[a].clamp(0.0, limit[a]));
                    img[idx] = trilinear(image, p);
                }
                let near = src.map(libm::roundf);
                if (0..3).all(|a| near[a] >= 0.0 && near[a] <= limit[a]) {
                    msk[idx] = mask.get(near[0] as usize, near[1] as usize, near[2] as usize);
                }
            }
        }
    }
    Ok((
        image.with_data(image.dims, image.spacing, img),
        mask.with_data(mask.dims, mask.spacing, msk),
    ))
}

pub const AUGMENT_ANGLES: [f32; 3] = [-10.0, 0.0, 10.0];

/// Per-axis angle triples of the augmentation grid, z outermost.
pub fn rotation_grid(angles: &[f32]) -> Vec<[f32; 3]> {
    let mut out = Vec::with_capacity(angles.len().pow(3));
    for &az in angles {
        for &ay in angles {
            for &ax in angles {
                out.push([az, ay, ax]);
            }
        }
    }
    out
}

/// Every rotation of the `angles` grid applied to the pair (27 variants for
/// the default three angles).
pub fn rotation_variants(image: &Volume, mask: &Volume, angles: &[f32]) -> Result<Vec<(Volume, Volume)>> {
    rotation_grid(angles)
        .into_iter()
        .map(|a| rotate_pair(image, mask, a))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    pub out_side: usize,
    pub pad: usize,
    pub hu_lo: f32,
    pub hu_hi: f32,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            out_side: 32,
            pad: 20,
            hu_lo: HU_WINDOW.0,
            hu_hi: HU_WINDOW.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub image: Volume,
    pub mask: Volume,
    pub roi: Roi,
    /// The mask was empty and the center-half crop was used instead.
    pub fallback: bool,
}

/// ROI crop, resample and HU windowing of one case.
pub fn prepare(image: &Volume, mask: &Volume, config: &PrepConfig) -> Result<Prepared> {
    let (roi, fallback) = match bounding_box(mask, config.pad) {
        Ok(roi) => (roi, false),
        Err(Error::EmptyMask) => (Roi::center_half(mask.dims), true),
        Err(e) => return Err(e),
    };
    let (img, msk) = crop_and_resample(image, mask, &roi, config.out_side)?;
    let img = normalize_hu(&img, config.hu_lo, config.hu_hi)?;
    Ok(Prepared {
        image: img,
        mask: msk,
        roi,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_mask(side: usize, lo: usize, hi: usize) -> Volume {
        let mut data = vec![0.0; side * side * side];
        for z in lo..hi {
            for y in lo..hi {
                for x in lo..hi {
                    data[(z * side + y) * side + x] = 1.0;
                }
            }
        }
        Volume::new([side; 3], [1.0; 3], data, VolumeKind::Mask).unwrap()
    }

    fn ramp(side: usize) -> Volume {
        let mut data = Vec::new();
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    data.push((z + 2 * y + 3 * x) as f32 / (6 * side) as f32);
                }
            }
        }
        Volume::new([side; 3], [1.0; 3], data, VolumeKind::Image).unwrap()
    }

    #[test]
    fn padded_box_example() {
        let m = cube_mask(128, 30, 50);
        let roi = bounding_box(&m, 20).unwrap();
        assert_eq!(
            roi,
            Roi {
                lo: [10; 3],
                hi: [70; 3]
            }
        );
    }

    #[test]
    fn box_clamps_at_borders() {
        let m = cube_mask(16, 0, 3);
        let roi = bounding_box(&m, 5).unwrap();
        assert_eq!(roi.lo, [0; 3]);
        assert_eq!(roi.hi, [8; 3]);
        let m = cube_mask(16, 12, 16);
        assert_eq!(bounding_box(&m, 5).unwrap().hi, [16; 3]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = Volume::filled([4; 3], 0.0, VolumeKind::Mask).unwrap();
        assert_eq!(bounding_box(&m, 2), Err(Error::EmptyMask));
        let img = Volume::filled([4; 3], 50.0, VolumeKind::Image).unwrap();
        let p = prepare(
            &img,
            &m,
            &PrepConfig {
                out_side: 4,
                ..PrepConfig::default()
            },
        )
        .unwrap();
        assert!(p.fallback);
        assert_eq!(p.roi, Roi { lo: [1; 3], hi: [3; 3] });
    }

    #[test]
    fn tight_box_is_idempotent() {
        let m = cube_mask(20, 5, 11);
        let roi = bounding_box(&m, 0).unwrap();
        let img = Volume::filled([20; 3], 0.0, VolumeKind::Image).unwrap();
        let (_, cropped) = crop_and_resample(&img, &m, &roi, 6).unwrap();
        let again = bounding_box(&cropped, 0).unwrap();
        assert_eq!(again, Roi { lo: [0; 3], hi: [6; 3] });
    }

    #[test]
    fn resample_constant_and_binary() {
        let img = Volume::filled([10, 12, 14], 42.0, VolumeKind::Image).unwrap();
        let m = cube_mask(14, 3, 9);
        let m = Volume::new(
            [10, 12, 14],
            [1.0; 3],
            m.data()[..10 * 12 * 14].to_vec(),
            VolumeKind::Mask,
        )
        .unwrap();
        let roi = Roi {
            lo: [1, 2, 3],
            hi: [9, 11, 13],
        };
        let (a, b) = crop_and_resample(&img, &m, &roi, 7).unwrap();
        assert!(a.data().iter().all(|&v| v == 42.0));
        assert!(b.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(a.spacing(), [8.0 / 7.0, 9.0 / 7.0, 10.0 / 7.0]);
        let bad = Roi {
            lo: [12, 0, 0],
            hi: [20, 4, 4],
        };
        assert!(matches!(
            crop_and_resample(&img, &m, &bad, 4),
            Err(Error::DegenerateRoi { .. })
        ));
    }

    #[test]
    fn window_endpoints() {
        let img = Volume::new(
            [1, 1, 5],
            [1.0; 3],
            vec![-100.0, 240.0, 70.0, -1000.0, 3000.0],
            VolumeKind::Image,
        )
        .unwrap();
        let n = normalize_hu(&img, -100.0, 240.0).unwrap();
        assert_eq!(n.data(), &[0.0, 1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(normalize_hu(&img, 5.0, 5.0), Err(Error::Config(_))));
    }

    #[test]
    fn twenty_seven_variants_with_exact_identity() {
        let img = ramp(8);
        let m = cube_mask(8, 2, 6);
        let v = rotation_variants(&img, &m, &AUGMENT_ANGLES).unwrap();
        assert_eq!(v.len(), 27);
        assert_eq!(v[13].0, img);
        assert_eq!(v[13].1, m);
        for (_, mask) in &v {
            assert!(mask.data().iter().all(|&x| x == 0.0 || x == 1.0));
        }
    }

    #[test]
    fn rotation_about_z_turns_yx_plane() {
        // A point off-center along x moves toward y after a 90 degree turn about z.
        let side = 5;
        let mut data = vec![0.0; 125];
        data[(2 * side + 2) * side + 4] = 1.0;
        let m = Volume::new([side; 3], [1.0; 3], data, VolumeKind::Mask).unwrap();
        let img = Volume::filled([side; 3], 0.0, VolumeKind::Image).unwrap();
        let (_, r) = rotate_pair(&img, &m, [90.0, 0.0, 0.0]).unwrap();
        let on: Vec<usize> = r
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(on.len(), 1);
        let i = on[0];
        let (z, y, x) = (i / 25, (i / 5) % 5, i % 5);
        assert_eq!((z, x), (2, 2));
        assert_ne!(y, 2);
    }
}
