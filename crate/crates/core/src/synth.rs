//! Procedural paired volumes with separable shape and texture anomalies.
//!
//! Each case is an ellipsoidal organ (jittered radii, random orientation) on
//! a darker background, in Hounsfield-like units. Abnormal cases carry a
//! surface bump (visible in the mask and, weakly, in the image silhouette)
//! and/or a hypodense blob inside the organ (visible only in the image).
//! The mask is the organ support with optional boundary perturbations; it
//! never encodes the blob.
//!
//! Smooth texture is value noise: uniform random values on a lattice with
//! spacing `NOISE_CELL` voxels, trilinearly interpolated.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{Volume, VolumeKind};
use crate::rng;
use crate::train::Sample;

pub const MIN_SIDE: usize = 16;
pub const NOISE_CELL: f32 = 6.0;
pub const OCCUPANCY: (f64, f64) = (0.05, 0.30);

const BACKGROUND_HU: f32 = -10.0;
const BACKGROUND_AMP: f32 = 45.0;
const ORGAN_HU: f32 = 60.0;
const ORGAN_AMP: f32 = 20.0;
const VOXEL_SD: f32 = 18.0;
const LESION_SHIFT_HU: f32 = -70.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub side: usize,
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// Probability that an abnormal case carries a surface deformation.
    pub shape_signal: f64,
    /// Probability that an abnormal case carries a texture lesion.
    pub texture_signal: f64,
    /// Boundary perturbation of the masks; 1.0 is four patches dilated or
    /// eroded one voxel deep, 0.25 a single patch.
    pub seg_noise: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            side: 32,
            n_normal: 200,
            n_abnormal: 136,
            shape_signal: 0.5,
            texture_signal: 0.5,
            seg_noise: 0.25,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < MIN_SIDE {
            return Err(Error::Config(format!(
                "side must be at least {MIN_SIDE}, got {}",
                self.side
            )));
        }
        for (name, v) in [
            ("shape_signal", self.shape_signal),
            ("texture_signal", self.texture_signal),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.n_abnormal > 0 && self.shape_signal == 0.0 && self.texture_signal == 0.0 {
            return Err(Error::Config(
                "abnormal cases need a nonzero shape or texture signal".into(),
            ));
        }
        if !(self.seg_noise >= 0.0 && self.seg_noise.is_finite()) {
            return Err(Error::Config(format!(
                "seg_noise must be non-negative, got {}",
                self.seg_noise
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub sample: Sample,
    pub shape: bool,
    pub texture: bool,
    /// Organ voxels outside the undeformed ellipsoid.
    pub bump_voxels: usize,
}

pub fn generate(config: &GenConfig) -> Result<Vec<Sample>> {
    Ok(generate_cases(config)?.into_iter().map(|c| c.sample).collect())
}

/// Normal cases first, then abnormal ones; ids `case0000`, `case0001`, ...
pub fn generate_cases(config: &GenConfig) -> Result<Vec<SynthCase>> {
    config.validate()?;
    let total = config.n_normal + config.n_abnormal;
    (0..total)
        .map(|i| {
            let mut rng = rng::stream(config.seed, &[0x73796e, i as u64]);
            let (shape, texture) = if i < config.n_normal {
                (false, false)
            } else {
                loop {
                    let s = rng.random_bool(config.shape_signal);
                    let t = rng.random_bool(config.texture_signal);
                    if s || t {
                        break (s, t);
                    }
                }
            };
            make_case(&mut rng, config, format!("case{i:04}"), shape, texture)
        })
        .collect()
}

type Vec3 = [f32; 3];

fn dot3(a: Vec3, b: Vec3) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    let n = Normal::new(0.0f32, 1.0).unwrap();
    loop {
        let v = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let len = libm::sqrtf(dot3(v, v));
        if len > 1e-3 {
            return v.map(|c| c / len);
        }
    }
}

/// Orthonormal frame whose rows are the ellipsoid axes.
fn random_frame(rng: &mut ChaCha8Rng) -> [Vec3; 3] {
    let a = unit_vector(rng);
    let mut b = unit_vector(rng);
    let proj = dot3(a, b);
    b = [b[0] - proj * a[0], b[1] - proj * a[1], b[2] - proj * a[2]];
    let len = libm::sqrtf(dot3(b, b)).max(1e-6);
    b = b.map(|c| c / len);
    let c = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    [a, b, c]
}

fn value_noise(rng: &mut ChaCha8Rng, side: usize) -> Vec<f32> {
    let cells = (side as f32 / NOISE_CELL) as usize + 2;
    let lattice: Vec<f32> = (0..cells * cells * cells)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let at = |z: usize, y: usize, x: usize| lattice[(z * cells + y) * cells + x];
    let mut out = Vec::with_capacity(side * side * side);
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let p = [z, y, x].map(|c| c as f32 / NOISE_CELL);
                let i = p.map(|c| c as usize);
                let f = [0, 1, 2].map(|a| p[a] - i[a] as f32);
                let mut v = 0.0;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let wz = if dz == 1 { f[0] } else { 1.0 - f[0] };
                            let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
                            let wx = if dx == 1 { f[2] } else { 1.0 - f[2] };
                            v += wz * wy * wx * at(i[0] + dz, i[1] + dy, i[2] + dx);
                        }
                    }
                }
                out.push(v);
            }
        }
    }
    out
}

struct Organ {
    center: Vec3,
    radii: Vec3,
    frame: [Vec3; 3],
    bumps: Vec<(Vec3, f32)>,
}

const BUMP_WIDTH: f32 = 0.15;
const BUMPS: (usize, usize) = (2, 3);
const BUMP_AMP: (f32, f32) = (0.35, 0.5);

impl Organ {
    /// Ellipsoid coordinates of a voxel.
    fn local(&self, p: Vec3) -> Vec3 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [0, 1, 2].map(|a| dot3(self.frame[a], d) / self.radii[a])
    }

    /// Radius of the boundary in the direction of `q` (1 for the plain ellipsoid).
    fn boundary(&self, q: Vec3, rho: f32) -> f32 {
        if rho < 1e-6 {
            return 1.0;
        }
        let lift: f32 = self
            .bumps
            .iter()
            .map(|&(dir, amp)| amp * libm::expf(-(1.0 - dot3(dir, q) / rho) / BUMP_WIDTH))
            .fold(0.0, f32::max);
        1.0 + lift
    }

    fn world(&self, q: Vec3) -> Vec3 {
        let mut p = self.center;
        for ((axis, qa), r) in self.frame.iter().zip(q).zip(self.radii) {
            for (c, f) in p.iter_mut().zip(axis) {
                *c += f * qa * r;
            }
        }
        p
    }
}

fn make_case(rng: &mut ChaCha8Rng, config: &GenConfig, id: String, shape: bool, texture: bool) -> Result<SynthCase> {
    let s = config.side;
    let n = s * s * s;
    let sf = s as f32;
    for _attempt in 0..64 {
        let center = [0; 3].map(|_| sf * 0.5 - 0.5 + rng.random_range(-0.04f32..0.04) * sf);
        let radii = [0; 3].map(|_| sf * rng.random_range(0.22f32..0.30));
        let frame = random_frame(rng);
        let bumps = if shape {
            let n = rng.random_range(BUMPS.0..=BUMPS.1);
            (0..n)
                .map(|_| (unit_vector(rng), rng.random_range(BUMP_AMP.0..BUMP_AMP.1)))
                .collect()
        } else {
            Vec::new()
        };
        let organ = Organ {
            center,
            radii,
            frame,
            bumps,
        };

        let mut support = vec![false; n];
        let mut bump_voxels = 0;
        for z in 0..s {
            for y in 0..s {
                for x in 0..s {
                    let q = organ.local([z as f32, y as f32, x as f32]);
                    let rho = libm::sqrtf(dot3(q, q));
                    if rho <= organ.boundary(q, rho) {
                        support[(z * s + y) * s + x] = true;
                        if rho > 1.0 {
                            bump_voxels += 1;
                        }
                    }
                }
            }
        }
        let occupancy = support.iter().filter(|&&v| v).count() as f64 / n as f64;
        if !(OCCUPANCY.0..=OCCUPANCY.1).contains(&occupancy) {
            continue;
        }

        let background = value_noise(rng, s);
        let texture_noise = value_noise(rng, s);
        let lesion = if texture {
            let mut q = unit_vector(rng);
            let r = rng.random_range(0.0f32..0.35);
            q = q.map(|c| c * r);
            let lr = radii.iter().cloned().fold(f32::INFINITY, f32::min) * rng.random_range(0.45f32..0.6);
            Some((organ.world(q), lr))
        } else {
            None
        };
        let voxel = Normal::new(0.0f32, VOXEL_SD).unwrap();
        let mut image = Vec::with_capacity(n);
        for z in 0..s {
            for y in 0..s {
                for x in 0..s {
                    let i = (z * s + y) * s + x;
                    let mut v = if support[i] {
                        ORGAN_HU + ORGAN_AMP * texture_noise[i]
                    } else {
                        BACKGROUND_HU + BACKGROUND_AMP * background[i]
                    };
                    if let (true, Some((c, r))) = (support[i], lesion) {
                        let d = [z as f32 - c[0], y as f32 - c[1], x as f32 - c[2]];
                        let t = dot3(d, d) / (r * r);
                        // smooth falloff, zero beyond the lesion radius
                        if t < 1.0 {
                            v += LESION_SHIFT_HU * (1.0 - t);
                        }
                    }
                    image.push(v + voxel.sample(rng));
                }
            }
        }

        let mut mask = support.clone();
        perturb_mask(rng, &mut mask, s, config.seg_noise);
        let occupancy = mask.iter().filter(|&&v| v).count() as f64 / n as f64;
        if !(OCCUPANCY.0..=OCCUPANCY.1).contains(&occupancy) {
            continue;
        }
        let mask: Vec<f32> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let image = Volume::new([s; 3], [1.0; 3], image, VolumeKind::Image)?;
        let mask = Volume::new([s; 3], [1.0; 3], mask, VolumeKind::Mask)?;
        let z = u8::from(shape || texture);
        return Ok(SynthCase {
            sample: Sample::new(id, image, mask, z)?,
            shape,
            texture,
            bump_voxels,
        });
    }
    Err(Error::Config(format!(
        "case {id}: organ occupancy left [{}, {}] in every attempt",
        OCCUPANCY.0, OCCUPANCY.1
    )))
}

const NOISE_PATCHES: usize = 4;

/// Dilates or erodes the mask inside spherical patches centred on boundary
/// voxels. `depth` buys `NOISE_PATCHES` patch-steps per unit: `ceil(depth)`
/// steps per patch, with the patch count scaled to match, so fractional
/// values perturb fewer patches one voxel deep.
fn perturb_mask(rng: &mut ChaCha8Rng, mask: &mut [bool], s: usize, depth: f64) {
    let steps = libm::ceil(depth) as usize;
    if steps == 0 {
        return;
    }
    let patches = libm::round(NOISE_PATCHES as f64 * depth / steps as f64) as usize;
    let idx = |z: usize, y: usize, x: usize| (z * s + y) * s + x;
    let boundary: Vec<[usize; 3]> = (0..s * s * s)
        .filter_map(|i| {
            let p = [i / (s * s), (i / s) % s, i % s];
            let on = mask[i] && neighbours(p, s).any(|q| !mask[idx(q[0], q[1], q[2])]);
            on.then_some(p)
        })
        .collect();
    if boundary.is_empty() {
        return;
    }
    let radius = (s as f32 / 8.0).max(2.0);
    for _ in 0..patches {
        let c = boundary[rng.random_range(0..boundary.len())];
        let grow = rng.random_bool(0.5);
        let in_patch = |p: [usize; 3]| {
            let d = [0, 1, 2].map(|a| p[a] as f32 - c[a] as f32);
            dot3(d, d) <= radius * radius
        };
        for _ in 0..steps {
            let prev = mask.to_vec();
            for z in 0..s {
                for y in 0..s {
                    for x in 0..s {
                        let p = [z, y, x];
                        if !in_patch(p) {
                            continue;
                        }
                        let i = idx(z, y, x);
                        let mut ns = neighbours(p, s).map(|q| prev[idx(q[0], q[1], q[2])]);
                        if grow && !prev[i] && ns.any(|v| v) {
                            mask[i] = true;
                        } else if !grow && prev[i] && ns.any(|v| !v) {
                            mask[i] = false;
                        }
                    }
                }
            }
        }
    }
}

/// 6-connected neighbours inside the volume.
fn neighbours(p: [usize; 3], s: usize) -> impl Iterator<Item = [usize; 3]> {
    const STEPS: [(usize, isize); 6] = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)];
    STEPS.into_iter().filter_map(move |(a, d)| {
        let v = p[a] as isize + d;
        if v < 0 || v >= s as isize {
            return None;
        }
        let mut q = p;
        q[a] = v as usize;
        Some(q)
    })
}
