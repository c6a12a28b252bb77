//! Synthetic polycrystals: periodic voxel Voronoi tessellations on a unit
//! cell, per-grain orientations drawn from a mixed uniform/unimodal
//! distribution, and grain-contact extraction.
//!
//! Voxel layout is x-fastest: `index = x + nx * (y + ny * z)`. Voxel centers
//! sit at `((x + 0.5)/nx, ...)` and all distances are minimum-image periodic.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rotation::{
    random_axis_rotation, random_rotation, standard_normal, Orientation,
};

/// Orientation distribution: with probability `uniform_weight` a uniform
/// random rotation, otherwise the modal orientation perturbed about a random
/// axis by an angle whose density halves at `half_width` (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdfParams {
    pub uniform_weight: f64,
    pub modal: [f64; 3],
    pub half_width: f64,
}

impl OdfParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.uniform_weight) {
            return Err(Error::config(format!(
                "odf uniform_weight {} outside [0, 1]",
                self.uniform_weight
            )));
        }
        if !(self.half_width.is_finite() && self.half_width > 0.0) {
            return Err(Error::config("odf half_width must be positive"));
        }
        Orientation::new(self.modal[0], self.modal[1], self.modal[2])?;
        Ok(())
    }

    pub fn modal_orientation(&self) -> Orientation {
        Orientation::new(self.modal[0], self.modal[1], self.modal[2])
            .expect("validated modal orientation")
    }
}

/// Voxelized periodic polycrystal.
#[derive(Debug, Clone, PartialEq)]
pub struct Polycrystal {
    pub dims: [usize; 3],
    /// Grain label per voxel, x-fastest ordering.
    pub labels: Vec<u16>,
    pub orientations: Vec<Orientation>,
    pub seed: u64,
}

impl Polycrystal {
    pub fn n_grains(&self) -> usize {
        self.orientations.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::config("polycrystal dims must be positive"));
        }
        if self.labels.len() != self.n_voxels() {
            return Err(Error::config(format!(
                "{} labels for {} voxels",
                self.labels.len(),
                self.n_voxels()
            )));
        }
        let n = self.n_grains();
        if n == 0 || n > u16::MAX as usize {
            return Err(Error::config(format!("grain count {n} out of range")));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= n) {
            return Err(Error::config(format!("label {l} exceeds grain count {n}")));
        }
        Ok(())
    }

    /// Voxel-count volume fraction per grain; errors on empty grains.
    pub fn volume_fractions(&self) -> Result<Vec<f64>> {
        let mut counts = vec![0usize; self.n_grains()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        if let Some(g) = counts.iter().position(|&c| c == 0) {
            return Err(Error::config(format!("grain {g} has zero voxels")));
        }
        let total = self.n_voxels() as f64;
        Ok(counts.into_iter().map(|c| c as f64 / total).collect())
    }

    /// Grain-contact graph: one node per grain, an edge wherever two voxels
    /// with different labels share a face (6-neighborhood, periodic wrap).
    pub fn contacts(&self) -> Result<Graph> {
        self.validate()?;
        let [nx, ny, nz] = self.dims;
        let mut pairs: BTreeSet<(u16, u16)> = BTreeSet::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let a = self.labels[self.voxel_index(x, y, z)];
                    let neighbors = [
                        self.labels[self.voxel_index((x + 1) % nx, y, z)],
                        self.labels[self.voxel_index(x, (y + 1) % ny, z)],
                        self.labels[self.voxel_index(x, y, (z + 1) % nz)],
                    ];
                    for b in neighbors {
                        if a != b {
                            pairs.insert((a.min(b), a.max(b)));
                        }
                    }
                }
            }
        }
        let edges: Vec<(usize, usize)> =
            pairs.into_iter().map(|(i, j)| (i as usize, j as usize)).collect();
        Graph::new(self.n_grains(), &edges)
    }
}

/// Assigns every voxel to the nearest seed point under the periodic metric.
/// Ties break to the lowest seed index. Exposed for testing against
/// analytically known partitions.
pub fn assign_voxels(dims: [usize; 3], seeds: &[[f64; 3]]) -> Vec<u16> {
    let [nx, ny, nz] = dims;
    let mut labels = vec![0u16; nx * ny * nz];
    let centers = |n: usize| -> Vec<f64> {
        (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect()
    };
    let (cx, cy, cz) = (centers(nx), centers(ny), centers(nz));
    let axis_d2 = |c: f64, s: f64| -> f64 {
        let d = (c - s).abs();
        let d = d.min(1.0 - d);
        d * d
    };
    let mut idx = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut best = 0u16;
                let mut best_d2 = f64::INFINITY;
                for (g, s) in seeds.iter().enumerate() {
                    let d2 =
                        axis_d2(cx[x], s[0]) + axis_d2(cy[y], s[1]) + axis_d2(cz[z], s[2]);
                    if d2 < best_d2 {
                        best_d2 = d2;
                        best = g as u16;
                    }
                }
                labels[idx] = best;
                idx += 1;
            }
        }
    }
    labels
}

/// Draws grain orientations from the mixed distribution.
pub fn sample_orientations<R: Rng>(
    n: usize,
    odf: &OdfParams,
    rng: &mut R,
) -> Result<Vec<Orientation>> {
    odf.validate()?;
    let modal = odf.modal_orientation().matrix();
    // Half-normal angle scale: density halves exactly at `half_width`.
    let sigma = odf.half_width / (2.0 * std::f64::consts::LN_2).sqrt();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen_range(0.0..1.0);
        let r = if u < odf.uniform_weight {
            random_rotation(rng)
        } else {
            let angle = (standard_normal(rng) * sigma).abs().min(std::f64::consts::PI);
            modal * random_axis_rotation(rng, angle)
        };
        out.push(Orientation::from_matrix(&r)?);
    }
    Ok(out)
}

/// Generates a periodic voxel Voronoi polycrystal with ODF-sampled
/// orientations. Resamples the seed points (up to 100 attempts) if any grain
/// ends up with no voxels.
pub fn generate_polycrystal(
    dims: [usize; 3],
    n_grains: usize,
    odf: &OdfParams,
    seed: u64,
) -> Result<Polycrystal> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::config("polycrystal dims must be positive"));
    }
    let n_voxels = dims[0] * dims[1] * dims[2];
    if n_grains == 0 || n_grains > n_voxels || n_grains > u16::MAX as usize {
        return Err(Error::config(format!(
            "grain count {n_grains} invalid for {n_voxels} voxels"
        )));
    }
    odf.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut labels = None;
    for _attempt in 0..100 {
        let seeds: Vec<[f64; 3]> = (0..n_grains)
            .map(|_| {
                [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect();
        let candidate = assign_voxels(dims, &seeds);
        let mut seen = vec![false; n_grains];
        for &l in &candidate {
            seen[l as usize] = true;
        }
        if seen.iter().all(|&s| s) {
            labels = Some(candidate);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        Error::numeric("tessellation left a grain empty after 100 attempts")
    })?;
    let orientations = sample_orientations(n_grains, odf, &mut rng)?;
    let p = Polycrystal { dims, labels, orientations, seed };
    p.validate()?;
    Ok(p)
}

// ---------------------------------------------------------------------------
// Binary file format
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"PXTL";
const VERSION: u32 = 1;

/// Writes the binary polycrystal format: magic `PXTL`, version, grid dims,
/// grain count, seed, u16 labels (x-fastest), then per-grain Euler triples.
/// All integers and floats little-endian.
pub fn write_polycrystal(path: &Path, p: &Polycrystal) -> Result<()> {
    p.validate()?;
    let mut buf = Vec::with_capacity(32 + 2 * p.labels.len() + 24 * p.n_grains());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for d in p.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(p.n_grains() as u32).to_le_bytes());
    buf.extend_from_slice(&p.seed.to_le_bytes());
    for &l in &p.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for o in &p.orientations {
        for v in o.as_array() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads the binary polycrystal format written by [`write_polycrystal`].
pub fn read_polycrystal(path: &Path) -> Result<Polycrystal> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        let end = *off + n;
        if end > buf.len() {
            return Err(Error::io(path, "truncated polycrystal file"));
        }
        let s = &buf[*off..end];
        *off = end;
        Ok(s)
    };
    if take(&mut off, 4)? != MAGIC {
        return Err(Error::io(path, "bad magic, not a polycrystal file"));
    }
    let rd_u32 = |off: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()))
    };
    let version = rd_u32(&mut off)?;
    if version != VERSION {
        return Err(Error::io(path, format!("unsupported version {version}")));
    }
    let dims = [
        rd_u32(&mut off)? as usize,
        rd_u32(&mut off)? as usize,
        rd_u32(&mut off)? as usize,
    ];
    let n_grains = rd_u32(&mut off)? as usize;
    let seed = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    let n_voxels = dims[0] * dims[1] * dims[2];
    let mut labels = Vec::with_capacity(n_voxels);
    for _ in 0..n_voxels {
        labels.push(u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()));
    }
    let mut orientations = Vec::with_capacity(n_grains);
    for _ in 0..n_grains {
        let mut a = [0.0f64; 3];
        for v in &mut a {
            *v = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        }
        orientations.push(Orientation::new(a[0], a[1], a[2])?);
    }
    if off != buf.len() {
        return Err(Error::io(path, "trailing bytes in polycrystal file"));
    }
    let p = Polycrystal { dims, labels, orientations, seed };
    p.validate()?;
    Ok(p)
}
