//! Authored synthetic evaluation scenes: compact material descriptions
//! expanded to per-pixel BRDF samples on the device plane, plus simulated
//! acquisition of whole scenes.

use glam::DVec3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::brdf::{BRDFSample, GGXParams, ShadingFrame};
use crate::device::VirtualDevice;
use crate::error::{Error, Result};
use crate::fit::MeasurementImage;
use crate::lightstage::{acquire, LightingPattern, NoiseConfig};
use crate::seeding::derived_rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub diffuse_albedo: [f64; 3],
    pub specular_albedo: [f64; 3],
    /// (alpha_x, alpha_y)
    pub roughness: [f64; 2],
    #[serde(default)]
    pub normal_tilt_deg: f64,
    #[serde(default)]
    pub tilt_azimuth_deg: f64,
    #[serde(default)]
    pub tangent_angle_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// Material 0 everywhere.
    Constant,
    /// Material 0 on the left half, material 1 on the right.
    TwoMaterial,
    /// Material 0 with alpha_y swept between the two materials' values
    /// across columns.
    AnisoGradient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Physical footprint in meters, centered on the plane origin.
    pub extent: [f64; 2],
    pub kind: SceneKind,
    pub materials: Vec<MaterialSpec>,
}

impl SceneSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: SceneSpec =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid_argument("scene dimensions must be positive"));
        }
        let need = match self.kind {
            SceneKind::Constant => 1,
            SceneKind::TwoMaterial | SceneKind::AnisoGradient => 2,
        };
        if self.materials.len() < need {
            return Err(Error::invalid_argument(format!(
                "scene kind needs at least {need} materials"
            )));
        }
        Ok(())
    }

    /// Two-material segmentation scene with one diffuse-dominant and one
    /// sharp anisotropic-specular material.
    pub fn two_material_default(width: usize, height: usize) -> Self {
        SceneSpec {
            width,
            height,
            extent: [0.04, 0.04],
            kind: SceneKind::TwoMaterial,
            materials: vec![
                MaterialSpec {
                    diffuse_albedo: [0.75, 0.3, 0.2],
                    specular_albedo: [0.02, 0.02, 0.02],
                    roughness: [0.7, 0.7],
                    normal_tilt_deg: 0.0,
                    tilt_azimuth_deg: 0.0,
                    tangent_angle_deg: 0.0,
                },
                MaterialSpec {
                    diffuse_albedo: [0.05, 0.08, 0.12],
                    specular_albedo: [2.5, 2.5, 2.5],
                    roughness: [0.05, 0.3],
                    normal_tilt_deg: 0.0,
                    tilt_azimuth_deg: 0.0,
                    tangent_angle_deg: 20.0,
                },
            ],
        }
    }

    pub fn constant_default(width: usize, height: usize) -> Self {
        SceneSpec {
            width,
            height,
            extent: [0.04, 0.04],
            kind: SceneKind::Constant,
            materials: vec![MaterialSpec {
                diffuse_albedo: [0.5, 0.35, 0.25],
                specular_albedo: [0.8, 0.8, 0.8],
                roughness: [0.15, 0.15],
                normal_tilt_deg: 8.0,
                tilt_azimuth_deg: 40.0,
                tangent_angle_deg: 0.0,
            }],
        }
    }

    pub fn aniso_gradient_default(width: usize, height: usize) -> Self {
        SceneSpec {
            width,
            height,
            extent: [0.04, 0.04],
            kind: SceneKind::AnisoGradient,
            materials: vec![
                MaterialSpec {
                    diffuse_albedo: [0.2, 0.25, 0.3],
                    specular_albedo: [1.5, 1.4, 1.2],
                    roughness: [0.08, 0.08],
                    normal_tilt_deg: 0.0,
                    tilt_azimuth_deg: 0.0,
                    tangent_angle_deg: 0.0,
                },
                MaterialSpec {
                    diffuse_albedo: [0.2, 0.25, 0.3],
                    specular_albedo: [1.5, 1.4, 1.2],
                    roughness: [0.08, 0.6],
                    normal_tilt_deg: 0.0,
                    tilt_azimuth_deg: 0.0,
                    tangent_angle_deg: 0.0,
                },
            ],
        }
    }
}

/// A scene expanded to per-pixel samples plus its region labels.
#[derive(Debug, Clone)]
pub struct SceneGrid {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<BRDFSample>,
    pub region: Vec<u8>,
}

fn material_frame(plane_n: DVec3, plane_u: DVec3, plane_v: DVec3, mat: &MaterialSpec) -> ShadingFrame {
    let tilt = mat.normal_tilt_deg.to_radians();
    let az = mat.tilt_azimuth_deg.to_radians();
    let normal = (plane_u * (tilt.sin() * az.cos())
        + plane_v * (tilt.sin() * az.sin())
        + plane_n * tilt.cos())
    .normalize();
    let e1 = if normal.dot(plane_u).abs() < 0.95 { plane_u } else { plane_v };
    let t0 = (e1 - normal * e1.dot(normal)).normalize();
    let t1 = normal.cross(t0);
    let psi = mat.tangent_angle_deg.to_radians();
    let tangent = (t0 * psi.cos() + t1 * psi.sin()).normalize();
    let bitangent = normal.cross(tangent);
    ShadingFrame { normal, tangent, bitangent }
}

fn material_params(mat: &MaterialSpec) -> GGXParams {
    GGXParams::new(
        DVec3::from_array(mat.diffuse_albedo),
        DVec3::from_array(mat.specular_albedo),
        mat.roughness[0],
        mat.roughness[1],
    )
}

/// Expand a scene description over the device plane.
pub fn expand_scene(spec: &SceneSpec, device: &VirtualDevice) -> Result<SceneGrid> {
    spec.validate()?;
    let plane = &device.plane;
    if spec.extent[0] > plane.extent[0] || spec.extent[1] > plane.extent[1] {
        return Err(Error::invalid_argument("scene extent exceeds the sample plane"));
    }
    let pn = plane.normal();
    let mut samples = Vec::with_capacity(spec.width * spec.height);
    let mut region = Vec::with_capacity(spec.width * spec.height);
    for y in 0..spec.height {
        for x in 0..spec.width {
            // Pixel centers over the footprint.
            let fu = ((x as f64 + 0.5) / spec.width as f64 - 0.5) * spec.extent[0];
            let fv = ((y as f64 + 0.5) / spec.height as f64 - 0.5) * spec.extent[1];
            let position = plane.origin + plane.u_axis * fu + plane.v_axis * fv;
            let (mat_idx, params) = match spec.kind {
                SceneKind::Constant => (0usize, material_params(&spec.materials[0])),
                SceneKind::TwoMaterial => {
                    let idx = if x < spec.width / 2 { 0 } else { 1 };
                    (idx, material_params(&spec.materials[idx]))
                }
                SceneKind::AnisoGradient => {
                    let t = x as f64 / (spec.width.max(2) - 1) as f64;
                    let m0 = &spec.materials[0];
                    let m1 = &spec.materials[1];
                    let mut p = material_params(m0);
                    p.roughness_y =
                        m0.roughness[1] * (1.0 - t) + m1.roughness[1] * t;
                    (0, p)
                }
            };
            let frame = material_frame(pn, plane.u_axis, plane.v_axis, &spec.materials[mat_idx]);
            samples.push(BRDFSample { position, frame, params });
            region.push(mat_idx as u8);
        }
    }
    Ok(SceneGrid { width: spec.width, height: spec.height, samples, region })
}

/// Simulate acquisition of every pixel of a scene under the given signed
/// patterns. Per-pixel generators derive from the seed, so the result is
/// reproducible and thread-count independent.
pub fn acquire_scene(
    grid: &SceneGrid,
    patterns: &[LightingPattern],
    device: &VirtualDevice,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<MeasurementImage> {
    let results: Vec<Result<crate::lightstage::Measurements>> = grid
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = derived_rng(seed, &[0x5C, i as u64]);
            acquire(s, patterns, device, noise, true, &mut rng)
        })
        .collect();
    let mut measurements = Vec::with_capacity(results.len());
    for r in results {
        measurements.push(r?);
    }
    Ok(MeasurementImage {
        width: grid.width,
        height: grid.height,
        positions: grid.samples.iter().map(|s| s.position).collect(),
        measurements,
    })
}
