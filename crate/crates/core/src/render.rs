//! Validation rendering: per-pixel direct illumination of SVBRDF data
//! (ground-truth scenes or fitted texture maps) under a point light.

use glam::DVec3;
use rayon::prelude::*;

use crate::brdf::{eval_brdf, BRDFSample, GGXParams, ShadingFrame};
use crate::error::Result;
use crate::fit::TextureMaps;
use crate::scene::SceneGrid;

#[derive(Debug, Clone, Copy)]
pub struct PointLight {
    pub position: DVec3,
    /// Per-channel radiant intensity.
    pub intensity: DVec3,
}

/// Radiance of one texel under a point light: f * (n.wi)+ * I / d^2.
fn shade(sample: &BRDFSample, light: &PointLight, view: DVec3) -> Result<[f32; 3]> {
    let r = light.position - sample.position;
    let d2 = r.length_squared();
    let wi = r / d2.sqrt();
    let wo = (view - sample.position).normalize();
    let cos_i = wi.dot(sample.frame.normal);
    if cos_i <= 0.0 {
        return Ok([0.0; 3]);
    }
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let f = eval_brdf(wi, wo, &sample.frame, &sample.params, c)?;
        out[c] = (f * cos_i * light.intensity[c] / d2) as f32;
    }
    Ok(out)
}

/// Render a ground-truth scene grid.
pub fn render_scene(grid: &SceneGrid, light: &PointLight, view: DVec3) -> Result<Vec<[f32; 3]>> {
    let shaded: Vec<Result<[f32; 3]>> =
        grid.samples.par_iter().map(|s| shade(s, light, view)).collect();
    shaded.into_iter().collect()
}

/// Rebuild per-texel samples from texture maps laid out over a centered
/// footprint on the plane, then render them. Directions are renormalized
/// and re-orthogonalized after their 8-bit storage encoding.
pub fn maps_to_samples(
    maps: &TextureMaps,
    extent: [f64; 2],
    plane: &crate::device::SamplePlane,
) -> Result<Vec<BRDFSample>> {
    let pn = plane.normal();
    let mut out = Vec::with_capacity(maps.width * maps.height);
    for y in 0..maps.height {
        for x in 0..maps.width {
            let i = y * maps.width + x;
            let fu = ((x as f64 + 0.5) / maps.width as f64 - 0.5) * extent[0];
            let fv = ((y as f64 + 0.5) / maps.height as f64 - 0.5) * extent[1];
            let position = plane.origin + plane.u_axis * fu + plane.v_axis * fv;
            let n_raw = DVec3::new(
                maps.normal[i][0] as f64,
                maps.normal[i][1] as f64,
                maps.normal[i][2] as f64,
            );
            let normal = if n_raw.length_squared() > 1e-12 { n_raw.normalize() } else { pn };
            let t_raw = DVec3::new(
                maps.tangent[i][0] as f64,
                maps.tangent[i][1] as f64,
                maps.tangent[i][2] as f64,
            );
            let frame = ShadingFrame::from_normal_tangent(normal, t_raw)
                .or_else(|_| ShadingFrame::from_normal_tangent(normal, plane.u_axis))
                .or_else(|_| ShadingFrame::from_normal_tangent(normal, plane.v_axis))?;
            let params = GGXParams::new(
                DVec3::new(
                    maps.diffuse[i][0] as f64,
                    maps.diffuse[i][1] as f64,
                    maps.diffuse[i][2] as f64,
                ),
                DVec3::new(
                    maps.specular[i][0] as f64,
                    maps.specular[i][1] as f64,
                    maps.specular[i][2] as f64,
                ),
                (maps.roughness[i][0] as f64).max(1e-4),
                (maps.roughness[i][1] as f64).max(1e-4),
            );
            out.push(BRDFSample { position, frame, params });
        }
    }
    Ok(out)
}

pub fn render_maps(
    maps: &TextureMaps,
    extent: [f64; 2],
    plane: &crate::device::SamplePlane,
    light: &PointLight,
    view: DVec3,
) -> Result<Vec<[f32; 3]>> {
    let samples = maps_to_samples(maps, extent, plane)?;
    let shaded: Vec<Result<[f32; 3]>> =
        samples.par_iter().map(|s| shade(s, light, view)).collect();
    shaded.into_iter().collect()
}

/// Convenience: a held-out light/view pose for validation renders — off to
/// one side, not part of the LED set.
pub fn novel_light_for(device: &crate::device::VirtualDevice) -> PointLight {
    let h = device.description.height;
    PointLight {
        position: DVec3::new(0.18, 0.10, 0.8 * h),
        intensity: DVec3::splat(0.05),
    }
}
