//! Per-texel runtime: reconstruct diffuse/specular lumitexels with the
//! selected decoder, fit a normal from the diffuse part, fit the shading
//! frame and roughnesses from the specular part, then recover RGB albedos
//! by non-negative least squares against the original measurements.

use glam::DVec3;
use rayon::prelude::*;

use crate::brdf::{BRDFSample, GGXParams, ShadingFrame};
use crate::device::VirtualDevice;
use crate::error::{Error, Result};
use crate::lightstage::{
    grayscale, measure, render_lumitexel, LedSet, LightingPattern, Lumitexel, LumitexelPair,
    Measurements, RenderMode,
};
use crate::moe::{select_decoder, ModelBundle};
use crate::optim::{minimize_box, nnls, Bounds, MinimizeOptions};

pub const FLAG_DEGENERATE_DIFFUSE: u8 = 1 << 0;
pub const FLAG_DEGENERATE_SPECULAR: u8 = 1 << 1;
pub const FLAG_DEGENERATE_ALBEDO: u8 = 1 << 2;
pub const FLAG_FRAME_NOT_CONVERGED: u8 = 1 << 3;

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub normal_starts: usize,
    pub tangent_starts: usize,
    pub alpha_init: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub max_iters: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            normal_starts: 8,
            tangent_starts: 4,
            alpha_init: 0.2,
            alpha_min: 0.01,
            alpha_max: 1.0,
            max_iters: 120,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TexelResiduals {
    pub diffuse_fit: f64,
    pub specular_fit: f64,
    pub albedo_fit: f64,
}

#[derive(Debug, Clone)]
pub struct TexelResult {
    pub frame: ShadingFrame,
    pub params: GGXParams,
    pub decoder_index: usize,
    pub residuals: TexelResiduals,
    pub flags: u8,
}

/// Gray measurements -> gating -> best decoder -> diffuse/specular pair.
pub fn reconstruct_lumitexels(
    measurements_rgb: &Measurements,
    bundle: &ModelBundle,
) -> Result<(LumitexelPair, usize)> {
    let gray = grayscale(measurements_rgb)?;
    let scale = bundle.config.measurement_scale;
    let meas: Vec<f32> = gray.iter().map(|v| (*v * scale) as f32).collect();
    let gating = bundle.gate(&meas)?;
    let a = select_decoder(&gating);
    let pred = bundle.decode(&meas, a)?;
    Ok((
        LumitexelPair {
            diffuse: pred.diffuse.iter().map(|v| *v as f64).collect(),
            specular: pred.specular.iter().map(|v| *v as f64).collect(),
        },
        a,
    ))
}

fn spherical_dir(plane_u: DVec3, plane_v: DVec3, plane_n: DVec3, theta: f64, phi: f64) -> DVec3 {
    let st = theta.sin();
    (plane_u * (st * phi.cos()) + plane_v * (st * phi.sin()) + plane_n * theta.cos()).normalize()
}

fn angles_of(plane_u: DVec3, plane_v: DVec3, plane_n: DVec3, dir: DVec3) -> (f64, f64) {
    let z = dir.dot(plane_n).clamp(-1.0, 1.0);
    let theta = z.acos();
    let phi = dir.dot(plane_v).atan2(dir.dot(plane_u));
    (theta, phi)
}

#[derive(Debug, Clone)]
pub struct NormalFit {
    pub normal: DVec3,
    pub scale: f64,
    pub residual: f64,
    pub degenerate: bool,
}

/// Lambert-kernel lumitexel for a candidate normal on the diffuse LED set.
fn diffuse_kernel(device: &VirtualDevice, position: DVec3, normal: DVec3) -> Result<Lumitexel> {
    let tangent_hint = if normal.dot(DVec3::X).abs() < 0.9 { DVec3::X } else { DVec3::Y };
    let frame = ShadingFrame::from_normal_tangent(normal, tangent_hint)?;
    let sample = BRDFSample {
        position,
        frame,
        params: GGXParams::new(DVec3::ONE, DVec3::ZERO, 0.3, 0.3),
    };
    render_lumitexel(&sample, device, 0, RenderMode::DiffuseOnly, LedSet::Diffuse)
}

/// Nonlinear fit of a normal to a diffuse lumitexel. The linear radiance
/// scale is profiled out per candidate, leaving a 2-angle problem solved
/// from several hemisphere starts.
pub fn fit_normal(
    diffuse: &[f64],
    device: &VirtualDevice,
    position: DVec3,
    opts: &FitOptions,
) -> Result<NormalFit> {
    if diffuse.len() != device.num_diffuse_leds() {
        return Err(Error::invalid_argument("diffuse lumitexel length mismatch"));
    }
    let plane_n = device.plane.normal();
    let m_norm2: f64 = diffuse.iter().map(|v| v * v).sum();
    if m_norm2 <= 0.0 || diffuse.iter().all(|v| *v < 1e-12) {
        return Ok(NormalFit { normal: plane_n, scale: 0.0, residual: m_norm2, degenerate: true });
    }
    let (pu, pv) = (device.plane.u_axis, device.plane.v_axis);

    let residual_of = |theta: f64, phi: f64| -> f64 {
        let n = spherical_dir(pu, pv, plane_n, theta, phi);
        match diffuse_kernel(device, position, n) {
            Ok(g) => {
                let gg: f64 = g.values().iter().map(|v| v * v).sum();
                if gg <= 0.0 {
                    return m_norm2;
                }
                let gm: f64 = g.values().iter().zip(diffuse).map(|(a, b)| a * b).sum();
                let k = (gm / gg).max(0.0);
                diffuse
                    .iter()
                    .zip(g.values())
                    .map(|(m, gv)| {
                        let r = m - k * gv;
                        r * r
                    })
                    .sum()
            }
            Err(_) => f64::INFINITY,
        }
    };

    let bounds = Bounds::new(vec![0.0, -7.0], vec![80f64.to_radians(), 7.0])?;
    let mopts = MinimizeOptions { max_iters: opts.max_iters, fd_step: 1e-5, ..Default::default() };

    let mut starts = vec![(0.0f64, 0.0f64)];
    let ring = opts.normal_starts.saturating_sub(1).max(1);
    for i in 0..ring {
        starts.push((40f64.to_radians(), i as f64 * std::f64::consts::TAU / ring as f64));
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    for (t0, p0) in starts {
        let mut f = |x: &[f64]| residual_of(x[0], x[1]);
        let r = minimize_box(&mut f, &[t0, p0], &bounds, &mopts)?;
        if best.as_ref().map_or(true, |(bf, _)| r.fx < *bf) {
            best = Some((r.fx, r.x));
        }
    }
    let (res, x) = best.unwrap();
    let n = spherical_dir(pu, pv, plane_n, x[0], x[1]);
    // Recover the profiled scale at the winner.
    let g = diffuse_kernel(device, position, n)?;
    let gg: f64 = g.values().iter().map(|v| v * v).sum();
    let gm: f64 = g.values().iter().zip(diffuse).map(|(a, b)| a * b).sum();
    let k = if gg > 0.0 { (gm / gg).max(0.0) } else { 0.0 };
    Ok(NormalFit { normal: n, scale: k, residual: res, degenerate: false })
}

#[derive(Debug, Clone)]
pub struct FrameRoughnessFit {
    pub frame: ShadingFrame,
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub scale: f64,
    pub residual: f64,
    pub converged: bool,
    pub degenerate: bool,
}

fn frame_from_vars(
    pu: DVec3,
    pv: DVec3,
    pn: DVec3,
    theta: f64,
    phi: f64,
    psi: f64,
) -> ShadingFrame {
    let n = spherical_dir(pu, pv, pn, theta, phi);
    let e1 = if n.dot(pu).abs() < 0.95 { pu } else { pv };
    let t0 = (e1 - n * e1.dot(n)).normalize();
    let t1 = n.cross(t0);
    let t = (t0 * psi.cos() + t1 * psi.sin()).normalize();
    let b = n.cross(t);
    ShadingFrame { normal: n, tangent: t, bitangent: b }
}

fn specular_model(
    device: &VirtualDevice,
    position: DVec3,
    frame: &ShadingFrame,
    ax: f64,
    ay: f64,
) -> Result<Lumitexel> {
    let sample = BRDFSample {
        position,
        frame: *frame,
        params: GGXParams::new(DVec3::ZERO, DVec3::ONE, ax, ay),
    };
    render_lumitexel(&sample, device, 0, RenderMode::SpecularOnly, LedSet::Main)
}

/// Bounded quasi-Newton fit of the shading frame and the two roughnesses to
/// a specular lumitexel, in the same log-compressed metric the network is
/// trained with. Initialized at the diffuse-fit normal with several tangent
/// rotations.
pub fn fit_frame_roughness(
    specular: &[f64],
    init_normal: DVec3,
    device: &VirtualDevice,
    position: DVec3,
    opts: &FitOptions,
) -> Result<FrameRoughnessFit> {
    if specular.len() != device.num_leds() {
        return Err(Error::invalid_argument("specular lumitexel length mismatch"));
    }
    let (pu, pv) = (device.plane.u_axis, device.plane.v_axis);
    let pn = device.plane.normal();
    let m_max = specular.iter().fold(0.0f64, |a, b| a.max(*b));
    let fallback_frame = || {
        let e1 = if init_normal.dot(pu).abs() < 0.95 { pu } else { pv };
        ShadingFrame::from_normal_tangent(init_normal, e1).unwrap()
    };
    if m_max <= 1e-12 {
        return Ok(FrameRoughnessFit {
            frame: fallback_frame(),
            alpha_x: opts.alpha_max,
            alpha_y: opts.alpha_max,
            scale: 0.0,
            residual: 0.0,
            converged: true,
            degenerate: true,
        });
    }

    let (theta0, phi0) = angles_of(pu, pv, pn, init_normal);
    let log_m: Vec<f64> = specular.iter().map(|v| v.ln_1p()).collect();

    let objective = |x: &[f64]| -> f64 {
        let frame = frame_from_vars(pu, pv, pn, x[0], x[1], x[2]);
        let (ax, ay, k) = (x[3].exp(), x[4].exp(), x[5].exp());
        match specular_model(device, position, &frame, ax, ay) {
            Ok(s) => s
                .values()
                .iter()
                .zip(&log_m)
                .map(|(sv, lm)| {
                    let d = (k * sv).ln_1p() - lm;
                    d * d
                })
                .sum(),
            Err(_) => f64::INFINITY,
        }
    };

    // Scale init: ratio of peaks for the initial lobe shape.
    let init_frame = frame_from_vars(pu, pv, pn, theta0, phi0, 0.0);
    let s0 = specular_model(device, position, &init_frame, opts.alpha_init, opts.alpha_init)?;
    let s0_max = s0.values().iter().fold(0.0f64, |a, b| a.max(*b));
    if s0_max <= 0.0 {
        return Ok(FrameRoughnessFit {
            frame: fallback_frame(),
            alpha_x: opts.alpha_max,
            alpha_y: opts.alpha_max,
            scale: 0.0,
            residual: log_m.iter().map(|v| v * v).sum(),
            converged: false,
            degenerate: true,
        });
    }
    let k0 = (m_max / s0_max).max(1e-12);

    let bounds = Bounds::new(
        vec![
            0.0,
            phi0 - std::f64::consts::PI,
            -0.3,
            opts.alpha_min.ln(),
            opts.alpha_min.ln(),
            k0.ln() - 12.0,
        ],
        vec![
            85f64.to_radians(),
            phi0 + std::f64::consts::PI,
            std::f64::consts::PI + 0.3,
            opts.alpha_max.ln(),
            opts.alpha_max.ln(),
            k0.ln() + 12.0,
        ],
    )?;
    let mopts = MinimizeOptions { max_iters: opts.max_iters, fd_step: 1e-5, ..Default::default() };

    let init_obj = {
        let x0 = [theta0, phi0, 0.0, opts.alpha_init.ln(), opts.alpha_init.ln(), k0.ln()];
        objective(&x0)
    };
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for s in 0..opts.tangent_starts.max(1) {
        let psi0 = s as f64 * std::f64::consts::PI / opts.tangent_starts.max(1) as f64;
        let x0 = [theta0, phi0, psi0, opts.alpha_init.ln(), opts.alpha_init.ln(), k0.ln()];
        let mut f = |x: &[f64]| objective(x);
        let r = minimize_box(&mut f, &x0, &bounds, &mopts)?;
        if best.as_ref().map_or(true, |(bf, _, _)| r.fx < *bf) {
            best = Some((r.fx, r.x, r.converged));
        }
    }
    let (mut res, x, converged) = best.unwrap();

    let mut frame = frame_from_vars(pu, pv, pn, x[0], x[1], x[2]);
    // Tangent sign canonicalization: positive projection on the plane
    // u-axis (the GGX lobe is symmetric under t -> -t).
    let proj = frame.tangent.dot(pu);
    if proj < 0.0 || (proj.abs() < 1e-9 && frame.tangent.dot(pv) < 0.0) {
        frame.tangent = -frame.tangent;
        frame.bitangent = frame.normal.cross(frame.tangent);
    }
    if !res.is_finite() {
        res = f64::INFINITY;
    }
    Ok(FrameRoughnessFit {
        frame,
        alpha_x: x[3].exp(),
        alpha_y: x[4].exp(),
        scale: x[5].exp(),
        residual: res.min(init_obj),
        converged,
        degenerate: false,
    })
}

#[derive(Debug, Clone)]
pub struct AlbedoFit {
    pub diffuse: DVec3,
    pub specular: DVec3,
    pub residual: f64,
    pub degenerate: bool,
}

/// Recover RGB diffuse/specular albedos with fixed frame and roughnesses by
/// per-channel NNLS against the original photometric measurements.
pub fn fit_albedos(
    measurements_rgb: &Measurements,
    frame: &ShadingFrame,
    alpha_x: f64,
    alpha_y: f64,
    patterns: &[LightingPattern],
    device: &VirtualDevice,
    position: DVec3,
) -> Result<AlbedoFit> {
    if measurements_rgb.channels.len() != 3 {
        return Err(Error::invalid_argument("albedo fit needs 3-channel measurements"));
    }
    let unit_d = BRDFSample {
        position,
        frame: *frame,
        params: GGXParams::new(DVec3::ONE, DVec3::ZERO, alpha_x, alpha_y),
    };
    let unit_s = BRDFSample {
        position,
        frame: *frame,
        params: GGXParams::new(DVec3::ZERO, DVec3::ONE, alpha_x, alpha_y),
    };
    let lum_d = render_lumitexel(&unit_d, device, 0, RenderMode::DiffuseOnly, LedSet::Main)?;
    let lum_s = render_lumitexel(&unit_s, device, 0, RenderMode::SpecularOnly, LedSet::Main)?;
    let col_d: Vec<f64> = patterns.iter().map(|p| measure(&lum_d, p)).collect::<Result<_>>()?;
    let col_s: Vec<f64> = patterns.iter().map(|p| measure(&lum_s, p)).collect::<Result<_>>()?;

    let nd: f64 = col_d.iter().map(|v| v * v).sum();
    let ns: f64 = col_s.iter().map(|v| v * v).sum();
    if nd <= 1e-20 && ns <= 1e-20 {
        return Ok(AlbedoFit {
            diffuse: DVec3::ZERO,
            specular: DVec3::ZERO,
            residual: 0.0,
            degenerate: true,
        });
    }

    let cols = vec![col_d, col_s];
    let mut diffuse = DVec3::ZERO;
    let mut spec = DVec3::ZERO;
    let mut residual = 0.0;
    for c in 0..3 {
        let sol = nnls(&cols, &measurements_rgb.channels[c])?;
        diffuse[c] = sol.x[0];
        spec[c] = sol.x[1];
        residual += sol.residual * sol.residual;
    }
    Ok(AlbedoFit { diffuse, specular: spec, residual: residual.sqrt(), degenerate: false })
}

/// Full per-texel pipeline from RGB measurements to GGX parameters.
pub fn fit_texel(
    measurements_rgb: &Measurements,
    bundle: &ModelBundle,
    device: &VirtualDevice,
    position: DVec3,
    opts: &FitOptions,
) -> Result<TexelResult> {
    let (pair, decoder_index) = reconstruct_lumitexels(measurements_rgb, bundle)?;
    let nfit = fit_normal(&pair.diffuse, device, position, opts)?;
    let ffit = fit_frame_roughness(&pair.specular, nfit.normal, device, position, opts)?;
    let patterns = bundle.lighting_patterns();
    let afit = fit_albedos(
        measurements_rgb,
        &ffit.frame,
        ffit.alpha_x,
        ffit.alpha_y,
        &patterns,
        device,
        position,
    )?;
    let mut flags = 0u8;
    if nfit.degenerate {
        flags |= FLAG_DEGENERATE_DIFFUSE;
    }
    if ffit.degenerate {
        flags |= FLAG_DEGENERATE_SPECULAR;
    }
    if !ffit.converged {
        flags |= FLAG_FRAME_NOT_CONVERGED;
    }
    if afit.degenerate {
        flags |= FLAG_DEGENERATE_ALBEDO;
    }
    Ok(TexelResult {
        frame: ffit.frame,
        params: GGXParams::new(afit.diffuse, afit.specular, ffit.alpha_x, ffit.alpha_y),
        decoder_index,
        residuals: TexelResiduals {
            diffuse_fit: nfit.residual,
            specular_fit: ffit.residual,
            albedo_fit: afit.residual,
        },
        flags,
    })
}

/// Per-pixel measurement stack of a captured (or simulated) scene.
#[derive(Debug, Clone)]
pub struct MeasurementImage {
    pub width: usize,
    pub height: usize,
    pub positions: Vec<DVec3>,
    pub measurements: Vec<Measurements>,
}

/// SVBRDF texture maps plus the per-texel decoder index and quality mask.
#[derive(Debug, Clone)]
pub struct TextureMaps {
    pub width: usize,
    pub height: usize,
    pub diffuse: Vec<[f32; 3]>,
    pub specular: Vec<[f32; 3]>,
    pub normal: Vec<[f32; 3]>,
    pub tangent: Vec<[f32; 3]>,
    pub roughness: Vec<[f32; 2]>,
    pub decoder_index: Vec<u8>,
    pub quality: Vec<u8>,
}

/// Map the per-texel pipeline over every pixel of a measurement image.
pub fn fit_texture(
    image: &MeasurementImage,
    bundle: &ModelBundle,
    device: &VirtualDevice,
    opts: &FitOptions,
) -> Result<TextureMaps> {
    let count = image.width * image.height;
    if image.positions.len() != count || image.measurements.len() != count {
        return Err(Error::invalid_argument("measurement image dimensions mismatch"));
    }
    let results: Vec<Result<TexelResult>> = (0..count)
        .into_par_iter()
        .map(|i| fit_texel(&image.measurements[i], bundle, device, image.positions[i], opts))
        .collect();
    let mut maps = TextureMaps {
        width: image.width,
        height: image.height,
        diffuse: vec![[0.0; 3]; count],
        specular: vec![[0.0; 3]; count],
        normal: vec![[0.0; 3]; count],
        tangent: vec![[0.0; 3]; count],
        roughness: vec![[0.0; 2]; count],
        decoder_index: vec![0; count],
        quality: vec![0; count],
    };
    for (i, r) in results.into_iter().enumerate() {
        let t = r?;
        for c in 0..3 {
            maps.diffuse[i][c] = t.params.diffuse_albedo[c] as f32;
            maps.specular[i][c] = t.params.specular_albedo[c] as f32;
            maps.normal[i][c] = t.frame.normal[c] as f32;
            maps.tangent[i][c] = t.frame.tangent[c] as f32;
        }
        maps.roughness[i] = [t.params.roughness_x as f32, t.params.roughness_y as f32];
        maps.decoder_index[i] = t.decoder_index.min(255) as u8;
        maps.quality[i] = t.flags;
    }
    Ok(maps)
}
