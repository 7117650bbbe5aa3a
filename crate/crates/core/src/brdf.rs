//! Anisotropic GGX BRDF evaluation, shading-frame algebra and randomized
//! sampling of reflectance parameters for synthetic training data.

use glam::DVec3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::device::SamplePlane;
use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;
const DIR_UNIT_TOL: f64 = 1e-4;

/// Orthonormal right-handed basis (tangent x bitangent = normal) orienting
/// the BRDF at a surface point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadingFrame {
    pub normal: DVec3,
    pub tangent: DVec3,
    pub bitangent: DVec3,
}

impl ShadingFrame {
    pub fn new(normal: DVec3, tangent: DVec3, bitangent: DVec3) -> Result<Self> {
        let f = ShadingFrame { normal, tangent, bitangent };
        f.validate()?;
        Ok(f)
    }

    /// Build a frame from a normal and a (not necessarily orthogonal)
    /// tangent hint; the hint is projected into the normal's plane.
    pub fn from_normal_tangent(normal: DVec3, tangent_hint: DVec3) -> Result<Self> {
        if (normal.length() - 1.0).abs() > DIR_UNIT_TOL {
            return Err(Error::invalid_argument("normal must be unit length"));
        }
        let n = normal.normalize();
        let t_raw = tangent_hint - n * tangent_hint.dot(n);
        if t_raw.length_squared() < 1e-12 {
            return Err(Error::invalid_argument(
                "tangent hint is parallel to the normal",
            ));
        }
        let t = t_raw.normalize();
        let b = n.cross(t);
        Ok(ShadingFrame { normal: n, tangent: t, bitangent: b })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("normal", self.normal),
            ("tangent", self.tangent),
            ("bitangent", self.bitangent),
        ] {
            if (v.length() - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid_argument(format!("{name} is not unit length")));
            }
        }
        if self.normal.dot(self.tangent).abs() > UNIT_TOL
            || self.normal.dot(self.bitangent).abs() > UNIT_TOL
            || self.tangent.dot(self.bitangent).abs() > UNIT_TOL
        {
            return Err(Error::invalid_argument("frame vectors are not orthogonal"));
        }
        if (self.tangent.cross(self.bitangent) - self.normal).length() > UNIT_TOL {
            return Err(Error::invalid_argument("frame is not right-handed"));
        }
        Ok(())
    }

    /// World direction -> local (tangent, bitangent, normal) coordinates.
    pub fn to_local(&self, v: DVec3) -> DVec3 {
        DVec3::new(v.dot(self.tangent), v.dot(self.bitangent), v.dot(self.normal))
    }

    pub fn to_world(&self, v: DVec3) -> DVec3 {
        self.tangent * v.x + self.bitangent * v.y + self.normal * v.z
    }
}

/// Anisotropic GGX parameters. Fresnel is folded into the specular albedo,
/// so `specular_albedo` scales the full microfacet lobe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GGXParams {
    pub diffuse_albedo: DVec3,
    pub specular_albedo: DVec3,
    pub roughness_x: f64,
    pub roughness_y: f64,
}

impl GGXParams {
    pub fn new(
        diffuse_albedo: DVec3,
        specular_albedo: DVec3,
        roughness_x: f64,
        roughness_y: f64,
    ) -> Self {
        GGXParams { diffuse_albedo, specular_albedo, roughness_x, roughness_y }
    }

    /// Same geometry with channel-averaged albedos, for gray-channel work.
    pub fn gray(&self) -> GGXParams {
        let d = (self.diffuse_albedo.x + self.diffuse_albedo.y + self.diffuse_albedo.z) / 3.0;
        let s = (self.specular_albedo.x + self.specular_albedo.y + self.specular_albedo.z) / 3.0;
        GGXParams {
            diffuse_albedo: DVec3::splat(d),
            specular_albedo: DVec3::splat(s),
            roughness_x: self.roughness_x,
            roughness_y: self.roughness_y,
        }
    }

    fn albedo(&self, v: DVec3, channel: usize) -> f64 {
        match channel {
            0 => v.x,
            1 => v.y,
            _ => v.z,
        }
    }
}

/// A surface point sample: position on the device plane, local frame and
/// BRDF parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BRDFSample {
    pub position: DVec3,
    pub frame: ShadingFrame,
    pub params: GGXParams,
}

/// Ranges used when sampling random training reflectance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleConfig {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub rho_s_max: f64,
    /// Maximum tilt of the sampled normal away from the plane normal, degrees.
    pub max_tilt_deg: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { alpha_min: 0.01, alpha_max: 1.0, rho_s_max: 5.0, max_tilt_deg: 60.0 }
    }
}

fn check_direction(name: &str, v: DVec3) -> Result<()> {
    if (v.length() - 1.0).abs() > DIR_UNIT_TOL {
        return Err(Error::invalid_argument(format!("{name} is not unit length")));
    }
    Ok(())
}

fn check_channel(channel: usize) -> Result<()> {
    if channel > 2 {
        return Err(Error::invalid_argument(format!("channel {channel} out of range")));
    }
    Ok(())
}

/// Anisotropic GGX normal distribution, local-frame half vector.
fn ggx_ndf(h: DVec3, ax: f64, ay: f64) -> f64 {
    if h.z <= 0.0 {
        return 0.0;
    }
    let q = (h.x / ax).powi(2) + (h.y / ay).powi(2) + h.z * h.z;
    1.0 / (PI * ax * ay * q * q)
}

/// Separable Smith masking term for one direction (local frame).
fn smith_g1(v: DVec3, ax: f64, ay: f64) -> f64 {
    let cos2 = v.z * v.z;
    if cos2 <= 0.0 {
        return 0.0;
    }
    // alpha_v^2 tan^2(theta_v), directional roughness projected onto v.
    let a2t2 = (v.x * ax).powi(2) + (v.y * ay).powi(2);
    2.0 / (1.0 + (1.0 + a2t2 / cos2).sqrt())
}

/// Evaluate the BRDF, returning the diffuse and specular parts separately.
/// Their sum is the full value. Either direction below the horizon of
/// `frame.normal` yields (0, 0).
pub fn eval_brdf_split(
    wi: DVec3,
    wo: DVec3,
    frame: &ShadingFrame,
    params: &GGXParams,
    channel: usize,
) -> Result<(f64, f64)> {
    check_direction("wi", wi)?;
    check_direction("wo", wo)?;
    check_channel(channel)?;

    let li = frame.to_local(wi);
    let lo = frame.to_local(wo);
    if li.z <= 0.0 || lo.z <= 0.0 {
        return Ok((0.0, 0.0));
    }

    let diffuse = params.albedo(params.diffuse_albedo, channel) / PI;

    let rho_s = params.albedo(params.specular_albedo, channel);
    let specular = if rho_s > 0.0 {
        let h_raw = li + lo;
        if h_raw.length_squared() < 1e-24 {
            0.0
        } else {
            let h = h_raw.normalize();
            let d = ggx_ndf(h, params.roughness_x, params.roughness_y);
            let g = smith_g1(li, params.roughness_x, params.roughness_y)
                * smith_g1(lo, params.roughness_x, params.roughness_y);
            rho_s * d * g / (4.0 * li.z * lo.z)
        }
    } else {
        0.0
    };

    Ok((diffuse, specular))
}

/// Full BRDF value; see [`eval_brdf_split`].
pub fn eval_brdf(
    wi: DVec3,
    wo: DVec3,
    frame: &ShadingFrame,
    params: &GGXParams,
    channel: usize,
) -> Result<f64> {
    let (d, s) = eval_brdf_split(wi, wo, frame, params, channel)?;
    Ok(d + s)
}

/// Draw a random surface sample: position uniform on the plane, normal from
/// an upper-hemisphere cap, tangent uniform around it, log-uniform
/// roughnesses and uniform albedos.
///
/// Draw order is fixed (position, normal, tangent, roughness, diffuse,
/// specular) so datasets are reproducible from the record seed alone.
pub fn sample_brdf(rng: &mut ChaCha8Rng, plane: &SamplePlane, cfg: &SampleConfig) -> BRDFSample {
    let eu = plane.extent[0] / 2.0;
    let ev = plane.extent[1] / 2.0;
    let u = rng.random_range(-eu..=eu);
    let v = rng.random_range(-ev..=ev);
    let position = plane.origin + plane.u_axis * u + plane.v_axis * v;

    let pn = plane.normal();
    // Uniform over the spherical cap: cos(theta) uniform in [cos(max), 1].
    let cos_max = cfg.max_tilt_deg.to_radians().cos();
    let cos_t = rng.random_range(cos_max..=1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    let normal =
        (plane.u_axis * (sin_t * phi.cos()) + plane.v_axis * (sin_t * phi.sin()) + pn * cos_t)
            .normalize();

    let psi = rng.random_range(0.0..2.0 * PI);
    let e1 = if normal.dot(plane.u_axis).abs() < 0.9 { plane.u_axis } else { plane.v_axis };
    let t0 = (e1 - normal * e1.dot(normal)).normalize();
    let t1 = normal.cross(t0);
    let tangent = (t0 * psi.cos() + t1 * psi.sin()).normalize();
    let bitangent = normal.cross(tangent);

    let log_min = cfg.alpha_min.ln();
    let log_max = cfg.alpha_max.ln();
    let ax = rng.random_range(log_min..=log_max).exp();
    let ay = rng.random_range(log_min..=log_max).exp();

    let rd = DVec3::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
    let rs = DVec3::new(
        rng.random_range(0.0..=cfg.rho_s_max),
        rng.random_range(0.0..=cfg.rho_s_max),
        rng.random_range(0.0..=cfg.rho_s_max),
    );

    BRDFSample {
        position,
        frame: ShadingFrame { normal, tangent, bitangent },
        params: GGXParams::new(rd, rs, ax, ay),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::SamplePlane;
    use crate::seeding::rng_from_seed;

    fn plane() -> SamplePlane {
        SamplePlane {
            origin: DVec3::ZERO,
            u_axis: DVec3::X,
            v_axis: DVec3::Y,
            extent: [0.2, 0.2],
        }
    }

    fn canonical_frame() -> ShadingFrame {
        ShadingFrame { normal: DVec3::Z, tangent: DVec3::X, bitangent: DVec3::Y }
    }

    /// Independent transcription of the Walter anisotropic GGX density,
    /// written in the tan-theta form rather than the quadratic form used by
    /// the implementation.
    fn ndf_oracle(h: DVec3, ax: f64, ay: f64) -> f64 {
        let cos_t = h.z;
        if cos_t <= 0.0 {
            return 0.0;
        }
        let cos2 = cos_t * cos_t;
        let sin2 = 1.0 - cos2;
        let (cos_phi2, sin_phi2) = if sin2 <= 0.0 {
            (1.0, 0.0)
        } else {
            (h.x * h.x / sin2, h.y * h.y / sin2)
        };
        let tan2 = sin2 / cos2;
        let denom = PI * ax * ay * cos2 * cos2 * (1.0 + tan2 * (cos_phi2 / (ax * ax) + sin_phi2 / (ay * ay))).powi(2);
        1.0 / denom
    }

    #[test]
    fn below_horizon_is_zero() {
        let frame = canonical_frame();
        let params = GGXParams::new(DVec3::splat(0.5), DVec3::splat(1.0), 0.3, 0.3);
        let wi = DVec3::new(0.0, 0.6, -0.8);
        let wo = DVec3::Z;
        assert_eq!(eval_brdf(wi, wo, &frame, &params, 0).unwrap(), 0.0);
        assert_eq!(eval_brdf(wo, wi, &frame, &params, 0).unwrap(), 0.0);
    }

    #[test]
    fn lambertian_term_is_rho_over_pi() {
        let frame = canonical_frame();
        let params = GGXParams::new(DVec3::splat(PI), DVec3::ZERO, 0.2, 0.2);
        let wi = DVec3::new(0.3, 0.1, 0.9).normalize();
        let wo = DVec3::new(-0.2, 0.4, 0.8).normalize();
        let v = eval_brdf(wi, wo, &frame, &params, 1).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn ndf_at_normal_incidence_matches_oracle() {
        let frame = canonical_frame();
        let params = GGXParams::new(DVec3::ZERO, DVec3::splat(1.0), 0.3, 0.3);
        let v = eval_brdf(DVec3::Z, DVec3::Z, &frame, &params, 0).unwrap();
        let expected = ndf_oracle(DVec3::Z, 0.3, 0.3) / 4.0;
        assert!((v - expected).abs() / expected < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn specular_matches_ndf_oracle_off_normal() {
        let frame = canonical_frame();
        let mut rng = rng_from_seed(11);
        for _ in 0..200 {
            let ax = rng.random_range(0.01f64..1.0);
            let ay = rng.random_range(0.01f64..1.0);
            let params = GGXParams::new(DVec3::ZERO, DVec3::splat(1.0), ax, ay);
            let wi = sample_upper(&mut rng);
            let wo = sample_upper(&mut rng);
            let (_, s) = eval_brdf_split(wi, wo, &frame, &params, 0).unwrap();
            let h = (wi + wo).normalize();
            let g = smith_g1(h_local(&frame, wi), ax, ay) * smith_g1(h_local(&frame, wo), ax, ay);
            let expected = ndf_oracle(h_local(&frame, h), ax, ay) * g / (4.0 * wi.z * wo.z);
            let denom = expected.abs().max(1e-300);
            assert!((s - expected).abs() / denom < 1e-9, "{s} vs {expected}");
        }
    }

    fn h_local(frame: &ShadingFrame, v: DVec3) -> DVec3 {
        frame.to_local(v)
    }

    fn sample_upper(rng: &mut ChaCha8Rng) -> DVec3 {
        loop {
            let v = DVec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.05..1.0),
            );
            if v.length_squared() > 1e-3 {
                return v.normalize();
            }
        }
    }

    #[test]
    fn split_parts_vanish_as_expected() {
        let frame = canonical_frame();
        let wi = DVec3::new(0.1, 0.2, 0.97).normalize();
        let wo = DVec3::new(-0.3, 0.1, 0.95).normalize();
        let no_spec = GGXParams::new(DVec3::splat(0.7), DVec3::ZERO, 0.3, 0.2);
        let (_, s) = eval_brdf_split(wi, wo, &frame, &no_spec, 0).unwrap();
        assert_eq!(s, 0.0);
        let no_diff = GGXParams::new(DVec3::ZERO, DVec3::splat(1.0), 0.3, 0.2);
        let (d, _) = eval_brdf_split(wi, wo, &frame, &no_diff, 0).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn split_recombines_to_full_value() {
        let frame = canonical_frame();
        let mut rng = rng_from_seed(3);
        for _ in 0..500 {
            let params = GGXParams::new(
                DVec3::new(rng.random(), rng.random(), rng.random()),
                DVec3::new(rng.random::<f64>() * 5.0, rng.random::<f64>() * 5.0, rng.random::<f64>() * 5.0),
                rng.random_range(0.01..1.0),
                rng.random_range(0.01..1.0),
            );
            let wi = sample_upper(&mut rng);
            let wo = sample_upper(&mut rng);
            let ch = rng.random_range(0usize..3);
            let (d, s) = eval_brdf_split(wi, wo, &frame, &params, ch).unwrap();
            let full = eval_brdf(wi, wo, &frame, &params, ch).unwrap();
            assert!((d + s - full).abs() <= 1e-12 * full.abs().max(1e-300));
        }
    }

    #[test]
    fn non_unit_direction_is_rejected() {
        let frame = canonical_frame();
        let params = GGXParams::new(DVec3::splat(0.5), DVec3::ZERO, 0.3, 0.3);
        let err = eval_brdf(DVec3::new(0.0, 0.0, 1.2), DVec3::Z, &frame, &params, 0);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let err = eval_brdf(DVec3::Z, DVec3::Z, &frame, &params, 5);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn reciprocity_of_random_pairs() {
        let frame = canonical_frame();
        let mut rng = rng_from_seed(17);
        for _ in 0..1000 {
            let params = GGXParams::new(
                DVec3::new(rng.random(), rng.random(), rng.random()),
                DVec3::splat(rng.random::<f64>() * 5.0),
                rng.random_range(0.01..1.0),
                rng.random_range(0.01..1.0),
            );
            let wi = sample_upper(&mut rng);
            let wo = sample_upper(&mut rng);
            let a = eval_brdf(wi, wo, &frame, &params, 0).unwrap();
            let b = eval_brdf(wo, wi, &frame, &params, 0).unwrap();
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300), "{a} vs {b}");
        }
    }

    #[test]
    fn frame_invariance_under_rotation() {
        let mut rng = rng_from_seed(23);
        for _ in 0..300 {
            let frame = canonical_frame();
            let params = GGXParams::new(
                DVec3::splat(rng.random()),
                DVec3::splat(rng.random::<f64>() * 3.0),
                rng.random_range(0.01..1.0),
                rng.random_range(0.01..1.0),
            );
            let wi = sample_upper(&mut rng);
            let wo = sample_upper(&mut rng);
            let base = eval_brdf(wi, wo, &frame, &params, 0).unwrap();

            let axis = sample_upper(&mut rng);
            let angle = rng.random_range(0.0..2.0 * PI);
            let rot = glam::DQuat::from_axis_angle(axis, angle);
            let rframe = ShadingFrame {
                normal: rot * frame.normal,
                tangent: rot * frame.tangent,
                bitangent: rot * frame.bitangent,
            };
            let v = eval_brdf((rot * wi).normalize(), (rot * wo).normalize(), &rframe, &params, 0)
                .unwrap();
            assert!((v - base).abs() <= 1e-10 * base.abs().max(1e-12), "{v} vs {base}");
        }
    }

    #[test]
    fn white_furnace_cosine_integral_is_one() {
        let frame = canonical_frame();
        let params = GGXParams::new(DVec3::ONE, DVec3::ZERO, 0.3, 0.3);
        let wo = DVec3::new(0.2, -0.1, 0.97).normalize();
        // Cosine-weighted hemisphere quadrature: estimator f * pi.
        let mut rng = rng_from_seed(5);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let u1: f64 = rng.random();
            let u2: f64 = rng.random();
            let r = u1.sqrt();
            let phi = 2.0 * PI * u2;
            let wi = DVec3::new(r * phi.cos(), r * phi.sin(), (1.0 - u1).max(0.0).sqrt());
            acc += eval_brdf(wi, wo, &frame, &params, 0).unwrap() * PI;
        }
        let integral = acc / n as f64;
        assert!((integral - 1.0).abs() < 0.01, "integral {integral}");
    }

    #[test]
    fn sampled_frames_satisfy_invariants_and_cap() {
        let plane = plane();
        let cfg = SampleConfig::default();
        let mut rng = rng_from_seed(9);
        let cos_max = cfg.max_tilt_deg.to_radians().cos();
        for _ in 0..2000 {
            let s = sample_brdf(&mut rng, &plane, &cfg);
            s.frame.validate().unwrap();
            assert!(s.frame.normal.dot(plane.normal()) >= cos_max - 1e-12);
            assert!(s.params.roughness_x >= cfg.alpha_min && s.params.roughness_x <= cfg.alpha_max);
            assert!(s.params.roughness_y >= cfg.alpha_min && s.params.roughness_y <= cfg.alpha_max);
            let p = s.position;
            assert!(p.x.abs() <= 0.1 + 1e-12 && p.y.abs() <= 0.1 + 1e-12 && p.z.abs() < 1e-12);
        }
    }

    #[test]
    fn log_roughness_marginal_is_uniform() {
        // Chi-square goodness of fit on log(alpha_x), 20 bins, 1e5 draws.
        // Critical value for df=19 at the 0.01 level.
        const CHI2_CRIT_DF19_P01: f64 = 36.191;
        let plane = plane();
        let cfg = SampleConfig::default();
        let mut rng = rng_from_seed(31);
        let n = 100_000;
        let bins = 20usize;
        let mut counts = vec![0usize; bins];
        let lo = cfg.alpha_min.ln();
        let hi = cfg.alpha_max.ln();
        for _ in 0..n {
            let s = sample_brdf(&mut rng, &plane, &cfg);
            let t = (s.params.roughness_x.ln() - lo) / (hi - lo);
            let b = ((t * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let expected = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < CHI2_CRIT_DF19_P01, "chi2 {chi2}");
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_dir_upper() -> impl Strategy<Value = DVec3> {
        (0.05f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(z, x, y)| {
            let v = DVec3::new(x, y, z);
            if v.length_squared() < 1e-6 {
                DVec3::Z
            } else {
                v.normalize()
            }
        })
    }

    fn arb_params() -> impl Strategy<Value = GGXParams> {
        (
            0.0f64..1.0,
            0.0f64..5.0,
            0.01f64..1.0,
            0.01f64..1.0,
        )
            .prop_map(|(d, s, ax, ay)| {
                GGXParams::new(DVec3::splat(d), DVec3::splat(s), ax, ay)
            })
    }

    proptest! {
        #[test]
        fn eval_is_non_negative(wi in arb_dir_upper(), wo in arb_dir_upper(), p in arb_params()) {
            let frame = ShadingFrame { normal: DVec3::Z, tangent: DVec3::X, bitangent: DVec3::Y };
            let v = eval_brdf(wi, wo, &frame, &p, 0).unwrap();
            prop_assert!(v >= 0.0 && v.is_finite());
        }

        #[test]
        fn eval_is_reciprocal(wi in arb_dir_upper(), wo in arb_dir_upper(), p in arb_params()) {
            let frame = ShadingFrame { normal: DVec3::Z, tangent: DVec3::X, bitangent: DVec3::Y };
            let a = eval_brdf(wi, wo, &frame, &p, 0).unwrap();
            let b = eval_brdf(wo, wi, &frame, &p, 0).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300));
        }
    }
}
