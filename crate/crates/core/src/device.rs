//! Virtual hemicube lightstage: LED geometry, the sample plane, the camera
//! and the device description file.
//!
//! The device is a box of LEDs over a planar sample: four side faces plus a
//! top face, all pointing inward. A second, coarser LED set of the same
//! shape provides the low-dimensional basis used for diffuse reconstruction
//! targets.

use glam::DVec3;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Planar sample region: `origin` is the center, `u_axis`/`v_axis` span the
/// plane, `extent` is the full side length in meters along each axis.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplePlane {
    pub origin: DVec3,
    pub u_axis: DVec3,
    pub v_axis: DVec3,
    pub extent: [f64; 2],
}

impl SamplePlane {
    pub fn normal(&self) -> DVec3 {
        self.u_axis.cross(self.v_axis).normalize()
    }

    pub fn contains(&self, p: DVec3) -> bool {
        let d = p - self.origin;
        let u = d.dot(self.u_axis);
        let v = d.dot(self.v_axis);
        let w = d.dot(self.normal());
        u.abs() <= self.extent[0] / 2.0 + 1e-9
            && v.abs() <= self.extent[1] / 2.0 + 1e-9
            && w.abs() <= 1e-6
    }
}

/// One LED: a point emitter at the center of a rectangular cell. The cell
/// half-axes support optional sub-cell quadrature.
#[derive(Debug, Clone, Copy)]
pub struct Led {
    pub position: DVec3,
    pub normal: DVec3,
    pub cell_u: DVec3,
    pub cell_v: DVec3,
    /// Face index (0 = top, 1..=4 sides) and grid coordinates, used for
    /// pattern visualization.
    pub face: usize,
    pub grid: (usize, usize),
}

/// Grid dimensions per face kind, (columns, rows).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FaceGrids {
    pub top: [usize; 2],
    pub side: [usize; 2],
}

/// On-disk device description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceDescription {
    pub version: u32,
    /// Half-width of the box in x and y, and its height, meters.
    pub half_width: f64,
    pub height: f64,
    pub plane_extent: [f64; 2],
    pub camera_position: [f64; 3],
    pub angular_exponent: f64,
    pub main_grid: FaceGrids,
    pub diffuse_grid: FaceGrids,
    /// k: each LED cell is integrated with k x k sub-samples (1 = point).
    #[serde(default = "default_quadrature")]
    pub quadrature: u32,
}

fn default_quadrature() -> u32 {
    1
}

impl DeviceDescription {
    /// Desk-scale default: 5 faces x 16x16 = 1280 main LEDs, 192 diffuse
    /// LEDs (top 8x8, sides 8x4) over a 20 cm sample, camera at 45 degrees.
    pub fn desk() -> Self {
        DeviceDescription {
            version: 1,
            half_width: 0.35,
            height: 0.40,
            plane_extent: [0.2, 0.2],
            camera_position: [0.0, -0.25, 0.25],
            angular_exponent: 0.0,
            main_grid: FaceGrids { top: [16, 16], side: [16, 16] },
            diffuse_grid: FaceGrids { top: [8, 8], side: [8, 4] },
            quadrature: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VirtualDevice {
    pub leds: Vec<Led>,
    pub diffuse_leds: Vec<Led>,
    pub camera_position: DVec3,
    pub plane: SamplePlane,
    pub angular_exponent: f64,
    pub quadrature: u32,
    pub description: DeviceDescription,
}

/// Face placement: index 0 is the top plate, 1..=4 are the -x, +x, -y, +y
/// sides in that order.
fn build_face_leds(desc: &DeviceDescription, grids: &FaceGrids, out: &mut Vec<Led>) {
    let hw = desc.half_width;
    let h = desc.height;

    let grid_positions = |count: usize, lo: f64, hi: f64| -> Vec<f64> {
        let step = (hi - lo) / count as f64;
        (0..count).map(|i| lo + step * (i as f64 + 0.5)).collect()
    };

    // Top face at z = h, normal pointing down.
    {
        let (cols, rows) = (grids.top[0], grids.top[1]);
        let xs = grid_positions(cols, -hw, hw);
        let ys = grid_positions(rows, -hw, hw);
        let cu = DVec3::new((2.0 * hw) / cols as f64 / 2.0, 0.0, 0.0);
        let cv = DVec3::new(0.0, (2.0 * hw) / rows as f64 / 2.0, 0.0);
        for (r, &y) in ys.iter().enumerate() {
            for (c, &x) in xs.iter().enumerate() {
                out.push(Led {
                    position: DVec3::new(x, y, h),
                    normal: DVec3::new(0.0, 0.0, -1.0),
                    cell_u: cu,
                    cell_v: cv,
                    face: 0,
                    grid: (c, r),
                });
            }
        }
    }

    // Side faces; horizontal axis runs along the wall, vertical axis is z.
    let sides: [(DVec3, DVec3, DVec3); 4] = [
        // (outward wall position anchor, wall horizontal axis, inward normal)
        (DVec3::new(-hw, 0.0, 0.0), DVec3::Y, DVec3::X),
        (DVec3::new(hw, 0.0, 0.0), DVec3::Y, DVec3::NEG_X),
        (DVec3::new(0.0, -hw, 0.0), DVec3::X, DVec3::Y),
        (DVec3::new(0.0, hw, 0.0), DVec3::X, DVec3::NEG_Y),
    ];
    let (cols, rows) = (grids.side[0], grids.side[1]);
    let us = grid_positions(cols, -hw, hw);
    let zs = grid_positions(rows, 0.0, h);
    for (fi, (anchor, along, normal)) in sides.iter().enumerate() {
        let cu = *along * ((2.0 * hw) / cols as f64 / 2.0);
        let cv = DVec3::new(0.0, 0.0, h / rows as f64 / 2.0);
        for (r, &z) in zs.iter().enumerate() {
            for (c, &u) in us.iter().enumerate() {
                out.push(Led {
                    position: *anchor + *along * u + DVec3::new(0.0, 0.0, z),
                    normal: *normal,
                    cell_u: cu,
                    cell_v: cv,
                    face: fi + 1,
                    grid: (c, r),
                });
            }
        }
    }
}

impl VirtualDevice {
    pub fn from_description(desc: DeviceDescription) -> Result<Self> {
        let plane = SamplePlane {
            origin: DVec3::ZERO,
            u_axis: DVec3::X,
            v_axis: DVec3::Y,
            extent: desc.plane_extent,
        };

        if desc.plane_extent[0] > 2.0 * desc.half_width
            || desc.plane_extent[1] > 2.0 * desc.half_width
        {
            return Err(Error::invalid_argument(
                "sample plane extent exceeds the device footprint",
            ));
        }

        let mut leds = Vec::new();
        build_face_leds(&desc, &desc.main_grid, &mut leds);
        let mut diffuse_leds = Vec::new();
        build_face_leds(&desc, &desc.diffuse_grid, &mut diffuse_leds);

        let device = VirtualDevice {
            leds,
            diffuse_leds,
            camera_position: DVec3::from_array(desc.camera_position),
            plane,
            angular_exponent: desc.angular_exponent,
            quadrature: desc.quadrature.max(1),
            description: desc,
        };
        device.validate()?;
        Ok(device)
    }

    pub fn desk() -> Self {
        VirtualDevice::from_description(DeviceDescription::desk())
            .expect("desk device description is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let desc: DeviceDescription =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        VirtualDevice::from_description(desc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.description)
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Validate the construction invariants, reporting the first violation.
    /// A convex LED box over the plane means visibility is identically one;
    /// this is where that claim is checked.
    pub fn validate(&self) -> Result<()> {
        if self.leds.is_empty() {
            return Err(Error::invalid_argument("device has no LEDs"));
        }
        let n = self.plane.normal();
        let center = self.plane.origin;
        for (set, name) in [(&self.leds, "main"), (&self.diffuse_leds, "diffuse")] {
            for (i, led) in set.iter().enumerate() {
                let height = (led.position - self.plane.origin).dot(n);
                if height <= 0.0 {
                    return Err(Error::invalid_argument(format!(
                        "{name} LED {i} is not strictly above the sample plane"
                    )));
                }
                if led.normal.dot(center - led.position) <= 0.0 {
                    return Err(Error::invalid_argument(format!(
                        "{name} LED {i} does not face the sample region"
                    )));
                }
            }
        }
        if (self.camera_position - center).dot(n) <= 0.0 {
            return Err(Error::invalid_argument("camera is not above the sample plane"));
        }
        Ok(())
    }

    pub fn num_leds(&self) -> usize {
        self.leds.len()
    }

    pub fn num_diffuse_leds(&self) -> usize {
        self.diffuse_leds.len()
    }

    /// Stable hash of the geometry, stored in dataset headers so a dataset
    /// can be matched to the device that produced it.
    pub fn geometry_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: f64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for led in self.leds.iter().chain(self.diffuse_leds.iter()) {
            for v in [led.position, led.normal] {
                feed(v.x);
                feed(v.y);
                feed(v.z);
            }
        }
        for v in [self.camera_position] {
            feed(v.x);
            feed(v.y);
            feed(v.z);
        }
        feed(self.angular_exponent);
        h
    }

    /// Layout of a per-LED vector as a cross image (side faces unfolded
    /// around the top plate). Returns image size and per-LED pixel coords.
    pub fn cross_layout(&self, diffuse: bool) -> CrossLayout {
        let grids = if diffuse {
            &self.description.diffuse_grid
        } else {
            &self.description.main_grid
        };
        let (tc, tr) = (grids.top[0], grids.top[1]);
        let (sc, sr) = (grids.side[0], grids.side[1]);
        // Width: side | top | side; height: side | top | side.
        let width = tc + 2 * sr;
        let height = tr + 2 * sr;
        let _ = sc;
        CrossLayout { width, height, top: (sr, sr), top_dims: (tc, tr), side_rows: sr }
    }
}

/// Pixel placement for cross-shaped LED visualizations.
#[derive(Debug, Clone, Copy)]
pub struct CrossLayout {
    pub width: usize,
    pub height: usize,
    pub top: (usize, usize),
    pub top_dims: (usize, usize),
    pub side_rows: usize,
}

impl CrossLayout {
    /// Pixel for a LED given its face and grid coordinates.
    pub fn pixel(&self, face: usize, grid: (usize, usize)) -> (usize, usize) {
        let (gx, gy) = grid;
        let (ox, oy) = self.top;
        let (tc, tr) = self.top_dims;
        let sr = self.side_rows;
        match face {
            0 => (ox + gx, oy + gy),
            // -x wall: unfolds to the left of the top plate.
            1 => (ox - 1 - gy.min(sr - 1), oy + gx.min(tr - 1)),
            // +x wall: unfolds to the right.
            2 => (ox + tc + gy.min(sr - 1), oy + gx.min(tr - 1)),
            // -y wall: unfolds below.
            3 => (ox + gx.min(tc - 1), oy - 1 - gy.min(sr - 1)),
            // +y wall: unfolds above.
            _ => (ox + gx.min(tc - 1), oy + tr + gy.min(sr - 1)),
        }
    }
}
