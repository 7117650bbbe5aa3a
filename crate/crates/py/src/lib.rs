//! Python bindings: the virtual device, BRDF evaluation, lumitexel
//! rendering, pattern measurement, trained bundles and the per-texel
//! fitting runtime.

use glam::DVec3;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use std::path::PathBuf;

use lumoe::brdf::{BRDFSample, GGXParams, SampleConfig, ShadingFrame};
use lumoe::device::VirtualDevice;
use lumoe::error::Error;
use lumoe::fit::{fit_texel, FitOptions};
use lumoe::lightstage::{
    acquire, measure, render_lumitexel, split_pattern, LedSet, LightingPattern, Lumitexel,
    Measurements, NoiseConfig, PatternForm, RenderMode,
};
use lumoe::moe::{decoder_probability, select_decoder, GatingOutput, ModelBundle};
use lumoe::seeding::rng_from_seed;

fn err_to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn vec3(v: [f64; 3]) -> DVec3 {
    DVec3::from_array(v)
}

/// Virtual hemicube lightstage.
#[pyclass(name = "Device")]
struct PyDevice {
    inner: VirtualDevice,
}

#[pymethods]
impl PyDevice {
    /// Desk-scale default device: 1280 main LEDs, 192 diffuse LEDs.
    #[staticmethod]
    fn desk() -> Self {
        PyDevice { inner: VirtualDevice::desk() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDevice { inner: VirtualDevice::load(&path).map_err(err_to_py)? })
    }

    #[getter]
    fn num_leds(&self) -> usize {
        self.inner.num_leds()
    }

    #[getter]
    fn num_diffuse_leds(&self) -> usize {
        self.inner.num_diffuse_leds()
    }

    #[getter]
    fn camera_position(&self) -> [f64; 3] {
        self.inner.camera_position.to_array()
    }

    fn geometry_hash(&self) -> u64 {
        self.inner.geometry_hash()
    }
}

/// One surface sample: position, shading frame and GGX parameters.
#[pyclass(name = "Sample", skip_from_py_object)]
#[derive(Clone)]
struct PySample {
    #[pyo3(get, set)]
    position: [f64; 3],
    #[pyo3(get, set)]
    normal: [f64; 3],
    #[pyo3(get, set)]
    tangent: [f64; 3],
    #[pyo3(get, set)]
    diffuse_albedo: [f64; 3],
    #[pyo3(get, set)]
    specular_albedo: [f64; 3],
    #[pyo3(get, set)]
    roughness_x: f64,
    #[pyo3(get, set)]
    roughness_y: f64,
}

#[pymethods]
impl PySample {
    #[new]
    #[pyo3(signature = (position, normal, tangent, diffuse_albedo, specular_albedo, roughness_x, roughness_y))]
    fn new(
        position: [f64; 3],
        normal: [f64; 3],
        tangent: [f64; 3],
        diffuse_albedo: [f64; 3],
        specular_albedo: [f64; 3],
        roughness_x: f64,
        roughness_y: f64,
    ) -> Self {
        PySample {
            position,
            normal,
            tangent,
            diffuse_albedo,
            specular_albedo,
            roughness_x,
            roughness_y,
        }
    }
}

impl PySample {
    fn to_sample(&self) -> PyResult<BRDFSample> {
        let frame = ShadingFrame::from_normal_tangent(vec3(self.normal), vec3(self.tangent))
            .map_err(err_to_py)?;
        Ok(BRDFSample {
            position: vec3(self.position),
            frame,
            params: GGXParams::new(
                vec3(self.diffuse_albedo),
                vec3(self.specular_albedo),
                self.roughness_x,
                self.roughness_y,
            ),
        })
    }

    fn from_sample(s: &BRDFSample) -> Self {
        PySample {
            position: s.position.to_array(),
            normal: s.frame.normal.to_array(),
            tangent: s.frame.tangent.to_array(),
            diffuse_albedo: s.params.diffuse_albedo.to_array(),
            specular_albedo: s.params.specular_albedo.to_array(),
            roughness_x: s.params.roughness_x,
            roughness_y: s.params.roughness_y,
        }
    }
}

/// Draw a random training sample on the device plane.
#[pyfunction]
fn sample_brdf(device: &PyDevice, seed: u64) -> PySample {
    let mut rng = rng_from_seed(seed);
    let s = lumoe::brdf::sample_brdf(&mut rng, &device.inner.plane, &SampleConfig::default());
    PySample::from_sample(&s)
}

/// Anisotropic GGX BRDF value for one channel.
#[pyfunction]
fn eval_brdf(
    wi: [f64; 3],
    wo: [f64; 3],
    sample: &PySample,
    channel: usize,
) -> PyResult<f64> {
    let s = sample.to_sample()?;
    lumoe::brdf::eval_brdf(vec3(wi), vec3(wo), &s.frame, &s.params, channel).map_err(err_to_py)
}

/// Render the lumitexel of a sample.
#[pyfunction]
#[pyo3(signature = (device, sample, channel = 0, mode = "full", led_set = "main"))]
fn render_lumitexel_py(
    device: &PyDevice,
    sample: &PySample,
    channel: usize,
    mode: &str,
    led_set: &str,
) -> PyResult<Vec<f64>> {
    let mode = match mode {
        "full" => RenderMode::Full,
        "diffuse" => RenderMode::DiffuseOnly,
        "specular" => RenderMode::SpecularOnly,
        other => return Err(PyValueError::new_err(format!("unknown mode {other}"))),
    };
    let set = match led_set {
        "main" => LedSet::Main,
        "diffuse" => LedSet::Diffuse,
        other => return Err(PyValueError::new_err(format!("unknown led set {other}"))),
    };
    let s = sample.to_sample()?;
    let lum = render_lumitexel(&s, &device.inner, channel, mode, set).map_err(err_to_py)?;
    Ok(lum.0)
}

/// Measurement of a lumitexel under a signed pattern.
#[pyfunction]
fn measure_py(lumitexel: Vec<f64>, weights: Vec<f64>) -> PyResult<f64> {
    let lum = Lumitexel(lumitexel);
    let pat = LightingPattern { weights, form: PatternForm::Signed };
    measure(&lum, &pat).map_err(err_to_py)
}

/// Split a signed pattern into its two physically realizable halves.
#[pyfunction]
fn split_pattern_py(weights: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let pat = LightingPattern::signed(weights).map_err(err_to_py)?;
    let (pos, neg) = split_pattern(&pat).map_err(err_to_py)?;
    Ok((pos.weights, neg.weights))
}

/// Trained model bundle: patterns, gating, decoders, latent head.
#[pyclass(name = "Bundle")]
struct PyBundle {
    inner: ModelBundle<f32>,
}

#[pymethods]
impl PyBundle {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyBundle { inner: ModelBundle::load_file(&path).map_err(err_to_py)? })
    }

    #[getter]
    fn n_decoders(&self) -> usize {
        self.inner.config.n_decoders
    }

    #[getter]
    fn realized_patterns(&self) -> usize {
        2 * self.inner.config.n_trained_patterns
    }

    #[getter]
    fn num_leds(&self) -> usize {
        self.inner.config.num_leds
    }

    /// Signed pattern weights, one list per trained pattern.
    fn patterns(&self) -> Vec<Vec<f32>> {
        (0..self.inner.patterns.rows).map(|j| self.inner.patterns.row(j).to_vec()).collect()
    }

    /// Encode a lumitexel into photometric measurements.
    fn encode(&self, lumitexel: Vec<f32>) -> PyResult<Vec<f32>> {
        self.inner.encode(&lumitexel).map_err(err_to_py)
    }

    /// Per-bit gating probabilities for a measurement vector.
    fn gate(&self, measurements: Vec<f32>) -> PyResult<Vec<f64>> {
        Ok(self.inner.gate(&measurements).map_err(err_to_py)?.bits)
    }

    /// Most probable decoder index.
    fn select(&self, measurements: Vec<f32>) -> PyResult<usize> {
        Ok(select_decoder(&self.inner.gate(&measurements).map_err(err_to_py)?))
    }

    /// Decode measurements with decoder `a` into (diffuse, specular).
    fn decode(&self, measurements: Vec<f32>, a: usize) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let p = self.inner.decode(&measurements, a).map_err(err_to_py)?;
        Ok((p.diffuse, p.specular))
    }
}

/// Pr(a) from per-bit probabilities.
#[pyfunction]
fn decoder_probability_py(bits: Vec<f64>, a: usize) -> PyResult<f64> {
    decoder_probability(&GatingOutput { bits }, a).map_err(err_to_py)
}

/// Simulate acquisition of one sample under signed patterns; returns one
/// list per RGB channel.
#[pyfunction]
#[pyo3(signature = (device, sample, patterns, noise_sigma = 0.0, seed = 0))]
fn acquire_py(
    device: &PyDevice,
    sample: &PySample,
    patterns: Vec<Vec<f64>>,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let s = sample.to_sample()?;
    let pats: Vec<LightingPattern> = patterns
        .into_iter()
        .map(|w| LightingPattern { weights: w, form: PatternForm::Signed })
        .collect();
    let mut rng = rng_from_seed(seed);
    let m = acquire(&s, &pats, &device.inner, &NoiseConfig { sigma: noise_sigma }, true, &mut rng)
        .map_err(err_to_py)?;
    Ok(m.channels)
}

/// Full per-texel runtime: reconstruct lumitexels with the selected
/// decoder, fit normal, frame, roughnesses and RGB albedos. Returns a dict.
#[pyfunction]
fn fit_texel_py(
    py: Python<'_>,
    device: &PyDevice,
    bundle: &PyBundle,
    measurements_rgb: Vec<Vec<f64>>,
    position: [f64; 3],
) -> PyResult<Py<pyo3::types::PyDict>> {
    if measurements_rgb.len() != 3 {
        return Err(PyValueError::new_err("expected 3 measurement channels"));
    }
    let meas = Measurements { channels: measurements_rgb };
    let result = fit_texel(
        &meas,
        &bundle.inner,
        &device.inner,
        vec3(position),
        &FitOptions::default(),
    )
    .map_err(err_to_py)?;
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("normal", result.frame.normal.to_array())?;
    dict.set_item("tangent", result.frame.tangent.to_array())?;
    dict.set_item("diffuse_albedo", result.params.diffuse_albedo.to_array())?;
    dict.set_item("specular_albedo", result.params.specular_albedo.to_array())?;
    dict.set_item("roughness_x", result.params.roughness_x)?;
    dict.set_item("roughness_y", result.params.roughness_y)?;
    dict.set_item("decoder_index", result.decoder_index)?;
    dict.set_item("flags", result.flags)?;
    Ok(dict.unbind())
}

/// Mean SSIM between two gray images in [0, 1].
#[pyfunction]
fn ssim_py(a: Vec<f32>, b: Vec<f32>, width: usize, height: usize) -> PyResult<f64> {
    lumoe::ssim::ssim_gray(&a, &b, width, height).map_err(err_to_py)
}

#[pymodule]
fn lumoe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDevice>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyBundle>()?;
    m.add_function(wrap_pyfunction!(sample_brdf, m)?)?;
    m.add_function(wrap_pyfunction!(eval_brdf, m)?)?;
    m.add_function(wrap_pyfunction!(render_lumitexel_py, m)?)?;
    m.add_function(wrap_pyfunction!(measure_py, m)?)?;
    m.add_function(wrap_pyfunction!(split_pattern_py, m)?)?;
    m.add_function(wrap_pyfunction!(decoder_probability_py, m)?)?;
    m.add_function(wrap_pyfunction!(acquire_py, m)?)?;
    m.add_function(wrap_pyfunction!(fit_texel_py, m)?)?;
    m.add_function(wrap_pyfunction!(ssim_py, m)?)?;
    Ok(())
}
