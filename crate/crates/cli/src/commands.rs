//! Subcommand implementations.

use glam::DVec3;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use lumoe::brdf::SampleConfig;
use lumoe::device::VirtualDevice;
use lumoe::error::{Error, Result};
use lumoe::fit::{fit_texture, FitOptions};
use lumoe::imageio;
use lumoe::lightstage::NoiseConfig;
use lumoe::moe::{select_decoder, ModelBundle, TrainCheckpoint};
use lumoe::nn::checkpoint as nn_checkpoint;
use lumoe::nn::Stack;
use lumoe::render::{render_maps, render_scene, PointLight};
use lumoe::scene::{acquire_scene, expand_scene, SceneSpec};
use lumoe::seeding::{derive_seed, derived_rng};
use lumoe::ssim::{luma, ssim_gray, tone_map};
use lumoe::train::{
    file_checksum, generate_dataset, pca_patterns, pretrain_latent, train_main, validation_loss,
    write_curves_csv, Dataset, PatternMode, TrainOptions,
};

use crate::config::ExperimentConfig;

/// Sidecar metadata describing one training run, written next to its bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub kind: String,
    pub n_decoders: usize,
    pub realized_patterns: usize,
    pub seed: u64,
    pub dataset: PathBuf,
}

pub fn cmd_gen_data(
    cfg: &ExperimentConfig,
    count: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let device = cfg.device()?;
    let count = count.unwrap_or(cfg.dataset_count);
    let seed = seed.unwrap_or(cfg.dataset_seed);
    let ds = generate_dataset(&device, count, seed, &SampleConfig::default(), 0.05)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    ds.save_file(out)?;
    let checksum = file_checksum(out)?;
    println!("records: {count}");
    println!("file: {}", out.display());
    println!("checksum: {checksum:016x}");
    Ok(())
}

pub fn cmd_pretrain(
    cfg: &ExperimentConfig,
    dataset: &Path,
    iterations: Option<u64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let device = cfg.device()?;
    let ds = Dataset::load_file(dataset)?;
    check_dataset(&device, &ds)?;
    let model_cfg = cfg.model.to_model_config(&device)?;
    let mut tcfg = cfg.pretrain.clone();
    if let Some(it) = iterations {
        tcfg.iterations = it;
    }
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    let result = pretrain_latent(&ds, &model_cfg, &tcfg)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    let extra = serde_json::to_value(&model_cfg).map_err(|e| Error::Format(e.to_string()))?;
    nn_checkpoint::save_stack(&mut f, &result.head, &extra)?;
    drop(f);
    write_curves_csv(&out.with_extension("csv"), &result.curves)?;
    let last = result.curves.last();
    println!("head: {}", out.display());
    if let Some(p) = last {
        println!("final val loss: {:.6}", p.val_loss.unwrap_or(f64::NAN));
    }
    Ok(())
}

pub fn load_head(path: &Path, model_cfg: &lumoe::moe::ModelConfig) -> Result<Stack<f32>> {
    let mut head = Stack::new(model_cfg.latent_dim, &model_cfg.head_specs())?;
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    nn_checkpoint::load_stack(&mut f, &mut head)?;
    Ok(head)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    cfg: &ExperimentConfig,
    dataset: &Path,
    head_path: Option<&Path>,
    out_dir: &Path,
    iterations: Option<u64>,
    seed: Option<u64>,
    realized_patterns: Option<usize>,
    n_decoders: Option<usize>,
    pca: bool,
    resume: Option<&Path>,
    checkpoint_every: Option<u64>,
) -> Result<()> {
    let device = cfg.device()?;
    let ds = Dataset::load_file(dataset)?;
    check_dataset(&device, &ds)?;
    let mut params = cfg.model.clone();
    if let Some(r) = realized_patterns {
        params.realized_patterns = r;
    }
    if let Some(n) = n_decoders {
        params.n_decoders = n;
    }
    let model_cfg = params.to_model_config(&device)?;
    let mut tcfg = cfg.train.clone();
    if let Some(it) = iterations {
        tcfg.iterations = it;
    }
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    if let Some(ce) = checkpoint_every {
        tcfg.checkpoint_every = ce;
    }
    std::fs::create_dir_all(out_dir)?;

    let head = match head_path {
        Some(p) => load_head(p, &model_cfg)?,
        None => {
            println!("no pretrained head given; pretraining one first");
            let result = pretrain_latent(&ds, &model_cfg, &cfg.pretrain)?;
            let head_file = out_dir.join("latent_head.dnck");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&head_file)?);
            let extra =
                serde_json::to_value(&model_cfg).map_err(|e| Error::Format(e.to_string()))?;
            nn_checkpoint::save_stack(&mut f, &result.head, &extra)?;
            println!("pretrained head: {}", head_file.display());
            result.head
        }
    };

    let pattern_mode = if pca {
        let pats = pca_patterns(&ds, model_cfg.n_trained_patterns)?;
        PatternMode::Fixed(
            pats.iter().map(|p| p.weights.iter().map(|w| *w as f32).collect()).collect(),
        )
    } else {
        PatternMode::Trainable
    };

    let resume_ck = match resume {
        Some(p) => Some(TrainCheckpoint::load_file(p)?),
        None => None,
    };

    let options = TrainOptions {
        pattern_mode,
        checkpoint_dir: Some(out_dir),
        resume: resume_ck,
    };
    let outcome = train_main(&ds, &model_cfg, &tcfg, &head, options)?;

    let bundle_path = out_dir.join("bundle.mbdl");
    outcome.bundle.save_file(&bundle_path)?;
    write_curves_csv(&out_dir.join("curves.csv"), &outcome.curves)?;
    let (w, h, strip) = imageio::pattern_strip(&device, &outcome.bundle.lighting_patterns())?;
    imageio::write_hdr(&out_dir.join("patterns.hdr"), w, h, &strip)?;
    let meta = RunMeta {
        kind: if pca { "pca".into() } else { "trained".into() },
        n_decoders: model_cfg.n_decoders,
        realized_patterns: 2 * model_cfg.n_trained_patterns,
        seed: tcfg.seed,
        dataset: dataset.to_path_buf(),
    };
    std::fs::write(
        out_dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    println!("bundle: {}", bundle_path.display());
    println!("final val loss: {:.6}", outcome.final_val_loss);
    Ok(())
}

fn load_scene(spec: &str, width: usize, height: usize) -> Result<SceneSpec> {
    match spec {
        "builtin:constant" => Ok(SceneSpec::constant_default(width, height)),
        "builtin:two-material" => Ok(SceneSpec::two_material_default(width, height)),
        "builtin:aniso-gradient" => Ok(SceneSpec::aniso_gradient_default(width, height)),
        path => SceneSpec::load(Path::new(path)),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_fit(
    cfg: &ExperimentConfig,
    bundle_path: &Path,
    scene_spec: &str,
    out_dir: &Path,
    noise_sigma: f64,
    seed: u64,
    scene_size: usize,
) -> Result<()> {
    let device = cfg.device()?;
    let bundle = ModelBundle::load_file(bundle_path)?;
    check_bundle(&device, &bundle)?;
    let spec = load_scene(scene_spec, scene_size, scene_size)?;
    let grid = expand_scene(&spec, &device)?;
    let patterns = bundle.lighting_patterns();
    let image = acquire_scene(&grid, &patterns, &device, &NoiseConfig { sigma: noise_sigma }, seed)?;
    let maps = fit_texture(&image, &bundle, &device, &FitOptions::default())?;
    imageio::save_texture_maps(out_dir, &maps)?;
    let flagged = maps.quality.iter().filter(|q| **q != 0).count();
    println!("maps: {}", out_dir.display());
    println!(
        "quality-mask fraction: {:.4} ({} of {} texels flagged)",
        flagged as f64 / maps.quality.len() as f64,
        flagged,
        maps.quality.len()
    );
    // Ground-truth region map for segmentation experiments.
    std::fs::write(
        out_dir.join("region_gt.json"),
        serde_json::to_string(&grid.region).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRow {
    name: String,
    kind: String,
    n_decoders: usize,
    realized_patterns: usize,
    seed: u64,
    val_loss: f64,
    ssim: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    runs_dir: &Path,
    scene_spec: &str,
    out_dir: &Path,
    skip_ssim: bool,
    scene_size: usize,
    acquisition_sigma: f64,
) -> Result<()> {
    let device = cfg.device()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rows: Vec<EvalRow> = Vec::new();
    let mut dataset_cache: std::collections::HashMap<PathBuf, Dataset> = Default::default();

    let mut run_dirs: Vec<PathBuf> = std::fs::read_dir(runs_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("bundle.mbdl").exists() && p.join("meta.json").exists())
        .collect();
    run_dirs.sort();
    if run_dirs.is_empty() {
        return Err(Error::invalid_state(format!(
            "no trained bundles found under {}",
            runs_dir.display()
        )));
    }

    let spec = load_scene(scene_spec, scene_size, scene_size)?;
    let grid = expand_scene(&spec, &device)?;
    let light = lumoe::render::novel_light_for(&device);
    let view = device.camera_position;
    let gt_img = render_scene(&grid, &light, view)?;
    imageio::write_hdr(&out_dir.join("scene_gt.hdr"), grid.width, grid.height, &gt_img)?;
    let gt_display = imageio::hdr_to_display(&gt_img, cfg.exposure);
    imageio::write_png_rgb8(&out_dir.join("scene_gt.png"), grid.width, grid.height, &gt_display)?;

    for dir in &run_dirs {
        let meta: RunMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let bundle = ModelBundle::load_file(&dir.join("bundle.mbdl"))?;
        check_bundle(&device, &bundle)?;
        let ds = match dataset_cache.get(&meta.dataset) {
            Some(ds) => ds,
            None => {
                let ds = Dataset::load_file(&meta.dataset)?;
                dataset_cache.insert(meta.dataset.clone(), ds);
                dataset_cache.get(&meta.dataset).unwrap()
            }
        };
        let val_loss = validation_loss(&bundle, ds, 0)?;

        let ssim = if skip_ssim {
            None
        } else {
            let name = dir.file_name().unwrap().to_string_lossy().to_string();
            let patterns = bundle.lighting_patterns();
            let image = acquire_scene(
                &grid,
                &patterns,
                &device,
                &NoiseConfig { sigma: acquisition_sigma },
                derive_seed(meta.seed, &[0xE7]),
            )?;
            let maps = fit_texture(&image, &bundle, &device, &FitOptions::default())?;
            let fit_img = render_maps(&maps, spec.extent, &device.plane, &light, view)?;
            imageio::write_hdr(
                &out_dir.join(format!("{name}_render.hdr")),
                grid.width,
                grid.height,
                &fit_img,
            )?;
            let fit_display = imageio::hdr_to_display(&fit_img, cfg.exposure);
            imageio::write_png_rgb8(
                &out_dir.join(format!("{name}_render.png")),
                grid.width,
                grid.height,
                &fit_display,
            )?;
            let a = luma(&tone_map(&gt_img, cfg.exposure, 2.2));
            let b = luma(&tone_map(&fit_img, cfg.exposure, 2.2));
            Some(ssim_gray(&a, &b, grid.width, grid.height)?)
        };

        rows.push(EvalRow {
            name: dir.file_name().unwrap().to_string_lossy().to_string(),
            kind: meta.kind,
            n_decoders: meta.n_decoders,
            realized_patterns: meta.realized_patterns,
            seed: meta.seed,
            val_loss,
            ssim,
        });
    }

    let table = out_dir.join("table.csv");
    let mut w = String::from("name,kind,n_decoders,realized_patterns,seed,val_loss,ssim\n");
    for r in &rows {
        w.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.name,
            r.kind,
            r.n_decoders,
            r.realized_patterns,
            r.seed,
            r.val_loss,
            r.ssim.map_or(String::new(), |s| format!("{s:.6}")),
        ));
    }
    std::fs::write(&table, w)?;
    println!("table: {}", table.display());
    for r in &rows {
        match r.ssim {
            Some(s) => println!(
                "{}: val_loss {:.6}  ssim {:.4}",
                r.name, r.val_loss, s
            ),
            None => println!("{}: val_loss {:.6}", r.name, r.val_loss),
        }
    }
    Ok(())
}

pub fn cmd_gating_stats(
    cfg: &ExperimentConfig,
    bundle_path: &Path,
    count: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let device = cfg.device()?;
    let bundle = ModelBundle::load_file(bundle_path)?;
    check_bundle(&device, &bundle)?;
    std::fs::create_dir_all(out_dir)?;
    let n = bundle.config.n_decoders;
    let l = device.num_leds();

    // Fresh validation lumitexels, routed through the trained gating.
    use rayon::prelude::*;
    let rows: Vec<(usize, Vec<f64>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, &[0x65, i as u64]);
            let sample =
                lumoe::brdf::sample_brdf(&mut rng, &device.plane, &SampleConfig::default());
            let gray = lumoe::brdf::BRDFSample { params: sample.params.gray(), ..sample };
            let lum = lumoe::lightstage::render_lumitexel(
                &gray,
                &device,
                0,
                lumoe::lightstage::RenderMode::Full,
                lumoe::lightstage::LedSet::Main,
            )
            .expect("render");
            let lum_f32: Vec<f32> = lum.values().iter().map(|v| *v as f32).collect();
            let meas = bundle.encode(&lum_f32).expect("encode");
            let gating = bundle.gate(&meas).expect("gate");
            (select_decoder(&gating), lum.0)
        })
        .collect();

    let mut counts = vec![0usize; n];
    let mut sums = vec![vec![0.0f64; l]; n];
    for (a, lum) in &rows {
        counts[*a] += 1;
        for (s, v) in sums[*a].iter_mut().zip(lum) {
            *s += *v;
        }
    }
    let shares: Vec<f64> = counts.iter().map(|c| *c as f64 / count as f64).collect();
    let entropy: f64 = shares
        .iter()
        .filter(|s| **s > 0.0)
        .map(|s| -s * s.ln())
        .sum();

    let mut csv = String::from("decoder,count,share\n");
    for a in 0..n {
        csv.push_str(&format!("{a},{},{}\n", counts[a], shares[a]));
    }
    std::fs::write(out_dir.join("routing_histogram.csv"), csv)?;

    for a in 0..n {
        if counts[a] == 0 {
            continue;
        }
        let avg: Vec<f64> = sums[a].iter().map(|s| s / counts[a] as f64).collect();
        let (w, h, img) = imageio::led_cross_image(&device, &avg, false)?;
        let rgb: Vec<[f32; 3]> = img.iter().map(|v| [*v, *v, *v]).collect();
        imageio::write_hdr(&out_dir.join(format!("avg_lumitexel_{a:03}.hdr")), w, h, &rgb)?;
    }

    println!("routed: {count}");
    println!("share sum: {:.9}", shares.iter().sum::<f64>());
    println!("usage entropy: {entropy:.4} nats (max {:.4})", (n as f64).ln());
    for a in 0..n {
        println!("decoder {a}: share {:.4}", shares[a]);
    }
    Ok(())
}

fn parse_vec3(s: &str) -> Result<DVec3> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::invalid_argument(format!("expected x,y,z, got {s}")));
    }
    let mut v = [0.0f64; 3];
    for (dst, p) in v.iter_mut().zip(&parts) {
        *dst = p
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::invalid_argument(format!("bad coordinate {p}: {e}")))?;
    }
    Ok(DVec3::from_array(v))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_render(
    cfg: &ExperimentConfig,
    maps_dir: Option<&Path>,
    scene_spec: Option<&str>,
    light: &str,
    intensity: f64,
    view: Option<&str>,
    out_prefix: &Path,
    scene_size: usize,
) -> Result<()> {
    let device = cfg.device()?;
    let light_pos = parse_vec3(light)?;
    let light = PointLight { position: light_pos, intensity: DVec3::splat(intensity) };
    let view = match view {
        Some(v) => parse_vec3(v)?,
        None => device.camera_position,
    };
    let (w, h, img) = match (maps_dir, scene_spec) {
        (Some(dir), None) => {
            let maps = imageio::load_texture_maps(dir)?;
            let spec_extent = [0.04, 0.04];
            let img = render_maps(&maps, spec_extent, &device.plane, &light, view)?;
            (maps.width, maps.height, img)
        }
        (None, Some(s)) => {
            let spec = load_scene(s, scene_size, scene_size)?;
            let grid = expand_scene(&spec, &device)?;
            let img = render_scene(&grid, &light, view)?;
            (grid.width, grid.height, img)
        }
        _ => {
            return Err(Error::invalid_argument(
                "render needs exactly one of --maps or --scene",
            ))
        }
    };
    if let Some(dir) = out_prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let hdr = out_prefix.with_extension("hdr");
    imageio::write_hdr(&hdr, w, h, &img)?;
    let png = out_prefix.with_extension("png");
    imageio::write_png_rgb8(&png, w, h, &imageio::hdr_to_display(&img, cfg.exposure))?;
    println!("hdr: {}", hdr.display());
    println!("png: {}", png.display());
    Ok(())
}

fn check_dataset(device: &VirtualDevice, ds: &Dataset) -> Result<()> {
    if ds.num_leds != device.num_leds() || ds.num_diffuse_leds != device.num_diffuse_leds() {
        return Err(Error::invalid_argument(
            "dataset LED counts do not match the device",
        ));
    }
    if ds.device_hash != device.geometry_hash() {
        return Err(Error::invalid_argument(
            "dataset was generated with a different device geometry",
        ));
    }
    Ok(())
}

fn check_bundle(device: &VirtualDevice, bundle: &ModelBundle) -> Result<()> {
    if bundle.config.num_leds != device.num_leds()
        || bundle.config.num_diffuse_leds != device.num_diffuse_leds()
    {
        return Err(Error::invalid_argument("bundle dimensions do not match the device"));
    }
    Ok(())
}

