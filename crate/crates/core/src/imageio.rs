//! Image file helpers: Radiance HDR for radiometric data, 8-bit PNG for
//! visualizations, paletted PNG for decoder-index maps, and the cross
//! unfolding of per-LED vectors.

use std::io::BufWriter;
use std::path::Path;

use crate::device::VirtualDevice;
use crate::error::{Error, Result};
use crate::fit::TextureMaps;
use crate::lightstage::LightingPattern;

pub fn write_hdr(path: &Path, width: usize, height: usize, rgb: &[[f32; 3]]) -> Result<()> {
    if rgb.len() != width * height {
        return Err(Error::invalid_argument("hdr buffer does not match dimensions"));
    }
    let data: Vec<image::Rgb<f32>> = rgb.iter().map(|p| image::Rgb(*p)).collect();
    let file = std::fs::File::create(path)?;
    let enc = image::codecs::hdr::HdrEncoder::new(BufWriter::new(file));
    enc.encode(&data, width, height).map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_hdr(path: &Path) -> Result<(usize, usize, Vec<[f32; 3]>)> {
    let img = image::open(path).map_err(|e| Error::Format(e.to_string()))?;
    let f = img.to_rgb32f();
    let (w, h) = (f.width() as usize, f.height() as usize);
    let data = f.pixels().map(|p| p.0).collect();
    Ok((w, h, data))
}

pub fn write_png_rgb8(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    if rgb.len() != width * height {
        return Err(Error::invalid_argument("png buffer does not match dimensions"));
    }
    let mut img = image::RgbImage::new(width as u32, height as u32);
    for (i, p) in rgb.iter().enumerate() {
        img.put_pixel((i % width) as u32, (i / width) as u32, image::Rgb(*p));
    }
    img.save(path).map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_png_rgb8(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let img = image::open(path).map_err(|e| Error::Format(e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.pixels().map(|p| p.0).collect()))
}

pub fn write_png_gray8(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::invalid_argument("png buffer does not match dimensions"));
    }
    let img = image::GrayImage::from_raw(width as u32, height as u32, gray.to_vec())
        .ok_or_else(|| Error::invalid_argument("gray buffer size"))?;
    img.save(path).map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// 8-bit paletted PNG; the palette has one RGB entry per index in use.
pub fn write_indexed_png(
    path: &Path,
    width: usize,
    height: usize,
    indices: &[u8],
    palette: &[[u8; 3]],
) -> Result<()> {
    if indices.len() != width * height {
        return Err(Error::invalid_argument("index buffer does not match dimensions"));
    }
    if palette.is_empty() || palette.len() > 256 {
        return Err(Error::invalid_argument("palette must have 1..=256 entries"));
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    let flat: Vec<u8> = palette.iter().flat_map(|p| p.iter().copied()).collect();
    enc.set_palette(flat);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(indices).map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_indexed_png(path: &Path) -> Result<(usize, usize, Vec<u8>, Vec<[u8; 3]>)> {
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if info.color_type != png::ColorType::Indexed {
        return Err(Error::Format("not an indexed png".into()));
    }
    let palette_raw = reader
        .info()
        .palette
        .as_ref()
        .ok_or_else(|| Error::Format("indexed png without palette".into()))?
        .to_vec();
    let palette: Vec<[u8; 3]> =
        palette_raw.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    buf.truncate((info.width * info.height) as usize);
    Ok((info.width as usize, info.height as usize, buf, palette))
}

/// Distinct colors for decoder-index visualization.
pub fn index_palette(n: usize) -> Vec<[u8; 3]> {
    (0..n.max(1))
        .map(|i| {
            let h = (i as f64 * 0.618_033_988_75).fract() * 6.0;
            let s = 0.85;
            let v = if i % 2 == 0 { 0.95 } else { 0.7 };
            let c = v * s;
            let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
            let (r, g, b) = match h as usize {
                0 => (c, x, 0.0),
                1 => (x, c, 0.0),
                2 => (0.0, c, x),
                3 => (0.0, x, c),
                4 => (x, 0.0, c),
                _ => (c, 0.0, x),
            };
            let m = v - c;
            [((r + m) * 255.0) as u8, ((g + m) * 255.0) as u8, ((b + m) * 255.0) as u8]
        })
        .collect()
}

/// Lay a per-LED vector out as a cross image (side faces unfolded around
/// the top plate). Unused pixels are zero.
pub fn led_cross_image(
    device: &VirtualDevice,
    values: &[f64],
    diffuse_set: bool,
) -> Result<(usize, usize, Vec<f32>)> {
    let leds = if diffuse_set { &device.diffuse_leds } else { &device.leds };
    if values.len() != leds.len() {
        return Err(Error::invalid_argument("value count does not match LED set"));
    }
    let layout = device.cross_layout(diffuse_set);
    let mut img = vec![0.0f32; layout.width * layout.height];
    for (led, v) in leds.iter().zip(values) {
        let (x, y) = layout.pixel(led.face, led.grid);
        img[y * layout.width + x] = *v as f32;
    }
    Ok((layout.width, layout.height, img))
}

/// Signed patterns as an HDR strip: positive weights in red, negative
/// magnitudes in green, one cross per pattern left to right.
pub fn pattern_strip(device: &VirtualDevice, patterns: &[LightingPattern]) -> Result<(usize, usize, Vec<[f32; 3]>)> {
    if patterns.is_empty() {
        return Err(Error::invalid_argument("no patterns to visualize"));
    }
    let layout = device.cross_layout(false);
    let gap = 2usize;
    let width = patterns.len() * layout.width + (patterns.len() - 1) * gap;
    let height = layout.height;
    let mut img = vec![[0.0f32; 3]; width * height];
    for (pi, p) in patterns.iter().enumerate() {
        let (w, _, cross) = led_cross_image(device, &p.weights, false)?;
        let x0 = pi * (layout.width + gap);
        for y in 0..height {
            for x in 0..w {
                let v = cross[y * w + x];
                let dst = &mut img[y * width + x0 + x];
                if v >= 0.0 {
                    dst[0] = v;
                } else {
                    dst[1] = -v;
                }
            }
        }
    }
    Ok((width, height, img))
}

/// Encode a unit vector into the 8-bit (v+1)/2 image convention.
fn encode_dir(v: [f32; 3]) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (((v[c] + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    out
}

fn decode_dir(v: [u8; 3]) -> [f32; 3] {
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        out[c] = v[c] as f32 / 255.0 * 2.0 - 1.0;
    }
    out
}

/// Write all texture maps into a directory: HDR for albedos and roughness,
/// 8-bit PNGs for directions, a paletted PNG for decoder indices and a
/// gray PNG for the quality mask.
pub fn save_texture_maps(dir: &Path, maps: &TextureMaps) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (w, h) = (maps.width, maps.height);
    write_hdr(&dir.join("diffuse_albedo.hdr"), w, h, &maps.diffuse)?;
    write_hdr(&dir.join("specular_albedo.hdr"), w, h, &maps.specular)?;
    let rough: Vec<[f32; 3]> =
        maps.roughness.iter().map(|r| [r[0], r[1], 0.0]).collect();
    write_hdr(&dir.join("roughness.hdr"), w, h, &rough)?;
    let normals: Vec<[u8; 3]> = maps.normal.iter().map(|v| encode_dir(*v)).collect();
    write_png_rgb8(&dir.join("normal.png"), w, h, &normals)?;
    let tangents: Vec<[u8; 3]> = maps.tangent.iter().map(|v| encode_dir(*v)).collect();
    write_png_rgb8(&dir.join("tangent.png"), w, h, &tangents)?;
    let max_idx = maps.decoder_index.iter().copied().max().unwrap_or(0) as usize;
    write_indexed_png(
        &dir.join("decoder_index.png"),
        w,
        h,
        &maps.decoder_index,
        &index_palette(max_idx + 1),
    )?;
    write_png_gray8(&dir.join("quality.png"), w, h, &maps.quality)?;
    Ok(())
}

/// Load texture maps saved by [`save_texture_maps`]. Directions come back
/// through the 8-bit encoding, so they carry quantization error.
pub fn load_texture_maps(dir: &Path) -> Result<TextureMaps> {
    let (w, h, diffuse) = read_hdr(&dir.join("diffuse_albedo.hdr"))?;
    let (w2, h2, specular) = read_hdr(&dir.join("specular_albedo.hdr"))?;
    let (w3, h3, rough3) = read_hdr(&dir.join("roughness.hdr"))?;
    let (w4, h4, normal8) = read_png_rgb8(&dir.join("normal.png"))?;
    let (w5, h5, tangent8) = read_png_rgb8(&dir.join("tangent.png"))?;
    let (w6, h6, decoder_index, _) = read_indexed_png(&dir.join("decoder_index.png"))?;
    let quality = {
        let img = image::open(dir.join("quality.png"))
            .map_err(|e| Error::Format(e.to_string()))?
            .to_luma8();
        img.into_raw()
    };
    for (ww, hh) in [(w2, h2), (w3, h3), (w4, h4), (w5, h5), (w6, h6)] {
        if ww != w || hh != h {
            return Err(Error::Format("texture map dimensions disagree".into()));
        }
    }
    Ok(TextureMaps {
        width: w,
        height: h,
        diffuse,
        specular,
        normal: normal8.into_iter().map(decode_dir).collect(),
        tangent: tangent8.into_iter().map(decode_dir).collect(),
        roughness: rough3.into_iter().map(|r| [r[0], r[1]]).collect(),
        decoder_index,
        quality,
    })
}

/// Map an HDR image to 8-bit for display: fixed exposure, clamp, gamma 2.2.
pub fn hdr_to_display(rgb: &[[f32; 3]], exposure: f32) -> Vec<[u8; 3]> {
    crate::ssim::tone_map(rgb, exposure, 2.2)
        .into_iter()
        .map(|p| {
            [
                (p[0] * 255.0).round() as u8,
                (p[1] * 255.0).round() as u8,
                (p[2] * 255.0).round() as u8,
            ]
        })
        .collect()
}
