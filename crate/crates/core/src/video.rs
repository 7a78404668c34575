//! Frame containers, pixel↔latent mapping and PNG frame directories.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const MIN_FRAMES: usize = 2;
pub const MAX_FRAMES: usize = 32;

/// RGB frames `[N, 3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFrames {
    pub data: Tensor,
}

impl VideoFrames {
    pub fn new(data: Tensor) -> Result<Self> {
        ensure!(
            data.shape().len() == 4 && data.shape()[1] == 3,
            Contract,
            "frames must be [N, 3, H, W], got {:?}",
            data.shape()
        );
        ensure!(data.is_finite(), Contract, "frames contain non-finite values");
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn frame(&self, i: usize) -> Tensor {
        self.data.outer(i)
    }

    /// Average-pool to the latent grid and map `[0, 1]` to `[-1, 1]`.
    pub fn to_latent(&self, h: usize, w: usize) -> Result<LatentVideo> {
        let pooled = resize(&self.data, h, w)?;
        LatentVideo::new(pooled.map(|x| 2.0 * x - 1.0))
    }

    pub fn clamp(mut self) -> Self {
        for v in self.data.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }
}

/// Per-frame latent codes `[N, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    pub data: Tensor,
}

impl LatentVideo {
    pub fn new(data: Tensor) -> Result<Self> {
        ensure!(
            data.shape().len() == 4,
            Contract,
            "latent video must be [N, c, h, w], got {:?}",
            data.shape()
        );
        let n = data.shape()[0];
        ensure!(
            (MIN_FRAMES..=MAX_FRAMES).contains(&n),
            Contract,
            "frame count {n} outside [{MIN_FRAMES}, {MAX_FRAMES}]"
        );
        ensure!(data.is_finite(), Contract, "latent contains non-finite values");
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.data.shape()[2], self.data.shape()[3])
    }

    /// Nearest-neighbour upsampling back to `[0, 1]` frames.
    pub fn to_frames(&self, height: usize, width: usize) -> Result<VideoFrames> {
        latent_to_frames(&self.data, height, width)
    }
}

pub fn latent_to_frames(latent: &Tensor, height: usize, width: usize) -> Result<VideoFrames> {
    let up = resize(latent, height, width)?;
    VideoFrames::new(up.map(|x| ((x + 1.0) / 2.0).clamp(0.0, 1.0)))
}

/// Resize `[N, C, H, W]` spatially. Integer downscales average over
/// blocks, integer upscales repeat pixels, anything else is bilinear.
pub fn resize(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    ensure!(x.shape().len() == 4, Contract, "resize expects [N, C, H, W]");
    let s = x.shape();
    let (n, c, sh, sw) = (s[0], s[1], s[2], s[3]);
    ensure!(h > 0 && w > 0, Contract, "target size must be positive");
    let mut out = vec![0.0; n * c * h * w];
    let src = x.data();
    if sh % h == 0 && sw % w == 0 {
        let (fy, fx) = (sh / h, sw / w);
        let norm = (fy * fx) as f64;
        for plane in 0..n * c {
            for r in 0..h {
                for col in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..fy {
                        for dx in 0..fx {
                            acc += src[plane * sh * sw + (r * fy + dy) * sw + col * fx + dx];
                        }
                    }
                    out[plane * h * w + r * w + col] = acc / norm;
                }
            }
        }
    } else if h % sh == 0 && w % sw == 0 {
        let (fy, fx) = (h / sh, w / sw);
        for plane in 0..n * c {
            for r in 0..h {
                for col in 0..w {
                    out[plane * h * w + r * w + col] = src[plane * sh * sw + (r / fy) * sw + col / fx];
                }
            }
        }
    } else {
        for plane in 0..n * c {
            for r in 0..h {
                let y = ((r as f64 + 0.5) * sh as f64 / h as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
                let (y0, ty) = (y.floor() as usize, y - y.floor());
                let y1 = (y0 + 1).min(sh - 1);
                for col in 0..w {
                    let xx = ((col as f64 + 0.5) * sw as f64 / w as f64 - 0.5)
                        .clamp(0.0, (sw - 1) as f64);
                    let (x0, tx) = (xx.floor() as usize, xx - xx.floor());
                    let x1 = (x0 + 1).min(sw - 1);
                    let at = |yy: usize, xi: usize| src[plane * sh * sw + yy * sw + xi];
                    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                    let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                    out[plane * h * w + r * w + col] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

fn frame_name(i: usize) -> String {
    format!("frame_{:04}.png", i)
}

pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let channels = bytes.len() / (w * h);
    let mut planar = vec![0.0; 3 * h * w];
    for px in 0..h * w {
        for ch in 0..3 {
            let v = match channels {
                1 | 2 => bytes[px * channels],
                _ => bytes[px * channels + ch],
            };
            planar[ch * h * w + px] = v as f64 / 255.0;
        }
    }
    Ok((h, w, planar))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png_rgb(path: &Path, h: usize, w: usize, planar: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(3 * h * w);
    for px in 0..h * w {
        for ch in 0..3 {
            bytes.push(to_u8(planar[ch * h * w + px]));
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &bytes)
}

pub fn write_png_gray(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    write_png(path, w, h, png::ColorType::Grayscale, &bytes)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    Ok(())
}

/// Write `frame_0001.png`, `frame_0002.png`, … into `dir`.
pub fn write_frames(dir: &Path, frames: &VideoFrames) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..frames.frames() {
        let f = frames.frame(i);
        write_png_rgb(
            &dir.join(frame_name(i + 1)),
            frames.height(),
            frames.width(),
            f.data(),
        )?;
    }
    Ok(())
}

/// Load `frame_%04d.png` files numbered contiguously from 0001 and resize
/// them to `(height, width)`.
pub fn ingest(dir: &Path, height: usize, width: usize) -> Result<VideoFrames> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(num) = name
            .strip_prefix("frame_")
            .and_then(|s| s.strip_suffix(".png"))
        {
            if let Ok(i) = num.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    ensure!(
        !indices.is_empty(),
        Ingestion,
        "no frame_%04d.png files in {}",
        dir.display()
    );
    for (expect, &got) in (1..).zip(&indices) {
        ensure!(
            got == expect,
            Ingestion,
            "missing frame {} ({}) in {}",
            frame_name(expect),
            expect,
            dir.display()
        );
    }
    let mut frames = Vec::with_capacity(indices.len());
    let mut dims = None;
    for &i in &indices {
        let path = dir.join(frame_name(i));
        let (h, w, planar) = read_png_rgb(&path)?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) => ensure!(
                d == (h, w),
                Ingestion,
                "{} is {h}x{w}, earlier frames are {}x{}",
                path.display(),
                d.0,
                d.1
            ),
        }
        frames.push(Tensor::from_parts(vec![3, h, w], planar));
    }
    let stacked = Tensor::stack(&frames)?;
    let (h, w) = dims.unwrap();
    let data = if (h, w) == (height, width) {
        stacked
    } else {
        resize(&stacked, height, width)?
    };
    VideoFrames::new(data)
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = a.zip_map(b, |x, y| (x - y) * (x - y))?.mean();
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}
