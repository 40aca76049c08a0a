use crate::error::{Error, Result};

/// An `H × W × C` image with pixels in `[0, 1]`, stored row-major as `(y, x, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::dim("RawImage", &[height, width, channels], &[pixels.len()]));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: 3,
            pixels: vec![0.0; height * width * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.pixels[o..o + self.channels]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * self.channels;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }
}

/// Flattened `P × P × C` patches in row-major patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub n: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `n × patch_dim` matrix.
    pub patches: Vec<f32>,
}

impl PatchGrid {
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.patches[i * d..(i + 1) * d]
    }
}

/// Splits an image into non-overlapping `p × p` patches, top-left to bottom-right.
pub fn patchify(img: &RawImage, p: usize) -> Result<PatchGrid> {
    if img.channels != 3 {
        return Err(Error::Config(format!("expected 3 channels, got {}", img.channels)));
    }
    if p == 0 || img.height % p != 0 || img.width % p != 0 {
        return Err(Error::Config(format!(
            "image {}x{} is not divisible into {p}x{p} patches",
            img.height, img.width
        )));
    }
    let (gh, gw, c) = (img.height / p, img.width / p, img.channels);
    let mut patches = Vec::with_capacity(img.pixels.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let row = (py * p + y) * img.width + px * p;
                patches.extend_from_slice(&img.pixels[row * c..(row + p) * c]);
            }
        }
    }
    Ok(PatchGrid {
        n: gh * gw,
        patch_size: p,
        channels: c,
        grid_h: gh,
        grid_w: gw,
        patches,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(g: &PatchGrid) -> RawImage {
    let p = g.patch_size;
    let c = g.channels;
    let (h, w) = (g.grid_h * p, g.grid_w * p);
    let mut pixels = vec![0.0; h * w * c];
    for py in 0..g.grid_h {
        for px in 0..g.grid_w {
            let patch = g.patch(py * g.grid_w + px);
            for y in 0..p {
                let row = (py * p + y) * w + px * p;
                pixels[row * c..(row + p) * c].copy_from_slice(&patch[y * p * c..(y + 1) * p * c]);
            }
        }
    }
    RawImage {
        height: h,
        width: w,
        channels: c,
        pixels,
    }
}
