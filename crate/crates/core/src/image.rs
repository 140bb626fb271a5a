//! Image containers and the low-level kernels shared by every stage.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Row-major raster of normalized intensities in `[0,1]` with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// Builds an image, clamping every value to `[0,1]`.
    pub fn new(width: usize, height: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::param(format!("channels must be 1 or 3, got {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::dim("zero-dimension image"));
        }
        if data.len() != width * height * channels {
            return Err(Error::dim(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::param("NaN intensity"));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
            .expect("valid dimensions")
    }

    /// Single-channel image from a per-pixel function; values are clamped.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data).expect("valid dimensions")
    }

    /// Single-channel image from a raster, clamping on write.
    pub fn from_raster(r: &Raster) -> Self {
        Self::new(r.width, r.height, 1, r.data.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect())
            .expect("valid dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels]
    }

    #[inline]
    pub fn get_c(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    /// Extracts one channel as a gray image.
    pub fn channel(&self, c: usize) -> ImageBuffer {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        ImageBuffer { width: self.width, height: self.height, channels: 1, data }
    }

    /// Interleaves gray planes back into one image.
    pub fn from_channels(planes: &[ImageBuffer]) -> Result<ImageBuffer> {
        let first = planes.first().ok_or_else(|| Error::param("no planes"))?;
        let (w, h) = (first.width, first.height);
        if planes.iter().any(|p| p.width != w || p.height != h || p.channels != 1) {
            return Err(Error::dim("plane dimensions differ"));
        }
        let n = planes.len();
        let mut data = vec![0.0; w * h * n];
        for (c, p) in planes.iter().enumerate() {
            for (i, v) in p.data.iter().enumerate() {
                data[i * n + c] = *v;
            }
        }
        ImageBuffer::new(w, h, n, data)
    }

    /// Applies `f` per gray plane and reassembles.
    pub fn map_planes(&self, mut f: impl FnMut(&ImageBuffer) -> Result<ImageBuffer>) -> Result<ImageBuffer> {
        if self.channels == 1 {
            return f(self);
        }
        let planes = (0..self.channels).map(|c| f(&self.channel(c))).collect::<Result<Vec<_>>>()?;
        ImageBuffer::from_channels(&planes)
    }

    /// Bilinear sample of channel `c`; `None` outside `[0,w-1]x[0,h-1]`.
    pub fn sample(&self, x: f64, y: f64, c: usize) -> Option<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
            return None;
        }
        Some(self.sample_clamped(x, y, c))
    }

    /// Bilinear sample with coordinates clamped to the image.
    pub fn sample_clamped(&self, x: f64, y: f64, c: usize) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let a = self.get_c(x0, y0, c);
        let b = self.get_c(x1, y0, c);
        let cc = self.get_c(x0, y1, c);
        let d = self.get_c(x1, y1, c);
        let top = a + (b - a) * fx;
        let bot = cc + (d - cc) * fx;
        top + (bot - top) * fy
    }

    pub fn to_raster(&self) -> Raster {
        let g = to_grayscale(self);
        Raster { width: g.width, height: g.height, data: g.data }
    }

    pub(crate) fn require_gray(&self, what: &str) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::param(format!("{what} requires a 1-channel image")));
        }
        Ok(())
    }
}

/// Unclamped float raster for derivatives, depth and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// Partial derivatives of a gray image.
#[derive(Debug, Clone)]
pub struct GradientField {
    pub dx: Raster,
    pub dy: Raster,
    pub magnitude: Raster,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageStats {
    pub mean: f64,
    pub stddev: f64,
}

/// Luminance 0.299R + 0.587G + 0.114B; gray input is returned as is.
pub fn to_grayscale(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
        .collect();
    ImageBuffer::new(img.width, img.height, 1, data).expect("valid dimensions")
}

/// Central differences inside, one-sided differences on the border.
pub fn gradient(img: &ImageBuffer) -> Result<GradientField> {
    img.require_gray("gradient")?;
    let (w, h) = (img.width, img.height);
    if w < 2 || h < 2 {
        return Err(Error::dim("gradient needs at least 2x2 pixels"));
    }
    Ok(gradient_raw(&img.data, w, h))
}

pub(crate) fn gradient_raw(data: &[f64], w: usize, h: usize) -> GradientField {
    let mut dx = Raster::zeros(w, h);
    let mut dy = Raster::zeros(w, h);
    let at = |x: usize, y: usize| data[y * w + x];
    for y in 0..h {
        for x in 0..w {
            let gx = if x == 0 {
                at(1, y) - at(0, y)
            } else if x == w - 1 {
                at(x, y) - at(x - 1, y)
            } else {
                0.5 * (at(x + 1, y) - at(x - 1, y))
            };
            let gy = if y == 0 {
                at(x, 1) - at(x, 0)
            } else if y == h - 1 {
                at(x, y) - at(x, y - 1)
            } else {
                0.5 * (at(x, y + 1) - at(x, y - 1))
            };
            dx.data[y * w + x] = gx;
            dy.data[y * w + x] = gy;
        }
    }
    let magnitude = Raster {
        width: w,
        height: h,
        data: dx.data.iter().zip(&dy.data).map(|(a, b)| a.hypot(*b)).collect(),
    };
    GradientField { dx, dy, magnitude }
}

/// Summed-area table with a zero row and column prepended.
#[derive(Debug, Clone)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    sums: Vec<f64>,
}

impl IntegralImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Inclusive sum over `[0..=x] x [0..=y]`.
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.sums[(y + 1) * (self.width + 1) + x + 1]
    }

    /// Sum over the half-open box `[x0,x1) x [y0,y1)`.
    #[inline]
    pub fn box_sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.width + 1;
        self.sums[y1 * s + x1] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0] + self.sums[y0 * s + x0]
    }
}

pub fn integral_image(img: &ImageBuffer) -> Result<IntegralImage> {
    img.require_gray("integral_image")?;
    Ok(integral_raw(&img.data, img.width, img.height))
}

pub(crate) fn integral_raw(data: &[f64], w: usize, h: usize) -> IntegralImage {
    let s = w + 1;
    let mut sums = vec![0.0; s * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += data[y * w + x];
            sums[(y + 1) * s + x + 1] = sums[y * s + x + 1] + row;
        }
    }
    IntegralImage { width: w, height: h, sums }
}

/// Normalized 1D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> Result<ImageBuffer> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("sigma must be > 0, got {sigma}")));
    }
    let k = gaussian_kernel(sigma);
    img.map_planes(|p| {
        let out = convolve_separable(&p.data, p.width, p.height, &k);
        ImageBuffer::new(p.width, p.height, 1, out)
    })
}

pub(crate) fn convolve_separable(data: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (i, kv) in k.iter().enumerate() {
            let yy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
            let src = &tmp[yy * w..(yy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for x in 0..w {
                dst[x] += kv * src[x];
            }
        }
    }
    out
}

/// Mean and population standard deviation over pixels not set in `mask`.
pub fn image_stats(img: &ImageBuffer, mask: Option<&BinaryMask>) -> Result<ImageStats> {
    img.require_gray("image_stats")?;
    if let Some(m) = mask {
        if m.width() != img.width || m.height() != img.height {
            return Err(Error::dim("mask does not match image"));
        }
    }
    let keep = |i: usize| mask.map_or(true, |m| !m.bits()[i]);
    let mut n = 0usize;
    let mut sum = 0.0;
    for (i, v) in img.data.iter().enumerate() {
        if keep(i) {
            n += 1;
            sum += v;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("every pixel is masked".into()));
    }
    let mut mean = sum / n as f64;
    // One correction pass so a constant image has an exact mean.
    let mut corr = 0.0;
    for (i, v) in img.data.iter().enumerate() {
        if keep(i) {
            corr += v - mean;
        }
    }
    mean += corr / n as f64;
    let mut ss = 0.0;
    for (i, v) in img.data.iter().enumerate() {
        if keep(i) {
            ss += (v - mean) * (v - mean);
        }
    }
    Ok(ImageStats { mean, stddev: (ss / n as f64).sqrt() })
}

/// Value at a percentile (nearest rank) of a sample, `p` in `[0,100]`.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}
