//! Row-major image buffers and the small amount of filtering the pipeline needs.

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type DepthMap = Image<f64>;
pub type WeightMap = Image<f64>;
pub type GrayImage = Image<f64>;
pub type RgbImage = Image<[u8; 3]>;
pub type Mask = Image<bool>;

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Image<T> {
    /// Panics if `data.len() != width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "image buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl RgbImage {
    /// Rec. 601 luma in `[0, 255]`.
    pub fn to_gray(&self) -> GrayImage {
        self.map(|c| 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64)
    }

    /// Bilinear sample at a real-valued pixel; `None` unless all four taps are inside.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let u0 = u.floor() as usize;
        let v0 = v.floor() as usize;
        let fu = u - u0 as f64;
        let fv = v - v0 as f64;
        let u1 = if fu > 0.0 { u0 + 1 } else { u0 };
        let v1 = if fv > 0.0 { v0 + 1 } else { v0 };
        if u1 >= self.width || v1 >= self.height {
            return None;
        }
        let mut out = [0.0; 3];
        let (c00, c10, c01, c11) = (
            self.get(u0, v0),
            self.get(u1, v0),
            self.get(u0, v1),
            self.get(u1, v1),
        );
        for ch in 0..3 {
            let top = c00[ch] as f64 * (1.0 - fu) + c10[ch] as f64 * fu;
            let bot = c01[ch] as f64 * (1.0 - fu) + c11[ch] as f64 * fu;
            out[ch] = top * (1.0 - fv) + bot * fv;
        }
        Some(out)
    }

    pub fn channel(&self, ch: usize) -> GrayImage {
        self.map(|c| c[ch] as f64)
    }

    pub fn from_channels(r: &GrayImage, g: &GrayImage, b: &GrayImage) -> RgbImage {
        let q = |x: f64| x.round().clamp(0.0, 255.0) as u8;
        Image::from_fn(r.width, r.height, |u, v| {
            [q(*r.get(u, v)), q(*g.get(u, v)), q(*b.get(u, v))]
        })
    }
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= sum);
    k
}

/// Separable convolution with a symmetric kernel; borders replicate the edge pixel.
pub fn convolve_separable(img: &GrayImage, kernel: &[f64]) -> GrayImage {
    let r = (kernel.len() / 2) as i64;
    let (w, h) = img.dims();
    let clamp = |x: i64, n: usize| x.clamp(0, n as i64 - 1) as usize;
    let horiz: GrayImage = Image::from_fn(w, h, |u, v| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| *k * *img.get(clamp(u as i64 + i as i64 - r, w), v))
            .sum::<f64>()
    });
    Image::from_fn(w, h, |u, v| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| *k * *horiz.get(u, clamp(v as i64 + i as i64 - r, h)))
            .sum::<f64>()
    })
}

pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    convolve_separable(img, &gaussian_kernel(sigma))
}

pub fn gaussian_blur_rgb(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = convolve_separable(&img.channel(0), &k);
    let g = convolve_separable(&img.channel(1), &k);
    let b = convolve_separable(&img.channel(2), &k);
    RgbImage::from_channels(&r, &g, &b)
}
