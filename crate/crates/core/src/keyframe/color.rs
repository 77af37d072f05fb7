use crate::image::{gaussian_blur, GrayImage, RgbImage};

const REBLUR_TAPS: usize = 9;

/// No-reference sharpness in `[0, 1]` (1 = sharp), from the re-blur metric:
/// the image is blurred along each axis with a 9-tap box filter and the loss
/// of neighboring-pixel variation is compared to the original variation.
/// Images without any variation are treated as sharp.
pub fn blurriness(img: &GrayImage) -> f64 {
    let (w, h) = img.dims();
    if w == 0 || h == 0 {
        return 1.0;
    }
    let ver = reblur(img, true);
    let hor = reblur(img, false);

    let mut blur: Option<f64> = None;
    for (blurred, vertical) in [(&ver, true), (&hor, false)] {
        let (mut s_f, mut s_v) = (0.0, 0.0);
        let (u0, v0) = if vertical { (0, 1) } else { (1, 0) };
        for v in v0..h {
            for u in u0..w {
                let (pu, pv) = if vertical { (u, v - 1) } else { (u - 1, v) };
                let d_f = (img.get(u, v) - img.get(pu, pv)).abs();
                let d_b = (blurred.get(u, v) - blurred.get(pu, pv)).abs();
                s_f += d_f;
                s_v += (d_f - d_b).max(0.0);
            }
        }
        if s_f > 0.0 {
            let b = (s_f - s_v) / s_f;
            blur = Some(blur.map_or(b, |x: f64| x.max(b)));
        }
    }
    match blur {
        Some(b) => (1.0 - b).clamp(0.0, 1.0),
        None => 1.0,
    }
}

/// 9-tap box filter along one axis, edge pixels replicated.
fn reblur(img: &GrayImage, vertical: bool) -> GrayImage {
    let (w, h) = img.dims();
    let r = (REBLUR_TAPS / 2) as i64;
    let norm = 1.0 / REBLUR_TAPS as f64;
    GrayImage::from_fn(w, h, |u, v| {
        (-r..=r)
            .map(|i| {
                if vertical {
                    *img.get(u, (v as i64 + i).clamp(0, h as i64 - 1) as usize)
                } else {
                    *img.get((u as i64 + i).clamp(0, w as i64 - 1) as usize, v)
                }
            })
            .sum::<f64>()
            * norm
    })
}

/// `out = clamp(in + gain * (in - gaussian(in, sigma)))` per channel.
pub fn unsharp_mask(img: &RgbImage, sigma: f64, gain: f64) -> RgbImage {
    if gain == 0.0 {
        return img.clone();
    }
    let chans: Vec<GrayImage> = (0..3)
        .map(|ch| {
            let c = img.channel(ch);
            let blurred = gaussian_blur(&c, sigma);
            let mut out = c.clone();
            for (o, b) in out.as_mut_slice().iter_mut().zip(blurred.as_slice()) {
                *o += gain * (*o - b);
            }
            out
        })
        .collect();
    RgbImage::from_channels(&chans[0], &chans[1], &chans[2])
}

/// Weighted median of `(value, weight)` pairs: the smallest value at which the
/// cumulative weight reaches half of the total. Sorts `samples` in place.
pub fn weighted_median(samples: &mut [(f64, f64)]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    samples.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let total: f64 = samples.iter().map(|s| s.1).sum();
    let half = 0.5 * total;
    let mut cum = 0.0;
    for &(value, weight) in samples.iter() {
        cum += weight;
        if cum >= half {
            return Some(value);
        }
    }
    samples.last().map(|s| s.0)
}
