use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Bitmap, Image};

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv(rgb: [f32; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let sat = if max > 0.0 { delta / max } else { 0.0 };
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    [wrap_hue(hue), sat, max]
}

/// Inverse of [`rgb_to_hsv`]; the largest output channel is exactly `v`.
pub fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [f32; 3] {
    let h = wrap_hue(hue) / 60.0;
    let sector = (h.floor() as usize).min(5);
    let f = h - sector as f64;
    let p = val * (1.0 - sat);
    let q = val * (1.0 - sat * f);
    let t = val * (1.0 - sat * (1.0 - f));
    let rgb = match sector {
        0 => [val, t, p],
        1 => [q, val, p],
        2 => [p, val, t],
        3 => [p, q, val],
        4 => [t, p, val],
        _ => [val, p, q],
    };
    rgb.map(|c| c.clamp(0.0, 1.0) as f32)
}

fn wrap_hue(h: f64) -> f64 {
    let h = h.rem_euclid(360.0);
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

/// Smallest angle between two hues, in degrees.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanHsv {
    pub hue: f64,
    pub sat: f64,
    pub val: f64,
    /// Set when the region has no saturated pixel, so hue is meaningless.
    pub degenerate_hue: bool,
}

/// Saturation-weighted circular mean hue plus arithmetic mean saturation and value.
pub fn region_mean_hsv(image: &Image<f32>, mask: &Bitmap) -> Result<MeanHsv> {
    check_mask(image, mask)?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::param("cannot average an empty region"));
    }
    let (mut x, mut y, mut s_sum, mut v_sum, mut s_max) = (0.0, 0.0, 0.0, 0.0, 0.0f64);
    for (px, py) in mask.iter_set() {
        let [h, s, v] = rgb_to_hsv(image.get(px, py));
        let rad = h.to_radians();
        x += s * rad.cos();
        y += s * rad.sin();
        s_sum += s;
        v_sum += v;
        s_max = s_max.max(s);
    }
    let degenerate_hue = s_max < 1e-6;
    let hue = if degenerate_hue { 0.0 } else { wrap_hue(y.atan2(x).to_degrees()) };
    Ok(MeanHsv { hue, sat: s_sum / n as f64, val: v_sum / n as f64, degenerate_hue })
}

/// Sets hue and saturation of masked pixels, keeping their value.
pub fn apply_color_to_region(image: &Image<f32>, mask: &Bitmap, hue: f64, sat: f64) -> Result<Image<f32>> {
    check_mask(image, mask)?;
    if !(0.0..360.0).contains(&hue) {
        return Err(Error::param(format!("hue {hue} outside [0, 360)")));
    }
    if !(0.0..=1.0).contains(&sat) {
        return Err(Error::param(format!("saturation {sat} outside [0, 1]")));
    }
    let mut out = image.clone();
    for (x, y) in mask.iter_set() {
        let [_, _, v] = rgb_to_hsv(image.get(x, y));
        out.put(x, y, hsv_to_rgb(hue, sat, v));
    }
    Ok(out)
}

/// Adds `delta` to the value of masked pixels, clamped to `[0, 1]`.
/// Scaling the RGB triple keeps hue and saturation where they are defined.
pub fn shift_value(image: &Image<f32>, mask: &Bitmap, delta: f64) -> Result<Image<f32>> {
    check_mask(image, mask)?;
    if !(-1.0..=1.0).contains(&delta) {
        return Err(Error::param(format!("value shift {delta} outside [-1, 1]")));
    }
    let mut out = image.clone();
    if delta == 0.0 {
        return Ok(out);
    }
    for (x, y) in mask.iter_set() {
        let p = image.get(x, y);
        let v = f64::from(p[0].max(p[1]).max(p[2]));
        let target = (v + delta).clamp(0.0, 1.0);
        let q = if v > 0.0 {
            let k = target / v;
            p.map(|c| (f64::from(c) * k).clamp(0.0, 1.0) as f32)
        } else {
            [target as f32; 3]
        };
        out.put(x, y, q);
    }
    Ok(out)
}

fn check_mask(image: &Image<f32>, mask: &Bitmap) -> Result<()> {
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(Error::param(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    Ok(())
}
