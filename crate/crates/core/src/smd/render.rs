//! Scaling, rotating and compositing RGBA occluder sprites.

use crate::image::ImageTensor;

/// Alpha at or above this counts as occluded.
pub const ALPHA_THRESHOLD: f64 = 0.5;

/// A transformed sprite cropped to its non-transparent bounding box.
#[derive(Debug, Clone)]
pub struct RenderedSprite {
    pub height: usize,
    pub width: usize,
    /// Straight (non-premultiplied) RGBA, row-major.
    pub rgba: Vec<f64>,
}

impl RenderedSprite {
    pub fn alpha(&self, y: usize, x: usize) -> f64 {
        self.rgba[(y * self.width + x) * 4 + 3]
    }

    pub fn occludes(&self, y: usize, x: usize) -> bool {
        self.alpha(y, x) >= ALPHA_THRESHOLD
    }

    pub fn opaque_count(&self) -> usize {
        self.rgba.chunks_exact(4).filter(|px| px[3] >= ALPHA_THRESHOLD).count()
    }
}

/// Resamples `sprite` (4 channels) scaled by `factor` and rotated by `degrees`
/// about its centre, using premultiplied bilinear interpolation.
///
/// Returns `None` when nothing of the sprite survives the transform.
pub fn render_sprite(sprite: &ImageTensor, factor: f64, degrees: f64) -> Option<RenderedSprite> {
    debug_assert_eq!(sprite.channels(), 4);
    if !(factor > 0.0) || !factor.is_finite() {
        return None;
    }
    let (sh, sw) = (sprite.height() as f64, sprite.width() as f64);
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (sw_f, sh_f) = (sw * factor, sh * factor);
    let canvas_w = ((sw_f * cos.abs() + sh_f * sin.abs()) - 1e-9).ceil().max(1.0) as usize;
    let canvas_h = ((sw_f * sin.abs() + sh_f * cos.abs()) - 1e-9).ceil().max(1.0) as usize;

    let mut rgba = vec![0.0; canvas_h * canvas_w * 4];
    let (cw2, ch2) = (canvas_w as f64 / 2.0, canvas_h as f64 / 2.0);
    for v in 0..canvas_h {
        for u in 0..canvas_w {
            let px = u as f64 + 0.5 - cw2;
            let py = v as f64 + 0.5 - ch2;
            let rx = cos * px + sin * py;
            let ry = -sin * px + cos * py;
            let sx = rx / factor + sw / 2.0 - 0.5;
            let sy = ry / factor + sh / 2.0 - 0.5;
            let sample = bilinear_premultiplied(sprite, sy, sx);
            let a = sample[3];
            if a > 0.0 {
                let o = (v * canvas_w + u) * 4;
                for c in 0..3 {
                    rgba[o + c] = (sample[c] / a).clamp(0.0, 1.0);
                }
                rgba[o + 3] = a.clamp(0.0, 1.0);
            }
        }
    }
    crop_to_content(canvas_h, canvas_w, rgba)
}

fn bilinear_premultiplied(img: &ImageTensor, y: f64, x: f64) -> [f64; 4] {
    let (h, w) = (img.height() as isize, img.width() as isize);
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return [0.0; 4];
    }
    let y0 = y.floor() as isize;
    let x0 = x.floor() as isize;
    let ty = y - y0 as f64;
    let tx = x - x0 as f64;
    let mut out = [0.0; 4];
    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            let wgt = wy * wx;
            if wgt == 0.0 || yy < 0 || xx < 0 || yy >= h || xx >= w {
                continue;
            }
            let px = img.pixel(yy as usize, xx as usize);
            let a = px[3];
            for c in 0..3 {
                out[c] += wgt * px[c] * a;
            }
            out[3] += wgt * a;
        }
    }
    out
}

fn crop_to_content(h: usize, w: usize, rgba: Vec<f64>) -> Option<RenderedSprite> {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    let mut any_opaque = false;
    for y in 0..h {
        for x in 0..w {
            let a = rgba[(y * w + x) * 4 + 3];
            if a > 0.0 {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
                any_opaque |= a >= ALPHA_THRESHOLD;
            }
        }
    }
    if !any_opaque {
        return None;
    }
    let (ch, cw) = (y1 - y0, x1 - x0);
    let mut out = Vec::with_capacity(ch * cw * 4);
    for y in y0..y1 {
        let start = (y * w + x0) * 4;
        out.extend_from_slice(&rgba[start..start + cw * 4]);
    }
    Some(RenderedSprite {
        height: ch,
        width: cw,
        rgba: out,
    })
}

/// Alpha-composites the sprite with its top-left corner at `(top, left)`.
///
/// Pixels where the sprite is fully transparent are left untouched.
pub fn composite(dst: &mut ImageTensor, sprite: &RenderedSprite, top: usize, left: usize) {
    let c = dst.channels();
    let width = dst.width();
    let data = dst.data_mut();
    for y in 0..sprite.height {
        for x in 0..sprite.width {
            let s = &sprite.rgba[(y * sprite.width + x) * 4..][..4];
            let a = s[3];
            if a == 0.0 {
                continue;
            }
            let o = ((top + y) * width + left + x) * c;
            match c {
                1 => {
                    let lum = (s[0] + s[1] + s[2]) / 3.0;
                    data[o] = (a * lum + (1.0 - a) * data[o]).clamp(0.0, 1.0);
                }
                _ => {
                    for k in 0..3 {
                        data[o + k] = (a * s[k] + (1.0 - a) * data[o + k]).clamp(0.0, 1.0);
                    }
                    if c == 4 {
                        data[o + 3] = (a + (1.0 - a) * data[o + 3]).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opaque_square(side: usize) -> ImageTensor {
        ImageTensor::from_fn(side, side, 4, |_, _, c| if c == 3 { 1.0 } else { 0.25 }).unwrap()
    }

    #[test]
    fn identity_transform_is_exact() {
        let sprite = opaque_square(32);
        let r = render_sprite(&sprite, 1.0, 0.0).unwrap();
        assert_eq!((r.height, r.width), (32, 32));
        assert_eq!(r.opaque_count(), 1024);
        assert!(r.rgba.chunks(4).all(|px| px == [0.25, 0.25, 0.25, 1.0]));
    }

    #[test]
    fn rotation_preserves_area_roughly() {
        let sprite = opaque_square(40);
        for deg in [17.0, 45.0, 90.0, 233.0] {
            let r = render_sprite(&sprite, 1.0, deg).unwrap();
            let area = r.opaque_count() as f64;
            assert!((area - 1600.0).abs() / 1600.0 < 0.08, "{deg}: {area}");
        }
    }

    #[test]
    fn scaling_changes_area_quadratically() {
        let sprite = opaque_square(40);
        let r = render_sprite(&sprite, 0.5, 0.0).unwrap();
        assert_eq!((r.height, r.width), (20, 20));
    }

    #[test]
    fn transparent_sprite_renders_nothing() {
        let sprite = ImageTensor::filled(8, 8, 4, 0.0).unwrap();
        assert!(render_sprite(&sprite, 1.0, 30.0).is_none());
    }

    #[test]
    fn composite_skips_transparent_pixels() {
        let mut bg = ImageTensor::filled(4, 4, 3, 0.3).unwrap();
        let sprite = RenderedSprite {
            height: 1,
            width: 2,
            rgba: vec![1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.0],
        };
        composite(&mut bg, &sprite, 1, 1);
        assert_eq!(bg.pixel(1, 1), &[1.0, 1.0, 1.0]);
        assert_eq!(bg.pixel(1, 2), &[0.3, 0.3, 0.3]);
    }
}
