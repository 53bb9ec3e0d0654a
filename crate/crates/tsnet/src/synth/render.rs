//! Text line rasterization, masking augmentation, and PGM image I/O.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::ChaCha8Rng;
use crate::tensor::Tensor;

use super::font::{Font, GLYPH_H, GLYPH_W};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderParams {
    /// Output image height in pixels.
    pub height: usize,
    /// Integer upscaling of the 5x7 glyphs.
    pub scale: usize,
    /// Blank columns on the left and right edges.
    pub margin: usize,
    /// Max per-character horizontal offset in pixels (uniform in +-jitter).
    pub jitter: usize,
    /// Ink intensity is drawn per line from U(contrast_min, 1).
    pub contrast_min: f64,
    /// Per-line noise sigma is drawn from U(0, max_noise).
    pub max_noise: f64,
    /// Widths are padded up to a multiple of this.
    pub pad_multiple: usize,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            height: 32,
            scale: 2,
            margin: 4,
            jitter: 1,
            contrast_min: 0.5,
            max_noise: 0.1,
            pad_multiple: 16,
        }
    }
}

impl RenderParams {
    /// Horizontal space occupied by one character cell.
    pub fn cell_width(&self) -> usize {
        (GLYPH_W + 1) * self.scale
    }

    /// Noise- and jitter-free rendering, for layout tests.
    pub fn clean(self) -> Self {
        RenderParams {
            jitter: 0,
            contrast_min: 1.0,
            max_noise: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.pad_multiple == 0 {
            return Err(Error::Config("render scale/pad_multiple must be >= 1".into()));
        }
        if self.height < GLYPH_H * self.scale {
            return Err(Error::Config(format!(
                "render height {} below glyph height {}",
                self.height,
                GLYPH_H * self.scale
            )));
        }
        if self.margin < self.jitter {
            return Err(Error::Config("render margin must cover jitter".into()));
        }
        if !(0.0..=1.0).contains(&self.contrast_min) || self.contrast_min == 0.0 {
            return Err(Error::Config("contrast_min must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.max_noise) {
            return Err(Error::Config("max_noise must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Snaps every pixel to the 8-bit grid so in-memory images equal their PGM
/// round trip bit for bit.
fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Rasterizes `text` onto a `[height, W]` image with ink on a black
/// background, W padded right to `pad_multiple`. Draw order of the rng:
/// contrast, per-character jitter, noise sigma, per-pixel noise.
pub fn render_line(
    text: &str,
    font: &Font,
    params: &RenderParams,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    params.validate()?;
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(Error::Dataset("cannot render empty text".into()));
    }
    for &c in &chars {
        if !font.has(c) {
            return Err(Error::Dataset(format!("no glyph for character {c:?}")));
        }
    }
    let (h, cell) = (params.height, params.cell_width());
    let raw_w = 2 * params.margin + chars.len() * cell;
    let w = raw_w.div_ceil(params.pad_multiple) * params.pad_multiple;

    let ink = rng.gen_range(params.contrast_min..=1.0);
    let mut img = vec![0f64; h * w];
    let y0 = (h - GLYPH_H * params.scale) / 2;
    for (i, &c) in chars.iter().enumerate() {
        let dx = if params.jitter == 0 {
            0
        } else {
            rng.gen_range(-(params.jitter as i64)..=params.jitter as i64)
        };
        let x0 = (params.margin + i * cell) as i64 + dx;
        let glyph = font.glyph(c).expect("checked above");
        for (r, &row) in glyph.iter().enumerate() {
            for x in 0..GLYPH_W {
                if row >> x & 1 == 0 {
                    continue;
                }
                for sy in 0..params.scale {
                    for sx in 0..params.scale {
                        let py = y0 + r * params.scale + sy;
                        let px = x0 + (x * params.scale + sx) as i64;
                        if px >= 0 && (px as usize) < w {
                            img[py * w + px as usize] = ink;
                        }
                    }
                }
            }
        }
    }

    let sigma = rng.gen_range(0.0..=params.max_noise);
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("sigma > 0");
        for v in img.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    Tensor::from_vec(&[h, w], img.into_iter().map(quantize).collect())
}

/// With probability `rate`, overwrites one horizontal span of width
/// U(0.5, 2)*char_width (capped at a quarter of the image) with uniform
/// noise. The paper uses this to force the recognizer to model language
/// rather than read purely glyph by glyph.
pub fn mask_augment(
    image: &Tensor<f32>,
    char_width: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = image.clone();
    if rng.gen_range(0.0..1.0) >= rate {
        return out;
    }
    let span = (rng.gen_range(0.5..=2.0) * char_width as f64).round() as usize;
    let span = span.clamp(1, (w / 4).max(1));
    let x0 = rng.gen_range(0..=w - span);
    let data = out.data_mut();
    for y in 0..h {
        for x in x0..x0 + span {
            data[y * w + x] = rng.gen_range(0.0..=1.0);
        }
    }
    out
}

/// Binary 8-bit PGM bytes for a `[H, W]` image with values in [0, 1].
pub fn pgm_bytes(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let sh = image.shape();
    if sh.len() != 2 {
        return Err(Error::Shape(format!("pgm wants [H,W], got {sh:?}")));
    }
    let (h, w) = (sh[0], sh[1]);
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n").expect("vec write");
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let bytes = pgm_bytes(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |m: &str| Error::Dataset(format!("pgm: {m}"));
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let w: usize = token()?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token()?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token()?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    let data_start = pos + 1;
    if bytes.len() < data_start + w * h {
        return Err(bad("truncated pixel data"));
    }
    let data = bytes[data_start..data_start + w * h]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Tensor::from_vec(&[h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn clean() -> RenderParams {
        RenderParams::default().clean()
    }

    #[test]
    fn double_letter_is_two_shifted_copies() {
        let font = Font::builtin();
        let mut r1 = rng::stream(0, &[1]);
        let mut r2 = rng::stream(0, &[2]);
        let one = render_line("a", font, &clean(), &mut r1).unwrap();
        let two = render_line("aa", font, &clean(), &mut r2).unwrap();
        let p = clean();
        let (h, cell, m) = (p.height, p.cell_width(), p.margin);
        let (w1, w2) = (one.shape()[1], two.shape()[1]);
        for y in 0..h {
            for x in 0..cell {
                let v = one.data()[y * w1 + (m + x).min(w1 - 1)];
                assert_eq!(two.data()[y * w2 + m + x], v);
                assert_eq!(two.data()[y * w2 + m + cell + x], v);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let font = Font::builtin();
        let p = RenderParams::default();
        let a = render_line("abc def", font, &p, &mut rng::stream(9, &[7])).unwrap();
        let b = render_line("abc def", font, &p, &mut rng::stream(9, &[7])).unwrap();
        assert_eq!(a, b);
        let c = render_line("abc def", font, &p, &mut rng::stream(9, &[8])).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn values_stay_in_unit_range_and_quantized() {
        let font = Font::builtin();
        let p = RenderParams {
            max_noise: 0.1,
            ..RenderParams::default()
        };
        for s in 0..1000u64 {
            let img = render_line("abc", font, &p, &mut rng::stream(s, &[0])).unwrap();
            for &v in img.data() {
                assert!((0.0..=1.0).contains(&v), "seed {s}: {v}");
                let scaled = f64::from(v) * 255.0;
                assert!((scaled - scaled.round()).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn width_is_padded_and_height_fixed() {
        let font = Font::builtin();
        let p = RenderParams::default();
        for text in ["a", "abcd", "abc defgh ij"] {
            let img = render_line(text, font, &p, &mut rng::stream(0, &[0])).unwrap();
            assert_eq!(img.shape()[0], 32);
            assert_eq!(img.shape()[1] % p.pad_multiple, 0);
            assert!(img.shape()[1] >= 2 * p.margin + text.chars().count() * p.cell_width());
        }
    }

    #[test]
    fn unknown_glyph_and_empty_text_error() {
        let font = Font::builtin();
        let p = RenderParams::default();
        assert!(render_line("aXc", font, &p, &mut rng::stream(0, &[0])).is_err());
        assert!(render_line("", font, &p, &mut rng::stream(0, &[0])).is_err());
    }

    #[test]
    fn mask_rate_zero_is_identity() {
        let font = Font::builtin();
        let img = render_line("abcdef", font, &clean(), &mut rng::stream(1, &[0])).unwrap();
        let masked = mask_augment(&img, 12, 0.0, &mut rng::stream(2, &[0]));
        assert_eq!(img, masked);
    }

    #[test]
    fn mask_respects_cap_and_fires() {
        let font = Font::builtin();
        let img = render_line("abcdef", font, &clean(), &mut rng::stream(1, &[0])).unwrap();
        let w = img.shape()[1];
        let mut fired = 0usize;
        for s in 0..1000u64 {
            let masked = mask_augment(&img, 12, 0.5, &mut rng::stream(s, &[1]));
            let changed_cols: usize = (0..w)
                .filter(|&x| (0..img.shape()[0]).any(|y| masked.data()[y * w + x] != img.data()[y * w + x]))
                .count();
            assert!(changed_cols <= w / 4, "seed {s}: {changed_cols} cols");
            if changed_cols > 0 {
                fired += 1;
            }
        }
        assert!(fired > 350 && fired < 650, "fired {fired}/1000");
        let a = mask_augment(&img, 12, 0.5, &mut rng::stream(3, &[1]));
        let b = mask_augment(&img, 12, 0.5, &mut rng::stream(3, &[1]));
        assert_eq!(a, b);
    }

    #[test]
    fn pgm_round_trip_is_exact() {
        let font = Font::builtin();
        let img = render_line("abc", font, &RenderParams::default(), &mut rng::stream(5, &[0]))
            .unwrap();
        let bytes = pgm_bytes(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n"));
        let back = parse_pgm(&bytes).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn pgm_parser_rejects_garbage() {
        assert!(parse_pgm(b"P2\n2 2\n255\n").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00\x01").is_err());
        assert!(parse_pgm(b"P5\n2 2\n65535\n\x00\x01\x02\x03").is_err());
        let ok = parse_pgm(b"P5\n# comment\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(ok.shape(), &[1, 2]);
        assert_eq!(ok.data()[1], 1.0);
    }
}
