//! Escape-time rasters of fiber slices and their plain-text image formats.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{iterate, Verdict};
use crate::error::{Error, Result};
use crate::maps::SkewProduct;

/// Environment variable capping render worker threads; 0 or unset means automatic.
pub const THREADS_ENV: &str = "BAKER_SKEW_THREADS";
pub const MIN_RESOLUTION: usize = 16;

/// The slice being drawn: vary `z` at fixed `w`, or vary `w` at fixed `z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "plane", rename_all = "snake_case")]
pub enum Plane {
    Z { w: [f64; 2] },
    W { z: [f64; 2] },
}

#[derive(Clone, Debug)]
pub struct RenderJob {
    pub map: SkewProduct,
    pub plane: Plane,
    pub center: Complex64,
    pub width: f64,
    pub height: f64,
    pub px_w: usize,
    pub px_h: usize,
    pub max_iter: usize,
    pub escape_re: f64,
    pub return_radius: f64,
}

impl RenderJob {
    pub fn validate(&self) -> Result<()> {
        if self.px_w < MIN_RESOLUTION || self.px_h < MIN_RESOLUTION {
            return Err(Error::Config(format!(
                "resolution must be at least {MIN_RESOLUTION}x{MIN_RESOLUTION}, got {}x{}",
                self.px_w, self.px_h
            )));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::Config("window width and height must be positive".into()));
        }
        if !(self.escape_re > self.return_radius && self.return_radius > 0.0) {
            return Err(Error::Config("need escape_re > return_radius > 0".into()));
        }
        Ok(())
    }

    /// Point at the center of pixel `(col, row)`; row 0 is the top edge.
    pub fn pixel_point(&self, col: usize, row: usize) -> Complex64 {
        let x = self.center.re - self.width / 2.0 + (col as f64 + 0.5) * self.width / self.px_w as f64;
        let y = self.center.im + self.height / 2.0 - (row as f64 + 0.5) * self.height / self.px_h as f64;
        Complex64::new(x, y)
    }

    /// Classifies the orbit of the slice point `p`.
    pub fn classify(&self, p: Complex64) -> Pixel {
        let start = match self.plane {
            Plane::Z { w } => (p, Complex64::new(w[0], w[1])),
            Plane::W { z } => (Complex64::new(z[0], z[1]), p),
        };
        match iterate::<f64>(&self.map, start, self.max_iter, self.escape_re, self.return_radius) {
            Ok(trace) => match trace.verdict {
                Verdict::Escaped(k) => Pixel::Escaped(k),
                Verdict::Overflow(k) => Pixel::Overflow(k),
                Verdict::Returned(k) => Pixel::Returned(k),
                Verdict::BudgetExhausted => Pixel::Undecided,
            },
            Err(_) => Pixel::Undecided,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pixel {
    Escaped(usize),
    /// Left the representable range at step `k`; drawn as escaped.
    Overflow(usize),
    Returned(usize),
    Undecided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bucket {
    Escaped,
    Returned,
    Undecided,
}

impl Pixel {
    pub fn bucket(&self) -> Bucket {
        match self {
            Self::Escaped(_) | Self::Overflow(_) => Bucket::Escaped,
            Self::Returned(_) => Bucket::Returned,
            Self::Undecided => Bucket::Undecided,
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            Self::Escaped(k) | Self::Overflow(k) | Self::Returned(k) => k,
            Self::Undecided => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub max_iter: usize,
    /// Row-major, top row first.
    pub pixels: Vec<Pixel>,
}

impl ImageGrid {
    pub fn get(&self, col: usize, row: usize) -> Pixel {
        self.pixels[row * self.width + col]
    }
}

/// Worker count from [`THREADS_ENV`]; `None` leaves the choice to the pool.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) => Ok(None),
            Ok(n) => Ok(Some(n)),
            Err(_) => Err(Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got '{v}'"))),
        },
    }
}

/// Renders rows in parallel; the grid does not depend on the worker count.
pub fn render(job: &RenderJob) -> Result<ImageGrid> {
    job.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("cannot start render workers: {e}")))?;
    let rows: Vec<Vec<Pixel>> = pool.install(|| {
        (0..job.px_h)
            .into_par_iter()
            .map(|row| (0..job.px_w).map(|col| job.classify(job.pixel_point(col, row))).collect())
            .collect()
    });
    Ok(ImageGrid { width: job.px_w, height: job.px_h, max_iter: job.max_iter, pixels: rows.concat() })
}

/// `255 k / max_iter` rounded half up; 0 when `max_iter` is 0.
pub fn intensity(k: usize, max_iter: usize) -> u8 {
    if max_iter == 0 {
        return 0;
    }
    let k = k.min(max_iter) as u128;
    let m = max_iter as u128;
    ((510 * k + m) / (2 * m)) as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    /// Plain PGM (P2): undecided pixels are 0, decided pixels carry the
    /// step-count intensity.
    Gray,
    /// Plain PPM (P3): escaped `(I, 0, 255)`, returned `(0, I, 128)`,
    /// undecided `(0, 0, 0)`.
    Color,
}

pub fn encode(grid: &ImageGrid, palette: Palette) -> String {
    let mut out = String::new();
    let magic = if palette == Palette::Gray { "P2" } else { "P3" };
    let _ = writeln!(out, "{magic} {} {} 255", grid.width, grid.height);
    for row in grid.pixels.chunks(grid.width) {
        let cells: Vec<String> = row
            .iter()
            .map(|p| {
                let i = match p {
                    Pixel::Undecided => 0,
                    other => intensity(other.steps(), grid.max_iter),
                };
                match (palette, p.bucket()) {
                    (Palette::Gray, _) => i.to_string(),
                    (Palette::Color, Bucket::Escaped) => format!("{i} 0 255"),
                    (Palette::Color, Bucket::Returned) => format!("0 {i} 128"),
                    (Palette::Color, Bucket::Undecided) => "0 0 0".to_string(),
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    out
}

pub fn write_image(grid: &ImageGrid, path: &Path, palette: Palette) -> Result<()> {
    std::fs::write(path, encode(grid, palette))?;
    Ok(())
}

/// A decoded plain image: dimensions and per-pixel channel values.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedImage {
    pub palette: Palette,
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub values: Vec<Vec<u32>>,
}

impl DecodedImage {
    /// Classification buckets. Gray images separate decided from undecided
    /// pixels only; decided pixels read back as escaped.
    pub fn buckets(&self) -> Vec<Bucket> {
        self.values
            .iter()
            .map(|v| match (self.palette, v.as_slice()) {
                (Palette::Gray, [0]) => Bucket::Undecided,
                (Palette::Gray, _) => Bucket::Escaped,
                (Palette::Color, [_, _, 255]) => Bucket::Escaped,
                (Palette::Color, [_, _, 128]) => Bucket::Returned,
                _ => Bucket::Undecided,
            })
            .collect()
    }
}

pub fn decode(text: &str) -> Result<DecodedImage> {
    let mut tokens = text.split_whitespace();
    let bad = |what: &str| Error::Config(format!("malformed plain image: {what}"));
    let palette = match tokens.next() {
        Some("P2") => Palette::Gray,
        Some("P3") => Palette::Color,
        _ => return Err(bad("unknown magic")),
    };
    let mut header = [0usize; 3];
    for h in header.iter_mut() {
        *h = tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("header"))?;
    }
    let [width, height, maxval] = header;
    let channels = if palette == Palette::Gray { 1 } else { 3 };
    let mut values = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let mut px = Vec::with_capacity(channels);
        for _ in 0..channels {
            let v: u32 = tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("pixel data"))?;
            px.push(v);
        }
        values.push(px);
    }
    if tokens.next().is_some() {
        return Err(bad("trailing data"));
    }
    Ok(DecodedImage { palette, width, height, maxval: maxval as u32, values })
}

pub fn read_image(path: &Path) -> Result<DecodedImage> {
    decode(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{BaseMap, FatouMap, Perturbation};
    use proptest::prelude::*;

    fn job(max_iter: usize) -> RenderJob {
        RenderJob {
            map: SkewProduct {
                f: FatouMap::unit(),
                h: Perturbation::Zero,
                g: BaseMap::linear(Complex64::new(0.5, 0.0), 0.9).unwrap(),
            },
            plane: Plane::Z { w: [0.0, 0.0] },
            center: Complex64::new(5.0, 0.0),
            width: 8.0,
            height: 8.0,
            px_w: 16,
            px_h: 16,
            max_iter,
            escape_re: 20.0,
            return_radius: 0.1,
        }
    }

    #[test]
    fn right_half_plane_escapes() {
        let j = job(100);
        let grid = render(&j).unwrap();
        for row in 0..16 {
            for col in 0..16 {
                if j.pixel_point(col, row).re > std::f64::consts::LN_2 {
                    assert_eq!(grid.get(col, row).bucket(), Bucket::Escaped);
                }
            }
        }
    }

    #[test]
    fn zero_budget_is_undecided() {
        let grid = render(&job(0)).unwrap();
        assert!(grid.pixels.iter().all(|p| *p == Pixel::Undecided));
        let text = encode(&grid, Palette::Gray);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("P2 16 16 255"));
        let rest: Vec<&str> = lines.flat_map(|l| l.split_whitespace()).collect();
        assert_eq!(rest.len(), 256);
        assert!(rest.iter().all(|t| *t == "0"));
    }

    #[test]
    fn palette_rounding() {
        assert_eq!(intensity(1, 2), 128);
        assert_eq!(intensity(1, 510), 1);
        assert_eq!(intensity(1, 511), 0);
        assert_eq!(intensity(7, 7), 255);
        assert_eq!(intensity(3, 10), 77);
    }

    #[test]
    fn small_resolution_rejected() {
        let mut j = job(10);
        j.px_w = 8;
        assert!(render(&j).is_err());
    }

    #[test]
    fn color_round_trip() {
        let mut pixels = vec![Pixel::Undecided; 256];
        pixels[3] = Pixel::Escaped(4);
        pixels[17] = Pixel::Returned(1);
        pixels[40] = Pixel::Overflow(9);
        let grid = ImageGrid { width: 16, height: 16, max_iter: 10, pixels };
        let dec = decode(&encode(&grid, Palette::Color)).unwrap();
        let want: Vec<Bucket> = grid.pixels.iter().map(Pixel::bucket).collect();
        assert_eq!(dec.buckets(), want);
        assert_eq!(dec.values[3], vec![102, 0, 255]);
    }

    #[test]
    fn render_is_thread_count_independent() {
        let j = job(60);
        let a = render(&j).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b: Vec<Pixel> = pool.install(|| {
            (0..16 * 16).into_par_iter().map(|i| j.classify(j.pixel_point(i % 16, i / 16))).collect()
        });
        assert_eq!(a.pixels, b);
    }

    proptest! {
        #[test]
        fn gray_round_trip(steps in proptest::collection::vec(0usize..=40, 256)) {
            let pixels: Vec<Pixel> = steps.iter().map(|&k| if k == 0 { Pixel::Undecided } else { Pixel::Escaped(k) }).collect();
            let grid = ImageGrid { width: 16, height: 16, max_iter: 40, pixels };
            let dec = decode(&encode(&grid, Palette::Gray)).unwrap();
            let want: Vec<Bucket> = grid.pixels.iter().map(Pixel::bucket).collect();
            prop_assert_eq!(dec.buckets(), want);
            for (v, p) in dec.values.iter().zip(&grid.pixels) {
                prop_assert_eq!(v[0], intensity(p.steps(), 40) as u32);
            }
        }
    }
}
