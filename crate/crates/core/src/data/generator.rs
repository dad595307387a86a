use crate::error::{Error, Result};
use crate::seg::BinaryMask;
use crate::vision::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Style {
    Photo,
    LineDrawing,
    NoisyPhoto,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Photo, Style::LineDrawing, Style::NoisyPhoto];

    pub fn as_str(&self) -> &'static str {
        match self {
            Style::Photo => "photo",
            Style::LineDrawing => "line_drawing",
            Style::NoisyPhoto => "noisy_photo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }

    /// Per-pixel noise used when sampling specs for this style.
    pub fn default_sigma(&self) -> f64 {
        match self {
            Style::Photo => 0.03,
            Style::LineDrawing => 0.0,
            Style::NoisyPhoto => 0.12,
        }
    }
}

impl std::fmt::Display for Style {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters of one procedural facade.
///
/// Windows sit on a `rows × cols` grid inside the margin. Each window takes a
/// `fill` fraction of its cell per axis and keeps at least one pixel of wall
/// on every side, so no two windows touch.
#[derive(Debug, Clone, PartialEq)]
pub struct FacadeSpec {
    pub height: usize,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
    pub margin: f64,
    pub fill: (f64, f64),
    pub wall_intensity: (f64, f64),
    pub window_intensity: (f64, f64),
    pub noise_sigma: f64,
    pub style: Style,
}

impl Default for FacadeSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            rows: 2,
            cols: 3,
            margin: 0.08,
            fill: (0.55, 0.85),
            wall_intensity: (0.5, 0.8),
            window_intensity: (0.1, 0.3),
            noise_sigma: Style::Photo.default_sigma(),
            style: Style::Photo,
        }
    }
}

pub const MAX_ROWS: usize = 4;
pub const MAX_COLS: usize = 5;

/// Smallest cell side that leaves room for a 2-pixel window plus insets.
const MIN_CELL: usize = 4;

struct Layout {
    margin_y: usize,
    margin_x: usize,
    cell_h: f64,
    cell_w: f64,
}

impl FacadeSpec {
    /// Draws a spec for `style`: 1–3 rows and columns, other fields at defaults.
    pub fn sample(rng: &mut impl Rng, style: Style, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            rows: rng.random_range(1..=3),
            cols: rng.random_range(1..=3),
            noise_sigma: style.default_sigma(),
            style,
            ..Self::default()
        }
    }

    fn layout(&self) -> Result<Layout> {
        let bad = |m: String| Err(Error::SpecInfeasible(m));
        if self.rows == 0 || self.rows > MAX_ROWS || self.cols == 0 || self.cols > MAX_COLS {
            return bad(format!("{}x{} window grid outside 1..={MAX_ROWS} x 1..={MAX_COLS}", self.rows, self.cols));
        }
        let unit = |r: (f64, f64)| (0.0..=1.0).contains(&r.0) && (0.0..=1.0).contains(&r.1) && r.0 <= r.1;
        if !unit(self.wall_intensity) || !unit(self.window_intensity) || !unit(self.fill) || self.fill.0 <= 0.0 {
            return bad("intensity and fill ranges must be ordered subsets of [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return bad(format!("margin fraction {}", self.margin));
        }
        let margin_y = (self.margin * self.height as f64).round() as usize;
        let margin_x = (self.margin * self.width as f64).round() as usize;
        let inner_h = self.height.saturating_sub(2 * margin_y);
        let inner_w = self.width.saturating_sub(2 * margin_x);
        let cell_h = inner_h as f64 / self.rows as f64;
        let cell_w = inner_w as f64 / self.cols as f64;
        if (cell_h as usize) < MIN_CELL || (cell_w as usize) < MIN_CELL {
            return bad(format!(
                "{}x{} windows do not fit in {}x{} pixels",
                self.rows, self.cols, self.height, self.width
            ));
        }
        Ok(Layout { margin_y, margin_x, cell_h, cell_w })
    }

    pub fn validate(&self) -> Result<()> {
        self.layout().map(|_| ())
    }
}

/// A rendered facade with its two complementary class masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Facade {
    pub image: ImageTensor,
    pub window: BinaryMask,
    pub wall: BinaryMask,
    pub style: Style,
}

/// `(start, len)` of one window along an axis, inside its cell with a 1-pixel inset.
fn place(rng: &mut ChaCha8Rng, origin: usize, cell: f64, index: usize, fill: (f64, f64)) -> (usize, usize) {
    let start = origin + (index as f64 * cell) as usize;
    let room = cell as usize - 2;
    let frac = if fill.0 < fill.1 { rng.random_range(fill.0..=fill.1) } else { fill.0 };
    let len = ((frac * cell).round() as usize).clamp(2, room);
    let jitter = rng.random_range(0..=room - len);
    (start + 1 + jitter, len)
}

/// Renders `spec` deterministically from `seed`.
pub fn generate_facade(spec: &FacadeSpec, seed: u64) -> Result<Facade> {
    let layout = spec.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let mut window = vec![0u8; h * w];
    let mut rects = Vec::with_capacity(spec.rows * spec.cols);
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let (x0, ww) = place(&mut rng, layout.margin_x, layout.cell_w, c, spec.fill);
            let (y0, hh) = place(&mut rng, layout.margin_y, layout.cell_h, r, spec.fill);
            for y in y0..y0 + hh {
                window[y * w + x0..y * w + x0 + ww].fill(1);
            }
            rects.push((y0, x0, hh, ww));
        }
    }

    let draw = |rng: &mut ChaCha8Rng, range: (f64, f64)| {
        if range.0 < range.1 {
            rng.random_range(range.0..=range.1)
        } else {
            range.0
        }
    };
    let wall_v = draw(&mut rng, spec.wall_intensity);
    let window_v = draw(&mut rng, spec.window_intensity);

    let mut data = vec![0.0; h * w * 3];
    match spec.style {
        Style::LineDrawing => {
            data.fill(1.0);
            for &(y0, x0, hh, ww) in &rects {
                for y in y0..y0 + hh {
                    for x in x0..x0 + ww {
                        if y == y0 || y == y0 + hh - 1 || x == x0 || x == x0 + ww - 1 {
                            data[(y * w + x) * 3..(y * w + x) * 3 + 3].fill(0.0);
                        }
                    }
                }
            }
        }
        Style::Photo | Style::NoisyPhoto => {
            let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("finite sigma"));
            for (i, px) in data.chunks_exact_mut(3).enumerate() {
                let base = if window[i] == 1 { window_v } else { wall_v };
                for v in px {
                    let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                    *v = (base + n).clamp(0.0, 1.0);
                }
            }
        }
    }

    let window = BinaryMask::new(h, w, window)?;
    let wall = window.complement();
    Ok(Facade { image: ImageTensor::new(h, w, data)?, window, wall, style: spec.style })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn components(mask: &BinaryMask) -> usize {
        let (h, w) = (mask.height, mask.width);
        let mut seen = vec![false; h * w];
        let mut count = 0;
        for start in 0..h * w {
            if mask.data[start] == 0 || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                let mut visit = |j: usize| {
                    if mask.data[j] == 1 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
            }
        }
        count
    }

    #[test]
    fn one_component_per_window() {
        for seed in 0..20 {
            let f = generate_facade(&FacadeSpec::default(), seed).unwrap();
            assert_eq!(components(&f.window), 6);
        }
        let dense = FacadeSpec { rows: 4, cols: 5, fill: (0.3, 1.0), ..FacadeSpec::default() };
        for seed in 0..20 {
            assert_eq!(components(&generate_facade(&dense, seed).unwrap().window), 20);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        for style in Style::ALL {
            let spec = FacadeSpec { style, noise_sigma: style.default_sigma(), ..FacadeSpec::default() };
            assert_eq!(generate_facade(&spec, 9).unwrap(), generate_facade(&spec, 9).unwrap());
        }
        let spec = FacadeSpec::default();
        assert_ne!(generate_facade(&spec, 1).unwrap().image, generate_facade(&spec, 2).unwrap().image);
    }

    #[test]
    fn masks_partition_the_frame() {
        let f = generate_facade(&FacadeSpec::default(), 3).unwrap();
        for (a, b) in f.window.data.iter().zip(&f.wall.data) {
            assert_eq!(a + b, 1);
        }
    }

    #[test]
    fn line_drawing_is_white_with_dark_outlines() {
        let spec = FacadeSpec { style: Style::LineDrawing, noise_sigma: 0.0, ..FacadeSpec::default() };
        let f = generate_facade(&spec, 4).unwrap();
        assert_eq!(f.image.pixel(0, 0), [1.0; 3]);
        let dark = f.image.data.chunks(3).filter(|p| p[0] == 0.0).count();
        assert!(dark > 0 && dark < f.window.count_ones());
    }

    #[test]
    fn infeasible_specs() {
        let tiny = FacadeSpec { height: 16, width: 16, rows: 4, cols: 5, ..FacadeSpec::default() };
        assert!(matches!(generate_facade(&tiny, 0), Err(Error::SpecInfeasible(_))));
        let bad_range = FacadeSpec { wall_intensity: (0.9, 0.2), ..FacadeSpec::default() };
        assert!(bad_range.validate().is_err());
        assert!(FacadeSpec { rows: 5, ..FacadeSpec::default() }.validate().is_err());
    }

    #[test]
    fn style_names_round_trip() {
        for s in Style::ALL {
            assert_eq!(Style::parse(s.as_str()), Some(s));
        }
        assert_eq!(Style::parse("sketch"), None);
    }
}
