//! Synthetic data: a captioned shapes world for pretraining the toy
//! text-to-image model, and the moving-square source video.

use rand::Rng;

use crate::error::Result;
use crate::tensor::Tensor;
use crate::video::VideoFrames;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Diamond];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Diamond => "diamond",
        }
    }

    /// Coverage test in units of the half-size.
    fn contains(self, dy: f64, dx: f64) -> bool {
        match self {
            Shape::Square => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            Shape::Circle => dy * dy + dx * dx <= 1.0,
            Shape::Diamond => dy.abs() + dx.abs() <= 1.0,
        }
    }
}

pub const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.85, 0.1]),
];

pub const BACKGROUND: [f64; 3] = [0.12, 0.12, 0.15];

pub fn color(name: &str) -> Option<[f64; 3]> {
    COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// Draw one shape; `top`/`left` is the bounding-box corner, `size` its side.
pub fn render(
    shape: Shape,
    rgb: [f64; 3],
    top: f64,
    left: f64,
    size: f64,
    height: usize,
    width: usize,
) -> Tensor {
    let mut img = Tensor::zeros(&[3, height, width]);
    let half = size / 2.0;
    let (cy, cx) = (top + half, left + half);
    let data = img.data_mut();
    for r in 0..height {
        for c in 0..width {
            // pixel centers
            let dy = (r as f64 + 0.5 - cy) / half;
            let dx = (c as f64 + 0.5 - cx) / half;
            let inside = shape.contains(dy, dx);
            for ch in 0..3 {
                data[ch * height * width + r * width + c] =
                    if inside { rgb[ch] } else { BACKGROUND[ch] };
            }
        }
    }
    img
}

/// Random captioned images of single shapes.
#[derive(Clone, Copy, Debug)]
pub struct ShapeWorld {
    pub height: usize,
    pub width: usize,
    pub size: f64,
}

impl Default for ShapeWorld {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            size: 10.0,
        }
    }
}

impl ShapeWorld {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Tensor, String) {
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let (name, rgb) = COLORS[rng.random_range(0..COLORS.len())];
        let max_top = self.height as f64 - self.size;
        let max_left = self.width as f64 - self.size;
        // even offsets keep shapes aligned with 2×2 latent cells
        let top = 2.0 * (rng.random_range(0.0..=max_top) / 2.0).floor();
        let left = 2.0 * (rng.random_range(0.0..=max_left) / 2.0).floor();
        let img = render(shape, rgb, top, left, self.size, self.height, self.width);
        (img, format!("a photo of a {name} {}", shape.word()))
    }
}

/// Parameters of the moving-shape source video.
#[derive(Clone, Copy, Debug)]
pub struct MovingShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub size: f64,
    pub top: f64,
    pub left: f64,
    /// Horizontal displacement per frame in pixels.
    pub step: f64,
    pub shape: Shape,
    pub rgb: [f64; 3],
}

impl Default for MovingShape {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            size: 10.0,
            top: 10.0,
            left: 2.0,
            step: 2.0,
            shape: Shape::Square,
            rgb: COLORS[0].1,
        }
    }
}

impl MovingShape {
    pub fn render(&self) -> Result<VideoFrames> {
        let frames: Vec<Tensor> = (0..self.frames)
            .map(|i| {
                render(
                    self.shape,
                    self.rgb,
                    self.top,
                    self.left + self.step * i as f64,
                    self.size,
                    self.height,
                    self.width,
                )
            })
            .collect();
        VideoFrames::new(Tensor::stack(&frames)?)
    }

    /// Same shape held at its first-frame position.
    pub fn render_static(&self) -> Result<VideoFrames> {
        MovingShape { step: 0.0, ..*self }.render()
    }

    /// Binary `[h, w]` occupancy of frame `i` on a grid downsampled by
    /// `height / h` (a cell counts when its center is covered).
    pub fn occupancy(&self, i: usize, h: usize, w: usize) -> Vec<bool> {
        let (fy, fx) = (self.height as f64 / h as f64, self.width as f64 / w as f64);
        let half = self.size / 2.0;
        let (cy, cx) = (self.top + half, self.left + self.step * i as f64 + half);
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let y = (r as f64 + 0.5) * fy;
                let x = (c as f64 + 0.5) * fx;
                out.push(self.shape.contains((y - cy) / half, (x - cx) / half));
            }
        }
        out
    }

    /// Ground-truth moving region of frame `i`: the cells covered by the
    /// shape, each of which corresponds to a displaced point of frame 0.
    /// Empty for frame 0 and for a static shape.
    pub fn moving_region(&self, i: usize, h: usize, w: usize) -> Vec<bool> {
        if i == 0 || self.step == 0.0 {
            return vec![false; h * w];
        }
        self.occupancy(i, h, w)
    }

    pub fn source_prompt(&self) -> String {
        let name = COLORS
            .iter()
            .find(|(_, c)| *c == self.rgb)
            .map(|(n, _)| *n)
            .unwrap_or("red");
        format!("a photo of a {name} {} sliding", self.shape.word())
    }
}
