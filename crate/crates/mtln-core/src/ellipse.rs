//! Ellipse geometry: parametric points, mask rasterization, moment-based
//! fitting, perimeter, and boundary distance maps.
//!
//! Coordinates are (x, y) with x along columns and y along rows; integer
//! coordinates are pixel centers. All geometry runs in `f64`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum GeomError {
    /// Rasterization needs at least 1-pixel axes.
    AxesTooSmall { a: f64, b: f64 },
    NonPositiveAxes { a: f64, b: f64 },
    /// Moment fitting needs at least 5 foreground pixels.
    TooFewForeground(usize),
    /// All foreground pixels are collinear; no ellipse is recoverable.
    DegenerateMask,
    /// Distance to a boundary needs a mask that is neither empty nor full.
    NoBoundary,
    NonPositivePixelSize(f64),
    /// Masks hold strictly 0 or 1.
    NonBinaryValue(u8),
    DimMismatch(String),
}

impl fmt::Display for GeomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeomError::AxesTooSmall { a, b } => {
                write!(f, "ellipse axes ({a}, {b}) below the 1-pixel minimum")
            }
            GeomError::NonPositiveAxes { a, b } => {
                write!(f, "ellipse axes ({a}, {b}) must be positive")
            }
            GeomError::TooFewForeground(n) => {
                write!(f, "mask has {n} foreground pixels; fitting needs at least 5")
            }
            GeomError::DegenerateMask => write!(f, "foreground is collinear; cannot fit"),
            GeomError::NoBoundary => write!(f, "mask is empty or full; no boundary exists"),
            GeomError::NonPositivePixelSize(p) => write!(f, "pixel size {p} must be positive"),
            GeomError::NonBinaryValue(v) => write!(f, "mask value {v} is not 0 or 1"),
            GeomError::DimMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
        }
    }
}

impl core::error::Error for GeomError {}

pub type Result<T> = core::result::Result<T, GeomError>;

/// Ellipse with center `(cx, cy)`, semi-axes `a >= b > 0`, and major-axis
/// rotation `theta` in `[0, pi)` measured from the +x axis.
///
/// Units are whatever the caller feeds in (pixels throughout this crate);
/// [`EllipseParams::normalized`] converts to the unit square for losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseParams {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl EllipseParams {
    /// Restores the invariants `a >= b` and `theta in [0, pi)`. Idempotent.
    pub fn canonical(mut self) -> Self {
        if self.b > self.a {
            core::mem::swap(&mut self.a, &mut self.b);
            self.theta += PI / 2.0;
        }
        self.theta = self.theta.rem_euclid(PI);
        if self.theta >= PI {
            // rem_euclid can return exactly pi when the input is a tiny
            // negative number.
            self.theta = 0.0;
        }
        self
    }

    /// Point on the ellipse at parameter `t`: center + R(theta) * (a cos t,
    /// b sin t).
    pub fn point(&self, t: f64) -> (f64, f64) {
        let (st, ct) = (libm::sin(self.theta), libm::cos(self.theta));
        let (px, py) = (self.a * libm::cos(t), self.b * libm::sin(t));
        (self.cx + ct * px - st * py, self.cy + st * px + ct * py)
    }

    /// Left side of the implicit equation: < 1 inside, 1 on the boundary.
    pub fn implicit(&self, x: f64, y: f64) -> f64 {
        let (st, ct) = (libm::sin(self.theta), libm::cos(self.theta));
        let (u, v) = (x - self.cx, y - self.cy);
        let xr = ct * u + st * v;
        let yr = -st * u + ct * v;
        (xr / self.a) * (xr / self.a) + (yr / self.b) * (yr / self.b)
    }

    /// Parameters mapped to the unit square: `[cx/w, cy/h, a/w, b/h,
    /// theta/pi]`. Resolution-independent, so resizing an image leaves them
    /// unchanged.
    pub fn normalized(&self, w: usize, h: usize) -> [f64; 5] {
        [
            self.cx / w as f64,
            self.cy / h as f64,
            self.a / w as f64,
            self.b / h as f64,
            self.theta / PI,
        ]
    }

    /// Inverse of [`EllipseParams::normalized`].
    pub fn from_normalized(v: [f64; 5], w: usize, h: usize) -> Self {
        EllipseParams {
            cx: v[0] * w as f64,
            cy: v[1] * h as f64,
            a: v[2] * w as f64,
            b: v[3] * h as f64,
            theta: v[4] * PI,
        }
        .canonical()
    }

    /// Ramanujan's second perimeter approximation:
    /// `pi (a+b) (1 + 3h / (10 + sqrt(4 - 3h)))` with `h = ((a-b)/(a+b))^2`.
    pub fn perimeter(&self) -> Result<f64> {
        if self.a <= 0.0 || self.b <= 0.0 {
            return Err(GeomError::NonPositiveAxes { a: self.a, b: self.b });
        }
        let h = ((self.a - self.b) / (self.a + self.b)).powi(2);
        Ok(PI * (self.a + self.b) * (1.0 + 3.0 * h / (10.0 + libm::sqrt(4.0 - 3.0 * h))))
    }

    /// Perimeter scaled to millimetres; the head-circumference readout.
    pub fn circumference_mm(&self, pixel_size_mm: f64) -> Result<f64> {
        if pixel_size_mm <= 0.0 {
            return Err(GeomError::NonPositivePixelSize(pixel_size_mm));
        }
        Ok(self.perimeter()? * pixel_size_mm)
    }
}

/// H x W mask of strictly 0/1 bytes, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(GeomError::DimMismatch(format!(
                "{h}x{w} mask needs {} bytes, got {}",
                h * w,
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v > 1) {
            return Err(GeomError::NonBinaryValue(bad));
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v as u8;
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Mask as 0.0/1.0 floats, for loss targets.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Foreground pixels 4-adjacent to background (frame borders count as
    /// background).
    pub fn boundary_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y == self.h - 1
                    || x == self.w - 1
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Fills pixels whose centers satisfy the ellipse's implicit inequality,
/// clipped to the frame.
pub fn rasterize_ellipse(e: &EllipseParams, h: usize, w: usize) -> Result<BinaryMask> {
    let e = e.canonical();
    if e.a < 1.0 || e.b < 1.0 {
        return Err(GeomError::AxesTooSmall { a: e.a, b: e.b });
    }
    let mut mask = BinaryMask::zeros(h, w);
    // The ellipse lives inside the circle of radius a about the center.
    let y_lo = libm::floor(e.cy - e.a).max(0.0) as usize;
    let y_hi = (libm::ceil(e.cy + e.a).max(0.0) as usize + 1).min(h);
    let x_lo = libm::floor(e.cx - e.a).max(0.0) as usize;
    let x_hi = (libm::ceil(e.cx + e.a).max(0.0) as usize + 1).min(w);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            if e.implicit(x as f64, y as f64) <= 1.0 {
                mask.set(y, x, true);
            }
        }
    }
    Ok(mask)
}

/// Recovers ellipse parameters from a filled mask via second moments.
///
/// The covariance of a uniformly filled ellipse is
/// `R(theta) diag(a^2/4, b^2/4) R(theta)^T`, so the eigenvalues give the
/// axes (`a = 2 sqrt(lambda_1)`) and the eigenvector angle gives theta.
pub fn fit_ellipse(mask: &BinaryMask) -> Result<EllipseParams> {
    let n = mask.count_foreground();
    if n < 5 {
        return Err(GeomError::TooFewForeground(n));
    }
    let mut sx = 0.0f64;
    let mut sy = 0.0f64;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    let nf = n as f64;
    let (mx, my) = (sx / nf, sy / nf);
    let mut cxx = 0.0f64;
    let mut cyy = 0.0f64;
    let mut cxy = 0.0f64;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                let dx = x as f64 - mx;
                let dy = y as f64 - my;
                cxx += dx * dx;
                cyy += dy * dy;
                cxy += dx * dy;
            }
        }
    }
    cxx /= nf;
    cyy /= nf;
    cxy /= nf;

    let tr = cxx + cyy;
    let gap = libm::sqrt((cxx - cyy) * (cxx - cyy) + 4.0 * cxy * cxy);
    let l1 = (tr + gap) / 2.0;
    let l2 = (tr - gap) / 2.0;
    if l2 <= 1e-9 {
        return Err(GeomError::DegenerateMask);
    }
    let theta = 0.5 * libm::atan2(2.0 * cxy, cxx - cyy);
    Ok(EllipseParams {
        cx: mx,
        cy: my,
        a: 2.0 * libm::sqrt(l1),
        b: 2.0 * libm::sqrt(l2),
        theta,
    }
    .canonical())
}

/// Per-pixel Euclidean distance to the nearest boundary pixel of the mask,
/// row-major. Exact brute force over the boundary set.
pub fn boundary_distance_map(mask: &BinaryMask) -> Result<Vec<f64>> {
    let fg = mask.count_foreground();
    if fg == 0 || fg == mask.height() * mask.width() {
        return Err(GeomError::NoBoundary);
    }
    let boundary = mask.boundary_pixels();
    let (h, w) = (mask.height(), mask.width());
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::MAX;
            for &(by, bx) in &boundary {
                let dy = by as f64 - y as f64;
                let dx = bx as f64 - x as f64;
                let d2 = dy * dy + dx * dx;
                if d2 < best {
                    best = d2;
                }
            }
            out[y * w + x] = libm::sqrt(best);
        }
    }
    Ok(out)
}

/// Smallest angular distance between two major-axis angles, respecting the
/// half-turn symmetry of an ellipse.
pub fn angle_distance(t1: f64, t2: f64) -> f64 {
    let d = (t1 - t2).rem_euclid(PI);
    d.min(PI - d)
}
