//! Anti-aliased grayscale rasterizer for the task scenes.

/// Square grayscale canvas mapping a world-space window onto pixels.
///
/// World `y` points up; row 0 of the image is the top of the window.
#[derive(Clone, Debug)]
pub struct Canvas {
    size: usize,
    center: (f64, f64),
    half_extent: f64,
    pixels: Vec<f32>,
}

impl Canvas {
    pub fn new(size: usize, center: (f64, f64), half_extent: f64) -> Self {
        Self {
            size,
            center,
            half_extent,
            pixels: vec![0.0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Pixels per world unit.
    pub fn scale(&self) -> f64 {
        self.size as f64 / (2.0 * self.half_extent)
    }

    /// World point to continuous pixel coordinates (x to the right, y down).
    pub fn to_pixel(&self, p: (f64, f64)) -> (f64, f64) {
        let s = self.scale();
        (
            (p.0 - self.center.0 + self.half_extent) * s,
            (self.center.1 + self.half_extent - p.1) * s,
        )
    }

    fn splat(&mut self, bbox: (f64, f64, f64, f64), intensity: f32, sdf: impl Fn(f64, f64) -> f64) {
        let n = self.size as isize;
        let x0 = (bbox.0.floor() as isize - 1).clamp(0, n);
        let x1 = (bbox.1.ceil() as isize + 1).clamp(0, n);
        let y0 = (bbox.2.floor() as isize - 1).clamp(0, n);
        let y1 = (bbox.3.ceil() as isize + 1).clamp(0, n);
        for py in y0..y1 {
            for px in x0..x1 {
                let d = sdf(px as f64 + 0.5, py as f64 + 0.5);
                let coverage = (0.5 - d).clamp(0.0, 1.0) as f32;
                if coverage > 0.0 {
                    let v = &mut self.pixels[py as usize * self.size + px as usize];
                    *v = v.max(coverage * intensity);
                }
            }
        }
    }

    /// Filled disc of world radius `radius`.
    pub fn disc(&mut self, center: (f64, f64), radius: f64, intensity: f32) {
        let (cx, cy) = self.to_pixel(center);
        let r = radius * self.scale();
        self.splat((cx - r, cx + r, cy - r, cy + r), intensity, |x, y| {
            ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r
        });
    }

    /// Capsule between two world points with world half-width `half_width`.
    pub fn segment(&mut self, a: (f64, f64), b: (f64, f64), half_width: f64, intensity: f32) {
        let (ax, ay) = self.to_pixel(a);
        let (bx, by) = self.to_pixel(b);
        let hw = half_width * self.scale();
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let bbox = (
            ax.min(bx) - hw,
            ax.max(bx) + hw,
            ay.min(by) - hw,
            ay.max(by) + hw,
        );
        self.splat(bbox, intensity, |x, y| {
            let t = if len2 > 0.0 {
                (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qx, qy) = (ax + t * dx, ay + t * dy);
            ((x - qx).powi(2) + (y - qy).powi(2)).sqrt() - hw
        });
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Quantizes to 8-bit levels.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Binary PGM (P5) encoding of an 8-bit frame.
pub fn encode_pgm(frame: &[u8], size: usize) -> Vec<u8> {
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    out.extend_from_slice(frame);
    out
}
