use crate::scalar::Real;

/// Single-channel image addressed in continuous pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> Grid2<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(width * height, data.len(), "grid size mismatch");
        assert!(width >= 1 && height >= 1, "empty grid");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Bilinear value and its partial derivatives with respect to `u` and `v`.
    ///
    /// Pixel `(i, j)` is centered at `(i + 0.5, j + 0.5)`. Outside the hull
    /// of pixel centers the coordinate is clamped and its derivative is zero.
    pub fn sample(&self, u: T, v: T) -> (T, T, T) {
        let (x0, fx, dx_live) = axis(u - T::c(0.5), self.width);
        let (y0, fy, dy_live) = axis(v - T::c(0.5), self.height);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let one = T::one();
        let top = p00 * (one - fx) + p10 * fx;
        let bottom = p01 * (one - fx) + p11 * fx;
        let value = top * (one - fy) + bottom * fy;
        let du = if dx_live {
            (p10 - p00) * (one - fy) + (p11 - p01) * fy
        } else {
            T::zero()
        };
        let dv = if dy_live { bottom - top } else { T::zero() };
        (value, du, dv)
    }
}

/// Cell index, fractional offset and whether the coordinate was interior.
fn axis<T: Real>(x: T, n: usize) -> (usize, T, bool) {
    if n == 1 {
        return (0, T::zero(), false);
    }
    let max = T::c((n - 1) as f64);
    if !(x > T::zero()) {
        return (0, T::zero(), false);
    }
    if x >= max {
        return (n - 2, T::one(), false);
    }
    let i = x.floor();
    let idx = i.to_usize().unwrap_or(0).min(n - 2);
    (idx, x - T::c(idx as f64), true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_pixel_centers_exactly() {
        let g = Grid2::<f64>::new(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(g.sample(0.5, 0.5).0, 0.0);
        assert_eq!(g.sample(2.5, 1.5).0, 5.0);
        assert!((g.sample(1.0, 1.0).0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn derivative_matches_differences() {
        let g = Grid2::<f64>::new(4, 4, (0..16).map(|i| ((i * 7) % 5) as f64).collect());
        let (u, v) = (1.7, 2.2);
        let (_, du, dv) = g.sample(u, v);
        let h = 1e-6;
        let fu = (g.sample(u + h, v).0 - g.sample(u - h, v).0) / (2.0 * h);
        let fv = (g.sample(u, v + h).0 - g.sample(u, v - h).0) / (2.0 * h);
        assert!((du - fu).abs() < 1e-6);
        assert!((dv - fv).abs() < 1e-6);
    }

    #[test]
    fn clamps_outside() {
        let g = Grid2::<f64>::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (v, du, dv) = g.sample(-5.0, -5.0);
        assert_eq!((v, du, dv), (1.0, 0.0, 0.0));
    }
}
