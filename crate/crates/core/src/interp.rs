//! Trilinear interpolation kernel with clamp-to-edge boundary handling.
//!
//! Every sampler in the crate (image warping, field composition, landmark
//! propagation, pyramid resampling) goes through [`Cell`], so the value and
//! its analytic derivative always come from the same piecewise-linear
//! interpolant.

use crate::scalar::{lit, Real};

/// Interpolation weights along one axis.
#[derive(Clone, Copy, Debug)]
pub struct AxisLerp<T> {
    pub i0: usize,
    pub t: T,
    /// False when the coordinate was clamped; the interpolant is flat there.
    pub active: bool,
}

impl<T: Real> AxisLerp<T> {
    #[inline]
    pub fn new(c: T, n: usize) -> Self {
        debug_assert!(n >= 2);
        let hi = lit::<T>((n - 1) as f64);
        if c < T::zero() {
            return Self { i0: 0, t: T::zero(), active: false };
        }
        if c > hi {
            return Self { i0: n - 2, t: T::one(), active: false };
        }
        let f = c.floor().to_usize().unwrap_or(0).min(n - 2);
        let t = c - lit::<T>(f as f64);
        Self { i0: f, t, active: true }
    }

    #[inline(always)]
    fn weights(&self) -> [T; 2] {
        [T::one() - self.t, self.t]
    }
}

/// The eight-voxel cell enclosing a continuous voxel coordinate.
#[derive(Clone, Copy, Debug)]
pub struct Cell<T> {
    pub axes: [AxisLerp<T>; 3],
    base: usize,
    stride: [usize; 3],
}

impl<T: Real> Cell<T> {
    #[inline]
    pub fn locate(dims: [usize; 3], p: [T; 3]) -> Self {
        let axes = [AxisLerp::new(p[0], dims[0]), AxisLerp::new(p[1], dims[1]), AxisLerp::new(p[2], dims[2])];
        let stride = [1, dims[0], dims[0] * dims[1]];
        let base = axes[0].i0 + stride[1] * axes[1].i0 + stride[2] * axes[2].i0;
        Self { axes, base, stride }
    }

    /// Flat indices and weights of the eight corners, x fastest.
    #[inline]
    pub fn corners(&self) -> [(usize, T); 8] {
        let [wx, wy, wz] = [self.axes[0].weights(), self.axes[1].weights(), self.axes[2].weights()];
        let mut out = [(0usize, T::zero()); 8];
        let mut k = 0;
        for (c, &w_c) in wz.iter().enumerate() {
            for (b, &w_b) in wy.iter().enumerate() {
                for (a, &w_a) in wx.iter().enumerate() {
                    let idx = self.base + a * self.stride[0] + b * self.stride[1] + c * self.stride[2];
                    out[k] = (idx, w_a * w_b * w_c);
                    k += 1;
                }
            }
        }
        out
    }

    #[inline]
    fn gather<V: Copy>(&self, data: &[V]) -> [V; 8] {
        let [sx, sy, sz] = self.stride;
        let b = self.base;
        [
            data[b],
            data[b + sx],
            data[b + sy],
            data[b + sx + sy],
            data[b + sz],
            data[b + sx + sz],
            data[b + sy + sz],
            data[b + sx + sy + sz],
        ]
    }

    #[inline]
    pub fn sample(&self, data: &[T]) -> T {
        value8(&self.axes, &self.gather(data))
    }

    /// Value and exact derivative of the interpolant with respect to the
    /// sample point (voxel units). Clamped axes have zero derivative.
    #[inline]
    pub fn sample_with_gradient(&self, data: &[T]) -> (T, [T; 3]) {
        let v = self.gather(data);
        grad8(&self.axes, &v)
    }

    #[inline]
    pub fn sample_vec(&self, data: &[[T; 3]]) -> [T; 3] {
        let v = self.gather(data);
        let mut out = [T::zero(); 3];
        for (c, o) in out.iter_mut().enumerate() {
            let s: [T; 8] = std::array::from_fn(|k| v[k][c]);
            *o = value8(&self.axes, &s);
        }
        out
    }

    /// Interpolated vector and its Jacobian `jac[i][a] = d v_i / d p_a`.
    #[inline]
    pub fn sample_vec_with_jacobian(&self, data: &[[T; 3]]) -> ([T; 3], [[T; 3]; 3]) {
        let v = self.gather(data);
        let mut val = [T::zero(); 3];
        let mut jac = [[T::zero(); 3]; 3];
        for c in 0..3 {
            let s: [T; 8] = std::array::from_fn(|k| v[k][c]);
            let (x, g) = grad8(&self.axes, &s);
            val[c] = x;
            jac[c] = g;
        }
        (val, jac)
    }
}

#[inline(always)]
fn value8<T: Real>(axes: &[AxisLerp<T>; 3], v: &[T; 8]) -> T {
    let [wx, wy, wz] = [axes[0].weights(), axes[1].weights(), axes[2].weights()];
    let c00 = wx[0] * v[0] + wx[1] * v[1];
    let c10 = wx[0] * v[2] + wx[1] * v[3];
    let c01 = wx[0] * v[4] + wx[1] * v[5];
    let c11 = wx[0] * v[6] + wx[1] * v[7];
    let c0 = wy[0] * c00 + wy[1] * c10;
    let c1 = wy[0] * c01 + wy[1] * c11;
    wz[0] * c0 + wz[1] * c1
}

#[inline(always)]
fn grad8<T: Real>(axes: &[AxisLerp<T>; 3], v: &[T; 8]) -> (T, [T; 3]) {
    let [wx, wy, wz] = [axes[0].weights(), axes[1].weights(), axes[2].weights()];
    let c00 = wx[0] * v[0] + wx[1] * v[1];
    let c10 = wx[0] * v[2] + wx[1] * v[3];
    let c01 = wx[0] * v[4] + wx[1] * v[5];
    let c11 = wx[0] * v[6] + wx[1] * v[7];
    let c0 = wy[0] * c00 + wy[1] * c10;
    let c1 = wy[0] * c01 + wy[1] * c11;
    let value = wz[0] * c0 + wz[1] * c1;

    let gz = if axes[2].active { c1 - c0 } else { T::zero() };
    let gy = if axes[1].active { wz[0] * (c10 - c00) + wz[1] * (c11 - c01) } else { T::zero() };
    let gx = if axes[0].active {
        let d00 = v[1] - v[0];
        let d10 = v[3] - v[2];
        let d01 = v[5] - v[4];
        let d11 = v[7] - v[6];
        wz[0] * (wy[0] * d00 + wy[1] * d10) + wz[1] * (wy[0] * d01 + wy[1] * d11)
    } else {
        T::zero()
    };
    (value, [gx, gy, gz])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_clamps_outside_range() {
        let a = AxisLerp::new(-0.5f64, 4);
        assert_eq!((a.i0, a.t, a.active), (0, 0.0, false));
        let b = AxisLerp::new(7.0f64, 4);
        assert_eq!((b.i0, b.t, b.active), (2, 1.0, false));
        let c = AxisLerp::new(3.0f64, 4);
        assert_eq!((c.i0, c.t, c.active), (2, 1.0, true));
    }

    #[test]
    fn corner_weights_sum_to_one() {
        let cell = Cell::locate([5, 4, 3], [1.3f64, 2.7, 0.2]);
        let s: f64 = cell.corners().iter().map(|c| c.1).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }
}
