//! Bilinear lookups under the pixel-center convention: integer coordinate
//! `i` addresses the center of cell `i`, and cells outside the grid read as
//! zero.

use crate::error::{invalid, Result};
use crate::numerics::{Scalar, Tensor};

use super::LevelShape;

/// Maps a normalized `(x, y)` onto level-pixel coordinates.
pub fn normalize_to_level<F: Scalar>(p: (F, F), level: LevelShape) -> (F, F) {
    let half = F::of(0.5);
    (
        p.0 * F::of(level.width as f64) - half,
        p.1 * F::of(level.height as f64) - half,
    )
}

/// The four neighbors of a fractional location with their blend weights.
/// Out-of-grid neighbors have `None` for their pixel index.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Footprint<F> {
    /// Row-major pixel index for (y0,x0), (y0,x1), (y1,x0), (y1,x1).
    pub pixel: [Option<usize>; 4],
    pub weight: [F; 4],
    pub fx: F,
    pub fy: F,
}

impl<F: Scalar> Footprint<F> {
    #[inline]
    pub fn new(x: F, y: F, level: LevelShape) -> Self {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (w, h) = (level.width as i64, level.height as i64);
        // Points far outside the grid keep the float->int casts saturated and harmless.
        let (xi, yi) = (x0.to_i64().unwrap_or(i64::MIN / 2), y0.to_i64().unwrap_or(i64::MIN / 2));
        let at = |yy: i64, xx: i64| {
            if xx >= 0 && xx < w && yy >= 0 && yy < h {
                Some((yy * w + xx) as usize)
            } else {
                None
            }
        };
        let one = F::one();
        Self {
            pixel: [at(yi, xi), at(yi, xi + 1), at(yi + 1, xi), at(yi + 1, xi + 1)],
            weight: [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy],
            fx,
            fy,
        }
    }

    /// d(sample)/dx and d(sample)/dy expressed through per-corner scalar values.
    #[inline]
    pub fn spatial_grad(&self, g: [F; 4]) -> (F, F) {
        let one = F::one();
        (
            (one - self.fy) * (g[1] - g[0]) + self.fy * (g[3] - g[2]),
            (one - self.fx) * (g[2] - g[0]) + self.fx * (g[3] - g[1]),
        )
    }
}

fn check_map<F: Scalar>(map: &Tensor<F>, x: F, y: F) -> Result<LevelShape> {
    if map.rank() != 3 {
        return Err(invalid!("sampled map must be [C, H, W], got {:?}", map.dims()));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(invalid!("sampling point ({x}, {y}) is not finite"));
    }
    Ok(LevelShape::new(map.dims()[1], map.dims()[2]))
}

/// Samples every channel of `map` (`[C, H, W]`) at level-pixel `(x, y)`.
pub fn bilinear_sample<F: Scalar>(map: &Tensor<F>, point: (F, F)) -> Result<Tensor<F>> {
    let level = check_map(map, point.0, point.1)?;
    let c = map.dims()[0];
    let hw = level.area();
    let fp = Footprint::new(point.0, point.1, level);
    let data = map.data();
    Ok(Tensor::from_fn(&[c], |ch| {
        let mut s = F::zero();
        for (pix, w) in fp.pixel.iter().zip(fp.weight) {
            if let Some(p) = pix {
                s += w * data[ch * hw + p];
            }
        }
        s
    }))
}

/// Vector-Jacobian product of [`bilinear_sample`]: gradients with respect to
/// the map and to the sampling location.
pub fn bilinear_sample_backward<F: Scalar>(
    map: &Tensor<F>,
    point: (F, F),
    d_out: &Tensor<F>,
) -> Result<(Tensor<F>, (F, F))> {
    let level = check_map(map, point.0, point.1)?;
    let c = map.dims()[0];
    if d_out.dims() != [c] {
        return Err(invalid!(
            "output gradient {:?} does not match {c} channels",
            d_out.dims()
        ));
    }
    let hw = level.area();
    let fp = Footprint::new(point.0, point.1, level);
    let mut d_map = Tensor::zeros(map.dims());
    let mut g = [F::zero(); 4];
    for (corner, pix) in fp.pixel.iter().enumerate() {
        if let Some(p) = *pix {
            for ch in 0..c {
                d_map[ch * hw + p] += fp.weight[corner] * d_out[ch];
                g[corner] += d_out[ch] * map[ch * hw + p];
            }
        }
    }
    Ok((d_map, fp.spatial_grad(g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn grid() -> Tensor<f64> {
        Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn integer_point_reads_cell() {
        assert_eq!(bilinear_sample(&grid(), (0.0, 0.0)).unwrap().data(), &[1.0]);
        assert_eq!(bilinear_sample(&grid(), (1.0, 0.0)).unwrap().data(), &[2.0]);
    }

    #[test]
    fn center_is_mean_of_four() {
        assert_eq!(bilinear_sample(&grid(), (0.5, 0.5)).unwrap().data(), &[2.5]);
    }

    #[test]
    fn far_outside_is_zero() {
        assert_eq!(bilinear_sample(&grid(), (-10.0, -10.0)).unwrap().data(), &[0.0]);
        assert_eq!(bilinear_sample(&grid(), (1e30, 3.0)).unwrap().data(), &[0.0]);
    }

    #[test]
    fn half_pixel_border_blends_with_zero() {
        // x = -0.5 sits on the left edge of the grid: half of cell 0.
        let v = bilinear_sample(&grid(), (-0.5, 0.0)).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_point() {
        assert!(bilinear_sample(&grid(), (f64::NAN, 0.0)).is_err());
        assert!(bilinear_sample(&grid(), (0.0, f64::INFINITY)).is_err());
    }

    #[test]
    fn level_normalization() {
        let sq = LevelShape::new(4, 4);
        assert_eq!(normalize_to_level((0.5, 0.5), sq), (1.5, 1.5));
        assert_eq!(normalize_to_level((0.0, 0.0), LevelShape::new(8, 6)), (-0.5, -0.5));
        assert_eq!(normalize_to_level((1.0, 1.0), LevelShape::new(2, 3)), (2.5, 1.5));
    }

    #[test]
    fn backward_matches_central_differences() {
        let map = Tensor::<f64>::from_fn(&[3, 4, 5], |i| ((i * 37 % 11) as f64 - 5.0) / 3.0);
        let d_out = Tensor::new(vec![3], vec![0.7, -1.1, 0.4]).unwrap();
        let loss = |m: &Tensor<f64>, p: (f64, f64)| -> f64 {
            let s = bilinear_sample(m, p).unwrap();
            s.data().iter().zip(d_out.data()).map(|(a, b)| a * b).sum()
        };
        for &p in &[(1.3, 2.7), (-0.2, 0.6), (3.8, 3.4), (2.1, -0.7)] {
            let (d_map, d_pt) = bilinear_sample_backward(&map, p, &d_out).unwrap();
            let r = grad_check(|m| Ok(loss(m, p)), &map, &d_map, 1e-6, None).unwrap();
            assert!(r.max_rel_error < 1e-8, "map grad at {p:?}: {r:?}");
            let theta = Tensor::new(vec![2], vec![p.0, p.1]).unwrap();
            let analytic = Tensor::new(vec![2], vec![d_pt.0, d_pt.1]).unwrap();
            let r = grad_check(|t| Ok(loss(&map, (t[0], t[1]))), &theta, &analytic, 1e-6, None).unwrap();
            assert!(r.max_rel_error < 1e-6, "point grad at {p:?}: {r:?}");
        }
    }
}
