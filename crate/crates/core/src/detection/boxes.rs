use crate::error::{invalid, Result};

/// Normalized `(cx, cy, w, h)` box.
pub type BoxCxCyWh = [f64; 4];

#[inline]
pub fn corners(b: &BoxCxCyWh) -> [f64; 4] {
    [
        b[0] - 0.5 * b[2],
        b[1] - 0.5 * b[3],
        b[0] + 0.5 * b[2],
        b[1] + 0.5 * b[3],
    ]
}

fn check(b: &BoxCxCyWh) -> Result<()> {
    if b.iter().any(|v| !v.is_finite()) || b[2] <= 0.0 || b[3] <= 0.0 {
        return Err(invalid!("degenerate box {b:?}"));
    }
    Ok(())
}

/// Plain intersection over union; zero for disjoint boxes.
pub fn iou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    let (pa, pb) = (corners(a), corners(b));
    let iw = (pa[2].min(pb[2]) - pa[0].max(pb[0])).max(0.0);
    let ih = (pa[3].min(pb[3]) - pa[1].max(pb[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - (enclosing - union) / enclosing`, in `(-1, 1]`.
pub fn giou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> Result<f64> {
    check(a)?;
    check(b)?;
    Ok(giou_with_grad(a, b).0)
}

/// GIoU and its gradient with respect to the first box's `(cx, cy, w, h)`.
pub(crate) fn giou_with_grad(p: &BoxCxCyWh, g: &BoxCxCyWh) -> (f64, [f64; 4]) {
    let [px0, py0, px1, py1] = corners(p);
    let [gx0, gy0, gx1, gy1] = corners(g);
    let (w, h) = (p[2], p[3]);
    let area_p = w * h;
    let area_g = g[2] * g[3];

    let iw_raw = px1.min(gx1) - px0.max(gx0);
    let ih_raw = py1.min(gy1) - py0.max(gy0);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_p + area_g - inter;
    let ew = px1.max(gx1) - px0.min(gx0);
    let eh = py1.max(gy1) - py0.min(gy0);
    let encl = ew * eh;
    let value = inter / union - (encl - union) / encl;

    // partials with respect to the corner coordinates x0, y0, x1, y1
    let on_w = if iw_raw > 0.0 { 1.0 } else { 0.0 };
    let on_h = if ih_raw > 0.0 { 1.0 } else { 0.0 };
    let d_inter = [
        -ih * on_w * if px0 > gx0 { 1.0 } else { 0.0 },
        -iw * on_h * if py0 > gy0 { 1.0 } else { 0.0 },
        ih * on_w * if px1 < gx1 { 1.0 } else { 0.0 },
        iw * on_h * if py1 < gy1 { 1.0 } else { 0.0 },
    ];
    let d_area = [-h, -w, h, w];
    let d_encl = [
        -eh * if px0 < gx0 { 1.0 } else { 0.0 },
        -ew * if py0 < gy0 { 1.0 } else { 0.0 },
        eh * if px1 > gx1 { 1.0 } else { 0.0 },
        ew * if py1 > gy1 { 1.0 } else { 0.0 },
    ];
    let mut d_corner = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        d_corner[i] =
            d_inter[i] / union - inter * d_union / (union * union) + d_union / encl - union * d_encl[i] / (encl * encl);
    }
    let grad = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        0.5 * (d_corner[2] - d_corner[0]),
        0.5 * (d_corner[3] - d_corner[1]),
    ];
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tensor};

    #[test]
    fn identical_boxes() {
        let b = [0.4, 0.5, 0.2, 0.3];
        assert!((giou(&b, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_pair() {
        let v = giou(&[0.2, 0.2, 0.2, 0.2], &[0.8, 0.8, 0.2, 0.2]).unwrap();
        // union 0.08, enclosing 0.64
        assert!((v - (-(0.64 - 0.08) / 0.64)).abs() < 1e-12, "{v}");
        assert!((v + 0.875).abs() < 1e-12);
    }

    #[test]
    fn nested_half_area() {
        let outer = [0.5, 0.5, 0.4, 0.4];
        let inner = [0.5, 0.5, 0.4 / 2f64.sqrt(), 0.4 / 2f64.sqrt()];
        let v = giou(&inner, &outer).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "{v}");
        assert!((iou(&inner, &outer) - v).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_bounded() {
        let boxes = [
            [0.3, 0.3, 0.2, 0.4],
            [0.6, 0.5, 0.3, 0.1],
            [0.5, 0.5, 0.9, 0.9],
            [0.1, 0.9, 0.05, 0.05],
        ];
        for a in &boxes {
            for b in &boxes {
                let (x, y) = (giou(a, b).unwrap(), giou(b, a).unwrap());
                assert!((x - y).abs() < 1e-12);
                assert!(x > -1.0 && x <= 1.0);
            }
        }
    }

    #[test]
    fn degenerate_rejected() {
        assert!(giou(&[0.5, 0.5, 0.0, 0.1], &[0.5, 0.5, 0.1, 0.1]).is_err());
        assert!(giou(&[0.5, 0.5, 0.1, 0.1], &[0.5, f64::NAN, 0.1, 0.1]).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let gt = [0.5, 0.45, 0.3, 0.2];
        for p in [
            [0.55, 0.52, 0.25, 0.3],
            [0.2, 0.8, 0.1, 0.15],
            [0.47, 0.46, 0.5, 0.4],
            [0.6, 0.3, 0.12, 0.33],
        ] {
            let (_, grad) = giou_with_grad(&p, &gt);
            let theta = Tensor::new(vec![4], p.to_vec()).unwrap();
            let analytic = Tensor::new(vec![4], grad.to_vec()).unwrap();
            let r = grad_check(
                |t| Ok(giou_with_grad(&[t[0], t[1], t[2], t[3]], &gt).0),
                &theta,
                &analytic,
                1e-7,
                None,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "{p:?}: {r:?}");
        }
    }
}
