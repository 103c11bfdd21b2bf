//! Bilinear interpolation kernel (half-pixel centres, edge clamped).
//!
//! The map is linear in the input, so the backward pass scatters the
//! output gradient through the same taps.

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let w_hi = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, w_hi }
        })
        .collect()
}

/// Precomputed taps for resizing `planes` stacked `in_h × in_w` images.
#[derive(Debug, Clone)]
pub(crate) struct ResizePlan {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl ResizePlan {
    pub fn new(planes: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        ResizePlan {
            planes,
            in_h,
            in_w,
            out_h,
            out_w,
            rows: taps(in_h, out_h),
            cols: taps(in_w, out_w),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let in_plane = self.in_h * self.in_w;
        let out_plane = self.out_h * self.out_w;
        let mut out = vec![0.0; self.planes * out_plane];
        for p in 0..self.planes {
            let src = &input[p * in_plane..(p + 1) * in_plane];
            let dst = &mut out[p * out_plane..(p + 1) * out_plane];
            for (oy, ry) in self.rows.iter().enumerate() {
                let top = &src[ry.lo * self.in_w..(ry.lo + 1) * self.in_w];
                let bottom = &src[ry.hi * self.in_w..(ry.hi + 1) * self.in_w];
                for (ox, cx) in self.cols.iter().enumerate() {
                    let t = top[cx.lo] + cx.w_hi * (top[cx.hi] - top[cx.lo]);
                    let b = bottom[cx.lo] + cx.w_hi * (bottom[cx.hi] - bottom[cx.lo]);
                    dst[oy * self.out_w + ox] = t + ry.w_hi * (b - t);
                }
            }
        }
        out
    }

    /// Accumulates the adjoint of [`ResizePlan::forward`] into `grad_in`.
    pub fn backward(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let in_plane = self.in_h * self.in_w;
        let out_plane = self.out_h * self.out_w;
        for p in 0..self.planes {
            let g_out = &grad_out[p * out_plane..(p + 1) * out_plane];
            let g_in = &mut grad_in[p * in_plane..(p + 1) * in_plane];
            for (oy, ry) in self.rows.iter().enumerate() {
                for (ox, cx) in self.cols.iter().enumerate() {
                    let g = g_out[oy * self.out_w + ox];
                    let gt = g * (1.0 - ry.w_hi);
                    let gb = g * ry.w_hi;
                    g_in[ry.lo * self.in_w + cx.lo] += gt * (1.0 - cx.w_hi);
                    g_in[ry.lo * self.in_w + cx.hi] += gt * cx.w_hi;
                    g_in[ry.hi * self.in_w + cx.lo] += gb * (1.0 - cx.w_hi);
                    g_in[ry.hi * self.in_w + cx.hi] += gb * cx.w_hi;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let input: Vec<f64> = (0..12).map(|v| v as f64 * 0.37).collect();
        let plan = ResizePlan::new(1, 3, 4, 3, 4);
        assert_eq!(plan.forward(&input), input);
    }

    #[test]
    fn two_by_two_to_one_is_average() {
        let plan = ResizePlan::new(1, 2, 2, 1, 1);
        let out = plan.forward(&[1.0, 2.0, 3.0, 6.0]);
        assert!((out[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <R x, y> == <x, R^T y>
        let plan = ResizePlan::new(2, 5, 3, 7, 4);
        let x: Vec<f64> = (0..30).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let y: Vec<f64> = (0..56).map(|i| ((i * 104729) % 11) as f64 - 5.0).collect();
        let rx = plan.forward(&x);
        let mut rty = vec![0.0; x.len()];
        plan.backward(&y, &mut rty);
        let lhs: f64 = rx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&rty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
