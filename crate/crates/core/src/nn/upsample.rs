use ndarray::Array4;

/// Nearest-neighbor 2x upsampling of NCHW tensors.
pub fn upsample_nearest_2x(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::zeros((b, c, 2 * h, 2 * w));
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    for nc in 0..b * c {
        let src = &xs[nc * h * w..][..h * w];
        let dst = &mut ys[nc * 4 * h * w..][..4 * h * w];
        for i in 0..h {
            for j in 0..w {
                let v = src[i * w + j];
                let r0 = 2 * i * 2 * w + 2 * j;
                dst[r0] = v;
                dst[r0 + 1] = v;
                dst[r0 + 2 * w] = v;
                dst[r0 + 2 * w + 1] = v;
            }
        }
    }
    y
}

/// Backward of [`upsample_nearest_2x`]: sums each 2x2 replica block.
pub fn upsample_nearest_2x_backward(gy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::zeros((b, c, h, w));
    let gs = gy.as_slice().expect("standard layout");
    let xs = gx.as_slice_mut().expect("standard layout");
    for nc in 0..b * c {
        let src = &gs[nc * h2 * w2..][..h2 * w2];
        let dst = &mut xs[nc * h * w..][..h * w];
        for i in 0..h {
            for j in 0..w {
                let r0 = 2 * i * w2 + 2 * j;
                dst[i * w + j] = src[r0] + src[r0 + 1] + src[r0 + w2] + src[r0 + w2 + 1];
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn replicates_and_sums_back() {
        let mut x = Array4::zeros((1, 1, 2, 2));
        x.index_axis_mut(ndarray::Axis(0), 0)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let y = upsample_nearest_2x(&x);
        assert_eq!(y[[0, 0, 0, 0]], 1.0);
        assert_eq!(y[[0, 0, 0, 1]], 1.0);
        assert_eq!(y[[0, 0, 3, 3]], 4.0);
        let gx = upsample_nearest_2x_backward(&Array4::ones(y.raw_dim()));
        assert!(gx.iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }
}
