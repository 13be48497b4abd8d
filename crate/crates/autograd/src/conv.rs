//! 2-D convolution over NCHW tensors via im2col + GEMM.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::graph::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds `x` into a `(C*K*K, N*OH*OW)` patch matrix.
fn im2col(x: &[f64], geo: &Conv2dGeometry) -> Array2<f64> {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let l = geo.positions();
    let cols_n = geo.batch * l;
    let mut cols = vec![0.0; geo.patch_len() * cols_n];
    let plane = geo.height * geo.width;
    for c in 0..geo.in_channels {
        for ki in 0..geo.kernel {
            for kj in 0..geo.kernel {
                let row = (c * geo.kernel + ki) * geo.kernel + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..geo.batch {
                    let src = &x[(n * geo.in_channels + c) * plane..][..plane];
                    let dst = &mut dst_row[n * l..(n + 1) * l];
                    for y in 0..oh {
                        let iy = (y * geo.stride + ki) as isize - geo.padding as isize;
                        if iy < 0 || iy >= geo.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * geo.width..][..geo.width];
                        for xo in 0..ow {
                            let ix = (xo * geo.stride + kj) as isize - geo.padding as isize;
                            if ix >= 0 && ix < geo.width as isize {
                                dst[y * ow + xo] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((geo.patch_len(), cols_n), cols).unwrap()
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(cols: &Array2<f64>, geo: &Conv2dGeometry) -> Vec<f64> {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let l = geo.positions();
    let plane = geo.height * geo.width;
    let mut dx = vec![0.0; geo.batch * geo.in_channels * plane];
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().unwrap();
    let cols_n = geo.batch * l;
    for c in 0..geo.in_channels {
        for ki in 0..geo.kernel {
            for kj in 0..geo.kernel {
                let row = (c * geo.kernel + ki) * geo.kernel + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..geo.batch {
                    let dst = &mut dx[(n * geo.in_channels + c) * plane..][..plane];
                    let src = &src_row[n * l..(n + 1) * l];
                    for y in 0..oh {
                        let iy = (y * geo.stride + ki) as isize - geo.padding as isize;
                        if iy < 0 || iy >= geo.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * geo.width..][..geo.width];
                        for xo in 0..ow {
                            let ix = (xo * geo.stride + kj) as isize - geo.padding as isize;
                            if ix >= 0 && ix < geo.width as isize {
                                dst_row[ix as usize] += src[y * ow + xo];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

impl<'g> Var<'g> {
    /// Cross-correlation of `self` (N, C, H, W) with `weight` (OC, C, K, K),
    /// plus an optional per-channel `bias` (OC).
    pub fn conv2d(
        &self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        padding: usize,
    ) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be (OC, C, K, K)");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d expects square kernels");
        let geo = Conv2dGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            padding,
        };
        let out_channels = ws[0];
        let (oh, ow) = (geo.out_height(), geo.out_width());
        let l = geo.positions();

        let x_std = x.as_standard_layout();
        let cols = im2col(x_std.as_slice().unwrap(), &geo);
        let w2 = w
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((out_channels, geo.patch_len()))
            .unwrap();
        let y = w2.dot(&cols);
        let bias_value = bias.map(|b| b.value());
        let mut out = vec![0.0; geo.batch * out_channels * l];
        for oc in 0..out_channels {
            let b = bias_value.as_ref().map_or(0.0, |bv| bv[oc]);
            let yrow = y.row(oc);
            let yrow = yrow.as_slice().unwrap();
            for n in 0..geo.batch {
                let dst = &mut out[(n * out_channels + oc) * l..][..l];
                for (d, &s) in dst.iter_mut().zip(&yrow[n * l..(n + 1) * l]) {
                    *d = s + b;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[geo.batch, out_channels, oh, ow]), out).unwrap();

        let mut parents = vec![*self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let w_shape = ws.to_vec();
        self.graph.apply(&parents, value, move |g: &Tensor, needs| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut gmat = Array2::<f64>::zeros((out_channels, geo.batch * l));
            for oc in 0..out_channels {
                let mut row = gmat.row_mut(oc);
                let row = row.as_slice_mut().unwrap();
                for n in 0..geo.batch {
                    row[n * l..(n + 1) * l]
                        .copy_from_slice(&gs[(n * out_channels + oc) * l..][..l]);
                }
            }
            let dx = needs[0].then(|| {
                let dcols = w2.t().dot(&gmat);
                let dx = col2im(&dcols, &geo);
                ArrayD::from_shape_vec(
                    IxDyn(&[geo.batch, geo.in_channels, geo.height, geo.width]),
                    dx,
                )
                .unwrap()
            });
            let dw = needs[1].then(|| {
                gmat.dot(&cols.t())
                    .into_shape_with_order(IxDyn(&w_shape))
                    .unwrap()
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    ndarray::Array1::from_iter(gmat.rows().into_iter().map(|r| r.sum())).into_dyn()
                }));
            }
            grads
        })
    }
}
