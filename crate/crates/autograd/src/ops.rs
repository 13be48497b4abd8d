use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Zip};

use crate::graph::{Tensor, Var};

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to_shape(mut g: Tensor, shape: &[usize]) -> Tensor {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn broadcast_to(g: &Tensor, shape: &[usize]) -> Tensor {
    g.broadcast(IxDyn(shape))
        .expect("gradient not broadcastable to input shape")
        .to_owned()
}

fn as_2d(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 tensor")
}

impl<'g> Var<'g> {
    /// The tape this value lives on, for recording custom operations.
    pub fn graph(&self) -> &'g crate::Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_of(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// The single element of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    fn unary<F, D>(&self, f: F, df: D) -> Var<'g>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value();
        let y = Arc::new(x.mapv(&f));
        let y_keep = y.clone();
        self.graph.apply(&[*self], (*y).clone(), move |g, _| {
            let mut out = g.clone();
            Zip::from(&mut out)
                .and(&*x)
                .and(&*y_keep)
                .for_each(|o, &xi, &yi| *o *= df(xi, yi));
            vec![Some(out)]
        })
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn abs(&self) -> Var<'g> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Elementwise `max(x, floor)`; the gradient is zero where clamped.
    pub fn clamp_min(&self, floor: f64) -> Var<'g> {
        self.unary(
            move |x| x.max(floor),
            move |x, _| if x >= floor { 1.0 } else { 0.0 },
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'g> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    fn binary<F>(&self, other: Var<'g>, value: Tensor, backward: F) -> Var<'g>
    where
        F: Fn(&Tensor, &Tensor, &Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let a = self.value();
        let b = other.value();
        self.graph.apply(&[*self, other], value, move |g, needs| {
            backward(g, &a, &b, needs)
        })
    }

    /// Broadcasting elementwise sum.
    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        let value = &*self.value() + &*other.value();
        self.binary(other, value, |g, a, b, needs| {
            vec![
                needs[0].then(|| reduce_to_shape(g.clone(), a.shape())),
                needs[1].then(|| reduce_to_shape(g.clone(), b.shape())),
            ]
        })
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        let value = &*self.value() - &*other.value();
        self.binary(other, value, |g, a, b, needs| {
            vec![
                needs[0].then(|| reduce_to_shape(g.clone(), a.shape())),
                needs[1].then(|| reduce_to_shape(-g, b.shape())),
            ]
        })
    }

    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        let value = &*self.value() * &*other.value();
        self.binary(other, value, |g, a, b, needs| {
            vec![
                needs[0].then(|| reduce_to_shape(g * b, a.shape())),
                needs[1].then(|| reduce_to_shape(g * a, b.shape())),
            ]
        })
    }

    pub fn div(&self, other: Var<'g>) -> Var<'g> {
        let value = &*self.value() / &*other.value();
        self.binary(other, value, |g, a, b, needs| {
            vec![
                needs[0].then(|| reduce_to_shape(g / b, a.shape())),
                needs[1].then(|| {
                    let gb = &(g * a) / &(b * b);
                    reduce_to_shape(-gb, b.shape())
                }),
            ]
        })
    }

    /// Rank-2 matrix product.
    pub fn matmul(&self, other: Var<'g>) -> Var<'g> {
        let value = as_2d(&self.value()).dot(&as_2d(&other.value())).into_dyn();
        self.binary(other, value, |g, a, b, needs| {
            let g2 = as_2d(g);
            vec![
                needs[0].then(|| g2.dot(&as_2d(b).t()).into_dyn()),
                needs[1].then(|| as_2d(a).t().dot(&g2).into_dyn()),
            ]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let value = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.graph.apply(&[*self], value, move |g, _| {
            vec![Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .unwrap(),
            )]
        })
    }

    pub fn sum(&self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = ArrayD::from_elem(IxDyn(&[]), x.sum());
        self.graph.apply(&[*self], value, move |g, _| {
            let s = *g.iter().next().unwrap();
            vec![Some(ArrayD::from_elem(IxDyn(&shape), s))]
        })
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes_keep(&self, axes: &[usize]) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut value = (*x).clone();
        for &ax in sorted.iter().rev() {
            value = value.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        self.graph.apply(&[*self], value, move |g, _| {
            vec![Some(broadcast_to(g, &shape))]
        })
    }

    pub fn mean_axes_keep(&self, axes: &[usize]) -> Var<'g> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes_keep(axes).mul_scalar(1.0 / count as f64)
    }

    /// Row-wise log-softmax of a rank-2 tensor, max-subtracted.
    pub fn log_softmax(&self) -> Var<'g> {
        let x = self.value();
        let x2 = as_2d(&x);
        let mut out = x2.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| v - m);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let out = out.into_dyn();
        let y = Arc::new(out.clone());
        self.graph.apply(&[*self], out, move |g, _| {
            let g2 = as_2d(g);
            let y2 = as_2d(&y);
            let mut dx = g2.to_owned();
            for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y2.rows()) {
                let s: f64 = drow.sum();
                Zip::from(&mut drow)
                    .and(&yrow)
                    .for_each(|d, &yv| *d -= yv.exp() * s);
            }
            vec![Some(dx.into_dyn())]
        })
    }

    /// Picks `x[b, index[b]]` from a rank-2 tensor, giving a length-B vector.
    pub fn pick(&self, index: &[usize]) -> Var<'g> {
        let x = self.value();
        let x2 = as_2d(&x);
        assert_eq!(x2.nrows(), index.len(), "pick: one index per row");
        let value = ndarray::Array1::from_iter(index.iter().enumerate().map(|(b, &k)| x2[[b, k]]))
            .into_dyn();
        let shape = x2.dim();
        let index = index.to_vec();
        self.graph.apply(&[*self], value, move |g, _| {
            let mut dx = ndarray::Array2::<f64>::zeros(shape);
            for (b, &k) in index.iter().enumerate() {
                dx[[b, k]] = g[b];
            }
            vec![Some(dx.into_dyn())]
        })
    }

    /// Maps the last two axes through `(u, v) -> ((H - u) mod H, (W - v) mod W)`.
    pub fn mirror_2d(&self) -> Var<'g> {
        let value = mirror_last2(&self.value());
        self.graph
            .apply(&[*self], value, |g, _| vec![Some(mirror_last2(g))])
    }
}

/// Point reflection of the last two axes about the DFT origin. An involution.
pub fn mirror_last2(x: &Tensor) -> Tensor {
    let nd = x.ndim();
    assert!(nd >= 2, "mirror needs at least two axes");
    let h = x.shape()[nd - 2];
    let w = x.shape()[nd - 1];
    let x = x.as_standard_layout();
    let src = x.as_slice().unwrap();
    let mut out = vec![0.0; src.len()];
    for (plane_in, plane_out) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for u in 0..h {
            let mu = (h - u) % h;
            for v in 0..w {
                let mv = (w - v) % w;
                plane_out[u * w + v] = plane_in[mu * w + mv];
            }
        }
    }
    ArrayD::from_shape_vec(x.raw_dim(), out).unwrap()
}

macro_rules! var_binop {
    ($trait:ident, $method:ident, $impl:ident) => {
        impl<'g> $trait for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: Var<'g>) -> Var<'g> {
                Var::$impl(&self, rhs)
            }
        }
    };
}

var_binop!(Add, add, add);
var_binop!(Sub, sub, sub);
var_binop!(Mul, mul, mul);
var_binop!(Div, div, div);

impl<'g> Add<f64> for Var<'g> {
    type Output = Var<'g>;
    fn add(self, c: f64) -> Var<'g> {
        self.add_scalar(c)
    }
}

impl<'g> Sub<f64> for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, c: f64) -> Var<'g> {
        self.add_scalar(-c)
    }
}

impl<'g> Mul<f64> for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, c: f64) -> Var<'g> {
        self.mul_scalar(c)
    }
}

impl<'g> Div<f64> for Var<'g> {
    type Output = Var<'g>;
    fn div(self, c: f64) -> Var<'g> {
        self.mul_scalar(1.0 / c)
    }
}

impl<'g> Mul<Var<'g>> for f64 {
    type Output = Var<'g>;
    fn mul(self, v: Var<'g>) -> Var<'g> {
        v.mul_scalar(self)
    }
}

impl<'g> Sub<Var<'g>> for f64 {
    type Output = Var<'g>;
    fn sub(self, v: Var<'g>) -> Var<'g> {
        v.mul_scalar(-1.0).add_scalar(self)
    }
}

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }
}
