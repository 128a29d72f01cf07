//! Elementwise, broadcast, reduction and shape operations.

use super::{GradFn, Scalar, Tape, Var};
use ndarray::{ArrayD, Axis, IxDyn, Slice};

/// NumPy-style right-aligned broadcast shape.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast: {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum a gradient down to `target` shape (inverse of broadcasting).
pub(crate) fn reduce_to<F: Scalar>(g: &ArrayD<F>, target: &[usize]) -> ArrayD<F> {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > target.len() {
        out = out.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && out.shape()[ax] != 1 {
            let summed = out.sum_axis(Axis(ax));
            out = summed.insert_axis(Axis(ax));
        }
    }
    debug_assert_eq!(out.shape(), target);
    out
}

fn bcast_bin<F: Scalar>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    f: impl Fn(F, F) -> F,
) -> ArrayD<F> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast a");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast b");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinFn {
    kind: BinKind,
}

impl<F: Scalar> GradFn<F> for BinFn {
    fn backward(
        &self,
        g: &ArrayD<F>,
        _value: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        let (a, b) = (parents[0], parents[1]);
        match self.kind {
            BinKind::Add => vec![
                needs[0].then(|| reduce_to(g, a.shape())),
                needs[1].then(|| reduce_to(g, b.shape())),
            ],
            BinKind::Sub => vec![
                needs[0].then(|| reduce_to(g, a.shape())),
                needs[1].then(|| reduce_to(&g.mapv(|x| -x), b.shape())),
            ],
            BinKind::Mul => vec![
                needs[0].then(|| reduce_to(&bcast_bin(g, b, |x, y| x * y), a.shape())),
                needs[1].then(|| reduce_to(&bcast_bin(g, a, |x, y| x * y), b.shape())),
            ],
            BinKind::Div => {
                let ga = needs[0].then(|| reduce_to(&bcast_bin(g, b, |x, y| x / y), a.shape()));
                let gb = needs[1].then(|| {
                    let ga_full = bcast_bin(g, a, |x, y| x * y); // g * a
                    let gb_full = bcast_bin(&ga_full, b, |x, y| -x / (y * y));
                    reduce_to(&gb_full, b.shape())
                });
                vec![ga, gb]
            }
        }
    }
}

struct UnaryFn<F: Scalar> {
    dfdx: Box<dyn Fn(&ArrayD<F>, &ArrayD<F>, &ArrayD<F>) -> ArrayD<F>>,
}

impl<F: Scalar> GradFn<F> for UnaryFn<F> {
    fn backward(
        &self,
        g: &ArrayD<F>,
        value: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        vec![needs[0].then(|| (self.dfdx)(g, value, parents[0]))]
    }
}

struct ReshapeFn {
    from: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for ReshapeFn {
    fn backward(
        &self,
        g: &ArrayD<F>,
        _v: &ArrayD<F>,
        _p: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        vec![needs[0].then(|| {
            g.to_owned()
                .into_shape_with_order(IxDyn(&self.from))
                .expect("reshape grad")
        })]
    }
}

struct PermuteFn {
    axes: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for PermuteFn {
    fn backward(
        &self,
        g: &ArrayD<F>,
        _v: &ArrayD<F>,
        _p: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        let mut inv = vec![0usize; self.axes.len()];
        for (i, &a) in self.axes.iter().enumerate() {
            inv[a] = i;
        }
        vec![needs[0].then(|| {
            g.view()
                .permuted_axes(IxDyn(&inv))
                .as_standard_layout()
                .to_owned()
        })]
    }
}

struct ConcatFn {
    axis: usize,
    sizes: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for ConcatFn {
    fn backward(
        &self,
        g: &ArrayD<F>,
        _v: &ArrayD<F>,
        _p: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut offset = 0isize;
        for (i, &sz) in self.sizes.iter().enumerate() {
            let grad = needs[i].then(|| {
                g.slice_axis(Axis(self.axis), Slice::from(offset..offset + sz as isize))
                    .as_standard_layout()
                    .to_owned()
            });
            out.push(grad);
            offset += sz as isize;
        }
        out
    }
}

struct MeanAllFn {
    shape: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for MeanAllFn {
    fn backward(
        &self,
        g: &ArrayD<F>,
        _v: &ArrayD<F>,
        _p: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        let n: usize = self.shape.iter().product();
        let gs = g.iter().copied().next().unwrap() / F::f(n as f64);
        vec![needs[0].then(|| ArrayD::from_elem(IxDyn(&self.shape), gs))]
    }
}

struct SumPerSampleFn {
    shape: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for SumPerSampleFn {
    fn backward(
        &self,
        g: &ArrayD<F>,
        _v: &ArrayD<F>,
        _p: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        vec![needs[0].then(|| {
            let mut out = ArrayD::zeros(IxDyn(&self.shape));
            let per = self.shape[1..].iter().product::<usize>();
            let os = out.as_slice_mut().unwrap();
            for (n, &gn) in g.iter().enumerate() {
                os[n * per..(n + 1) * per].iter_mut().for_each(|x| *x = gn);
            }
            out
        })]
    }
}

struct SpatialMeanFn {
    shape: Vec<usize>, // (N, C, H, W)
}

impl<F: Scalar> GradFn<F> for SpatialMeanFn {
    fn backward(
        &self,
        g: &ArrayD<F>,
        _v: &ArrayD<F>,
        _p: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        let (h, w) = (self.shape[2], self.shape[3]);
        let inv = F::one() / F::f((h * w) as f64);
        vec![needs[0].then(|| {
            let mut out = ArrayD::zeros(IxDyn(&self.shape));
            let os = out.as_slice_mut().unwrap();
            let gs = g.as_slice().unwrap();
            for (nc, &gv) in gs.iter().enumerate() {
                let base = nc * h * w;
                let gi = gv * inv;
                os[base..base + h * w].iter_mut().for_each(|x| *x = gi);
            }
            out
        })]
    }
}

struct SoftmaxFn;

impl<F: Scalar> GradFn<F> for SoftmaxFn {
    fn backward(
        &self,
        g: &ArrayD<F>,
        value: &ArrayD<F>,
        _p: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        // dx = y * (g - sum(g*y, last))
        vec![needs[0].then(|| {
            let last = value.ndim() - 1;
            let cols = value.shape()[last];
            let mut out = g * value;
            let rows = out.len() / cols;
            let os = out.as_slice_mut().unwrap();
            let ys = value.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            for r in 0..rows {
                let lo = r * cols;
                let dot: F = os[lo..lo + cols].iter().copied().sum();
                for c in 0..cols {
                    os[lo + c] = ys[lo + c] * (gs[lo + c] - dot);
                }
            }
            out
        })]
    }
}

struct BceLogitsFn<F: Scalar> {
    targets: ArrayD<F>,
}

impl<F: Scalar> GradFn<F> for BceLogitsFn<F> {
    fn backward(
        &self,
        g: &ArrayD<F>,
        _v: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        let x = parents[0];
        let gs = g.iter().copied().next().unwrap();
        let inv_n = F::one() / F::f(x.len() as f64);
        vec![needs[0].then(|| {
            let mut out = x.clone();
            ndarray::Zip::from(&mut out)
                .and(&self.targets)
                .for_each(|o, &t| {
                    let sig = F::one() / (F::one() + (-*o).exp());
                    *o = (sig - t) * inv_n * gs;
                });
            out
        })]
    }
}

impl<F: Scalar> Tape<F> {
    fn bin(&mut self, a: Var, b: Var, kind: BinKind) -> Var {
        let value = match kind {
            BinKind::Add => bcast_bin(self.value(a), self.value(b), |x, y| x + y),
            BinKind::Sub => bcast_bin(self.value(a), self.value(b), |x, y| x - y),
            BinKind::Mul => bcast_bin(self.value(a), self.value(b), |x, y| x * y),
            BinKind::Div => bcast_bin(self.value(a), self.value(b), |x, y| x / y),
        };
        self.push_op(value, vec![a, b], Box::new(BinFn { kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.bin(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.bin(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.bin(a, b, BinKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.bin(a, b, BinKind::Div)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push_op(
            value,
            vec![a],
            Box::new(UnaryFn {
                dfdx: Box::new(move |g, _y, _x| g.mapv(|v| v * c)),
            }),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.push_op(
            value,
            vec![a],
            Box::new(UnaryFn {
                dfdx: Box::new(|g, _y, _x| g.clone()),
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push_op(
            value,
            vec![a],
            Box::new(UnaryFn {
                dfdx: Box::new(|g, _y, x| {
                    let mut out = g.clone();
                    ndarray::Zip::from(&mut out).and(x).for_each(|o, &xi| {
                        if xi <= F::zero() {
                            *o = F::zero();
                        }
                    });
                    out
                }),
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| F::one() / (F::one() + (-x).exp()));
        self.push_op(
            value,
            vec![a],
            Box::new(UnaryFn {
                dfdx: Box::new(|g, y, _x| {
                    let mut out = g.clone();
                    ndarray::Zip::from(&mut out)
                        .and(y)
                        .for_each(|o, &yi| *o = *o * yi * (F::one() - yi));
                    out
                }),
            }),
        )
    }

    /// GELU, tanh approximation (backward uses the matching analytic form).
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = F::f(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = F::f(0.044715);
        let half = F::f(0.5);
        let value = self.value(a).mapv(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (F::one() + u.tanh())
        });
        self.push_op(
            value,
            vec![a],
            Box::new(UnaryFn {
                dfdx: Box::new(move |g, _y, x| {
                    let mut out = g.clone();
                    ndarray::Zip::from(&mut out).and(x).for_each(|o, &xi| {
                        let u = c * (xi + k * xi * xi * xi);
                        let t = u.tanh();
                        let sech2 = F::one() - t * t;
                        let du = c * (F::one() + F::f(3.0) * k * xi * xi);
                        let d = half * (F::one() + t) + half * xi * sech2 * du;
                        *o = *o * d;
                    });
                    out
                }),
            }),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.ln());
        self.push_op(
            value,
            vec![a],
            Box::new(UnaryFn {
                dfdx: Box::new(|g, _y, x| {
                    let mut out = g.clone();
                    ndarray::Zip::from(&mut out).and(x).for_each(|o, &xi| *o = *o / xi);
                    out
                }),
            }),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let value = self.value(a).mapv(|x| x.max(lo).min(hi));
        self.push_op(
            value,
            vec![a],
            Box::new(UnaryFn {
                dfdx: Box::new(move |g, _y, x| {
                    let mut out = g.clone();
                    ndarray::Zip::from(&mut out).and(x).for_each(|o, &xi| {
                        if xi <= lo || xi >= hi {
                            *o = F::zero();
                        }
                    });
                    out
                }),
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let from = self.shape(a).to_vec();
        assert_eq!(
            from.iter().product::<usize>(),
            shape.iter().product::<usize>(),
            "reshape length mismatch"
        );
        let value = self
            .value(a)
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        self.push_op(value, vec![a], Box::new(ReshapeFn { from }))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push_op(value, vec![a], Box::new(PermuteFn { axes: axes.to_vec() }))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat");
        let sizes = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        self.push_op(
            value.as_standard_layout().to_owned(),
            parts.to_vec(),
            Box::new(ConcatFn { axis, sizes }),
        )
    }

    /// Mean over every element, producing a `[1]`-shaped scalar node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.len();
        let m = v.iter().copied().sum::<F>() / F::f(n as f64);
        let shape = v.shape().to_vec();
        self.push_op(
            ArrayD::from_elem(IxDyn(&[1]), m),
            vec![a],
            Box::new(MeanAllFn { shape }),
        )
    }

    /// Sum over all axes except the first: `(N, ...) -> (N,)`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let n = shape[0];
        let per: usize = shape[1..].iter().product();
        let s = v.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[n]));
        {
            let os = out.as_slice_mut().unwrap();
            for i in 0..n {
                os[i] = s[i * per..(i + 1) * per].iter().copied().sum();
            }
        }
        self.push_op(out, vec![a], Box::new(SumPerSampleFn { shape }))
    }

    /// Global average pool: `(N, C, H, W) -> (N, C)`.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        assert_eq!(shape.len(), 4, "spatial_mean expects NCHW");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let inv = F::one() / F::f((h * w) as f64);
        let s = v.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[n, c]));
        {
            let os = out.as_slice_mut().unwrap();
            for nc in 0..n * c {
                os[nc] = s[nc * h * w..(nc + 1) * h * w].iter().copied().sum::<F>() * inv;
            }
        }
        self.push_op(out, vec![a], Box::new(SpatialMeanFn { shape }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = *v.shape().last().expect("softmax needs an axis");
        let mut value = v.clone();
        {
            let s = value.as_slice_mut().unwrap();
            for row in s.chunks_mut(cols) {
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    sum = sum + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / sum;
                }
            }
        }
        self.push_op(value, vec![a], Box::new(SoftmaxFn))
    }

    /// Mean binary cross-entropy on logits, in the stable log-sum-exp form:
    /// `mean(max(x,0) - x*t + ln(1 + exp(-|x|)))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: ArrayD<F>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape(), "bce_with_logits shapes");
        let mut acc = F::zero();
        ndarray::Zip::from(x).and(&targets).for_each(|&xi, &t| {
            let pos = xi.max(F::zero());
            acc = acc + pos - xi * t + (F::one() + (-xi.abs()).exp()).ln();
        });
        let mean = acc / F::f(x.len() as f64);
        self.push_op(
            ArrayD::from_elem(IxDyn(&[1]), mean),
            vec![logits],
            Box::new(BceLogitsFn { targets }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{numeric_grad, rel_err};
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Check d(loss)/d(input[k]) for a graph builder against central differences.
    fn check_unary(build: impl Fn(&mut Tape<f64>, Var) -> Var, shape: &[usize], seed: u64) {
        let x0 = randn(shape, seed);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss);
        let gx = grads.get(x).expect("grad");
        for k in 0..x0.len().min(8) {
            let num = numeric_grad(
                |v| {
                    let mut xp = x0.clone();
                    xp.as_slice_mut().unwrap()[k] = v;
                    let mut t = Tape::new();
                    let xv = t.leaf(xp);
                    let yv = build(&mut t, xv);
                    let l = t.mean_all(yv);
                    t.scalar(l)
                },
                x0.as_slice().unwrap()[k],
            );
            let ana = gx.as_slice().unwrap()[k];
            assert!(
                rel_err(ana, num) < 1e-7,
                "k={k}: analytic {ana} vs numeric {num}"
            );
        }
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        check_unary(|t, x| t.relu(x), &[3, 4], 1);
        check_unary(|t, x| t.sigmoid(x), &[3, 4], 2);
        check_unary(|t, x| t.gelu(x), &[3, 4], 3);
        check_unary(
            |t, x| {
                let y = t.add_scalar(x, 3.0);
                t.ln(y)
            },
            &[5],
            4,
        );
        check_unary(|t, x| t.scale(x, -2.5), &[2, 3], 5);
        check_unary(|t, x| t.softmax_last(x), &[4, 5], 6);
    }

    #[test]
    fn broadcast_mul_reduces_gradient_correctly() {
        // (N,C,H,W) * (N,1,H,W) exercises the mask-gating broadcast.
        let a0 = randn(&[2, 3, 4, 4], 7);
        let b0 = randn(&[2, 1, 4, 4], 8);
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let y = tape.mul(a, b);
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss);
        let gb = grads.get(b).expect("grad b");
        assert_eq!(gb.shape(), b0.shape());
        let num = numeric_grad(
            |v| {
                let mut bp = b0.clone();
                bp.as_slice_mut().unwrap()[5] = v;
                let mut t = Tape::new();
                let av = t.constant(a0.clone());
                let bv = t.leaf(bp);
                let y = t.mul(av, bv);
                let l = t.mean_all(y);
                t.scalar(l)
            },
            b0.as_slice().unwrap()[5],
        );
        assert!(rel_err(gb.as_slice().unwrap()[5], num) < 1e-8);
    }

    #[test]
    fn div_and_sub_grads() {
        let a0 = randn(&[6], 9).mapv(|x| x + 3.0);
        let b0 = randn(&[6], 10).mapv(|x| x + 3.0);
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let q = tape.div(a, b);
        let d = tape.sub(q, a);
        let loss = tape.mean_all(d);
        let grads = tape.backward(loss);
        for (leaf, base, other_is_a) in [(a, &a0, false), (b, &b0, true)] {
            let g = grads.get(leaf).unwrap();
            for k in 0..3 {
                let num = numeric_grad(
                    |v| {
                        let mut ap = a0.clone();
                        let mut bp = b0.clone();
                        if other_is_a {
                            bp.as_slice_mut().unwrap()[k] = v;
                        } else {
                            ap.as_slice_mut().unwrap()[k] = v;
                        }
                        let mut t = Tape::new();
                        let av = t.leaf(ap);
                        let bv = t.leaf(bp);
                        let q = t.div(av, bv);
                        let d = t.sub(q, av);
                        let l = t.mean_all(d);
                        t.scalar(l)
                    },
                    base.as_slice().unwrap()[k],
                );
                assert!(rel_err(g.as_slice().unwrap()[k], num) < 1e-7);
            }
        }
    }

    #[test]
    fn concat_routes_gradients_to_each_part() {
        let a0 = randn(&[2, 2, 3, 3], 11);
        let b0 = randn(&[2, 4, 3, 3], 12);
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let c = tape.concat(1, &[a, b]);
        assert_eq!(tape.shape(c), &[2, 6, 3, 3]);
        let s = tape.sum_per_sample(c);
        let loss = tape.mean_all(s);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap().shape(), a0.shape());
        assert_eq!(grads.get(b).unwrap().shape(), b0.shape());
        // d(mean of per-sample sums)/dx = 1/N everywhere
        assert!((grads.get(a).unwrap().as_slice().unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x0 = randn(&[3, 4, 7], 13);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(x0);
        let y = tape.softmax_last(x);
        let v = tape.value(y);
        for row in v.as_slice().unwrap().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_with_logits_matches_direct_formula_and_grad() {
        let x0 = randn(&[4, 4], 14).mapv(|x| x * 3.0);
        let t0 = randn(&[4, 4], 15).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = tape.bce_with_logits(x, t0.clone());
        // direct per-element summation oracle
        let mut expect = 0.0;
        for (xi, ti) in x0.iter().zip(t0.iter()) {
            let p = 1.0 / (1.0 + (-xi).exp());
            expect += -(ti * p.ln() + (1.0 - ti) * (1.0 - p).ln());
        }
        expect /= x0.len() as f64;
        assert!((tape.scalar(loss) - expect).abs() < 1e-9);

        let grads = tape.backward(loss);
        let g = grads.get(x).unwrap();
        let num = numeric_grad(
            |v| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[3] = v;
                let mut t = Tape::new();
                let xv = t.leaf(xp);
                let l = t.bce_with_logits(xv, t0.clone());
                t.scalar(l)
            },
            x0.as_slice().unwrap()[3],
        );
        assert!(rel_err(g.as_slice().unwrap()[3], num) < 1e-8);
    }

    #[test]
    fn saturated_logit_contribution_is_tiny() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 20.0));
        let t = ArrayD::from_elem(IxDyn(&[1]), 1.0);
        let loss = tape.bce_with_logits(x, t);
        assert!(tape.scalar(loss) < 3e-9);
    }
}
