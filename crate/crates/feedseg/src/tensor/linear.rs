//! Dense layers, batched matmul and the prompt-embedding gather.

use super::{GradFn, Scalar, Tape, Var};
use crate::par;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

struct LinearFn;

impl<F: Scalar> GradFn<F> for LinearFn {
    fn backward(
        &self,
        gout: &ArrayD<F>,
        _v: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        let (x, w) = (parents[0], parents[1]);
        let (rows, k) = (x.shape()[0], x.shape()[1]);
        let nout = w.shape()[0];
        let xv = ArrayView2::from_shape((rows, k), x.as_slice().unwrap()).unwrap();
        let wv = ArrayView2::from_shape((nout, k), w.as_slice().unwrap()).unwrap();
        let gv = ArrayView2::from_shape((rows, nout), gout.as_slice().unwrap()).unwrap();

        let gx = needs[0].then(|| gv.dot(&wv).into_dyn());
        let gw = needs[1].then(|| gv.t().dot(&xv).as_standard_layout().to_owned().into_dyn());
        let mut out = vec![gx, gw];
        if parents.len() == 3 {
            out.push(needs[2].then(|| gv.sum_axis(ndarray::Axis(0)).into_dyn()));
        }
        out
    }
}

struct MatmulBatchedFn;

impl<F: Scalar> GradFn<F> for MatmulBatchedFn {
    fn backward(
        &self,
        gout: &ArrayD<F>,
        _v: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        let (a, b) = (parents[0], parents[1]);
        let (nb, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let n = b.shape()[2];
        let avs = a.as_slice().unwrap();
        let bvs = b.as_slice().unwrap();
        let gs = gout.as_slice().unwrap();

        let ga = needs[0].then(|| {
            let mut out = ArrayD::zeros(IxDyn(a.shape()));
            let os = out.as_slice_mut().unwrap();
            par::for_each_chunk_mut(os, m * k, |i, ga_i| {
                let gmat = ArrayView2::from_shape((m, n), &gs[i * m * n..(i + 1) * m * n]).unwrap();
                let bmat = ArrayView2::from_shape((k, n), &bvs[i * k * n..(i + 1) * k * n]).unwrap();
                let mut gam = ArrayViewMut2::from_shape((m, k), ga_i).unwrap();
                ndarray::linalg::general_mat_mul(F::one(), &gmat, &bmat.t(), F::zero(), &mut gam);
            });
            out
        });
        let gb = needs[1].then(|| {
            let mut out = ArrayD::zeros(IxDyn(b.shape()));
            let os = out.as_slice_mut().unwrap();
            par::for_each_chunk_mut(os, k * n, |i, gb_i| {
                let amat = ArrayView2::from_shape((m, k), &avs[i * m * k..(i + 1) * m * k]).unwrap();
                let gmat = ArrayView2::from_shape((m, n), &gs[i * m * n..(i + 1) * m * n]).unwrap();
                let mut gbm = ArrayViewMut2::from_shape((k, n), gb_i).unwrap();
                ndarray::linalg::general_mat_mul(F::one(), &amat.t(), &gmat, F::zero(), &mut gbm);
            });
            out
        });
        let _ = nb;
        vec![ga, gb]
    }
}

struct EmbeddingMeanFn {
    ids: Vec<Vec<usize>>,
}

impl<F: Scalar> GradFn<F> for EmbeddingMeanFn {
    fn backward(
        &self,
        gout: &ArrayD<F>,
        _v: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        let table = parents[0];
        let dim = table.shape()[1];
        vec![needs[0].then(|| {
            let mut gt = ArrayD::zeros(IxDyn(table.shape()));
            let gs = gout.as_slice().unwrap();
            let ts = gt.as_slice_mut().unwrap();
            for (n, ids) in self.ids.iter().enumerate() {
                if ids.is_empty() {
                    continue;
                }
                let inv = F::one() / F::f(ids.len() as f64);
                for &id in ids {
                    for d in 0..dim {
                        ts[id * dim + d] = ts[id * dim + d] + gs[n * dim + d] * inv;
                    }
                }
            }
            gt
        })]
    }
}

impl<F: Scalar> Tape<F> {
    /// `x (R, K) . w (N, K)^T + b -> (R, N)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ndim(), 2, "linear expects 2-D input");
        let (rows, k) = (xv.shape()[0], xv.shape()[1]);
        let nout = wv.shape()[0];
        assert_eq!(wv.shape()[1], k, "linear weight shape");
        let xm = ArrayView2::from_shape((rows, k), xv.as_slice().unwrap()).unwrap();
        let wm = ArrayView2::from_shape((nout, k), wv.as_slice().unwrap()).unwrap();
        let mut out = xm.dot(&wm.t());
        if let Some(b) = b {
            let bv = self.value(b).as_slice().unwrap().to_vec();
            for mut row in out.rows_mut() {
                for (o, &bi) in row.iter_mut().zip(&bv) {
                    *o = *o + bi;
                }
            }
        }
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        self.push_op(
            out.as_standard_layout().to_owned().into_dyn(),
            parents,
            Box::new(LinearFn),
        )
    }

    /// Batched matmul `(B, M, K) . (B, K, N) -> (B, M, N)`.
    pub fn matmul_batched(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = bv.shape()[2];
        assert_eq!(bv.shape()[0], nb);
        assert_eq!(bv.shape()[1], k);
        let avs = av.as_slice().unwrap();
        let bvs = bv.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[nb, m, n]));
        {
            let os = out.as_slice_mut().unwrap();
            par::for_each_chunk_mut(os, m * n, |i, oi| {
                let amat =
                    ArrayView2::from_shape((m, k), &avs[i * m * k..(i + 1) * m * k]).unwrap();
                let bmat =
                    ArrayView2::from_shape((k, n), &bvs[i * k * n..(i + 1) * k * n]).unwrap();
                let mut om = ArrayViewMut2::from_shape((m, n), oi).unwrap();
                ndarray::linalg::general_mat_mul(F::one(), &amat, &bmat, F::zero(), &mut om);
            });
        }
        self.push_op(out, vec![a, b], Box::new(MatmulBatchedFn))
    }

    /// Mean-pooled embedding lookup: one id list per sample, `(N, dim)` out.
    /// Samples with empty id lists produce a zero vector.
    pub fn embedding_mean(&mut self, table: Var, ids: Vec<Vec<usize>>) -> Var {
        let tv = self.value(table);
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let ts = tv.as_slice().unwrap();
        let n = ids.len();
        let mut out = ArrayD::zeros(IxDyn(&[n, dim]));
        {
            let os = out.as_slice_mut().unwrap();
            for (i, sample) in ids.iter().enumerate() {
                if sample.is_empty() {
                    continue;
                }
                let inv = F::one() / F::f(sample.len() as f64);
                for &id in sample {
                    assert!(id < vocab, "token id {id} out of vocabulary {vocab}");
                    for d in 0..dim {
                        os[i * dim + d] = os[i * dim + d] + ts[id * dim + d] * inv;
                    }
                }
            }
        }
        self.push_op(out, vec![table], Box::new(EmbeddingMeanFn { ids }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{numeric_grad, rel_err};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_grads_match() {
        let x0 = randn(&[3, 4], 81);
        let w0 = randn(&[5, 4], 82);
        let b0 = randn(&[5], 83);
        let run = |xv: &ArrayD<f64>, wv: &ArrayD<f64>, bv: &ArrayD<f64>| {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let w = t.leaf(wv.clone());
            let b = t.leaf(bv.clone());
            let y = t.linear(x, w, Some(b));
            let sq = t.mul(y, y);
            let l = t.mean_all(sq);
            t.scalar(l)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let b = tape.leaf(b0.clone());
        let y = tape.linear(x, w, Some(b));
        let sq = tape.mul(y, y);
        let l = tape.mean_all(sq);
        let grads = tape.backward(l);
        for (leaf, base, which) in [(x, &x0, 0usize), (w, &w0, 1), (b, &b0, 2)] {
            for k in 0..base.len().min(4) {
                let num = numeric_grad(
                    |v| {
                        let mut xs = [x0.clone(), w0.clone(), b0.clone()];
                        xs[which].as_slice_mut().unwrap()[k] = v;
                        run(&xs[0], &xs[1], &xs[2])
                    },
                    base.as_slice().unwrap()[k],
                );
                assert!(rel_err(grads.get(leaf).unwrap().as_slice().unwrap()[k], num) < 1e-7);
            }
        }
    }

    #[test]
    fn matmul_batched_matches_per_slice_dot() {
        let a0 = randn(&[3, 2, 4], 84);
        let b0 = randn(&[3, 4, 5], 85);
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let y = tape.matmul_batched(a, b);
        for i in 0..3 {
            let am = ArrayView2::from_shape((2, 4), &a0.as_slice().unwrap()[i * 8..i * 8 + 8])
                .unwrap();
            let bm = ArrayView2::from_shape((4, 5), &b0.as_slice().unwrap()[i * 20..i * 20 + 20])
                .unwrap();
            let expect = am.dot(&bm);
            for r in 0..2 {
                for c in 0..5 {
                    assert!((tape.value(y)[[i, r, c]] - expect[[r, c]]).abs() < 1e-12);
                }
            }
        }
        let sq = tape.mul(y, y);
        let l = tape.mean_all(sq);
        let grads = tape.backward(l);
        let num = numeric_grad(
            |v| {
                let mut ap = a0.clone();
                ap.as_slice_mut().unwrap()[5] = v;
                let mut t = Tape::new();
                let a = t.leaf(ap);
                let b = t.leaf(b0.clone());
                let y = t.matmul_batched(a, b);
                let sq = t.mul(y, y);
                let l = t.mean_all(sq);
                t.scalar(l)
            },
            a0.as_slice().unwrap()[5],
        );
        assert!(rel_err(grads.get(a).unwrap().as_slice().unwrap()[5], num) < 1e-7);
    }

    #[test]
    fn embedding_mean_pools_and_scatters() {
        let t0 = randn(&[6, 3], 86);
        let ids = vec![vec![0, 2], vec![5], vec![]];
        let mut tape = Tape::new();
        let tb = tape.leaf(t0.clone());
        let e = tape.embedding_mean(tb, ids.clone());
        assert_eq!(tape.shape(e), &[3, 3]);
        for d in 0..3 {
            let expect = (t0[[0, d]] + t0[[2, d]]) / 2.0;
            assert!((tape.value(e)[[0, d]] - expect).abs() < 1e-12);
            assert_eq!(tape.value(e)[[2, d]], 0.0);
        }
        let sq = tape.mul(e, e);
        let l = tape.mean_all(sq);
        let grads = tape.backward(l);
        let g = grads.get(tb).unwrap();
        // row 1 never referenced -> zero gradient
        for d in 0..3 {
            assert_eq!(g[[1, d]], 0.0);
        }
        let num = numeric_grad(
            |v| {
                let mut tp = t0.clone();
                tp.as_slice_mut().unwrap()[0] = v;
                let mut t = Tape::new();
                let tb = t.leaf(tp);
                let e = t.embedding_mean(tb, ids.clone());
                let sq = t.mul(e, e);
                let l = t.mean_all(sq);
                t.scalar(l)
            },
            t0.as_slice().unwrap()[0],
        );
        assert!(rel_err(g.as_slice().unwrap()[0], num) < 1e-8);
    }
}
