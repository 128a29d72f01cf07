//! Batch normalization (per channel, NCHW) and layer normalization (last axis).

use super::{GradFn, Scalar, Tape, Var};
use ndarray::{ArrayD, IxDyn};

struct BatchNormTrainFn<F: Scalar> {
    mean: Vec<F>,
    var: Vec<F>,
    eps: F,
}

impl<F: Scalar> GradFn<F> for BatchNormTrainFn<F> {
    fn backward(
        &self,
        gout: &ArrayD<F>,
        _v: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        let x = parents[0];
        let gamma = parents[1];
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let m = F::f((n * h * w) as f64);
        let xs = x.as_slice().unwrap();
        let gs = gout.as_slice().unwrap();
        let gam = gamma.as_slice().unwrap();

        // Per-channel sums of g and g*xhat.
        let mut sum_g = vec![F::zero(); c];
        let mut sum_gx = vec![F::zero(); c];
        let plane = h * w;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let inv_s = F::one() / (self.var[ch] + self.eps).sqrt();
                let mu = self.mean[ch];
                for k in 0..plane {
                    let g = gs[base + k];
                    sum_g[ch] = sum_g[ch] + g;
                    sum_gx[ch] = sum_gx[ch] + g * (xs[base + k] - mu) * inv_s;
                }
            }
        }

        let gx = needs[0].then(|| {
            let mut out = ArrayD::zeros(IxDyn(x.shape()));
            let os = out.as_slice_mut().unwrap();
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    let inv_s = F::one() / (self.var[ch] + self.eps).sqrt();
                    let mu = self.mean[ch];
                    let k1 = sum_g[ch] / m;
                    let k2 = sum_gx[ch] / m;
                    let ga = gam[ch] * inv_s;
                    for k in 0..plane {
                        let xhat = (xs[base + k] - mu) * inv_s;
                        os[base + k] = ga * (gs[base + k] - k1 - xhat * k2);
                    }
                }
            }
            out
        });
        let ggamma = needs[1]
            .then(|| ArrayD::from_shape_vec(IxDyn(&[c]), sum_gx.clone()).unwrap());
        let gbeta = needs[2].then(|| ArrayD::from_shape_vec(IxDyn(&[c]), sum_g.clone()).unwrap());
        vec![gx, ggamma, gbeta]
    }
}

struct BatchNormEvalFn<F: Scalar> {
    mean: Vec<F>,
    var: Vec<F>,
    eps: F,
}

impl<F: Scalar> GradFn<F> for BatchNormEvalFn<F> {
    fn backward(
        &self,
        gout: &ArrayD<F>,
        _v: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        let x = parents[0];
        let gamma = parents[1];
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let plane = h * w;
        let xs = x.as_slice().unwrap();
        let gs = gout.as_slice().unwrap();
        let gam = gamma.as_slice().unwrap();

        let mut sum_g = vec![F::zero(); c];
        let mut sum_gx = vec![F::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let inv_s = F::one() / (self.var[ch] + self.eps).sqrt();
                for k in 0..plane {
                    sum_g[ch] = sum_g[ch] + gs[base + k];
                    sum_gx[ch] = sum_gx[ch] + gs[base + k] * (xs[base + k] - self.mean[ch]) * inv_s;
                }
            }
        }
        let gx = needs[0].then(|| {
            let mut out = ArrayD::zeros(IxDyn(x.shape()));
            let os = out.as_slice_mut().unwrap();
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    let scale = gam[ch] / (self.var[ch] + self.eps).sqrt();
                    for k in 0..plane {
                        os[base + k] = gs[base + k] * scale;
                    }
                }
            }
            out
        });
        let ggamma = needs[1].then(|| ArrayD::from_shape_vec(IxDyn(&[c]), sum_gx.clone()).unwrap());
        let gbeta = needs[2].then(|| ArrayD::from_shape_vec(IxDyn(&[c]), sum_g.clone()).unwrap());
        vec![gx, ggamma, gbeta]
    }
}

struct LayerNormFn<F: Scalar> {
    eps: F,
}

impl<F: Scalar> GradFn<F> for LayerNormFn<F> {
    fn backward(
        &self,
        gout: &ArrayD<F>,
        _v: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        let x = parents[0];
        let gamma = parents[1];
        let cols = *x.shape().last().unwrap();
        let rows = x.len() / cols;
        let xs = x.as_slice().unwrap();
        let gs = gout.as_slice().unwrap();
        let gam = gamma.as_slice().unwrap();
        let mf = F::f(cols as f64);

        let mut gx = needs[0].then(|| vec![F::zero(); x.len()]);
        let mut ggamma = vec![F::zero(); cols];
        let mut gbeta = vec![F::zero(); cols];
        for r in 0..rows {
            let lo = r * cols;
            let row = &xs[lo..lo + cols];
            let grow = &gs[lo..lo + cols];
            let mean = row.iter().copied().sum::<F>() / mf;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<F>()
                / mf;
            let inv_s = F::one() / (var + self.eps).sqrt();
            let mut sum_gg = F::zero();
            let mut sum_ggx = F::zero();
            for k in 0..cols {
                let xhat = (row[k] - mean) * inv_s;
                let gg = grow[k] * gam[k];
                sum_gg = sum_gg + gg;
                sum_ggx = sum_ggx + gg * xhat;
                ggamma[k] = ggamma[k] + grow[k] * xhat;
                gbeta[k] = gbeta[k] + grow[k];
            }
            if let Some(gxv) = gx.as_mut() {
                let k1 = sum_gg / mf;
                let k2 = sum_ggx / mf;
                for k in 0..cols {
                    let xhat = (row[k] - mean) * inv_s;
                    gxv[lo + k] = inv_s * (grow[k] * gam[k] - k1 - xhat * k2);
                }
            }
        }
        vec![
            gx.map(|v| ArrayD::from_shape_vec(IxDyn(x.shape()), v).unwrap()),
            needs[1].then(|| ArrayD::from_shape_vec(IxDyn(&[cols]), ggamma).unwrap()),
            needs[2].then(|| ArrayD::from_shape_vec(IxDyn(&[cols]), gbeta).unwrap()),
        ]
    }
}

/// Per-channel batch statistics returned from a training-mode forward so the
/// caller can fold them into its running buffers.
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Scalar> Tape<F> {
    /// Training-mode batch norm: normalizes with batch statistics (biased
    /// variance) and hands those statistics back for running-buffer updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> (Var, BatchStats<F>) {
        let v = self.value(x);
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let plane = h * w;
        let m = F::f((n * plane) as f64);
        let xs = v.as_slice().unwrap();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for k in 0..plane {
                    mean[ch] = mean[ch] + xs[base + k];
                }
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / m);
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for k in 0..plane {
                    let d = xs[base + k] - mean[ch];
                    var[ch] = var[ch] + d * d;
                }
            }
        }
        var.iter_mut().for_each(|v| *v = *v / m);

        let out = self.bn_apply(x, gamma, beta, &mean, &var, eps);
        let node = self.push_op(
            out,
            vec![x, gamma, beta],
            Box::new(BatchNormTrainFn {
                mean: mean.clone(),
                var: var.clone(),
                eps,
            }),
        );
        (node, BatchStats { mean, var })
    }

    /// Inference-mode batch norm using the provided running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
    ) -> Var {
        let out = self.bn_apply(x, gamma, beta, running_mean, running_var, eps);
        self.push_op(
            out,
            vec![x, gamma, beta],
            Box::new(BatchNormEvalFn {
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
                eps,
            }),
        )
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[F],
        var: &[F],
        eps: F,
    ) -> ArrayD<F> {
        let v = self.value(x);
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let plane = h * w;
        let xs = v.as_slice().unwrap();
        let gam = self.value(gamma).as_slice().unwrap().to_vec();
        let bet = self.value(beta).as_slice().unwrap().to_vec();
        let mut out = ArrayD::zeros(IxDyn(v.shape()));
        let os = out.as_slice_mut().unwrap();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let inv_s = F::one() / (var[ch] + eps).sqrt();
                let (mu, ga, be) = (mean[ch], gam[ch], bet[ch]);
                for k in 0..plane {
                    os[base + k] = (xs[base + k] - mu) * inv_s * ga + be;
                }
            }
        }
        out
    }

    /// Layer norm over the last axis with learned per-feature scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let v = self.value(x);
        let cols = *v.shape().last().unwrap();
        let rows = v.len() / cols;
        let xs = v.as_slice().unwrap();
        let gam = self.value(gamma).as_slice().unwrap().to_vec();
        let bet = self.value(beta).as_slice().unwrap().to_vec();
        let mf = F::f(cols as f64);
        let mut out = ArrayD::zeros(IxDyn(v.shape()));
        {
            let os = out.as_slice_mut().unwrap();
            for r in 0..rows {
                let lo = r * cols;
                let row = &xs[lo..lo + cols];
                let mean = row.iter().copied().sum::<F>() / mf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / mf;
                let inv_s = F::one() / (var + eps).sqrt();
                for k in 0..cols {
                    os[lo + k] = (row[k] - mean) * inv_s * gam[k] + bet[k];
                }
            }
        }
        self.push_op(out, vec![x, gamma, beta], Box::new(LayerNormFn { eps }))
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
    fn batch_norm_train_normalizes_and_grads_match() {
        let x0 = randn(&[2, 3, 2, 2], 71);
        let g0 = randn(&[3], 72).mapv(|v| v + 2.0);
        let b0 = randn(&[3], 73);
        let run = |xv: &ArrayD<f64>, gv: &ArrayD<f64>, bv: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let g = t.leaf(gv.clone());
            let b = t.leaf(bv.clone());
            let (y, _) = t.batch_norm_train(x, g, b, 1e-5);
            let sq = t.mul(y, y);
            let l = t.mean_all(sq);
            t.scalar(l)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.leaf(g0.clone());
        let b = tape.leaf(b0.clone());
        let (y, stats) = tape.batch_norm_train(x, g, b, 1e-5);
        // batch stats describe the input
        assert!((stats.mean[0] - x0.index_axis(ndarray::Axis(1), 0).mean().unwrap()).abs() < 1e-12);
        let sq = tape.mul(y, y);
        let l = tape.mean_all(sq);
        let grads = tape.backward(l);
        for k in [0usize, 5, 17] {
            let num = numeric_grad(
                |v| {
                    let mut xp = x0.clone();
                    xp.as_slice_mut().unwrap()[k] = v;
                    run(&xp, &g0, &b0)
                },
                x0.as_slice().unwrap()[k],
            );
            assert!(
                rel_err(grads.get(x).unwrap().as_slice().unwrap()[k], num) < 1e-6,
                "bn gx mismatch at {k}"
            );
        }
        for k in 0..3 {
            let num = numeric_grad(
                |v| {
                    let mut gp = g0.clone();
                    gp.as_slice_mut().unwrap()[k] = v;
                    run(&x0, &gp, &b0)
                },
                g0.as_slice().unwrap()[k],
            );
            assert!(rel_err(grads.get(g).unwrap().as_slice().unwrap()[k], num) < 1e-7);
        }
    }

    #[test]
    fn batch_norm_eval_is_affine_in_input() {
        let x0 = randn(&[1, 2, 2, 2], 74);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.constant(ArrayD::from_elem(IxDyn(&[2]), 1.5));
        let b = tape.constant(ArrayD::from_elem(IxDyn(&[2]), 0.25));
        let y = tape.batch_norm_eval(x, g, b, &[0.1, 0.2], &[1.0, 2.0], 1e-5);
        let l = tape.mean_all(y);
        let grads = tape.backward(l);
        let gx = grads.get(x).unwrap();
        // constant gradient per channel: gamma / sqrt(var + eps) / n
        let expect0 = 1.5 / (1.0f64 + 1e-5).sqrt() / 8.0;
        assert!((gx[[0, 0, 0, 0]] - expect0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_grads_match() {
        let x0 = randn(&[3, 5], 75);
        let g0 = randn(&[5], 76).mapv(|v| v + 1.5);
        let b0 = randn(&[5], 77);
        let run = |xv: &ArrayD<f64>, gv: &ArrayD<f64>, bv: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let g = t.leaf(gv.clone());
            let b = t.leaf(bv.clone());
            let y = t.layer_norm(x, g, b, 1e-6);
            let sq = t.mul(y, y);
            let l = t.mean_all(sq);
            t.scalar(l)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.leaf(g0.clone());
        let b = tape.leaf(b0.clone());
        let y = tape.layer_norm(x, g, b, 1e-6);
        let sq = tape.mul(y, y);
        let l = tape.mean_all(sq);
        let grads = tape.backward(l);
        for k in [0usize, 7, 13] {
            let num = numeric_grad(
                |v| {
                    let mut xp = x0.clone();
                    xp.as_slice_mut().unwrap()[k] = v;
                    run(&xp, &g0, &b0)
                },
                x0.as_slice().unwrap()[k],
            );
            assert!(rel_err(grads.get(x).unwrap().as_slice().unwrap()[k], num) < 1e-6);
        }
        for k in 0..5 {
            let num = numeric_grad(
                |v| {
                    let mut gp = g0.clone();
                    gp.as_slice_mut().unwrap()[k] = v;
                    run(&x0, &gp, &b0)
                },
                g0.as_slice().unwrap()[k],
            );
            assert!(rel_err(grads.get(g).unwrap().as_slice().unwrap()[k], num) < 1e-7);
            let numb = numeric_grad(
                |v| {
                    let mut bp = b0.clone();
                    bp.as_slice_mut().unwrap()[k] = v;
                    run(&x0, &g0, &bp)
                },
                b0.as_slice().unwrap()[k],
            );
            assert!(rel_err(grads.get(b).unwrap().as_slice().unwrap()[k], numb) < 1e-7);
        }
    }
}
