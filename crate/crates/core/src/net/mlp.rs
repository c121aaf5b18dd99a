//! Fully-connected softplus networks.
//!
//! Parameters live outside the network in a flat slice so the same
//! architecture can be evaluated on plain `f64` parameters or on tape
//! variables. Layer `l` occupies `dims[l+1] * dims[l]` row-major weights
//! followed by `dims[l+1]` biases.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{softplus, Real};
use crate::error::{Error, Result};

pub const PAPER_HIDDEN_WIDTH: usize = 200;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
}

/// Value plus first and second derivatives along two input coordinates.
#[derive(Clone, Copy, Debug)]
pub struct InputJet<R> {
    pub value: R,
    /// ∂/∂x_a
    pub da: R,
    /// ∂/∂x_b
    pub db: R,
    /// ∂²/∂x_a²
    pub daa: R,
}

impl Mlp {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!(
                "layer dims must have >= 2 positive entries, got {dims:?}"
            )));
        }
        Ok(Mlp { dims })
    }

    /// `input -> 200 -> 200 -> output`.
    pub fn paper_default(input: usize, output: usize) -> Self {
        Mlp {
            dims: vec![input, PAPER_HIDDEN_WIDTH, PAPER_HIDDEN_WIDTH, output],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Offsets of (weights, biases) for layer `l` within the parameter slice.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.dims.windows(2).take(l).map(|w| (w[0] + 1) * w[1]).sum();
        let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
        let w_end = start + fan_in * fan_out;
        (start..w_end, w_end..w_end + fan_out)
    }

    /// Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.n_params());
        for w in self.dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            out.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
            out.extend(std::iter::repeat_n(0.0, fan_out));
        }
        out
    }

    fn check(&self, params: usize, input: usize) -> Result<()> {
        if params != self.n_params() {
            return Err(Error::InputShape {
                expected: self.n_params(),
                got: params,
            });
        }
        if input != self.input_dim() {
            return Err(Error::InputShape {
                expected: self.input_dim(),
                got: input,
            });
        }
        Ok(())
    }

    /// Affine/softplus composition with an identity output layer.
    pub fn forward<R: Real>(&self, params: &[R], x: &[R]) -> Result<Vec<R>> {
        self.check(params.len(), x.len())?;
        let mut act: Vec<R> = x.to_vec();
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (wr, br) = self.layer_ranges(l);
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = &params[wr];
            let b = &params[br];
            let mut next = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let z = R::dot(&w[o * fan_in..(o + 1) * fan_in], &act, b[o]);
                next.push(if l == last { z } else { z.softplus() });
            }
            act = next;
        }
        Ok(act)
    }

    /// Forward pass carrying derivatives along inputs `a` and `b`.
    ///
    /// Propagates tangents layer by layer (forward mode), so the result is an
    /// ordinary `R` expression in the parameters and remains differentiable
    /// by the tape.
    pub fn forward_jet<R: Real>(
        &self,
        params: &[R],
        x: &[R],
        a: usize,
        b: usize,
        output: usize,
    ) -> Result<InputJet<R>> {
        self.check(params.len(), x.len())?;
        if a >= x.len() || b >= x.len() || output >= self.output_dim() {
            return Err(Error::Argument("jet direction out of range".into()));
        }
        let n0 = x.len();
        let zero = R::cst(0.0);
        let mut v: Vec<R> = x.to_vec();
        let mut ta: Vec<R> = (0..n0).map(|i| R::cst(if i == a { 1.0 } else { 0.0 })).collect();
        let mut tb: Vec<R> = (0..n0).map(|i| R::cst(if i == b { 1.0 } else { 0.0 })).collect();
        let mut taa: Vec<R> = vec![zero; n0];
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (wr, br) = self.layer_ranges(l);
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = &params[wr];
            let bias = &params[br];
            let mut nv = Vec::with_capacity(fan_out);
            let mut na = Vec::with_capacity(fan_out);
            let mut nb = Vec::with_capacity(fan_out);
            let mut naa = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let z = R::dot(row, &v, bias[o]);
                let za = R::dot(row, &ta, zero);
                let zb = R::dot(row, &tb, zero);
                let zaa = R::dot(row, &taa, zero);
                if l == last {
                    nv.push(z);
                    na.push(za);
                    nb.push(zb);
                    naa.push(zaa);
                } else {
                    // softplus' = sigmoid, softplus'' = sigmoid(1 - sigmoid)
                    let s = z.sigmoid();
                    let ds = s - s * s;
                    nv.push(z.softplus());
                    na.push(s * za);
                    nb.push(s * zb);
                    naa.push(ds * za * za + s * zaa);
                }
            }
            v = nv;
            ta = na;
            tb = nb;
            taa = naa;
        }
        Ok(InputJet {
            value: v[output],
            da: ta[output],
            db: tb[output],
            daa: taa[output],
        })
    }

    /// Mean squared error over a batch and its exact parameter gradient.
    ///
    /// Dense batched backpropagation; the tape route computes the same
    /// quantity and serves as its cross-check in tests.
    pub fn mse_and_grad(
        &self,
        params: &[f64],
        inputs: ArrayView2<'_, f64>,
        targets: ArrayView1<'_, f64>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check(params.len(), inputs.ncols())?;
        let n = inputs.nrows();
        if n == 0 || targets.len() != n || self.output_dim() != 1 {
            return Err(Error::Argument(
                "batch MSE needs a non-empty batch and a scalar-output network".into(),
            ));
        }
        let nl = self.n_layers();
        // activations[l] is the input to layer l, shape (n, dims[l])
        let mut activations: Vec<Array2<f64>> = vec![inputs.to_owned()];
        let mut pre: Vec<Array2<f64>> = Vec::with_capacity(nl);
        for l in 0..nl {
            let (w, b) = self.layer_views(params, l);
            let mut z = activations[l].dot(&w.t());
            z += &b;
            if l + 1 < nl {
                activations.push(z.mapv(softplus));
            }
            pre.push(z);
        }
        let out = pre[nl - 1].column(0).to_owned();
        let resid: Array1<f64> = &out - &targets;
        let loss = resid.mapv(|e| e * e).sum() / n as f64;

        let mut grad = vec![0.0; params.len()];
        let mut delta: Array2<f64> = (resid * (2.0 / n as f64)).insert_axis(Axis(1));
        for l in (0..nl).rev() {
            let (wr, br) = self.layer_ranges(l);
            let gw = delta.t().dot(&activations[l]);
            grad[wr].copy_from_slice(gw.as_slice().expect("standard layout"));
            let gb = delta.sum_axis(Axis(0));
            grad[br].copy_from_slice(gb.as_slice().expect("standard layout"));
            if l > 0 {
                let (w, _) = self.layer_views(params, l);
                let mut back = delta.dot(&w);
                let sig = pre[l - 1].mapv(|z| 1.0 / (1.0 + (-z).exp()));
                back *= &sig;
                delta = back;
            }
        }
        Ok((loss, grad))
    }

    /// Evaluates a scalar-output network on every row of `inputs`.
    pub fn predict_batch(&self, params: &[f64], inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check(params.len(), inputs.ncols())?;
        let nl = self.n_layers();
        let mut act = inputs.to_owned();
        for l in 0..nl {
            let (w, b) = self.layer_views(params, l);
            let mut z = act.dot(&w.t());
            z += &b;
            act = if l + 1 < nl { z.mapv(softplus) } else { z };
        }
        Ok(act.column(0).to_owned())
    }

    fn layer_views<'p>(&self, params: &'p [f64], l: usize) -> (ArrayView2<'p, f64>, ArrayView1<'p, f64>) {
        let (wr, br) = self.layer_ranges(l);
        let w = ArrayView2::from_shape((self.dims[l + 1], self.dims[l]), &params[wr]).expect("layer shape");
        let b = ArrayView1::from(&params[br]);
        (w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tape::{Tape, Var};
    use ndarray::array;

    /// Straightforward matrix-vector re-implementation used as an oracle.
    fn naive_forward(dims: &[usize], p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (ni, no) = (dims[l], dims[l + 1]);
            let w = &p[off..off + ni * no];
            let b = &p[off + ni * no..off + ni * no + no];
            off += (ni + 1) * no;
            let mut z = vec![0.0; no];
            for o in 0..no {
                z[o] = b[o];
                for i in 0..ni {
                    z[o] += w[o * ni + i] * a[i];
                }
            }
            a = if l + 2 < dims.len() {
                z.iter().map(|v| (1.0 + v.exp()).ln()).collect()
            } else {
                z
            };
        }
        a
    }

    #[test]
    fn zero_net_maps_to_zero() {
        let net = Mlp::new(vec![3, 5, 2]).unwrap();
        let p = vec![0.0; net.n_params()];
        let y = net.forward(&p, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_path_gives_softplus_of_zero() {
        // 1 -> 1 -> 1 with unit output weight: y = softplus(0·x + 0) = ln 2
        let net = Mlp::new(vec![1, 1, 1]).unwrap();
        let p = vec![1.0, 0.0, 1.0, 0.0];
        let y = net.forward(&p, &[0.0]).unwrap();
        assert!((y[0] - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let net = Mlp::new(vec![2, 2, 2]).unwrap();
        let p = net.init_params(11);
        let p: Vec<f64> = p.iter().enumerate().map(|(i, v)| v + 0.05 * i as f64).collect();
        let x = [0.3, -1.2];
        let y = net.forward(&p, &x).unwrap();
        let z = naive_forward(net.dims(), &p, &x);
        for (a, b) in y.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_shape_is_checked() {
        let net = Mlp::new(vec![2, 3, 1]).unwrap();
        let p = vec![0.0; net.n_params()];
        assert!(matches!(
            net.forward(&p, &[1.0]),
            Err(Error::InputShape { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(
            Mlp::new(vec![3, 200, 200, 4]).unwrap().n_params(),
            4 * 200 + 201 * 200 + 201 * 4
        );
        assert_eq!(Mlp::paper_default(2, 1).dims(), &[2, 200, 200, 1]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let net = Mlp::new(vec![4, 8, 1]).unwrap();
        assert_eq!(net.init_params(5), net.init_params(5));
        assert_ne!(net.init_params(5), net.init_params(6));
    }

    #[test]
    fn init_variance_matches_uniform_law() {
        let net = Mlp::new(vec![200, 200, 1]).unwrap();
        let p = net.init_params(3);
        let (wr, br) = net.layer_ranges(0);
        let w = &p[wr];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        // Var U(-a, a) = a²/3 with a² = 6/400
        let expected = 6.0 / 400.0 / 3.0;
        assert!((var / expected - 1.0).abs() < 0.10, "var={var} expected={expected}");
        assert!(p[br].iter().all(|&b| b == 0.0));
    }

    fn central_fd(f: impl Fn(&[f64]) -> f64, p: &[f64], h: f64) -> Vec<f64> {
        (0..p.len())
            .map(|i| {
                let mut a = p.to_vec();
                let mut b = p.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let net = Mlp::new(vec![2, 4, 3, 1]).unwrap();
        let p0: Vec<f64> = net
            .init_params(9)
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.01 * i as f64)
            .collect();
        let x = [0.7, -0.4];
        let loss = |p: &[f64]| {
            let y = net.forward(p, &x).unwrap()[0];
            (y - 0.3).powi(2)
        };
        let tape = Tape::new();
        let pv = tape.vars(&p0);
        let xv: Vec<Var<'_>> = x.iter().map(|&v| Var::constant(v)).collect();
        let y = net.forward(&pv, &xv).unwrap()[0];
        let l = (y - 0.3) * (y - 0.3);
        let g = tape.gradient(l, &pv);
        let fd = central_fd(loss, &p0, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            let rel = (a - b).abs() / b.abs().max(1e-8);
            assert!(rel <= 1e-5 || (a - b).abs() < 1e-10, "ad={a} fd={b}");
        }
    }

    #[test]
    fn batch_backprop_matches_tape() {
        let net = Mlp::new(vec![2, 5, 4, 1]).unwrap();
        let p = net.init_params(2);
        let xs = array![[0.1, 0.2], [0.9, -0.3], [1.5, 0.7]];
        let ys = array![0.2, -0.1, 0.4];
        let (loss, grad) = net.mse_and_grad(&p, xs.view(), ys.view()).unwrap();

        let tape = Tape::new();
        let pv = tape.vars(&p);
        let mut terms = Vec::new();
        for (row, &t) in xs.rows().into_iter().zip(ys.iter()) {
            let xv: Vec<Var<'_>> = row.iter().map(|&v| Var::constant(v)).collect();
            let y = net.forward(&pv, &xv).unwrap()[0];
            terms.push((y - t).square());
        }
        let l = Var::sum(&terms) / 3.0;
        assert!((l.value() - loss).abs() < 1e-14);
        let g = tape.gradient(l, &pv);
        for (a, b) in g.iter().zip(&grad) {
            assert!((a - b).abs() < 1e-12);
        }
        let pred = net.predict_batch(&p, xs.view()).unwrap();
        assert!((pred[1] - net.forward(&p, &[0.9, -0.3]).unwrap()[0]).abs() < 1e-14);
    }

    #[test]
    fn input_jet_matches_finite_differences() {
        let net = Mlp::new(vec![2, 6, 6, 1]).unwrap();
        let p = net.init_params(4);
        let f = |k: f64, t: f64| net.forward(&p, &[k, t]).unwrap()[0];
        let (k, t) = (0.9, 0.4);
        let jet = net.forward_jet(&p, &[k, t], 0, 1, 0).unwrap();
        let h = 1e-4;
        assert!((jet.value - f(k, t)).abs() < 1e-14);
        assert!((jet.da - (f(k + h, t) - f(k - h, t)) / (2.0 * h)).abs() < 1e-7);
        assert!((jet.db - (f(k, t + h) - f(k, t - h)) / (2.0 * h)).abs() < 1e-7);
        let d2 = (f(k + h, t) - 2.0 * f(k, t) + f(k - h, t)) / (h * h);
        assert!((jet.daa - d2).abs() < 1e-5, "{} vs {}", jet.daa, d2);
    }

    #[test]
    fn input_jet_is_differentiable_in_parameters() {
        let net = Mlp::new(vec![2, 3, 1]).unwrap();
        let p0 = net.init_params(8);
        let jet_daa = |p: &[f64]| net.forward_jet(p, &[0.5, 0.2], 0, 1, 0).unwrap().daa;
        let tape = Tape::new();
        let pv = tape.vars(&p0);
        let xv = [Var::constant(0.5), Var::constant(0.2)];
        let jet = net.forward_jet(&pv, &xv, 0, 1, 0).unwrap();
        let g = tape.gradient(jet.daa, &pv);
        let fd = central_fd(jet_daa, &p0, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "ad={a} fd={b}");
        }
    }
}
