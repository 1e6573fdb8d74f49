use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::{Grads, Parameterized};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Swish,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<F: Real>(self, z: F) -> F {
        match self {
            Activation::Linear => z,
            Activation::Swish => z * sigmoid(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at pre-activation `z`.
    #[inline]
    pub fn derivative<F: Real>(self, z: F) -> F {
        match self {
            Activation::Linear => F::one(),
            Activation::Swish => {
                let s = sigmoid(z);
                s * (F::one() + z * (F::one() - s))
            }
            Activation::Tanh => {
                let y = z.tanh();
                F::one() - y * y
            }
        }
    }
}

#[inline]
fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Sinusoidal embedding of `t in [0, 1]`: `[sin(30 t w_k), cos(30 t w_k)]`
/// with `w_k = 10000^{-k / half}`. The top frequency stays low enough for
/// adaptive probability-flow steps to resolve it.
pub fn time_embedding<F: Real>(t: f64, dim: usize, out: &mut [F]) {
    debug_assert_eq!(out.len(), dim);
    let half = dim / 2;
    let scaled = 30.0 * t;
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let a = scaled * freq;
        out[k] = F::of(a.sin());
        out[half + k] = F::of(a.cos());
    }
    if dim % 2 == 1 {
        out[dim - 1] = F::of(t);
    }
}

/// Architecture description, serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub time_embed_dim: usize,
    /// Zero-initialize the output layer.
    #[serde(default)]
    pub zero_last: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    /// `n_in x n_out`, row-major.
    pub w: Vec<F>,
    pub b: Vec<F>,
    pub n_in: usize,
    pub n_out: usize,
    pub act: Activation,
}

/// Multi-layer perceptron with optional sinusoidal time conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<F = f32> {
    layers: Vec<Layer<F>>,
    input_dim: usize,
    time_embed_dim: usize,
}

/// Activations saved by [`DenseNet::forward_cached`].
#[derive(Debug, Clone)]
pub struct Cache<F> {
    batch: usize,
    inputs: Vec<Vec<F>>,
    pre: Vec<Vec<F>>,
}

impl<F: Real> DenseNet<F> {
    /// LeCun-uniform weights, zero biases; hidden layers use `spec.activation`,
    /// the output layer is linear.
    pub fn init<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Result<Self> {
        if spec.input_dim == 0 || spec.output_dim == 0 {
            return Err(Error::config("net", "input and output dims must be positive"));
        }
        let mut dims = vec![spec.input_dim + spec.time_embed_dim];
        dims.extend(&spec.hidden);
        dims.push(spec.output_dim);
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            let last = l + 1 == n_layers;
            let limit = (3.0 / n_in as f64).sqrt();
            let w = if last && spec.zero_last {
                vec![F::zero(); n_in * n_out]
            } else {
                (0..n_in * n_out)
                    .map(|_| F::of(rng.random_range(-limit..limit)))
                    .collect()
            };
            layers.push(Layer {
                w,
                b: vec![F::zero(); n_out],
                n_in,
                n_out,
                act: if last { Activation::Linear } else { spec.activation },
            });
        }
        Ok(DenseNet {
            layers,
            input_dim: spec.input_dim,
            time_embed_dim: spec.time_embed_dim,
        })
    }

    /// Builds a net from explicit layers; `input_dim` excludes the embedding.
    pub fn from_layers(layers: Vec<Layer<F>>, input_dim: usize, time_embed_dim: usize) -> Result<Self> {
        let mut n = input_dim + time_embed_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.n_in != n || l.w.len() != l.n_in * l.n_out || l.b.len() != l.n_out {
                return Err(Error::shape(format!("layer {i} with n_in={n}"), format!("{}x{}", l.n_in, l.n_out)));
            }
            n = l.n_out;
        }
        if layers.is_empty() {
            return Err(Error::config("net", "at least one layer required"));
        }
        Ok(DenseNet {
            layers,
            input_dim,
            time_embed_dim,
        })
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    pub fn time_embed_dim(&self) -> usize {
        self.time_embed_dim
    }

    pub fn cast<G: Real>(&self) -> DenseNet<G> {
        DenseNet {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: l.w.iter().map(|&x| G::of(x.f64())).collect(),
                    b: l.b.iter().map(|&x| G::of(x.f64())).collect(),
                    n_in: l.n_in,
                    n_out: l.n_out,
                    act: l.act,
                })
                .collect(),
            input_dim: self.input_dim,
            time_embed_dim: self.time_embed_dim,
        }
    }

    fn assemble_input(&self, x: &Tensor<F>, t: Option<&[f64]>) -> Result<(usize, Vec<F>)> {
        let batch = x.rows();
        if x.cols() != self.input_dim || x.shape().len() != 2 {
            return Err(Error::shape(format!("[_, {}]", self.input_dim), format!("{:?}", x.shape())));
        }
        let e = self.time_embed_dim;
        match (e, t) {
            (0, None) => Ok((batch, x.data().to_vec())),
            (0, Some(_)) => Err(Error::shape("no time input", "time supplied")),
            (_, None) => Err(Error::shape("time input", "none")),
            (_, Some(ts)) => {
                if ts.len() != batch && ts.len() != 1 {
                    return Err(Error::shape(format!("{batch} times"), ts.len()));
                }
                let width = self.input_dim + e;
                let mut h = vec![F::zero(); batch * width];
                for i in 0..batch {
                    let row = &mut h[i * width..(i + 1) * width];
                    row[..self.input_dim].copy_from_slice(x.row(i));
                    let ti = if ts.len() == 1 { ts[0] } else { ts[i] };
                    time_embedding(ti, e, &mut row[self.input_dim..]);
                }
                Ok((batch, h))
            }
        }
    }

    pub fn forward(&self, x: &Tensor<F>, t: Option<&[f64]>) -> Result<Tensor<F>> {
        let (batch, mut h) = self.assemble_input(x, t)?;
        for l in &self.layers {
            let mut z = matmul(&h, &l.w, batch, l.n_in, l.n_out);
            for row in z.chunks_exact_mut(l.n_out) {
                for (v, &b) in row.iter_mut().zip(&l.b) {
                    *v = l.act.apply(*v + b);
                }
            }
            h = z;
        }
        Tensor::matrix(batch, self.output_dim(), h)
    }

    pub fn forward_cached(&self, x: &Tensor<F>, t: Option<&[f64]>) -> Result<(Tensor<F>, Cache<F>)> {
        let (batch, mut h) = self.assemble_input(x, t)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut z = matmul(&h, &l.w, batch, l.n_in, l.n_out);
            for row in z.chunks_exact_mut(l.n_out) {
                for (v, &b) in row.iter_mut().zip(&l.b) {
                    *v += b;
                }
            }
            let out: Vec<F> = z.iter().map(|&v| l.act.apply(v)).collect();
            inputs.push(std::mem::replace(&mut h, out));
            pre.push(z);
        }
        let y = Tensor::matrix(batch, self.output_dim(), h)?;
        Ok((y, Cache { batch, inputs, pre }))
    }

    fn check_upstream(&self, cache: &Cache<F>, upstream: &Tensor<F>) -> Result<()> {
        if upstream.rows() != cache.batch || upstream.cols() != self.output_dim() {
            return Err(Error::shape(
                format!("[{}, {}]", cache.batch, self.output_dim()),
                format!("{:?}", upstream.shape()),
            ));
        }
        Ok(())
    }

    /// Reverse pass for `<upstream, forward(x, t)>`: parameter gradients and
    /// the gradient with respect to `x` (the time embedding is excluded).
    pub fn backward(&self, cache: &Cache<F>, upstream: &Tensor<F>) -> Result<(Grads<F>, Tensor<F>)> {
        self.check_upstream(cache, upstream)?;
        let batch = cache.batch;
        let mut bufs = vec![Vec::new(); 2 * self.layers.len()];
        let mut dh = upstream.data().to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let dz: Vec<F> = dh
                .iter()
                .zip(&cache.pre[li])
                .map(|(&d, &z)| d * l.act.derivative(z))
                .collect();
            bufs[2 * li] = matmul_tn(&cache.inputs[li], &dz, batch, l.n_in, l.n_out);
            let mut db = vec![F::zero(); l.n_out];
            for row in dz.chunks_exact(l.n_out) {
                for (a, &d) in db.iter_mut().zip(row) {
                    *a += d;
                }
            }
            bufs[2 * li + 1] = db;
            dh = matmul_nt(&dz, &l.w, batch, l.n_out, l.n_in);
        }
        Ok((Grads { bufs }, self.strip_embedding(batch, dh)?))
    }

    /// Like [`backward`](Self::backward) but only the input gradient.
    pub fn backward_input(&self, cache: &Cache<F>, upstream: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_upstream(cache, upstream)?;
        let batch = cache.batch;
        let mut dh = upstream.data().to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            for (d, &z) in dh.iter_mut().zip(&cache.pre[li]) {
                *d *= l.act.derivative(z);
            }
            dh = matmul_nt(&dh, &l.w, batch, l.n_out, l.n_in);
        }
        self.strip_embedding(batch, dh)
    }

    fn strip_embedding(&self, batch: usize, dh: Vec<F>) -> Result<Tensor<F>> {
        let width = self.input_dim + self.time_embed_dim;
        if self.time_embed_dim == 0 {
            return Tensor::matrix(batch, width, dh);
        }
        let mut dx = Vec::with_capacity(batch * self.input_dim);
        for row in dh.chunks_exact(width) {
            dx.extend_from_slice(&row[..self.input_dim]);
        }
        Tensor::matrix(batch, self.input_dim, dx)
    }

    /// Per-row `v^T J v` where `J` is the input Jacobian of the net; the
    /// Hutchinson estimate of `tr(J)` for Rademacher `v`.
    pub fn jacobian_vector_trace_probe(
        &self,
        x: &Tensor<F>,
        t: Option<&[f64]>,
        probe: &Tensor<F>,
    ) -> Result<Vec<F>> {
        if self.input_dim != self.output_dim() {
            return Err(Error::shape(self.input_dim, self.output_dim()));
        }
        if probe.shape() != x.shape() {
            return Err(Error::shape(format!("{:?}", x.shape()), format!("{:?}", probe.shape())));
        }
        let (_, cache) = self.forward_cached(x, t)?;
        let jt_v = self.backward_input(&cache, probe)?;
        Ok((0..x.rows())
            .map(|i| probe.row(i).iter().zip(jt_v.row(i)).map(|(&a, &b)| a * b).sum())
            .collect())
    }
}

impl<F: Real> Parameterized<F> for DenseNet<F> {
    fn param_slices(&self) -> Vec<&[F]> {
        self.layers.iter().flat_map(|l| [&l.w[..], &l.b[..]]).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w[..], &mut l.b[..]])
            .collect()
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.w"), format!("layer{i}.b")])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{check_net_gradients, max_rel_error};
    use crate::rng::{stream, Purpose};
    use rand_distr::{Distribution, StandardNormal};

    fn spec(input: usize, hidden: Vec<usize>, out: usize, act: Activation, e: usize) -> NetSpec {
        NetSpec {
            input_dim: input,
            hidden,
            output_dim: out,
            activation: act,
            time_embed_dim: e,
            zero_last: false,
        }
    }

    fn randn<F: Real>(rows: usize, cols: usize, seed: u64) -> Tensor<F> {
        let mut rng = stream(seed, Purpose::Diagnostic, 0);
        let d = (0..rows * cols)
            .map(|_| F::of(StandardNormal.sample(&mut rng)))
            .collect();
        Tensor::matrix(rows, cols, d).unwrap()
    }

    #[test]
    fn zero_weight_net_outputs_last_bias() {
        let mut net: DenseNet<f32> = DenseNet::init(&spec(3, vec![4], 2, Activation::Swish, 0), &mut stream(1, Purpose::Init, 0)).unwrap();
        for p in net.param_slices_mut() {
            p.fill(0.0);
        }
        net.layers_mut()[1].b = vec![0.5, -1.5];
        let y = net.forward(&randn(5, 3, 2), None).unwrap();
        for i in 0..5 {
            assert_eq!(y.row(i), &[0.5, -1.5]);
        }
    }

    #[test]
    fn identity_linear_layer() {
        let l = Layer {
            w: vec![1.0f32, 0.0, 0.0, 1.0],
            b: vec![0.0, 0.0],
            n_in: 2,
            n_out: 2,
            act: Activation::Linear,
        };
        let net = DenseNet::from_layers(vec![l], 2, 0).unwrap();
        let x = randn::<f32>(4, 2, 3);
        assert_eq!(net.forward(&x, None).unwrap(), x);
    }

    #[test]
    fn linear_input_gradient_is_w_transpose_upstream() {
        let w = vec![2.0f64, -1.0, 0.5, 3.0, 1.0, 4.0]; // 2 in x 3 out
        let l = Layer {
            w: w.clone(),
            b: vec![0.1, 0.2, 0.3],
            n_in: 2,
            n_out: 3,
            act: Activation::Linear,
        };
        let net = DenseNet::from_layers(vec![l], 2, 0).unwrap();
        let x = randn::<f64>(1, 2, 4);
        let u = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let (_, cache) = net.forward_cached(&x, None).unwrap();
        let (_, dx) = net.backward(&cache, &u).unwrap();
        let want = [2.0 - 1.0 * -2.0 + 0.5 * 0.5, 3.0 + -2.0 + 4.0 * 0.5];
        assert_eq!(dx.data(), &want);
    }

    #[test]
    fn swish_slope_at_zero() {
        assert_eq!(Activation::Swish.derivative(0.0f64), 0.5);
        assert_eq!(Activation::Tanh.derivative(0.0f64), 1.0);
    }

    #[test]
    fn forward_is_seed_stable() {
        let s = spec(4, vec![8, 8], 3, Activation::Swish, 6);
        let a: DenseNet<f32> = DenseNet::init(&s, &mut stream(9, Purpose::Init, 0)).unwrap();
        let b: DenseNet<f32> = DenseNet::init(&s, &mut stream(9, Purpose::Init, 0)).unwrap();
        let x = randn::<f32>(3, 4, 1);
        let ya = a.forward(&x, Some(&[0.25])).unwrap();
        let yb = b.forward(&x, Some(&[0.25])).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ya), bits(&yb));
    }

    #[test]
    fn cached_forward_matches_plain() {
        let s = spec(4, vec![8], 4, Activation::Tanh, 4);
        let net: DenseNet<f64> = DenseNet::init(&s, &mut stream(3, Purpose::Init, 0)).unwrap();
        let x = randn::<f64>(3, 4, 5);
        let t = [0.1, 0.5, 0.9];
        assert_eq!(net.forward(&x, Some(&t)).unwrap(), net.forward_cached(&x, Some(&t)).unwrap().0);
    }

    #[test]
    fn gradients_match_finite_differences_f64() {
        for act in [Activation::Swish, Activation::Tanh, Activation::Linear] {
            let s = spec(16, vec![12, 10], 5, act, 8);
            let net: DenseNet<f64> = DenseNet::init(&s, &mut stream(5, Purpose::Init, 0)).unwrap();
            let err = check_net_gradients(&net, 7);
            assert!(err < 1e-6, "{act:?}: {err}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_f32() {
        let s = spec(16, vec![12, 10], 5, Activation::Swish, 8);
        let net: DenseNet<f32> = DenseNet::init(&s, &mut stream(5, Purpose::Init, 0)).unwrap();
        let err = check_net_gradients(&net, 7);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn trace_probe_is_even_and_unbiased() {
        let l = Layer {
            w: vec![2.0f64, 0.0, 1.0, 3.0], // W^T stored: y = x W, J = W^T
            b: vec![0.0, 0.0],
            n_in: 2,
            n_out: 2,
            act: Activation::Linear,
        };
        let net = DenseNet::from_layers(vec![l], 2, 0).unwrap();
        let x = randn::<f64>(1, 2, 0);
        let mut rng = stream(2, Purpose::Probes, 0);
        let mut acc = 0.0;
        let n = 20_000;
        for _ in 0..n {
            let v: Vec<f64> = (0..2).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let p = Tensor::matrix(1, 2, v.clone()).unwrap();
            let m = Tensor::matrix(1, 2, v.iter().map(|x| -x).collect()).unwrap();
            let a = net.jacobian_vector_trace_probe(&x, None, &p).unwrap()[0];
            let b = net.jacobian_vector_trace_probe(&x, None, &m).unwrap()[0];
            assert_eq!(a, b);
            acc += a;
        }
        assert!((acc / n as f64 - 5.0).abs() < 0.05);
    }

    #[test]
    fn rejects_bad_shapes_and_missing_time() {
        let s = spec(3, vec![4], 3, Activation::Swish, 4);
        let net: DenseNet<f32> = DenseNet::init(&s, &mut stream(1, Purpose::Init, 0)).unwrap();
        assert!(net.forward(&randn(2, 3, 0), None).is_err());
        assert!(net.forward(&randn(2, 4, 0), Some(&[0.5])).is_err());
        let (_, cache) = net.forward_cached(&randn(2, 3, 0), Some(&[0.5])).unwrap();
        assert!(net.backward(&cache, &randn(2, 2, 0)).is_err());
        let _ = max_rel_error;
    }
}
