//! Feedforward network with squared-ReLU activations and layer normalization.
//!
//! Every hidden block is `affine -> layer norm (learnable gain/shift) -> ReLU²`
//! and the output block is a plain affine map. Evaluation carries forward-mode
//! tangents along each input coordinate, so a single pass yields both `u(x)` and
//! `∇ₓu(x)`. The reverse pass runs back through values *and* tangents, which
//! gives exact parameter gradients of any scalar built from `(u, ∇ₓu)`,
//! including the mixed `∂²u/∂θ∂x` paths.
//!
//! Batches are stored "stacked": a `(1 + k)·B × n` matrix whose first `B` rows
//! are values and whose block `j` holds the tangent along input axis `j - 1`.
//! One matrix product per layer then moves values and tangents together.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DOBSNET\0";
const CHECKPOINT_VERSION: u32 = 1;

#[inline]
pub fn relu2(x: f64) -> f64 {
    let r = x.max(0.0);
    r * r
}

#[inline]
pub fn relu2_prime(x: f64) -> f64 {
    2.0 * x.max(0.0)
}

/// Offsets of one layer's parameters inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: usize,
    /// `(gain, shift)` offsets for normalized hidden layers.
    norm: Option<(usize, usize)>,
}

/// Which activation a layer applies after its affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu2,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    sizes: Vec<usize>,
    layer_norm: bool,
    seed: u64,
    params: Vec<f64>,
    layout: Vec<LayerLayout>,
}

/// Value and input gradient at a single point.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub value: f64,
    pub input_gradient: Vec<f64>,
}

/// Gradient of a scalar with respect to every network parameter, laid out
/// exactly like [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradient {
    sizes: Vec<usize>,
    layer_norm: bool,
    values: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros_like(net: &Network) -> Self {
        ParamGradient {
            sizes: net.sizes.clone(),
            layer_norm: net.layer_norm,
            values: vec![0.0; net.params.len()],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_congruent(&self, net: &Network) -> bool {
        self.sizes == net.sizes && self.layer_norm == net.layer_norm && self.values.len() == net.params.len()
    }

    /// `self += other`, in parameter order.
    pub fn accumulate(&mut self, other: &ParamGradient) -> Result<()> {
        if self.sizes != other.sizes || self.layer_norm != other.layer_norm {
            return Err(Error::Structure("gradient shapes differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Intermediate state of one hidden block, kept for the reverse pass.
#[derive(Clone, Debug)]
struct HiddenCache {
    input: Array2<f64>,
    /// Centered pre-activations (value rows) when normalized.
    centered: Option<Array2<f64>>,
    /// Centered tangent pre-activations (tangent rows).
    centered_tangent: Option<Array2<f64>>,
    /// `1/sqrt(var + eps)` per value row.
    inv_std: Option<Array1<f64>>,
    /// Derivative of `inv_std` along each tangent row.
    inv_std_tangent: Option<Array1<f64>>,
    /// Normalized (pre gain/shift) stack; only kept when normalized.
    normalized: Option<Array2<f64>>,
    /// Post gain/shift, pre activation stack.
    pre_activation: Array2<f64>,
}

/// Record of a batched forward evaluation; the input of [`Network::backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    sizes: Vec<usize>,
    layer_norm: bool,
    batch: usize,
    tangents: usize,
    hidden: Vec<HiddenCache>,
    last_input: Array2<f64>,
    output: Array2<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Number of input directions carried (0 or the input dimension).
    pub fn tangent_count(&self) -> usize {
        self.tangents
    }

    /// `u(x)` for every point of the batch.
    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.output.slice(s![0..self.batch, 0])
    }

    /// `∂u/∂x_j` for every point; panics when tangents were not carried.
    pub fn gradient_component(&self, j: usize) -> ArrayView1<'_, f64> {
        assert!(j < self.tangents, "tangent {j} not carried");
        let b = self.batch;
        self.output.slice(s![(j + 1) * b..(j + 2) * b, 0])
    }

    pub fn eval(&self, i: usize) -> EvalResult {
        EvalResult {
            value: self.output[[i, 0]],
            input_gradient: (0..self.tangents)
                .map(|j| self.output[[(j + 1) * self.batch + i, 0]])
                .collect(),
        }
    }
}

impl Network {
    /// Builds a network with fan-in scaled Gaussian weights (variance
    /// `2/fan_in`), zero biases, unit norm gains and zero norm shifts.
    pub fn init(seed: u64, layer_sizes: &[usize], layer_norm: bool) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, layer_norm)?;
        net.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..net.layout.len() {
            let lay = net.layout[l].clone();
            let scale = (2.0 / lay.fan_in as f64).sqrt();
            for w in &mut net.params[lay.weight..lay.weight + lay.fan_in * lay.fan_out] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = z * scale;
            }
            if let Some((gain, _)) = lay.norm {
                net.params[gain..gain + lay.fan_out].fill(1.0);
            }
        }
        Ok(net)
    }

    /// [`init`](Self::init) adapted to a box domain: each first-layer unit
    /// gets the bias `−w·c` for a center `c` drawn uniformly in the box, so its
    /// activation breakpoint lies inside the domain, and the output layer
    /// starts at zero weights (the network starts as the zero function).
    pub fn init_for_domain(
        seed: u64,
        layer_sizes: &[usize],
        layer_norm: bool,
        lower: &[f64],
        upper: &[f64],
    ) -> Result<Self> {
        let mut net = Self::init(seed, layer_sizes, layer_norm)?;
        let d = net.input_dim();
        if lower.len() != d || upper.len() != d {
            return Err(Error::Structure(format!("domain bounds must have dimension {d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let first = net.layout[0].clone();
        for j in 0..first.fan_out {
            let mut b = 0.0;
            for k in 0..d {
                let c = lower[k] + (upper[k] - lower[k]) * rng.gen::<f64>();
                b -= net.params[first.weight + j * d + k] * c;
            }
            net.params[first.bias + j] = b;
        }
        let last = net.layout[net.layout.len() - 1].clone();
        net.params[last.weight..last.weight + last.fan_in * last.fan_out].fill(0.0);
        Ok(net)
    }

    /// All weights and biases zero, norm gains one.
    pub fn zeros(layer_sizes: &[usize], layer_norm: bool) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Structure(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Structure(format!("zero-width layer in {layer_sizes:?}")));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(Error::Structure("output dimension must be 1".into()));
        }
        let mut layout = Vec::with_capacity(layer_sizes.len() - 1);
        let mut offset = 0;
        let n_layers = layer_sizes.len() - 1;
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight = offset;
            offset += fan_in * fan_out;
            let bias = offset;
            offset += fan_out;
            let norm = if layer_norm && l + 1 < n_layers {
                let g = offset;
                offset += 2 * fan_out;
                Some((g, g + fan_out))
            } else {
                None
            };
            layout.push(LayerLayout { fan_in, fan_out, weight, bias, norm });
        }
        let mut params = vec![0.0; offset];
        for lay in &layout {
            if let Some((gain, _)) = lay.norm {
                params[gain..gain + lay.fan_out].fill(1.0);
            }
        }
        Ok(Network { sizes: layer_sizes.to_vec(), layer_norm, seed: 0, params, layout })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn has_layer_norm(&self) -> bool {
        self.layer_norm
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if layer + 1 < self.layout.len() {
            Activation::Relu2
        } else {
            Activation::Identity
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    /// Weight matrix (`fan_out × fan_in`) of layer `l`.
    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let lay = &self.layout[l];
        ArrayView2::from_shape(
            (lay.fan_out, lay.fan_in),
            &self.params[lay.weight..lay.weight + lay.fan_in * lay.fan_out],
        )
        .expect("layout is consistent")
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let lay = &self.layout[l];
        &self.params[lay.bias..lay.bias + lay.fan_out]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let lay = &self.layout[l];
        &mut self.params[lay.weight..lay.weight + lay.fan_in * lay.fan_out]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let lay = self.layout[l].clone();
        &mut self.params[lay.bias..lay.bias + lay.fan_out]
    }

    fn norm_params(&self, l: usize) -> Option<(&[f64], &[f64])> {
        let lay = &self.layout[l];
        lay.norm.map(|(g, b)| (&self.params[g..g + lay.fan_out], &self.params[b..b + lay.fan_out]))
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Value and exact input gradient at one point.
    pub fn forward(&self, x: &[f64]) -> Result<EvalResult> {
        let pts = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let trace = self.forward_batch(pts, true)?;
        Ok(trace.eval(0))
    }

    /// Value only at one point.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let pts = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward_batch(pts, false)?.values()[0])
    }

    /// Values on a batch of points (rows).
    pub fn values(&self, points: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.forward_batch(points, false)?.values().to_owned())
    }

    /// Evaluates a batch of points (one per row). With `with_gradient` the
    /// trace also carries `∇ₓu` for each point.
    pub fn forward_batch(&self, points: ArrayView2<'_, f64>, with_gradient: bool) -> Result<ForwardTrace> {
        let d = self.input_dim();
        if points.ncols() != d {
            return Err(Error::Structure(format!(
                "points have dimension {}, network expects {d}",
                points.ncols()
            )));
        }
        let batch = points.nrows();
        let k = if with_gradient { d } else { 0 };
        let mut stack = Array2::<f64>::zeros(((1 + k) * batch, d));
        stack.slice_mut(s![0..batch, ..]).assign(&points);
        for j in 0..k {
            stack.slice_mut(s![(j + 1) * batch..(j + 2) * batch, j]).fill(1.0);
        }

        let n_layers = self.layout.len();
        let mut hidden = Vec::with_capacity(n_layers - 1);
        for l in 0..n_layers - 1 {
            let (next, cache) = self.hidden_forward(l, stack, batch, k);
            hidden.push(cache);
            stack = next;
        }
        let output = self.affine(n_layers - 1, &stack, batch);
        Ok(ForwardTrace {
            sizes: self.sizes.clone(),
            layer_norm: self.layer_norm,
            batch,
            tangents: k,
            hidden,
            last_input: stack,
            output,
        })
    }

    /// `stack · Wᵀ`, with the bias added to value rows only.
    fn affine(&self, l: usize, stack: &Array2<f64>, batch: usize) -> Array2<f64> {
        let mut z = stack.dot(&self.weight(l).t());
        if !z.is_standard_layout() {
            z = z.as_standard_layout().into_owned();
        }
        let bias = ArrayView1::from(self.bias(l));
        z.slice_mut(s![0..batch, ..]).rows_mut().into_iter().for_each(|mut r| r += &bias);
        z
    }

    fn hidden_forward(&self, l: usize, input: Array2<f64>, batch: usize, k: usize) -> (Array2<f64>, HiddenCache) {
        let z = self.affine(l, &input, batch);
        let n = z.ncols();
        let rows = z.nrows();
        let mut cache = HiddenCache {
            input,
            centered: None,
            centered_tangent: None,
            inv_std: None,
            inv_std_tangent: None,
            normalized: None,
            pre_activation: Array2::zeros((0, 0)),
        };

        let pre = if let Some((gain, shift)) = self.norm_params(l) {
            let nf = n as f64;
            let zs = z.as_slice().expect("standard layout");
            let mut centered = vec![0.0; batch * n];
            let mut inv_std = vec![0.0; batch];
            let mut centered_t = vec![0.0; k * batch * n];
            let mut inv_std_t = vec![0.0; k * batch];
            let mut normalized = vec![0.0; rows * n];
            let mut pre = vec![0.0; rows * n];
            for i in 0..batch {
                let zr = &zs[i * n..(i + 1) * n];
                let mean = zr.iter().sum::<f64>() / nf;
                let c = &mut centered[i * n..(i + 1) * n];
                let mut var = 0.0;
                for (cv, &zv) in c.iter_mut().zip(zr) {
                    *cv = zv - mean;
                    var += *cv * *cv;
                }
                let sd = 1.0 / (var / nf + LAYER_NORM_EPS).sqrt();
                inv_std[i] = sd;
                let nr = &mut normalized[i * n..(i + 1) * n];
                let pr = &mut pre[i * n..(i + 1) * n];
                for f in 0..n {
                    let v = c[f] * sd;
                    nr[f] = v;
                    pr[f] = v * gain[f] + shift[f];
                }
            }
            for r in 0..k * batch {
                let i = r % batch;
                let row = batch + r;
                let dz = &zs[row * n..(row + 1) * n];
                let mean = dz.iter().sum::<f64>() / nf;
                let c = &centered[i * n..(i + 1) * n];
                let dc = &mut centered_t[r * n..(r + 1) * n];
                let mut dot = 0.0;
                for f in 0..n {
                    dc[f] = dz[f] - mean;
                    dot += dc[f] * c[f];
                }
                let sd = inv_std[i];
                let dsd = -0.5 * sd * sd * sd * (2.0 * dot / nf);
                inv_std_t[r] = dsd;
                let nr = &mut normalized[row * n..(row + 1) * n];
                let pr = &mut pre[row * n..(row + 1) * n];
                for f in 0..n {
                    let v = dc[f] * sd + c[f] * dsd;
                    nr[f] = v;
                    pr[f] = v * gain[f];
                }
            }
            cache.centered = Some(Array2::from_shape_vec((batch, n), centered).expect("shape"));
            cache.centered_tangent = Some(Array2::from_shape_vec((k * batch, n), centered_t).expect("shape"));
            cache.inv_std = Some(Array1::from(inv_std));
            cache.inv_std_tangent = Some(Array1::from(inv_std_t));
            cache.normalized = Some(Array2::from_shape_vec((rows, n), normalized).expect("shape"));
            Array2::from_shape_vec((rows, n), pre).expect("shape")
        } else {
            z
        };

        let mut act = vec![0.0; rows * n];
        {
            let ps = pre.as_slice().expect("standard layout");
            let (y, tangents) = ps.split_at(batch * n);
            let (av, at) = act.split_at_mut(batch * n);
            for (a, &yv) in av.iter_mut().zip(y) {
                *a = relu2(yv);
            }
            for (tj, aj) in tangents.chunks(batch * n).zip(at.chunks_mut(batch * n)) {
                for ((a, &dy), &yv) in aj.iter_mut().zip(tj).zip(y) {
                    *a = relu2_prime(yv) * dy;
                }
            }
        }
        cache.pre_activation = pre;
        (Array2::from_shape_vec((rows, n), act).expect("shape"), cache)
    }

    /// Reverse pass. `value_adjoint[i]` is `∂L/∂u(x_i)` and
    /// `gradient_adjoint[[i, j]]` is `∂L/∂(∂u/∂x_j)(x_i)`; the latter may be
    /// omitted (all zero) and must be when the trace carries no tangents.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        value_adjoint: ArrayView1<'_, f64>,
        gradient_adjoint: Option<ArrayView2<'_, f64>>,
    ) -> Result<ParamGradient> {
        if trace.sizes != self.sizes || trace.layer_norm != self.layer_norm {
            return Err(Error::Structure("trace was produced by a different network shape".into()));
        }
        let (b, k) = (trace.batch, trace.tangents);
        if value_adjoint.len() != b {
            return Err(Error::Structure(format!(
                "value adjoint has {} entries for a batch of {b}",
                value_adjoint.len()
            )));
        }
        let mut out_adj = Array2::<f64>::zeros(((1 + k) * b, 1));
        out_adj.slice_mut(s![0..b, 0]).assign(&value_adjoint);
        if let Some(ga) = gradient_adjoint {
            if k == 0 {
                return Err(Error::Structure("gradient adjoint given but trace has no input tangents".into()));
            }
            if ga.dim() != (b, k) {
                return Err(Error::Structure(format!("gradient adjoint shape {:?}, expected {:?}", ga.dim(), (b, k))));
            }
            for j in 0..k {
                out_adj.slice_mut(s![(j + 1) * b..(j + 2) * b, 0]).assign(&ga.column(j));
            }
        }

        let mut grad = ParamGradient::zeros_like(self);
        let last = self.layout.len() - 1;
        let mut adj = self.affine_backward(last, &trace.last_input, &out_adj, b, &mut grad, true);
        for l in (0..last).rev() {
            let cache = &trace.hidden[l];
            let z_adj = self.hidden_backward(l, cache, adj.expect("hidden layers propagate"), b, k, &mut grad);
            adj = self.affine_backward(l, &cache.input, &z_adj, b, &mut grad, l > 0);
        }
        Ok(grad)
    }

    fn affine_backward(
        &self,
        l: usize,
        input: &Array2<f64>,
        z_adj: &Array2<f64>,
        batch: usize,
        grad: &mut ParamGradient,
        propagate: bool,
    ) -> Option<Array2<f64>> {
        let lay = &self.layout[l];
        let wg = z_adj.t().dot(input);
        let dst = &mut grad.values[lay.weight..lay.weight + lay.fan_in * lay.fan_out];
        for (d, s) in dst.iter_mut().zip(wg.iter()) {
            *d += s;
        }
        let bg = z_adj.slice(s![0..batch, ..]).sum_axis(Axis(0));
        for (d, s) in grad.values[lay.bias..lay.bias + lay.fan_out].iter_mut().zip(bg.iter()) {
            *d += s;
        }
        propagate.then(|| z_adj.dot(&self.weight(l)))
    }

    /// Maps the adjoint of a hidden block's output to the adjoint of its
    /// affine pre-activation, accumulating norm gain/shift gradients.
    fn hidden_backward(
        &self,
        l: usize,
        cache: &HiddenCache,
        act_adj: Array2<f64>,
        b: usize,
        k: usize,
        grad: &mut ParamGradient,
    ) -> Array2<f64> {
        let act_adj = if act_adj.is_standard_layout() { act_adj } else { act_adj.as_standard_layout().into_owned() };
        let pre = cache.pre_activation.as_slice().expect("standard layout");
        let n = cache.pre_activation.ncols();
        let rows = cache.pre_activation.nrows();
        let aa = act_adj.as_slice().expect("standard layout");
        let bn = b * n;
        // Through the activation: a = y₊², da = 2y₊·dy.
        let mut pre_adj = vec![0.0; rows * n];
        {
            let y = &pre[..bn];
            let (ya, ta) = pre_adj.split_at_mut(bn);
            for f in 0..bn {
                ya[f] = aa[f] * relu2_prime(y[f]);
            }
            for j in 0..k {
                let dy = &pre[(j + 1) * bn..(j + 2) * bn];
                let a = &aa[(j + 1) * bn..(j + 2) * bn];
                let t = &mut ta[j * bn..(j + 1) * bn];
                for f in 0..bn {
                    t[f] = a[f] * relu2_prime(y[f]);
                    // Second-order term: the derivative of 2y₊ is 2·1[y > 0].
                    if y[f] > 0.0 {
                        ya[f] += 2.0 * a[f] * dy[f];
                    }
                }
            }
        }

        let Some((gain, _)) = self.norm_params(l) else {
            return Array2::from_shape_vec((rows, n), pre_adj).expect("shape");
        };
        let lay = &self.layout[l];
        let (g_off, s_off) = lay.norm.expect("normalized layer");
        let normalized = cache.normalized.as_ref().and_then(|a| a.as_slice()).expect("normalized cache");
        let centered = cache.centered.as_ref().and_then(|a| a.as_slice()).expect("normalized cache");
        let centered_t = cache.centered_tangent.as_ref().and_then(|a| a.as_slice()).expect("normalized cache");
        let inv_std = cache.inv_std.as_ref().expect("normalized cache");
        let inv_std_t = cache.inv_std_tangent.as_ref().expect("normalized cache");

        // Gain and shift, then scale the adjoint by the gain.
        let mut gain_grad = vec![0.0; n];
        let mut shift_grad = vec![0.0; n];
        for r in 0..rows {
            let pa = &mut pre_adj[r * n..(r + 1) * n];
            let nr = &normalized[r * n..(r + 1) * n];
            for f in 0..n {
                gain_grad[f] += pa[f] * nr[f];
            }
            if r < b {
                for f in 0..n {
                    shift_grad[f] += pa[f];
                }
            }
            for f in 0..n {
                pa[f] *= gain[f];
            }
        }
        for (d, s) in grad.values[g_off..g_off + n].iter_mut().zip(&gain_grad) {
            *d += s;
        }
        for (d, s) in grad.values[s_off..s_off + n].iter_mut().zip(&shift_grad) {
            *d += s;
        }
        let norm_adj = pre_adj;

        // Layer norm with tangents, one sample at a time.
        let nf = n as f64;
        let mut z_adj = vec![0.0; rows * n];
        let mut zc_adj = vec![0.0; n];
        let mut dzc_adj = vec![0.0; n];
        for i in 0..b {
            let sd = inv_std[i];
            let zc = &centered[i * n..(i + 1) * n];
            let mut sd_adj = 0.0;
            zc_adj.fill(0.0);
            for j in 0..k {
                let r = j * b + i;
                let row = (j + 1) * b + i;
                let dzc = &centered_t[r * n..(r + 1) * n];
                let dsd = inv_std_t[r];
                let dn_adj = &norm_adj[row * n..(row + 1) * n];
                // dẑ = dzc·s + zc·ds
                let mut dsd_adj = 0.0;
                for f in 0..n {
                    dzc_adj[f] = dn_adj[f] * sd;
                    sd_adj += dn_adj[f] * dzc[f];
                    zc_adj[f] += dsd * dn_adj[f];
                    dsd_adj += dn_adj[f] * zc[f];
                }
                // ds = -½ s³ dv, with dv = 2·mean(zc·dzc) = -2·ds/s³
                let dvar = -2.0 * dsd / (sd * sd * sd);
                sd_adj += dsd_adj * (-1.5 * sd * sd * dvar);
                let coef = 2.0 * dsd_adj * (-0.5 * sd * sd * sd) / nf;
                let mut mean = 0.0;
                for f in 0..n {
                    zc_adj[f] += coef * dzc[f];
                    dzc_adj[f] += coef * zc[f];
                    mean += dzc_adj[f];
                }
                // dzc = dz - mean(dz)
                mean /= nf;
                let out = &mut z_adj[row * n..(row + 1) * n];
                for f in 0..n {
                    out[f] = dzc_adj[f] - mean;
                }
            }
            // ẑ = zc·s, s = (v + eps)^(-1/2), v = mean(zc²), zc = z - mean(z)
            let n_adj = &norm_adj[i * n..(i + 1) * n];
            for f in 0..n {
                zc_adj[f] += sd * n_adj[f];
                sd_adj += n_adj[f] * zc[f];
            }
            let coef = 2.0 * sd_adj * (-0.5 * sd * sd * sd) / nf;
            let mut mean = 0.0;
            for f in 0..n {
                zc_adj[f] += coef * zc[f];
                mean += zc_adj[f];
            }
            mean /= nf;
            let out = &mut z_adj[i * n..(i + 1) * n];
            for f in 0..n {
                out[f] = zc_adj[f] - mean;
            }
        }
        Array2::from_shape_vec((rows, n), z_adj).expect("shape")
    }

    /// Writes a versioned little-endian binary checkpoint.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&[u8::from(self.layer_norm)])?;
        w.write_all(&(self.sizes.len() as u64).to_le_bytes())?;
        for &s in &self.sizes {
            w.write_all(&(s as u64).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for &p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let seed = read_u64(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let n_sizes = read_u64(&mut r)? as usize;
        if n_sizes > 1 << 16 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_sizes}")));
        }
        let sizes = (0..n_sizes).map(|_| read_u64(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut net = Network::zeros(&sizes, flag[0] != 0)?;
        net.seed = seed;
        let n_params = read_u64(&mut r)? as usize;
        if n_params != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {n_params} does not match layer sizes ({})",
                net.params.len()
            )));
        }
        let mut buf = [0u8; 8];
        for p in net.params.iter_mut() {
            r.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        Ok(net)
    }

    /// Atomic save: write to a sibling temp file, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(f);
            self.write_checkpoint(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        write!(
            f,
            "Network[{}; {} params; norm={}]",
            sizes.join("-"),
            self.params.len(),
            self.layer_norm
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_input_gradient(net: &Network, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|j| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[j] += h;
                xm[j] -= h;
                (net.value(&xp).unwrap() - net.value(&xm).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn relu2_branches() {
        assert_eq!(relu2(-1.0), 0.0);
        assert_eq!(relu2(2.0), 4.0);
        assert_eq!(relu2_prime(3.0), 6.0);
        assert_eq!(relu2_prime(-3.0), 0.0);
    }

    #[test]
    fn constant_network() {
        let mut net = Network::zeros(&[2, 4, 4, 1], true).unwrap();
        net.bias_mut(2)[0] = 3.5;
        for x in [[0.1, 0.2], [0.9, 0.4]] {
            let r = net.forward(&x).unwrap();
            assert_eq!(r.value, 3.5);
            assert_eq!(r.input_gradient, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn linear_layer_gradient_is_weight() {
        let mut net = Network::zeros(&[2, 1], false).unwrap();
        net.weight_mut(0).copy_from_slice(&[1.5, -0.25]);
        net.bias_mut(0)[0] = 0.75;
        let r = net.forward(&[0.3, 0.8]).unwrap();
        assert_eq!(r.input_gradient, vec![1.5, -0.25]);
        assert!((r.value - (0.45 - 0.2 + 0.75)).abs() < 1e-15);
        assert_eq!(net.activation(0), Activation::Identity);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = Network::init(7, &[2, 6, 5, 1], true).unwrap();
        let x = [0.37, 0.61];
        let ad = net.forward(&x).unwrap().input_gradient;
        let fd = fd_input_gradient(&net, &x, 1e-5);
        for (a, f) in ad.iter().zip(&fd) {
            assert!((a - f).abs() <= 1e-6 * f.abs().max(1.0), "{a} vs {f}");
        }
    }

    #[test]
    fn value_adjoint_on_constant_net() {
        let net = Network::zeros(&[1, 3, 1], true).unwrap();
        let trace = net.forward_batch(array![[0.4]].view(), true).unwrap();
        let g = net.backward(&trace, array![1.0].view(), None).unwrap();
        let last_bias = net.layout[1].bias;
        assert_eq!(g.as_slice()[last_bias], 1.0);
        let w1 = &net.layout[1];
        assert!(g.as_slice()[w1.weight..w1.weight + 3].iter().all(|&v| v == 0.0));
        let w0 = &net.layout[0];
        assert!(g.as_slice()[w0.weight..w0.weight + 3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_squared_gradient_norm_on_linear_layer() {
        // loss = ½‖∇u‖², u = w·x  ⇒  ∂loss/∂w = w
        let mut net = Network::zeros(&[2, 1], false).unwrap();
        net.weight_mut(0).copy_from_slice(&[0.7, -1.3]);
        let trace = net.forward_batch(array![[0.2, 0.9]].view(), true).unwrap();
        let g = [trace.gradient_component(0)[0], trace.gradient_component(1)[0]];
        let ga = array![[g[0], g[1]]];
        let pg = net.backward(&trace, array![0.0].view(), Some(ga.view())).unwrap();
        assert_eq!(&pg.as_slice()[0..2], &[0.7, -1.3]);
        assert_eq!(pg.as_slice()[2], 0.0);
    }

    /// L = Σᵢ [cᵢ·uᵢ + (1/3)‖∇uᵢ − ψ‖³]
    fn mixed_loss(net: &Network, pts: &Array2<f64>, c: &[f64], psi: &[f64]) -> (f64, ParamGradient) {
        let trace = net.forward_batch(pts.view(), true).unwrap();
        let d = net.input_dim();
        let mut loss = 0.0;
        let mut ua = Array1::zeros(pts.nrows());
        let mut ga = Array2::zeros((pts.nrows(), d));
        for i in 0..pts.nrows() {
            let e = trace.eval(i);
            let diff: Vec<f64> = (0..d).map(|j| e.input_gradient[j] - psi[j]).collect();
            let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            loss += c[i] * e.value + norm.powi(3) / 3.0;
            ua[i] = c[i];
            for j in 0..d {
                ga[[i, j]] = norm * diff[j];
            }
        }
        let g = net.backward(&trace, ua.view(), Some(ga.view())).unwrap();
        (loss, g)
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        for (seed, dims, norm) in [(5u64, vec![2, 6, 5, 1], true), (9, vec![1, 7, 1], true), (2, vec![2, 4, 4, 1], false)] {
            let mut net = Network::init(seed, &dims, norm).unwrap();
            // Nonzero biases and norm shifts so every parameter matters.
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for p in net.params_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p += 0.1 * z;
            }
            let d = dims[0];
            let pts = Array2::from_shape_fn((3, d), |(i, j)| 0.2 + 0.25 * i as f64 + 0.13 * j as f64);
            let c = [0.3, -1.1, 0.6];
            let psi = vec![0.2; d];
            let (_, g) = mixed_loss(&net, &pts, &c, &psi);
            let h = 1e-6;
            for q in 0..net.num_params() {
                let orig = net.params[q];
                net.params[q] = orig + h;
                let lp = mixed_loss(&net, &pts, &c, &psi).0;
                net.params[q] = orig - h;
                let lm = mixed_loss(&net, &pts, &c, &psi).0;
                net.params[q] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let ad = g.as_slice()[q];
                assert!((ad - fd).abs() <= 1e-5 * fd.abs().max(1.0), "param {q} ({dims:?}): ad {ad} fd {fd}");
            }
        }
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let a = Network::init(1, &[1, 4, 1], true).unwrap();
        let b = Network::init(1, &[1, 5, 1], true).unwrap();
        let trace = a.forward_batch(array![[0.5]].view(), false).unwrap();
        assert!(b.backward(&trace, array![1.0].view(), None).is_err());
        let trace = a.forward_batch(array![[0.5]].view(), false).unwrap();
        assert!(a.backward(&trace, array![1.0].view(), Some(array![[1.0]].view())).is_err());
        assert!(a.backward(&trace, array![1.0, 2.0].view(), None).is_err());
    }

    #[test]
    fn dimension_mismatch_is_structural() {
        let net = Network::init(1, &[2, 4, 1], true).unwrap();
        assert!(matches!(net.forward(&[0.5]), Err(Error::Structure(_))));
    }

    #[test]
    fn init_errors_and_determinism() {
        assert!(Network::init(0, &[], true).is_err());
        assert!(Network::init(0, &[3], true).is_err());
        let a = Network::init(42, &[1, 8, 8, 1], true).unwrap();
        let b = Network::init(42, &[1, 8, 8, 1], true).unwrap();
        let c = Network::init(43, &[1, 8, 8, 1], true).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn parameter_count_for_five_by_128() {
        let sizes = [1, 128, 128, 128, 128, 128, 1];
        let net = Network::init(0, &sizes, true).unwrap();
        let expected = 128 + 128 + 4 * (128 * 128 + 128) + (128 + 1) + 2 * 128 * 5;
        assert_eq!(net.num_params(), expected);
    }

    #[test]
    fn init_statistics() {
        let net = Network::init(3, &[64, 256, 1], true).unwrap();
        let w = net.weight(0);
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 64.0).abs() < 0.003, "variance {var}");
        assert!(net.bias(0).iter().all(|&b| b == 0.0));
        let (g, s) = net.norm_params(0).unwrap();
        assert!(g.iter().all(|&v| v == 1.0) && s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = Network::init(11, &[2, 7, 3, 1], true).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let back = Network::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, net);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Network::read_checkpoint(bad.as_slice()).is_err());
        assert!(Network::read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn domain_init_places_breakpoints_inside() {
        let net = Network::init_for_domain(4, &[1, 16, 8, 1], false, &[0.0], &[1.0]).unwrap();
        for j in 0..16 {
            let c = -net.bias(0)[j] / net.weight(0)[[j, 0]];
            assert!((0.0..=1.0).contains(&c), "breakpoint {c}");
        }
        assert_eq!(net.value(&[0.3]).unwrap(), 0.0);
        assert!(Network::init_for_domain(4, &[2, 4, 1], true, &[0.0], &[1.0]).is_err());
    }
}