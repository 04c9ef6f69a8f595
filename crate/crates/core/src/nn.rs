//! Small dense networks with hand-written backpropagation, a diagonal Gaussian head,
//! an Adam optimizer, a finite-difference gradient checker and a lossless text format
//! for parameters.
//!
//! Everything is `f64` and allocation-light; networks are a single tanh hidden layer
//! followed by a linear output layer.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{ensure, Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Weights stored row-major as `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

impl DenseParams {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        DenseParams {
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
            n_in,
            n_out,
        }
    }

    /// Uniform in `±1/sqrt(n_in)` for both weights and bias.
    pub fn uniform(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weights = (0..n_in * n_out).map(|_| draw()).collect();
        let bias = (0..n_out).map(|_| draw()).collect();
        DenseParams {
            weights,
            bias,
            n_in,
            n_out,
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.n_in).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
    }
}

/// Activations recorded by [`Mlp::forward`] for one input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    n_out: usize,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64] {
        &self.input
    }
}

/// `y = W2 tanh(W1 x + b1) + b2`
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: DenseParams,
    pub output: DenseParams,
}

impl Mlp {
    pub fn new(n_in: usize, n_hidden: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            hidden: DenseParams::uniform(n_in, n_hidden, rng),
            output: DenseParams::uniform(n_hidden, n_out, rng),
        }
    }

    pub fn n_in(&self) -> usize {
        self.hidden.n_in
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden.n_out
    }

    pub fn n_out(&self) -> usize {
        self.output.n_out
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        ensure(x.len() == self.n_in(), || {
            format!("network input has length {}, expected {}", x.len(), self.n_in())
        })?;
        let mut hidden = vec![0.0; self.n_hidden()];
        self.hidden.apply(x, &mut hidden);
        hidden.iter_mut().for_each(|h| *h = h.tanh());
        let mut y = vec![0.0; self.n_out()];
        self.output.apply(&hidden, &mut y);
        Ok((
            y,
            ForwardCache {
                input: x.to_vec(),
                hidden,
                n_out: self.n_out(),
            },
        ))
    }

    /// Output only, no cache.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Gradients of `y . dy` with respect to every parameter and to the input.
    pub fn backward(&self, cache: ForwardCache, dy: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        let mut grad = self.zeros_like();
        let dx = self.backward_into(cache, dy, &mut grad)?;
        Ok((grad, dx))
    }

    /// Like [`Mlp::backward`] but accumulates parameter gradients into `grad`.
    pub fn backward_into(&self, cache: ForwardCache, dy: &[f64], grad: &mut Mlp) -> Result<Vec<f64>> {
        ensure(
            cache.input.len() == self.n_in()
                && cache.hidden.len() == self.n_hidden()
                && cache.n_out == self.n_out(),
            || "forward cache does not match this network".into(),
        )?;
        ensure(dy.len() == self.n_out(), || {
            format!("output gradient has length {}, expected {}", dy.len(), self.n_out())
        })?;
        ensure(grad.shape() == self.shape(), || "gradient buffer shape mismatch".into())?;

        let nh = self.n_hidden();
        let ni = self.n_in();
        let mut dh = vec![0.0; nh];
        for (k, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.output.bias[k] += g;
            let row = &self.output.weights[k * nh..(k + 1) * nh];
            let grow = &mut grad.output.weights[k * nh..(k + 1) * nh];
            for j in 0..nh {
                grow[j] += g * cache.hidden[j];
                dh[j] += g * row[j];
            }
        }
        let mut dx = vec![0.0; ni];
        for j in 0..nh {
            let h = cache.hidden[j];
            let dpre = dh[j] * (1.0 - h * h);
            if dpre == 0.0 {
                continue;
            }
            grad.hidden.bias[j] += dpre;
            let row = &self.hidden.weights[j * ni..(j + 1) * ni];
            let grow = &mut grad.hidden.weights[j * ni..(j + 1) * ni];
            for i in 0..ni {
                grow[i] += dpre * cache.input[i];
                dx[i] += dpre * row[i];
            }
        }
        Ok(dx)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_in(), self.n_hidden(), self.n_out())
    }
}

/// A collection of parameter tensors that an optimizer can walk in a fixed order.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    /// Tensor names in the same order as [`ParamSet::tensors`].
    fn tensor_names(&self) -> Vec<String>;
    /// Tensor shapes in the same order as [`ParamSet::tensors`].
    fn tensor_shapes(&self) -> Vec<Vec<usize>>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure(flat.len() == self.num_params(), || {
            format!("flat vector has {} entries, expected {}", flat.len(), self.num_params())
        })?;
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

impl ParamSet for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            &self.hidden.weights,
            &self.hidden.bias,
            &self.output.weights,
            &self.output.bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.hidden.weights,
            &mut self.hidden.bias,
            &mut self.output.weights,
            &mut self.output.bias,
        ]
    }

    fn tensor_names(&self) -> Vec<String> {
        ["hidden.weight", "hidden.bias", "output.weight", "output.bias"]
            .map(String::from)
            .to_vec()
    }

    fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        vec![
            vec![self.hidden.n_out, self.hidden.n_in],
            vec![self.hidden.n_out],
            vec![self.output.n_out, self.output.n_in],
            vec![self.output.n_out],
        ]
    }
}

pub fn global_norm<P: ParamSet>(p: &P) -> f64 {
    p.tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so its global norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

pub fn scale_grads<P: ParamSet>(grads: &mut P, s: f64) {
    for t in grads.tensors_mut() {
        t.iter_mut().for_each(|g| *g *= s);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLogProb {
    pub logp: f64,
    pub dmean: Vec<f64>,
    pub dlog_std: Vec<f64>,
}

/// Log density of a diagonal Gaussian and its gradient with respect to mean and log-std.
pub fn gaussian_log_prob_grad(mean: &[f64], log_std: &[f64], action: &[f64]) -> Result<GaussianLogProb> {
    ensure(mean.len() == log_std.len() && mean.len() == action.len(), || {
        format!(
            "gaussian shapes disagree: mean {}, log_std {}, action {}",
            mean.len(),
            log_std.len(),
            action.len()
        )
    })?;
    let d = mean.len();
    let mut logp = 0.0;
    let mut dmean = Vec::with_capacity(d);
    let mut dlog_std = Vec::with_capacity(d);
    for i in 0..d {
        let inv_std = (-log_std[i]).exp();
        let z = (action[i] - mean[i]) * inv_std;
        logp += -0.5 * z * z - log_std[i] - 0.5 * LN_2PI;
        dmean.push(z * inv_std);
        dlog_std.push(z * z - 1.0);
    }
    Ok(GaussianLogProb {
        logp,
        dmean,
        dlog_std,
    })
}

/// Differential entropy of a diagonal Gaussian; its gradient is 1 per log-std entry.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|s| s + 0.5 * (1.0 + LN_2PI)).sum()
}

/// Adam with the usual defaults (0.9, 0.999, 1e-8). Minimizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new<P: ParamSet>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let gs = grads.tensors();
        let ps = params.tensors_mut();
        ensure(
            ps.len() == gs.len()
                && ps.len() == self.m.len()
                && ps.iter().zip(&gs).zip(&self.m).all(|((p, g), m)| p.len() == g.len() && p.len() == m.len()),
            || "optimizer state, parameters and gradients have different shapes".into(),
        )?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in ps.into_iter().zip(gs).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Relative error with a floor on the denominator so near-zero gradients compare absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares `analytic` against central differences of `loss` around `params`.
pub fn finite_diff_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    ensure(params.len() == analytic.len(), || {
        format!("{} parameters but {} gradient entries", params.len(), analytic.len())
    })?;
    let mut x = params.to_vec();
    let mut worst = (0.0_f64, 0usize);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > worst.0 || !err.is_finite() {
            worst = (err, i);
        }
    }
    Ok(FdReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        passed: worst.0 <= tol,
    })
}

pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn collect<P: ParamSet>(prefix: &str, params: &P) -> Vec<NamedTensor> {
        params
            .tensor_names()
            .into_iter()
            .zip(params.tensor_shapes())
            .zip(params.tensors())
            .map(|((name, shape), values)| NamedTensor {
                name: format!("{prefix}.{name}"),
                shape,
                values: values.to_vec(),
            })
            .collect()
    }

    /// Copies tensors named `prefix.*` back into `params`, in order.
    pub fn restore<P: ParamSet>(prefix: &str, tensors: &[NamedTensor], params: &mut P) -> Result<()> {
        let names = params.tensor_names();
        let shapes = params.tensor_shapes();
        for ((name, shape), dst) in names.iter().zip(&shapes).zip(params.tensors_mut()) {
            let full = format!("{prefix}.{name}");
            let t = tensors
                .iter()
                .find(|t| t.name == full)
                .ok_or_else(|| Error::Parse(format!("missing tensor `{full}`")))?;
            if &t.shape != shape {
                return Err(Error::Parse(format!(
                    "tensor `{full}` has shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            dst.copy_from_slice(&t.values);
        }
        Ok(())
    }
}

/// Serializes tensors as
///
/// ```text
/// moc-her-params 1
/// tensor <name> <rank> <dim>...
/// <row-major values, 17 significant digits>
/// ```
pub fn write_params_text(tensors: &[NamedTensor]) -> String {
    let mut out = format!("moc-her-params {PARAMS_FORMAT_VERSION}\n");
    for t in tensors {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "tensor {} {} {}", t.name, t.shape.len(), dims.join(" "));
        let vals: Vec<String> = t.values.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_params_text(text: &str) -> Result<Vec<NamedTensor>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty parameter file".into()))?;
    let version = header
        .strip_prefix("moc-her-params ")
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| Error::Parse(format!("bad header `{header}`")))?;
    if version != PARAMS_FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported parameter format version {version}")));
    }
    let mut out = Vec::new();
    while let Some(line) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(Error::Parse(format!("expected tensor header, got `{line}`")));
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::Parse("tensor without a name".into()))?
            .to_string();
        let rank: usize = parts
            .next()
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::Parse(format!("tensor `{name}` has no rank")))?;
        let shape = parts
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("tensor `{name}`: {e}")))?;
        if shape.len() != rank {
            return Err(Error::Parse(format!("tensor `{name}` rank {rank} but {} dims", shape.len())));
        }
        let values_line = lines.next().unwrap_or("");
        let values = values_line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("tensor `{name}`: {e}")))?;
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::Parse(format!(
                "tensor `{name}` has {} values, expected {expected}",
                values.len()
            )));
        }
        out.push(NamedTensor { name, shape, values });
    }
    Ok(out)
}
