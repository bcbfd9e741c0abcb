//! Small feed-forward networks with exact reverse-mode gradients.
//!
//! Layers are dense or 1D convolutions over time. Convolution inputs are
//! time-major, `x[t * channels + c]`, and a convolution window at output
//! step `t` reads the contiguous block starting at `t * stride * channels`.
//! A dense layer is the special case of a length-1 convolution with kernel 1.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    Tanh,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative from the pre-activation `z` and output `y`.
    /// The relu subgradient at 0 is 0.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        input: usize,
        output: usize,
    },
    Conv1d {
        channels_in: usize,
        channels_out: usize,
        kernel: usize,
        stride: usize,
        length_in: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    len_in: usize,
    len_out: usize,
}

impl LayerKind {
    fn geometry(self) -> Geometry {
        match self {
            LayerKind::Dense { input, output } => Geometry {
                cin: input,
                cout: output,
                kernel: 1,
                stride: 1,
                len_in: 1,
                len_out: 1,
            },
            LayerKind::Conv1d {
                channels_in,
                channels_out,
                kernel,
                stride,
                length_in,
            } => Geometry {
                cin: channels_in,
                cout: channels_out,
                kernel,
                stride,
                len_in: length_in,
                len_out: (length_in - kernel) / stride + 1,
            },
        }
    }

    pub fn input_dim(self) -> usize {
        let g = self.geometry();
        g.len_in * g.cin
    }

    pub fn output_dim(self) -> usize {
        let g = self.geometry();
        g.len_out * g.cout
    }

    fn weight_count(self) -> usize {
        let g = self.geometry();
        g.cout * g.kernel * g.cin
    }

    pub fn param_count(self) -> usize {
        self.weight_count() + self.geometry().cout
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub activation: Activation,
    offset: usize,
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    version: u64,
    /// Input of each layer, then the network output.
    values: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        self.values.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Net {
    layers: Vec<Layer>,
    params: Vec<f64>,
    /// Bumped by every parameter mutation; caches from older versions are stale.
    version: u64,
}

/// Equal when shapes and parameters match; the mutation counter is ignored.
impl PartialEq for Net {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.params == other.params
    }
}

impl Net {
    /// Builds a network with zero parameters.
    pub fn new(spec: &[(LayerKind, Activation)]) -> Result<Self> {
        if spec.is_empty() {
            return Err(Error::Invalid("network needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(spec.len());
        let mut offset = 0;
        for (i, &(kind, activation)) in spec.iter().enumerate() {
            if let LayerKind::Conv1d {
                channels_in,
                channels_out,
                kernel,
                stride,
                length_in,
            } = kind
            {
                if channels_in == 0
                    || channels_out == 0
                    || kernel == 0
                    || stride == 0
                    || kernel > length_in
                {
                    return Err(Error::Invalid(format!(
                        "layer {i}: bad convolution geometry"
                    )));
                }
            }
            if let LayerKind::Dense { input, output } = kind {
                if input == 0 || output == 0 {
                    return Err(Error::Invalid(format!("layer {i}: zero width")));
                }
            }
            if let Some(prev) = layers.last() {
                let prev: &Layer = prev;
                if prev.kind.output_dim() != kind.input_dim() {
                    return Err(Error::Invalid(format!(
                        "layer {i}: input {} does not match previous output {}",
                        kind.input_dim(),
                        prev.kind.output_dim()
                    )));
                }
            }
            layers.push(Layer {
                kind,
                activation,
                offset,
            });
            offset += kind.param_count();
        }
        Ok(Net {
            layers,
            params: vec![0.0; offset],
            version: 0,
        })
    }

    /// Multilayer perceptron with `hidden` relu layers and a final layer.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, last: Activation) -> Result<Self> {
        let mut spec = Vec::new();
        let mut width = input;
        for &h in hidden {
            spec.push((
                LayerKind::Dense {
                    input: width,
                    output: h,
                },
                Activation::Relu,
            ));
            width = h;
        }
        spec.push((
            LayerKind::Dense {
                input: width,
                output,
            },
            last,
        ));
        Net::new(&spec)
    }

    /// Uniform Glorot initialization; biases zero.
    pub fn init(&mut self, rng: &mut impl Rng) {
        for layer in &self.layers {
            let g = layer.kind.geometry();
            let fan_in = (g.kernel * g.cin) as f64;
            let fan_out = (g.kernel * g.cout) as f64;
            let a = (6.0 / (fan_in + fan_out)).sqrt();
            let w = layer.kind.weight_count();
            for p in &mut self.params[layer.offset..layer.offset + w] {
                *p = rng.random_range(-a..a);
            }
            for p in &mut self.params[layer.offset + w..layer.offset + layer.kind.param_count()] {
                *p = 0.0;
            }
        }
        self.version += 1;
    }

    /// Multiplies the final layer's weights by `factor`.
    pub fn scale_last_layer(&mut self, factor: f64) {
        let layer = self.layers.last().unwrap();
        let w = layer.kind.weight_count();
        for p in &mut self.params[layer.offset..layer.offset + w] {
            *p *= factor;
        }
        self.version += 1;
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].kind.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().kind.output_dim()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::LengthMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn layer_forward(&self, layer: &Layer, x: &[f64], pre: &mut Vec<f64>, out: &mut Vec<f64>) {
        let g = layer.kind.geometry();
        let block = g.kernel * g.cin;
        let w = &self.params[layer.offset..layer.offset + layer.kind.weight_count()];
        let b = &self.params
            [layer.offset + layer.kind.weight_count()..layer.offset + layer.kind.param_count()];
        pre.clear();
        out.clear();
        for t in 0..g.len_out {
            let xs = &x[t * g.stride * g.cin..][..block];
            for o in 0..g.cout {
                let z = b[o] + dot(&w[o * block..(o + 1) * block], xs);
                pre.push(z);
                out.push(layer.activation.apply(z));
            }
        }
    }

    /// Output only.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut pre = Vec::new();
        let mut out = Vec::new();
        for layer in &self.layers {
            self.layer_forward(layer, &cur, &mut pre, &mut out);
            std::mem::swap(&mut cur, &mut out);
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Cache> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        let mut pres = Vec::with_capacity(self.layers.len());
        values.push(x.to_vec());
        for layer in &self.layers {
            let mut pre = Vec::new();
            let mut out = Vec::new();
            self.layer_forward(layer, values.last().unwrap(), &mut pre, &mut out);
            pres.push(pre);
            values.push(out);
        }
        Ok(Cache {
            version: self.version,
            values,
            pre: pres,
        })
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient for the output gradient `dy`.
    pub fn backward(&self, cache: &Cache, dy: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        if cache.version != self.version {
            return Err(Error::Invalid("stale forward cache".into()));
        }
        if dy.len() != self.output_dim() {
            return Err(Error::LengthMismatch {
                expected: self.output_dim(),
                found: dy.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                found: grad.len(),
            });
        }
        let mut delta = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let g = layer.kind.geometry();
            let block = g.kernel * g.cin;
            let x = &cache.values[i];
            let y = &cache.values[i + 1];
            let z = &cache.pre[i];
            for (k, d) in delta.iter_mut().enumerate() {
                *d *= layer.activation.derivative(z[k], y[k]);
            }
            let wn = layer.kind.weight_count();
            let w = &self.params[layer.offset..layer.offset + wn];
            let (gw, gb) =
                grad[layer.offset..layer.offset + layer.kind.param_count()].split_at_mut(wn);
            let mut dx = vec![0.0; x.len()];
            for t in 0..g.len_out {
                let start = t * g.stride * g.cin;
                let xs = &x[start..start + block];
                for o in 0..g.cout {
                    let d = delta[t * g.cout + o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    axpy(d, xs, &mut gw[o * block..(o + 1) * block]);
                    axpy(
                        d,
                        &w[o * block..(o + 1) * block],
                        &mut dx[start..start + block],
                    );
                }
            }
            delta = dx;
        }
        Ok(delta)
    }

    pub fn to_text(&self, name: &str) -> String {
        let mut s = format!("net {name}\n");
        for l in &self.layers {
            match l.kind {
                LayerKind::Dense { input, output } => {
                    let _ = writeln!(s, "layer dense {input} {output} {}", l.activation.as_str());
                }
                LayerKind::Conv1d {
                    channels_in,
                    channels_out,
                    kernel,
                    stride,
                    length_in,
                } => {
                    let _ = writeln!(
                        s,
                        "layer conv1d {channels_in} {channels_out} {kernel} {stride} {length_in} {}",
                        l.activation.as_str()
                    );
                }
            }
        }
        let _ = writeln!(s, "params {}", self.params.len());
        for chunk in self.params.chunks(6) {
            let line: Vec<String> = chunk.iter().map(|&x| fmt_f64(x)).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s.push_str("end\n");
        s
    }

    /// Reads one network block from `lines`, returning its name.
    pub fn from_lines<'a>(
        path: &Path,
        lines: &mut impl Iterator<Item = (usize, &'a str)>,
    ) -> Result<(String, Net)> {
        let (ln, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 0, "missing network"))?;
        let name = header
            .strip_prefix("net ")
            .ok_or_else(|| Error::parse(path, ln, "expected `net <name>`"))?
            .trim()
            .to_string();
        let mut spec = Vec::new();
        let count = loop {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, ln, "truncated network"))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<usize> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::parse(path, ln, format!("bad field {i}")))
            };
            let act = |i: usize| -> Result<Activation> {
                f.get(i)
                    .and_then(|v| Activation::parse(v))
                    .ok_or_else(|| Error::parse(path, ln, "bad activation"))
            };
            match f.first().copied() {
                Some("layer") if f.get(1) == Some(&"dense") => {
                    spec.push((
                        LayerKind::Dense {
                            input: num(2)?,
                            output: num(3)?,
                        },
                        act(4)?,
                    ));
                }
                Some("layer") if f.get(1) == Some(&"conv1d") => {
                    spec.push((
                        LayerKind::Conv1d {
                            channels_in: num(2)?,
                            channels_out: num(3)?,
                            kernel: num(4)?,
                            stride: num(5)?,
                            length_in: num(6)?,
                        },
                        act(7)?,
                    ));
                }
                Some("params") => break num(1)?,
                _ => return Err(Error::parse(path, ln, format!("unexpected `{line}`"))),
            }
        };
        let mut net = Net::new(&spec).map_err(|e| Error::parse(path, ln, e.to_string()))?;
        if count != net.params.len() {
            return Err(Error::parse(
                path,
                ln,
                format!(
                    "expected {} parameters, header says {count}",
                    net.params.len()
                ),
            ));
        }
        let mut values = Vec::with_capacity(count);
        let mut last = ln;
        for (ln, line) in lines.by_ref() {
            last = ln;
            if line.trim() == "end" {
                break;
            }
            for tok in line.split_whitespace() {
                values.push(
                    tok.parse::<f64>()
                        .map_err(|_| Error::parse(path, ln, format!("bad number `{tok}`")))?,
                );
            }
        }
        if values.len() != count {
            return Err(Error::parse(
                path,
                last,
                format!("read {} of {count} parameters", values.len()),
            ));
        }
        net.params = values;
        Ok((name, net))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Rescales `grad` so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = dot(grad, grad).sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descends along `grad`.
    pub fn step(&mut self, net: &mut Net, grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in net
            .params_mut()
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Gradient descent with heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n: usize, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: vec![0.0; n],
        }
    }

    pub fn step(&mut self, net: &mut Net, grad: &[f64]) {
        for ((p, g), v) in net
            .params_mut()
            .iter_mut()
            .zip(grad)
            .zip(&mut self.velocity)
        {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Largest relative error between analytic and central-difference
    /// gradients of `loss` over all parameters and inputs.
    pub fn fd_check(net: &Net, x: &[f64], loss: impl Fn(&[f64]) -> (f64, Vec<f64>)) -> f64 {
        let h = 1e-5;
        let cache = net.forward(x).unwrap();
        let (_, dy) = loss(cache.output());
        let mut grad = vec![0.0; net.param_count()];
        let dx = net.backward(&cache, &dy, &mut grad).unwrap();
        let eval = |n: &Net, x: &[f64]| loss(&n.predict(x).unwrap()).0;
        let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
        let mut worst = 0.0f64;
        let mut probe = net.clone();
        for i in 0..net.param_count() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let up = eval(&probe, x);
            probe.params_mut()[i] = orig - h;
            let down = eval(&probe, x);
            probe.params_mut()[i] = orig;
            worst = worst.max(rel(grad[i], (up - down) / (2.0 * h)));
        }
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = eval(net, &xp);
            xp[i] = orig - h;
            let down = eval(net, &xp);
            xp[i] = orig;
            worst = worst.max(rel(dx[i], (up - down) / (2.0 * h)));
        }
        worst
    }

    pub fn half_square(y: &[f64]) -> (f64, Vec<f64>) {
        (0.5 * dot(y, y), y.to_vec())
    }

    fn random_input(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = Net::mlp(3, &[], 3, Activation::Identity).unwrap();
        let p = net.params_mut();
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        assert_eq!(
            net.predict(&[0.5, -2.0, 3.0]).unwrap(),
            vec![0.5, -2.0, 3.0]
        );
    }

    #[test]
    fn zero_weights_give_activated_bias() {
        let mut net = Net::mlp(2, &[], 3, Activation::Tanh).unwrap();
        net.params_mut()[6..9].copy_from_slice(&[0.3, -1.0, 0.0]);
        let y = net.predict(&[7.0, -9.0]).unwrap();
        assert_eq!(y, vec![0.3f64.tanh(), (-1.0f64).tanh(), 0.0]);
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Net::mlp(5, &[7], 3, Activation::Tanh).unwrap();
        net.init(&mut rng);
        let x = random_input(5, &mut rng);
        let p = net.params();
        let (w1, rest) = p.split_at(35);
        let (b1, rest) = rest.split_at(7);
        let (w2, b2) = rest.split_at(21);
        let mut h = [0.0; 7];
        for o in 0..7 {
            let mut z = b1[o];
            for i in 0..5 {
                z += w1[o * 5 + i] * x[i];
            }
            h[o] = if z > 0.0 { z } else { 0.0 };
        }
        let y = net.predict(&x).unwrap();
        for o in 0..3 {
            let mut z = b2[o];
            for i in 0..7 {
                z += w2[o * 7 + i] * h[i];
            }
            assert!((y[o] - z.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cin, cout, k, s, len) = (3, 4, 3, 2, 9);
        let mut net = Net::new(&[(
            LayerKind::Conv1d {
                channels_in: cin,
                channels_out: cout,
                kernel: k,
                stride: s,
                length_in: len,
            },
            Activation::Identity,
        )])
        .unwrap();
        net.init(&mut rng);
        let x = random_input(cin * len, &mut rng);
        let y = net.predict(&x).unwrap();
        let lout = (len - k) / s + 1;
        assert_eq!(y.len(), lout * cout);
        let p = net.params();
        for t in 0..lout {
            for o in 0..cout {
                let mut z = p[cout * k * cin + o];
                for j in 0..k {
                    for c in 0..cin {
                        z += p[(o * k + j) * cin + c] * x[(t * s + j) * cin + c];
                    }
                }
                assert!((y[t * cout + o] - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_half_square_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Net::mlp(4, &[], 2, Activation::Identity).unwrap();
        net.init(&mut rng);
        let x = random_input(4, &mut rng);
        let cache = net.forward(&x).unwrap();
        let y = cache.output().to_vec();
        let mut grad = vec![0.0; net.param_count()];
        net.backward(&cache, &y, &mut grad).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                assert!((grad[o * 4 + i] - y[o] * x[i]).abs() < 1e-15);
            }
            assert_eq!(grad[8 + o], y[o]);
        }
    }

    #[test]
    fn dense_and_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for act in [Activation::Tanh, Activation::Relu, Activation::Identity] {
            let mut net = Net::mlp(6, &[8, 5], 3, act).unwrap();
            net.init(&mut rng);
            let x = random_input(6, &mut rng);
            assert!(fd_check(&net, &x, half_square) < 1e-4);
        }
        let mut conv = Net::new(&[
            (
                LayerKind::Conv1d {
                    channels_in: 3,
                    channels_out: 4,
                    kernel: 4,
                    stride: 2,
                    length_in: 12,
                },
                Activation::Tanh,
            ),
            (
                LayerKind::Conv1d {
                    channels_in: 4,
                    channels_out: 2,
                    kernel: 3,
                    stride: 1,
                    length_in: 5,
                },
                Activation::Relu,
            ),
            (
                LayerKind::Dense {
                    input: 6,
                    output: 2,
                },
                Activation::Identity,
            ),
        ])
        .unwrap();
        conv.init(&mut rng);
        let x = random_input(36, &mut rng);
        assert!(fd_check(&conv, &x, half_square) < 1e-4);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut net = Net::mlp(1, &[], 1, Activation::Relu).unwrap();
        net.params_mut()[0] = 1.0;
        let cache = net.forward(&[0.0]).unwrap();
        let mut grad = vec![0.0; 2];
        let dx = net.backward(&cache, &[1.0], &mut grad).unwrap();
        assert_eq!(dx, vec![0.0]);
        assert_eq!(grad, vec![0.0, 0.0]);
    }

    #[test]
    fn stale_cache_and_bad_dims_are_errors() {
        let mut net = Net::mlp(2, &[3], 1, Activation::Identity).unwrap();
        assert!(net.predict(&[1.0]).is_err());
        let cache = net.forward(&[1.0, 2.0]).unwrap();
        net.params_mut()[0] = 1.0;
        let mut grad = vec![0.0; net.param_count()];
        assert!(net.backward(&cache, &[1.0], &mut grad).is_err());
        assert!(Net::new(&[
            (
                LayerKind::Dense {
                    input: 2,
                    output: 3
                },
                Activation::Relu
            ),
            (
                LayerKind::Dense {
                    input: 4,
                    output: 1
                },
                Activation::Relu
            ),
        ])
        .is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Net::new(&[
            (
                LayerKind::Conv1d {
                    channels_in: 2,
                    channels_out: 3,
                    kernel: 2,
                    stride: 1,
                    length_in: 4,
                },
                Activation::Relu,
            ),
            (
                LayerKind::Dense {
                    input: 9,
                    output: 2,
                },
                Activation::Tanh,
            ),
        ])
        .unwrap();
        net.init(&mut rng);
        let text = net.to_text("theta");
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (name, back) = Net::from_lines(Path::new("x"), &mut lines).unwrap();
        assert_eq!(name, "theta");
        assert_eq!(back.params(), net.params());
        assert_eq!(back.layers(), net.layers());
    }

    #[test]
    fn optimizers_descend_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = [1.0, -2.0];
        for use_adam in [true, false] {
            let mut net = Net::mlp(1, &[], 2, Activation::Identity).unwrap();
            net.init(&mut rng);
            let mut adam = Adam::new(4, 0.05);
            let mut sgd = Sgd::new(4, 0.05, 0.9);
            for _ in 0..500 {
                let cache = net.forward(&[1.0]).unwrap();
                let dy: Vec<f64> = cache
                    .output()
                    .iter()
                    .zip(target)
                    .map(|(y, t)| y - t)
                    .collect();
                let mut g = vec![0.0; 4];
                net.backward(&cache, &dy, &mut g).unwrap();
                if use_adam {
                    adam.step(&mut net, &g);
                } else {
                    sgd.step(&mut net, &g);
                }
            }
            let y = net.predict(&[1.0]).unwrap();
            assert!((y[0] - 1.0).abs() < 1e-3 && (y[1] + 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gradient_clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = vec![0.1, 0.1];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.1, 0.1]);
    }
}
