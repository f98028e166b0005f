//! Measurement operators `f`, distances `d(f(x), y)` and their input
//! gradients.
//!
//! Two operator families are provided: a linear map `A x` and a small tanh
//! MLP producing class logits. Randomized smoothing adds `N(0, tau^2 I)` to
//! the operator input; the noise is held constant when differentiating.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mixture::GaussianMixture;
use crate::numeric::{argmax, log_sum_exp, softmax};
use crate::rng::{normal_vector, stream, Stream};
use crate::{Error, Matrix, Point, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Mse,
    CrossEntropy,
}

/// Measurement target `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Vector(Vec<f64>),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    weights: Matrix,
    bias: Point,
}

/// Fully connected network with tanh hidden layers and linear output logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layers: Vec<Layer>,
}

/// On-disk layer form: row-major weights (`out x in`) and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

struct Trace {
    // Input to each layer, plus the final logits.
    activations: Vec<Point>,
}

impl MlpNetwork {
    /// Xavier-uniform initialization for the given layer sizes
    /// (`sizes[0]` inputs, `sizes.last()` logits).
    pub fn new(sizes: &[usize], rng: &mut Stream) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let bound = (6.0 / (n_in + n_out) as f64).sqrt();
                Layer {
                    weights: Matrix::from_fn(n_out, n_in, |_, _| rng.random_range(-bound..bound)),
                    bias: Point::zeros(n_out),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_records(records: Vec<LayerRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        let mut layers = Vec::with_capacity(records.len());
        let mut prev_out: Option<usize> = None;
        for r in records {
            let rows = r.weights.len();
            let cols = r.weights.first().map_or(0, Vec::len);
            if rows == 0 || cols == 0 || r.weights.iter().any(|row| row.len() != cols) {
                return Err(Error::InvalidArgument("ragged or empty weight matrix".into()));
            }
            Error::check_dim(rows, r.bias.len())?;
            if let Some(p) = prev_out {
                Error::check_dim(p, cols)?;
            }
            let flat: Vec<f64> = r.weights.iter().flatten().copied().collect();
            if flat.iter().chain(&r.bias).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite parameter".into()));
            }
            layers.push(Layer {
                weights: Matrix::from_row_slice(rows, cols, &flat),
                bias: Point::from_vec(r.bias),
            });
            prev_out = Some(rows);
        }
        Ok(Self { layers })
    }

    pub fn to_records(&self) -> Vec<LayerRecord> {
        self.layers
            .iter()
            .map(|l| LayerRecord {
                weights: l.weights.row_iter().map(|r| r.iter().copied().collect()).collect(),
                bias: l.bias.iter().copied().collect(),
            })
            .collect()
    }

    /// JSON array of layers.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_records())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_records(serde_json::from_str(text)?)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").weights.nrows()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.weights.nrows()))
            .collect()
    }

    fn trace(&self, x: &Point) -> Trace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weights * activations.last().expect("non-empty") + &l.bias;
            if i < last {
                z.apply(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        Trace { activations }
    }

    pub fn logits(&self, x: &Point) -> Result<Point> {
        Error::check_dim(self.input_dim(), x.len())?;
        Ok(self.trace(x).activations.pop().expect("non-empty"))
    }

    pub fn predict(&self, x: &Point) -> Result<usize> {
        Ok(argmax(self.logits(x)?.as_slice()))
    }

    /// Backpropagates `g_out = dL/dlogits`; returns `dL/dx` and, when
    /// requested, per-layer parameter gradients.
    fn backward(&self, trace: &Trace, g_out: &Point, param_grads: Option<&mut Vec<(Matrix, Point)>>) -> Point {
        let mut g = g_out.clone();
        let mut grads = Vec::new();
        let want = param_grads.is_some();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[i];
            if want {
                grads.push((&g * input.transpose(), g.clone()));
            }
            g = l.weights.tr_mul(&g);
            if i > 0 {
                // input = tanh(z): dtanh = 1 - tanh^2
                g.zip_apply(input, |gv, a| *gv *= 1.0 - a * a);
            }
        }
        if let Some(out) = param_grads {
            grads.reverse();
            *out = grads;
        }
        g
    }

    /// Vector-Jacobian product `(d logits / dx)^T u`.
    pub fn vjp(&self, x: &Point, u: &Point) -> Result<Point> {
        Error::check_dim(self.input_dim(), x.len())?;
        Error::check_dim(self.classes(), u.len())?;
        Ok(self.backward(&self.trace(x), u, None))
    }

    fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Cross-entropy `-log softmax(logits)[k]` and its gradient in the logits.
fn cross_entropy(logits: &Point, k: usize) -> (f64, Point) {
    let lse = log_sum_exp(logits.as_slice());
    let mut g = Point::from_vec(softmax(logits.as_slice()));
    g[k] -= 1.0;
    (lse - logits[k], g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden layer widths; input and output sizes come from the mixture.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
}

fn default_hidden() -> Vec<usize> {
    vec![16]
}
fn default_samples() -> usize {
    2000
}
fn default_epochs() -> usize {
    40
}
fn default_lr() -> f64 {
    0.05
}
fn default_batch() -> usize {
    32
}
fn default_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    /// Operator network used inside solvers: 2 -> 16 -> 5.
    pub fn model_a(seed: u64) -> Self {
        Self {
            hidden: default_hidden(),
            samples: default_samples(),
            epochs: default_epochs(),
            lr: default_lr(),
            batch_size: default_batch(),
            momentum: default_momentum(),
            seed,
        }
    }

    /// Independent evaluation network: wider, deeper, different seed.
    pub fn model_b(seed: u64) -> Self {
        Self {
            hidden: vec![32, 32],
            ..Self::model_a(seed)
        }
    }
}

/// Trains a classifier on `(prior draw, nearest-mode label)` pairs by
/// mini-batch gradient descent with momentum on cross-entropy.
pub fn train_mlp(gmm: &GaussianMixture, cfg: &TrainConfig) -> Result<MlpNetwork> {
    let classes = gmm.components();
    if cfg.samples < 10 * classes {
        return Err(Error::InvalidArgument(format!(
            "need at least {} samples for {classes} classes, got {}",
            10 * classes,
            cfg.samples
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("batch size, epochs and lr must be positive".into()));
    }
    let mut data_rng = stream(cfg.seed, 0, "train-data");
    let mut init_rng = stream(cfg.seed, 0, "train-init");
    let mut order_rng = stream(cfg.seed, 0, "train-order");
    let data: Vec<(Point, usize)> = (0..cfg.samples)
        .map(|_| {
            let x = gmm.sample_prior(&mut data_rng);
            let k = gmm.nearest_mode(&x);
            (x, k)
        })
        .collect();
    let mut sizes = vec![gmm.dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(classes);
    let mut net = MlpNetwork::new(&sizes, &mut init_rng)?;
    let mut velocity: Vec<(Matrix, Point)> = net
        .layers
        .iter()
        .map(|l| (Matrix::zeros(l.weights.nrows(), l.weights.ncols()), Point::zeros(l.bias.len())))
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<(Matrix, Point)> = velocity
                .iter()
                .map(|(w, b)| (Matrix::zeros(w.nrows(), w.ncols()), Point::zeros(b.len())))
                .collect();
            for &i in batch {
                let (x, k) = &data[i];
                let trace = net.trace(x);
                let (loss, g_out) = cross_entropy(trace.activations.last().expect("non-empty"), *k);
                epoch_loss += loss;
                net.backward(&trace, &g_out, Some(&mut grads));
                for ((aw, ab), (gw, gb)) in acc.iter_mut().zip(&grads) {
                    *aw += gw;
                    *ab += gb;
                }
            }
            let scale = cfg.lr / batch.len() as f64;
            for ((layer, (vw, vb)), (gw, gb)) in net.layers.iter_mut().zip(velocity.iter_mut()).zip(&acc) {
                *vw = &*vw * cfg.momentum - gw * scale;
                *vb = &*vb * cfg.momentum - gb * scale;
                layer.weights += &*vw;
                layer.bias += &*vb;
            }
        }
        if !epoch_loss.is_finite() || !net.all_finite() {
            return Err(Error::Training(format!("loss became non-finite in epoch {epoch}")));
        }
    }
    Ok(net)
}

/// Classification accuracy of `net` against nearest-mode labels of `points`.
pub fn accuracy(net: &MlpNetwork, gmm: &GaussianMixture, points: &[Point]) -> Result<f64> {
    let mut hits = 0usize;
    for p in points {
        if net.predict(p)? == gmm.nearest_mode(p) {
            hits += 1;
        }
    }
    Ok(hits as f64 / points.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    Linear(Matrix),
    Mlp(MlpNetwork),
}

/// `f(.)` together with its distance and smoothing level.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    kind: OperatorKind,
    distance: Distance,
    smoothing_tau: f64,
}

impl MeasurementOperator {
    pub fn new(kind: OperatorKind, distance: Distance, smoothing_tau: f64) -> Result<Self> {
        if !(smoothing_tau >= 0.0 && smoothing_tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("smoothing tau must be >= 0, got {smoothing_tau}")));
        }
        match &kind {
            OperatorKind::Linear(a) => {
                if a.nrows() == 0 || a.ncols() == 0 || a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("linear operator must be finite and non-empty".into()));
                }
                if distance == Distance::CrossEntropy {
                    return Err(Error::InvalidArgument("cross entropy requires an mlp operator".into()));
                }
            }
            OperatorKind::Mlp(net) => {
                if !net.all_finite() {
                    return Err(Error::InvalidArgument("mlp has non-finite parameters".into()));
                }
            }
        }
        Ok(Self {
            kind,
            distance,
            smoothing_tau,
        })
    }

    pub fn linear(a: Matrix) -> Result<Self> {
        Self::new(OperatorKind::Linear(a), Distance::Mse, 0.0)
    }

    /// Coordinate projection onto the first axis, `A = [[1, 0, ..., 0]]`.
    pub fn first_coordinate(dim: usize) -> Self {
        let mut a = Matrix::zeros(1, dim);
        a[(0, 0)] = 1.0;
        Self::linear(a).expect("valid")
    }

    pub fn classifier(net: MlpNetwork) -> Self {
        Self::new(OperatorKind::Mlp(net), Distance::CrossEntropy, 0.0).expect("finite network")
    }

    pub fn with_smoothing(mut self, tau: f64) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("smoothing tau must be >= 0, got {tau}")));
        }
        self.smoothing_tau = tau;
        Ok(self)
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn distance(&self) -> Distance {
        self.distance
    }

    pub fn smoothing_tau(&self) -> f64 {
        self.smoothing_tau
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            OperatorKind::Linear(a) => a.ncols(),
            OperatorKind::Mlp(n) => n.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.kind {
            OperatorKind::Linear(a) => a.nrows(),
            OperatorKind::Mlp(n) => n.classes(),
        }
    }

    /// Noise-free `f(x)`.
    pub fn forward(&self, x: &Point) -> Result<Point> {
        Error::check_dim(self.input_dim(), x.len())?;
        match &self.kind {
            OperatorKind::Linear(a) => Ok(a * x),
            OperatorKind::Mlp(n) => n.logits(x),
        }
    }

    /// `x + N(0, tau^2 I)`, or `x` itself when `tau = 0`.
    pub fn smoothed_input(&self, x: &Point, rng: &mut Stream) -> Point {
        if self.smoothing_tau > 0.0 {
            x + normal_vector(rng, x.len()) * self.smoothing_tau
        } else {
            x.clone()
        }
    }

    /// `f(x + noise)`.
    pub fn apply(&self, x: &Point, rng: &mut Stream) -> Result<Point> {
        Error::check_dim(self.input_dim(), x.len())?;
        self.forward(&self.smoothed_input(x, rng))
    }

    /// Noise-free `d(f(x), y)` and `grad_x d`.
    pub fn loss_and_grad(&self, x: &Point, y: &Target) -> Result<(f64, Point)> {
        let out = self.forward(x)?;
        let (loss, g_out) = match (self.distance, y) {
            (Distance::Mse, Target::Vector(v)) => {
                Error::check_dim(out.len(), v.len())?;
                let r = &out - Point::from_column_slice(v);
                (0.5 * r.norm_squared(), r)
            }
            (Distance::CrossEntropy, Target::Class(k)) => {
                if *k >= out.len() {
                    return Err(Error::Target(format!("class {k} out of range for {} logits", out.len())));
                }
                cross_entropy(&out, *k)
            }
            (Distance::Mse, Target::Class(_)) => {
                return Err(Error::Target("mse distance needs a vector target".into()))
            }
            (Distance::CrossEntropy, Target::Vector(_)) => {
                return Err(Error::Target("cross entropy needs a class target".into()))
            }
        };
        let grad = match &self.kind {
            OperatorKind::Linear(a) => a.tr_mul(&g_out),
            OperatorKind::Mlp(n) => n.backward(&n.trace(x), &g_out, None),
        };
        Ok((loss, grad))
    }

    /// Smoothed loss and gradient sharing one noise draw. The noise is
    /// treated as a constant (straight-through).
    pub fn loss_with_grad(&self, x: &Point, y: &Target, rng: &mut Stream) -> Result<(f64, Point)> {
        Error::check_dim(self.input_dim(), x.len())?;
        self.loss_and_grad(&self.smoothed_input(x, rng), y)
    }

    pub fn loss(&self, x: &Point, y: &Target, rng: &mut Stream) -> Result<f64> {
        self.loss_with_grad(x, y, rng).map(|(l, _)| l)
    }

    pub fn loss_grad_x(&self, x: &Point, y: &Target, rng: &mut Stream) -> Result<Point> {
        self.loss_with_grad(x, y, rng).map(|(_, g)| g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point;
    use std::sync::OnceLock;

    fn toy() -> GaussianMixture {
        GaussianMixture::five_mode_toy()
    }

    fn models() -> &'static (MlpNetwork, MlpNetwork) {
        static M: OnceLock<(MlpNetwork, MlpNetwork)> = OnceLock::new();
        M.get_or_init(|| {
            let g = toy();
            (
                train_mlp(&g, &TrainConfig::model_a(1)).unwrap(),
                train_mlp(&g, &TrainConfig::model_b(2)).unwrap(),
            )
        })
    }

    fn held_out(n: usize) -> Vec<Point> {
        let g = toy();
        let mut rng = stream(999, 0, "held-out");
        (0..n).map(|_| g.sample_prior(&mut rng)).collect()
    }

    fn fd_grad(op: &MeasurementOperator, x: &Point, y: &Target, h: f64) -> Point {
        Point::from_iterator(
            x.len(),
            (0..x.len()).map(|i| {
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += h;
                m[i] -= h;
                (op.loss_and_grad(&p, y).unwrap().0 - op.loss_and_grad(&m, y).unwrap().0) / (2.0 * h)
            }),
        )
    }

    fn rel_err(a: &Point, b: &Point) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-6)
    }

    #[test]
    fn linear_projection_applies() {
        let op = MeasurementOperator::first_coordinate(2);
        let y = op.apply(&point(&[1.0, 0.4]), &mut stream(0, 0, "a")).unwrap();
        assert_eq!(y, point(&[1.0]));
        assert!(op.apply(&point(&[1.0]), &mut stream(0, 0, "a")).is_err());
    }

    #[test]
    fn smoothing_determinism() {
        let op = MeasurementOperator::first_coordinate(2);
        let x = point(&[0.3, 0.1]);
        let mut rng = stream(0, 0, "s");
        assert_eq!(op.apply(&x, &mut rng).unwrap(), op.apply(&x, &mut rng).unwrap());
        let noisy = op.with_smoothing(0.2).unwrap();
        assert_ne!(noisy.apply(&x, &mut rng).unwrap(), noisy.apply(&x, &mut rng).unwrap());
    }

    #[test]
    fn mse_zero_at_exact_fit() {
        let op = MeasurementOperator::first_coordinate(2);
        let (l, g) = op.loss_and_grad(&point(&[0.7, -3.0]), &Target::Vector(vec![0.7])).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn linear_gradient_is_a_transpose_residual() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]);
        let op = MeasurementOperator::linear(a.clone()).unwrap();
        let x = point(&[0.2, -0.7]);
        let y = Target::Vector(vec![1.0, 0.5]);
        let (_, g) = op.loss_and_grad(&x, &y).unwrap();
        let expected = a.tr_mul(&(&a * &x - point(&[1.0, 0.5])));
        assert!((&g - expected).norm() < 1e-15);
        assert!(rel_err(&g, &fd_grad(&op, &x, &y, 1e-5)) < 1e-5);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut net = MlpNetwork::new(&[2, 4, 5], &mut stream(0, 0, "z")).unwrap();
        for l in &mut net.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        let op = MeasurementOperator::classifier(net);
        let (l, _) = op.loss_and_grad(&point(&[0.1, 0.2]), &Target::Class(3)).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn target_errors() {
        let (a, _) = models();
        let op = MeasurementOperator::classifier(a.clone());
        let x = point(&[0.0, 0.0]);
        assert!(matches!(op.loss_and_grad(&x, &Target::Class(5)), Err(Error::Target(_))));
        assert!(matches!(op.loss_and_grad(&x, &Target::Vector(vec![0.0])), Err(Error::Target(_))));
        let lin = MeasurementOperator::first_coordinate(2);
        assert!(matches!(lin.loss_and_grad(&x, &Target::Class(0)), Err(Error::Target(_))));
        assert!(MeasurementOperator::new(OperatorKind::Linear(Matrix::identity(2, 2)), Distance::CrossEntropy, 0.0).is_err());
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let (a, b) = models();
        let mut rng = stream(5, 0, "fd");
        for net in [a, b] {
            let op = MeasurementOperator::classifier(net.clone());
            for i in 0..100 {
                let x = normal_vector(&mut rng, 2) * 1.2;
                let y = Target::Class(i % 5);
                let (_, g) = op.loss_and_grad(&x, &y).unwrap();
                let fd = fd_grad(&op, &x, &y, 1e-5);
                assert!(rel_err(&g, &fd) <= 1e-5, "x={x} g={g} fd={fd}");
            }
        }
    }

    #[test]
    fn mlp_vjp_matches_finite_differences() {
        let (a, _) = models();
        let mut rng = stream(6, 0, "vjp");
        for _ in 0..20 {
            let x = normal_vector(&mut rng, 2);
            let u = normal_vector(&mut rng, 5);
            let v = a.vjp(&x, &u).unwrap();
            let h = 1e-5;
            for i in 0..2 {
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (a.logits(&p).unwrap() - a.logits(&m).unwrap()).dot(&u) / (2.0 * h);
                assert!((fd - v[i]).abs() <= 1e-5 * v.norm().max(1e-6));
            }
        }
    }

    #[test]
    fn trained_models_are_accurate_and_distinct() {
        let (a, b) = models();
        let g = toy();
        let pts = held_out(5000);
        assert!(accuracy(a, &g, &pts).unwrap() >= 0.95);
        assert!(accuracy(b, &g, &pts).unwrap() >= 0.95);
        let disagree = pts
            .iter()
            .filter(|p| a.predict(p).unwrap() != b.predict(p).unwrap())
            .count();
        assert!((disagree as f64) < 0.05 * pts.len() as f64);
        assert_ne!(a.layer_sizes(), b.layer_sizes());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let g = toy();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::model_a(17)
        };
        let a = train_mlp(&g, &cfg).unwrap();
        let b = train_mlp(&g, &cfg).unwrap();
        assert_eq!(a, b);
        let c = train_mlp(&g, &TrainConfig { seed: 18, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn training_rejects_tiny_datasets_and_divergence() {
        let g = toy();
        let small = TrainConfig {
            samples: 49,
            ..TrainConfig::model_a(0)
        };
        assert!(matches!(train_mlp(&g, &small), Err(Error::InvalidArgument(_))));
        let wild = TrainConfig {
            lr: f64::MAX,
            epochs: 2,
            ..TrainConfig::model_a(0)
        };
        assert!(matches!(train_mlp(&g, &wild), Err(Error::Training(_))));
    }

    #[test]
    fn json_round_trip() {
        let (a, _) = models();
        let text = a.to_json().unwrap();
        assert!(text.trim_start().starts_with('['));
        let back = MlpNetwork::from_json(&text).unwrap();
        assert_eq!(&back, a);
        assert!(MlpNetwork::from_json("[]").is_err());
        assert!(MlpNetwork::from_json(r#"[{"weights":[[1.0]],"bias":[0.0,1.0]}]"#).is_err());
    }

    #[test]
    fn small_tau_smoothing_is_nearly_unbiased() {
        let (a, _) = models();
        let op = MeasurementOperator::classifier(a.clone()).with_smoothing(0.01).unwrap();
        let linear = MeasurementOperator::first_coordinate(2).with_smoothing(0.01).unwrap();
        let mut rng = stream(7, 0, "smooth");
        let cases = [
            (&op, point(&[0.9, 0.8]), Target::Class(1)),
            (&linear, point(&[0.9, 0.8]), Target::Vector(vec![0.2])),
        ];
        for (o, x, y) in cases {
            let exact = o.loss_and_grad(&x, &y).unwrap().0;
            let n = 10_000;
            let m = (0..n).map(|_| o.loss(&x, &y, &mut rng).unwrap()).sum::<f64>() / n as f64;
            assert!((m / exact - 1.0).abs() < 0.01, "{m} vs {exact}");
        }
    }

    #[test]
    fn shared_noise_between_loss_and_grad() {
        let op = MeasurementOperator::first_coordinate(2).with_smoothing(0.3).unwrap();
        let x = point(&[0.5, 0.5]);
        let y = Target::Vector(vec![0.0]);
        let (l, g) = op.loss_with_grad(&x, &y, &mut stream(3, 0, "n")).unwrap();
        // For A = [1, 0]: grad = (x0 + noise - y) e0 and loss = grad0^2 / 2.
        assert!((0.5 * g[0] * g[0] - l).abs() < 1e-15);
    }
}
