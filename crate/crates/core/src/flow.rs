//! Toy conditional flow-matching generator with dual-head consistency
//! distillation.
//!
//! Time runs from noise at `t = 0` to data at `t = 1` along the linear path
//! `x_t = (1 − t)·x0 + t·x1`, target velocity `x1 − x0`. The network maps
//! `(x_t, t, z)` through a two-layer SiLU MLP to an instantaneous velocity
//! head `v` and, in distillation mode, an auxiliary head `u`.
//!
//! `u` is trained towards the average velocity from `(x_t, t)` to the end of
//! its trajectory, so `x_t + (1 − t)·u` predicts the sample directly. In
//! noise-level time `σ = 1 − t` the consistency residual is the familiar
//! `u − v + σ·du/dσ`; in `t` it reads `u − v − (1 − t)·du/dt`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Matrix;

/// Sinusoidal time-feature frequencies (multiples of π).
const TIME_FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
const TIME_FEATURES: usize = 1 + 2 * TIME_FREQS.len();

pub const DEFAULT_JVP_EPS: f64 = 1e-3;
pub const TEACHER_STEPS: usize = 50;
pub const STUDENT_STEPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub dim: usize,
    pub hidden: usize,
    pub cond_vocab: usize,
    pub cond_dim: usize,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.cond_vocab == 0 || self.cond_dim == 0 {
            return Err(Error::Config("flow dimensions must be >= 1".into()));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.dim + TIME_FEATURES + self.cond_dim
    }
}

/// Network weights, generic so gradients and tape variables share the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowWeights<T> {
    pub cond_embed: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub v_w: T,
    pub v_b: T,
    /// Auxiliary `u` projection; present only in distillation mode.
    pub aux: Option<(T, T)>,
}

pub type FlowParams = FlowWeights<Matrix>;

impl<T> FlowWeights<T> {
    pub fn visit<'s>(&'s self, f: &mut impl FnMut(&'static str, &'s T)) {
        f("cond_embed", &self.cond_embed);
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
        f("v_w", &self.v_w);
        f("v_b", &self.v_b);
        if let Some((w, b)) = &self.aux {
            f("u_w", w);
            f("u_b", b);
        }
    }

    pub fn visit_mut<'s>(&'s mut self, f: &mut impl FnMut(&'s mut T)) {
        for t in
            [&mut self.cond_embed, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.v_w, &mut self.v_b]
        {
            f(t);
        }
        if let Some((w, b)) = &mut self.aux {
            f(w);
            f(b);
        }
    }

    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> FlowWeights<U> {
        FlowWeights {
            cond_embed: f(&self.cond_embed),
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
            v_w: f(&self.v_w),
            v_b: f(&self.v_b),
            aux: self.aux.as_ref().map(|(w, b)| (f(w), f(b))),
        }
    }
}

impl FlowParams {
    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn init(config: &FlowConfig, seed: u64, with_aux: bool) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let lim = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let cond_embed = Matrix::uniform(config.cond_vocab, config.cond_dim, 1.0, &mut rng);
        let w1 = Matrix::uniform(config.input_width(), h, lim(config.input_width()), &mut rng);
        let w2 = Matrix::uniform(h, h, lim(h), &mut rng);
        let v_w = Matrix::uniform(h, config.dim, lim(h), &mut rng);
        let aux = with_aux.then(|| (Matrix::uniform(h, config.dim, lim(h), &mut rng), Matrix::zeros(1, config.dim)));
        Self {
            cond_embed,
            w1,
            b1: Matrix::zeros(1, h),
            w2,
            b2: Matrix::zeros(1, h),
            v_w,
            v_b: Matrix::zeros(1, config.dim),
            aux,
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    pub fn flat_get(&self, index: usize) -> f64 {
        let (mut rest, mut out) = (index, None);
        self.visit(&mut |_, m| {
            if out.is_none() {
                if rest < m.len() {
                    out = Some(m.data()[rest]);
                } else {
                    rest -= m.len();
                }
            }
        });
        out.expect("flat index out of range")
    }

    pub fn flat_set(&mut self, index: usize, value: f64) {
        let (mut rest, mut done) = (index, false);
        self.visit_mut(&mut |m| {
            if !done {
                if rest < m.len() {
                    m.data_mut()[rest] = value;
                    done = true;
                } else {
                    rest -= m.len();
                }
            }
        });
        assert!(done, "flat index out of range");
    }
}

/// One point on the linear noise-to-data path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPath {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub v_target: Vec<f64>,
}

impl FlowPath {
    pub fn new(x0: Vec<f64>, x1: Vec<f64>, t: f64) -> Self {
        let x_t = x0.iter().zip(&x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let v_target = x0.iter().zip(&x1).map(|(a, b)| b - a).collect();
        Self { x0, x1, t, x_t, v_target }
    }

    /// Data endpoint recovered from the interpolant and the velocity.
    pub fn recover_x1(&self) -> Vec<f64> {
        self.x_t.iter().zip(&self.v_target).map(|(x, v)| x + (1.0 - self.t) * v).collect()
    }
}

/// A condition is a list of code ids; its embedding is their mean.
pub type Condition = Vec<usize>;

/// 2× "super-resolution" analogue: every code repeated twice.
pub fn upsample_codes(codes: &[usize]) -> Condition {
    codes.iter().flat_map(|&c| [c, c]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowNet {
    pub config: FlowConfig,
    pub params: FlowParams,
}

struct Heads {
    v: Var,
    u: Option<Var>,
}

fn time_features(t: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(t.len(), TIME_FEATURES);
    for (r, &t) in t.iter().enumerate() {
        let row = m.row_mut(r);
        row[0] = t;
        for (j, f) in TIME_FREQS.iter().enumerate() {
            let (s, c) = (std::f64::consts::PI * f * t).sin_cos();
            row[1 + 2 * j] = s;
            row[2 + 2 * j] = c;
        }
    }
    m
}

fn rows_to_matrix(rows: &[&[f64]], cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows.len(), cols);
    for (r, row) in rows.iter().enumerate() {
        m.row_mut(r).copy_from_slice(row);
    }
    m
}

impl FlowNet {
    pub fn new(config: FlowConfig, params: FlowParams) -> Result<Self> {
        config.validate()?;
        let want = FlowParams::init(&config, 0, params.aux.is_some());
        let mut ok = true;
        let mut shapes = Vec::new();
        want.visit(&mut |_, m| shapes.push(m.shape()));
        let mut i = 0;
        params.visit(&mut |_, m| {
            ok &= shapes.get(i) == Some(&m.shape());
            i += 1;
        });
        if !ok || i != shapes.len() {
            return Err(Error::Shape("flow parameter shapes do not match the config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn init(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = FlowParams::init(&config, seed, false);
        Self::new(config, params)
    }

    pub fn has_aux(&self) -> bool {
        self.params.aux.is_some()
    }

    /// Distillation-mode copy whose `u` head starts as a copy of `v`.
    pub fn with_aux_from_v(&self) -> Self {
        let mut params = self.params.clone();
        params.aux = Some((params.v_w.clone(), params.v_b.clone()));
        Self { config: self.config.clone(), params }
    }

    /// Deployment copy without the auxiliary head.
    pub fn without_aux(&self) -> Self {
        let mut params = self.params.clone();
        params.aux = None;
        Self { config: self.config.clone(), params }
    }

    fn cond_matrix(&self, conds: &[Condition]) -> Result<Matrix> {
        let mut a = Matrix::zeros(conds.len(), self.config.cond_vocab);
        for (r, c) in conds.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::Config("empty condition".into()));
            }
            for &code in c {
                if code >= self.config.cond_vocab {
                    return Err(Error::Config(format!("condition code {code} out of range")));
                }
                let cur = a.get(r, code);
                a.set(r, code, cur + 1.0 / c.len() as f64);
            }
        }
        Ok(a)
    }

    fn graph<'a>(
        &self,
        tape: &mut Tape<'a>,
        w: &FlowWeights<Var>,
        x: &Matrix,
        t: &[f64],
        conds: &[Condition],
    ) -> Result<Heads> {
        if x.rows() != t.len() || x.rows() != conds.len() || x.cols() != self.config.dim {
            return Err(Error::Shape(format!(
                "{}×{} points, {} times, {} conditions",
                x.rows(),
                x.cols(),
                t.len(),
                conds.len()
            )));
        }
        let xs = tape.constant(x.clone());
        let tf = tape.constant(time_features(t));
        let a = tape.constant(self.cond_matrix(conds)?);
        let z = tape.matmul(a, w.cond_embed);
        let input = tape.hstack(&[xs, tf, z]);
        let h = tape.matmul(input, w.w1);
        let h = tape.add_row(h, w.b1);
        let h = tape.silu(h);
        let h = tape.matmul(h, w.w2);
        let h = tape.add_row(h, w.b2);
        let h = tape.silu(h);
        let v = tape.matmul(h, w.v_w);
        let v = tape.add_row(v, w.v_b);
        let u = w.aux.map(|(uw, ub)| {
            let u = tape.matmul(h, uw);
            tape.add_row(u, ub)
        });
        Ok(Heads { v, u })
    }

    fn vars<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> FlowWeights<Var> {
        self.params.map(&mut |m| if trainable { tape.param(m) } else { tape.constant_ref(m) })
    }

    /// Velocity head output, `n × dim`.
    pub fn velocity(&self, x: &Matrix, t: &[f64], conds: &[Condition]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let w = self.vars(&mut tape, false);
        let heads = self.graph(&mut tape, &w, x, t, conds)?;
        Ok(tape.into_value(heads.v))
    }

    /// Auxiliary head output; errors outside distillation mode.
    pub fn aux_velocity(&self, x: &Matrix, t: &[f64], conds: &[Condition]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let w = self.vars(&mut tape, false);
        let heads = self.graph(&mut tape, &w, x, t, conds)?;
        let u = heads.u.ok_or_else(|| Error::Config("network has no auxiliary head".into()))?;
        Ok(tape.into_value(u))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut c = Container::new(serde_json::to_string(&self.config)?);
        self.params.visit(&mut |name, m| c.push(name, m.clone()));
        container::write_file(path, &c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = container::read_file(path)?;
        let config: FlowConfig = serde_json::from_str(&c.config_json)?;
        let get = |name: &str| c.get(name).cloned().ok_or_else(|| Error::Format(format!("missing tensor {name}")));
        let aux = match (c.get("u_w"), c.get("u_b")) {
            (Some(w), Some(b)) => Some((w.clone(), b.clone())),
            _ => None,
        };
        let params = FlowParams {
            cond_embed: get("cond_embed")?,
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
            v_w: get("v_w")?,
            v_b: get("v_b")?,
            aux,
        };
        Self::new(config, params)
    }
}

#[derive(Debug, Clone)]
pub struct FlowLoss {
    pub loss: f64,
    pub grads: FlowParams,
}

fn path_matrices(paths: &[FlowPath], dim: usize) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if paths.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if paths.iter().any(|p| p.x_t.len() != dim || p.v_target.len() != dim) {
        return Err(Error::Shape(format!("flow paths must have dimension {dim}")));
    }
    let xt: Vec<&[f64]> = paths.iter().map(|p| p.x_t.as_slice()).collect();
    let vt: Vec<&[f64]> = paths.iter().map(|p| p.v_target.as_slice()).collect();
    Ok((rows_to_matrix(&xt, dim), rows_to_matrix(&vt, dim), paths.iter().map(|p| p.t).collect()))
}

fn collect_grads(params: &FlowParams, vars: &FlowWeights<Var>, tape: &Tape<'_>, loss: Var) -> FlowParams {
    let mut g = tape.backward(loss);
    let zeros = params.zeros_like();
    let mut z = Vec::new();
    zeros.visit(&mut |_, m| z.push(m.clone()));
    let mut i = 0;
    vars.map(&mut |&v| {
        let out = g.take(v).unwrap_or_else(|| z[i].clone());
        i += 1;
        out
    })
}

/// Mean over the batch of `||v_θ(x_t, t, z) − (x1 − x0)||²`.
pub fn fm_loss(net: &FlowNet, paths: &[FlowPath], conds: &[Condition]) -> Result<FlowLoss> {
    let (xt, vt, t) = path_matrices(paths, net.config.dim)?;
    let mut tape = Tape::new();
    let w = net.vars(&mut tape, true);
    let heads = net.graph(&mut tape, &w, &xt, &t, conds)?;
    let target = tape.constant(vt);
    let r = tape.sub(heads.v, target);
    let s = tape.sum_squares(r);
    let loss = tape.scale(s, 1.0 / paths.len() as f64);
    let value = tape.value(loss).data()[0];
    Ok(FlowLoss { loss: value, grads: collect_grads(&net.params, &w, &tape, loss) })
}

/// Central difference of `f` along the path `(x + s·dir, t + s)`; falls back
/// to a one-sided difference when `t ± eps` leaves `[0, 1]`.
pub fn time_derivative(
    f: impl Fn(&Matrix, &[f64]) -> Result<Matrix>,
    x: &Matrix,
    dir: &Matrix,
    t: &[f64],
    eps: f64,
) -> Result<Matrix> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("JVP step {eps} must be positive")));
    }
    let shift = |s: &[f64]| {
        let mut m = x.clone();
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                m.set(r, c, x.get(r, c) + s[r] * dir.get(r, c));
            }
        }
        m
    };
    let hi: Vec<f64> = t.iter().map(|&t| if t + eps <= 1.0 { eps } else { 0.0 }).collect();
    let lo: Vec<f64> = t.iter().map(|&t| if t - eps >= 0.0 { -eps } else { 0.0 }).collect();
    let t_hi: Vec<f64> = t.iter().zip(&hi).map(|(t, s)| t + s).collect();
    let t_lo: Vec<f64> = t.iter().zip(&lo).map(|(t, s)| t + s).collect();
    let f_hi = f(&shift(&hi), &t_hi)?;
    let f_lo = f(&shift(&lo), &t_lo)?;
    let mut d = f_hi;
    for r in 0..d.rows() {
        let span = hi[r] - lo[r];
        for c in 0..d.cols() {
            d.set(r, c, (d.get(r, c) - f_lo.get(r, c)) / span);
        }
    }
    Ok(d)
}

/// `mean[ ||v_θ − v_t||² + ||u_θ − v_t − (1 − t)·D||² ]` where `D` is the
/// derivative of the frozen copy's `u` along its own `v` field.
pub fn distill_loss(
    net: &FlowNet,
    frozen: &FlowNet,
    paths: &[FlowPath],
    conds: &[Condition],
    eps: f64,
) -> Result<FlowLoss> {
    if !net.has_aux() || !frozen.has_aux() {
        return Err(Error::Config("distillation needs the auxiliary head".into()));
    }
    let (xt, vt, t) = path_matrices(paths, net.config.dim)?;
    let dir = frozen.velocity(&xt, &t, conds)?;
    let d = time_derivative(|x, t| frozen.aux_velocity(x, t, conds), &xt, &dir, &t, eps)?;
    let mut target_u = vt.clone();
    for r in 0..target_u.rows() {
        for c in 0..target_u.cols() {
            target_u.set(r, c, vt.get(r, c) + (1.0 - t[r]) * d.get(r, c));
        }
    }
    let mut tape = Tape::new();
    let w = net.vars(&mut tape, true);
    let heads = net.graph(&mut tape, &w, &xt, &t, conds)?;
    let tv = tape.constant(vt);
    let tu = tape.constant(target_u);
    let rv = tape.sub(heads.v, tv);
    let ru = tape.sub(heads.u.expect("checked above"), tu);
    let sv = tape.sum_squares(rv);
    let su = tape.sum_squares(ru);
    let s = tape.add(sv, su);
    let loss = tape.scale(s, 1.0 / paths.len() as f64);
    let value = tape.value(loss).data()[0];
    Ok(FlowLoss { loss: value, grads: collect_grads(&net.params, &w, &tape, loss) })
}

fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// Euler integration of the `v` head from `N(0, I)` at `t = 0` to `t = 1`.
pub fn sample<R: Rng + ?Sized>(net: &FlowNet, conds: &[Condition], steps: usize, rng: &mut R) -> Result<Matrix> {
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    let x0 = standard_normal(conds.len(), net.config.dim, rng);
    integrate(net, conds, x0, steps)
}

/// Euler integration from a given starting point.
pub fn integrate(net: &FlowNet, conds: &[Condition], mut x: Matrix, steps: usize) -> Result<Matrix> {
    let h = 1.0 / steps as f64;
    for k in 0..steps {
        let t = vec![k as f64 * h; x.rows()];
        let mut v = net.velocity(&x, &t, conds)?;
        v.scale(h);
        x.add_assign(&v);
    }
    Ok(x)
}

/// Few-step sampler on the `u` head: predict the endpoint
/// `x̂ = x + (1 − t)·u(x, t)`, then re-noise it to the next grid time with
/// fresh Gaussian noise. The last prediction is returned.
pub fn sample_consistency<R: Rng + ?Sized>(
    net: &FlowNet,
    conds: &[Condition],
    steps: usize,
    rng: &mut R,
) -> Result<Matrix> {
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    let n = conds.len();
    let d = net.config.dim;
    let mut x = standard_normal(n, d, rng);
    let mut t = 0.0;
    for k in 0..steps {
        let mut x_hat = net.aux_velocity(&x, &vec![t; n], conds)?;
        x_hat.scale(1.0 - t);
        x_hat.add_assign(&x);
        if k + 1 == steps {
            return Ok(x_hat);
        }
        t = (k + 1) as f64 / steps as f64;
        let noise = standard_normal(n, d, rng);
        x = Matrix::from_vec(n, d, noise.data().iter().zip(x_hat.data()).map(|(e, y)| (1.0 - t) * e + t * y).collect());
    }
    unreachable!("loop returns on its last step")
}

/// Squared-distance-free energy distance (V-statistic):
/// `2·E|X − Y| − E|X − X'| − E|Y − Y'|`.
pub fn energy_distance(a: &Matrix, b: &Matrix) -> f64 {
    fn mean_dist(a: &Matrix, b: &Matrix) -> f64 {
        let mut s = 0.0;
        for i in 0..a.rows() {
            let ra = a.row(i);
            for j in 0..b.rows() {
                s += ra.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            }
        }
        s / (a.rows() * b.rows()) as f64
    }
    2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
}

/// Source of training endpoints `x1`, one distribution per condition code.
pub trait FlowData {
    fn dim(&self) -> usize;
    fn codes(&self) -> usize;
    fn draw<R: Rng + ?Sized>(&self, code: usize, rng: &mut R) -> Vec<f64>;

    /// `n` training paths with uniformly drawn codes, noise and times.
    fn batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Vec<FlowPath>, Vec<Condition>) {
        let mut paths = Vec::with_capacity(n);
        let mut conds = Vec::with_capacity(n);
        for _ in 0..n {
            let code = rng.random_range(0..self.codes());
            let x0: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
            let x1 = self.draw(code, rng);
            paths.push(FlowPath::new(x0, x1, rng.random::<f64>()));
            conds.push(vec![code]);
        }
        (paths, conds)
    }
}

/// Per-condition Gaussians: code `c` draws from `N(means[c], sigma²·I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTask {
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl ToyTask {
    /// Two modes in the plane, one per condition code.
    pub fn two_gaussians() -> Self {
        Self { means: vec![vec![1.5, 0.5], vec![-1.0, -1.0]], sigma: 0.5 }
    }
}

impl FlowData for ToyTask {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn codes(&self) -> usize {
        self.means.len()
    }

    fn draw<R: Rng + ?Sized>(&self, code: usize, rng: &mut R) -> Vec<f64> {
        self.means[code].iter().map(|m| m + self.sigma * rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

/// Fixed pool of samples per code, drawn with replacement. Built from a
/// teacher sampler so the student distills the teacher's output
/// distribution, discretisation error included.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePool {
    pub per_code: Vec<Matrix>,
}

impl SamplePool {
    pub fn from_teacher<R: Rng + ?Sized>(teacher: &FlowNet, size: usize, steps: usize, rng: &mut R) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("sample pool must be non-empty".into()));
        }
        let per_code = (0..teacher.config.cond_vocab)
            .map(|code| sample(teacher, &vec![vec![code]; size], steps, rng))
            .collect::<Result<_>>()?;
        Ok(Self { per_code })
    }
}

impl FlowData for SamplePool {
    fn dim(&self) -> usize {
        self.per_code[0].cols()
    }

    fn codes(&self) -> usize {
        self.per_code.len()
    }

    fn draw<R: Rng + ?Sized>(&self, code: usize, rng: &mut R) -> Vec<f64> {
        let m = &self.per_code[code];
        m.row(rng.random_range(0..m.rows())).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTrainConfig {
    pub hidden: usize,
    pub cond_dim: usize,
    pub batch: usize,
    pub teacher_steps: usize,
    pub distill_steps: usize,
    pub teacher_lr: f64,
    pub distill_lr: f64,
    pub jvp_eps: f64,
    /// Teacher samples per code in the distillation pool.
    pub pool_size: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            cond_dim: 8,
            batch: 512,
            teacher_steps: 4000,
            distill_steps: 10000,
            teacher_lr: 3e-3,
            distill_lr: 1e-3,
            jvp_eps: DEFAULT_JVP_EPS,
            pool_size: 8192,
        }
    }
}

fn adam_for(params: &FlowParams, lr: f64) -> Adam {
    let mut shapes = Vec::new();
    params.visit(&mut |_, m| shapes.push(m.shape()));
    Adam::new(AdamConfig { lr, ..AdamConfig::default() }, &shapes)
}

fn apply(adam: &mut Adam, params: &mut FlowParams, grads: &FlowParams, lr: f64) {
    let mut g = Vec::new();
    grads.visit(&mut |_, m| g.push(m));
    let mut p = Vec::new();
    params.visit_mut(&mut |m| p.push(m));
    adam.step_with_lr(&mut p, &g, lr);
}

/// Cosine decay from `lr` to `lr/100`.
fn schedule(lr: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    lr * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Flow-matching training of a fresh `v`-only network. Returns per-step losses.
pub fn train_teacher<D: FlowData, R: Rng + ?Sized>(
    task: &D,
    cfg: &FlowTrainConfig,
    seed: u64,
    rng: &mut R,
) -> Result<(FlowNet, Vec<f64>)> {
    let config = FlowConfig { dim: task.dim(), hidden: cfg.hidden, cond_vocab: task.codes(), cond_dim: cfg.cond_dim };
    let mut net = FlowNet::init(config, seed)?;
    let mut adam = adam_for(&net.params, cfg.teacher_lr);
    let mut losses = Vec::with_capacity(cfg.teacher_steps);
    for step in 0..cfg.teacher_steps {
        let (paths, conds) = task.batch(cfg.batch, rng);
        let out = fm_loss(&net, &paths, &conds)?;
        apply(&mut adam, &mut net.params, &out.grads, schedule(cfg.teacher_lr, step, cfg.teacher_steps));
        losses.push(out.loss);
    }
    Ok((net, losses))
}

/// Consistency distillation of `teacher` into a dual-head student on
/// endpoints from `data`. The frozen copy is refreshed from the student
/// before every step.
pub fn train_student<D: FlowData, R: Rng + ?Sized>(
    teacher: &FlowNet,
    data: &D,
    cfg: &FlowTrainConfig,
    rng: &mut R,
) -> Result<(FlowNet, Vec<f64>)> {
    let mut net = teacher.with_aux_from_v();
    let mut adam = adam_for(&net.params, cfg.distill_lr);
    let mut losses = Vec::with_capacity(cfg.distill_steps);
    for step in 0..cfg.distill_steps {
        let (paths, conds) = data.batch(cfg.batch, rng);
        let frozen = net.clone();
        let out = distill_loss(&net, &frozen, &paths, &conds, cfg.jvp_eps)?;
        apply(&mut adam, &mut net.params, &out.grads, schedule(cfg.distill_lr, step, cfg.distill_steps));
        losses.push(out.loss);
    }
    Ok((net, losses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeReport {
    pub code: usize,
    /// Mean energy distance between independent teacher clouds.
    pub teacher_self_distance: f64,
    /// Mean energy distance between student and teacher clouds.
    pub student_distance: f64,
    pub ratio: f64,
    pub teacher_mean: Vec<f64>,
    pub student_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub samples: usize,
    pub resamplings: usize,
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub per_code: Vec<CodeReport>,
}

impl FlowReport {
    pub fn max_ratio(&self) -> f64 {
        self.per_code.iter().map(|c| c.ratio).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Compares the student's few-step consistency sampler against the
/// teacher's Euler sampler, per condition code, averaging over
/// `resamplings` independent draws of `samples` points.
pub fn evaluate<R: Rng + ?Sized>(
    teacher: &FlowNet,
    student: &FlowNet,
    samples: usize,
    resamplings: usize,
    rng: &mut R,
) -> Result<FlowReport> {
    if samples < 2 || resamplings == 0 {
        return Err(Error::Config("evaluation needs >= 2 samples and >= 1 resampling".into()));
    }
    let mut per_code = Vec::new();
    for code in 0..teacher.config.cond_vocab {
        let conds = vec![vec![code]; samples];
        let (mut self_d, mut student_d) = (0.0, 0.0);
        let (mut t_mean, mut s_mean) = (vec![0.0; teacher.config.dim], vec![0.0; teacher.config.dim]);
        for _ in 0..resamplings {
            let a = sample(teacher, &conds, TEACHER_STEPS, rng)?;
            let b = sample(teacher, &conds, TEACHER_STEPS, rng)?;
            let s = sample_consistency(student, &conds, STUDENT_STEPS, rng)?;
            self_d += energy_distance(&a, &b) / resamplings as f64;
            student_d += energy_distance(&s, &a) / resamplings as f64;
            for (m, x) in t_mean.iter_mut().zip(mean_rows(&a)) {
                *m += x / resamplings as f64;
            }
            for (m, x) in s_mean.iter_mut().zip(mean_rows(&s)) {
                *m += x / resamplings as f64;
            }
        }
        per_code.push(CodeReport {
            code,
            teacher_self_distance: self_d,
            student_distance: student_d,
            ratio: student_d / self_d,
            teacher_mean: t_mean,
            student_mean: s_mean,
        });
    }
    Ok(FlowReport { samples, resamplings, teacher_steps: TEACHER_STEPS, student_steps: STUDENT_STEPS, per_code })
}

/// Teacher training, teacher sample pool, student distillation.
pub fn distill_pipeline<D: FlowData, R: Rng + ?Sized>(
    data: &D,
    cfg: &FlowTrainConfig,
    seed: u64,
    rng: &mut R,
) -> Result<(FlowNet, FlowNet)> {
    let (teacher, _) = train_teacher(data, cfg, seed, rng)?;
    let pool = SamplePool::from_teacher(&teacher, cfg.pool_size, TEACHER_STEPS, rng)?;
    let (student, _) = train_student(&teacher, &pool, cfg, rng)?;
    Ok((teacher, student))
}

pub fn mean_rows(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, x) in out.iter_mut().zip(m.row(r)) {
            *o += x / m.rows() as f64;
        }
    }
    out
}
