//! Toy training loop with gradual block pruning.
//!
//! A single projected LSTM (no layer norm) plus a linear readout learns a
//! delayed echo: the target at step `t` is the input at step `t − delay`.
//! Backpropagation through time is exact; weights are updated with plain
//! gradient descent so that pruned blocks keep their retained values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::blocksparse::BlockShape;
use crate::cells::{Cell, Gate, LstmWeights};
use crate::linear::Linear;
use crate::matrix::Matrix;
use crate::pruning::{PruningError, PruningSchedule, PruningState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),

    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: u64 },

    #[error(transparent)]
    Pruning(#[from] PruningError),
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-major `rows × cols` matrix in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    fn random<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        Self { rows, cols, data: (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect() }
    }

    fn from_f32(m: &Matrix<f32>) -> Self {
        Self { rows: m.rows(), cols: m.cols(), data: m.as_slice().iter().map(|&v| v as f64).collect() }
    }

    fn to_f32(&self) -> Matrix<f32> {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&v| v as f32).collect()).expect("same shape")
    }

    /// `y += A x`
    fn mul_add(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *yr += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// `y += Aᵀ d`
    fn mul_t_add(&self, d: &[f64], y: &mut [f64]) {
        for (r, &dr) in d.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            y.iter_mut().zip(row).for_each(|(v, a)| *v += a * dr);
        }
    }

    /// `A += d xᵀ`
    fn outer_add(&mut self, d: &[f64], x: &[f64]) {
        for (r, &dr) in d.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            row.iter_mut().zip(x).for_each(|(a, b)| *a += dr * b);
        }
    }
}

/// Gate order: input, forget, cell input, output.
pub const GATES: usize = 4;

/// Projected LSTM with a linear readout, in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmNet {
    pub w: [Mat; GATES],
    pub r: [Mat; GATES],
    pub b: [Vec<f64>; GATES],
    pub proj: Mat,
    pub readout: Mat,
    pub readout_bias: Vec<f64>,
}

/// Gradients, shaped like the parameters.
pub type Grads = LstmNet;

impl LstmNet {
    pub fn random<R: Rng>(input: usize, hidden: usize, projection: usize, output: usize, rng: &mut R) -> Self {
        let bi = 1.0 / (input as f64).sqrt();
        let br = 1.0 / (projection as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        let mut b: [Vec<f64>; GATES] =
            std::array::from_fn(|_| (0..hidden).map(|_| rng.gen_range(-0.1..=0.1)).collect());
        b[1].iter_mut().for_each(|v| *v += 1.0);
        Self {
            w: std::array::from_fn(|_| Mat::random(hidden, input, bi, rng)),
            r: std::array::from_fn(|_| Mat::random(hidden, projection, br, rng)),
            b,
            proj: Mat::random(projection, hidden, bh, rng),
            readout: Mat::random(output, projection, br, rng),
            readout_bias: vec![0.0; output],
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Mat| Mat::zeros(m.rows, m.cols);
        Self {
            w: std::array::from_fn(|g| z(&self.w[g])),
            r: std::array::from_fn(|g| z(&self.r[g])),
            b: std::array::from_fn(|g| vec![0.0; self.b[g].len()]),
            proj: z(&self.proj),
            readout: z(&self.readout),
            readout_bias: vec![0.0; self.readout_bias.len()],
        }
    }

    pub fn hidden(&self) -> usize {
        self.proj.cols
    }

    pub fn projection(&self) -> usize {
        self.proj.rows
    }

    /// Every parameter slice, in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        v.extend(self.w.iter().map(|m| m.data.as_slice()));
        v.extend(self.r.iter().map(|m| m.data.as_slice()));
        v.extend(self.b.iter().map(Vec::as_slice));
        v.push(&self.proj.data);
        v.push(&self.readout.data);
        v.push(&self.readout_bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        v.extend(self.w.iter_mut().map(|m| m.data.as_mut_slice()));
        v.extend(self.r.iter_mut().map(|m| m.data.as_mut_slice()));
        v.extend(self.b.iter_mut().map(Vec::as_mut_slice));
        v.push(&mut self.proj.data);
        v.push(&mut self.readout.data);
        v.push(&mut self.readout_bias);
        v
    }

    /// The recurrent cell as a float reference cell (readout excluded).
    pub fn to_cell(&self) -> Cell<Linear> {
        let gate = |g: usize| Gate {
            input: Linear::Dense(self.w[g].to_f32()),
            recurrent: Some(Linear::Dense(self.r[g].to_f32())),
            bias: self.b[g].iter().map(|&v| v as f32).collect(),
            norm_gain: None,
        };
        Cell::Lstm(LstmWeights {
            input_gate: gate(0),
            forget_gate: gate(1),
            cell_input: gate(2),
            output_gate: gate(3),
            projection: Linear::Dense(self.proj.to_f32()),
        })
    }

    /// Cell outputs `h_t` for one sequence from a zero state.
    pub fn run(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.trace(xs).into_iter().map(|s| s.h).collect()
    }

    fn trace(&self, xs: &[Vec<f64>]) -> Vec<StepCache> {
        let (nh, np) = (self.hidden(), self.projection());
        let mut c = vec![0.0; nh];
        let mut h = vec![0.0; np];
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let mut a: [Vec<f64>; GATES] = std::array::from_fn(|g| self.b[g].clone());
            for (g, acc) in a.iter_mut().enumerate() {
                self.w[g].mul_add(x, acc);
                self.r[g].mul_add(&h, acc);
            }
            let i: Vec<f64> = a[0].iter().map(|&v| sigmoid(v)).collect();
            let f: Vec<f64> = a[1].iter().map(|&v| sigmoid(v)).collect();
            let z: Vec<f64> = a[2].iter().map(|&v| v.tanh()).collect();
            let o: Vec<f64> = a[3].iter().map(|&v| sigmoid(v)).collect();
            let c_new: Vec<f64> = (0..nh).map(|k| i[k] * z[k] + f[k] * c[k]).collect();
            let tc: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
            let m: Vec<f64> = (0..nh).map(|k| o[k] * tc[k]).collect();
            let mut h_new = vec![0.0; np];
            self.proj.mul_add(&m, &mut h_new);
            out.push(StepCache {
                x: x.clone(),
                h_prev: std::mem::replace(&mut h, h_new.clone()),
                c_prev: std::mem::replace(&mut c, c_new),
                gates: [i, f, z, o],
                tc,
                m,
                h: h_new,
            });
        }
        out
    }

    fn readout(&self, h: &[f64]) -> Vec<f64> {
        let mut y = self.readout_bias.clone();
        self.readout.mul_add(h, &mut y);
        y
    }

    /// Mean squared error (halved) over all scored steps of the batch.
    pub fn loss(&self, batch: &EchoBatch) -> f64 {
        let mut total = 0.0;
        for (xs, ys) in batch.inputs.iter().zip(&batch.targets) {
            for (t, h) in self.run(xs).iter().enumerate().skip(batch.delay) {
                let y = self.readout(h);
                total += y.iter().zip(&ys[t]).map(|(a, b)| 0.5 * (a - b).powi(2)).sum::<f64>();
            }
        }
        total / batch.scored_values() as f64
    }

    /// Loss and its exact gradient by backpropagation through time.
    pub fn loss_and_grads(&self, batch: &EchoBatch) -> (f64, Grads) {
        let mut g = self.zeros_like();
        let norm = 1.0 / batch.scored_values() as f64;
        let mut total = 0.0;
        let (nh, np) = (self.hidden(), self.projection());
        for (xs, ys) in batch.inputs.iter().zip(&batch.targets) {
            let steps = self.trace(xs);
            let mut dh_next = vec![0.0; np];
            let mut dc_next = vec![0.0; nh];
            for (t, s) in steps.iter().enumerate().rev() {
                let mut dh = std::mem::take(&mut dh_next);
                if t >= batch.delay {
                    let y = self.readout(&s.h);
                    let dy: Vec<f64> = y.iter().zip(&ys[t]).map(|(a, b)| (a - b) * norm).collect();
                    total += y.iter().zip(&ys[t]).map(|(a, b)| 0.5 * (a - b).powi(2)).sum::<f64>();
                    g.readout.outer_add(&dy, &s.h);
                    g.readout_bias.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
                    self.readout.mul_t_add(&dy, &mut dh);
                }
                g.proj.outer_add(&dh, &s.m);
                let mut dm = vec![0.0; nh];
                self.proj.mul_t_add(&dh, &mut dm);
                let [i, f, z, o] = &s.gates;
                let mut da: [Vec<f64>; GATES] = std::array::from_fn(|_| vec![0.0; nh]);
                let mut dc_prev = vec![0.0; nh];
                for k in 0..nh {
                    let dc = dc_next[k] + dm[k] * o[k] * (1.0 - s.tc[k] * s.tc[k]);
                    da[0][k] = dc * z[k] * i[k] * (1.0 - i[k]);
                    da[1][k] = dc * s.c_prev[k] * f[k] * (1.0 - f[k]);
                    da[2][k] = dc * i[k] * (1.0 - z[k] * z[k]);
                    da[3][k] = dm[k] * s.tc[k] * o[k] * (1.0 - o[k]);
                    dc_prev[k] = dc * f[k];
                }
                let mut dh_prev = vec![0.0; np];
                for (q, dq) in da.iter().enumerate() {
                    g.w[q].outer_add(dq, &s.x);
                    g.r[q].outer_add(dq, &s.h_prev);
                    g.b[q].iter_mut().zip(dq).for_each(|(a, b)| *a += b);
                    self.r[q].mul_t_add(dq, &mut dh_prev);
                }
                dh_next = dh_prev;
                dc_next = dc_prev;
            }
        }
        (total * norm, g)
    }
}

struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: [Vec<f64>; GATES],
    tc: Vec<f64>,
    m: Vec<f64>,
    h: Vec<f64>,
}

/// Sequences of uniform inputs and their delayed copies.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoBatch {
    pub inputs: Vec<Vec<Vec<f64>>>,
    pub targets: Vec<Vec<Vec<f64>>>,
    /// Steps before `delay` are not scored.
    pub delay: usize,
}

impl EchoBatch {
    pub fn generate<R: Rng>(batch: usize, len: usize, width: usize, delay: usize, rng: &mut R) -> Self {
        let inputs: Vec<Vec<Vec<f64>>> = (0..batch)
            .map(|_| (0..len).map(|_| (0..width).map(|_| rng.gen_range(-1.0..=1.0)).collect()).collect())
            .collect();
        let targets = inputs
            .iter()
            .map(|xs| (0..len).map(|t| if t >= delay { xs[t - delay].clone() } else { vec![0.0; width] }).collect())
            .collect();
        Self { inputs, targets, delay }
    }

    fn scored_values(&self) -> usize {
        let width = self.targets.first().and_then(|s| s.first()).map_or(0, Vec::len);
        self.targets.iter().map(|s| s.len().saturating_sub(self.delay) * width).sum::<usize>().max(1)
    }
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    /// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
}

/// Checks every parameter (or every `stride`-th one) by central differences.
pub fn gradient_check(net: &LstmNet, batch: &EchoBatch, eps: f64, floor: f64, stride: usize) -> GradCheck {
    let (_, grads) = net.loss_and_grads(batch);
    let analytic: Vec<f64> = grads.params().concat();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let total = analytic.len();
    for idx in (0..total).step_by(stride.max(1)) {
        let orig = get_flat(&probe, idx);
        set_flat(&mut probe, idx, orig + eps);
        let up = probe.loss(batch);
        set_flat(&mut probe, idx, orig - eps);
        let down = probe.loss(batch);
        set_flat(&mut probe, idx, orig);
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
        checked += 1;
    }
    GradCheck { checked, max_rel_error: worst }
}

fn locate(net: &LstmNet, mut idx: usize) -> (usize, usize) {
    for (p, s) in net.params().iter().enumerate() {
        if idx < s.len() {
            return (p, idx);
        }
        idx -= s.len();
    }
    panic!("parameter index out of range")
}

fn get_flat(net: &LstmNet, idx: usize) -> f64 {
    let (p, i) = locate(net, idx);
    net.params()[p][i]
}

fn set_flat(net: &mut LstmNet, idx: usize, v: f64) {
    let (p, i) = locate(net, idx);
    net.params_mut()[p][i] = v;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub input: usize,
    pub hidden: usize,
    pub projection: usize,
    pub delay: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub steps: u64,
    pub learning_rate: f64,
    /// Gradient-norm clip.
    pub clip: f64,
    pub seed: u64,
    pub final_sparsity: f64,
    pub initial_sparsity: f64,
    pub start_step: u64,
    pub end_step: u64,
    pub mask_update_interval: u64,
    pub exponent: u32,
    pub block: BlockShape,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input: 2,
            hidden: 32,
            projection: 16,
            delay: 2,
            seq_len: 16,
            batch: 8,
            steps: 600,
            learning_rate: 2.0,
            clip: 5.0,
            seed: 1,
            final_sparsity: 0.5,
            initial_sparsity: 0.0,
            start_step: 50,
            end_step: 400,
            mask_update_interval: 25,
            exponent: 3,
            block: BlockShape { rows: 4, cols: 1 },
            log_interval: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.hidden == 0 || self.hidden > 64 {
            return bad("hidden width must be in 1..=64");
        }
        if self.input == 0 || self.projection == 0 || self.seq_len == 0 || self.batch == 0 || self.steps == 0 {
            return bad("widths, sequence length, batch and steps must be positive");
        }
        if self.delay >= self.seq_len {
            return bad("delay must be shorter than the sequence");
        }
        if self.log_interval == 0 {
            return bad("log interval must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.final_sparsity > 0.0 {
            self.schedule()?;
            for cols in [self.input, self.projection] {
                self.block.grid(self.hidden, cols).map_err(|e| TrainError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    fn schedule(&self) -> Result<PruningSchedule, PruningError> {
        let mut s = PruningSchedule::new(self.initial_sparsity, self.final_sparsity, self.start_step, self.end_step)?
            .with_interval(self.mask_update_interval)?;
        s.exponent = self.exponent;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub target_sparsity: f64,
    /// Pruned fraction of all W/R blocks.
    pub sparsity: f64,
    /// Flags flipped by mask updates since the previous entry.
    pub churn: usize,
    /// Blocks that came back since the previous entry.
    pub recovered: usize,
    pub mask_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_sparsity: f64,
    pub total_mask_updates: usize,
    pub total_recovered: usize,
}

/// Trains on the delayed-echo task with gradual pruning of every W and R matrix.
pub fn demo_train(cfg: &TrainConfig) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = LstmNet::random(cfg.input, cfg.hidden, cfg.projection, cfg.input, &mut rng);
    let mut pruning: Option<Vec<PruningState>> = if cfg.final_sparsity > 0.0 {
        let s = cfg.schedule()?;
        let mut v = Vec::new();
        for m in net.w.iter().chain(&net.r) {
            v.push(PruningState::new(m.to_f32(), s, cfg.block)?);
        }
        Some(v)
    } else {
        None
    };
    let eval = EchoBatch::generate(4 * cfg.batch, cfg.seq_len, cfg.input, cfg.delay, &mut rng);
    let mut entries = Vec::new();
    let (mut churn, mut recovered, mut updates) = (0, 0, 0);
    let (mut total_updates, mut total_recovered) = (0, 0);
    let mut initial_loss = None;
    let mut target = 0.0;
    for step in 0..cfg.steps {
        if let Some(states) = pruning.as_mut() {
            for (k, st) in states.iter_mut().enumerate() {
                if let Some(u) = st.maybe_update_mask(step)? {
                    churn += u.churn;
                    recovered += u.recovered;
                    total_recovered += u.recovered;
                    target = u.target_sparsity;
                    if k == 0 {
                        updates += 1;
                        total_updates += 1;
                    }
                }
                let eff = Mat::from_f32(&st.effective());
                if k < GATES {
                    net.w[k] = eff;
                } else {
                    net.r[k - GATES] = eff;
                }
            }
        }
        let batch = EchoBatch::generate(cfg.batch, cfg.seq_len, cfg.input, cfg.delay, &mut rng);
        let (loss, mut grads) = net.loss_and_grads(&batch);
        if !loss.is_finite() {
            return Err(TrainError::Divergence { step });
        }
        initial_loss.get_or_insert_with(|| net.loss(&eval));
        let norm = grads.params().iter().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(TrainError::Divergence { step });
        }
        let scale = cfg.learning_rate * if norm > cfg.clip { cfg.clip / norm } else { 1.0 };
        if let Some(states) = pruning.as_mut() {
            for (k, st) in states.iter_mut().enumerate() {
                let gm = if k < GATES { &grads.w[k] } else { &grads.r[k - GATES] };
                let mut g = gm.to_f32();
                st.mask_gradients(&mut g);
                for (r, d) in st.retained.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *r -= (scale as f32) * d;
                }
            }
            // Matrices live in the pruning states; only the rest is stepped here.
            for g in grads.w.iter_mut().chain(grads.r.iter_mut()) {
                g.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for (p, d) in net.params_mut().into_iter().zip(grads.params()) {
            p.iter_mut().zip(d).for_each(|(a, b)| *a -= scale * b);
        }
        let last = step + 1 == cfg.steps;
        if step % cfg.log_interval == 0 || last {
            let sparsity = pruning.as_ref().map_or(0.0, |s| overall_sparsity(s));
            let l = net.loss(&eval);
            if !l.is_finite() {
                return Err(TrainError::Divergence { step });
            }
            entries.push(LogEntry {
                step,
                loss: l,
                target_sparsity: target,
                sparsity,
                churn,
                recovered,
                mask_updates: updates,
            });
            churn = 0;
            recovered = 0;
            updates = 0;
        }
    }
    // The last gradient step moved retained values only; the effective
    // weights reported are the masked ones.
    if let Some(states) = pruning.as_ref() {
        for (k, st) in states.iter().enumerate() {
            let eff = Mat::from_f32(&st.effective());
            if k < GATES {
                net.w[k] = eff;
            } else {
                net.r[k - GATES] = eff;
            }
        }
    }
    let final_loss = net.loss(&eval);
    Ok(TrainLog {
        initial_loss: initial_loss.unwrap_or(final_loss),
        final_loss,
        final_sparsity: pruning.as_ref().map_or(0.0, |s| overall_sparsity(s)),
        total_mask_updates: total_updates,
        total_recovered,
        entries,
    })
}

fn overall_sparsity(states: &[PruningState]) -> f64 {
    let (pruned, total) = states.iter().fold((0, 0), |(p, t), s| (p + s.mask.pruned_count(), t + s.mask.len()));
    pruned as f64 / total as f64
}
