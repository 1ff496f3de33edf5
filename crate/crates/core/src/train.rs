//! Small-scale training of a fully-connected regressor with every GeMM routed
//! through the quantized datapath.
//!
//! The task is synthetic one-step dynamics: states are drawn from a standard
//! normal, and the target is `tanh(A s) + 0.5 s` for a random `A` scaled to
//! spectral norm 0.9. Master weights and biases stay FP32; only GeMM
//! operands (activations, weights, errors) are quantized.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MxError, Result};
use crate::formats::ElementFormat;
use crate::gemm::{functional_gemm, simulate_training_iteration, CoreConfig};
use crate::matrix::Matrix;
use crate::quant::{quantize_matrix, transpose_quantized, BlockGeometry, Orientation, QuantizedMatrix};
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    Fp32,
    Mx(ElementFormat),
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("fp32") {
            Ok(Precision::Fp32)
        } else {
            Ok(Precision::Mx(s.parse()?))
        }
    }

    pub fn label(self) -> String {
        match self {
            Precision::Fp32 => "FP32".into(),
            Precision::Mx(f) => f.name().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub precision: Precision,
    pub geometry: BlockGeometry,
    pub lr: f32,
    pub epochs: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub workload: WorkloadSpec,
    pub activation: Activation,
    /// Record real elapsed time in the loss curve (makes output
    /// run-dependent).
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn pusher(precision: Precision, geometry: BlockGeometry) -> Self {
        Self {
            precision,
            geometry,
            lr: 0.2,
            epochs: 10,
            seed: 7,
            train_samples: 512,
            val_samples: 256,
            workload: WorkloadSpec::pusher(32),
            activation: Activation::Relu,
            record_wall_time: false,
        }
    }

    fn validate(&self) -> Result<()> {
        self.workload.validate()?;
        if self.epochs == 0 || self.train_samples < self.workload.batch || self.val_samples == 0 {
            return Err(MxError::Invalid("need at least one epoch, one batch and one validation sample".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MxError::Invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if let Precision::Mx(_) = self.precision {
            if self.geometry == BlockGeometry::Vector16Bdr {
                return Err(MxError::Geometry("the MAC datapath has no micro-exponent support".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
}

impl Dataset {
    fn rows(&self, start: usize, n: usize) -> Dataset {
        let slice = |m: &Matrix| {
            Matrix::from_vec(n, m.cols, m.data[start * m.cols..(start + n) * m.cols].to_vec()).unwrap()
        };
        Dataset { x: slice(&self.x), y: slice(&self.y) }
    }
}

fn spectral_norm(a: &Matrix) -> f64 {
    let mut v = vec![1.0f64; a.cols];
    let mut sigma = 0.0;
    for _ in 0..100 {
        let av: Vec<f64> = (0..a.rows)
            .map(|r| (0..a.cols).map(|c| f64::from(a.get(r, c)) * v[c]).sum())
            .collect();
        let atav: Vec<f64> = (0..a.cols)
            .map(|c| (0..a.rows).map(|r| f64::from(a.get(r, c)) * av[r]).sum())
            .collect();
        let n = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        sigma = n.sqrt();
        v = atav.iter().map(|x| x / n).collect();
    }
    sigma
}

/// Training and validation sets of the synthetic dynamics task.
pub fn synthetic_dynamics(seed: u64, dim_in: usize, dim_out: usize, train: usize, val: usize) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let raw = Matrix::from_fn(dim_out, dim_in, |_, _| normal.sample(&mut rng));
    let scale = (0.9 / spectral_norm(&raw)) as f32;
    let a = Matrix::from_fn(dim_out, dim_in, |r, c| raw.get(r, c) * scale);
    let mut make = |n: usize| {
        let x = Matrix::from_fn(n, dim_in, |_, _| normal.sample(&mut rng));
        let y = Matrix::from_fn(n, dim_out, |r, o| {
            let lin: f32 = (0..dim_in).map(|c| a.get(o, c) * x.get(r, c)).sum();
            let skip = if o < dim_in { 0.5 * x.get(r, o) } else { 0.0 };
            lin.tanh() + skip
        });
        Dataset { x, y }
    };
    let t = make(train);
    let v = make(val);
    (t, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f32>>,
    pub activation: Activation,
    pub workload: WorkloadSpec,
}

impl MlpModel {
    /// He-normal weights, zero biases.
    pub fn init(workload: &WorkloadSpec, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = workload
            .layer_dims
            .iter()
            .map(|&(i, o)| {
                let normal = Normal::new(0.0f32, (2.0 / i as f32).sqrt()).unwrap();
                Matrix::from_fn(i, o, |_, _| normal.sample(&mut rng))
            })
            .collect();
        let biases = workload.layer_dims.iter().map(|&(_, o)| vec![0.0; o]).collect();
        Self { weights, biases, activation, workload: workload.clone() }
    }
}

/// Counts of quantizer work and stored weight bytes over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QuantizationCounters {
    /// Quantizations of each tensor beyond its first, all tensors.
    pub requantize_ops: u64,
    /// Re-encodings of weights for the backward pass.
    pub backward_weight_requantizations: u64,
    /// Iterations whose backward weights matched the forward weights
    /// bit-for-bit under transposition.
    pub transpose_consistent_iterations: u64,
    pub weight_copies: u64,
    pub bytes_stored_weights: u64,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub wall_time_s: f64,
    pub simulated_time_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub precision: Precision,
    pub geometry: BlockGeometry,
    pub seed: u64,
    pub initial_loss: f64,
    pub curve: Vec<EpochRecord>,
    pub counters: QuantizationCounters,
}

impl TrainRun {
    pub fn final_loss(&self) -> f64 {
        self.curve.last().map_or(self.initial_loss, |r| r.loss)
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,loss,wall_time,simulated_time_us\n");
        for r in &self.curve {
            s.push_str(&format!("{},{:.9e},{:.3},{:.3}\n", r.epoch, r.loss, r.wall_time_s, r.simulated_time_us));
        }
        s
    }
}

pub fn quantization_counters(run: &TrainRun) -> QuantizationCounters {
    run.counters
}

/// Quantized-operand GeMM engine for one precision and geometry.
struct Engine {
    precision: Precision,
    geometry: BlockGeometry,
    core: Option<CoreConfig>,
}

impl Engine {
    fn quantize(&self, m: &Matrix, orientation: Orientation) -> Result<QuantizedMatrix> {
        let Precision::Mx(f) = self.precision else { unreachable!("FP32 never quantizes") };
        let orientation = if self.geometry == BlockGeometry::Square8x8 { Orientation::Square } else { orientation };
        quantize_matrix(m, f, self.geometry, orientation)
    }

    fn gemm(&self, a: &QuantizedMatrix, b: &QuantizedMatrix) -> Result<Matrix> {
        functional_gemm(self.core.as_ref().expect("MX engine has a core"), a, b)
    }
}

fn add_bias_activate(z: &mut Matrix, bias: &[f32], act: Option<Activation>) {
    for r in 0..z.rows {
        for (c, b) in bias.iter().enumerate() {
            let v = z.get(r, c) + b;
            z.set(r, c, act.map_or(v, |a| a.apply(v)));
        }
    }
}

struct Forward {
    /// Inputs of every layer, then the network output.
    acts: Vec<Matrix>,
    /// Quantized layer inputs and weights (MX runs only).
    qacts: Vec<QuantizedMatrix>,
    qweights: Vec<QuantizedMatrix>,
}

fn forward(model: &MlpModel, engine: &Engine, x: &Matrix) -> Result<Forward> {
    let layers = model.weights.len();
    let mut acts = vec![x.clone()];
    let mut qacts = Vec::new();
    let mut qweights = Vec::new();
    for l in 0..layers {
        let input = &acts[l];
        let mut z = match engine.precision {
            Precision::Fp32 => input.matmul(&model.weights[l])?,
            Precision::Mx(_) => {
                let qa = engine.quantize(input, Orientation::RowBlocks)?;
                let qw = engine.quantize(&model.weights[l], Orientation::ColBlocks)?;
                let z = engine.gemm(&qa, &qw)?;
                qacts.push(qa);
                qweights.push(qw);
                z
            }
        };
        let act = (l + 1 < layers).then_some(model.activation);
        add_bias_activate(&mut z, &model.biases[l], act);
        acts.push(z);
    }
    Ok(Forward { acts, qacts, qweights })
}

fn mse(pred: &Matrix, y: &Matrix) -> f64 {
    let s: f64 = pred.data.iter().zip(&y.data).map(|(p, t)| f64::from(p - t).powi(2)).sum();
    s / pred.data.len() as f64
}

fn train_step(
    model: &mut MlpModel,
    engine: &Engine,
    batch: &Dataset,
    lr: f32,
    counters: &mut QuantizationCounters,
) -> Result<()> {
    let layers = model.weights.len();
    let fw = forward(model, engine, &batch.x)?;
    let out = &fw.acts[layers];
    let n = out.data.len() as f32;
    let mut err = Matrix::from_fn(out.rows, out.cols, |r, c| 2.0 * (out.get(r, c) - batch.y.get(r, c)) / n);
    let mut transpose_ok = true;
    let mut grads = Vec::with_capacity(layers);
    for l in (0..layers).rev() {
        let input = &fw.acts[l];
        let (dw, dx) = match engine.precision {
            Precision::Fp32 => {
                let dw = input.transpose().matmul(&err)?;
                let dx = if l > 0 { Some(err.matmul(&model.weights[l].transpose())?) } else { None };
                (dw, dx)
            }
            Precision::Mx(_) => {
                let square = engine.geometry == BlockGeometry::Square8x8;
                let qe_row = engine.quantize(&err, Orientation::RowBlocks)?;
                let (qwt, qat, qe_col) = if square {
                    let qwt = transpose_quantized(&fw.qweights[l])?;
                    transpose_ok &= qwt.dequantize_f32() == fw.qweights[l].dequantize_f32().transpose();
                    (qwt, transpose_quantized(&fw.qacts[l])?, None)
                } else {
                    // Column-blocked copies along the new reduction axes. The
                    // transposed weight copy is refreshed for every layer.
                    let qwt = engine.quantize(&model.weights[l].transpose(), Orientation::ColBlocks)?;
                    let qat = engine.quantize(&input.transpose(), Orientation::RowBlocks)?;
                    let qe_col = engine.quantize(&err, Orientation::ColBlocks)?;
                    counters.backward_weight_requantizations += 1;
                    counters.requantize_ops += 3;
                    (qwt, qat, Some(qe_col))
                };
                let dw = engine.gemm(&qat, qe_col.as_ref().unwrap_or(&qe_row))?;
                let dx = if l > 0 { Some(engine.gemm(&qe_row, &qwt)?) } else { None };
                (dw, dx)
            }
        };
        let db: Vec<f32> = (0..err.cols).map(|c| (0..err.rows).map(|r| err.get(r, c)).sum()).collect();
        grads.push((l, dw, db));
        if let Some(dx) = dx {
            let act = model.activation;
            err = Matrix::from_fn(dx.rows, dx.cols, |r, c| dx.get(r, c) * act.grad_from_output(input.get(r, c)));
        }
    }
    for (l, dw, db) in grads {
        for (w, g) in model.weights[l].data.iter_mut().zip(&dw.data) {
            *w -= lr * g;
        }
        for (b, g) in model.biases[l].iter_mut().zip(&db) {
            *b -= lr * g;
        }
    }
    if engine.precision != Precision::Fp32 && engine.geometry == BlockGeometry::Square8x8 && transpose_ok {
        counters.transpose_consistent_iterations += 1;
    }
    counters.iterations += 1;
    Ok(())
}

fn validation_loss(model: &MlpModel, engine: &Engine, val: &Dataset) -> Result<f64> {
    let fw = forward(model, engine, &val.x)?;
    Ok(mse(&fw.acts[model.weights.len()], &val.y))
}

fn weight_storage(model: &MlpModel, engine: &Engine) -> Result<(u64, u64)> {
    match engine.precision {
        Precision::Fp32 => Ok((1, (model.workload.parameter_count() * 4) as u64)),
        Precision::Mx(_) => {
            let mut bits = 0;
            for w in &model.weights {
                bits += engine.quantize(w, Orientation::ColBlocks)?.storage_bits();
            }
            let copies = if engine.geometry == BlockGeometry::Square8x8 { 1 } else { 2 };
            Ok((copies, copies * bits.div_ceil(8)))
        }
    }
}

/// Train from a seeded initialization and return the validation curve.
pub fn train(config: &TrainConfig) -> Result<TrainRun> {
    config.validate()?;
    let w = &config.workload;
    let (dim_in, dim_out) = (w.layer_dims[0].0, w.layer_dims[w.layer_dims.len() - 1].1);
    let (data, val) = synthetic_dynamics(config.seed, dim_in, dim_out, config.train_samples, config.val_samples);
    let mut model = MlpModel::init(w, config.activation, config.seed);
    let core = match config.precision {
        Precision::Fp32 => None,
        Precision::Mx(f) => Some(CoreConfig::reference(f)),
    };
    let iter_us = core.as_ref().map_or(0.0, |c| simulate_training_iteration(c, w).latency_us);
    let engine = Engine { precision: config.precision, geometry: config.geometry, core };
    let mut counters = QuantizationCounters::default();
    let (copies, bytes) = weight_storage(&model, &engine)?;
    counters.weight_copies = copies;
    counters.bytes_stored_weights = bytes;

    let initial_loss = validation_loss(&model, &engine, &val)?;
    let mut order: Vec<usize> = (0..config.train_samples / w.batch).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let start = Instant::now();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        // Fisher-Yates over batch order
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for &b in &order {
            let batch = data.rows(b * w.batch, w.batch);
            train_step(&mut model, &engine, &batch, config.lr, &mut counters)?;
        }
        let loss = validation_loss(&model, &engine, &val)?;
        if !loss.is_finite() {
            return Err(MxError::Diverged { epoch, loss });
        }
        curve.push(EpochRecord {
            epoch,
            loss,
            wall_time_s: if config.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
            simulated_time_us: iter_us * counters.iterations as f64,
        });
    }
    Ok(TrainRun {
        precision: config.precision,
        geometry: config.geometry,
        seed: config.seed,
        initial_loss,
        curve,
        counters,
    })
}
