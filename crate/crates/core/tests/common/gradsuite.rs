//! Finite-difference gradient suite shared by the gradient tests and the
//! acceptance run: random configurations of every differentiable operation
//! plus the composed detector loss.

use add_core::cell::Genotype;
use add_core::network::{loss_overall, Detector, NetworkConfig};
use add_core::params::{Forward, Mode, ParamStore};
use add_core::tensor::gradcheck::{check, relative_error, GradFn};
use add_core::{Conv2dSpec, Graph, PoolKind, Real, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference steps for checking 32-bit and 64-bit analytic
/// gradients. The oracle itself always evaluates the loss in `f64`.
pub const H32: f64 = 1e-3;
pub const H64: f64 = 1e-6;

/// Step for the composed loss: deep relu/max-pool networks have kinks
/// everywhere, so the small step is used for both precisions.
pub const H: f64 = 1e-6;

pub fn step_for<T: Real>() -> f64 {
    if std::mem::size_of::<T>() == 4 {
        H32
    } else {
        H64
    }
}

/// Fixed, non-uniform projection so the scalar loss sees every output.
fn project<T: Real>(g: &mut Graph<T>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let r: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    let r = g.constant(Tensor::from_f64(&shape, &r)?);
    let p = g.mul(y, r)?;
    g.sum(p)
}

#[derive(Clone, Debug)]
pub enum Case {
    Conv(Conv2dSpec),
    Pool { kind: PoolKind, k: usize, stride: usize, padding: usize },
    Linear { bias: bool },
    Bilinear { h: usize, w: usize },
    Add { broadcast: bool },
    Mul { broadcast: bool },
    AddN,
    Scale(f64),
    WeightedSum { idx: Vec<usize> },
    BatchNormTrain,
    BatchNormEval { mean: Vec<f64>, var: Vec<f64> },
    Softmax { axis: usize },
    Relu,
    Sigmoid,
    Concat,
    GlobalAvgPool,
    CrossEntropy { labels: Vec<usize> },
    Mse,
    Mean,
    Reshape,
}

impl GradFn for Case {
    fn eval<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let y = match self {
            Case::Conv(spec) => g.conv2d(v[0], v[1], *spec)?,
            Case::Pool { kind, k, stride, padding } => g.pool2d(v[0], *kind, *k, *stride, *padding)?,
            Case::Linear { bias } => g.linear(v[0], v[1], bias.then(|| v[2]))?,
            Case::Bilinear { h, w } => g.bilinear_upsample(v[0], *h, *w)?,
            Case::Add { .. } => g.add(v[0], v[1])?,
            Case::Mul { .. } => g.mul(v[0], v[1])?,
            Case::AddN => g.add_n(v)?,
            Case::Scale(c) => g.scale(v[0], T::from_f64(*c))?,
            Case::WeightedSum { idx } => {
                let terms: Vec<(Var, usize)> = v[..idx.len()].iter().copied().zip(idx.iter().copied()).collect();
                g.weighted_sum(&terms, v[idx.len()])?
            }
            Case::BatchNormTrain => g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0,
            Case::BatchNormEval { mean, var } => {
                let m: Vec<T> = mean.iter().map(|&x| T::from_f64(x)).collect();
                let s: Vec<T> = var.iter().map(|&x| T::from_f64(x)).collect();
                g.batch_norm_eval(v[0], v[1], v[2], &m, &s, 1e-5)?
            }
            Case::Softmax { axis } => g.softmax(v[0], *axis)?,
            Case::Relu => g.relu(v[0])?,
            Case::Sigmoid => g.sigmoid(v[0])?,
            Case::Concat => g.concat_channels(v)?,
            Case::GlobalAvgPool => g.global_avg_pool(v[0])?,
            Case::CrossEntropy { labels } => return g.cross_entropy(v[0], labels),
            Case::Mse => return g.mse(v[0], v[1]),
            Case::Mean => return g.mean(v[0]),
            Case::Reshape => {
                let n = g.value(v[0]).numel();
                g.reshape(v[0], &[n / 2, 2])?
            }
        };
        project(g, y)
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, d).unwrap()
}

/// Values bounded away from zero so relu kinks are never straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let d: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, d).unwrap()
}

/// Distinct values (a shuffled grid plus jitter) so max-pool windows have no ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut d: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 + rng.gen_range(0.0..0.2 / n as f64)).collect();
    for i in (1..n).rev() {
        d.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, d).unwrap()
}

fn nchw(rng: &mut ChaCha8Rng, max_c: usize, max_hw: usize) -> [usize; 4] {
    [rng.gen_range(1..=2), rng.gen_range(1..=max_c), rng.gen_range(3..=max_hw), rng.gen_range(3..=max_hw)]
}

/// A random configuration of `op`: the case, its inputs and which inputs are differentiated.
pub fn sample(op: &str, rng: &mut ChaCha8Rng) -> (Case, Vec<Tensor<f64>>, Vec<bool>) {
    match op {
        "conv2d" => loop {
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let depthwise = rng.gen_bool(0.3);
            let mut s = nchw(rng, 3, 8);
            s[1] = if depthwise { rng.gen_range(2..=4) } else { s[1] };
            let spec = Conv2dSpec::default()
                .stride(rng.gen_range(1..=2))
                .padding(rng.gen_range(0..=k / 2 * 2))
                .dilation(rng.gen_range(1..=2))
                .groups(if depthwise { s[1] } else { 1 });
            let reach = spec.dilation * (k - 1) + 1;
            if s[2] + 2 * spec.padding < reach || s[3] + 2 * spec.padding < reach {
                continue;
            }
            let cout = if depthwise { s[1] } else { rng.gen_range(1..=3) };
            let w = [cout, s[1] / spec.groups, k, k];
            break (Case::Conv(spec), vec![normal(rng, &s), normal(rng, &w)], vec![true, true]);
        },
        "pool2d" => {
            let kind = if rng.gen_bool(0.5) { PoolKind::Avg } else { PoolKind::Max };
            let k = rng.gen_range(2..=3);
            let case = Case::Pool {
                kind,
                k,
                stride: rng.gen_range(1..=2),
                padding: rng.gen_range(0..k),
            };
            let s = nchw(rng, 3, 7);
            (case, vec![distinct(rng, &s)], vec![true])
        }
        "linear" => {
            let (n, d, k) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=4));
            let bias = rng.gen_bool(0.5);
            let mut inputs = vec![normal(rng, &[n, d]), normal(rng, &[d, k])];
            if bias {
                inputs.push(normal(rng, &[k]));
            }
            let wrt = vec![true; inputs.len()];
            (Case::Linear { bias }, inputs, wrt)
        }
        "bilinear_upsample" => {
            let s = nchw(rng, 2, 5);
            let (h, w) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
            (Case::Bilinear { h, w }, vec![normal(rng, &s)], vec![true])
        }
        "add" | "mul" => {
            let s = nchw(rng, 3, 5);
            let broadcast = rng.gen_bool(0.5);
            let b = if broadcast { [s[0], 1, s[2], s[3]] } else { s };
            let case = if op == "add" { Case::Add { broadcast } } else { Case::Mul { broadcast } };
            (case, vec![normal(rng, &s), normal(rng, &b)], vec![true, true])
        }
        "add_n" => {
            let s = nchw(rng, 3, 5);
            let k = rng.gen_range(1..=4);
            ((Case::AddN), (0..k).map(|_| normal(rng, &s)).collect(), vec![true; k])
        }
        "scale" => {
            let s = nchw(rng, 3, 5);
            (Case::Scale(rng.gen_range(-2.0..2.0)), vec![normal(rng, &s)], vec![true])
        }
        "weighted_sum" => {
            let s = nchw(rng, 3, 5);
            let k = rng.gen_range(1..=4);
            let n_w = rng.gen_range(k..=k + 3);
            let idx: Vec<usize> = (0..k).map(|_| rng.gen_range(0..n_w)).collect();
            let mut inputs: Vec<Tensor<f64>> = (0..k).map(|_| normal(rng, &s)).collect();
            inputs.push(normal(rng, &[n_w]));
            (Case::WeightedSum { idx }, inputs, vec![true; k + 1])
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let mut s = nchw(rng, 3, 4);
            s[0] = rng.gen_range(2..=3);
            let c = s[1];
            let inputs = vec![normal(rng, &s), normal(rng, &[c]), normal(rng, &[c])];
            let case = if op == "batch_norm_train" {
                Case::BatchNormTrain
            } else {
                Case::BatchNormEval {
                    mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                    var: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
                }
            };
            (case, inputs, vec![true; 3])
        }
        "softmax" => {
            let rank = rng.gen_range(1..=3);
            let s: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=5)).collect();
            let axis = rng.gen_range(0..rank);
            (Case::Softmax { axis }, vec![normal(rng, &s)], vec![true])
        }
        "relu" => {
            let s = nchw(rng, 3, 5);
            (Case::Relu, vec![off_zero(rng, &s)], vec![true])
        }
        "sigmoid" => {
            let s = nchw(rng, 3, 5);
            let x = normal(rng, &s);
            let x = Tensor::new(&s, x.data().iter().map(|v| v * 4.0).collect()).unwrap();
            (Case::Sigmoid, vec![x], vec![true])
        }
        "concat_channels" => {
            let s = nchw(rng, 3, 5);
            let k = rng.gen_range(1..=3);
            let inputs = (0..k)
                .map(|_| { let c = rng.gen_range(1..=3); normal(rng, &[s[0], c, s[2], s[3]]) })
                .collect();
            (Case::Concat, inputs, vec![true; k])
        }
        "global_avg_pool" => {
            let s = nchw(rng, 3, 6);
            (Case::GlobalAvgPool, vec![normal(rng, &s)], vec![true])
        }
        "cross_entropy" => {
            let (n, k) = (rng.gen_range(1..=5), rng.gen_range(2..=4));
            let labels = (0..n).map(|_| rng.gen_range(0..k)).collect();
            (Case::CrossEntropy { labels }, vec![normal(rng, &[n, k])], vec![true])
        }
        "mse" => {
            let s = nchw(rng, 2, 5);
            (Case::Mse, vec![normal(rng, &s), normal(rng, &s)], vec![true, true])
        }
        "mean" => {
            let s = nchw(rng, 3, 5);
            (Case::Mean, vec![normal(rng, &s)], vec![true])
        }
        "reshape" => {
            let mut s = nchw(rng, 3, 5);
            s[0] = 2;
            (Case::Reshape, vec![normal(rng, &s)], vec![true])
        }
        other => panic!("unknown op {other}"),
    }
}

/// Every differentiable graph operation.
pub const OPS: &[&str] = &[
    "conv2d",
    "pool2d",
    "linear",
    "bilinear_upsample",
    "add",
    "mul",
    "add_n",
    "scale",
    "weighted_sum",
    "batch_norm_train",
    "batch_norm_eval",
    "softmax",
    "relu",
    "sigmoid",
    "concat_channels",
    "global_avg_pool",
    "cross_entropy",
    "mse",
    "mean",
    "reshape",
];

/// Largest relative error of `op` over `configs` random configurations.
pub fn worst_error<T: Real>(op: &str, configs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..configs {
        let (case, inputs, wrt) = sample(op, &mut rng);
        let report = check::<_, T>(&case, &inputs, &wrt, step_for::<T>())
            .unwrap_or_else(|e| panic!("{op} config {i} ({case:?}) failed to evaluate: {e}"));
        worst = worst.max(report.max_rel_err());
    }
    worst
}

/// A reference genotype that exercises every operation family.
pub fn reference_genotype(blocks: usize) -> Genotype {
    use add_core::cell::Edge;
    use add_core::ops::OpKind;
    let cycle = [
        OpKind::SepConv3,
        OpKind::Conv3,
        OpKind::MaxPool3,
        OpKind::Identity,
        OpKind::DilSepConv3,
        OpKind::AvgPool3,
    ];
    let mut k = 0;
    let mut cell = || {
        (0..blocks)
            .map(|b| {
                let pair = [
                    Edge { input: b % (b + 2), op: cycle[k % cycle.len()] },
                    Edge { input: b + 1, op: cycle[(k + 1) % cycle.len()] },
                ];
                k += 2;
                pair
            })
            .collect::<Vec<_>>()
    };
    let normal = cell();
    let reduce = cell();
    Genotype { blocks, normal, reduce }
}

/// Analytic gradient of the combined detector loss in `T` against the `f64`
/// oracle, on `coords` randomly chosen parameter coordinates (plus every
/// architecture logit for the supernet).
pub fn composed_loss_error<T: Real>(seed: u64, coords: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let supernet = rng.gen_bool(0.5);
    let config = NetworkConfig {
        stack_n: 1,
        num_d2_blocks: rng.gen_range(1..=2),
        stem_channels: rng.gen_range(2..=4),
        stem_stride: 1,
        input_size: [8, 8],
        num_classes: 2,
        lambda_mask: rng.gen_range(0.0..2.0),
    };
    let blocks = rng.gen_range(1..=2);
    let mut store = ParamStore::<f64>::new();
    let mut init = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let det = if supernet {
        Detector::supernet(&config, blocks, &mut store, &mut init).unwrap()
    } else {
        Detector::assemble(&reference_genotype(blocks), &config, &mut store, &mut init).unwrap()
    };
    if let Some(arch) = &det.arch {
        // Spread the logits so the mixture is not uniform.
        for id in [arch.normal, arch.reduce] {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
    }
    let n = 2;
    let images = Tensor::new(&[n, 3, 8, 8], (0..n * 192).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let masks = Tensor::new(&[n, 1, 8, 8], (0..n * 64).map(|_| rng.gen_range(0..2) as f64).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();

    fn loss<U: Real>(
        det: &Detector,
        store: &mut ParamStore<U>,
        x: &Tensor<f64>,
        m: &Tensor<f64>,
        labels: &[usize],
        grad: bool,
    ) -> (f64, Vec<(add_core::params::ParamId, Vec<f64>)>) {
        let mut fw = Forward::new(store, Mode::Train, grad, grad);
        let xi = fw.input(x.cast());
        let mi = fw.input(m.cast());
        let out = det.forward(&mut fw, xi).unwrap();
        let l = loss_overall(&mut fw, &out, labels, mi, det.config.lambda_mask).unwrap();
        let value = fw.graph.value(l.total).data()[0].as_f64();
        if !grad {
            return (value, Vec::new());
        }
        let grads = fw.backward(l.total).unwrap();
        (value, grads.into_iter().map(|(id, g)| (id, g.iter().map(|v| v.as_f64()).collect())).collect())
    }

    let mut low = store.cast::<T>();
    let (_, analytic) = loss(&det, &mut low, &images, &masks, &labels, true);
    // Pick coordinates: every α logit plus a random sample of the rest.
    let mut picks = Vec::new();
    for (id, g) in &analytic {
        let is_arch = det.arch.as_ref().is_some_and(|a| *id == a.normal || *id == a.reduce);
        if is_arch {
            picks.extend((0..g.len()).map(|j| (*id, j)));
        }
    }
    let others: Vec<_> = analytic
        .iter()
        .filter(|(id, _)| !picks.iter().any(|p| p.0 == *id))
        .flat_map(|(id, g)| (0..g.len()).map(move |j| (*id, j)))
        .collect();
    for _ in 0..coords.min(others.len()) {
        picks.push(others[rng.gen_range(0..others.len())]);
    }
    let mut a = Vec::new();
    let mut num = Vec::new();
    for &(id, j) in &picks {
        a.push(analytic.iter().find(|(i, _)| *i == id).unwrap().1[j]);
        let orig = store.value(id).data()[j];
        store.value_mut(id).data_mut()[j] = orig + H;
        let plus = loss(&det, &mut store, &images, &masks, &labels, false).0;
        store.value_mut(id).data_mut()[j] = orig - H;
        let minus = loss(&det, &mut store, &images, &masks, &labels, false).0;
        store.value_mut(id).data_mut()[j] = orig;
        num.push((plus - minus) / (2.0 * H));
    }
    relative_error(&a, &num)
}
