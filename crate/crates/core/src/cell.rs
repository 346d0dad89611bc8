//! Cells: the continuous (mixed) search cell, the discrete cell built from a
//! genotype, and the discretisation between them.

use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::ops::{OpInstance, OpKind};
use crate::params::{BatchNorm, Conv, Forward, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Conv2dSpec, Real, Tensor, Var};

/// Number of candidate edges in a cell of `blocks` blocks: block `i` sees `i + 2` inputs.
pub fn edge_count(blocks: usize) -> usize {
    blocks * (blocks + 3) / 2
}

/// Row of the α table holding the logits of edge `input → block`.
pub fn edge_index(block: usize, input: usize) -> usize {
    block * (block + 3) / 2 + input
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub input: usize,
    pub op: OpKind,
}

/// A discrete architecture: two `(input, op)` edges per block, for both cell types.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub blocks: usize,
    pub normal: Vec<[Edge; 2]>,
    pub reduce: Vec<[Edge; 2]>,
}

impl Genotype {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return config_err("genotype needs at least one block");
        }
        for (cell, list) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if list.len() != self.blocks {
                return config_err(format!(
                    "{cell} cell lists {} blocks, expected {}",
                    list.len(),
                    self.blocks
                ));
            }
            for (i, pair) in list.iter().enumerate() {
                for e in pair {
                    if e.input >= i + 2 {
                        return config_err(format!("{cell} block {i} reads input {} (max {})", e.input, i + 1));
                    }
                    if e.op == OpKind::Zero {
                        return config_err(format!("{cell} block {i} selects the zero operation"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Graphviz rendering: one cluster per cell type, block nodes, op-labelled edges.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph genotype {\n  rankdir=LR;\n");
        for (cell, list) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            let _ = writeln!(s, "  subgraph cluster_{cell} {{\n    label=\"{cell}\";");
            let _ = writeln!(s, "    {cell}_in0 [label=\"c_{{k-2}}\", shape=box];");
            let _ = writeln!(s, "    {cell}_in1 [label=\"c_{{k-1}}\", shape=box];");
            for i in 0..list.len() {
                let _ = writeln!(s, "    {cell}_b{i} [label=\"{i}\"];");
            }
            let _ = writeln!(s, "    {cell}_out [label=\"c_{{k}}\", shape=box];");
            for (i, pair) in list.iter().enumerate() {
                for e in pair {
                    let src = match e.input {
                        0 | 1 => format!("{cell}_in{}", e.input),
                        j => format!("{cell}_b{}", j - 2),
                    };
                    let _ = writeln!(s, "    {src} -> {cell}_b{i} [label=\"{}\"];", e.op);
                }
                let _ = writeln!(s, "    {cell}_b{i} -> {cell}_out;");
            }
            s.push_str("  }\n");
        }
        s.push_str("}\n");
        s
    }
}

/// Architecture logits: one `[edges, 11]` table per cell type.
#[derive(Clone, Debug)]
pub struct ArchParams {
    pub blocks: usize,
    pub normal: ParamId,
    pub reduce: ParamId,
}

impl ArchParams {
    /// Logits drawn from `N(0, 1e-3²)`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, blocks: usize) -> Result<Self> {
        if blocks == 0 {
            return config_err("a cell needs at least one block");
        }
        let shape = [edge_count(blocks), OpKind::COUNT];
        let normal_dist = Normal::new(0.0, 1e-3).expect("valid normal");
        let mut draw = |name: &str| {
            let data: Vec<f64> = (0..shape[0] * shape[1]).map(|_| normal_dist.sample(rng)).collect();
            store.add(name, ParamGroup::Arch, Tensor::from_f64(&shape, &data).expect("shape"))
        };
        let normal = draw("alpha.normal");
        let reduce = draw("alpha.reduce");
        Ok(Self { blocks, normal, reduce })
    }

    /// Row-wise softmax of both tables as graph nodes `(normal, reduce)`.
    pub fn weights<T: Real>(&self, fw: &mut Forward<T>) -> Result<(Var, Var)> {
        let n = fw.param(self.normal);
        let r = fw.param(self.reduce);
        Ok((fw.graph.softmax(n, 1)?, fw.graph.softmax(r, 1)?))
    }
}

/// Row-wise softmax in f64.
pub fn softmax_rows(logits: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

fn discretize_table(logits: &[f64], blocks: usize) -> Vec<[Edge; 2]> {
    let w = softmax_rows(logits, OpKind::COUNT);
    (0..blocks)
        .map(|i| {
            // Best non-zero op per candidate input; strict `>` keeps the lower enum on ties.
            let mut best: Vec<(usize, OpKind, f64)> = (0..i + 2)
                .map(|h| {
                    let row = &w[edge_index(i, h) * OpKind::COUNT..][..OpKind::COUNT];
                    let mut pick = (OpKind::Identity, row[OpKind::Identity.index()]);
                    for op in &OpKind::ALL[2..] {
                        if row[op.index()] > pick.1 {
                            pick = (*op, row[op.index()]);
                        }
                    }
                    (h, pick.0, pick.1)
                })
                .collect();
            // Stable sort keeps lower input indices first on ties.
            best.sort_by(|a, b| b.2.total_cmp(&a.2));
            [
                Edge {
                    input: best[0].0,
                    op: best[0].1,
                },
                Edge {
                    input: best[1].0,
                    op: best[1].1,
                },
            ]
        })
        .collect()
}

/// Keeps, per block, the two strongest non-zero `(input, op)` pairs on distinct inputs.
pub fn discretize<T: Real>(store: &ParamStore<T>, arch: &ArchParams) -> Result<Genotype> {
    discretize_logits(
        &store.value(arch.normal).to_f64_vec(),
        &store.value(arch.reduce).to_f64_vec(),
        arch.blocks,
    )
}

/// [`discretize`] on raw row-major `[edges, 11]` logit tables.
pub fn discretize_logits(normal: &[f64], reduce: &[f64], blocks: usize) -> Result<Genotype> {
    if blocks == 0 {
        return config_err("cannot discretize a cell with zero blocks");
    }
    let expect = edge_count(blocks) * OpKind::COUNT;
    if normal.len() != expect || reduce.len() != expect {
        return Err(Error::Dimension(format!(
            "α tables must hold {expect} logits for {blocks} blocks"
        )));
    }
    Ok(Genotype {
        blocks,
        normal: discretize_table(normal, blocks),
        reduce: discretize_table(reduce, blocks),
    })
}

/// `relu → 1×1 conv → batch norm` mapping a cell input to the cell width.
#[derive(Clone, Debug)]
pub struct Preprocess {
    conv: Conv,
    bn: BatchNorm,
}

impl Preprocess {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), cin, cout, 1, Conv2dSpec::default().stride(stride)),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<T: Real>(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let h = fw.graph.relu(x)?;
        let h = self.conv.forward(fw, h)?;
        self.bn.forward(fw, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.conv.ids(), self.bn.ids()].concat()
    }
}

/// Shape of a cell within a network.
#[derive(Clone, Copy, Debug)]
pub struct CellShape {
    /// Channels of the cell two positions back.
    pub c_prev_prev: usize,
    pub c_prev: usize,
    /// Width of each block output.
    pub channels: usize,
    pub reduction: bool,
    /// The previous cell halved the resolution, so input 0 must be downsampled too.
    pub reduction_prev: bool,
}

#[derive(Clone, Debug)]
enum Body {
    /// Every candidate edge carries all eleven operations.
    Mixed(Vec<Vec<OpInstance>>),
    /// Two selected operations per block.
    Discrete(Vec<[(usize, OpInstance); 2]>),
}

/// A cell whose output is the channel concatenation of its block outputs.
#[derive(Clone, Debug)]
pub struct Cell {
    pub shape: CellShape,
    pub blocks: usize,
    pre0: Preprocess,
    pre1: Preprocess,
    body: Body,
}

impl Cell {
    fn preprocess<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, s: CellShape) -> (Preprocess, Preprocess) {
        let stride0 = if s.reduction_prev { 2 } else { 1 };
        (
            Preprocess::new(store, rng, &format!("{name}.pre0"), s.c_prev_prev, s.channels, stride0),
            Preprocess::new(store, rng, &format!("{name}.pre1"), s.c_prev, s.channels, 1),
        )
    }

    fn stride(shape: &CellShape, input: usize) -> usize {
        if shape.reduction && input < 2 {
            2
        } else {
            1
        }
    }

    /// Continuous cell for the search phase.
    pub fn mixed<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        shape: CellShape,
        blocks: usize,
    ) -> Result<Self> {
        if blocks == 0 {
            return config_err("a cell needs at least one block");
        }
        let (pre0, pre1) = Self::preprocess(store, rng, name, shape);
        let mut edges = Vec::with_capacity(edge_count(blocks));
        for i in 0..blocks {
            for h in 0..i + 2 {
                let ops = OpKind::ALL
                    .iter()
                    .map(|&k| {
                        OpInstance::build(k, shape.channels, Self::stride(&shape, h), store, rng, &format!("{name}.b{i}.h{h}.{k}"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                edges.push(ops);
            }
        }
        Ok(Self {
            shape,
            blocks,
            pre0,
            pre1,
            body: Body::Mixed(edges),
        })
    }

    /// Discrete cell from one genotype cell description.
    pub fn discrete<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        shape: CellShape,
        edges: &[[Edge; 2]],
    ) -> Result<Self> {
        if edges.is_empty() {
            return config_err("a cell needs at least one block");
        }
        let (pre0, pre1) = Self::preprocess(store, rng, name, shape);
        let mut blocks = Vec::with_capacity(edges.len());
        for (i, pair) in edges.iter().enumerate() {
            let mut build = |j: usize| -> Result<(usize, OpInstance)> {
                let e = pair[j];
                let stride = Self::stride(&shape, e.input);
                let op = OpInstance::build(e.op, shape.channels, stride, store, rng, &format!("{name}.b{i}.e{j}.{}", e.op))?;
                Ok((e.input, op))
            };
            blocks.push([build(0)?, build(1)?]);
        }
        Ok(Self {
            shape,
            blocks: edges.len(),
            pre0,
            pre1,
            body: Body::Discrete(blocks),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.blocks * self.shape.channels
    }

    /// Learnable parameter ids of the preprocessing layers and all operations.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = [self.pre0.param_ids(), self.pre1.param_ids()].concat();
        match &self.body {
            Body::Mixed(edges) => edges.iter().flatten().for_each(|op| ids.extend(op.param_ids())),
            Body::Discrete(blocks) => blocks.iter().flatten().for_each(|(_, op)| ids.extend(op.param_ids())),
        }
        ids
    }

    /// `weights` is the softmaxed α table for this cell type; required for mixed cells.
    pub fn forward<T: Real>(&self, fw: &mut Forward<T>, s0: Var, s1: Var, weights: Option<Var>) -> Result<Var> {
        let mut states = vec![self.pre0.forward(fw, s0)?, self.pre1.forward(fw, s1)?];
        match &self.body {
            Body::Mixed(edges) => {
                let weights = weights.ok_or_else(|| Error::Internal("mixed cell evaluated without α".into()))?;
                for i in 0..self.blocks {
                    let mut terms = Vec::new();
                    for (h, &state) in states.iter().enumerate() {
                        let e = edge_index(i, h);
                        for op in &edges[e] {
                            // The zero operation contributes nothing to the value or to any gradient.
                            if op.kind == OpKind::Zero {
                                continue;
                            }
                            terms.push((op.apply(fw, state)?, e * OpKind::COUNT + op.kind.index()));
                        }
                    }
                    let out = fw.graph.weighted_sum(&terms, weights).map_err(|e| Error::Internal(format!("mixed block {i}: {e}")))?;
                    states.push(out);
                }
            }
            Body::Discrete(blocks) => {
                for (i, [(h0, op0), (h1, op1)]) in blocks.iter().enumerate() {
                    let a = op0.apply(fw, states[*h0])?;
                    let b = op1.apply(fw, states[*h1])?;
                    let out = fw.graph.add(a, b).map_err(|e| Error::Internal(format!("block {i}: {e}")))?;
                    states.push(out);
                }
            }
        }
        fw.graph.concat_channels(&states[2..])
    }
}
