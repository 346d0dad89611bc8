//! Detector assembly, forward pass, losses and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{ArchParams, Cell, CellShape, Genotype};
use crate::error::{config_err, Error, Result};
use crate::params::{BatchNorm, Conv, Forward, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Conv2dSpec, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Normal cells per D² block.
    pub stack_n: usize,
    pub num_d2_blocks: usize,
    pub stem_channels: usize,
    /// Stride of the stem convolution (1 or 2); 2 quarters the cost of every cell.
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
    /// `[height, width]` of the input images.
    pub input_size: [usize; 2],
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_lambda")]
    pub lambda_mask: f64,
}

fn default_stem_stride() -> usize {
    1
}

fn default_classes() -> usize {
    2
}

fn default_lambda() -> f64 {
    1.0
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stack_n: 1,
            num_d2_blocks: 3,
            stem_channels: 16,
            stem_stride: 1,
            input_size: [32, 32],
            num_classes: 2,
            lambda_mask: 1.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stack_n == 0 {
            return config_err("stack_n must be at least 1");
        }
        if self.num_d2_blocks == 0 {
            return config_err("num_d2_blocks must be at least 1");
        }
        if self.stem_channels == 0 {
            return config_err("stem_channels must be at least 1");
        }
        if !(1..=2).contains(&self.stem_stride) {
            return config_err(format!("stem_stride must be 1 or 2, got {}", self.stem_stride));
        }
        if self.num_classes < 2 {
            return config_err("num_classes must be at least 2");
        }
        if self.lambda_mask < 0.0 || !self.lambda_mask.is_finite() {
            return config_err(format!("lambda_mask must be a finite value >= 0, got {}", self.lambda_mask));
        }
        let factor = self.downsampling();
        for (name, v) in [("height", self.input_size[0]), ("width", self.input_size[1])] {
            if v == 0 || v % factor != 0 {
                return config_err(format!(
                    "input {name} {v} is not divisible by {factor} (stem_stride * 2^(num_d2_blocks-1))"
                ));
            }
        }
        Ok(())
    }

    /// Total spatial reduction from input to features.
    pub fn downsampling(&self) -> usize {
        self.stem_stride << (self.num_d2_blocks.max(1) - 1)
    }

    /// Spatial size of the last cell output.
    pub fn feature_size(&self) -> [usize; 2] {
        let factor = self.downsampling();
        [self.input_size[0] / factor, self.input_size[1] / factor]
    }
}

/// Graph nodes produced by [`Detector::forward`].
#[derive(Clone, Copy, Debug)]
pub struct DetectorOutput {
    /// `[N, classes]`.
    pub logits: Var,
    /// `[N,1,h,w]` upsampled mask.
    pub mask: Var,
    /// `[N,1,h',w']` sigmoid map at feature resolution.
    pub feature_map_mask: Var,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: NetworkConfig,
    pub blocks: usize,
    /// Present for discrete networks.
    pub genotype: Option<Genotype>,
    /// Present for the search supernet.
    pub arch: Option<ArchParams>,
    stem: Conv,
    stem_bn: BatchNorm,
    cells: Vec<Cell>,
    mask_conv: Conv,
    fc1: Linear,
    fc2: Linear,
}

impl Detector {
    /// Discrete detector built from a searched genotype.
    pub fn assemble<T: Real>(
        genotype: &Genotype,
        config: &NetworkConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        genotype.validate()?;
        Self::build(config, genotype.blocks, store, rng, Some(genotype.clone()), None)
    }

    /// Supernet of mixed cells with freshly initialised α.
    pub fn supernet<T: Real>(
        config: &NetworkConfig,
        blocks: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let arch = ArchParams::new(store, rng, blocks)?;
        Self::build(config, blocks, store, rng, None, Some(arch))
    }

    fn build<T: Real>(
        config: &NetworkConfig,
        blocks: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        genotype: Option<Genotype>,
        arch: Option<ArchParams>,
    ) -> Result<Self> {
        config.validate()?;
        if blocks == 0 {
            return config_err("a cell needs at least one block");
        }
        let c0 = config.stem_channels;
        let stem = Conv::new(store, rng, "stem.conv", 3, c0, 3, Conv2dSpec::default().stride(config.stem_stride).padding(1));
        let stem_bn = BatchNorm::new(store, "stem.bn", c0);
        let (mut c_pp, mut c_p, mut c) = (c0, c0, c0);
        let mut reduction_prev = false;
        let mut cells = Vec::new();
        for d in 0..config.num_d2_blocks {
            let mut kinds = vec![false; config.stack_n];
            if d + 1 < config.num_d2_blocks {
                kinds.push(true);
            }
            for reduction in kinds {
                if reduction {
                    c *= 2;
                }
                let shape = CellShape {
                    c_prev_prev: c_pp,
                    c_prev: c_p,
                    channels: c,
                    reduction,
                    reduction_prev,
                };
                let name = format!("cell{}", cells.len());
                let cell = match &genotype {
                    Some(g) => {
                        let edges = if reduction { &g.reduce } else { &g.normal };
                        Cell::discrete(store, rng, &name, shape, edges)?
                    }
                    None => Cell::mixed(store, rng, &name, shape, blocks)?,
                };
                c_pp = c_p;
                c_p = cell.out_channels();
                reduction_prev = reduction;
                cells.push(cell);
            }
        }
        let mask_conv = Conv::new(store, rng, "mask.conv", c_p, 1, 1, Conv2dSpec::default());
        let hidden = config.stem_channels * 4;
        let fc1 = Linear::new(store, rng, "fc1", c_p, hidden);
        let fc2 = Linear::new(store, rng, "fc2", hidden, config.num_classes);
        Ok(Self {
            config: config.clone(),
            blocks,
            genotype,
            arch,
            stem,
            stem_bn,
            cells,
            mask_conv,
            fc1,
            fc2,
        })
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn normal_cell_count(&self) -> usize {
        self.cells.iter().filter(|c| !c.shape.reduction).count()
    }

    pub fn reduction_cell_count(&self) -> usize {
        self.cells.iter().filter(|c| c.shape.reduction).count()
    }

    /// Channels of the final feature map `f`.
    pub fn feature_channels(&self) -> usize {
        self.cells.last().map_or(self.config.stem_channels, Cell::out_channels)
    }

    /// Learnable operation weights, grouped by layer.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        let mut ids = self.stem.ids();
        ids.extend(self.stem_bn.ids());
        for cell in &self.cells {
            ids.extend(cell.param_ids());
        }
        ids.extend(self.mask_conv.ids());
        ids.extend(self.fc1.ids());
        ids.extend(self.fc2.ids());
        ids
    }

    /// Number of learnable operation weights (α excluded).
    pub fn param_count<T: Real>(&self, store: &ParamStore<T>) -> usize {
        self.weight_ids().iter().map(|&id| store.value(id).numel()).sum()
    }

    /// Parameters of the 1×1 conv shared by the mask and classification paths.
    pub fn mask_conv_id(&self) -> ParamId {
        self.mask_conv.weight
    }

    /// Final feature map `f` for a `[N,3,h,w]` batch.
    pub fn features<T: Real>(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let s = fw.graph.shape(x).to_vec();
        let [h, w] = self.config.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::Dimension(format!("detector expects [N,3,{h},{w}] input, got {s:?}")));
        }
        let weights = match &self.arch {
            Some(a) => {
                let (n, r) = a.weights(fw)?;
                Some((n, r))
            }
            None => None,
        };
        let stem = self.stem.forward(fw, x)?;
        let stem = self.stem_bn.forward(fw, stem)?;
        let (mut s0, mut s1) = (stem, stem);
        for cell in &self.cells {
            let wt = weights.map(|(n, r)| if cell.shape.reduction { r } else { n });
            let out = cell.forward(fw, s0, s1, wt)?;
            s0 = s1;
            s1 = out;
        }
        Ok(s1)
    }

    /// One-channel sigmoid map at feature resolution.
    pub fn feature_map_mask<T: Real>(&self, fw: &mut Forward<T>, f: Var) -> Result<Var> {
        let m = self.mask_conv.forward(fw, f)?;
        fw.graph.sigmoid(m)
    }

    /// Classification head: optional `f ⊙ map` → global average pool → FC → relu → FC.
    pub fn head<T: Real>(&self, fw: &mut Forward<T>, f: Var, map: Option<Var>) -> Result<Var> {
        let f = match map {
            Some(m) => fw.graph.mul(f, m)?,
            None => f,
        };
        let pooled = fw.graph.global_avg_pool(f)?;
        let h = self.fc1.forward(fw, pooled)?;
        let h = fw.graph.relu(h)?;
        self.fc2.forward(fw, h)
    }

    pub fn forward<T: Real>(&self, fw: &mut Forward<T>, x: Var) -> Result<DetectorOutput> {
        let f = self.features(fw, x)?;
        let map = self.feature_map_mask(fw, f)?;
        let logits = self.head(fw, f, Some(map))?;
        let [h, w] = self.config.input_size;
        let mask = fw.graph.bilinear_upsample(map, h, w)?;
        Ok(DetectorOutput {
            logits,
            mask,
            feature_map_mask: map,
        })
    }
}

/// Mean cross-entropy of the masked-feature logits.
pub fn loss_ce_masked<T: Real>(fw: &mut Forward<T>, out: &DetectorOutput, labels: &[usize]) -> Result<Var> {
    fw.graph.cross_entropy(out.logits, labels)
}

/// Mean squared error between the predicted and ground-truth masks.
pub fn loss_mask<T: Real>(fw: &mut Forward<T>, out: &DetectorOutput, mask_gt: Var) -> Result<Var> {
    fw.graph.mse(out.mask, mask_gt)
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub total: Var,
    pub ce: Var,
    pub mse: Var,
}

/// `L_CE' + lambda_mask · L_MSE`.
pub fn loss_overall<T: Real>(
    fw: &mut Forward<T>,
    out: &DetectorOutput,
    labels: &[usize],
    mask_gt: Var,
    lambda_mask: f64,
) -> Result<Losses> {
    if lambda_mask < 0.0 || !lambda_mask.is_finite() {
        return config_err(format!("lambda_mask must be a finite value >= 0, got {lambda_mask}"));
    }
    let ce = loss_ce_masked(fw, out, labels)?;
    let mse = loss_mask(fw, out, mask_gt)?;
    let weighted = fw.graph.scale(mse, T::from_f64(lambda_mask))?;
    let total = fw.graph.add(ce, weighted)?;
    Ok(Losses { total, ce, mse })
}

const MAGIC: &[u8; 4] = b"ADDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    network: NetworkConfig,
    genotype: Genotype,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

/// Writes a discrete detector and its parameters (including running statistics).
pub fn save_checkpoint(path: &Path, detector: &Detector, store: &ParamStore<f32>) -> Result<()> {
    let genotype = detector
        .genotype
        .clone()
        .ok_or_else(|| Error::Usage("only discrete detectors can be checkpointed".into()))?;
    let header = serde_json::to_vec(&CheckpointHeader {
        network: detector.config.clone(),
        genotype,
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_u32(&mut buf, CHECKPOINT_VERSION)?;
    write_u32(&mut buf, header.len() as u32)?;
    buf.extend_from_slice(&header);
    for (_, p) in store.iter().filter(|(_, p)| p.group != ParamGroup::Arch) {
        write_u32(&mut buf, p.name.len() as u32)?;
        buf.extend_from_slice(p.name.as_bytes());
        write_u32(&mut buf, p.value.rank() as u32)?;
        for &d in p.value.shape() {
            write_u32(&mut buf, d as u32)?;
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a checkpoint written by [`save_checkpoint`], rebuilding the detector.
pub fn load_checkpoint(path: &Path) -> Result<(Detector, ParamStore<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != MAGIC {
        return cur.fail("missing ADDC magic");
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return cur.fail(format!("unsupported checkpoint version {version}"));
    }
    let len = cur.u32()? as usize;
    let header: CheckpointHeader = match serde_json::from_slice(cur.take(len)?) {
        Ok(h) => h,
        Err(e) => return cur.fail(format!("bad header: {e}")),
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let detector = Detector::assemble(&header.genotype, &header.network, &mut store, &mut rng)?;
    let mut seen = vec![false; store.len()];
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = match std::str::from_utf8(cur.take(name_len)?) {
            Ok(s) => s.to_string(),
            Err(_) => return cur.fail("parameter name is not UTF-8"),
        };
        let rank = cur.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let Some(id) = store.find(&name) else {
            return cur.fail(format!("unknown parameter {name}"));
        };
        if store.value(id).shape() != dims.as_slice() {
            return cur.fail(format!("parameter {name} has shape {dims:?}, expected {:?}", store.value(id).shape()));
        }
        let n: usize = dims.iter().product();
        let raw = cur.take(n * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        store.value_mut(id).data_mut().copy_from_slice(&data);
        seen[id.index()] = true;
    }
    if let Some((_, p)) = store.iter().find(|(id, _)| !seen[id.index()]) {
        return cur.fail(format!("parameter {} missing", p.name));
    }
    Ok((detector, store))
}
