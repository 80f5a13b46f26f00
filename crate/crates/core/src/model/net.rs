//! Network assembly: parameter layout, deterministic initialization,
//! forward inference, tape-based backpropagation, and checkpoint I/O.
//!
//! Parameters live in one flat vector described by a [`ParamEntry`] layout,
//! which keeps optimizer state, checkpointing, and determinism trivial: the
//! initialization RNG and the serialized byte stream both walk the layout in
//! order.

use super::ops::{
    adaptive_avg_pool, adaptive_avg_pool_backward, bilinear_resize, bilinear_resize_backward,
    col2im, conv_apply, conv_gradients, crop_spatial, crop_spatial_backward, im2col, map_to_rows,
    maxpool2, maxpool2_backward, pad_to_multiple_reflect, relu, relu_backward, rows_to_map,
    softmax_channels, softmax_channels_backward, upsample_nearest2, upsample_nearest2_backward,
};
use super::schedule::dilation_schedule;
use super::ModelConfig;
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayView2, Axis, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// One named parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// A convolution bound to its weight/bias entries in the layout.
#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    weight: usize,
    bias: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    dilation: usize,
}

#[derive(Debug, Clone)]
struct StageSpec {
    conv1: ConvSpec,
    conv2: ConvSpec,
    project: Option<ConvSpec>,
    dilated: Vec<ConvSpec>,
}

#[derive(Debug, Clone, Copy)]
struct DecoderStep {
    conv: ConvSpec,
    stage: usize,
}

#[derive(Debug, Clone)]
struct Plan {
    stages: Vec<StageSpec>,
    context_branches: Vec<ConvSpec>,
    context_fuse: ConvSpec,
    decoder: Vec<DecoderStep>,
    head: ConvSpec,
}

struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    offset: usize,
}

impl LayoutBuilder {
    fn new() -> Self {
        LayoutBuilder {
            entries: Vec::new(),
            offset: 0,
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        self.entries.push(ParamEntry {
            name,
            shape,
            offset: self.offset,
            len,
        });
        self.offset += len;
        self.entries.len() - 1
    }

    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
    ) -> ConvSpec {
        let weight = self.push(format!("{name}.weight"), vec![c_out, c_in, k, k]);
        let bias = self.push(format!("{name}.bias"), vec![c_out]);
        ConvSpec {
            weight,
            bias,
            c_in,
            c_out,
            kernel: k,
            dilation,
        }
    }
}

fn build_plan(cfg: &ModelConfig) -> Result<(Vec<ParamEntry>, Plan)> {
    let mut lb = LayoutBuilder::new();
    let mut stages = Vec::new();
    let mut c_in = cfg.in_channels;
    for (i, (&width, &rate)) in cfg.stage_widths.iter().zip(&cfg.base_dilations).enumerate() {
        let tag = format!("encoder{}", i + 1);
        let conv1 = lb.conv(&format!("{tag}.residual.conv1"), c_in, width, 3, 1);
        let conv2 = lb.conv(&format!("{tag}.residual.conv2"), width, width, 3, 1);
        let project =
            (c_in != width).then(|| lb.conv(&format!("{tag}.residual.project"), c_in, width, 1, 1));
        let schedule = dilation_schedule(rate, cfg.blocks_per_stage)?;
        let dilated = schedule
            .factors()
            .iter()
            .enumerate()
            .map(|(j, &d)| {
                lb.conv(
                    &format!("{tag}.dilated{}", j + 1),
                    width,
                    width,
                    3,
                    d as usize,
                )
            })
            .collect();
        stages.push(StageSpec {
            conv1,
            conv2,
            project,
            dilated,
        });
        c_in = width;
    }

    let top = *cfg.stage_widths.last().expect("config validated");
    let branch_width = top / cfg.hd_scales.len();
    let context_branches = (0..cfg.hd_scales.len())
        .map(|b| lb.conv(&format!("context.branch{}", b + 1), top, branch_width, 1, 1))
        .collect();
    let cat_width = top + branch_width * cfg.hd_scales.len();
    let context_fuse = lb.conv("context.fuse", cat_width, top, 1, 1);

    let mut decoder = Vec::new();
    for k in (0..cfg.stages()).rev() {
        let out = if k > 0 {
            cfg.stage_widths[k - 1]
        } else {
            cfg.stage_widths[0]
        };
        let conv = lb.conv(&format!("decoder{}", k + 1), cfg.stage_widths[k], out, 3, 1);
        decoder.push(DecoderStep { conv, stage: k });
    }
    let head = lb.conv("classifier", cfg.stage_widths[0], cfg.num_classes, 1, 1);

    Ok((
        lb.entries,
        Plan {
            stages,
            context_branches,
            context_fuse,
            decoder,
            head,
        },
    ))
}

struct ConvTrace<T> {
    col: Array2<T>,
    in_dims: (usize, usize, usize),
}

struct StageTrace<T> {
    conv1: ConvTrace<T>,
    relu1: Array3<T>,
    conv2: ConvTrace<T>,
    project: Option<ConvTrace<T>>,
    dilated: Vec<(ConvTrace<T>, Array3<T>)>,
    pool_arg: Vec<u32>,
    pool_in: (usize, usize, usize),
}

struct BranchTrace<T> {
    pooled: ConvTrace<T>,
    relu_out: Array3<T>,
}

struct ContextTrace<T> {
    branches: Vec<BranchTrace<T>>,
    cat: ConvTrace<T>,
    fuse_relu: Array3<T>,
}

struct DecoderTrace<T> {
    conv: ConvTrace<T>,
    relu_out: Array3<T>,
}

/// Intermediate activations of one traced forward pass, consumed by
/// [`SegmentationModel::backward`].
pub struct Tape<T> {
    stages: Vec<StageTrace<T>>,
    context: ContextTrace<T>,
    decoder: Vec<DecoderTrace<T>>,
    head: ConvTrace<T>,
    probs: Array3<T>,
    padded: usize,
}

impl<T> Tape<T> {
    /// Class probabilities produced by the traced pass, `(classes, h, w)`.
    pub fn probabilities(&self) -> &Array3<T> {
        &self.probs
    }
}

/// The segmentation network with its flat parameter store.
pub struct SegmentationModel<T: NdFloat> {
    config: ModelConfig,
    layout: Vec<ParamEntry>,
    plan: Plan,
    params: Vec<T>,
}

impl<T: NdFloat> SegmentationModel<T> {
    /// Builds and deterministically initializes a model from its config.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, plan) = build_plan(&config)?;
        let params = init_params(&layout, config.seed);
        Ok(SegmentationModel {
            config,
            layout,
            plan,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn weight_view(&self, spec: &ConvSpec) -> ArrayView2<'_, T> {
        let e = &self.layout[spec.weight];
        ArrayView2::from_shape(
            (spec.c_out, spec.c_in * spec.kernel * spec.kernel),
            &self.params[e.offset..e.offset + e.len],
        )
        .expect("layout matches spec")
    }

    fn bias_slice(&self, spec: &ConvSpec) -> &[T] {
        let e = &self.layout[spec.bias];
        &self.params[e.offset..e.offset + e.len]
    }

    fn conv_forward(&self, spec: &ConvSpec, x: &Array3<T>) -> Array3<T> {
        let (_, h, w) = x.dim();
        let col = im2col(x, spec.kernel, spec.dilation);
        rows_to_map(
            conv_apply(self.weight_view(spec), &col, self.bias_slice(spec)),
            h,
            w,
        )
    }

    fn conv_forward_traced(&self, spec: &ConvSpec, x: &Array3<T>) -> (Array3<T>, ConvTrace<T>) {
        let (_, h, w) = x.dim();
        let col = im2col(x, spec.kernel, spec.dilation);
        let out = rows_to_map(
            conv_apply(self.weight_view(spec), &col, self.bias_slice(spec)),
            h,
            w,
        );
        (
            out,
            ConvTrace {
                col,
                in_dims: x.dim(),
            },
        )
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    fn conv_backward(
        &self,
        spec: &ConvSpec,
        trace: &ConvTrace<T>,
        dout: &Array3<T>,
        grads: &mut [T],
    ) -> Array3<T> {
        let dout2 = map_to_rows(dout.clone());
        let (dw, db, dcol) = conv_gradients(&dout2, &trace.col, self.weight_view(spec));
        let we = &self.layout[spec.weight];
        for (g, &v) in grads[we.offset..we.offset + we.len]
            .iter_mut()
            .zip(dw.iter())
        {
            *g += v;
        }
        let be = &self.layout[spec.bias];
        for (g, &v) in grads[be.offset..be.offset + be.len]
            .iter_mut()
            .zip(db.iter())
        {
            *g += v;
        }
        let (c_in, h, w) = trace.in_dims;
        col2im(&dcol, c_in, h, w, spec.kernel, spec.dilation)
    }

    fn check_input(&self, dims: (usize, usize, usize)) -> Result<()> {
        let want = (
            self.config.in_channels,
            self.config.patch_size,
            self.config.patch_size,
        );
        if dims != want {
            return Err(Error::ShapeMismatch(format!(
                "expected input {}x{}x{} (channels x height x width), got {}x{}x{}",
                want.0, want.1, want.2, dims.0, dims.1, dims.2
            )));
        }
        Ok(())
    }

    /// Residual block of one encoder stage: `conv2(relu(conv1(x))) + shortcut`.
    fn residual_forward(&self, stage: usize, x: &Array3<T>) -> Array3<T> {
        let spec = &self.plan.stages[stage];
        let inner = self.conv_forward(&spec.conv2, &relu(&self.conv_forward(&spec.conv1, x)));
        let shortcut = match &spec.project {
            Some(p) => self.conv_forward(p, x),
            None => x.clone(),
        };
        inner + &shortcut
    }

    /// Multi-scale decomposition: pool the feature map at every configured
    /// scale, project each pooled map, upsample back, and concatenate all
    /// branches with the input.
    pub fn hierarchical_decompose(&self, features: &Array3<T>) -> Result<Array3<T>> {
        let (c, h, w) = features.dim();
        let top = *self.config.stage_widths.last().expect("validated");
        if c != top {
            return Err(Error::ShapeMismatch(format!(
                "context block expects {top} channels, got {c}"
            )));
        }
        let mut parts = vec![features.clone()];
        for (branch, &scale) in self
            .plan
            .context_branches
            .iter()
            .zip(&self.config.hd_scales)
        {
            let pooled = adaptive_avg_pool(features, scale)?;
            let projected = relu(&self.conv_forward(branch, &pooled));
            parts.push(bilinear_resize(&projected, h, w));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(concatenate(Axis(0), &views).expect("branch shapes agree"))
    }

    /// Inference forward pass for one example, `(in_channels, patch, patch)`
    /// normalized to `[0, 1]`, producing per-pixel class probabilities
    /// `(num_classes, patch, patch)`.
    pub fn forward_one(&self, x: &Array3<T>) -> Result<Array3<T>> {
        self.check_input(x.dim())?;
        let mut feat = pad_to_multiple_reflect(x, self.config.downsample_factor())?;
        let mut skips = Vec::with_capacity(self.config.stages());
        for (i, spec) in self.plan.stages.iter().enumerate() {
            let mut b = self.residual_forward(i, &feat);
            for conv in &spec.dilated {
                b = relu(&self.conv_forward(conv, &b));
            }
            let (pooled, _) = maxpool2(&b)?;
            skips.push(b);
            feat = pooled;
        }
        let cat = self.hierarchical_decompose(&feat)?;
        let mut d = relu(&self.conv_forward(&self.plan.context_fuse, &cat));
        for step in &self.plan.decoder {
            let up = upsample_nearest2(&d) + &skips[step.stage];
            d = relu(&self.conv_forward(&step.conv, &up));
        }
        let logits = self.conv_forward(&self.plan.head, &d);
        let logits = crop_spatial(&logits, self.config.patch_size, self.config.patch_size);
        Ok(softmax_channels(&logits))
    }

    /// Batch forward pass, `(batch, patch, patch, in_channels)` in, class
    /// probabilities `(batch, patch, patch, num_classes)` out.
    pub fn forward(&self, batch: &Array4<T>) -> Result<Array4<T>> {
        let (b, h, w, c) = batch.dim();
        let p = self.config.patch_size;
        if h != p || w != p || c != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected batch of {p}x{p}x{} patches, got {h}x{w}x{c}",
                self.config.in_channels
            )));
        }
        let mut out = Array4::zeros((b, p, p, self.config.num_classes));
        for bi in 0..b {
            let chw = batch
                .index_axis(Axis(0), bi)
                .permuted_axes([2, 0, 1])
                .as_standard_layout()
                .to_owned();
            let probs = self.forward_one(&chw)?;
            out.index_axis_mut(Axis(0), bi)
                .assign(&probs.view().permuted_axes([1, 2, 0]));
        }
        Ok(out)
    }

    /// Forward pass that records every intermediate needed by [`Self::backward`].
    pub fn forward_traced(&self, x: &Array3<T>) -> Result<(Array3<T>, Tape<T>)> {
        self.check_input(x.dim())?;
        let padded = self.config.padded_patch_size();
        let mut feat = pad_to_multiple_reflect(x, self.config.downsample_factor())?;
        let mut stage_traces = Vec::with_capacity(self.config.stages());
        let mut skips = Vec::with_capacity(self.config.stages());
        for spec in &self.plan.stages {
            let (c1, conv1) = self.conv_forward_traced(&spec.conv1, &feat);
            let relu1 = relu(&c1);
            let (c2, conv2) = self.conv_forward_traced(&spec.conv2, &relu1);
            let (shortcut, project) = match &spec.project {
                Some(p) => {
                    let (o, t) = self.conv_forward_traced(p, &feat);
                    (o, Some(t))
                }
                None => (feat.clone(), None),
            };
            let mut b = c2 + &shortcut;
            let mut dilated = Vec::with_capacity(spec.dilated.len());
            for conv in &spec.dilated {
                let (o, t) = self.conv_forward_traced(conv, &b);
                b = relu(&o);
                dilated.push((t, b.clone()));
            }
            let pool_in = b.dim();
            let (pooled, pool_arg) = maxpool2(&b)?;
            stage_traces.push(StageTrace {
                conv1,
                relu1,
                conv2,
                project,
                dilated,
                pool_arg,
                pool_in,
            });
            skips.push(b);
            feat = pooled;
        }

        let (_, h, w) = feat.dim();
        let mut parts = vec![feat.clone()];
        let mut branches = Vec::with_capacity(self.plan.context_branches.len());
        for (branch, &scale) in self
            .plan
            .context_branches
            .iter()
            .zip(&self.config.hd_scales)
        {
            let pooled = adaptive_avg_pool(&feat, scale)?;
            let (o, pooled_trace) = self.conv_forward_traced(branch, &pooled);
            let r = relu(&o);
            parts.push(bilinear_resize(&r, h, w));
            branches.push(BranchTrace {
                pooled: pooled_trace,
                relu_out: r,
            });
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let cat = concatenate(Axis(0), &views).expect("branch shapes agree");
        let (fused, cat_trace) = self.conv_forward_traced(&self.plan.context_fuse, &cat);
        let mut d = relu(&fused);
        let context = ContextTrace {
            branches,
            cat: cat_trace,
            fuse_relu: d.clone(),
        };

        let mut decoder_traces = Vec::with_capacity(self.plan.decoder.len());
        for step in &self.plan.decoder {
            let up = upsample_nearest2(&d) + &skips[step.stage];
            let (o, conv) = self.conv_forward_traced(&step.conv, &up);
            d = relu(&o);
            decoder_traces.push(DecoderTrace {
                conv,
                relu_out: d.clone(),
            });
        }
        let (logits, head) = self.conv_forward_traced(&self.plan.head, &d);
        let logits = crop_spatial(&logits, self.config.patch_size, self.config.patch_size);
        let probs = softmax_channels(&logits);
        let tape = Tape {
            stages: stage_traces,
            context,
            decoder: decoder_traces,
            head,
            probs: probs.clone(),
            padded,
        };
        Ok((probs, tape))
    }

    /// Backpropagates a probability-space gradient through the tape,
    /// returning parameter gradients in layout order.
    pub fn backward(&self, tape: &Tape<T>, dprobs: &Array3<T>) -> Result<Vec<T>> {
        let p = self.config.patch_size;
        if dprobs.dim() != (self.config.num_classes, p, p) {
            return Err(Error::ShapeMismatch(format!(
                "probability gradient must be {}x{p}x{p}, got {:?}",
                self.config.num_classes,
                dprobs.dim()
            )));
        }
        self.backward_from_logits(tape, &softmax_channels_backward(dprobs, &tape.probs))
    }

    /// Backpropagates a gradient taken directly with respect to the head
    /// logits, for callers that fold the softmax into the loss derivative.
    pub fn backward_from_logits(&self, tape: &Tape<T>, dlogits: &Array3<T>) -> Result<Vec<T>> {
        let p = self.config.patch_size;
        if dlogits.dim() != (self.config.num_classes, p, p) {
            return Err(Error::ShapeMismatch(format!(
                "logit gradient must be {}x{p}x{p}, got {:?}",
                self.config.num_classes,
                dlogits.dim()
            )));
        }
        let mut grads = vec![T::zero(); self.params.len()];
        let dlogits = if tape.padded == p {
            dlogits.clone()
        } else {
            crop_spatial_backward(dlogits, tape.padded, tape.padded)
        };
        let mut d = self.conv_backward(&self.plan.head, &tape.head, &dlogits, &mut grads);

        // decoder, in reverse: d = relu(conv(up2(prev) + skip))
        let mut skip_grads: Vec<Option<Array3<T>>> = vec![None; self.config.stages()];
        for (step, trace) in self.plan.decoder.iter().zip(&tape.decoder).rev() {
            let d_pre = relu_backward(&d, &trace.relu_out);
            let d_sum = self.conv_backward(&step.conv, &trace.conv, &d_pre, &mut grads);
            skip_grads[step.stage] = Some(d_sum.clone());
            d = upsample_nearest2_backward(&d_sum);
        }

        // context block
        let d_fused = relu_backward(&d, &tape.context.fuse_relu);
        let dcat = self.conv_backward(
            &self.plan.context_fuse,
            &tape.context.cat,
            &d_fused,
            &mut grads,
        );
        let top = *self.config.stage_widths.last().expect("validated");
        let (_, h, w) = dcat.dim();
        let mut d_top = dcat.slice(s![..top, .., ..]).to_owned();
        let branch_width = top / self.config.hd_scales.len();
        for (bi, (branch, trace)) in self
            .plan
            .context_branches
            .iter()
            .zip(&tape.context.branches)
            .enumerate()
        {
            let c0 = top + bi * branch_width;
            let d_up = dcat.slice(s![c0..c0 + branch_width, .., ..]).to_owned();
            let (_, sh, sw) = trace.relu_out.dim();
            let d_branch = bilinear_resize_backward(&d_up, sh, sw);
            let d_proj = relu_backward(&d_branch, &trace.relu_out);
            let d_pooled = self.conv_backward(branch, &trace.pooled, &d_proj, &mut grads);
            d_top += &adaptive_avg_pool_backward(&d_pooled, h, w);
        }
        d = d_top;

        // encoder stages, in reverse
        for (i, (spec, trace)) in self.plan.stages.iter().zip(&tape.stages).enumerate().rev() {
            let mut d_pre_pool = maxpool2_backward(&d, &trace.pool_arg, trace.pool_in);
            if let Some(sg) = &skip_grads[i] {
                d_pre_pool += sg;
            }
            let mut db = d_pre_pool;
            for (conv, (conv_trace, relu_out)) in spec.dilated.iter().zip(&trace.dilated).rev() {
                let d_pre = relu_backward(&db, relu_out);
                db = self.conv_backward(conv, conv_trace, &d_pre, &mut grads);
            }
            // residual block: b = conv2(relu(conv1(x))) + shortcut(x)
            let d_inner = self.conv_backward(&spec.conv2, &trace.conv2, &db, &mut grads);
            let d_relu1 = relu_backward(&d_inner, &trace.relu1);
            let mut dx = self.conv_backward(&spec.conv1, &trace.conv1, &d_relu1, &mut grads);
            match (&spec.project, &trace.project) {
                (Some(p), Some(pt)) => dx += &self.conv_backward(p, pt, &db, &mut grads),
                _ => dx += &db,
            }
            d = dx;
        }
        Ok(grads)
    }

    /// Serializes config, layout, and parameters (as little-endian `f32`).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut out = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
        out.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)
            .map_err(io_err)?;
        let header = CheckpointHeader {
            config: self.config.clone(),
            dtype: "f32".to_string(),
            params: self.layout.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        out.write_u64::<LittleEndian>(header.len() as u64)
            .map_err(io_err)?;
        out.write_all(&header).map_err(io_err)?;
        for &v in &self.params {
            let v = v.to_f32().ok_or_else(|| {
                Error::Checkpoint("parameter not representable as f32".to_string())
            })?;
            out.write_f32::<LittleEndian>(v).map_err(io_err)?;
        }
        out.flush().map_err(io_err)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Self::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut input = BufReader::new(file);
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(io_err)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let version = input.read_u32::<LittleEndian>().map_err(io_err)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = input.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let mut header = vec![0u8; header_len];
        input.read_exact(&mut header).map_err(io_err)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "unsupported dtype {:?}",
                header.dtype
            )));
        }
        let mut model = Self::new(header.config)?;
        if model.layout != header.params {
            return Err(Error::Checkpoint(
                "parameter layout does not match the stored config".to_string(),
            ));
        }
        for v in &mut model.params {
            let raw = input.read_f32::<LittleEndian>().map_err(io_err)?;
            *v = T::from(raw).expect("f32 widens into the model float type");
        }
        Ok(model)
    }

    /// Loads a checkpoint and insists it was trained under `expected`.
    pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load_checkpoint(path)?;
        if model.config != *expected {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint config does not match the requested config",
                path.display()
            )));
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"GSEG";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    dtype: String,
    params: Vec<ParamEntry>,
}

/// Fan-in-scaled uniform initialization for weights, zeros for biases,
/// drawn in layout order from a seeded stream.
fn init_params<T: NdFloat>(layout: &[ParamEntry], seed: u64) -> Vec<T> {
    let total = layout.iter().map(|e| e.len).sum();
    let mut params = vec![T::zero(); total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for entry in layout {
        if entry.name.ends_with(".weight") {
            let fan_in: usize = entry.shape[1..].iter().product();
            let limit = (6.0 / fan_in as f64).sqrt();
            for v in &mut params[entry.offset..entry.offset + entry.len] {
                *v = T::from(rng.random_range(-limit..limit)).expect("float conversion");
            }
        }
    }
    params
}
