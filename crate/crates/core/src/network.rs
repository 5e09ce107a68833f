//! 3-D encoder-decoder with semantic-guided skip connections, multi-scale
//! deep supervision and two boundary heads.
//!
//! Every stage is `conv -> relu -> conv -> relu`. Encoder stages are joined
//! by max pooling. At decoder stage `i` the coarser features go through a
//! 1x1x1 channel-matching convolution and nearest-neighbour upsampling, are
//! merged with encoder stage `i` (through an SG module, or plain
//! concatenation/addition when SG is disabled) and pass through the stage
//! block. Parameters live in a flat [`ParamStore`] keyed by hierarchical
//! names.

use crate::error::{Error, Result};
use crate::layers::{
    conv3d_backward, conv3d_forward, max_pool3d, max_pool3d_backward, relu_backward_inplace, relu_inplace,
    upsample_nearest, upsample_nearest_backward,
};
use crate::losses::OutputGrads;
use crate::scalar::Scalar;
use crate::sg::{
    concat_channels, sg_backward, sg_forward_traced, ChannelGateParams, FusionMode, SgModuleParams, SgTrace,
    SpatialGateParams,
};
use crate::volume::{FeatureVolume, LabelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Number of output classes including background.
    pub num_classes: usize,
    pub stage_channels: Vec<usize>,
    pub fusion_mode: FusionMode,
    pub deep_supervision: bool,
    pub kernel_size: usize,
    pub downsample_factor: usize,
    /// Replace plain skip connections with SG modules.
    pub use_sg: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            num_classes: 4,
            stage_channels: vec![8, 16, 32],
            fusion_mode: FusionMode::Concatenate,
            deep_supervision: true,
            kernel_size: 3,
            downsample_factor: 2,
            use_sg: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() < 2 {
            return Err(Error::Config(format!("need at least 2 stages, got {}", self.stage_channels.len())));
        }
        if self.stage_channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.downsample_factor < 2 {
            return Err(Error::Config(format!("downsample_factor must be >= 2, got {}", self.downsample_factor)));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Every spatial dim of the input must be a multiple of this.
    pub fn required_divisor(&self) -> usize {
        self.downsample_factor.pow(self.stages() as u32 - 1)
    }
}

/// A named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<T>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.names.push(name);
        self.tensors.push(Tensor { shape, data });
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.tensors[id.0].data
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Zero-filled arrays with the same layout, for gradient accumulation.
    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect()
    }

    /// Replaces every array; names and shapes must match exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter arrays, got {}",
                self.tensors.len(),
                entries.len()
            )));
        }
        for (i, (name, tensor)) in entries.into_iter().enumerate() {
            if name != self.names[i] || tensor.shape != self.tensors[i].shape {
                return Err(Error::Config(format!(
                    "parameter {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i], self.tensors[i].shape, tensor.shape
                )));
            }
            self.tensors[i] = tensor;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: Conv,
    conv2: Conv,
}

#[derive(Debug, Clone, Copy)]
struct SgIds {
    w2: ParamId,
    b2: ParamId,
    w1: ParamId,
    b1: ParamId,
    kernel: ParamId,
    bias: ParamId,
    k: usize,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: Conv,
    sg: Option<SgIds>,
    block: Block,
    aux: Option<Conv>,
}

#[derive(Debug, Clone)]
pub struct NetworkOutputs<T> {
    pub seg_logits: FeatureVolume<T>,
    /// One entry per decoder stage, finest resolution first.
    pub aux_seg_logits: Vec<FeatureVolume<T>>,
    pub clear_boundary_logits: FeatureVolume<T>,
    pub blurry_boundary_logits: FeatureVolume<T>,
}

impl<T: Scalar> NetworkOutputs<T> {
    pub fn is_finite(&self) -> bool {
        self.seg_logits.is_finite()
            && self.clear_boundary_logits.is_finite()
            && self.blurry_boundary_logits.is_finite()
            && self.aux_seg_logits.iter().all(FeatureVolume::is_finite)
    }
}

struct BlockTape<T> {
    input: FeatureVolume<T>,
    hidden: FeatureVolume<T>,
    output: FeatureVolume<T>,
}

struct EncoderTape<T> {
    block: BlockTape<T>,
    /// Pooling that produced this stage's input (absent for stage 0).
    pool: Option<(Vec<u32>, [usize; 5])>,
}

struct DecoderTape<T> {
    sg: Option<(SgTrace<T>, SgModuleParams<T>)>,
    block: BlockTape<T>,
}

/// Activations retained by [`Network::forward_traced`] for backpropagation.
pub struct Tape<T> {
    encoder: Vec<EncoderTape<T>>,
    decoder: Vec<DecoderTape<T>>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    cfg: NetworkConfig,
    params: ParamStore<T>,
    encoder: Vec<Block>,
    decoder: Vec<DecoderStage>,
    seg_head: Conv,
    clear_head: Conv,
    blurry_head: Conv,
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn xavier(&mut self, name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.random_range(-bound..=bound))).collect();
        self.store.add(name, shape, data)
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.store.add(name, shape, vec![T::zero(); n])
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let k3 = k * k * k;
        let weight = self.xavier(format!("{prefix}.weight"), vec![cout, cin, k, k, k], cin * k3, cout * k3);
        let bias = self.zeros(format!("{prefix}.bias"), vec![cout]);
        Conv { weight, bias, cout, k }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Block {
        Block {
            conv1: self.conv(&format!("{prefix}.conv1"), cin, cout, k),
            conv2: self.conv(&format!("{prefix}.conv2"), cout, cout, k),
        }
    }

    fn sg(&mut self, prefix: &str, k: usize) -> SgIds {
        SgIds {
            w2: self.xavier(format!("{prefix}.channel.w2"), vec![k, 2 * k], 2 * k, k),
            b2: self.zeros(format!("{prefix}.channel.b2"), vec![k]),
            w1: self.xavier(format!("{prefix}.channel.w1"), vec![k, k], k, k),
            b1: self.zeros(format!("{prefix}.channel.b1"), vec![k]),
            kernel: self.xavier(format!("{prefix}.spatial.kernel"), vec![2 * k], 2 * k, 1),
            bias: self.zeros(format!("{prefix}.spatial.bias"), vec![1]),
            k,
        }
    }
}

impl<T: Scalar> Network<T> {
    /// Deterministic Xavier-uniform weights and zero biases from `seed`.
    pub fn build(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: ParamStore::default(), rng: &mut rng };
        let k = cfg.kernel_size;
        let ch = &cfg.stage_channels;

        let mut encoder = Vec::with_capacity(ch.len());
        let mut cin = cfg.in_channels;
        for (i, &c) in ch.iter().enumerate() {
            encoder.push(b.block(&format!("encoder.{i}"), cin, c, k));
            cin = c;
        }

        let mut decoder = Vec::with_capacity(ch.len() - 1);
        for i in 0..ch.len() - 1 {
            let prefix = format!("decoder.{i}");
            let c = ch[i];
            let up = b.conv(&format!("{prefix}.up"), ch[i + 1], c, 1);
            let sg = cfg.use_sg.then(|| b.sg(&format!("{prefix}.sg"), c));
            let fused = match cfg.fusion_mode {
                FusionMode::Concatenate => 2 * c,
                FusionMode::Add => c,
            };
            let block = b.block(&prefix, fused, c, k);
            let aux = cfg.deep_supervision.then(|| b.conv(&format!("{prefix}.aux"), c, cfg.num_classes, 1));
            decoder.push(DecoderStage { up, sg, block, aux });
        }

        let seg_head = b.conv("head.seg", ch[0], cfg.num_classes, 1);
        let clear_head = b.conv("head.clear", ch[0], 1, 1);
        let blurry_head = b.conv("head.blurry", ch[0], 1, 1);
        let params = b.store;
        Ok(Network { cfg, params, encoder, decoder, seg_head, clear_head, blurry_head })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn forward(&self, x: &FeatureVolume<T>) -> Result<NetworkOutputs<T>> {
        self.forward_traced(x).map(|(out, _)| out)
    }

    fn check_input(&self, x: &FeatureVolume<T>) -> Result<()> {
        if x.channels() != self.cfg.in_channels {
            return Err(Error::mismatch("network input channels", x.channels(), self.cfg.in_channels));
        }
        let div = self.cfg.required_divisor();
        if x.spatial().iter().any(|&d| d % div != 0) {
            return Err(Error::Indivisible {
                dims: x.spatial(),
                required: div,
                factor: self.cfg.downsample_factor,
                exponent: self.cfg.stages() as u32 - 1,
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    fn conv(&self, c: &Conv, x: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
        conv3d_forward(x, self.params.get(c.weight), Some(self.params.get(c.bias)), c.cout, c.k)
    }

    fn block(&self, b: &Block, input: FeatureVolume<T>) -> Result<BlockTape<T>> {
        let mut hidden = self.conv(&b.conv1, &input)?;
        relu_inplace(&mut hidden);
        let mut output = self.conv(&b.conv2, &hidden)?;
        relu_inplace(&mut output);
        Ok(BlockTape { input, hidden, output })
    }

    fn sg_params(&self, ids: &SgIds) -> Result<SgModuleParams<T>> {
        let p = &self.params;
        let channel = ChannelGateParams::new(
            ids.k,
            p.get(ids.w2).to_vec(),
            p.get(ids.b2).to_vec(),
            p.get(ids.w1).to_vec(),
            p.get(ids.b1).to_vec(),
        )?;
        let spatial = SpatialGateParams::new(p.get(ids.kernel).to_vec(), p.get(ids.bias)[0])?;
        SgModuleParams::new(channel, spatial, self.cfg.fusion_mode)
    }

    fn plain_fuse(&self, shallow: &FeatureVolume<T>, deep: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
        match self.cfg.fusion_mode {
            FusionMode::Concatenate => concat_channels(shallow, deep),
            FusionMode::Add => shallow.zip_with(deep, "skip add", |a, b| a + b),
        }
    }

    pub fn forward_traced(&self, x: &FeatureVolume<T>) -> Result<(NetworkOutputs<T>, Tape<T>)> {
        self.check_input(x)?;
        let f = self.cfg.downsample_factor;

        let mut encoder: Vec<EncoderTape<T>> = Vec::with_capacity(self.encoder.len());
        for (i, blk) in self.encoder.iter().enumerate() {
            let (input, pool) = if i == 0 {
                (x.clone(), None)
            } else {
                let prev = &encoder[i - 1].block.output;
                let (pooled, argmax) = max_pool3d(prev, f)?;
                (pooled, Some((argmax, prev.shape())))
            };
            let block = self.block(blk, input)?;
            encoder.push(EncoderTape { block, pool });
        }

        let stages = self.decoder.len();
        let mut decoder: Vec<Option<DecoderTape<T>>> = (0..stages).map(|_| None).collect();
        let mut aux = vec![None; stages];
        for i in (0..stages).rev() {
            let stage = &self.decoder[i];
            let coarse = match &decoder.get(i + 1) {
                Some(Some(t)) => &t.block.output,
                _ => &encoder[i + 1].block.output,
            };
            // The 1x1x1 convolution commutes with nearest upsampling, so it
            // runs at the coarse resolution.
            let deep = upsample_nearest(&self.conv(&stage.up, coarse)?, f);
            let shallow = &encoder[i].block.output;
            let (fused, sg) = match &stage.sg {
                Some(ids) => {
                    let params = self.sg_params(ids)?;
                    let (out, trace) = sg_forward_traced(shallow, &deep, &params)?;
                    (out, Some((trace, params)))
                }
                None => (self.plain_fuse(shallow, &deep)?, None),
            };
            let block = self.block(&stage.block, fused)?;
            if let Some(head) = &stage.aux {
                aux[i] = Some(self.conv(head, &block.output)?);
            }
            decoder[i] = Some(DecoderTape { sg, block });
        }
        let decoder: Vec<DecoderTape<T>> = decoder.into_iter().map(|t| t.expect("every stage visited")).collect();

        let top = &decoder[0].block.output;
        let outputs = NetworkOutputs {
            seg_logits: self.conv(&self.seg_head, top)?,
            aux_seg_logits: aux.into_iter().flatten().collect(),
            clear_boundary_logits: self.conv(&self.clear_head, top)?,
            blurry_boundary_logits: self.conv(&self.blurry_head, top)?,
        };
        Ok((outputs, Tape { encoder, decoder }))
    }

    fn conv_back(
        &self,
        c: &Conv,
        input: &FeatureVolume<T>,
        grad_out: &FeatureVolume<T>,
        grads: &mut [Vec<T>],
        need_input: bool,
    ) -> Result<FeatureVolume<T>> {
        let g = conv3d_backward(input, self.params.get(c.weight), c.cout, c.k, grad_out, need_input)?;
        accumulate(&mut grads[c.weight.0], &g.weight);
        accumulate(&mut grads[c.bias.0], &g.bias);
        Ok(g.input)
    }

    fn block_back(
        &self,
        b: &Block,
        tape: &BlockTape<T>,
        mut grad: FeatureVolume<T>,
        grads: &mut [Vec<T>],
        need_input: bool,
    ) -> Result<FeatureVolume<T>> {
        relu_backward_inplace(&tape.output, &mut grad);
        let mut d_hidden = self.conv_back(&b.conv2, &tape.hidden, &grad, grads, true)?;
        relu_backward_inplace(&tape.hidden, &mut d_hidden);
        self.conv_back(&b.conv1, &tape.input, &d_hidden, grads, need_input)
    }

    /// Backpropagates output gradients; returns one gradient array per
    /// parameter, aligned with [`ParamStore::tensors`].
    pub fn backward(&self, tape: &Tape<T>, grad: &OutputGrads<T>) -> Result<Vec<Vec<T>>> {
        let mut grads = self.params.zeros_like();
        let f = self.cfg.downsample_factor;
        let top = &tape.decoder[0].block.output;

        let mut d_top = self.conv_back(&self.seg_head, top, &grad.seg, &mut grads, true)?;
        d_top.add_assign(&self.conv_back(&self.clear_head, top, &grad.clear, &mut grads, true)?)?;
        d_top.add_assign(&self.conv_back(&self.blurry_head, top, &grad.blurry, &mut grads, true)?)?;

        let stages = self.decoder.len();
        let mut d_skip: Vec<Option<FeatureVolume<T>>> = (0..self.encoder.len()).map(|_| None).collect();
        let mut d_dec = d_top;
        for i in 0..stages {
            let stage = &self.decoder[i];
            let dt = &tape.decoder[i];
            if let (Some(head), Some(g)) = (&stage.aux, grad.aux.get(i)) {
                let d = self.conv_back(head, &dt.block.output, g, &mut grads, true)?;
                d_dec.add_assign(&d)?;
            }
            let d_fused = self.block_back(&stage.block, &dt.block, d_dec, &mut grads, true)?;
            let (d_shallow, d_deep) = match (&stage.sg, &dt.sg) {
                (Some(ids), Some((trace, params))) => {
                    let g = sg_backward(trace, params, &d_fused)?;
                    accumulate(&mut grads[ids.w2.0], &g.channel.w2);
                    accumulate(&mut grads[ids.b2.0], &g.channel.b2);
                    accumulate(&mut grads[ids.w1.0], &g.channel.w1);
                    accumulate(&mut grads[ids.b1.0], &g.channel.b1);
                    accumulate(&mut grads[ids.kernel.0], &g.spatial.kernel);
                    grads[ids.bias.0][0] += g.spatial.bias;
                    (g.shallow, g.deep)
                }
                _ => match self.cfg.fusion_mode {
                    FusionMode::Concatenate => {
                        let c = d_fused.channels() / 2;
                        (d_fused.slice_channels(0..c)?, d_fused.slice_channels(c..2 * c)?)
                    }
                    FusionMode::Add => (d_fused.clone(), d_fused),
                },
            };
            d_skip[i] = Some(d_shallow);
            let d_up = upsample_nearest_backward(&d_deep, f);
            let coarse =
                if i + 1 < stages { &tape.decoder[i + 1].block.output } else { &tape.encoder[i + 1].block.output };
            d_dec = self.conv_back(&stage.up, coarse, &d_up, &mut grads, true)?;
        }

        // d_dec now holds the gradient at the bottleneck output.
        let mut d_out = d_dec;
        for i in (0..self.encoder.len()).rev() {
            if let Some(skip) = d_skip[i].take() {
                d_out.add_assign(&skip)?;
            }
            let et = &tape.encoder[i];
            let d_in = self.block_back(&self.encoder[i], &et.block, d_out, &mut grads, i > 0)?;
            match &et.pool {
                Some((argmax, shape)) => d_out = max_pool3d_backward(*shape, argmax, &d_in),
                None => break,
            }
        }
        Ok(grads)
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Voxel-wise argmax over classes, one label map per batch item. Ties go to
/// the lower class index.
pub fn predict_labels<T: Scalar>(outputs: &NetworkOutputs<T>) -> Vec<LabelVolume> {
    let logits = &outputs.seg_logits;
    let [b, classes, h, w, t] = logits.shape();
    (0..b)
        .map(|item| {
            let mut best = logits.channel(item, 0).to_vec();
            let mut label = vec![0u8; best.len()];
            for c in 1..classes {
                for (v, &z) in logits.channel(item, c).iter().enumerate() {
                    if z > best[v] {
                        best[v] = z;
                        label[v] = c as u8;
                    }
                }
            }
            LabelVolume::from_vec([h, w, t], label).expect("dims match logits")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig { stage_channels: vec![2, 3], ..NetworkConfig::default() }
    }

    #[test]
    fn build_is_deterministic_with_zero_biases() {
        let a = Network::<f32>::build(tiny_cfg(), 7).unwrap();
        let b = Network::<f32>::build(tiny_cfg(), 7).unwrap();
        assert_eq!(a.params(), b.params());
        for (name, t) in a.params().names().iter().zip(a.params().tensors()) {
            if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                assert!(t.data.iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let c = Network::<f32>::build(tiny_cfg(), 8).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn invalid_configs_rejected() {
        let one_stage = NetworkConfig { stage_channels: vec![4], ..NetworkConfig::default() };
        assert!(Network::<f32>::build(one_stage, 0).is_err());
        let even = NetworkConfig { kernel_size: 2, ..NetworkConfig::default() };
        assert!(Network::<f32>::build(even, 0).is_err());
    }

    #[test]
    fn indivisible_input_names_requirement() {
        let net = Network::<f32>::build(NetworkConfig::default(), 0).unwrap();
        let x = FeatureVolume::zeros([1, 1, 6, 8, 8]);
        let msg = net.forward(&x).unwrap_err().to_string();
        assert!(msg.contains("divisible by 4"), "{msg}");
    }

    #[test]
    fn argmax_ties_and_constant_winner() {
        let mut logits = FeatureVolume::<f32>::zeros([1, 3, 2, 1, 1]);
        logits.channel_mut(0, 2).fill(5.0);
        let out = NetworkOutputs {
            seg_logits: logits.clone(),
            aux_seg_logits: vec![],
            clear_boundary_logits: FeatureVolume::zeros([1, 1, 2, 1, 1]),
            blurry_boundary_logits: FeatureVolume::zeros([1, 1, 2, 1, 1]),
        };
        assert!(predict_labels(&out)[0].data().iter().all(|&l| l == 2));
        let tie = NetworkOutputs { seg_logits: FeatureVolume::zeros([1, 3, 2, 1, 1]), ..out };
        assert!(predict_labels(&tie)[0].data().iter().all(|&l| l == 0));
    }
}
