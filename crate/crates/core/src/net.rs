//! A small multilayer perceptron with hand-written backpropagation.
//!
//! The backbone is a chain of dense layers, each followed by the model's
//! activation; its final output is the feature vector. The head is a single
//! affine map from features to class logits. An optional additive adapter
//! perturbs the final backbone layer and is the only backbone-side parameter
//! that trains during the continual phase.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{DenseMatrix, FeatVec, LinalgError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("target class {0} is not in the logit mask")]
    TargetNotInMask(usize),
    #[error("logit mask is empty")]
    EmptyMask,
    #[error("class id {class} out of range for {dim} logits")]
    LabelOutOfRange { class: usize, dim: usize },
    #[error("activation cache does not match the model")]
    StaleCache,
    #[error("model has no adapter")]
    MissingAdapter,
    #[error("meta step {0} outside [0, 1]")]
    EtaOutOfRange(f64),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(NetError::Parse(format!("unknown activation {other:?}"))),
        }
    }
}

/// Affine layer `y = W·x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DenseMatrix,
    pub bias: FeatVec,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(output, input),
            bias: FeatVec::zeros(output),
        }
    }

    /// Uniform initialization in `[-1/√fan_in, 1/√fan_in]`.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut layer = Self::zeros(input, output);
        for w in layer.weight.as_mut_slice() {
            *w = rng.random_range(-bound..=bound);
        }
        for b in layer.bias.as_mut_slice() {
            *b = rng.random_range(-bound..=bound);
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.dim()
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.dim() == other.bias.dim()
    }

    /// `(W + ΔW)·x + (b + Δb)`, with the perturbation optional.
    fn apply(&self, delta: Option<&Dense>, x: &[f64]) -> Vec<f64> {
        let cols = self.input_dim();
        (0..self.output_dim())
            .map(|i| {
                let row = &self.weight.as_slice()[i * cols..(i + 1) * cols];
                let mut z = self.bias[i];
                match delta {
                    None => {
                        for (w, xv) in row.iter().zip(x) {
                            z += w * xv;
                        }
                    }
                    Some(d) => {
                        let drow = &d.weight.as_slice()[i * cols..(i + 1) * cols];
                        z += d.bias[i];
                        for ((w, dw), xv) in row.iter().zip(drow).zip(x) {
                            z += (w + dw) * xv;
                        }
                    }
                }
                z
            })
            .collect()
    }

    /// Adds `scale · dz ⊗ x` to the weight gradient and `scale · dz` to the
    /// bias gradient held in `self`.
    fn accumulate_outer(&mut self, dz: &[f64], x: &[f64], scale: f64) {
        let cols = self.input_dim();
        let w = self.weight.as_mut_slice();
        for (i, &g) in dz.iter().enumerate() {
            let gs = g * scale;
            if gs == 0.0 {
                continue;
            }
            for (wv, xv) in w[i * cols..(i + 1) * cols].iter_mut().zip(x) {
                *wv += gs * xv;
            }
        }
        for (b, g) in self.bias.as_mut_slice().iter_mut().zip(dz) {
            *b += g * scale;
        }
    }

    /// `(W + ΔW)ᵀ · dz`.
    fn backprop_input(&self, delta: Option<&Dense>, dz: &[f64]) -> Vec<f64> {
        let mut out = self.weight.matvec_transposed(dz).expect("shape checked");
        if let Some(d) = delta {
            let extra = d.weight.matvec_transposed(dz).expect("shape checked");
            for (o, e) in out.iter_mut().zip(extra) {
                *o += e;
            }
        }
        out
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weight
            .as_slice()
            .iter()
            .chain(self.bias.as_slice())
            .copied()
    }

    fn load(&mut self, src: &mut impl Iterator<Item = f64>) {
        for w in self.weight.as_mut_slice() {
            *w = src.next().expect("length checked");
        }
        for b in self.bias.as_mut_slice() {
            *b = src.next().expect("length checked");
        }
    }
}

/// Which parameter blocks an operation touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    Backbone,
    Head,
    Adapter,
}

/// Backbone `f_θ`, head `h_ψ`, and optional adapter `Δθ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub backbone: Vec<Dense>,
    pub head: Dense,
    pub adapter: Option<Dense>,
    pub activation: Activation,
}

impl MlpModel {
    /// `dims` lists the input dimension followed by every backbone layer's
    /// output dimension; the last entry is the feature dimension.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        classes: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) || classes == 0 {
            return Err(NetError::InvalidArchitecture(format!(
                "dims {dims:?}, classes {classes}"
            )));
        }
        let backbone = dims
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        let head = Dense::init(*dims.last().unwrap(), classes, rng);
        Ok(Self {
            backbone,
            head,
            adapter: None,
            activation,
        })
    }

    /// Assembles a model from parts, validating the shape chain.
    pub fn from_parts(
        backbone: Vec<Dense>,
        head: Dense,
        adapter: Option<Dense>,
        activation: Activation,
    ) -> Result<Self> {
        let model = Self {
            backbone,
            head,
            adapter,
            activation,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.backbone.is_empty() {
            return Err(NetError::InvalidArchitecture("empty backbone".into()));
        }
        for (i, pair) in self.backbone.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NetError::InvalidArchitecture(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for layer in self.backbone.iter().chain([&self.head]) {
            if layer.bias.dim() != layer.output_dim() {
                return Err(NetError::InvalidArchitecture("bias length".into()));
            }
        }
        if self.head.input_dim() != self.feature_dim() {
            return Err(NetError::InvalidArchitecture(format!(
                "head expects {} features, backbone gives {}",
                self.head.input_dim(),
                self.feature_dim()
            )));
        }
        if let Some(a) = &self.adapter {
            if !a.same_shape(self.backbone.last().unwrap()) {
                return Err(NetError::InvalidArchitecture(
                    "adapter shape differs from the final backbone layer".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.backbone[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.last().unwrap().output_dim()
    }

    pub fn class_count(&self) -> usize {
        self.head.output_dim()
    }

    /// Layer dimensions in the form accepted by [`MlpModel::new`].
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.backbone.iter().map(Dense::output_dim))
            .collect()
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone.iter().map(Dense::param_count).sum()
    }

    /// Attaches a zero adapter, so the adapted backbone starts at `f_θ`.
    pub fn with_zero_adapter(mut self) -> Self {
        let last = self.backbone.last().unwrap();
        self.adapter = Some(Dense::zeros(last.input_dim(), last.output_dim()));
        self
    }

    /// Replaces the head with a fresh initialization over `classes` outputs.
    pub fn reset_head<R: Rng + ?Sized>(&mut self, classes: usize, rng: &mut R) {
        self.head = Dense::init(self.feature_dim(), classes, rng);
    }

    fn adapter_for(&self, use_adapter: bool) -> Result<Option<&Dense>> {
        if use_adapter {
            self.adapter.as_ref().map(Some).ok_or(NetError::MissingAdapter)
        } else {
            Ok(None)
        }
    }

    /// Runs the backbone and head on one input.
    pub fn forward(&self, x: &[f64], use_adapter: bool) -> Result<Forward> {
        let cache = self.forward_backbone(x, use_adapter)?;
        let logits = self.head_logits(cache.feature())?;
        Ok(Forward {
            feature: FeatVec::from(cache.feature().to_vec()),
            logits: FeatVec::from(logits),
            cache,
        })
    }

    /// Backbone-only forward pass, returning the activation record.
    pub fn forward_backbone(&self, x: &[f64], use_adapter: bool) -> Result<ForwardCache> {
        if x.len() != self.input_dim() {
            return Err(NetError::DimensionMismatch(format!(
                "input of length {} for a model expecting {}",
                x.len(),
                self.input_dim()
            )));
        }
        let delta = self.adapter_for(use_adapter)?;
        let last = self.backbone.len() - 1;
        let mut activations = Vec::with_capacity(self.backbone.len() + 1);
        activations.push(x.to_vec());
        for (i, layer) in self.backbone.iter().enumerate() {
            let input = activations.last().unwrap();
            let d = if i == last { delta } else { None };
            let mut z = layer.apply(d, input);
            for v in &mut z {
                *v = self.activation.apply(*v);
            }
            activations.push(z);
        }
        Ok(ForwardCache {
            activations,
            used_adapter: use_adapter,
        })
    }

    pub fn head_logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.feature_dim() {
            return Err(NetError::DimensionMismatch(format!(
                "feature of length {} for a head expecting {}",
                feature.len(),
                self.feature_dim()
            )));
        }
        Ok(self.head.apply(None, feature))
    }

    pub fn zero_gradients(&self, use_adapter: bool) -> Gradients {
        Gradients {
            backbone: self
                .backbone
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            head: Dense::zeros(self.head.input_dim(), self.head.output_dim()),
            adapter: if use_adapter {
                self.adapter
                    .as_ref()
                    .map(|a| Dense::zeros(a.input_dim(), a.output_dim()))
            } else {
                None
            },
        }
    }

    /// Gradients of a loss with respect to every parameter, given the loss
    /// gradient at the logits. With `use_adapter` set, the backbone block is
    /// exactly zero and the adapter block carries the final-layer gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
        use_adapter: bool,
    ) -> Result<Gradients> {
        let mut grads = self.zero_gradients(use_adapter);
        if use_adapter && grads.adapter.is_none() {
            return Err(NetError::MissingAdapter);
        }
        let grad_feature = self.backward_head(cache.feature(), grad_logits, 1.0, &mut grads)?;
        self.backward_backbone(cache, &grad_feature, use_adapter, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates `scale ·` head gradients for the head input `feature` and
    /// returns the (unscaled) gradient with respect to that input.
    pub fn backward_head(
        &self,
        feature: &[f64],
        grad_logits: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        if feature.len() != self.feature_dim() || grad_logits.len() != self.class_count() {
            return Err(NetError::StaleCache);
        }
        grads.head.accumulate_outer(grad_logits, feature, scale);
        Ok(self.head.backprop_input(None, grad_logits))
    }

    /// Accumulates `scale ·` backbone (or adapter) gradients given the
    /// gradient at the feature output.
    pub fn backward_backbone(
        &self,
        cache: &ForwardCache,
        grad_feature: &[f64],
        use_adapter: bool,
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<()> {
        if cache.activations.len() != self.backbone.len() + 1
            || cache.used_adapter != use_adapter
            || cache
                .activations
                .iter()
                .zip(self.dims())
                .any(|(a, d)| a.len() != d)
            || grad_feature.len() != self.feature_dim()
        {
            return Err(NetError::StaleCache);
        }
        let delta = self.adapter_for(use_adapter)?;
        let last = self.backbone.len() - 1;
        let mut upstream = grad_feature.to_vec();
        for i in (0..self.backbone.len()).rev() {
            let out = &cache.activations[i + 1];
            let input = &cache.activations[i];
            let dz: Vec<f64> = upstream
                .iter()
                .zip(out)
                .map(|(g, o)| g * self.activation.derivative_from_output(*o))
                .collect();
            if use_adapter {
                // Frozen backbone: only the adapter on the final layer learns.
                let ga = grads.adapter.as_mut().ok_or(NetError::MissingAdapter)?;
                ga.accumulate_outer(&dz, input, scale);
                break;
            }
            grads.backbone[i].accumulate_outer(&dz, input, scale);
            if i > 0 {
                let d = if i == last { delta } else { None };
                upstream = self.backbone[i].backprop_input(d, &dz);
            }
        }
        Ok(())
    }

    /// Concatenation of all backbone parameters: for each layer in order, the
    /// weight matrix row-major followed by the bias.
    pub fn flatten_backbone(&self) -> FlatParams {
        FlatParams(FeatVec::from(
            self.backbone.iter().flat_map(Dense::values).collect::<Vec<_>>(),
        ))
    }

    pub fn load_backbone(&mut self, params: &FlatParams) -> Result<()> {
        let expected = self.backbone_param_count();
        if params.len() != expected {
            return Err(NetError::DimensionMismatch(format!(
                "{} flat values for a backbone with {expected} parameters",
                params.len()
            )));
        }
        let mut it = params.as_slice().iter().copied();
        for layer in &mut self.backbone {
            layer.load(&mut it);
        }
        Ok(())
    }

    /// Flattened values of the requested blocks, in the order given.
    pub fn flatten_blocks(&self, blocks: &[ParamBlock]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for block in blocks {
            match block {
                ParamBlock::Backbone => out.extend(self.backbone.iter().flat_map(Dense::values)),
                ParamBlock::Head => out.extend(self.head.values()),
                ParamBlock::Adapter => out.extend(
                    self.adapter
                        .as_ref()
                        .ok_or(NetError::MissingAdapter)?
                        .values(),
                ),
            }
        }
        Ok(out)
    }

    pub fn load_blocks(&mut self, blocks: &[ParamBlock], values: &[f64]) -> Result<()> {
        let expected = self.flatten_blocks(blocks)?.len();
        if values.len() != expected {
            return Err(NetError::DimensionMismatch(format!(
                "{} values for blocks holding {expected}",
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for block in blocks {
            match block {
                ParamBlock::Backbone => self.backbone.iter_mut().for_each(|l| l.load(&mut it)),
                ParamBlock::Head => self.head.load(&mut it),
                ParamBlock::Adapter => self.adapter.as_mut().unwrap().load(&mut it),
            }
        }
        Ok(())
    }

    /// Applies one optimizer step to the given blocks.
    pub fn apply_step(
        &mut self,
        blocks: &[ParamBlock],
        grads: &Gradients,
        opt: &mut OptimizerState,
    ) -> Result<()> {
        let mut params = self.flatten_blocks(blocks)?;
        let g = grads.flatten_blocks(blocks)?;
        opt.step(&mut params, &g)?;
        self.load_blocks(blocks, &params)
    }

    /// Serializes the architecture descriptor followed by every tensor in the
    /// matrix text layout: backbone layers, head, then the adapter if present.
    /// Biases are written as `1 × n` matrices.
    pub fn to_checkpoint(&self) -> String {
        let dims: Vec<String> = self.dims().iter().map(usize::to_string).collect();
        let mut out = format!(
            "mlp {} {} head {} adapter {}\n",
            self.activation,
            dims.join(" "),
            self.class_count(),
            u8::from(self.adapter.is_some())
        );
        let layers = self
            .backbone
            .iter()
            .chain([&self.head])
            .chain(self.adapter.as_ref());
        for layer in layers {
            layer.weight.write_text(&mut out);
            let bias = DenseMatrix::new(1, layer.bias.dim(), layer.bias.as_slice().to_vec())
                .expect("finite bias");
            bias.write_text(&mut out);
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| NetError::Parse("empty checkpoint".into()))?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        let bad = || NetError::Parse(format!("bad descriptor {header:?}"));
        if toks.len() < 7 || toks[0] != "mlp" {
            return Err(bad());
        }
        let activation: Activation = toks[1].parse()?;
        let head_pos = toks.iter().position(|t| *t == "head").ok_or_else(bad)?;
        let dims: Vec<usize> = toks[2..head_pos]
            .iter()
            .map(|t| t.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if toks.len() != head_pos + 4 || toks[head_pos + 2] != "adapter" {
            return Err(bad());
        }
        let has_adapter = match toks[head_pos + 3] {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        let mut read_layer = || -> Result<Dense> {
            let weight = DenseMatrix::read_text(&mut lines)?;
            let bias = DenseMatrix::read_text(&mut lines)?;
            if bias.rows() != 1 {
                return Err(NetError::Parse("bias must be a single row".into()));
            }
            Ok(Dense {
                weight,
                bias: FeatVec::from(bias.into_vec()),
            })
        };
        let backbone = (1..dims.len())
            .map(|_| read_layer())
            .collect::<Result<Vec<_>>>()?;
        let head = read_layer()?;
        let adapter = if has_adapter { Some(read_layer()?) } else { None };
        let model = Self::from_parts(backbone, head, adapter, activation)?;
        let classes: usize = toks[head_pos + 1].parse().map_err(|_| bad())?;
        if model.dims() != dims || model.class_count() != classes {
            return Err(NetError::Parse("descriptor disagrees with tensors".into()));
        }
        Ok(model)
    }
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub feature: FeatVec,
    pub logits: FeatVec,
    pub cache: ForwardCache,
}

/// Layer inputs and post-activation outputs, enough for an exact backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
    used_adapter: bool,
}

impl ForwardCache {
    pub fn feature(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

/// Parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Vec<Dense>,
    pub head: Dense,
    pub adapter: Option<Dense>,
}

impl Gradients {
    pub fn flatten_blocks(&self, blocks: &[ParamBlock]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for block in blocks {
            match block {
                ParamBlock::Backbone => out.extend(self.backbone.iter().flat_map(Dense::values)),
                ParamBlock::Head => out.extend(self.head.values()),
                ParamBlock::Adapter => out.extend(
                    self.adapter
                        .as_ref()
                        .ok_or(NetError::MissingAdapter)?
                        .values(),
                ),
            }
        }
        Ok(out)
    }

    pub fn backbone_flat(&self) -> FlatParams {
        FlatParams(FeatVec::from(
            self.backbone.iter().flat_map(Dense::values).collect::<Vec<_>>(),
        ))
    }
}

/// Backbone parameters as one vector, for Reptile arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams(pub FeatVec);

impl FlatParams {
    pub fn len(&self) -> usize {
        self.0.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.0.dim() == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

impl From<Vec<f64>> for FlatParams {
    fn from(v: Vec<f64>) -> Self {
        FlatParams(FeatVec::from(v))
    }
}

/// `θ_old + η·(θ_new − θ_old)`; the endpoints return their input verbatim.
pub fn reptile_blend(old: &FlatParams, new: &FlatParams, eta_meta: f64) -> Result<FlatParams> {
    if old.len() != new.len() {
        return Err(NetError::DimensionMismatch(format!(
            "blend of {} and {} parameters",
            old.len(),
            new.len()
        )));
    }
    if !(0.0..=1.0).contains(&eta_meta) {
        return Err(NetError::EtaOutOfRange(eta_meta));
    }
    if eta_meta == 0.0 {
        return Ok(old.clone());
    }
    if eta_meta == 1.0 {
        return Ok(new.clone());
    }
    Ok(old
        .as_slice()
        .iter()
        .zip(new.as_slice())
        .map(|(a, b)| a + eta_meta * (b - a))
        .collect::<Vec<_>>()
        .into())
}

/// Softmax restricted to `mask`; entries outside the mask are exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[usize]) -> Result<Vec<f64>> {
    if mask.is_empty() {
        return Err(NetError::EmptyMask);
    }
    let dim = logits.len();
    let mut in_mask = vec![false; dim];
    for &c in mask {
        if c >= dim {
            return Err(NetError::LabelOutOfRange { class: c, dim });
        }
        in_mask[c] = true;
    }
    let max = (0..dim)
        .filter(|&c| in_mask[c])
        .map(|c| logits[c])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p = vec![0.0; dim];
    let mut total = 0.0;
    for c in (0..dim).filter(|&c| in_mask[c]) {
        p[c] = (logits[c] - max).exp();
        total += p[c];
    }
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

/// Cross-entropy of `target` under the softmax restricted to `mask`, and its
/// gradient with respect to the logits (zero outside the mask).
pub fn masked_ce_loss(logits: &[f64], target: usize, mask: &[usize]) -> Result<(f64, Vec<f64>)> {
    if mask.is_empty() {
        return Err(NetError::EmptyMask);
    }
    if !mask.contains(&target) {
        return Err(NetError::TargetNotInMask(target));
    }
    let mut grad = masked_softmax(logits, mask)?;
    let max = mask
        .iter()
        .map(|&c| logits[c])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut seen = vec![false; logits.len()];
    let mut lse = 0.0;
    for &c in mask {
        if !std::mem::replace(&mut seen[c], true) {
            lse += (logits[c] - max).exp();
        }
    }
    let loss = lse.ln() - (logits[target] - max);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Index of the largest masked logit; ties go to the lowest class id.
pub fn masked_argmax(logits: &[f64], mask: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &c in mask {
        if c >= logits.len() {
            continue;
        }
        best = match best {
            Some(b) if logits[b] > logits[c] || (logits[b] == logits[c] && b < c) => Some(b),
            _ => Some(c),
        };
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer hyperparameters plus moment accumulators for Adam. The
/// accumulators are sized on the first step and must match from then on.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub steps: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NetError::DimensionMismatch(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.steps == 0 && self.first.is_empty() {
                    self.first = vec![0.0; params.len()];
                    self.second = vec![0.0; params.len()];
                }
                if self.first.len() != params.len() {
                    return Err(NetError::DimensionMismatch(format!(
                        "optimizer tracks {} parameters, got {}",
                        self.first.len(),
                        params.len()
                    )));
                }
                let t = (self.steps + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}
