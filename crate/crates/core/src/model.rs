//! Three-network transducer model: frame-stacking feedforward encoder,
//! stateless trigram prediction network, and an additive joint network whose
//! log-softmax output fills the alignment lattice.
//!
//! All forward math runs on a [`GradTape`]; the convenience methods on
//! [`ModelParams`] build a scratch tape internally for callers that only
//! need values (decoding, tests).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::numerics::{GradTape, NumericsError, Tensor, ValueId};
use crate::transducer::JointLogProbLattice;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CLFT";
const CHECKPOINT_VERSION: u32 = 1;

/// Blank and BOS share token id 0; real tokens are 1..=vocab_size.
pub const BLANK_ID: usize = 0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature width {got} does not match encoder input_dim {want}")]
    FeatureWidth { got: usize, want: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes: expected \"CLFT\"")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint while reading {field}")]
    Truncated { field: &'static str },
    #[error("inconsistent value for {field}: {detail}")]
    BadField { field: &'static str, detail: String },
    #[error("trailing bytes after parameter blobs")]
    TrailingBytes,
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Relu,
}

impl Nonlinearity {
    fn code(self) -> u8 {
        match self {
            Nonlinearity::Tanh => 0,
            Nonlinearity::Relu => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Nonlinearity::Tanh),
            1 => Some(Nonlinearity::Relu),
            _ => None,
        }
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Nonlinearity::Tanh),
            "relu" => Ok(Nonlinearity::Relu),
            other => Err(format!("unknown nonlinearity '{other}' (tanh|relu)")),
        }
    }
}

/// Encoder hyperparameters. `subsample` consecutive frames are stacked into
/// one row before the feedforward layers, so `T' = ceil(T / subsample)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub subsample: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub nonlinearity: Nonlinearity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub d_model: usize,
    /// V_bpe: real token ids are 1..=vocab_size; the joint output adds blank.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder: EncoderConfig,
}

impl ModelDims {
    pub fn output_dim(&self) -> usize {
        self.vocab_size + 1
    }
}

/// Training stage recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    Random,
    Pretrain,
    Stage1,
    Stage2,
    Direct,
}

impl StageTag {
    pub fn code(self) -> u8 {
        match self {
            StageTag::Random => 0,
            StageTag::Pretrain => 1,
            StageTag::Stage1 => 2,
            StageTag::Stage2 => 3,
            StageTag::Direct => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(StageTag::Random),
            1 => Some(StageTag::Pretrain),
            2 => Some(StageTag::Stage1),
            3 => Some(StageTag::Stage2),
            4 => Some(StageTag::Direct),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageTag::Random => "random",
            StageTag::Pretrain => "pretrain",
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
            StageTag::Direct => "direct",
        }
    }
}

/// Weight stored input-major (`[in × out]`) plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Tensor::uniform(vec![in_dim, out_dim], bound, rng),
            bias: Tensor::uniform(vec![out_dim], bound, rng),
        }
    }
}

/// One utterance: feature matrix plus both transcript forms.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
    pub tailo_text: String,
    pub han_text: String,
}

impl Utterance {
    pub fn duration_frames(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Model component, the granularity at which parameters can be frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Encoder,
    Prediction,
    Joint,
}

/// Full parameter set. The embedding table has `vocab_size + 1` rows so the
/// blank/BOS sentinel (id 0) is embeddable.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub stage: StageTag,
    pub encoder_layers: Vec<Linear>,
    pub embedding: Tensor,
    pub pred_proj: Linear,
    pub joint_out: Linear,
}

impl ModelParams {
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        let enc = &dims.encoder;
        let mut encoder_layers = Vec::with_capacity(enc.num_layers);
        let mut in_dim = enc.input_dim * enc.subsample;
        for layer in 0..enc.num_layers {
            let out_dim = if layer + 1 == enc.num_layers {
                dims.d_model
            } else {
                enc.hidden_dim
            };
            encoder_layers.push(Linear::init(in_dim, out_dim, rng));
            in_dim = out_dim;
        }
        let embedding = Tensor::uniform(
            vec![dims.vocab_size + 1, dims.embed_dim],
            1.0 / (dims.embed_dim as f64).sqrt(),
            rng,
        );
        let pred_proj = Linear::init(2 * dims.embed_dim, dims.d_model, rng);
        let joint_out = Linear::init(dims.d_model, dims.vocab_size + 1, rng);
        ModelParams {
            dims,
            stage: StageTag::Random,
            encoder_layers,
            embedding,
            pred_proj,
            joint_out,
        }
    }

    /// Parameter tensors in checkpoint order.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.encoder_layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.embedding);
        out.push(&self.pred_proj.weight);
        out.push(&self.pred_proj.bias);
        out.push(&self.joint_out.weight);
        out.push(&self.joint_out.bias);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.encoder_layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.embedding);
        out.push(&mut self.pred_proj.weight);
        out.push(&mut self.pred_proj.bias);
        out.push(&mut self.joint_out.weight);
        out.push(&mut self.joint_out.bias);
        out
    }

    /// Component owning the i-th tensor of [`ModelParams::param_tensors`].
    pub fn param_component(&self, index: usize) -> Component {
        let enc_count = 2 * self.encoder_layers.len();
        if index < enc_count {
            Component::Encoder
        } else if index < enc_count + 3 {
            Component::Prediction
        } else {
            Component::Joint
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter as a tape leaf, in checkpoint order.
    pub fn register(&self, tape: &mut GradTape) -> ParamIds {
        let ids: Vec<ValueId> = self
            .param_tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        ParamIds {
            num_encoder_layers: self.encoder_layers.len(),
            ids,
        }
    }

    pub fn encode(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = GradTape::new();
        let ids = self.register(&mut tape);
        let h = encode(&mut tape, &ids, &self.dims, features)?;
        Ok(tape.value(h).clone())
    }

    pub fn predict(&self, prev2: usize, prev1: usize) -> Result<Tensor, ModelError> {
        let mut tape = GradTape::new();
        let ids = self.register(&mut tape);
        let h = predict(&mut tape, &ids, &self.dims, &[(prev2, prev1)])?;
        let row = tape.value(h).data().to_vec();
        Ok(Tensor::new(vec![self.dims.d_model], row).expect("prediction row"))
    }

    pub fn joint(&self, h_enc: &Tensor, h_pred: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = GradTape::new();
        let ids = self.register(&mut tape);
        let a = tape.leaf(reshape_vector(h_enc, self.dims.d_model, "joint")?);
        let b = tape.leaf(reshape_vector(h_pred, self.dims.d_model, "joint")?);
        let out = joint(&mut tape, &ids, a, b)?;
        let row = tape.value(out).data().to_vec();
        Ok(Tensor::new(vec![self.dims.output_dim()], row).expect("joint row"))
    }

    pub fn forward_lattice(
        &self,
        features: &Tensor,
        targets: &[usize],
    ) -> Result<JointLogProbLattice, ModelError> {
        let mut tape = GradTape::new();
        let ids = self.register(&mut tape);
        let lat = forward_lattice(&mut tape, &ids, &self.dims, features, targets)?;
        Ok(JointLogProbLattice::new(tape.value(lat).clone()).expect("lattice dims"))
    }
}

fn reshape_vector(t: &Tensor, d: usize, op: &'static str) -> Result<Tensor, ModelError> {
    if t.len() != d {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![d],
        }
        .into());
    }
    Ok(Tensor::new(vec![1, d], t.data().to_vec()).expect("vector reshape"))
}

/// Tape handles for registered parameters.
pub struct ParamIds {
    num_encoder_layers: usize,
    ids: Vec<ValueId>,
}

impl ParamIds {
    pub fn all(&self) -> &[ValueId] {
        &self.ids
    }

    fn encoder_layer(&self, i: usize) -> (ValueId, ValueId) {
        (self.ids[2 * i], self.ids[2 * i + 1])
    }

    fn embedding(&self) -> ValueId {
        self.ids[2 * self.num_encoder_layers]
    }

    fn pred_proj(&self) -> (ValueId, ValueId) {
        let base = 2 * self.num_encoder_layers + 1;
        (self.ids[base], self.ids[base + 1])
    }

    fn joint_out(&self) -> (ValueId, ValueId) {
        let base = 2 * self.num_encoder_layers + 3;
        (self.ids[base], self.ids[base + 1])
    }
}

fn apply_nonlinearity(tape: &mut GradTape, nl: Nonlinearity, x: ValueId) -> ValueId {
    match nl {
        Nonlinearity::Tanh => tape.tanh(x),
        Nonlinearity::Relu => tape.relu(x),
    }
}

/// Encoder forward: frame stacking then the feedforward layer stack.
/// Output is `[ceil(T/subsample) × d_model]`.
pub fn encode(
    tape: &mut GradTape,
    params: &ParamIds,
    dims: &ModelDims,
    features: &Tensor,
) -> Result<ValueId, ModelError> {
    let enc = &dims.encoder;
    if features.rank() != 2 || features.shape()[1] != enc.input_dim {
        return Err(ModelError::FeatureWidth {
            got: features.shape().last().copied().unwrap_or(0),
            want: enc.input_dim,
        });
    }
    features.validate_finite("encoder input features")?;
    let x = tape.leaf(features.clone());
    let mut h = tape.frame_stack(x, enc.subsample)?;
    for i in 0..enc.num_layers {
        let (w, b) = params.encoder_layer(i);
        let lin = tape.matmul(h, w)?;
        let shifted = tape.bias_add(lin, b)?;
        h = apply_nonlinearity(tape, enc.nonlinearity, shifted);
    }
    Ok(h)
}

/// Prediction network for a batch of trigram contexts: one output row per
/// `(prev2, prev1)` pair. Stateless by construction — nothing but the two
/// ids enters the computation.
pub fn predict(
    tape: &mut GradTape,
    params: &ParamIds,
    dims: &ModelDims,
    contexts: &[(usize, usize)],
) -> Result<ValueId, ModelError> {
    for &(p2, p1) in contexts {
        for id in [p2, p1] {
            if id > dims.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: dims.vocab_size,
                });
            }
        }
    }
    let prev2_ids: Vec<usize> = contexts.iter().map(|c| c.0).collect();
    let prev1_ids: Vec<usize> = contexts.iter().map(|c| c.1).collect();
    let e2 = tape.embedding(params.embedding(), &prev2_ids)?;
    let e1 = tape.embedding(params.embedding(), &prev1_ids)?;
    let ctx = tape.concat_cols(e2, e1)?;
    let (w, b) = params.pred_proj();
    let lin = tape.matmul(ctx, w)?;
    let shifted = tape.bias_add(lin, b)?;
    Ok(tape.tanh(shifted))
}

/// Trigram contexts for lattice rows 0..=U: row 0 is (BOS, BOS), row 1 is
/// (BOS, w_1), row u is (w_{u-1}, w_u).
pub fn prediction_contexts(targets: &[usize]) -> Vec<(usize, usize)> {
    let mut contexts = Vec::with_capacity(targets.len() + 1);
    for u in 0..=targets.len() {
        let prev1 = if u >= 1 { targets[u - 1] } else { BLANK_ID };
        let prev2 = if u >= 2 { targets[u - 2] } else { BLANK_ID };
        contexts.push((prev2, prev1));
    }
    contexts
}

/// Additive joint for single rows: `log_softmax(W·tanh(h_enc + h_pred) + b)`.
pub fn joint(
    tape: &mut GradTape,
    params: &ParamIds,
    h_enc: ValueId,
    h_pred: ValueId,
) -> Result<ValueId, ModelError> {
    let summed = tape.add(h_enc, h_pred)?;
    let act = tape.tanh(summed);
    let (w, b) = params.joint_out();
    let lin = tape.matmul(act, w)?;
    let shifted = tape.bias_add(lin, b)?;
    Ok(tape.log_softmax(shifted)?)
}

/// Full lattice: encode once, prediction rows for every target prefix, joint
/// over all (frame, prefix) pairs. Output is `[T'×(U+1)×(V+1)]`.
pub fn forward_lattice(
    tape: &mut GradTape,
    params: &ParamIds,
    dims: &ModelDims,
    features: &Tensor,
    targets: &[usize],
) -> Result<ValueId, ModelError> {
    for &id in targets {
        if id == 0 || id > dims.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: dims.vocab_size,
            });
        }
    }
    let h_enc = encode(tape, params, dims, features)?;
    let h_pred = predict(tape, params, dims, &prediction_contexts(targets))?;
    let grid = tape.pairwise_sum(h_enc, h_pred)?;
    let frames = tape.value(h_enc).shape()[0];
    let rows = targets.len() + 1;
    let flat = tape.reshape(grid, vec![frames * rows, dims.d_model])?;
    let act = tape.tanh(flat);
    let (w, b) = params.joint_out();
    let lin = tape.matmul(act, w)?;
    let shifted = tape.bias_add(lin, b)?;
    let ls = tape.log_softmax(shifted)?;
    Ok(tape.reshape(ls, vec![frames, rows, dims.output_dim()])?)
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R, field: &'static str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Truncated { field })?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u8<R: Read>(r: &mut R, field: &'static str) -> Result<u8, CheckpointError> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Truncated { field })?;
    Ok(buf[0])
}

/// Serializes parameters: magic, version, stage tag, dims block, then raw
/// little-endian f64 blobs in [`ModelParams::param_tensors`] order. The
/// write goes to a temp file first and lands by rename.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("clft.tmp");
    write_checkpoint_file(params, &tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_checkpoint_file(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    w.write_all(&[params.stage.code()])?;
    let dims = &params.dims;
    write_u32(&mut w, dims.d_model as u32)?;
    write_u32(&mut w, dims.vocab_size as u32)?;
    write_u32(&mut w, dims.embed_dim as u32)?;
    write_u32(&mut w, dims.encoder.input_dim as u32)?;
    write_u32(&mut w, dims.encoder.subsample as u32)?;
    write_u32(&mut w, dims.encoder.num_layers as u32)?;
    write_u32(&mut w, dims.encoder.hidden_dim as u32)?;
    w.write_all(&[dims.encoder.nonlinearity.code()])?;
    for tensor in params.param_tensors() {
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Truncated { field: "magic" })?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let stage_code = read_u8(&mut r, "stage")?;
    let stage = StageTag::from_code(stage_code).ok_or(CheckpointError::BadField {
        field: "stage",
        detail: format!("unknown tag {stage_code}"),
    })?;
    let d_model = read_u32(&mut r, "d_model")? as usize;
    let vocab_size = read_u32(&mut r, "vocab_size")? as usize;
    let embed_dim = read_u32(&mut r, "embed_dim")? as usize;
    let input_dim = read_u32(&mut r, "input_dim")? as usize;
    let subsample = read_u32(&mut r, "subsample")? as usize;
    let num_layers = read_u32(&mut r, "num_layers")? as usize;
    let hidden_dim = read_u32(&mut r, "hidden_dim")? as usize;
    let nl_code = read_u8(&mut r, "nonlinearity")?;
    let nonlinearity = Nonlinearity::from_code(nl_code).ok_or(CheckpointError::BadField {
        field: "nonlinearity",
        detail: format!("unknown code {nl_code}"),
    })?;
    for (field, value) in [
        ("d_model", d_model),
        ("vocab_size", vocab_size),
        ("embed_dim", embed_dim),
        ("input_dim", input_dim),
        ("subsample", subsample),
        ("num_layers", num_layers),
        ("hidden_dim", hidden_dim),
    ] {
        if value == 0 {
            return Err(CheckpointError::BadField {
                field,
                detail: "must be positive".into(),
            });
        }
    }
    let dims = ModelDims {
        d_model,
        vocab_size,
        embed_dim,
        encoder: EncoderConfig {
            input_dim,
            subsample,
            num_layers,
            hidden_dim,
            nonlinearity,
        },
    };

    let read_blob = |r: &mut BufReader<File>,
                     shape: Vec<usize>,
                     field: &'static str|
     -> Result<Tensor, CheckpointError> {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)
                .map_err(|_| CheckpointError::Truncated { field })?;
            data.push(f64::from_le_bytes(buf));
        }
        Ok(Tensor::new(shape, data).expect("blob length"))
    };

    let mut encoder_layers = Vec::with_capacity(num_layers);
    let mut in_dim = input_dim * subsample;
    for layer in 0..num_layers {
        let out_dim = if layer + 1 == num_layers {
            d_model
        } else {
            hidden_dim
        };
        let weight = read_blob(&mut r, vec![in_dim, out_dim], "encoder weight")?;
        let bias = read_blob(&mut r, vec![out_dim], "encoder bias")?;
        encoder_layers.push(Linear { weight, bias });
        in_dim = out_dim;
    }
    let embedding = read_blob(&mut r, vec![vocab_size + 1, embed_dim], "embedding")?;
    let pred_proj = Linear {
        weight: read_blob(&mut r, vec![2 * embed_dim, d_model], "prediction weight")?,
        bias: read_blob(&mut r, vec![d_model], "prediction bias")?,
    };
    let joint_out = Linear {
        weight: read_blob(&mut r, vec![d_model, vocab_size + 1], "joint weight")?,
        bias: read_blob(&mut r, vec![vocab_size + 1], "joint bias")?,
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok(ModelParams {
        dims,
        stage,
        encoder_layers,
        embedding,
        pred_proj,
        joint_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::transducer::transducer_nll;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> ModelDims {
        ModelDims {
            d_model: 6,
            vocab_size: 5,
            embed_dim: 4,
            encoder: EncoderConfig {
                input_dim: 3,
                subsample: 2,
                num_layers: 2,
                hidden_dim: 5,
                nonlinearity: Nonlinearity::Tanh,
            },
        }
    }

    fn small_params(seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init(small_dims(), &mut rng)
    }

    #[test]
    fn encode_subsamples_and_pads() {
        let params = small_params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let features = Tensor::uniform(vec![10, 3], 1.0, &mut rng);
        let out = params.encode(&features).unwrap();
        assert_eq!(out.shape(), &[5, 6]);

        let single = Tensor::uniform(vec![1, 3], 1.0, &mut rng);
        let out = params.encode(&single).unwrap();
        assert_eq!(out.shape(), &[1, 6]);
    }

    #[test]
    fn encode_zero_weights_gives_bias_rows() {
        let mut params = small_params(3);
        for layer in &mut params.encoder_layers {
            layer.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let features = Tensor::uniform(vec![6, 3], 1.0, &mut rng);
        let out = params.encode(&features).unwrap();
        // With zero weights every row is tanh(last bias) regardless of input.
        let expect: Vec<f64> = params
            .encoder_layers
            .last()
            .unwrap()
            .bias
            .data()
            .iter()
            .map(|b| b.tanh())
            .collect();
        for row in out.data().chunks(6) {
            for (v, e) in row.iter().zip(&expect) {
                assert!((v - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let params = small_params(1);
        let features = Tensor::zeros(vec![4, 7]);
        assert!(matches!(
            params.encode(&features),
            Err(ModelError::FeatureWidth { got: 7, want: 3 })
        ));
    }

    #[test]
    fn predict_is_stateless() {
        let params = small_params(5);
        let bos = params.predict(BLANK_ID, BLANK_ID).unwrap();
        let bos2 = params.predict(BLANK_ID, BLANK_ID).unwrap();
        assert_eq!(bos.data(), bos2.data());

        // Same context after different "histories" (there is no history).
        let a = params.predict(3, 2).unwrap();
        let b = params.predict(3, 2).unwrap();
        assert_eq!(a.data(), b.data());

        // prev2 matters for generic parameters.
        let c = params.predict(1, 2).unwrap();
        let diff = a.max_abs_diff(&c);
        assert!(diff > 1e-6, "prev2 change ignored: {diff}");
    }

    #[test]
    fn predict_rejects_out_of_range() {
        let params = small_params(5);
        assert!(matches!(
            params.predict(9, 0),
            Err(ModelError::TokenOutOfRange { id: 9, .. })
        ));
    }

    #[test]
    fn joint_uniform_symmetric_normalized() {
        let mut params = small_params(6);
        params.joint_out.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        params.joint_out.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::uniform(vec![6], 1.0, &mut rng);
        let b = Tensor::uniform(vec![6], 1.0, &mut rng);
        let out = params.joint(&a, &b).unwrap();
        let uniform = -(6.0f64.ln());
        for v in out.data() {
            assert!((v - uniform).abs() < 1e-12);
        }

        let params = small_params(8);
        let ab = params.joint(&a, &b).unwrap();
        let ba = params.joint(&b, &a).unwrap();
        assert_eq!(ab.data(), ba.data(), "additive joint must commute");
        let sum: f64 = ab.data().iter().map(|v| v.exp()).sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn lattice_shapes() {
        let params = small_params(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let features = Tensor::uniform(vec![10, 3], 1.0, &mut rng);
        let lat = params.forward_lattice(&features, &[1, 2, 3]).unwrap();
        assert_eq!(lat.log_probs().shape(), &[5, 4, 6]);
        lat.check_normalized(1e-9).unwrap();

        let empty = params.forward_lattice(&features, &[]).unwrap();
        assert_eq!(empty.log_probs().shape(), &[5, 1, 6]);
    }

    #[test]
    fn end_to_end_gradient_check() {
        // Two-utterance batch through encoder, prediction, joint, softmax and
        // the lattice loss, against central finite differences.
        let params = small_params(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = [
            (Tensor::uniform(vec![5, 3], 1.0, &mut rng), vec![2usize, 4]),
            (Tensor::uniform(vec![6, 3], 1.0, &mut rng), vec![1usize, 3, 5]),
        ];
        let tensors: Vec<Tensor> = params.param_tensors().into_iter().cloned().collect();
        let dims = params.dims.clone();
        let n_enc = params.encoder_layers.len();
        let max_rel = grad_check(
            |tape, ids| {
                let pids = ParamIds {
                    num_encoder_layers: n_enc,
                    ids: ids.to_vec(),
                };
                let mut losses = Vec::new();
                for (features, targets) in &batch {
                    let lat_id = forward_lattice(tape, &pids, &dims, features, targets)
                        .map_err(|e| match e {
                            ModelError::Numerics(n) => n,
                            other => NumericsError::NonFinite {
                                context: other.to_string(),
                            },
                        })?;
                    let lat = JointLogProbLattice::new(tape.value(lat_id).clone())
                        .expect("lattice dims");
                    let loss = transducer_nll(&lat, targets).expect("feasible lattice");
                    let node = tape.custom_grad(lat_id, loss.nll, loss.grad.unwrap())?;
                    losses.push(node);
                }
                tape.mean_stack(&losses)
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(max_rel <= 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.clft");
        let mut params = small_params(13);
        params.stage = StageTag::Stage1;
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
        assert_eq!(loaded.stage, StageTag::Stage1);
    }

    #[test]
    fn checkpoint_corruption_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.clft");
        let params = small_params(14);
        save_checkpoint(&params, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'C';
        bytes[4] = 9; // version
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Version { found: 9, .. })
        ));

        save_checkpoint(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated { .. }), "{err}");
    }
}
