//! Attention encoder-decoder models for ASR, MT and AST.
//!
//! All three tasks share one architecture family: a convolutional speech
//! encoder or a shallow text encoder feeding a two-cell conditional
//! recurrent character decoder with global attention. Parameters live in a
//! named [`ParamStore`]; the names are the stable identifiers used for
//! checkpointing and pre-training transfer.

pub mod checkpoint;
mod forward;

pub use forward::{
    attention_prepare, attention_step, decoder_step, encode_source, encode_speech, encode_text,
    output_scores, sequence_loss, AttentionCtx, DecoderStateNodes, DropoutPlan, SourceInput,
    StepOut,
};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Scalar, Tensor};

/// Speech encoder: two tanh input layers, two stride-2 convolutions, a
/// stack of bidirectional recurrent layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechEncoderConfig {
    /// Acoustic feature dimension (40 MFCC + energy).
    pub input_dim: usize,
    /// First input layer width.
    pub layer1: usize,
    /// Second input layer width n'.
    pub feat: usize,
    /// Convolution filter count per layer.
    pub conv_filters: usize,
    /// Bidirectional recurrent layers.
    pub rnn_layers: usize,
    /// Cell size m per direction.
    pub cell: usize,
}

impl SpeechEncoderConfig {
    /// LibriSpeech-scale defaults.
    pub fn librispeech() -> Self {
        SpeechEncoderConfig {
            input_dim: 41,
            layer1: 256,
            feat: 128,
            conv_filters: 16,
            rnn_layers: 3,
            cell: 256,
        }
    }

    /// Feature width after both convolutions are flattened: 4n' for n'
    /// divisible by 4.
    pub fn flattened_width(&self) -> usize {
        self.feat.div_ceil(2).div_ceil(2) * self.conv_filters
    }

    /// ceil(ceil(T/2)/2)
    pub fn output_length(&self, input_frames: usize) -> usize {
        input_frames.div_ceil(2).div_ceil(2)
    }
}

/// Shallow text encoder: embedding plus one bidirectional layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab: usize,
    pub embedding: usize,
    /// Cell size m per direction; annotations have width 2m.
    pub cell: usize,
}

/// Conditional recurrent character decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub vocab: usize,
    /// Target embedding size k.
    pub embedding: usize,
    /// Cell size m' of both decoder cells and the attention hidden layer.
    pub cell: usize,
    /// Annotation width 2m of the encoder this decoder attends over.
    pub annotation_dim: usize,
    /// Non-linear output layer size l; `None` projects directly to the
    /// vocabulary.
    pub output_layer: Option<usize>,
}

impl DecoderConfig {
    /// Width of the concatenation entering the output layer: m' + 2m + k.
    pub fn concat_dim(&self) -> usize {
        self.cell + self.annotation_dim + self.embedding
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderConfig {
    Speech(SpeechEncoderConfig),
    Text(TextEncoderConfig),
}

impl EncoderConfig {
    pub fn annotation_dim(&self) -> usize {
        match self {
            EncoderConfig::Speech(c) => 2 * c.cell,
            EncoderConfig::Text(c) => 2 * c.cell,
        }
    }
}

/// Which namespace the decoder parameters live in. The target-language
/// decoder is shared between MT and AST (names `dec.*` / `att.*`); the ASR
/// transcript decoder keeps its own namespace so pre-training transfer never
/// touches it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderNamespace {
    Target,
    AsrTranscript,
}

impl DecoderNamespace {
    fn dec(&self) -> &'static str {
        match self {
            DecoderNamespace::Target => "dec",
            DecoderNamespace::AsrTranscript => "asr_dec",
        }
    }

    fn att(&self) -> &'static str {
        match self {
            DecoderNamespace::Target => "att",
            DecoderNamespace::AsrTranscript => "asr_att",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub namespace: DecoderNamespace,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decoder.annotation_dim != self.encoder.annotation_dim() {
            return Err(Error::Config(format!(
                "decoder expects annotations of width {}, encoder produces {}",
                self.decoder.annotation_dim,
                self.encoder.annotation_dim()
            )));
        }
        if self.decoder.vocab < 4 {
            return Err(Error::Config("decoder vocabulary smaller than the reserved symbols".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AffineRef {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvRef {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct CellRef {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BiLayerRef {
    pub fwd: CellRef,
    pub bwd: CellRef,
}

#[derive(Clone, Debug)]
pub struct SpeechEncoderRef {
    pub in1: AffineRef,
    pub in2: AffineRef,
    pub conv1: ConvRef,
    pub conv2: ConvRef,
    pub layers: Vec<BiLayerRef>,
}

#[derive(Clone, Debug)]
pub struct TextEncoderRef {
    pub embedding: ParamId,
    pub layer: BiLayerRef,
}

#[derive(Clone, Debug)]
pub enum EncoderRef {
    Speech(SpeechEncoderRef),
    Text(TextEncoderRef),
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionRef {
    /// Query transform (m', m').
    pub w: ParamId,
    /// Annotation transform (2m, m').
    pub u: ParamId,
    /// Hidden bias (m',).
    pub b: ParamId,
    /// Score vector (m', 1).
    pub v: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderRef {
    pub embedding: ParamId,
    pub lstm1: CellRef,
    pub lstm2: CellRef,
    pub attention: AttentionRef,
    pub out: AffineRef,
    pub proj: Option<AffineRef>,
}

/// A model is a config plus parameter indices into some store. The store is
/// passed around explicitly so multiple task models can share components.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: EncoderRef,
    pub decoder: DecoderRef,
}

struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut Rng,
}

impl<'a> Init<'a> {
    fn matrix(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        if let Some(id) = self.store.id(name) {
            return self.check_existing(name, id, &shape);
        }
        let t = Tensor::glorot(shape, fan_in, fan_out, self.rng);
        self.store.insert(name, t)
    }

    fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        if let Some(id) = self.store.id(name) {
            return self.check_existing(name, id, &shape);
        }
        self.store.insert(name, Tensor::zeros(shape))
    }

    fn check_existing(&self, name: &str, id: ParamId, shape: &[usize]) -> Result<ParamId> {
        if self.store.tensor(id).shape() != shape {
            return Err(Error::Shape(format!(
                "shared parameter {name:?} has shape {:?}, this model wants {:?}",
                self.store.tensor(id).shape(),
                shape
            )));
        }
        Ok(id)
    }

    fn affine(&mut self, prefix: &str, rows: usize, cols: usize) -> Result<AffineRef> {
        let w = self.matrix(&format!("{prefix}.w"), vec![rows, cols], rows, cols)?;
        let b = self.zeros(&format!("{prefix}.b"), vec![cols])?;
        Ok(AffineRef { w, b })
    }

    fn conv(&mut self, prefix: &str, filters: usize, depth: usize) -> Result<ConvRef> {
        let w = self.matrix(
            &format!("{prefix}.w"),
            vec![filters, 3, 3, depth],
            9 * depth,
            9 * filters,
        )?;
        let b = self.zeros(&format!("{prefix}.b"), vec![filters])?;
        Ok(ConvRef { w, b })
    }

    /// Packed 4-gate cell [input, forget, candidate, output]; forget-gate
    /// bias starts at 1.0.
    fn cell(&mut self, prefix: &str, input: usize, m: usize) -> Result<CellRef> {
        let wx = self.matrix(&format!("{prefix}.wx"), vec![input, 4 * m], input, 4 * m)?;
        let wh = self.matrix(&format!("{prefix}.wh"), vec![m, 4 * m], m, 4 * m)?;
        let name = format!("{prefix}.b");
        let b = if let Some(id) = self.store.id(&name) {
            self.check_existing(&name, id, &[4 * m])?
        } else {
            let mut bias = Tensor::zeros(vec![4 * m]);
            for v in &mut bias.data_mut()[m..2 * m] {
                *v = 1.0;
            }
            self.store.insert(&name, bias)?
        };
        Ok(CellRef { wx, wh, b })
    }
}

impl Model {
    /// Create (or attach to already-present shared) parameters for this
    /// config. Creation order is fixed, so a seed determines every value.
    pub fn init(cfg: ModelConfig, store: &mut ParamStore<f32>, rng: &mut Rng) -> Result<Model> {
        cfg.validate()?;
        let mut init = Init { store, rng };
        let encoder = match &cfg.encoder {
            EncoderConfig::Speech(c) => {
                let in1 = init.affine("enc.in1", c.input_dim, c.layer1)?;
                let in2 = init.affine("enc.in2", c.layer1, c.feat)?;
                let conv1 = init.conv("enc.conv1", c.conv_filters, 1)?;
                let conv2 = init.conv("enc.conv2", c.conv_filters, c.conv_filters)?;
                let mut layers = Vec::with_capacity(c.rnn_layers);
                let mut input = c.flattened_width();
                for i in 0..c.rnn_layers {
                    let fwd = init.cell(&format!("enc.rnn{i}.fwd"), input, c.cell)?;
                    let bwd = init.cell(&format!("enc.rnn{i}.bwd"), input, c.cell)?;
                    layers.push(BiLayerRef { fwd, bwd });
                    input = 2 * c.cell;
                }
                EncoderRef::Speech(SpeechEncoderRef { in1, in2, conv1, conv2, layers })
            }
            EncoderConfig::Text(c) => {
                let embedding =
                    init.matrix("txt_enc.emb", vec![c.vocab, c.embedding], c.vocab, c.embedding)?;
                let fwd = init.cell("txt_enc.rnn.fwd", c.embedding, c.cell)?;
                let bwd = init.cell("txt_enc.rnn.bwd", c.embedding, c.cell)?;
                EncoderRef::Text(TextEncoderRef { embedding, layer: BiLayerRef { fwd, bwd } })
            }
        };

        let d = &cfg.decoder;
        let dp = cfg.namespace.dec();
        let ap = cfg.namespace.att();
        let embedding =
            init.matrix(&format!("{dp}.emb"), vec![d.vocab, d.embedding], d.vocab, d.embedding)?;
        let lstm1 = init.cell(&format!("{dp}.lstm1"), d.embedding, d.cell)?;
        let lstm2 = init.cell(&format!("{dp}.lstm2"), d.annotation_dim, d.cell)?;
        let attention = AttentionRef {
            w: init.matrix(&format!("{ap}.w"), vec![d.cell, d.cell], d.cell, d.cell)?,
            u: init.matrix(
                &format!("{ap}.u"),
                vec![d.annotation_dim, d.cell],
                d.annotation_dim,
                d.cell,
            )?,
            b: init.zeros(&format!("{ap}.b"), vec![d.cell])?,
            v: init.matrix(&format!("{ap}.v"), vec![d.cell, 1], d.cell, 1)?,
        };
        let concat = d.concat_dim();
        let (out, proj) = match d.output_layer {
            Some(l) => {
                let out = init.affine(&format!("{dp}.out"), concat, l)?;
                let proj = init.affine(&format!("{dp}.proj"), l, d.vocab)?;
                (out, Some(proj))
            }
            None => (init.affine(&format!("{dp}.out"), concat, d.vocab)?, None),
        };
        let decoder = DecoderRef { embedding, lstm1, lstm2, attention, out, proj };
        Ok(Model { cfg, encoder, decoder })
    }

    /// Every parameter id this model touches, in a fixed order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        match &self.encoder {
            EncoderRef::Speech(e) => {
                ids.extend([e.in1.w, e.in1.b, e.in2.w, e.in2.b]);
                ids.extend([e.conv1.w, e.conv1.b, e.conv2.w, e.conv2.b]);
                for layer in &e.layers {
                    for cell in [&layer.fwd, &layer.bwd] {
                        ids.extend([cell.wx, cell.wh, cell.b]);
                    }
                }
            }
            EncoderRef::Text(e) => {
                ids.push(e.embedding);
                for cell in [&e.layer.fwd, &e.layer.bwd] {
                    ids.extend([cell.wx, cell.wh, cell.b]);
                }
            }
        }
        let d = &self.decoder;
        ids.push(d.embedding);
        for cell in [&d.lstm1, &d.lstm2] {
            ids.extend([cell.wx, cell.wh, cell.b]);
        }
        ids.extend([d.attention.w, d.attention.u, d.attention.b, d.attention.v]);
        ids.extend([d.out.w, d.out.b]);
        if let Some(p) = &d.proj {
            ids.extend([p.w, p.b]);
        }
        ids
    }
}

/// Bind every parameter of a store into a graph, in store order. Forward
/// builders index the result by [`ParamId`].
pub fn bind_params<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>) -> Vec<NodeId> {
    (0..store.len()).map(|i| g.input(store.tensor(i).clone())).collect()
}
