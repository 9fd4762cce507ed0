//! Graph builders for the encoder and decoder forward passes. Generic over
//! the scalar type: training binds `f32` stores, gradient checking `f64`.

use super::{
    CellRef, DecoderRef, EncoderRef, Model, SpeechEncoderConfig, SpeechEncoderRef, TextEncoderRef,
};
use crate::error::{Error, Result};
use crate::tensor::graph::{lstm_step, RecurrentCellNodes};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};
use crate::text::BOS;

/// Dropout mask nodes per application site; `None` means no dropout there.
/// Masks are applied to layer inputs/outputs and embeddings, never on the
/// cell-to-cell recurrence.
#[derive(Clone, Debug, Default)]
pub struct DropoutPlan {
    pub enc_in1: Option<NodeId>,
    pub enc_in2: Option<NodeId>,
    /// One mask per encoder recurrent layer output.
    pub enc_rnn: Vec<Option<NodeId>>,
    pub txt_emb: Option<NodeId>,
    pub txt_rnn: Option<NodeId>,
    pub dec_emb: Option<NodeId>,
    pub dec_concat: Option<NodeId>,
}

impl DropoutPlan {
    pub fn none() -> Self {
        DropoutPlan::default()
    }
}

fn masked<T: Scalar>(g: &mut Graph<T>, x: NodeId, mask: Option<NodeId>) -> Result<NodeId> {
    match mask {
        Some(m) => g.mul_row(x, m),
        None => Ok(x),
    }
}

fn cell_nodes(bound: &[NodeId], cell: &CellRef) -> RecurrentCellNodes {
    RecurrentCellNodes { wx: bound[cell.wx], wh: bound[cell.wh], b: bound[cell.b] }
}

/// Run one bidirectional recurrent layer over the rows of `input` (L, w);
/// returns the (L, 2m) matrix of concatenated forward/backward states.
fn bilstm_layer<T: Scalar>(
    g: &mut Graph<T>,
    bound: &[NodeId],
    layer: &super::BiLayerRef,
    input: NodeId,
    m: usize,
) -> Result<NodeId> {
    let len = g.value(input).dim(0);
    let fwd = cell_nodes(bound, &layer.fwd);
    let bwd = cell_nodes(bound, &layer.bwd);

    let mut states_f = Vec::with_capacity(len);
    let mut c = g.input(Tensor::zeros(vec![1, m]));
    let mut h = g.input(Tensor::zeros(vec![1, m]));
    for t in 0..len {
        let x = g.row(input, t)?;
        let (nc, nh) = lstm_step(g, fwd, c, h, x)?;
        c = nc;
        h = nh;
        states_f.push(h);
    }

    let mut states_b = Vec::with_capacity(len);
    let mut c = g.input(Tensor::zeros(vec![1, m]));
    let mut h = g.input(Tensor::zeros(vec![1, m]));
    for t in (0..len).rev() {
        let x = g.row(input, t)?;
        let (nc, nh) = lstm_step(g, bwd, c, h, x)?;
        c = nc;
        h = nh;
        states_b.push(h);
    }
    states_b.reverse();

    let rows: Vec<NodeId> = (0..len)
        .map(|t| g.concat(&[states_f[t], states_b[t]], 1))
        .collect::<Result<_>>()?;
    g.concat(&rows, 0)
}

/// Speech encoder: (T, n) features to (ceil(ceil(T/2)/2), 2m) annotations.
pub fn encode_speech<T: Scalar>(
    g: &mut Graph<T>,
    bound: &[NodeId],
    enc: &SpeechEncoderRef,
    cfg: &SpeechEncoderConfig,
    features: NodeId,
    drop: &DropoutPlan,
) -> Result<NodeId> {
    let ft = g.value(features);
    if ft.rank() != 2 || ft.dim(1) != cfg.input_dim {
        return Err(Error::Shape(format!(
            "speech encoder wants (T, {}), got {:?}",
            cfg.input_dim,
            ft.shape()
        )));
    }
    let t_in = ft.dim(0);

    let a1 = g.affine(features, bound[enc.in1.w], bound[enc.in1.b])?;
    let h1 = g.tanh(a1)?;
    let h1 = masked(g, h1, drop.enc_in1)?;
    let a2 = g.affine(h1, bound[enc.in2.w], bound[enc.in2.b])?;
    let h2 = g.tanh(a2)?;
    let h2 = masked(g, h2, drop.enc_in2)?;

    let stacked = g.reshape(h2, vec![t_in, cfg.feat, 1])?;
    let c1 = g.conv2d(stacked, bound[enc.conv1.w], bound[enc.conv1.b], (2, 2))?;
    let c2 = g.conv2d(c1, bound[enc.conv2.w], bound[enc.conv2.b], (2, 2))?;
    let t_out = g.value(c2).dim(0);
    let flat_w = g.value(c2).dim(1) * g.value(c2).dim(2);
    let mut current = g.reshape(c2, vec![t_out, flat_w])?;

    for (i, layer) in enc.layers.iter().enumerate() {
        current = bilstm_layer(g, bound, layer, current, cfg.cell)?;
        let mask = drop.enc_rnn.get(i).copied().flatten();
        current = masked(g, current, mask)?;
    }
    Ok(current)
}

/// Text encoder: token ids to (len, 2m) annotations.
pub fn encode_text<T: Scalar>(
    g: &mut Graph<T>,
    bound: &[NodeId],
    enc: &TextEncoderRef,
    cell: usize,
    ids: &[u32],
    drop: &DropoutPlan,
) -> Result<NodeId> {
    if ids.is_empty() {
        return Err(Error::Shape("text encoder needs a non-empty id sequence".into()));
    }
    let vocab = g.value(bound[enc.embedding]).dim(0);
    for &id in ids {
        if id as usize >= vocab {
            return Err(Error::Shape(format!(
                "source id {id} out of vocabulary range {vocab}"
            )));
        }
    }
    let rows: Vec<NodeId> =
        ids.iter().map(|&id| g.row(bound[enc.embedding], id as usize)).collect::<Result<_>>()?;
    let emb = g.concat(&rows, 0)?;
    let emb = masked(g, emb, drop.txt_emb)?;
    let out = bilstm_layer(g, bound, &enc.layer, emb, cell)?;
    masked(g, out, drop.txt_rnn)
}

/// Source side of one example.
pub enum SourceInput<'a, T> {
    Features(&'a Tensor<T>),
    Ids(&'a [u32]),
}

/// Encode either kind of source with the model's encoder.
pub fn encode_source<T: Scalar>(
    g: &mut Graph<T>,
    bound: &[NodeId],
    model: &Model,
    source: &SourceInput<'_, T>,
    drop: &DropoutPlan,
) -> Result<NodeId> {
    match (&model.encoder, source) {
        (EncoderRef::Speech(enc), SourceInput::Features(f)) => {
            let cfg = match &model.cfg.encoder {
                super::EncoderConfig::Speech(c) => c,
                _ => unreachable!("encoder kind checked by init"),
            };
            let features = g.input((*f).clone());
            encode_speech(g, bound, enc, cfg, features, drop)
        }
        (EncoderRef::Text(enc), SourceInput::Ids(ids)) => {
            let cell = match &model.cfg.encoder {
                super::EncoderConfig::Text(c) => c.cell,
                _ => unreachable!("encoder kind checked by init"),
            };
            encode_text(g, bound, enc, cell, ids, drop)
        }
        (EncoderRef::Speech(_), SourceInput::Ids(_)) => {
            Err(Error::Config("speech model fed token ids".into()))
        }
        (EncoderRef::Text(_), SourceInput::Features(_)) => {
            Err(Error::Config("text model fed acoustic features".into()))
        }
    }
}

/// Per-utterance attention state: the annotation matrix and its projected
/// form `H·U + b`, computed once and reused across decoder steps.
#[derive(Clone, Copy, Debug)]
pub struct AttentionCtx {
    pub annotations: NodeId,
    pub projected: NodeId,
}

pub fn attention_prepare<T: Scalar>(
    g: &mut Graph<T>,
    bound: &[NodeId],
    att: &super::AttentionRef,
    annotations: NodeId,
) -> Result<AttentionCtx> {
    if g.value(annotations).dim(0) == 0 {
        return Err(Error::Shape("attention over an empty annotation sequence".into()));
    }
    let projected = g.affine(annotations, bound[att.u], bound[att.b])?;
    Ok(AttentionCtx { annotations, projected })
}

/// Global attention step: scores e_i = v·tanh(W q + U h_i + b), weights by
/// softmax, context as the weighted sum of annotations.
/// Returns (context (1, 2m), weights (T', 1)).
pub fn attention_step<T: Scalar>(
    g: &mut Graph<T>,
    bound: &[NodeId],
    att: &super::AttentionRef,
    ctx: &AttentionCtx,
    query: NodeId,
) -> Result<(NodeId, NodeId)> {
    let q = g.matmul(query, bound[att.w])?;
    let pre = g.add_row(ctx.projected, q)?;
    let act = g.tanh(pre)?;
    let scores = g.matmul(act, bound[att.v])?;
    let weights = g.softmax(scores, 0)?;
    let wt = g.transpose(weights)?;
    let context = g.matmul(wt, ctx.annotations)?;
    Ok((context, weights))
}

/// Output layer: score vector z over the vocabulary from the concatenation
/// of decoder output, context and previous-symbol embedding. With a
/// non-linear layer: z = proj(tanh(out(x))); without: z = out(x).
pub fn output_scores<T: Scalar>(
    g: &mut Graph<T>,
    bound: &[NodeId],
    dec: &DecoderRef,
    o2: NodeId,
    context: NodeId,
    emb_prev: NodeId,
    drop: &DropoutPlan,
) -> Result<NodeId> {
    let cat = g.concat(&[o2, context, emb_prev], 1)?;
    let cat = masked(g, cat, drop.dec_concat)?;
    match &dec.proj {
        Some(proj) => {
            let hidden = g.affine(cat, bound[dec.out.w], bound[dec.out.b])?;
            let act = g.tanh(hidden)?;
            g.affine(act, bound[proj.w], bound[proj.b])
        }
        None => g.affine(cat, bound[dec.out.w], bound[dec.out.b]),
    }
}

/// Decoder recurrent state: cell/hidden of both cells.
#[derive(Clone, Copy, Debug)]
pub struct DecoderStateNodes {
    pub c1: NodeId,
    pub h1: NodeId,
    pub c2: NodeId,
    pub h2: NodeId,
}

impl DecoderStateNodes {
    /// All-zero initial state.
    pub fn initial<T: Scalar>(g: &mut Graph<T>, cell: usize) -> Self {
        let z = || Tensor::zeros(vec![1, cell]);
        DecoderStateNodes {
            c1: g.input(z()),
            h1: g.input(z()),
            c2: g.input(z()),
            h2: g.input(z()),
        }
    }
}

/// Everything one decoder step produces.
#[derive(Clone, Copy, Debug)]
pub struct StepOut {
    pub state: DecoderStateNodes,
    /// Score vector z (1, |V|); symbol selection happens in inference,
    /// softmax cross-entropy in training.
    pub scores: NodeId,
    pub context: NodeId,
    pub weights: NodeId,
}

/// One conditional decoder step: first cell consumes the previous symbol
/// embedding and the second cell's previous state, attention runs on the
/// first cell's output, the second cell consumes the context, and the output
/// layer scores the vocabulary.
pub fn decoder_step<T: Scalar>(
    g: &mut Graph<T>,
    bound: &[NodeId],
    dec: &DecoderRef,
    ctx: &AttentionCtx,
    state: &DecoderStateNodes,
    y_prev: u32,
    drop: &DropoutPlan,
) -> Result<StepOut> {
    let vocab = g.value(bound[dec.embedding]).dim(0);
    if y_prev as usize >= vocab {
        return Err(Error::Shape(format!(
            "previous symbol {y_prev} out of vocabulary range {vocab}"
        )));
    }
    let emb_prev = g.row(bound[dec.embedding], y_prev as usize)?;
    let emb_prev = masked(g, emb_prev, drop.dec_emb)?;

    let cell1 = cell_nodes(bound, &dec.lstm1);
    let (c1, h1) = lstm_step(g, cell1, state.c2, state.h2, emb_prev)?;
    let (context, weights) = attention_step(g, bound, &dec.attention, ctx, h1)?;
    let cell2 = cell_nodes(bound, &dec.lstm2);
    let (c2, h2) = lstm_step(g, cell2, c1, h1, context)?;
    let scores = output_scores(g, bound, dec, h2, context, emb_prev, drop)?;
    Ok(StepOut {
        state: DecoderStateNodes { c1, h1, c2, h2 },
        scores,
        context,
        weights,
    })
}

/// Teacher-forced loss of one (source, target) pair: the summed per-symbol
/// cross-entropy node plus the symbol count. `target` must already end with
/// EOS. `teacher_inputs`, when given, replaces the previous-symbol stream
/// fed back into the decoder (symbol dropout corrupts inputs, never labels).
pub fn sequence_loss<T: Scalar>(
    g: &mut Graph<T>,
    bound: &[NodeId],
    model: &Model,
    source: &SourceInput<'_, T>,
    target: &[u32],
    teacher_inputs: Option<&[u32]>,
    drop: &DropoutPlan,
) -> Result<(NodeId, usize)> {
    if target.is_empty() {
        return Err(Error::Corpus("teacher forcing needs a non-empty target".into()));
    }
    let inputs = teacher_inputs.unwrap_or(target);
    if inputs.len() != target.len() {
        return Err(Error::Corpus(format!(
            "teacher inputs of length {} against {} target labels",
            inputs.len(),
            target.len()
        )));
    }
    let annotations = encode_source(g, bound, model, source, drop)?;
    let ctx = attention_prepare(g, bound, &model.decoder.attention, annotations)?;
    let mut state = DecoderStateNodes::initial(g, model.cfg.decoder.cell);
    let mut y_prev = BOS;
    let mut total: Option<NodeId> = None;
    for (t, &y) in target.iter().enumerate() {
        let step = decoder_step(g, bound, &model.decoder, &ctx, &state, y_prev, drop)?;
        let flat = g.reshape(step.scores, vec![model.cfg.decoder.vocab])?;
        let loss = g.cross_entropy(flat, y as usize)?;
        total = Some(match total {
            Some(acc) => g.add(acc, loss)?,
            None => loss,
        });
        state = step.state;
        y_prev = inputs[t];
    }
    Ok((total.expect("target non-empty"), target.len()))
}
