use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::message::{ErrorCode, Frame, Hello, Message, ParamAck, SessionMode, PROTOCOL_VERSION};
use super::model::{next_token_loss, ClientGrads, ClientModel, Mat};
use crate::arr::IndVocab;
use crate::error::{Error, Result};
use crate::ltok::TokenPermutation;
use crate::vocab::CorpusRecord;

/// Client end of an established session.
pub struct ClientSession<S: Read + Write> {
    stream: S,
    session_id: u64,
    ack: Hello,
}

fn protocol_error(code: ErrorCode, detail: impl Into<String>) -> Error {
    Error::Protocol {
        code,
        detail: detail.into(),
    }
}

impl<S: Read + Write> ClientSession<S> {
    /// Sends HELLO and waits for the server's answer.
    pub fn connect(mut stream: S, mode: SessionMode, model: &ClientModel, lora: bool) -> Result<Self> {
        let hello = Hello {
            version: PROTOCOL_VERSION,
            mode,
            m: model.m as u32,
            d: model.d as u32,
            vocab_size: model.vocab_size as u32,
            lora_enabled: lora,
        };
        Message::Hello(hello).to_frame(0).write_to(&mut stream)?;
        let frame = Frame::read_from(&mut stream)?.ok_or_else(|| Error::format("server closed during handshake"))?;
        match Message::from_frame(&frame)? {
            Message::HelloAck(ack) => Ok(Self {
                stream,
                session_id: frame.session_id,
                ack,
            }),
            Message::Error(code) => Err(protocol_error(code, "handshake rejected")),
            other => Err(Error::format(format!("expected HELLO_ACK, got {:?}", other.frame_type()))),
        }
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    /// The server's negotiated parameters.
    pub fn ack(&self) -> &Hello {
        &self.ack
    }

    fn exchange(&mut self, msg: Message) -> Result<Message> {
        msg.to_frame(self.session_id).write_to(&mut self.stream)?;
        let frame = Frame::read_from(&mut self.stream)?.ok_or_else(|| Error::format("server closed the session"))?;
        match Message::from_frame(&frame)? {
            Message::Error(code) => Err(protocol_error(code, "request rejected")),
            reply => Ok(reply),
        }
    }

    fn tensor_reply(reply: Message, want_rows: usize, want_cols: usize, grad: bool) -> Result<Mat> {
        let t = match (reply, grad) {
            (Message::Enriched(t), false) | (Message::GradUp(t), true) => t,
            (other, _) => return Err(Error::format(format!("unexpected {:?} reply", other.frame_type()))),
        };
        if t.n as usize != want_rows || t.d as usize != want_cols {
            return Err(Error::DimensionMismatch(format!(
                "reply is {}x{}, expected {want_rows}x{want_cols}",
                t.n, t.d
            )));
        }
        Mat::from_tensor(&t)
    }

    /// EMB → ENRICHED.
    pub fn enrich(&mut self, e: &Mat) -> Result<Mat> {
        let reply = self.exchange(Message::Emb(e.to_tensor()))?;
        Self::tensor_reply(reply, e.rows, e.cols, false)
    }

    /// GRAD_DOWN → GRAD_UP.
    pub fn backprop(&mut self, g: &Mat) -> Result<Mat> {
        let reply = self.exchange(Message::GradDown(g.to_tensor()))?;
        Self::tensor_reply(reply, g.rows, g.cols, true)
    }

    /// Asks the cloud to apply its accumulated adapter gradient, averaged over `count` records.
    pub fn commit(&mut self, learning_rate: f64, count: u32) -> Result<ParamAck> {
        match self.exchange(Message::ParamAck(ParamAck { learning_rate, count }))? {
            Message::ParamAck(ack) => Ok(ack),
            other => Err(Error::format(format!("expected PARAM_ACK, got {:?}", other.frame_type()))),
        }
    }

    /// Sends raw bytes; used to exercise the server's error handling.
    pub fn send_raw(&mut self, frame: &Frame) -> Result<Option<Message>> {
        frame.write_to(&mut self.stream)?;
        match Frame::read_from(&mut self.stream)? {
            Some(f) => Ok(Some(Message::from_frame(&f)?)),
            None => Ok(None),
        }
    }

    pub fn close(mut self) -> Result<()> {
        match self.exchange(Message::Bye)? {
            Message::Bye => Ok(()),
            other => Err(Error::format(format!("expected BYE, got {:?}", other.frame_type()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    /// Softmax temperature; zero means argmax.
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.25,
            max_tokens: 16,
            seed: 0,
        }
    }
}

fn check_client(ind: &IndVocab, perm: &TokenPermutation, model: &ClientModel) -> Result<()> {
    if model.m != ind.dim() || model.vocab_size != ind.len() || perm.size() != ind.len() {
        return Err(Error::DimensionMismatch(format!(
            "model m={} |V|={}, vocabulary m={} |V|={}, permutation {}",
            model.m,
            model.vocab_size,
            ind.dim(),
            ind.len(),
            perm.size()
        )));
    }
    Ok(())
}

fn embed(tokens: &[usize], ind: &IndVocab) -> Result<Mat> {
    let mut data = Vec::with_capacity(tokens.len() * ind.dim());
    for &t in tokens {
        if t >= ind.len() {
            return Err(Error::Index {
                index: t,
                size: ind.len(),
            });
        }
        data.extend(ind.row(t).iter().map(|&v| v as f64));
    }
    Mat::from_vec(tokens.len(), ind.dim(), data)
}

/// Picks a local index from logits: argmax (lowest index on ties) at temperature zero,
/// otherwise a draw from `softmax(logits / h)`.
pub(crate) fn sample_index(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let hi = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|z| (z - hi).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Generates up to `cfg.max_tokens` local indices. Each step re-sends the full prefix.
/// `prompt` holds original token indices.
pub fn client_generate<S: Read + Write>(
    prompt: &[usize],
    ind: &IndVocab,
    perm: &TokenPermutation,
    model: &ClientModel,
    session: &mut ClientSession<S>,
    cfg: &GenerationConfig,
) -> Result<Vec<usize>> {
    check_client(ind, perm, model)?;
    if prompt.is_empty() {
        return Err(Error::EmptySequence);
    }
    if !(cfg.temperature.is_finite() && cfg.temperature >= 0.0) {
        return Err(Error::argument(format!("temperature must be >= 0, got {}", cfg.temperature)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens = prompt.to_vec();
    let mut out = Vec::with_capacity(cfg.max_tokens);
    for _ in 0..cfg.max_tokens {
        let e = model.encode(&embed(&tokens, ind)?)?;
        let enriched = session.enrich(&e)?;
        let logits = model.last_logits(&enriched)?;
        let local = sample_index(&logits, cfg.temperature, &mut rng);
        out.push(local);
        tokens.push(perm.inverse(local)?);
    }
    Ok(out)
}

/// What crossed the wire for one record of a tuning round.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordExchange {
    pub emb: Mat,
    pub enriched: Mat,
    pub grad_down: Mat,
    pub grad_up: Mat,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningReport {
    /// Mean loss over the batch before the update.
    pub loss: f64,
    pub records: Vec<RecordExchange>,
    /// Batch-averaged client gradients that were applied.
    pub grads: ClientGrads,
    /// Adapter parameters the cloud reported as updated.
    pub cloud_updated: u32,
}

/// The record's training sequence: prompt followed by code, as original token indices.
pub(crate) fn training_sequence(record: &CorpusRecord) -> Result<Vec<usize>> {
    let seq: Vec<usize> = record.prompt.iter().chain(&record.code).copied().collect();
    if seq.len() < 2 {
        return Err(Error::argument("a training record needs at least two tokens"));
    }
    Ok(seq)
}

/// Next-token targets as local indices.
pub(crate) fn local_targets(seq: &[usize], perm: &TokenPermutation) -> Result<Vec<usize>> {
    seq[1..].iter().map(|&t| perm.forward(t)).collect()
}

/// One split fine-tuning step over `batch`: forward through the cloud, client-side loss and
/// decoder gradients, GRAD_DOWN/GRAD_UP for the boundary, encoder gradients, then an SGD update
/// with gradients averaged over records and a commit of the cloud adapter.
pub fn stuning_round<S: Read + Write>(
    batch: &[CorpusRecord],
    ind: &IndVocab,
    perm: &TokenPermutation,
    model: &mut ClientModel,
    session: &mut ClientSession<S>,
    learning_rate: f64,
) -> Result<TuningReport> {
    check_client(ind, perm, model)?;
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(learning_rate.is_finite() && learning_rate >= 0.0) {
        return Err(Error::argument(format!("learning rate must be >= 0, got {learning_rate}")));
    }
    let mut total = ClientGrads::zeros_like(model);
    let mut records = Vec::with_capacity(batch.len());
    let mut loss_sum = 0.0;
    for record in batch {
        let seq = training_sequence(record)?;
        let x = embed(&seq, ind)?;
        let e = model.encode(&x)?;
        let enriched = session.enrich(&e)?;
        let cache = model.decode(&enriched)?;
        let (loss, dlogits) = next_token_loss(cache.h.last().expect("non-empty"), &local_targets(&seq, perm)?)?;
        let mut grads = ClientGrads::zeros_like(model);
        let grad_down = model.decoder_backward(&cache, &dlogits, &mut grads);
        let grad_up = session.backprop(&grad_down)?;
        model.encoder_backward(&x, &grad_up, &mut grads);
        total.add_scaled(1.0, &grads);
        loss_sum += loss;
        records.push(RecordExchange {
            emb: Mat::from_tensor(&e.to_tensor())?,
            enriched,
            grad_down: Mat::from_tensor(&grad_down.to_tensor())?,
            grad_up,
            loss,
        });
    }
    let n = batch.len() as f64;
    let mut grads = ClientGrads::zeros_like(model);
    grads.add_scaled(1.0 / n, &total);
    model.apply(&grads, learning_rate);
    let cloud_updated = session.commit(learning_rate, batch.len() as u32)?.count;
    let loss = loss_sum / n;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(TuningReport {
        loss,
        records,
        grads,
        cloud_updated,
    })
}
