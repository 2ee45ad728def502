//! The shared-encoder transformer: subsampling frontend, pre-norm encoder,
//! attention decoder, CTC projection and the pooled accent classifier.

mod accent;
mod config;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use accent::PooledStats;
pub use config::{ModelConfig, SharingConfig};

use crate::params::{Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{AttentionSpec, Tape, Var};
use crate::tensor::Tensor;
use crate::{math, Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Zero-padded input features for a batch of utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub batch: usize,
    pub max_frames: usize,
    pub dim: usize,
    /// `batch × max_frames × dim`, row-major.
    pub data: Vec<f64>,
    pub lens: Vec<usize>,
}

impl FeatureBatch {
    /// Pads `(frames × dim)` matrices into one batch.
    pub fn from_utterances<'a, I>(dim: usize, items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f32], usize)>,
    {
        let items: Vec<_> = items.into_iter().collect();
        let max_frames = items.iter().map(|(_, t)| *t).max().unwrap_or(0);
        let mut data = vec![0.0; items.len() * max_frames * dim];
        let mut lens = Vec::with_capacity(items.len());
        for (b, (feat, frames)) in items.iter().enumerate() {
            if feat.len() != frames * dim {
                return Err(Error::ShapeMismatch(format!("utterance {b}: {} values for {frames}×{dim}", feat.len())));
            }
            let dst = &mut data[b * max_frames * dim..][..frames * dim];
            for (d, s) in dst.iter_mut().zip(feat.iter()) {
                *d = *s as f64;
            }
            lens.push(*frames);
        }
        Ok(Self { batch: items.len(), max_frames, dim, data, lens })
    }

    pub fn single(features: &Tensor) -> Result<Self> {
        let s = features.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("features must be T×D, got {:?}", s)));
        }
        Ok(Self { batch: 1, max_frames: s[0], dim: s[1], data: features.data().to_vec(), lens: vec![s[0]] })
    }
}

/// Valid (unpadded) lengths of a batch laid out as `batch × max_len` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMask {
    pub batch: usize,
    pub max_len: usize,
    pub lens: Vec<usize>,
}

impl FrameMask {
    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        t < self.lens[b]
    }

    /// `(first_row, rows)` of each utterance.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        self.lens.iter().enumerate().map(|(b, &n)| (b * self.max_len, n)).collect()
    }
}

/// Every encoder layer's output, so any layer can be tapped.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Layer outputs passed through the encoder's final layer norm; the
    /// last one feeds CTC and the decoder.
    pub layers: Vec<Var>,
    /// Raw residual stream after each layer.
    pub residual: Vec<Var>,
    pub mask: FrameMask,
}

impl EncoderOutput {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("encoder has at least one layer")
    }

    /// Output of layer `k` (1-based).
    pub fn layer(&self, k: usize) -> Var {
        self.layers[k - 1]
    }
}

/// Zero-padded decoder token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub max_len: usize,
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
}

impl TokenBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Self {
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![0; seqs.len() * max_len];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * max_len..b * max_len + s.len()].copy_from_slice(s);
        }
        Self { batch: seqs.len(), max_len, ids, lens: seqs.iter().map(Vec::len).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct AttentionParams {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct EncoderLayer {
    attn_norm: Norm,
    attn: AttentionParams,
    ffn_norm: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: AttentionParams,
    cross_norm: Norm,
    cross_attn: AttentionParams,
    ffn_norm: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    frontend: Linear,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    embed: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    output: Linear,
    ctc: Linear,
    accent: Linear,
}

/// Parameter groups that the fine-tuning recipe re-initializes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Decoder token embedding and the decoder output projection.
    OutputLayers,
    /// CTC projection.
    Ctc,
    /// Accent classifier.
    Accent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.store.init(&format!("{name}.w"), &[fan_in, fan_out], Init::Xavier, self.seed)?,
            b: self.store.init(&format!("{name}.b"), &[fan_out], Init::Zeros, self.seed)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.store.init(&format!("{name}.gain"), &[d], Init::Ones, self.seed)?,
            bias: self.store.init(&format!("{name}.bias"), &[d], Init::Zeros, self.seed)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<AttentionParams> {
        Ok(AttentionParams {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(&format!("{name}.up"), d, hidden)?,
            down: self.linear(&format!("{name}.down"), hidden, d)?,
        })
    }
}

fn build_layout(config: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Layout> {
    let d = config.d_model;
    let mut b = Builder { store, seed };
    let frontend = b.linear("frontend.proj", config.feature_dim * config.subsample_factor, d)?;
    let mut encoder = Vec::with_capacity(config.enc_layers);
    for i in 0..config.enc_layers {
        encoder.push(EncoderLayer {
            attn_norm: b.norm(&format!("encoder.{i}.attn_norm"), d)?,
            attn: b.attention(&format!("encoder.{i}.attn"), d)?,
            ffn_norm: b.norm(&format!("encoder.{i}.ffn_norm"), d)?,
            ffn: b.ffn(&format!("encoder.{i}.ffn"), d, config.ffn_dim)?,
        });
    }
    let enc_norm = b.norm("encoder.final_norm", d)?;
    let embed = b.store.init("decoder.embed", &[config.vocab_size, d], Init::Xavier, seed)?;
    let mut decoder = Vec::with_capacity(config.dec_layers);
    for i in 0..config.dec_layers {
        decoder.push(DecoderLayer {
            self_norm: b.norm(&format!("decoder.{i}.self_norm"), d)?,
            self_attn: b.attention(&format!("decoder.{i}.self_attn"), d)?,
            cross_norm: b.norm(&format!("decoder.{i}.cross_norm"), d)?,
            cross_attn: b.attention(&format!("decoder.{i}.cross_attn"), d)?,
            ffn_norm: b.norm(&format!("decoder.{i}.ffn_norm"), d)?,
            ffn: b.ffn(&format!("decoder.{i}.ffn"), d, config.ffn_dim)?,
        });
    }
    let dec_norm = b.norm("decoder.final_norm", d)?;
    let output = b.linear("decoder.output", d, config.vocab_size)?;
    let ctc = b.linear("ctc.proj", d, config.vocab_size)?;
    let accent = b.linear("accent.classifier", 2 * d, config.accent_count)?;
    Ok(Layout { frontend, encoder, enc_norm, embed, decoder, dec_norm, output, ctc, accent })
}

/// Looks up the layout of an existing store by parameter name.
fn bind_layout(config: &ModelConfig, store: &ParamStore) -> Result<Layout> {
    let mut probe = ParamStore::new();
    let expected = build_layout(config, &mut probe, 0)?;
    if probe.len() != store.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "expected {} parameters, found {}",
            probe.len(),
            store.len()
        )));
    }
    for (_, p) in probe.iter() {
        let id =
            store.id(&p.name).ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing parameter {}", p.name)))?;
        if store.value(id).shape() != p.value.shape() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{}: shape {:?}, expected {:?}",
                p.name,
                store.value(id).shape(),
                p.value.shape()
            )));
        }
        if id != probe.id(&p.name).expect("probe has its own names") {
            return Err(Error::IncompatibleCheckpoint(format!("{} registered out of order", p.name)));
        }
    }
    Ok(expected)
}

/// Sinusoidal positional encoding value for `pos` and channel `i` of `d`.
pub fn positional_encoding(pos: usize, i: usize, d: usize) -> f64 {
    let pair = (i / 2) * 2;
    let angle = pos as f64 / math::powf(10_000.0, pair as f64 / d as f64);
    if i.is_multiple_of(2) {
        math::sin(angle)
    } else {
        math::cos(angle)
    }
}

fn positional_table(batch: usize, len: usize, d: usize) -> Tensor {
    let mut one = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            one.push(positional_encoding(pos, i, d));
        }
    }
    let mut data = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        data.extend_from_slice(&one);
    }
    Tensor::new(vec![batch * len, d], data).expect("table shape")
}

impl Model {
    /// Builds a freshly initialized model. Parameters use Xavier-uniform for
    /// matrices, zeros for biases and ones for layer-norm gains; each one
    /// draws from a stream keyed by its name.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params, seed)?;
        Ok(Self { config, params, layout })
    }

    /// Wraps parameters loaded from elsewhere, checking that every expected
    /// parameter is present exactly once with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = bind_layout(&config, &params)?;
        Ok(Self { config, params, layout })
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tape(&self, grad: bool) -> Tape<'_> {
        Tape::with_params(&self.params, grad)
    }

    /// Names of the parameters belonging to `head`.
    pub fn head_params(&self, head: Head) -> Vec<ParamId> {
        let l = self.layout();
        match head {
            Head::OutputLayers => vec![l.embed, l.output.w, l.output.b],
            Head::Ctc => vec![l.ctc.w, l.ctc.b],
            Head::Accent => vec![l.accent.w, l.accent.b],
        }
    }

    /// Re-initializes a head with fresh values drawn for `seed`.
    pub fn reinit_head(&mut self, head: Head, seed: u64) {
        for id in self.head_params(head) {
            let is_matrix = self.params.value(id).shape().len() == 2;
            let init = if is_matrix { Init::Xavier } else { Init::Zeros };
            self.params.reinit(id, init, seed);
        }
    }

    /// Parameter ids of encoder layer `k` (1-based).
    pub fn encoder_layer_params(&self, k: usize) -> Vec<ParamId> {
        let l = self.layout();
        let e = l.encoder[k - 1];
        let mut ids = vec![e.attn_norm.gain, e.attn_norm.bias, e.ffn_norm.gain, e.ffn_norm.bias];
        for lin in [e.attn.q, e.attn.k, e.attn.v, e.attn.o, e.ffn.up, e.ffn.down] {
            ids.push(lin.w);
            ids.push(lin.b);
        }
        ids
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(_, p)| p.name.clone()).collect()
    }

    fn linear(&self, tape: &mut Tape<'_>, x: Var, lin: Linear) -> Result<Var> {
        let w = tape.param(lin.w);
        let b = tape.param(lin.b);
        tape.linear(x, w, Some(b))
    }

    fn norm(&self, tape: &mut Tape<'_>, x: Var, n: Norm) -> Result<Var> {
        let g = tape.param(n.gain);
        let b = tape.param(n.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    fn dropout(&self, tape: &mut Tape<'_>, x: Var, rng: &mut Option<&mut Rng>) -> Var {
        match rng {
            Some(r) => tape.dropout(x, self.config.dropout, r),
            None => x,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<'_>,
        query: Var,
        memory: Var,
        p: AttentionParams,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let q = self.linear(tape, query, p.q)?;
        let k = self.linear(tape, memory, p.k)?;
        let v = self.linear(tape, memory, p.v)?;
        let a = tape.attention(q, k, v, spec)?;
        self.linear(tape, a, p.o)
    }

    fn feed_forward(&self, tape: &mut Tape<'_>, x: Var, f: FeedForward) -> Result<Var> {
        let h = self.linear(tape, x, f.up)?;
        let h = tape.relu(h);
        self.linear(tape, h, f.down)
    }

    /// Stacks groups of `subsample_factor` frames, projects them to
    /// `d_model` and adds sinusoidal positions. Each utterance keeps
    /// `floor(T / subsample_factor)` frames.
    pub fn frontend(&self, tape: &mut Tape<'_>, feats: &FeatureBatch) -> Result<(Var, FrameMask)> {
        let s = self.config.subsample_factor;
        let dim = self.config.feature_dim;
        if feats.dim != dim {
            return Err(Error::ShapeMismatch(format!("feature dim {} != {}", feats.dim, dim)));
        }
        if let Some(&t) = feats.lens.iter().find(|&&t| t < s) {
            return Err(Error::TooShort { frames: t, factor: s });
        }
        let lens: Vec<usize> = feats.lens.iter().map(|t| t / s).collect();
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let width = s * dim;
        // Stacked frames of one output row are contiguous in the padded
        // input, so stacking is a copy of `width` values per row.
        let mut stacked = vec![0.0; feats.batch * max_len * width];
        for b in 0..feats.batch {
            for t in 0..lens[b] {
                let src = &feats.data[(b * feats.max_frames + t * s) * dim..][..width];
                stacked[(b * max_len + t) * width..][..width].copy_from_slice(src);
            }
        }
        let x = tape.constant(Tensor::new(vec![feats.batch * max_len, width], stacked)?);
        let l = self.layout();
        // The projection of unit-scale features is already unit scale, so
        // unlike token embeddings it is not multiplied by sqrt(d_model).
        let h = self.linear(tape, x, l.frontend)?;
        let pe = tape.constant(positional_table(feats.batch, max_len, self.config.d_model));
        let h = tape.add(h, pe)?;
        Ok((h, FrameMask { batch: feats.batch, max_len, lens }))
    }

    /// Runs the pre-norm encoder stack, keeping every layer's output (each
    /// normalized by the shared final layer norm). Padded frames are never
    /// attended to.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        input: Var,
        mask: &FrameMask,
        mut rng: Option<&mut Rng>,
    ) -> Result<EncoderOutput> {
        let l = self.layout();
        let mut x = input;
        let mut layers = Vec::with_capacity(l.encoder.len());
        let mut residual = Vec::with_capacity(l.encoder.len());
        for layer in &l.encoder {
            let z = self.norm(tape, x, layer.attn_norm)?;
            let spec = AttentionSpec {
                batch: mask.batch,
                q_len: mask.max_len,
                k_len: mask.max_len,
                heads: self.config.heads,
                key_lens: mask.lens.clone(),
                causal: false,
            };
            let a = self.attention(tape, z, z, layer.attn, spec)?;
            let a = self.dropout(tape, a, &mut rng);
            x = tape.add(x, a)?;
            let z = self.norm(tape, x, layer.ffn_norm)?;
            let f = self.feed_forward(tape, z, layer.ffn)?;
            let f = self.dropout(tape, f, &mut rng);
            x = tape.add(x, f)?;
            residual.push(x);
            layers.push(self.norm(tape, x, l.enc_norm)?);
        }
        Ok(EncoderOutput { layers, residual, mask: mask.clone() })
    }

    /// Frontend followed by the encoder.
    pub fn encode_features(
        &self,
        tape: &mut Tape<'_>,
        feats: &FeatureBatch,
        mut rng: Option<&mut Rng>,
    ) -> Result<EncoderOutput> {
        let (x, mask) = self.frontend(tape, feats)?;
        let x = match rng.as_mut() {
            Some(r) => tape.dropout(x, self.config.dropout, r),
            None => x,
        };
        self.encode(tape, x, &mask, rng)
    }

    /// Decoder logits `[batch × max_len, vocab]` for teacher-forced input
    /// tokens (each sequence starting with sos). Position `i` only sees
    /// tokens `0..=i`.
    pub fn decode_logits(
        &self,
        tape: &mut Tape<'_>,
        tokens: &TokenBatch,
        enc: &EncoderOutput,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        if tokens.max_len == 0 || tokens.lens.contains(&0) {
            return Err(Error::EmptySequence);
        }
        if tokens.batch != enc.mask.batch {
            return Err(Error::ShapeMismatch(format!(
                "{} token sequences for {} encoded utterances",
                tokens.batch, enc.mask.batch
            )));
        }
        let l = self.layout();
        let d = self.config.d_model;
        let table = tape.param(l.embed);
        let x = tape.embedding(table, &tokens.ids)?;
        let x = tape.scale(x, math::sqrt(d as f64));
        let pe = tape.constant(positional_table(tokens.batch, tokens.max_len, d));
        let mut x = tape.add(x, pe)?;
        if let Some(r) = rng.as_mut() {
            x = tape.dropout(x, self.config.dropout, r);
        }
        let memory = enc.last();
        for layer in &l.decoder {
            let z = self.norm(tape, x, layer.self_norm)?;
            let spec = AttentionSpec {
                batch: tokens.batch,
                q_len: tokens.max_len,
                k_len: tokens.max_len,
                heads: self.config.heads,
                key_lens: tokens.lens.clone(),
                causal: true,
            };
            let a = self.attention(tape, z, z, layer.self_attn, spec)?;
            let a = self.dropout(tape, a, &mut rng);
            x = tape.add(x, a)?;

            let z = self.norm(tape, x, layer.cross_norm)?;
            let spec = AttentionSpec {
                batch: tokens.batch,
                q_len: tokens.max_len,
                k_len: enc.mask.max_len,
                heads: self.config.heads,
                key_lens: enc.mask.lens.clone(),
                causal: false,
            };
            let a = self.attention(tape, z, memory, layer.cross_attn, spec)?;
            let a = self.dropout(tape, a, &mut rng);
            x = tape.add(x, a)?;

            let z = self.norm(tape, x, layer.ffn_norm)?;
            let f = self.feed_forward(tape, z, layer.ffn)?;
            let f = self.dropout(tape, f, &mut rng);
            x = tape.add(x, f)?;
        }
        let x = self.norm(tape, x, l.dec_norm)?;
        self.linear(tape, x, l.output)
    }

    /// Per-frame vocabulary logits `[batch × max_len, vocab]` from the last
    /// encoder layer; blank is id 0.
    pub fn ctc_logits(&self, tape: &mut Tape<'_>, enc: &EncoderOutput) -> Result<Var> {
        let l = self.layout();
        self.linear(tape, enc.last(), l.ctc)
    }

    /// Mean and population variance over the valid frames of each utterance,
    /// `[batch, 2·d_model]`.
    pub fn stats_pool(&self, tape: &mut Tape<'_>, hidden: Var, mask: &FrameMask) -> Result<Var> {
        tape.stats_pool(hidden, &mask.segments())
    }

    /// Accent logits from pooled statistics (no softmax).
    pub fn classify(&self, tape: &mut Tape<'_>, pooled: Var) -> Result<Var> {
        let l = self.layout();
        self.linear(tape, pooled, l.accent)
    }

    /// Accent logits `[batch, accent_count]` read from encoder layer
    /// `sharing.tap_layer`; layers above the tap get no gradient from it.
    pub fn accent_branch(&self, tape: &mut Tape<'_>, enc: &EncoderOutput, sharing: SharingConfig) -> Result<Var> {
        sharing.validate(&self.config)?;
        let hidden = enc.layer(sharing.tap_layer);
        let pooled = self.stats_pool(tape, hidden, &enc.mask)?;
        self.classify(tape, pooled)
    }
}
