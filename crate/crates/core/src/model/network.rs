use ndarray::{Array2, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::params::ParamStore;
use super::tape::{cst, Graph, NodeId};
use super::{
    positional_encoding, AlignmentMatrix, ModelConfig, Segments, TextEmbedding, VisualEmbedding,
};
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::seed;
use crate::synthcorpus::{SpeakerEmbedding, Utterance, VisualFeatureSequence};
use crate::text::PhonemeSequence;

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Fft {
    attn: Attn,
    ln1: Norm,
    conv1: Linear,
    conv2: Linear,
    ln2: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: usize,
    text: Vec<Fft>,
    visual_in: Linear,
    visual: Vec<Fft>,
    cross: Attn,
    speaker: Linear,
    decoder: Vec<Fft>,
    head: Linear,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize, gain: f64 },
    Normal,
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: (usize, usize),
    init: Init,
}

#[derive(Default)]
struct Plan {
    specs: Vec<ParamSpec>,
}

impl Plan {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, w: &str, fan_in: usize, fan_out: usize) -> Linear {
        self.scaled_linear(prefix, w, fan_in, fan_out, 1.0)
    }

    fn scaled_linear(&mut self, prefix: &str, w: &str, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.{w}"), (fan_in, fan_out), Init::Xavier { fan_in, fan_out, gain }),
            b: self.add(format!("{prefix}.b{}", w.trim_start_matches('w')), (1, fan_out), Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{prefix}.gamma"), (1, d), Init::Ones),
            beta: self.add(format!("{prefix}.beta"), (1, d), Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize, out_gain: f64) -> Attn {
        Attn {
            q: self.linear(prefix, "wq", d, d),
            k: self.linear(prefix, "wk", d, d),
            v: self.linear(prefix, "wv", d, d),
            o: self.scaled_linear(prefix, "wo", d, d, out_gain),
        }
    }

    /// Residual branch outputs start at `out_gain` times the Xavier scale.
    fn fft(&mut self, prefix: &str, c: &ModelConfig, out_gain: f64) -> Fft {
        Fft {
            attn: self.attn(&format!("{prefix}.attn"), c.d, out_gain),
            ln1: self.norm(&format!("{prefix}.ln1"), c.d),
            conv1: self.linear(&format!("{prefix}.conv1"), "w", c.conv_kernel * c.d, c.conv_hidden),
            conv2: self.scaled_linear(&format!("{prefix}.conv2"), "w", c.conv_hidden, c.d, out_gain),
            ln2: self.norm(&format!("{prefix}.ln2"), c.d),
        }
    }

    fn stack(&mut self, prefix: &str, n: usize, c: &ModelConfig) -> Vec<Fft> {
        let gain = (2.0 * n.max(1) as f64).powf(-0.5);
        (0..n).map(|i| self.fft(&format!("{prefix}.block{i}"), c, gain)).collect()
    }
}

fn plan(c: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let mut p = Plan::default();
    let layout = Layout {
        embedding: p.add("text.embedding".into(), (c.vocab_size, c.d), Init::Normal),
        text: p.stack("text", c.text_blocks, c),
        visual_in: p.linear("visual.input", "w", c.visual_in, c.d),
        visual: p.stack("visual", c.visual_blocks, c),
        cross: p.attn("cross", c.d, 1.0),
        speaker: p.linear("speaker", "w", c.speaker_in, c.d),
        decoder: p.stack("decoder", c.decoder_blocks, c),
        head: p.linear("decoder.head", "w", c.d, c.mel_bins),
    };
    (layout, p.specs)
}

/// Which FFT stack a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stack {
    Text,
    Visual,
    Decoder,
}

/// A packed batch of model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<F> {
    pub phonemes: Vec<u32>,
    pub text: Segments,
    pub visual: Array2<F>,
    pub frames: Segments,
    /// One speaker vector per utterance.
    pub speakers: Array2<F>,
}

fn to_f<F: NdFloat>(m: &Array2<f32>) -> Array2<F> {
    m.mapv(|v| cst(v as f64))
}

impl<F: NdFloat> ModelInput<F> {
    pub fn single(phonemes: &PhonemeSequence, visual: &VisualFeatureSequence, speaker: &SpeakerEmbedding) -> Self {
        Self {
            phonemes: phonemes.ids().to_vec(),
            text: Segments::single(phonemes.len()),
            visual: to_f(visual.features()),
            frames: Segments::single(visual.n_frames()),
            speakers: Array2::from_shape_fn((1, speaker.vector().len()), |(_, j)| cst(speaker.vector()[j] as f64)),
        }
    }

    pub fn from_utterances<'a>(utts: impl IntoIterator<Item = &'a Utterance>) -> Self {
        let utts: Vec<&Utterance> = utts.into_iter().collect();
        let phonemes = utts.iter().flat_map(|u| u.phonemes.ids().iter().copied()).collect();
        let text = Segments::from_lengths(&utts.iter().map(|u| u.phonemes.len()).collect::<Vec<_>>());
        let frames = Segments::from_lengths(&utts.iter().map(|u| u.n_frames()).collect::<Vec<_>>());
        let width = utts.first().map_or(0, |u| u.visual.features().ncols());
        let mut visual = Array2::zeros((frames.total(), width));
        for (u, r) in utts.iter().zip(frames.ranges()) {
            visual.slice_mut(ndarray::s![r, ..]).assign(&to_f::<F>(u.visual.features()));
        }
        let sdim = utts.first().map_or(0, |u| u.speaker.vector().len());
        let speakers = Array2::from_shape_fn((utts.len(), sdim), |(b, j)| cst(utts[b].speaker.vector()[j] as f64));
        Self {
            phonemes,
            text,
            visual,
            frames,
            speakers,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.text.len()
    }

    fn validate(&self, c: &ModelConfig) -> Result<()> {
        let b = self.text.len();
        if b == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if self.frames.len() != b || self.speakers.nrows() != b {
            return Err(Error::Shape(format!(
                "batch of {b} text segments, {} visual segments, {} speakers",
                self.frames.len(),
                self.speakers.nrows()
            )));
        }
        if self.text.total() != self.phonemes.len() || self.frames.total() != self.visual.nrows() {
            return Err(Error::Shape("segment table does not cover the packed rows".into()));
        }
        if self.visual.ncols() != c.visual_in {
            return Err(Error::Shape(format!(
                "visual width {}, expected {}",
                self.visual.ncols(),
                c.visual_in
            )));
        }
        if self.speakers.ncols() != c.speaker_in {
            return Err(Error::Shape(format!(
                "speaker width {}, expected {}",
                self.speakers.ncols(),
                c.speaker_in
            )));
        }
        for len in self.text.lengths().chain(self.frames.lengths()) {
            if len == 0 {
                return Err(Error::Shape("empty sequence in batch".into()));
            }
            if len > c.max_len {
                return Err(Error::TooLong { len, max_len: c.max_len });
            }
        }
        if let Some(&bad) = self.phonemes.iter().find(|&&p| p as usize >= c.vocab_size) {
            return Err(Error::UnknownPhonemeId(bad));
        }
        if self.visual.iter().chain(self.speakers.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite model input".into()));
        }
        Ok(())
    }
}

/// Packed mel targets for `utts`, in batch order.
pub fn packed_targets<'a, F: NdFloat>(utts: impl IntoIterator<Item = &'a Utterance>) -> Array2<F> {
    let mels: Vec<&Array2<f32>> = utts.into_iter().map(|u| u.mel.frames()).collect();
    let rows = mels.iter().map(|m| m.nrows()).sum();
    let cols = mels.first().map_or(0, |m| m.ncols());
    let mut out = Array2::zeros((rows, cols));
    let mut r = 0;
    for m in mels {
        out.slice_mut(ndarray::s![r..r + m.nrows(), ..]).assign(&to_f::<F>(m));
        r += m.nrows();
    }
    out
}

/// Output of a forward pass over a packed batch.
#[derive(Debug, Clone)]
pub struct Prediction<F> {
    pub mel: Array2<F>,
    pub segments: Segments,
    pub alignments: Vec<AlignmentMatrix>,
}

impl<F: NdFloat> Prediction<F> {
    pub fn mel(&self, b: usize) -> ndarray::ArrayView2<'_, F> {
        self.mel.slice(ndarray::s![self.segments.range(b), ..])
    }

    pub fn mel_spectrogram(&self, b: usize) -> Result<MelSpectrogram> {
        MelSpectrogram::new(self.mel(b).mapv(|v| v.to_f32().unwrap_or(f32::NAN)))
    }
}

/// The full network with its parameters.
#[derive(Debug, Clone)]
pub struct VisoTts<F: NdFloat = f32> {
    config: ModelConfig,
    params: ParamStore<F>,
    layout: Layout,
}

struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

struct Builder<'g, 'p, F: NdFloat> {
    g: &'g mut Graph<'p, F>,
    c: &'g ModelConfig,
    dropout: Option<Dropout>,
}

impl<'g, 'p, F: NdFloat> Builder<'g, 'p, F> {
    fn linear(&mut self, x: NodeId, l: Linear) -> NodeId {
        let w = self.g.param(l.w);
        let b = self.g.param(l.b);
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    fn drop(&mut self, x: NodeId) -> NodeId {
        let Some(d) = self.dropout.as_mut() else { return x };
        if d.rate == 0.0 {
            return x;
        }
        let keep = cst::<F>(1.0 / (1.0 - d.rate));
        let shape = self.g.value(x).raw_dim();
        let mask = Array2::from_shape_simple_fn(shape, || {
            if d.rng.random::<f64>() < d.rate {
                F::zero()
            } else {
                keep
            }
        });
        self.g.mul_const(x, mask)
    }

    fn mha(&mut self, xq: NodeId, xkv: NodeId, p: Attn, qs: &Segments, ks: &Segments) -> (NodeId, NodeId) {
        let q = self.linear(xq, p.q);
        let k = self.linear(xkv, p.k);
        let v = self.linear(xkv, p.v);
        let a = self.g.attention(q, k, v, self.c.heads, qs, ks);
        (self.linear(a, p.o), a)
    }

    fn fft(&mut self, x: NodeId, p: Fft, seg: &Segments) -> NodeId {
        let (a, _) = self.mha(x, x, p.attn, seg, seg);
        let a = self.drop(a);
        let r = self.g.add(x, a);
        let (g1, b1) = (self.g.param(p.ln1.gamma), self.g.param(p.ln1.beta));
        let x1 = self.g.layer_norm(r, g1, b1);

        let cols = self.g.im2col(x1, self.c.conv_kernel, seg);
        let h = self.linear(cols, p.conv1);
        let h = self.g.relu(h);
        let f = self.linear(h, p.conv2);
        let f = self.drop(f);
        let r = self.g.add(x1, f);
        let (g2, b2) = (self.g.param(p.ln2.gamma), self.g.param(p.ln2.beta));
        self.g.layer_norm(r, g2, b2)
    }

    fn stack(&mut self, mut x: NodeId, blocks: &[Fft], seg: &Segments) -> NodeId {
        for &b in blocks {
            x = self.fft(x, b, seg);
        }
        x
    }

    fn positions(&mut self, x: NodeId, seg: &Segments) -> Result<NodeId> {
        let longest = seg.lengths().max().unwrap_or(0);
        let table = positional_encoding(longest, self.c.d, self.c.max_len)?;
        let mut pe = Array2::zeros((seg.total(), self.c.d));
        for r in seg.ranges() {
            let n = r.len();
            pe.slice_mut(ndarray::s![r, ..])
                .assign(&table.slice(ndarray::s![..n, ..]).mapv(cst::<F>));
        }
        Ok(self.g.add_const(x, &pe))
    }

    fn text(&mut self, l: &Layout, ids: &[u32], seg: &Segments) -> Result<NodeId> {
        let table = self.g.param(l.embedding);
        let e = self.g.gather(table, ids.iter().map(|&i| i as usize).collect());
        let scale = Array2::from_elem((1, self.c.d), cst::<F>((self.c.d as f64).sqrt()));
        let e = self.g.mul_const(e, scale);
        let e = self.positions(e, seg)?;
        Ok(self.stack(e, &l.text, seg))
    }

    fn visual(&mut self, l: &Layout, visual: Array2<F>, seg: &Segments) -> Result<NodeId> {
        let v = self.g.input(visual);
        let v = self.linear(v, l.visual_in);
        let v = self.positions(v, seg)?;
        Ok(self.stack(v, &l.visual, seg))
    }

    fn condition(&mut self, l: &Layout, ctx: NodeId, speakers: Array2<F>, mel_seg: &Segments) -> NodeId {
        let s = self.g.input(speakers);
        let s = self.linear(s, l.speaker);
        let s = self.g.gather(s, mel_seg.owners());
        self.g.add(ctx, s)
    }

    fn decode(&mut self, l: &Layout, x: NodeId, mel_seg: &Segments) -> NodeId {
        let x = self.stack(x, &l.decoder, mel_seg);
        self.linear(x, l.head)
    }

    /// Returns the mel node and the cross-attention node.
    fn network(&mut self, l: &Layout, input: &ModelInput<F>) -> Result<(NodeId, NodeId)> {
        let text = self.text(l, &input.phonemes, &input.text)?;
        let vis = self.visual(l, input.visual.clone(), &input.frames)?;
        let (ctx, attn) = self.mha(vis, text, l.cross, &input.frames, &input.text);
        let n = self.c.upsample_n;
        let up = self.g.gather(ctx, (0..n * input.frames.total()).map(|r| r / n).collect());
        let mel_seg = input.frames.scaled(n);
        let cond = self.condition(l, up, input.speakers.clone(), &mel_seg);
        Ok((self.decode(l, cond, &mel_seg), attn))
    }
}

fn head_mean<F: NdFloat>(probs: &[Array2<F>], heads: usize) -> Result<Vec<AlignmentMatrix>> {
    probs
        .chunks(heads)
        .map(|hs| {
            let mut sum = Array2::<f64>::zeros(hs[0].raw_dim());
            for p in hs {
                sum.zip_mut_with(p, |a, &b| *a += b.to_f64().unwrap_or(f64::NAN));
            }
            sum.mapv_inplace(|v| v / heads as f64);
            AlignmentMatrix::new(sum)
        })
        .collect()
}

impl<F: NdFloat> VisoTts<F> {
    /// Xavier-uniform weights, zero biases, unit norm gains. Each tensor
    /// draws from its own stream keyed by name, so the result depends only on
    /// `seed` and the config.
    pub fn new(config: ModelConfig, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = plan(&config);
        let mut params = ParamStore::new();
        for spec in specs {
            let mut rng = seed::rng(seed::derive_str(seed_value, "param", &spec.name), "init", 0);
            let t = match spec.init {
                Init::Xavier { fan_in, fan_out, gain } => {
                    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Array2::from_shape_simple_fn(spec.shape, || cst(rng.random_range(-a..a)))
                }
                Init::Normal => Array2::from_shape_simple_fn(spec.shape, || cst(rng.sample(StandardNormal))),
                Init::Zeros => Array2::zeros(spec.shape),
                Init::Ones => Array2::ones(spec.shape),
            };
            params.push(spec.name, t);
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Adopt `params`, which must hold exactly the tensors `config` needs.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = plan(&config);
        let mut ordered = ParamStore::new();
        for spec in &specs {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", spec.name)))?;
            if t.dim() != spec.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.dim(),
                    spec.shape
                )));
            }
            ordered.push(spec.name.clone(), t.clone());
        }
        if params.len() != specs.len() {
            let extra = params
                .names()
                .iter()
                .find(|n| ordered.position(n).is_none())
                .cloned()
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            config,
            params: ordered,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn cast<G: NdFloat>(&self) -> VisoTts<G> {
        VisoTts {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn builder<'g, 'p>(&'g self, g: &'g mut Graph<'p, F>, dropout_seed: Option<u64>) -> Builder<'g, 'p, F> {
        Builder {
            g,
            c: &self.config,
            dropout: dropout_seed.map(|s| Dropout {
                rate: self.config.dropout,
                rng: seed::rng(s, "dropout", 0),
            }),
        }
    }

    /// Forward pass. `dropout_seed: None` is inference mode.
    pub fn predict(&self, input: &ModelInput<F>, dropout_seed: Option<u64>) -> Result<Prediction<F>> {
        input.validate(&self.config)?;
        let mut g = Graph::new(&self.params);
        let (mel, attn) = self.builder(&mut g, dropout_seed).network(&self.layout, input)?;
        Ok(Prediction {
            mel: g.value(mel).clone(),
            segments: input.frames.scaled(self.config.upsample_n),
            alignments: head_mean(g.attention_probs(attn), self.config.heads)?,
        })
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, input: &ModelInput<F>) -> Result<Prediction<F>> {
        self.predict(input, None)
    }

    /// L1 loss against packed `targets` and its gradient for every
    /// parameter, in store order.
    pub fn loss_and_grads(
        &self,
        input: &ModelInput<F>,
        targets: &Array2<F>,
        dropout_seed: Option<u64>,
    ) -> Result<(F, Vec<Array2<F>>)> {
        let (loss, g, id) = self.loss_graph(input, targets, dropout_seed)?;
        Ok((loss, g.backward(id)))
    }

    pub fn loss(&self, input: &ModelInput<F>, targets: &Array2<F>, dropout_seed: Option<u64>) -> Result<F> {
        Ok(self.loss_graph(input, targets, dropout_seed)?.0)
    }

    fn loss_graph(
        &self,
        input: &ModelInput<F>,
        targets: &Array2<F>,
        dropout_seed: Option<u64>,
    ) -> Result<(F, Graph<'_, F>, NodeId)> {
        input.validate(&self.config)?;
        let want = (self.config.upsample_n * input.frames.total(), self.config.mel_bins);
        if targets.dim() != want {
            return Err(Error::Shape(format!("targets {:?}, expected {want:?}", targets.dim())));
        }
        let mut g = Graph::new(&self.params);
        let (mel, _) = self.builder(&mut g, dropout_seed).network(&self.layout, input)?;
        let loss = g.l1(mel, targets.clone());
        let value = g.value(loss)[[0, 0]];
        Ok((value, g, loss))
    }

    /// One utterance in inference mode.
    pub fn infer(
        &self,
        phonemes: &PhonemeSequence,
        visual: &VisualFeatureSequence,
        speaker: &SpeakerEmbedding,
    ) -> Result<(MelSpectrogram, AlignmentMatrix)> {
        let mut p = self.forward(&ModelInput::single(phonemes, visual, speaker))?;
        Ok((p.mel_spectrogram(0)?, p.alignments.remove(0)))
    }

    pub fn encode_text(&self, phonemes: &PhonemeSequence) -> Result<TextEmbedding<F>> {
        let ids = phonemes.ids();
        if let Some(&bad) = ids.iter().find(|&&p| p as usize >= self.config.vocab_size) {
            return Err(Error::UnknownPhonemeId(bad));
        }
        let mut g = Graph::new(&self.params);
        let seg = Segments::single(ids.len());
        let out = self.builder(&mut g, None).text(&self.layout, ids, &seg)?;
        Ok(TextEmbedding(g.value(out).clone()))
    }

    pub fn encode_visual(&self, visual: &VisualFeatureSequence) -> Result<VisualEmbedding<F>> {
        self.encode_visual_raw(&to_f(visual.features()))
    }

    /// Visual encoder on a raw `T x visual_in` matrix.
    pub fn encode_visual_raw(&self, visual: &Array2<F>) -> Result<VisualEmbedding<F>> {
        if visual.ncols() != self.config.visual_in || visual.nrows() == 0 {
            return Err(Error::Shape(format!(
                "visual features {:?}, expected T x {}",
                visual.dim(),
                self.config.visual_in
            )));
        }
        let mut g = Graph::new(&self.params);
        let seg = Segments::single(visual.nrows());
        let out = self.builder(&mut g, None).visual(&self.layout, visual.clone(), &seg)?;
        Ok(VisualEmbedding(g.value(out).clone()))
    }

    /// Cross attention with visual queries and text keys/values. Returns the
    /// `T x d` context and the head-averaged `T x N` weights.
    pub fn visual_text_attention(
        &self,
        visual: &VisualEmbedding<F>,
        text: &TextEmbedding<F>,
    ) -> Result<(Array2<F>, AlignmentMatrix)> {
        let d = self.config.d;
        if visual.0.ncols() != d || text.0.ncols() != d {
            return Err(Error::Shape(format!(
                "attention widths {} and {}, expected {d}",
                visual.0.ncols(),
                text.0.ncols()
            )));
        }
        if visual.0.nrows() == 0 || text.0.nrows() == 0 {
            return Err(Error::Shape("empty attention input".into()));
        }
        let mut g = Graph::new(&self.params);
        let q = g.input(visual.0.clone());
        let kv = g.input(text.0.clone());
        let (qs, ks) = (Segments::single(visual.0.nrows()), Segments::single(text.0.nrows()));
        let (ctx, attn) = self.builder(&mut g, None).mha(q, kv, self.layout.cross, &qs, &ks);
        let mut align = head_mean(g.attention_probs(attn), self.config.heads)?;
        Ok((g.value(ctx).clone(), align.remove(0)))
    }

    /// Per-head cross-attention weights, `heads` matrices of `T x N`.
    pub fn attention_heads(&self, visual: &VisualEmbedding<F>, text: &TextEmbedding<F>) -> Result<Vec<AlignmentMatrix>> {
        self.visual_text_attention(visual, text)?;
        let mut g = Graph::new(&self.params);
        let q = g.input(visual.0.clone());
        let kv = g.input(text.0.clone());
        let (qs, ks) = (Segments::single(visual.0.nrows()), Segments::single(text.0.nrows()));
        let (_, attn) = self.builder(&mut g, None).mha(q, kv, self.layout.cross, &qs, &ks);
        head_mean(g.attention_probs(attn), 1)
    }

    /// Add the projected speaker vector to every row of `context`.
    pub fn condition_speaker(&self, context: &Array2<F>, speaker: &[F]) -> Result<Array2<F>> {
        if speaker.len() != self.config.speaker_in {
            return Err(Error::Shape(format!(
                "speaker width {}, expected {}",
                speaker.len(),
                self.config.speaker_in
            )));
        }
        if context.ncols() != self.config.d {
            return Err(Error::Shape(format!("context width {}, expected {}", context.ncols(), self.config.d)));
        }
        let mut g = Graph::new(&self.params);
        let ctx = g.input(context.clone());
        let spk = Array2::from_shape_vec((1, speaker.len()), speaker.to_vec()).expect("sized");
        let seg = Segments::single(context.nrows());
        let out = self.builder(&mut g, None).condition(&self.layout, ctx, spk, &seg);
        Ok(g.value(out).clone())
    }

    /// Decoder stack and mel head on a conditioned `4T x d` sequence.
    pub fn decode_mel(&self, conditioned: &Array2<F>) -> Result<Array2<F>> {
        if conditioned.ncols() != self.config.d || conditioned.nrows() == 0 {
            return Err(Error::Shape(format!(
                "decoder input {:?}, expected L x {}",
                conditioned.dim(),
                self.config.d
            )));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(conditioned.clone());
        let seg = Segments::single(conditioned.nrows());
        let out = self.builder(&mut g, None).decode(&self.layout, x, &seg);
        Ok(g.value(out).clone())
    }

    /// One FFT block in inference mode.
    pub fn fft_block(&self, stack: Stack, index: usize, x: &Array2<F>) -> Result<Array2<F>> {
        if x.ncols() != self.config.d {
            return Err(Error::Shape(format!("block input width {}, expected {}", x.ncols(), self.config.d)));
        }
        let blocks = match stack {
            Stack::Text => &self.layout.text,
            Stack::Visual => &self.layout.visual,
            Stack::Decoder => &self.layout.decoder,
        };
        let block = *blocks
            .get(index)
            .ok_or_else(|| Error::ModelConfig(format!("{stack:?} has no block {index}")))?;
        let mut g = Graph::new(&self.params);
        let xi = g.input(x.clone());
        let out = self.builder(&mut g, None).fft(xi, block, &Segments::single(x.nrows()));
        Ok(g.value(out).clone())
    }
}
