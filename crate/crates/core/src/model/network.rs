//! The reading-comprehension network.
//!
//! Wiring, per sample with passage length `n` and question length `m`:
//!
//! 1. Lexicon: `[embedding ‖ exact-match(3) ‖ alignment]` per token, where the
//!    alignment feature attends from each token to the ReLU-projected
//!    embeddings of the other sequence. A ReLU layer reduces the result and a
//!    highway layer follows.
//! 2. Contextual encoding: stacked bidirectional GRUs, each followed by a
//!    highway layer. Passage and question share weights. Output width `2d`.
//! 3. Fusion: cross attention `A = softmax(HpWc (HqWc)ᵀ / √d)` (dropout after
//!    normalization), `U = [Hp ‖ A·Hq]`, self attention over `U` with the
//!    diagonal excluded, and `M = highway(BiGRU([U ‖ Û]))`.
//! 4. Span answer: `s0 = highway(softmax(w4·Hqᵀ)·Hq)`, then `T - 1` GRU steps
//!    over attention reads of `M`. Each state emits begin/end distributions;
//!    the prediction averages the retained steps.
//! 5. Cloze answer: attention `softmax(s0·Mᵀ)` summed over each candidate's
//!    occurrences and renormalized.
//!
//! Highway layers compute `x + g ⊙ (ReLU(xWt + bt) - x)` with
//! `g = σ(xWg + bg)`.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{SampleGrads, Tape, Var};
use super::tensor::Mat;
use crate::corpus::{Answer, Sample, TaskDataset, Token};
use crate::error::{Error, Result};
use crate::seed::{self, StreamRng, STREAM_EMBEDDING, STREAM_INIT};

/// Probabilities are floored at this value inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Half-width of the uniform range for embedding rows.
const EMBED_RANGE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub align_dim: usize,
    pub reduce_dim: usize,
    /// GRU hidden size `d`; encodings are `2d` wide.
    pub hidden: usize,
    pub encoder_layers: usize,
    /// Answer steps `T`.
    pub steps: usize,
    pub dropout: f64,
    pub step_dropout: f64,
    pub max_span_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            align_dim: 32,
            reduce_dim: 32,
            hidden: 32,
            encoder_layers: 1,
            steps: 5,
            dropout: 0.3,
            step_dropout: 0.3,
            max_span_len: 30,
        }
    }
}

impl ModelConfig {
    /// Every dimension set to `dim`, `steps` answer steps, no dropout.
    pub fn tiny(dim: usize, steps: usize) -> Self {
        ModelConfig {
            embed_dim: dim,
            align_dim: dim,
            reduce_dim: dim,
            hidden: dim,
            encoder_layers: 1,
            steps,
            dropout: 0.0,
            step_dropout: 0.0,
            max_span_len: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("align_dim", self.align_dim),
            ("reduce_dim", self.reduce_dim),
            ("hidden", self.hidden),
            ("encoder_layers", self.encoder_layers),
            ("steps", self.steps),
            ("max_span_len", self.max_span_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        for (name, v) in [("dropout", self.dropout), ("step_dropout", self.step_dropout)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("model.{name} must be in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    /// Width of encoder outputs and of the memory.
    pub fn enc_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Word list of the embedding table. Rows and out-of-vocabulary vectors are
/// both derived from a hash of the word, so a word's initial vector does not
/// depend on which other words are present.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl ModelVocab {
    /// Sorted, deduplicated words (lower-cased forms).
    pub fn from_words(words: impl IntoIterator<Item = String>, seed: u64) -> Self {
        let mut words: Vec<String> = words.into_iter().collect();
        words.sort();
        words.dedup();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        ModelVocab { words, index, seed }
    }

    pub fn from_datasets<'a>(datasets: impl IntoIterator<Item = &'a TaskDataset>, seed: u64) -> Self {
        let words = datasets
            .into_iter()
            .flat_map(|ds| ds.vocab.keys().cloned())
            .collect::<Vec<_>>();
        Self::from_words(words, seed)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Initial (and out-of-vocabulary) vector for `word`.
    pub fn init_vector(&self, word: &str, dim: usize) -> Vec<f64> {
        let mut rng = seed::rng(self.seed, &[STREAM_EMBEDDING, seed::fnv1a(word.as_bytes())]);
        (0..dim).map(|_| rng.gen_range(-EMBED_RANGE..EMBED_RANGE)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct GruIds {
    wx: usize,
    bx: usize,
    wzr: usize,
    wh: usize,
    hidden: usize,
}

#[derive(Debug, Clone, Copy)]
struct HighwayIds {
    wg: usize,
    bg: usize,
    wt: usize,
    bt: usize,
}

#[derive(Debug, Clone)]
struct Ids {
    embedding: usize,
    align_w1: usize,
    reduce_w: usize,
    reduce_b: usize,
    lex_highway: HighwayIds,
    encoder: Vec<(GruIds, GruIds, HighwayIds)>,
    att_proj: usize,
    self_proj: usize,
    mem_fwd: GruIds,
    mem_bwd: GruIds,
    mem_highway: HighwayIds,
    w4: usize,
    s0_highway: HighwayIds,
    ans_gru: GruIds,
    w5: usize,
    w6: usize,
    w7: usize,
}

enum Init {
    Zero,
    Glorot,
    Embedding,
}

struct Builder<'a> {
    store: ParamStore,
    seed: u64,
    vocab: &'a ModelVocab,
}

impl Builder<'_> {
    fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> usize {
        let mat = match init {
            Init::Zero => Mat::zeros(rows, cols),
            Init::Glorot => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                let mut rng = seed::rng(self.seed, &[STREAM_INIT, seed::fnv1a(name.as_bytes())]);
                Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
            }
            Init::Embedding => {
                let mut data = Vec::with_capacity(rows * cols);
                for w in self.vocab.words() {
                    data.extend(self.vocab.init_vector(w, cols));
                }
                Mat::from_vec(rows, cols, data)
            }
        };
        self.store.push(name, mat)
    }

    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> GruIds {
        GruIds {
            wx: self.add(&format!("{prefix}.wx"), input, 3 * hidden, Init::Glorot),
            bx: self.add(&format!("{prefix}.bx"), 1, 3 * hidden, Init::Zero),
            wzr: self.add(&format!("{prefix}.wzr"), hidden, 2 * hidden, Init::Glorot),
            wh: self.add(&format!("{prefix}.wh"), hidden, hidden, Init::Glorot),
            hidden,
        }
    }

    fn highway(&mut self, prefix: &str, dim: usize) -> HighwayIds {
        HighwayIds {
            wg: self.add(&format!("{prefix}.wg"), dim, dim, Init::Glorot),
            bg: self.add(&format!("{prefix}.bg"), 1, dim, Init::Zero),
            wt: self.add(&format!("{prefix}.wt"), dim, dim, Init::Glorot),
            bt: self.add(&format!("{prefix}.bt"), 1, dim, Init::Zero),
        }
    }
}

/// Lexicon features of both sequences.
#[derive(Debug, Clone, Copy)]
pub struct Lexicon {
    pub passage: Var,
    pub question: Var,
    /// `n × m` alignment weights from passage tokens to question tokens.
    pub passage_align: Var,
    /// `m × n` alignment weights from question tokens to passage tokens.
    pub question_align: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    /// `n × m` cross attention before dropout.
    pub cross_attention: Var,
    /// `n × n` self attention with zero diagonal.
    pub self_attention: Var,
    pub memory: Var,
}

#[derive(Debug, Clone)]
pub struct SpanHead {
    pub s0: Var,
    /// Per-step begin and end distributions, `1 × n` each.
    pub step_begin: Vec<Var>,
    pub step_end: Vec<Var>,
    pub retained: Vec<bool>,
    pub begin: Var,
    pub end: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ClozeHead {
    pub s0: Var,
    /// `1 × n` attention over passage positions.
    pub attention: Var,
    /// `1 × K` candidate probabilities.
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub enum Head {
    Span(SpanHead),
    Cloze(ClozeHead),
}

/// A recorded forward pass: every activation and the tape to differentiate it.
pub struct ForwardTrace<'p> {
    pub tape: Tape<'p>,
    pub lexicon: Lexicon,
    pub question_enc: Var,
    pub passage_enc: Var,
    pub fusion: Fusion,
    pub head: Head,
    loss: Option<Var>,
}

impl ForwardTrace<'_> {
    pub fn value(&self, v: Var) -> &Mat {
        self.tape.value(v)
    }

    /// Averaged begin/end distributions of a span sample.
    pub fn span_probs(&self) -> Option<(&[f64], &[f64])> {
        match &self.head {
            Head::Span(h) => Some((&self.value(h.begin).data, &self.value(h.end).data)),
            Head::Cloze(_) => None,
        }
    }

    pub fn cloze_probs(&self) -> Option<&[f64]> {
        match &self.head {
            Head::Cloze(h) => Some(&self.value(h.probs).data),
            Head::Span(_) => None,
        }
    }

    pub fn loss(&self) -> Option<f64> {
        self.loss.map(|v| self.value(v).data[0])
    }
}

/// Training-time randomness; `None` means evaluation (no dropout).
pub type DropoutRng<'r> = Option<&'r mut StreamRng>;

#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub vocab: ModelVocab,
    pub params: ParamStore,
    ids: Ids,
}

impl Network {
    /// Fresh network with parameters initialized from `seed`.
    pub fn new(config: ModelConfig, vocab: ModelVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let mut b = Builder {
            store: ParamStore::default(),
            seed,
            vocab: &vocab,
        };
        let (e, a, h, d) = (config.embed_dim, config.align_dim, config.reduce_dim, config.hidden);
        let dd = config.enc_dim();
        let embedding = b.add("embedding", vocab.len(), e, Init::Embedding);
        let align_w1 = b.add("align.w1", e, a, Init::Glorot);
        let reduce_w = b.add("reduce.w", e + 3 + a, h, Init::Glorot);
        let reduce_b = b.add("reduce.b", 1, h, Init::Zero);
        let lex_highway = b.highway("lex_highway", h);
        let mut encoder = Vec::new();
        for l in 0..config.encoder_layers {
            let input = if l == 0 { h } else { dd };
            let fwd = b.gru(&format!("enc{l}.fwd"), input, d);
            let bwd = b.gru(&format!("enc{l}.bwd"), input, d);
            let hw = b.highway(&format!("enc{l}_highway"), dd);
            encoder.push((fwd, bwd, hw));
        }
        let att_proj = b.add("att_proj", dd, d, Init::Glorot);
        let self_proj = b.add("self_proj", 2 * dd, d, Init::Glorot);
        let mem_fwd = b.gru("mem.fwd", 4 * dd, d);
        let mem_bwd = b.gru("mem.bwd", 4 * dd, d);
        let mem_highway = b.highway("mem_highway", dd);
        let w4 = b.add("w4", 1, dd, Init::Glorot);
        let s0_highway = b.highway("s0_highway", dd);
        let ans_gru = b.gru("ans_gru", dd, dd);
        let w5 = b.add("w5", dd, dd, Init::Glorot);
        let w6 = b.add("w6", dd, dd, Init::Glorot);
        let w7 = b.add("w7", dd, dd, Init::Glorot);
        let ids = Ids {
            embedding,
            align_w1,
            reduce_w,
            reduce_b,
            lex_highway,
            encoder,
            att_proj,
            self_proj,
            mem_fwd,
            mem_bwd,
            mem_highway,
            w4,
            s0_highway,
            ans_gru,
            w5,
            w6,
            w7,
        };
        let params = b.store;
        Ok(Network {
            config,
            vocab,
            params,
            ids,
        })
    }

    /// Network with the given tensors, which must match the layout implied by
    /// `config` and `vocab` name for name and shape.
    pub fn from_tensors(config: ModelConfig, vocab: ModelVocab, tensors: Vec<(String, Mat)>) -> Result<Self> {
        let mut net = Network::new(config, vocab, 0)?;
        if tensors.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                net.params.len(),
                tensors.len()
            )));
        }
        for (i, (name, mat)) in tensors.into_iter().enumerate() {
            let want = net.params.name(i);
            if name != want {
                return Err(Error::Checkpoint(format!("tensor {i} is '{name}', expected '{want}'")));
            }
            let shape = net.params.tensors()[i].shape();
            if mat.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {shape:?}",
                    mat.shape()
                )));
            }
            if !mat.is_finite() {
                return Err(Error::Checkpoint(format!("tensor '{name}' holds non-finite values")));
            }
            net.params.tensors_mut()[i] = mat;
        }
        Ok(net)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_params(&self, params: &[Mat]) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(self.params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape("parameter set does not match the network layout".into()));
        }
        Ok(())
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut DropoutRng) -> Var {
        let rate = self.config.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let (r, c) = tape.value(x).shape();
                let keep = 1.0 / (1.0 - rate);
                let mask = (0..r * c)
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                tape.mul_const(x, Mat::from_vec(r, c, mask))
            }
            _ => x,
        }
    }

    fn highway(&self, tape: &mut Tape, ids: HighwayIds, x: Var) -> Var {
        let wg = tape.param(ids.wg);
        let bg = tape.param(ids.bg);
        let wt = tape.param(ids.wt);
        let bt = tape.param(ids.bt);
        let g = tape.matmul(x, wg);
        let g = tape.add_row(g, bg);
        let g = tape.sigmoid(g);
        let t = tape.matmul(x, wt);
        let t = tape.add_row(t, bt);
        let t = tape.relu(t);
        let diff = tape.sub(t, x);
        let gated = tape.mul(g, diff);
        tape.add(x, gated)
    }

    /// One GRU step from state `h` (1 × hidden) given the projected input row
    /// `xw` (1 × 3·hidden, already including the input bias).
    fn gru_step(tape: &mut Tape, ids: GruIds, xw: Var, h: Var) -> Var {
        let hd = ids.hidden;
        let wzr = tape.param(ids.wzr);
        let wh = tape.param(ids.wh);
        let x_zr = tape.cols(xw, 0, 2 * hd);
        let x_h = tape.cols(xw, 2 * hd, hd);
        let h_zr = tape.matmul(h, wzr);
        let zr = tape.add(x_zr, h_zr);
        let zr = tape.sigmoid(zr);
        let z = tape.cols(zr, 0, hd);
        let r = tape.cols(zr, hd, hd);
        let rh = tape.mul(r, h);
        let rh = tape.matmul(rh, wh);
        let cand = tape.add(x_h, rh);
        let cand = tape.tanh(cand);
        let delta = tape.sub(cand, h);
        let step = tape.mul(z, delta);
        tape.add(h, step)
    }

    fn input_projection(tape: &mut Tape, ids: GruIds, x: Var) -> Var {
        let wx = tape.param(ids.wx);
        let bx = tape.param(ids.bx);
        let xw = tape.matmul(x, wx);
        tape.add_row(xw, bx)
    }

    /// Runs a GRU over the rows of `x`, returning one state row per input row
    /// in input order.
    fn gru_seq(tape: &mut Tape, ids: GruIds, x: Var, reverse: bool) -> Var {
        let n = tape.value(x).rows;
        let xw = Self::input_projection(tape, ids, x);
        let mut h = tape.constant(Mat::zeros(1, ids.hidden));
        let mut states = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let row = tape.row(xw, t);
            h = Self::gru_step(tape, ids, row, h);
            states[t] = h;
        }
        tape.vcat(&states)
    }

    fn bigru(tape: &mut Tape, fwd: GruIds, bwd: GruIds, x: Var) -> Var {
        let f = Self::gru_seq(tape, fwd, x, false);
        let b = Self::gru_seq(tape, bwd, x, true);
        tape.hcat(&[f, b])
    }

    /// Lexicon features for passage and question.
    pub fn lexicon_encode(&self, tape: &mut Tape, sample: &Sample, rng: &mut DropoutRng) -> Result<Lexicon> {
        if sample.passage.is_empty() || sample.question.is_empty() {
            return Err(Error::Shape(format!(
                "sample '{}' has an empty passage or question",
                sample.id
            )));
        }
        let ep = self.embed(tape, &sample.passage);
        let eq = self.embed(tape, &sample.question);
        let emp = tape.constant(exact_match_features(&sample.passage, &sample.question));
        let emq = tape.constant(exact_match_features(&sample.question, &sample.passage));

        let w1 = tape.param(self.ids.align_w1);
        let gp = tape.matmul(ep, w1);
        let gp = tape.relu(gp);
        let gq = tape.matmul(eq, w1);
        let gq = tape.relu(gq);
        let sim_pq = tape.matmul_nt(gp, gq);
        let passage_align = tape.softmax_rows(sim_pq);
        let align_p = tape.matmul(passage_align, gq);
        let sim_qp = tape.transpose(sim_pq);
        let question_align = tape.softmax_rows(sim_qp);
        let align_q = tape.matmul(question_align, gp);

        let fp = tape.hcat(&[ep, emp, align_p]);
        let fq = tape.hcat(&[eq, emq, align_q]);
        let passage = self.reduce(tape, fp, rng);
        let question = self.reduce(tape, fq, rng);
        Ok(Lexicon {
            passage,
            question,
            passage_align,
            question_align,
        })
    }

    fn embed(&self, tape: &mut Tape, tokens: &[Token]) -> Var {
        let ids: Vec<Option<usize>> = tokens.iter().map(|t| self.vocab.id(&t.lower)).collect();
        let e = self.config.embed_dim;
        tape.gather(self.ids.embedding, &ids, |i| self.vocab.init_vector(&tokens[i].lower, e))
    }

    fn reduce(&self, tape: &mut Tape, features: Var, rng: &mut DropoutRng) -> Var {
        let w = tape.param(self.ids.reduce_w);
        let b = tape.param(self.ids.reduce_b);
        let x = tape.matmul(features, w);
        let x = tape.add_row(x, b);
        let x = tape.relu(x);
        let x = self.highway(tape, self.ids.lex_highway, x);
        self.dropout(tape, x, rng)
    }

    /// Contextual encoding of one sequence of lexicon features.
    pub fn contextual_encode(&self, tape: &mut Tape, features: Var) -> Var {
        let mut x = features;
        for &(fwd, bwd, hw) in &self.ids.encoder {
            let h = Self::bigru(tape, fwd, bwd, x);
            x = self.highway(tape, hw, h);
        }
        x
    }

    /// Scaled dot-product attention weights of `a` over `b` through `proj`.
    fn attention(tape: &mut Tape, proj: usize, a: Var, b: Var, drop_diag: bool) -> Var {
        let w = tape.param(proj);
        let scale = 1.0 / (tape.value(w).cols as f64).sqrt();
        let pa = tape.matmul(a, w);
        let pb = if a == b { pa } else { tape.matmul(b, w) };
        let s = tape.matmul_nt(pa, pb);
        let s = tape.scale(s, scale);
        if drop_diag {
            tape.softmax_rows_drop_diag(s)
        } else {
            tape.softmax_rows(s)
        }
    }

    /// Cross attention, self attention and the memory.
    pub fn attention_fuse(&self, tape: &mut Tape, hq: Var, hp: Var, rng: &mut DropoutRng) -> Fusion {
        let cross_attention = Self::attention(tape, self.ids.att_proj, hp, hq, false);
        let c = self.dropout(tape, cross_attention, rng);
        let attended = tape.matmul(c, hq);
        let u = tape.hcat(&[hp, attended]);
        let self_attention = Self::attention(tape, self.ids.self_proj, u, u, true);
        let u_hat = tape.matmul(self_attention, u);
        let x = tape.hcat(&[u, u_hat]);
        let x = self.dropout(tape, x, rng);
        let m = Self::bigru(tape, self.ids.mem_fwd, self.ids.mem_bwd, x);
        let memory = self.highway(tape, self.ids.mem_highway, m);
        Fusion {
            cross_attention,
            self_attention,
            memory,
        }
    }

    fn initial_state(&self, tape: &mut Tape, hq: Var) -> Var {
        let w4 = tape.param(self.ids.w4);
        let scores = tape.matmul_nt(w4, hq);
        let alpha = tape.softmax_rows(scores);
        let summary = tape.matmul(alpha, hq);
        self.highway(tape, self.ids.s0_highway, summary)
    }

    /// Multi-step span answer module. With `rng`, steps are dropped at the
    /// configured rate (step 0 is kept when every step would be dropped).
    pub fn answer_span(&self, tape: &mut Tape, hq: Var, memory: Var, rng: &mut DropoutRng) -> SpanHead {
        let steps = self.config.steps;
        let s0 = self.initial_state(tape, hq);
        let w5 = tape.param(self.ids.w5);
        let w6 = tape.param(self.ids.w6);
        let w7 = tape.param(self.ids.w7);
        let mut step_begin = Vec::with_capacity(steps);
        let mut step_end = Vec::with_capacity(steps);
        let mut s = s0;
        for t in 0..steps {
            if t > 0 {
                let q = tape.matmul(s, w5);
                let scores = tape.matmul_nt(q, memory);
                let beta = tape.softmax_rows(scores);
                let x = tape.matmul(beta, memory);
                let xw = Self::input_projection(tape, self.ids.ans_gru, x);
                s = Self::gru_step(tape, self.ids.ans_gru, xw, s);
            }
            let b = tape.matmul(s, w6);
            let b = tape.matmul_nt(b, memory);
            step_begin.push(tape.softmax_rows(b));
            let e = tape.matmul(s, w7);
            let e = tape.matmul_nt(e, memory);
            step_end.push(tape.softmax_rows(e));
        }
        let mut retained = vec![true; steps];
        if let Some(rng) = rng.as_deref_mut() {
            let rate = self.config.step_dropout;
            if rate > 0.0 {
                for keep in &mut retained {
                    *keep = rng.gen::<f64>() >= rate;
                }
                if !retained.iter().any(|&k| k) {
                    retained[0] = true;
                }
            }
        }
        let kept_b: Vec<Var> = (0..steps).filter(|&t| retained[t]).map(|t| step_begin[t]).collect();
        let kept_e: Vec<Var> = (0..steps).filter(|&t| retained[t]).map(|t| step_end[t]).collect();
        let inv = 1.0 / kept_b.len() as f64;
        let begin = tape.sum(&kept_b);
        let begin = tape.scale(begin, inv);
        let end = tape.sum(&kept_e);
        let end = tape.scale(end, inv);
        SpanHead {
            s0,
            step_begin,
            step_end,
            retained,
            begin,
            end,
        }
    }

    /// Attention-sum answer module over candidate occurrence lists.
    pub fn answer_cloze(&self, tape: &mut Tape, hq: Var, memory: Var, candidates: &[Vec<usize>]) -> ClozeHead {
        let s0 = self.initial_state(tape, hq);
        let scores = tape.matmul_nt(s0, memory);
        let attention = tape.softmax_rows(scores);
        let n = tape.value(memory).rows;
        let indicator = tape.constant(candidate_indicator(n, candidates));
        let mass = tape.matmul(attention, indicator);
        let probs = tape.row_normalize(mass);
        ClozeHead { s0, attention, probs }
    }

    /// Full forward pass. `params` may be the live parameters or any tensor set
    /// with the same layout (e.g. moving averages).
    pub fn forward<'p>(&self, params: &'p [Mat], sample: &Sample, mut rng: DropoutRng) -> Result<ForwardTrace<'p>> {
        self.check_params(params)?;
        let mut tape = Tape::new(params);
        let lexicon = self.lexicon_encode(&mut tape, sample, &mut rng)?;
        let passage_enc = self.contextual_encode(&mut tape, lexicon.passage);
        let question_enc = self.contextual_encode(&mut tape, lexicon.question);
        let fusion = self.attention_fuse(&mut tape, question_enc, passage_enc, &mut rng);
        let head = match &sample.answer {
            Answer::Span { .. } => Head::Span(self.answer_span(&mut tape, question_enc, fusion.memory, &mut rng)),
            Answer::Cloze { candidates, .. } => {
                Head::Cloze(self.answer_cloze(&mut tape, question_enc, fusion.memory, candidates))
            }
        };
        Ok(ForwardTrace {
            tape,
            lexicon,
            question_enc,
            passage_enc,
            fusion,
            head,
            loss: None,
        })
    }

    /// Adds the negative log-likelihood of the gold answer to the trace.
    pub fn sample_loss(&self, trace: &mut ForwardTrace, sample: &Sample) -> Result<f64> {
        let loss = match (&trace.head, &sample.answer) {
            (Head::Span(h), Answer::Span { begin, end }) => {
                let n = trace.value(h.begin).cols;
                if *begin >= n || *end >= n {
                    return Err(Error::data(
                        &sample.id,
                        format!("answer ({begin}, {end}) outside a passage of {n} tokens"),
                    ));
                }
                let (hb, he) = (h.begin, h.end);
                let lb = trace.tape.neg_log_pick(hb, *begin, PROB_FLOOR);
                let le = trace.tape.neg_log_pick(he, *end, PROB_FLOOR);
                trace.tape.sum(&[lb, le])
            }
            (Head::Cloze(h), Answer::Cloze { gold, .. }) => {
                let probs = h.probs;
                if *gold >= trace.value(probs).cols {
                    return Err(Error::data(&sample.id, format!("gold candidate {gold} out of range")));
                }
                trace.tape.neg_log_pick(probs, *gold, PROB_FLOOR)
            }
            _ => return Err(Error::data(&sample.id, "answer type does not match the forward pass")),
        };
        trace.loss = Some(loss);
        Ok(trace.value(loss).data[0])
    }

    /// Gradients of `weight · loss`. A zero weight yields exactly zero
    /// gradients without a backward pass.
    pub fn gradients(&self, trace: &ForwardTrace, weight: f64) -> Result<SampleGrads> {
        let loss = trace
            .loss
            .ok_or_else(|| Error::Training("gradients requested before the loss".into()))?;
        if weight == 0.0 {
            return Ok(SampleGrads {
                dense: vec![None; self.params.len()],
                rows: Vec::new(),
            });
        }
        let grads = trace.tape.backward(loss, weight);
        if let Some(p) = grads.first_non_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter '{}'",
                self.params.name(p)
            )));
        }
        Ok(grads)
    }

    /// Forward, loss and weighted gradients in one call.
    pub fn loss_and_gradients(
        &self,
        params: &[Mat],
        sample: &Sample,
        weight: f64,
        rng: DropoutRng,
    ) -> Result<(f64, SampleGrads)> {
        let mut trace = self.forward(params, sample, rng)?;
        let loss = self.sample_loss(&mut trace, sample)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss for sample '{}'", sample.id)));
        }
        let grads = self.gradients(&trace, weight)?;
        Ok((loss, grads))
    }

    /// Evaluation-mode prediction.
    pub fn predict(&self, params: &[Mat], sample: &Sample) -> Result<Prediction> {
        let trace = self.forward(params, sample, None)?;
        Ok(match &trace.head {
            Head::Span(_) => {
                let (b, e) = trace.span_probs().expect("span head");
                let (begin, end) = decode_span(b, e, self.config.max_span_len);
                Prediction::Span { begin, end }
            }
            Head::Cloze(h) => Prediction::Cloze(trace.value(h.probs).argmax_row(0)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    Span { begin: usize, end: usize },
    Cloze(usize),
}

/// Argmax begin, then argmax end in `begin..begin + max_len`. Ties go to the
/// earlier position.
pub fn decode_span(begin: &[f64], end: &[f64], max_len: usize) -> (usize, usize) {
    let b = argmax(begin);
    let hi = (b + max_len.max(1)).min(end.len());
    let e = b + argmax(&end[b..hi]);
    (b, e)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// `len(tokens) × 3` indicators of surface, lower-case and lemma membership in
/// `other`.
pub fn exact_match_features(tokens: &[Token], other: &[Token]) -> Mat {
    let surface: HashSet<&str> = other.iter().map(|t| t.surface.as_str()).collect();
    let lower: HashSet<&str> = other.iter().map(|t| t.lower.as_str()).collect();
    let lemma: HashSet<&str> = other.iter().map(|t| t.lemma.as_str()).collect();
    let mut out = Mat::zeros(tokens.len(), 3);
    for (i, t) in tokens.iter().enumerate() {
        let flags = [
            surface.contains(t.surface.as_str()),
            lower.contains(t.lower.as_str()),
            lemma.contains(t.lemma.as_str()),
        ];
        for (j, f) in flags.into_iter().enumerate() {
            out.set(i, j, f64::from(u8::from(f)));
        }
    }
    out
}

/// `n × K` matrix with a one where candidate `k` occurs at position `i`.
pub fn candidate_indicator(n: usize, candidates: &[Vec<usize>]) -> Mat {
    let mut m = Mat::zeros(n, candidates.len());
    for (k, occ) in candidates.iter().enumerate() {
        for &i in occ {
            m.set(i, k, 1.0);
        }
    }
    m
}
