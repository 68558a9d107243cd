//! Token vocabulary and the shared recurrent text encoder used for both
//! notes and code synonyms.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, ParamId, ParamStore, Scalar, Tape, Var};
use crate::Dropout;

pub const UNK: usize = 0;
pub const PAD: usize = 1;
const UNK_TOKEN: &str = "<unk>";
const PAD_TOKEN: &str = "<pad>";

/// Whitespace tokenisation with lowercasing.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token to index map. Index 0 is UNK and index 1 is PAD.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from(Vec::new())
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let mut v = Self {
            tokens: vec![UNK_TOKEN.to_string(), PAD_TOKEN.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(UNK_TOKEN.to_string(), UNK);
        v.index.insert(PAD_TOKEN.to_string(), PAD);
        for t in tokens {
            v.add(&t);
        }
        v
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens.into_iter().skip(2).collect()
    }
}

impl Vocabulary {
    /// Builds from tokens in order of first appearance.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::default();
        for t in tokens {
            v.add(t);
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t.as_ref())).collect()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    /// Per-direction recurrent width.
    pub hidden_dim: usize,
    pub bidirectional: bool,
    /// Width `e` of every encoder output state.
    pub output_dim: usize,
    pub max_note_len: usize,
    pub max_synonym_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 100,
            hidden_dim: 512,
            bidirectional: true,
            output_dim: 512,
            max_note_len: 4000,
            max_synonym_len: 32,
        }
    }
}

#[derive(Clone, Debug)]
struct Direction {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

/// Single-layer (optionally bidirectional) LSTM with a projection to `e`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embedding: ParamId,
    forward: Direction,
    backward: Option<Direction>,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl Encoder {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        config: EncoderConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (e, h) = (config.embed_dim, config.hidden_dim);
        if e == 0 || h == 0 || config.output_dim == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        let embedding = store.insert_uniform("encoder.embedding", vocab_size, e, 3f64.sqrt(), rng)?;
        let bound = 1.0 / (h as f64).sqrt();
        let mut direction = |name: &str, store: &mut ParamStore<T>| -> Result<Direction> {
            Ok(Direction {
                wx: store.insert_uniform(format!("encoder.{name}.wx"), e, 4 * h, bound, rng)?,
                wh: store.insert_uniform(format!("encoder.{name}.wh"), h, 4 * h, bound, rng)?,
                b: store.insert_uniform(format!("encoder.{name}.b"), 1, 4 * h, bound, rng)?,
            })
        };
        let forward = direction("fwd", store)?;
        let backward = if config.bidirectional {
            Some(direction("bwd", store)?)
        } else {
            None
        };
        let states = if config.bidirectional { 2 * h } else { h };
        let proj_w = store.insert_glorot("encoder.proj.w", states, config.output_dim, rng)?;
        let proj_b = store.insert_full("encoder.proj.b", 1, config.output_dim, T::zero())?;
        Ok(Self {
            config,
            embedding,
            forward,
            backward,
            proj_w,
            proj_b,
        })
    }

    /// Overwrites embedding rows from `token v1 .. v_dim` lines; returns the
    /// number of vocabulary tokens that were found.
    pub fn load_embeddings<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        vocab: &Vocabulary,
        text: &str,
    ) -> Result<usize> {
        let dim = self.config.embed_dim;
        let table = store.get_mut(self.embedding);
        let mut hits = 0;
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: e.to_string(),
                })?;
            if values.len() != dim {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected {dim} values, found {}", values.len()),
                });
            }
            let idx = vocab.lookup(token);
            if idx == UNK && token != UNK_TOKEN {
                continue;
            }
            for (c, v) in values.into_iter().enumerate() {
                table.data_mut()[idx * dim + c] = T::lit(v);
            }
            hits += 1;
        }
        Ok(hits)
    }

    /// Runs the encoder over a batch of token-id sequences of possibly
    /// different lengths. Returns a `(T*B)×e` matrix whose row `t*B + b` is
    /// the state of sequence `b` at position `t` (`T` is the longest length),
    /// together with `T`. Rows past the end of a sequence are padding.
    fn run_batch<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        seqs: &[&[usize]],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(Var, usize)> {
        let b = seqs.len();
        let t_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if b == 0 || t_max == 0 || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("token sequence"));
        }
        let ids: Vec<usize> = (0..t_max)
            .flat_map(|t| seqs.iter().map(move |s| s.get(t).copied().unwrap_or(PAD)))
            .collect();
        let table = tape.param(self.embedding);
        let mut x = tape.gather_rows(table, &ids)?;
        if let Some(d) = dropout.as_mut() {
            x = tape.dropout(x, d.rate, &mut d.rng)?;
        }
        let masks: Vec<Vec<bool>> = (0..t_max)
            .map(|t| seqs.iter().map(|s| t < s.len()).collect())
            .collect();

        let fwd = self.run_direction(tape, &self.forward, x, b, t_max, &masks, false)?;
        let states = match &self.backward {
            Some(dir) => {
                let bwd = self.run_direction(tape, dir, x, b, t_max, &masks, true)?;
                let per_step: Vec<Var> = fwd
                    .iter()
                    .zip(&bwd)
                    .map(|(&f, &r)| tape.concat_cols(&[f, r]))
                    .collect::<Result<_>>()?;
                tape.concat_rows(&per_step)?
            }
            None => tape.concat_rows(&fwd)?,
        };
        let w = tape.param(self.proj_w);
        let bias = tape.param(self.proj_b);
        let out = tape.matmul(states, w)?;
        Ok((tape.add_row(out, bias)?, t_max))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_direction<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        dir: &Direction,
        x: Var,
        b: usize,
        t_max: usize,
        masks: &[Vec<bool>],
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let h = self.config.hidden_dim;
        let wx = tape.param(dir.wx);
        let wh = tape.param(dir.wh);
        let bias = tape.param(dir.b);
        let xw = tape.matmul(x, wx)?;
        let xw = tape.add_row(xw, bias)?;
        let zeros = tape.constant(Array::zeros(b, h))?;
        let (mut h_prev, mut c_prev) = (zeros, zeros);
        let mut first = true;
        let mut outputs = vec![zeros; t_max];
        let order: Vec<usize> = if reverse {
            (0..t_max).rev().collect()
        } else {
            (0..t_max).collect()
        };
        for t in order {
            let rows: Vec<usize> = (t * b..(t + 1) * b).collect();
            let mut z = tape.gather_rows(xw, &rows)?;
            if !first {
                let hw = tape.matmul(h_prev, wh)?;
                z = tape.add(z, hw)?;
            }
            let hc = tape.lstm_cell(z, c_prev)?;
            let mut h_new = tape.slice_cols(hc, 0, h)?;
            let mut c_new = tape.slice_cols(hc, h, 2 * h)?;
            let mask = &masks[t];
            if mask.iter().any(|m| !m) {
                h_new = tape.blend_rows(h_new, h_prev, mask)?;
                c_new = tape.blend_rows(c_new, c_prev, mask)?;
            }
            outputs[t] = h_new;
            h_prev = h_new;
            c_prev = c_new;
            first = first && mask.iter().all(|m| !m);
        }
        Ok(outputs)
    }

    /// Per-position states `D×e` for one note. Tokens beyond
    /// `max_note_len` are dropped.
    pub fn encode_note<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: &[usize],
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Empty("note"));
        }
        let tokens = &tokens[..tokens.len().min(self.config.max_note_len)];
        Ok(self.run_batch(tape, &[tokens], dropout)?.0)
    }

    /// Encodes each sequence and average-pools its states: `B×e`.
    pub fn encode_synonyms<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        seqs: &[&[usize]],
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("synonym"));
        }
        let max_len = self.config.max_synonym_len;
        let trimmed: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len().min(max_len)]).collect();
        let (states, t_max) = self.run_batch(tape, &trimmed, dropout)?;
        let b = trimmed.len();
        let mut pool = Array::zeros(b, t_max * b);
        for (j, s) in trimmed.iter().enumerate() {
            let w = T::one() / T::count(s.len());
            for t in 0..s.len() {
                pool.data_mut()[j * t_max * b + t * b + j] = w;
            }
        }
        let pool = tape.constant(pool)?;
        tape.matmul(pool, states)
    }

    /// Single synonym embedding `1×e`.
    pub fn encode_synonym<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: &[usize],
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        self.encode_synonyms(tape, &[tokens], dropout)
    }
}
