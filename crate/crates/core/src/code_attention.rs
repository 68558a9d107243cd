//! Key-query attention of code synonyms over note states, synonym max
//! pooling, prediction weights and direct probabilities.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Var};
use crate::Dropout;

/// Affine layer `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w: store.insert_glorot(format!("{name}.w"), inputs, outputs, rng)?,
            b: store.insert_full(format!("{name}.b"), 1, outputs, T::zero())?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Single-head scaled dot-product attention shared by all codes.
#[derive(Clone, Debug)]
pub struct CodeAttention {
    pub dim: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

/// Output of [`CodeAttention::contextualize`].
#[derive(Clone, Copy, Debug)]
pub struct Contextualized {
    /// `R×e`, one row per query.
    pub rows: Var,
    /// `R×D` attention weights.
    pub weights: Var,
}

impl CodeAttention {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        width: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            dim,
            wq: store.insert_glorot("attention.wq", width, dim, rng)?,
            wk: store.insert_glorot("attention.wk", width, dim, rng)?,
            wv: store.insert_glorot("attention.wv", width, dim, rng)?,
            wo: store.insert_glorot("attention.wo", dim, width, rng)?,
        })
    }

    /// Attends from each query row (a synonym embedding) over the note
    /// states and projects the result back to width `e`.
    pub fn contextualize<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        queries: Var,
        note: Var,
        dropout: Option<&mut Dropout>,
    ) -> Result<Contextualized> {
        let wq = tape.param(self.wq);
        let wk = tape.param(self.wk);
        let wv = tape.param(self.wv);
        let wo = tape.param(self.wo);
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(note, wk)?;
        let v = tape.matmul(note, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, T::one() / T::count(self.dim).sqrt())?;
        let weights = tape.softmax_rows(scores)?;
        let mut ctx = tape.matmul(weights, v)?;
        if let Some(d) = dropout {
            ctx = tape.dropout(ctx, d.rate, &mut d.rng)?;
        }
        let rows = tape.matmul(ctx, wo)?;
        Ok(Contextualized { rows, weights })
    }
}

/// Column-wise max over each block of `m` synonym rows: `(n·m)×e -> n×e`.
pub fn pool_code<T: Scalar>(tape: &mut Tape<'_, T>, rows: Var, m: usize) -> Result<Var> {
    tape.group_max(rows, m)
}

/// Averages each block of `m` synonym embeddings and applies `fc`. Used for
/// both the direct weights and the relation weights.
pub fn prediction_weights<T: Scalar>(
    tape: &mut Tape<'_, T>,
    fc: &Linear,
    synonyms: Var,
    m: usize,
) -> Result<Var> {
    let mean = tape.group_mean(synonyms, m)?;
    fc.forward(tape, mean)
}

/// Row-wise `σ(w_i · c_i)`: `n×e, n×e -> n×1`.
pub fn dot_probability<T: Scalar>(tape: &mut Tape<'_, T>, weights: Var, codes: Var) -> Result<Var> {
    let logits = tape.row_dot(weights, codes)?;
    tape.sigmoid(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{stream_rng, Array, Stream};
    use rand::Rng;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array<f64> {
        Array::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn setup(e: usize, da: usize) -> (ParamStore<f64>, CodeAttention) {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(11, Stream::Init);
        let att = CodeAttention::init(&mut store, e, da, &mut rng).unwrap();
        (store, att)
    }

    #[test]
    fn singleton_note_gets_full_weight() {
        let (store, att) = setup(6, 4);
        let mut rng = stream_rng(1, Stream::Data);
        let mut tape = Tape::new(&store);
        let q = tape.constant(rand_matrix(3, 6, &mut rng)).unwrap();
        let n = tape.constant(rand_matrix(1, 6, &mut rng)).unwrap();
        let out = att.contextualize(&mut tape, q, n, None).unwrap();
        assert!(tape.value(out.weights).data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn identical_states_make_output_length_free() {
        let (store, att) = setup(6, 4);
        let mut rng = stream_rng(2, Stream::Data);
        let row = rand_matrix(1, 6, &mut rng);
        let mut tape = Tape::new(&store);
        let q = tape.constant(rand_matrix(2, 6, &mut rng)).unwrap();
        let short = tape.constant(row.clone()).unwrap();
        let long = tape
            .constant(Array::from_fn(9, 6, |_, c| row.get(0, c)))
            .unwrap();
        let a = att.contextualize(&mut tape, q, short, None).unwrap();
        let b = att.contextualize(&mut tape, q, long, None).unwrap();
        assert!(tape.value(a.rows).max_abs_diff(tape.value(b.rows)) < 1e-12);
    }

    #[test]
    fn attention_matches_direct_recomputation() {
        let (store, att) = setup(5, 3);
        let mut rng = stream_rng(3, Stream::Data);
        let qs = rand_matrix(4, 5, &mut rng);
        let ns = rand_matrix(7, 5, &mut rng);
        let mut tape = Tape::new(&store);
        let q = tape.constant(qs.clone()).unwrap();
        let n = tape.constant(ns.clone()).unwrap();
        let out = att.contextualize(&mut tape, q, n, None).unwrap();

        let (wq, wk, wv, wo) = (
            store.get(att.wq),
            store.get(att.wk),
            store.get(att.wv),
            store.get(att.wo),
        );
        let proj = |x: &Array<f64>, w: &Array<f64>, r: usize| -> Vec<f64> {
            (0..w.cols())
                .map(|c| (0..x.cols()).map(|k| x.get(r, k) * w.get(k, c)).sum())
                .collect()
        };
        for r in 0..4 {
            let qr = proj(&qs, wq, r);
            let logits: Vec<f64> = (0..7)
                .map(|t| {
                    let kt = proj(&ns, wk, t);
                    qr.iter().zip(&kt).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
            let got = tape.value(out.weights).row(r);
            for t in 0..7 {
                assert!((got[t] - w[t]).abs() < 1e-12);
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut ctx = [0.0; 3];
            for t in 0..7 {
                let vt = proj(&ns, wv, t);
                for c in 0..3 {
                    ctx[c] += w[t] * vt[c];
                }
            }
            for c in 0..5 {
                let expect: f64 = (0..3).map(|k| ctx[k] * wo.get(k, c)).sum();
                assert!((tape.value(out.rows).get(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_is_columnwise_max() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let r = Array::matrix(1, 3, vec![1.5, -2.0, 0.0]).unwrap();
        let one = tape.constant(r.clone()).unwrap();
        let pooled = pool_code(&mut tape, one, 1).unwrap();
        assert_eq!(tape.value(pooled), &r);
        let both = tape
            .constant(Array::matrix(2, 3, vec![1.5, -2.0, 0.0, -1.5, 2.0, -0.0]).unwrap())
            .unwrap();
        let pooled = pool_code(&mut tape, both, 2).unwrap();
        assert_eq!(tape.value(pooled).data(), &[1.5, 2.0, 0.0]);

        let mut rng = stream_rng(4, Stream::Data);
        let x = rand_matrix(3 * 8, 5, &mut rng);
        let v = tape.constant(x.clone()).unwrap();
        let pooled = pool_code(&mut tape, v, 8).unwrap();
        for b in 0..3 {
            for c in 0..5 {
                let mut best = f64::NEG_INFINITY;
                for r in b * 8..(b + 1) * 8 {
                    best = best.max(x.get(r, c));
                }
                assert_eq!(tape.value(pooled).get(b, c), best);
            }
        }
    }

    #[test]
    fn prediction_weights_average_then_affine() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(5, Stream::Init);
        let fc = Linear::init(&mut store, "fc", 4, 4, &mut rng).unwrap();
        store.get_mut(fc.b).data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
        let syn = rand_matrix(6, 4, &mut rng);
        let mut tape = Tape::new(&store);
        let s = tape.constant(syn.clone()).unwrap();
        let alpha = prediction_weights(&mut tape, &fc, s, 3).unwrap();
        let (w, b) = (store.get(fc.w), store.get(fc.b));
        for i in 0..2 {
            for c in 0..4 {
                let expect: f64 = (0..4)
                    .map(|k| (0..3).map(|j| syn.get(i * 3 + j, k)).sum::<f64>() / 3.0 * w.get(k, c))
                    .sum::<f64>()
                    + b.get(0, c);
                assert!((tape.value(alpha).get(i, c) - expect).abs() < 1e-12);
            }
        }

        let mut zeroed = store.clone();
        zeroed.get_mut(fc.w).data_mut().fill(0.0);
        zeroed.get_mut(fc.b).data_mut().fill(0.0);
        let mut tape = Tape::new(&zeroed);
        let s = tape.constant(syn).unwrap();
        let alpha = prediction_weights(&mut tape, &fc, s, 3).unwrap();
        assert!(tape.value(alpha).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn direct_probability_is_sigmoid_of_dot() {
        let store = ParamStore::<f64>::new();
        let mut rng = stream_rng(6, Stream::Data);
        let a = rand_matrix(5, 7, &mut rng);
        let c = rand_matrix(5, 7, &mut rng);
        let mut tape = Tape::new(&store);
        let av = tape.constant(a.clone()).unwrap();
        let cv = tape.constant(c.clone()).unwrap();
        let p = dot_probability(&mut tape, av, cv).unwrap();
        for i in 0..5 {
            let dot: f64 = a.row(i).iter().zip(c.row(i)).map(|(x, y)| x * y).sum();
            let expect = 1.0 / (1.0 + (-dot).exp());
            assert!((tape.value(p).get(i, 0) - expect).abs() < 1e-15);
        }
        let zero = tape.constant(Array::zeros(5, 7)).unwrap();
        let p = dot_probability(&mut tape, zero, cv).unwrap();
        assert!(tape.value(p).data().iter().all(|&x| x == 0.5));
    }
}
