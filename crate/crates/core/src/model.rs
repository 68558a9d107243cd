//! The full per-note pipeline: note encoding, contextual code embeddings,
//! direct probabilities, top-K relation graph, relation probabilities and
//! the gated mix.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::code_attention::{dot_probability, pool_code, prediction_weights, CodeAttention, Linear};
use crate::code_space::CodeSpace;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::gating_loss::{aggregate, gate_value, substitute};
use crate::numerics::{stream_rng, Array, ParamStore, Scalar, Stream, Tape, Var};
use crate::relation_graph::{select_top_k, GraphTransformer, RelationGraph, SelectionResult};
use crate::Dropout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention_dim: usize,
    pub graph_dim: usize,
    /// Width `e_r` of an edge-type embedding.
    pub edge_dim: usize,
    pub ffn_dim: usize,
    pub graph_layers: usize,
    /// Lower nodes per note.
    pub top_k: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            attention_dim: 256,
            graph_dim: 256,
            edge_dim: 64,
            ffn_dim: 1024,
            graph_layers: 1,
            top_k: 300,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        self.encoder.output_dim
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// Output the direct probabilities only.
    pub no_relation: bool,
    /// Initialize graph nodes from pooled synonym embeddings instead of
    /// note-contextualized ones.
    pub no_context: bool,
    /// Output relation probabilities on the selection, bypassing the gate.
    pub no_saa: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum GateMode {
    #[default]
    Learned,
    /// Every selected code uses this gate value.
    Fixed(f64),
}

pub struct ForwardOptions<'a> {
    pub ablations: Ablations,
    pub gate: GateMode,
    pub top_k: usize,
    pub dropout: Option<&'a mut Dropout>,
}

impl ForwardOptions<'_> {
    pub fn new(top_k: usize) -> Self {
        Self {
            ablations: Ablations::default(),
            gate: GateMode::Learned,
            top_k,
            dropout: None,
        }
    }

    pub fn with_ablations(mut self, ablations: Ablations) -> Self {
        self.ablations = ablations;
        self
    }
}

/// Encoded synonyms of a set of codes (and optionally of all majors) living
/// on one tape, shared by every note forwarded on that tape.
#[derive(Clone, Debug)]
pub struct SynonymBank {
    m: usize,
    row_of: HashMap<usize, usize>,
    codes: Vec<usize>,
    synonyms: Var,
    majors: Option<Var>,
}

impl SynonymBank {
    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    /// Row indices into the synonym matrix for the given codes.
    fn rows_for(&self, codes: &[usize]) -> Result<Vec<usize>> {
        let mut rows = Vec::with_capacity(codes.len() * self.m);
        for &c in codes {
            let r = *self
                .row_of
                .get(&c)
                .ok_or_else(|| Error::UnknownCode(format!("code index {c} not in synonym bank")))?;
            rows.extend(r * self.m..(r + 1) * self.m);
        }
        Ok(rows)
    }

    fn synonyms_for<T: Scalar>(&self, tape: &mut Tape<'_, T>, codes: &[usize]) -> Result<Var> {
        if codes == self.codes.as_slice() {
            return Ok(self.synonyms);
        }
        let rows = self.rows_for(codes)?;
        tape.gather_rows(self.synonyms, &rows)
    }
}

/// Plain values of a [`SynonymBank`], reusable across tapes.
#[derive(Clone, Debug)]
pub struct BankValues<T> {
    pub codes: Vec<usize>,
    pub synonyms: Array<T>,
    pub majors: Array<T>,
}

/// Intermediate results of one note's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Target-code indices evaluated, in output order.
    pub scope: Vec<usize>,
    /// `n×1`.
    pub p_direct: Var,
    /// `n×1`.
    pub p_final: Var,
    /// `K×1`, aligned with `selection.selected`.
    pub p_relation: Option<Var>,
    /// `n×1`, zero outside the selection.
    pub gamma: Option<Var>,
    /// Positions into `scope`.
    pub selection: Option<SelectionResult>,
    pub graph: Option<RelationGraph>,
    /// `K×A` per graph layer.
    pub graph_attention: Vec<Var>,
    /// `(n·M)×D` synonym attention over the note.
    pub code_attention: Var,
    /// Per-code probability evaluations recorded for a backward pass.
    pub recorded_evals: usize,
}

/// Parameter layout of the model. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct CoRelation {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub attention: CodeAttention,
    pub fc_alpha: Linear,
    pub fc_beta: Linear,
    pub fc_gamma: Linear,
    pub graph: GraphTransformer,
}

impl CoRelation {
    pub fn init<T: Scalar>(
        config: ModelConfig,
        vocab_size: usize,
        bucket_count: usize,
        seed: u64,
    ) -> Result<(Self, ParamStore<T>)> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", config.dropout)));
        }
        if config.top_k == 0 || config.graph_layers == 0 {
            return Err(Error::Config("top_k and graph_layers must be positive".into()));
        }
        let mut rng = stream_rng(seed, Stream::Init);
        let mut store = ParamStore::new();
        let e = config.width();
        let encoder = Encoder::init(&mut store, config.encoder.clone(), vocab_size, &mut rng)?;
        let attention = CodeAttention::init(&mut store, e, config.attention_dim, &mut rng)?;
        let fc_alpha = Linear::init(&mut store, "fc_alpha", e, e, &mut rng)?;
        let fc_beta = Linear::init(&mut store, "fc_beta", e, e, &mut rng)?;
        let fc_gamma = Linear::init(&mut store, "fc_gamma", e, 1, &mut rng)?;
        let graph = GraphTransformer::init(
            &mut store,
            e,
            config.graph_dim,
            config.edge_dim,
            config.ffn_dim,
            config.graph_layers,
            bucket_count,
            &mut rng,
        )?;
        let net = Self {
            config,
            encoder,
            attention,
            fc_alpha,
            fc_beta,
            fc_gamma,
            graph,
        };
        Ok((net, store))
    }

    /// Encodes the synonyms of `codes` (and of every major when
    /// `with_majors`) on `tape`.
    pub fn encode_bank<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        cs: &CodeSpace,
        codes: &[usize],
        with_majors: bool,
    ) -> Result<SynonymBank> {
        let m = cs.m();
        let seqs: Vec<&[usize]> = codes
            .iter()
            .flat_map(|&i| cs.synonyms(i).iter().map(Vec::as_slice))
            .collect();
        let synonyms = self.encoder.encode_synonyms(tape, &seqs, None)?;
        let majors = if with_majors {
            let seqs: Vec<&[usize]> = (0..cs.num_majors())
                .flat_map(|a| cs.major_synonyms(a).iter().map(Vec::as_slice))
                .collect();
            Some(self.encoder.encode_synonyms(tape, &seqs, None)?)
        } else {
            None
        };
        Ok(SynonymBank {
            m,
            row_of: codes.iter().enumerate().map(|(r, &c)| (c, r)).collect(),
            codes: codes.to_vec(),
            synonyms,
            majors,
        })
    }

    /// Computes synonym encodings for every code and major without
    /// recording gradients.
    pub fn bank_values<T: Scalar>(&self, params: &ParamStore<T>, cs: &CodeSpace) -> Result<BankValues<T>> {
        let mut tape = Tape::inference(params);
        let codes: Vec<usize> = (0..cs.len()).collect();
        let bank = self.encode_bank(&mut tape, cs, &codes, true)?;
        let majors = bank.majors.expect("majors requested");
        Ok(BankValues {
            synonyms: tape.value(bank.synonyms).clone(),
            majors: tape.value(majors).clone(),
            codes,
        })
    }

    /// Places precomputed bank values on `tape` as constants.
    pub fn bank_from_values<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        cs: &CodeSpace,
        values: &BankValues<T>,
    ) -> Result<SynonymBank> {
        Ok(SynonymBank {
            m: cs.m(),
            row_of: values.codes.iter().enumerate().map(|(r, &c)| (c, r)).collect(),
            codes: values.codes.clone(),
            synonyms: tape.constant(values.synonyms.clone())?,
            majors: Some(tape.constant(values.majors.clone())?),
        })
    }

    /// Direct probabilities only, for the codes in `scope`.
    pub fn forward_direct<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        bank: &SynonymBank,
        tokens: &[usize],
        scope: &[usize],
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let mut opts = ForwardOptions::new(1).with_ablations(Ablations {
            no_relation: true,
            ..Ablations::default()
        });
        opts.dropout = dropout;
        Ok(self.forward(tape, None, bank, tokens, scope, opts)?.p_direct)
    }

    /// Runs the pipeline for one note over the target codes in `scope`.
    /// `cs` is required unless the relation path is ablated.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        cs: Option<&CodeSpace>,
        bank: &SynonymBank,
        tokens: &[usize],
        scope: &[usize],
        mut opts: ForwardOptions<'_>,
    ) -> Result<ForwardTrace> {
        if scope.is_empty() {
            return Err(Error::Empty("code scope"));
        }
        let m = bank.m;
        let note = self.encoder.encode_note(tape, tokens, opts.dropout.as_deref_mut())?;
        let syn = bank.synonyms_for(tape, scope)?;
        let ctx = self.attention.contextualize(tape, syn, note, opts.dropout.as_deref_mut())?;
        let c = pool_code(tape, ctx.rows, m)?;
        let alpha = prediction_weights(tape, &self.fc_alpha, syn, m)?;
        let p_direct = dot_probability(tape, alpha, c)?;
        let recorded_evals = if tape.is_recording() { scope.len() } else { 0 };

        let mut trace = ForwardTrace {
            scope: scope.to_vec(),
            p_direct,
            p_final: p_direct,
            p_relation: None,
            gamma: None,
            selection: None,
            graph: None,
            graph_attention: Vec::new(),
            code_attention: ctx.weights,
            recorded_evals,
        };
        if opts.ablations.no_relation {
            return Ok(trace);
        }
        let cs = cs.ok_or_else(|| Error::Config("relation path needs a code space".into()))?;
        let major_syn = bank
            .majors
            .ok_or_else(|| Error::Config("synonym bank lacks major codes".into()))?;

        let direct_values: Vec<T> = tape.value(p_direct).data().to_vec();
        let sel = select_top_k(&direct_values, opts.top_k);
        let lowers: Vec<usize> = sel.selected.iter().map(|&p| scope[p]).collect();
        let graph = RelationGraph::from_code_space(lowers, cs);

        let (lower_init, upper_init) = if opts.ablations.no_context {
            let pooled = pool_code(tape, syn, m)?;
            let lower = tape.gather_rows(pooled, &sel.selected)?;
            (lower, pool_code(tape, major_syn, m)?)
        } else {
            let lower = tape.gather_rows(c, &sel.selected)?;
            let up = self
                .attention
                .contextualize(tape, major_syn, note, opts.dropout.as_deref_mut())?;
            (lower, pool_code(tape, up.rows, m)?)
        };
        let (updated, attn) = self.graph.forward(tape, &graph, lower_init, upper_init)?;

        let sel_rows: Vec<usize> = sel
            .selected
            .iter()
            .flat_map(|&p| p * m..(p + 1) * m)
            .collect();
        let sel_syn = tape.gather_rows(syn, &sel_rows)?;
        let beta = prediction_weights(tape, &self.fc_beta, sel_syn, m)?;
        let p_relation = dot_probability(tape, beta, updated)?;

        let out = if opts.ablations.no_saa {
            substitute(tape, p_direct, p_relation, &sel.selected)?
        } else {
            let gamma = match opts.gate {
                GateMode::Learned => {
                    let a = tape.gather_rows(alpha, &sel.selected)?;
                    let cc = tape.gather_rows(c, &sel.selected)?;
                    gate_value(tape, &self.fc_gamma, a, cc)?
                }
                GateMode::Fixed(v) => tape.constant(Array::full(sel.selected.len(), 1, T::lit(v)))?,
            };
            aggregate(tape, p_direct, p_relation, gamma, &sel.selected)?
        };

        trace.p_final = out.p;
        trace.p_relation = Some(p_relation);
        trace.gamma = Some(out.gamma);
        trace.selection = Some(sel);
        trace.graph = Some(graph);
        trace.graph_attention = attn;
        Ok(trace)
    }
}

/// Values of a forward pass read back from the tape.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub scope: Vec<usize>,
    pub p_direct: Vec<f64>,
    pub p_final: Vec<f64>,
    /// Gates over `scope`; empty without the relation path.
    pub gamma: Vec<f64>,
    /// Positions into `scope`, in selection order.
    pub selected: Vec<usize>,
    /// `K×A` attention of the last graph layer, row-major.
    pub graph_attention: Vec<f64>,
}

impl Prediction {
    pub fn read<T: Scalar>(tape: &Tape<'_, T>, trace: &ForwardTrace) -> Self {
        let vals = |v: Var| tape.value(v).data().iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        Self {
            scope: trace.scope.clone(),
            p_direct: vals(trace.p_direct),
            p_final: vals(trace.p_final),
            gamma: trace.gamma.map(vals).unwrap_or_default(),
            selected: trace
                .selection
                .as_ref()
                .map(|s| s.selected.clone())
                .unwrap_or_default(),
            graph_attention: trace.graph_attention.last().map(|&v| vals(v)).unwrap_or_default(),
        }
    }
}

/// Inference over many notes with synonym encodings computed once.
pub struct Predictor<'a, T: Scalar> {
    pub net: &'a CoRelation,
    pub params: &'a ParamStore<T>,
    pub cs: &'a CodeSpace,
    bank: BankValues<T>,
}

impl<'a, T: Scalar> Predictor<'a, T> {
    pub fn new(net: &'a CoRelation, params: &'a ParamStore<T>, cs: &'a CodeSpace) -> Result<Self> {
        let bank = net.bank_values(params, cs)?;
        Ok(Self { net, params, cs, bank })
    }

    pub fn predict(&self, tokens: &[usize], ablations: Ablations, top_k: usize) -> Result<Prediction> {
        let mut tape = Tape::inference(self.params);
        let bank = self.net.bank_from_values(&mut tape, self.cs, &self.bank)?;
        let opts = ForwardOptions::new(top_k).with_ablations(ablations);
        let trace = self
            .net
            .forward(&mut tape, Some(self.cs), &bank, tokens, &self.bank.codes, opts)?;
        Ok(Prediction::read(&tape, &trace))
    }
}
