//! Full and selective training steps, the epoch loop with early stopping,
//! and evaluation helpers.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::code_space::CodeSpace;
use crate::data::NoteRecord;
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::gating_loss::{loss_ce, loss_comp, r_drop_penalty, total_loss, LossBreakdown};
use crate::metrics::{evaluate, top_k_indices, EvalBatch, MetricReport};
use crate::model::{Ablations, CoRelation, ForwardOptions, ForwardTrace, Predictor, SynonymBank};
use crate::numerics::{stream_rng, Adam, Array, ParamStore, Scalar, Stream, Tape, Var};
use crate::Dropout;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Full,
    Selective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub top_k: usize,
    /// Codes per step kept from the estimation ranking (and drawn at random)
    /// in selective mode.
    pub k_s: usize,
    pub lambda: f64,
    /// R-Drop factor.
    pub rho: f64,
    pub base_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub ablations: Ablations,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            top_k: 300,
            k_s: 1000,
            lambda: 0.01,
            rho: 5.0,
            base_lr: 5e-4,
            batch_size: 1,
            seed: 0,
            mode: TrainMode::Full,
            ablations: Ablations::default(),
            patience: 5,
        }
    }
}

/// A note as token ids and gold code indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub gold: Vec<usize>,
}

pub fn prepare(records: &[NoteRecord], vocab: &Vocabulary, cs: &CodeSpace) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            Ok(Example {
                tokens: vocab.encode(&r.tokens),
                gold: r.gold_indices(cs)?,
            })
        })
        .collect()
}

/// Codes that receive gradients in one selective step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectiveBatchPlan {
    pub top_ks: Vec<usize>,
    pub random: Vec<usize>,
    pub ground: Vec<usize>,
    /// Sorted, duplicate-free union of the three sets.
    pub back: Vec<usize>,
    /// Gold labels of `back`.
    pub labels: Vec<bool>,
}

/// Top `k_s` codes of `p_est`, the gold codes, and up to `k_s` codes drawn
/// uniformly without replacement from the rest.
pub fn plan_selective(p_est: &[f64], gold: &[usize], k_s: usize, rng: &mut ChaCha8Rng) -> SelectiveBatchPlan {
    let n = p_est.len();
    let top_ks = top_k_indices(p_est, k_s);
    let mut taken = vec![false; n];
    for &i in top_ks.iter().chain(gold) {
        taken[i] = true;
    }
    let rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    let draw = k_s.min(rest.len());
    let random: Vec<usize> = rand::seq::index::sample(rng, rest.len(), draw)
        .into_iter()
        .map(|j| rest[j])
        .collect();
    for &i in &random {
        taken[i] = true;
    }
    let back: Vec<usize> = (0..n).filter(|&i| taken[i]).collect();
    let labels = back.iter().map(|i| gold.contains(i)).collect();
    SelectiveBatchPlan {
        top_ks,
        random,
        ground: gold.to_vec(),
        back,
        labels,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: LossBreakdown,
    /// Per-code probability evaluations recorded for backward in this step.
    pub recorded_evals: usize,
    pub lr: f64,
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_ce: f64,
    pub l_comp: f64,
    pub l_rdrop: f64,
    pub total: f64,
    pub lr: f64,
}

impl StepLog {
    pub const HEADER: &'static str = "epoch,step,l_ce,l_comp,l_rdrop,total,lr";

    pub fn line(&self) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.epoch, self.step, self.l_ce, self.l_comp, self.l_rdrop, self.total, self.lr
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: LossBreakdown,
    pub valid: MetricReport,
    /// Score used for early stopping: macro AUC, else micro AUC, else 0.
    pub score: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn log_text(&self) -> String {
        let mut s = String::from(StepLog::HEADER);
        s.push('\n');
        for l in &self.steps {
            s.push_str(&l.line());
            s.push('\n');
        }
        s
    }
}

fn as_nan_error(e: Error, note: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::NanLoss { note },
        other => other,
    }
}

/// Loss of one note and its parts.
pub struct NoteLoss {
    pub total: Var,
    pub parts: LossBreakdown,
    /// Per-code evaluations recorded for backward (first pass only).
    pub recorded_evals: usize,
}

/// Loss of one note over the codes in `scope` with gold flags `labels`.
/// With `rho > 0` and a non-zero dropout rate the note runs twice: CE and
/// compensation are averaged over both passes and the passes feed the
/// R-Drop penalty.
#[allow(clippy::too_many_arguments)]
pub fn note_loss<T: Scalar>(
    net: &CoRelation,
    cs: &CodeSpace,
    tape: &mut Tape<'_, T>,
    bank: &SynonymBank,
    tokens: &[usize],
    scope: &[usize],
    labels: &[bool],
    cfg: &TrainConfig,
    dropout: &mut Dropout,
) -> Result<NoteLoss> {
    let labels: Vec<T> = labels.iter().map(|&g| if g { T::one() } else { T::zero() }).collect();
    let two_pass = cfg.rho > 0.0 && dropout.rate > 0.0;
    let mut pass = |tape: &mut Tape<'_, T>| -> Result<(ForwardTrace, Var, Var)> {
        let opts = ForwardOptions {
            ablations: cfg.ablations,
            gate: Default::default(),
            top_k: cfg.top_k,
            dropout: Some(&mut *dropout),
        };
        let tr = net.forward(tape, Some(cs), bank, tokens, scope, opts)?;
        let ce = loss_ce(tape, tr.p_final, &labels)?;
        let comp = match tr.gamma {
            Some(g) => loss_comp(tape, g)?,
            None => tape.constant(Array::scalar(T::zero()))?,
        };
        Ok((tr, ce, comp))
    };
    let (t1, ce1, comp1) = pass(tape)?;
    let (ce, comp, rdrop) = if two_pass {
        let (t2, ce2, comp2) = pass(tape)?;
        let ce = tape.add(ce1, ce2)?;
        let ce = tape.scale(ce, T::lit(0.5))?;
        let comp = tape.add(comp1, comp2)?;
        let comp = tape.scale(comp, T::lit(0.5))?;
        (ce, comp, Some(r_drop_penalty(tape, t1.p_final, t2.p_final)?))
    } else {
        (ce1, comp1, None)
    };
    let total = total_loss(tape, ce, comp, rdrop, cfg.lambda, cfg.rho)?;
    let parts = LossBreakdown {
        l_ce: tape.value(ce).item().as_f64(),
        l_comp: tape.value(comp).item().as_f64(),
        l_rdrop: rdrop.map_or(0.0, |r| tape.value(r).item().as_f64()),
        total: tape.value(total).item().as_f64(),
    };
    Ok(NoteLoss {
        total,
        parts,
        recorded_evals: t1.recorded_evals,
    })
}

/// Owns the parameters, optimizer and random streams of one run.
pub struct Trainer<'a, T: Scalar> {
    pub net: &'a CoRelation,
    pub cs: &'a CodeSpace,
    pub config: TrainConfig,
    pub params: ParamStore<T>,
    adam: Adam<T>,
    dropout: Dropout,
    sampling: ChaCha8Rng,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        net: &'a CoRelation,
        cs: &'a CodeSpace,
        params: ParamStore<T>,
        config: TrainConfig,
        total_steps: usize,
    ) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if config.mode == TrainMode::Selective && config.k_s == 0 {
            return Err(Error::Config("selective mode needs k_s >= 1".into()));
        }
        let adam = Adam::new(&params, T::lit(config.base_lr), total_steps);
        Ok(Self {
            net,
            cs,
            dropout: Dropout::new(net.config.dropout, config.seed),
            sampling: stream_rng(config.seed, Stream::Sampling),
            adam,
            params,
            config,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.adam.current_lr().as_f64()
    }

    /// Direct probabilities of every code for `tokens` without recording
    /// gradients.
    pub fn estimate(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference(&self.params);
        let all: Vec<usize> = (0..self.cs.len()).collect();
        let bank = self.net.encode_bank(&mut tape, self.cs, &all, false)?;
        let p = self.net.forward_direct(&mut tape, &bank, tokens, &all, None)?;
        Ok(tape.value(p).data().iter().map(|x| x.as_f64()).collect())
    }

    /// One optimizer step over `batch`; `first_index` numbers the notes for
    /// diagnostics.
    pub fn step(&mut self, batch: &[&Example], first_index: usize) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let n = self.cs.len();
        let scopes: Vec<(Vec<usize>, Vec<bool>)> = match self.config.mode {
            TrainMode::Full => batch
                .iter()
                .map(|ex| {
                    let labels = (0..n).map(|i| ex.gold.contains(&i)).collect();
                    ((0..n).collect(), labels)
                })
                .collect(),
            TrainMode::Selective => {
                let mut out = Vec::with_capacity(batch.len());
                for (j, ex) in batch.iter().enumerate() {
                    let p_est = self.estimate(&ex.tokens).map_err(|e| as_nan_error(e, first_index + j))?;
                    let plan = plan_selective(&p_est, &ex.gold, self.config.k_s, &mut self.sampling);
                    out.push((plan.back, plan.labels));
                }
                out
            }
        };
        let mut union = vec![false; n];
        for (scope, _) in &scopes {
            for &i in scope {
                union[i] = true;
            }
        }
        let union: Vec<usize> = (0..n).filter(|&i| union[i]).collect();

        let lr = self.current_lr();
        let cfg = &self.config;
        let mut tape = Tape::new(&self.params);
        let with_majors = !cfg.ablations.no_relation;
        let bank = self.net.encode_bank(&mut tape, self.cs, &union, with_majors)?;
        let mut note_losses = Vec::with_capacity(batch.len());
        let mut sums = LossBreakdown::default();
        let mut recorded = 0;
        for (j, (ex, (scope, labels))) in batch.iter().zip(&scopes).enumerate() {
            let note = first_index + j;
            let NoteLoss {
                total,
                parts,
                recorded_evals: evals,
            } = note_loss(self.net, self.cs, &mut tape, &bank, &ex.tokens, scope, labels, cfg, &mut self.dropout)
                .map_err(|e| as_nan_error(e, note))?;
            if !parts.total.is_finite() {
                return Err(Error::NanLoss { note });
            }
            note_losses.push(total);
            sums.l_ce += parts.l_ce;
            sums.l_comp += parts.l_comp;
            sums.l_rdrop += parts.l_rdrop;
            sums.total += parts.total;
            recorded += evals;
        }
        let b = batch.len() as f64;
        let loss = if note_losses.len() == 1 {
            note_losses[0]
        } else {
            let stacked = tape.concat_rows(&note_losses)?;
            tape.mean_all(stacked)?
        };
        let grads = tape.backward(loss)?;
        drop(tape);
        self.adam.step(&mut self.params, &grads)?;
        Ok(StepReport {
            loss: LossBreakdown {
                l_ce: sums.l_ce / b,
                l_comp: sums.l_comp / b,
                l_rdrop: sums.l_rdrop / b,
                total: sums.total / b,
            },
            recorded_evals: recorded,
            lr,
        })
    }
}

/// Predictions and gold labels over a set of examples, plus the mean gate
/// over selected codes (absent without the relation path).
pub struct Evaluation {
    pub batch: EvalBatch,
    pub mean_gamma: Option<f64>,
}

pub fn evaluate_examples<T: Scalar>(
    net: &CoRelation,
    params: &ParamStore<T>,
    cs: &CodeSpace,
    examples: &[Example],
    ablations: Ablations,
    top_k: usize,
) -> Result<Evaluation> {
    let predictor = Predictor::new(net, params, cs)?;
    let n = cs.len();
    let mut scores = Vec::with_capacity(examples.len() * n);
    let mut labels = Vec::with_capacity(examples.len() * n);
    let (mut gamma_sum, mut gamma_count) = (0.0, 0usize);
    for ex in examples {
        let p = predictor.predict(&ex.tokens, ablations, top_k)?;
        for &s in &p.selected {
            gamma_sum += p.gamma.get(s).copied().unwrap_or(0.0);
            gamma_count += usize::from(!p.gamma.is_empty());
        }
        scores.extend(p.p_final);
        labels.extend((0..n).map(|i| ex.gold.contains(&i)));
    }
    Ok(Evaluation {
        batch: EvalBatch::new(examples.len(), n, scores, labels)?,
        mean_gamma: (gamma_count > 0).then(|| gamma_sum / gamma_count as f64),
    })
}

fn stop_score(r: &MetricReport) -> f64 {
    r.macro_auc.or(r.micro_auc).unwrap_or(0.0)
}

pub struct TrainOutcome<T> {
    /// Parameters of the best validation epoch (initial ones if no epoch ran).
    pub params: ParamStore<T>,
    pub history: History,
    /// Parameters after the last step taken.
    pub last: ParamStore<T>,
}

/// Trains for `config.epochs` epochs with validation after each one and
/// early stopping after `patience` epochs without strict improvement.
pub fn train<T: Scalar>(
    net: &CoRelation,
    cs: &CodeSpace,
    params: ParamStore<T>,
    train_set: &[Example],
    valid_set: &[Example],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            last: params.clone(),
            params,
            history: History::default(),
        });
    }
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Empty("training or validation split"));
    }
    let b = config.batch_size.max(1);
    let steps_per_epoch = train_set.len().div_ceil(b);
    let mut trainer = Trainer::new(net, cs, params.clone(), config.clone(), steps_per_epoch * config.epochs)?;
    let mut shuffle = stream_rng(config.seed, Stream::Data);
    let mut history = History::default();
    let mut best = params;
    let mut best_score = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(b) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let r = trainer.step(&batch, chunk[0])?;
            step += 1;
            history.steps.push(StepLog {
                epoch,
                step,
                l_ce: r.loss.l_ce,
                l_comp: r.loss.l_comp,
                l_rdrop: r.loss.l_rdrop,
                total: r.loss.total,
                lr: r.lr,
            });
            sum.l_ce += r.loss.l_ce;
            sum.l_comp += r.loss.l_comp;
            sum.l_rdrop += r.loss.l_rdrop;
            sum.total += r.loss.total;
        }
        let s = steps_per_epoch as f64;
        let eval = evaluate_examples(net, &trainer.params, cs, valid_set, config.ablations, config.top_k)?;
        let report = evaluate(&eval.batch, &crate::metrics::DEFAULT_P_AT);
        let score = stop_score(&report);
        let improved = score > best_score;
        if improved {
            best_score = score;
            best = trainer.params.clone();
            history.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss: LossBreakdown {
                l_ce: sum.l_ce / s,
                l_comp: sum.l_comp / s,
                l_rdrop: sum.l_rdrop / s,
                total: sum.total / s,
            },
            valid: report,
            score,
            improved,
        });
        if stale >= config.patience.max(1) {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        history,
        last: trainer.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_code_space, build_vocabulary, generate_synthetic, SyntheticSpec};
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::ontology::EdgeTypeTable;
    use rand::SeedableRng;

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 8,
                hidden_dim: 6,
                bidirectional: true,
                output_dim: 8,
                max_note_len: 200,
                max_synonym_len: 32,
            },
            attention_dim: 6,
            graph_dim: 6,
            edge_dim: 4,
            ffn_dim: 12,
            graph_layers: 1,
            top_k: 4,
            dropout: 0.1,
        }
    }

    fn setup(num_notes: usize) -> (CoRelation, ParamStore<f64>, CodeSpace, Vec<Example>) {
        let spec = SyntheticSpec {
            num_codes: 12,
            num_majors: 4,
            num_notes,
            noise_len: (3, 6),
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        let vocab = build_vocabulary(&corpus.records, &corpus.descriptions);
        let (_, cs) = build_code_space(
            corpus.codes.clone(),
            &corpus.hierarchy,
            &corpus.descriptions,
            &vocab,
            2,
            EdgeTypeTable::default(),
        )
        .unwrap();
        let examples = prepare(&corpus.records, &vocab, &cs).unwrap();
        let (net, params) = CoRelation::init(tiny_model_config(), vocab.len(), 8, 3).unwrap();
        (net, params, cs, examples)
    }

    #[test]
    fn plan_contains_gold_and_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 500;
        for _ in 0..100 {
            let p: Vec<f64> = (0..n).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
            let gold: Vec<usize> = rand::seq::index::sample(&mut rng, n, 7).into_vec();
            let plan = plan_selective(&p, &gold, 40, &mut rng);
            assert!(gold.iter().all(|g| plan.back.contains(g)));
            assert!(plan.back.len() <= 2 * 40 + gold.len());
            assert!(plan.back.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(plan.random.len(), 40);
            assert_eq!(plan.labels.iter().filter(|&&l| l).count(), 7);
        }
        let p = vec![0.5; 10];
        let plan = plan_selective(&p, &[3], 20, &mut rng);
        assert_eq!(plan.back, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn saturated_selective_step_equals_full_step() {
        let (net, params, cs, ex) = setup(8);
        let cfg = TrainConfig {
            top_k: 4,
            k_s: 100,
            rho: 1.0,
            ..TrainConfig::default()
        };
        let mut full = Trainer::new(&net, &cs, params.clone(), cfg.clone(), 10).unwrap();
        let sel_cfg = TrainConfig {
            mode: TrainMode::Selective,
            ..cfg
        };
        let mut sel = Trainer::new(&net, &cs, params, sel_cfg, 10).unwrap();
        let a = full.step(&[&ex[0]], 0).unwrap();
        let b = sel.step(&[&ex[0]], 0).unwrap();
        assert_eq!(a, b);
        for id in full.params.ids() {
            assert_eq!(full.params.get(id), sel.params.get(id));
        }
    }

    #[test]
    fn selective_counts_are_bounded() {
        let (net, params, cs, ex) = setup(8);
        let cfg = TrainConfig {
            top_k: 2,
            k_s: 2,
            rho: 0.0,
            mode: TrainMode::Selective,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&net, &cs, params, cfg, 10).unwrap();
        for e in ex.iter().take(5) {
            let r = t.step(&[e], 0).unwrap();
            assert!(r.recorded_evals <= 4 + e.gold.len());
            assert!(r.recorded_evals >= 2 + e.gold.len().min(1));
        }
    }

    #[test]
    fn loss_total_matches_parts_and_lambda_zero_no_relation() {
        let (net, params, cs, ex) = setup(8);
        let cfg = TrainConfig {
            top_k: 4,
            lambda: 0.3,
            rho: 2.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&net, &cs, params.clone(), cfg, 10).unwrap();
        let r = t.step(&[&ex[1], &ex[2]], 1).unwrap();
        let l = r.loss;
        assert!((l.total - (l.l_ce + 0.3 * l.l_comp + 2.0 * l.l_rdrop)).abs() < 1e-12);
        assert!(l.l_comp > 0.0 && l.l_comp <= 1.0 && l.l_rdrop >= 0.0);

        let cfg = TrainConfig {
            lambda: 0.0,
            rho: 0.0,
            ablations: Ablations {
                no_relation: true,
                ..Ablations::default()
            },
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&net, &cs, params, cfg, 10).unwrap();
        let r = t.step(&[&ex[1]], 1).unwrap();
        assert_eq!(r.loss.total, r.loss.l_ce);
        assert_eq!(r.loss.l_comp, 0.0);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (net, params, cs, ex) = setup(8);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&net, &cs, params.clone(), &ex, &ex, &cfg).unwrap();
        assert!(out.history.steps.is_empty());
        for id in params.ids() {
            assert_eq!(out.params.get(id), params.get(id));
        }
    }

    #[test]
    fn training_is_deterministic_and_decays_lr() {
        let (net, params, cs, ex) = setup(12);
        let cfg = TrainConfig {
            epochs: 2,
            top_k: 4,
            batch_size: 3,
            base_lr: 1e-2,
            patience: 5,
            ..TrainConfig::default()
        };
        let a = train(&net, &cs, params.clone(), &ex[..9], &ex[9..], &cfg).unwrap();
        let b = train(&net, &cs, params, &ex[..9], &ex[9..], &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.steps.len(), 6);
        assert_eq!(a.history.steps[0].lr, 1e-2);
        assert!(a.history.steps[5].lr < a.history.steps[4].lr);
        let text = a.history.log_text();
        assert!(text.starts_with(StepLog::HEADER));
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn early_stopping_keeps_best_checkpoint() {
        let (net, params, cs, ex) = setup(16);
        let cfg = TrainConfig {
            epochs: 6,
            top_k: 4,
            batch_size: 4,
            base_lr: 5e-2,
            patience: 2,
            ..TrainConfig::default()
        };
        let out = train(&net, &cs, params, &ex[..12], &ex[12..], &cfg).unwrap();
        let best = out.history.best_epoch.unwrap();
        let best_score = out.history.epochs[best].score;
        for e in &out.history.epochs {
            assert!(e.score <= best_score);
        }
        let eval = evaluate_examples(&net, &out.params, &cs, &ex[12..], cfg.ablations, cfg.top_k).unwrap();
        let report = evaluate(&eval.batch, &[]);
        assert_eq!(stop_score(&report), best_score);
    }

    #[test]
    fn nan_loss_names_the_note() {
        let (net, mut params, cs, ex) = setup(8);
        let id = params.id("fc_alpha.b").unwrap();
        params.get_mut(id).data_mut()[0] = f64::NAN;
        let mut t = Trainer::new(&net, &cs, params, TrainConfig::default(), 10).unwrap();
        match t.step(&[&ex[0], &ex[1]], 5) {
            Err(Error::NanLoss { note }) => assert_eq!(note, 5),
            other => panic!("{:?}", other.map(|r| r.loss)),
        }
    }
}
