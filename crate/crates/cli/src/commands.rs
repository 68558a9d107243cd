use std::fs;
use std::io::Write;
use std::path::Path;

use corelation::code_space::Descriptions;
use corelation::data::{
    build_code_space, build_vocabulary, generate_synthetic, load_dataset, parse_code_list, NoteRecord, SyntheticSpec,
};
use corelation::encoder::{EncoderConfig, Vocabulary};
use corelation::metrics::{evaluate, EvalBatch, MetricReport, DEFAULT_P_AT};
use corelation::model::{Ablations, CoRelation, ModelConfig, Prediction, Predictor};
use corelation::numerics::{finite_difference_check, Array, ParamStore, Tape};
use corelation::ontology::{CodeId, EdgeTypeTable};
use corelation::relation_graph::{graph_stats, RelationGraph};
use corelation::training::{evaluate_examples, note_loss, prepare, train, Example, TrainConfig};
use corelation::{Dropout, Error, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::bundle::{Bundle, Manifest};
use crate::config::RunConfig;
use crate::{CliError, Command, ConfigArgs, ModelArgs};

/// Edge-memory probes reported by `graph-stats`.
const PROBE_KS: [usize; 4] = [50, 100, 200, 300];

pub fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Train(args) => cmd_train(&args, out),
        Command::Evaluate {
            checkpoint,
            predictions,
            data,
            top_k,
            no_relation,
            no_context,
            no_saa,
            report,
        } => {
            let ablations = Ablations {
                no_relation,
                no_context,
                no_saa,
            };
            let r = match (checkpoint, predictions) {
                (Some(ckpt), _) => evaluate_checkpoint(&ckpt, &data, top_k, ablations)?,
                (None, Some(preds)) => evaluate_predictions(&preds, &data)?,
                (None, None) => return Err(CliError::Config("need --checkpoint or --predictions".into())),
            };
            write!(out, "{}", r.table()).map_err(io_err)?;
            if let Some(path) = report {
                write_json(&path, &r)?;
            }
            Ok(())
        }
        Command::Predict { model, output, top } => cmd_predict(&model, output.as_deref(), top, out),
        Command::GraphStats { model, note } => cmd_graph_stats(&model, note.as_deref(), out),
        Command::Explain { model, note, code } => cmd_explain(&model, &note, &code, out),
        Command::GenData { spec, out: dir, seed } => cmd_gen_data(spec.as_deref(), &dir, seed, out),
        Command::GradCheck { linear, seed, coords } => cmd_grad_check(linear, seed, coords, out),
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(Error::Json(e)))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_records(path: &Path, codes: &[CodeId]) -> Result<Vec<NoteRecord>, CliError> {
    match load_dataset(path, codes) {
        Err(Error::Io(e)) => Err(CliError::Io(format!("{}: {e}", path.display()))),
        other => Ok(other?),
    }
}

fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn cmd_train(args: &ConfigArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let codes = parse_code_list(&read(&cfg.path("codes")?)?)?;
    let hierarchy = read(&cfg.path("ontology")?)?;
    let descriptions_text = read(&cfg.path("descriptions")?)?;
    let descriptions = Descriptions::parse(&descriptions_text)?;
    let train_records = load_records(&cfg.path("train")?, &codes)?;
    let valid_records = load_records(&cfg.path("valid")?, &codes)?;
    let test_records = cfg
        .optional_path("test")
        .map(|p| load_records(&p, &codes))
        .transpose()?;
    let vocab = build_vocabulary(&train_records, &descriptions);
    let train_cfg = cfg.training()?;

    let manifest = Manifest {
        model: cfg.model()?,
        train: train_cfg.clone(),
        synonyms: cfg.synonyms()?,
        edge_cap: cfg.edge_cap()?,
        vocab,
        codes,
        hierarchy,
        descriptions: descriptions_text,
        steps: 0,
        best_epoch: None,
    };
    let mut bundle = Bundle::fresh(manifest)?;
    if let Some(path) = cfg.optional_path("embeddings") {
        let text = read(&path)?;
        let hits = bundle
            .net
            .encoder
            .load_embeddings(&mut bundle.params, &bundle.manifest.vocab, &text)?;
        writeln!(out, "embeddings: {hits} of {} tokens initialized", bundle.manifest.vocab.len()).map_err(io_err)?;
    }

    let dir = cfg.path("output_dir")?;
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    fs::write(dir.join("config.txt"), cfg.to_text()).map_err(io_err)?;

    let vocab = &bundle.manifest.vocab;
    let train_set = prepare(&train_records, vocab, &bundle.cs)?;
    let valid_set = prepare(&valid_records, vocab, &bundle.cs)?;
    let outcome = train(&bundle.net, &bundle.cs, bundle.params.clone(), &train_set, &valid_set, &train_cfg)?;
    let history = outcome.history;

    fs::write(dir.join("train_log.csv"), history.log_text()).map_err(io_err)?;
    write_json(&dir.join("history.json"), &history)?;
    for e in &history.epochs {
        writeln!(
            out,
            "epoch {:>3}  loss {:.6}  valid score {:.4}{}",
            e.epoch,
            e.mean_loss.total,
            e.score,
            if e.improved { "  *" } else { "" }
        )
        .map_err(io_err)?;
    }

    bundle.params = outcome.params;
    bundle.manifest.steps = history.steps.len();
    bundle.manifest.best_epoch = history.best_epoch;
    let ckpt = dir.join("checkpoint.bin");
    bundle.save(&ckpt)?;

    if let Some(best) = history.best_epoch {
        write!(out, "validation (epoch {best}):\n{}", history.epochs[best].valid.table()).map_err(io_err)?;
    }
    if let Some(records) = test_records {
        let test_set = prepare(&records, &bundle.manifest.vocab, &bundle.cs)?;
        let report = report_for(&bundle, &test_set, train_cfg.ablations, train_cfg.top_k)?;
        write_json(&dir.join("test_report.json"), &report)?;
        write!(out, "test:\n{}", report.table()).map_err(io_err)?;
    }
    writeln!(out, "checkpoint {} sha256 {}", ckpt.display(), sha256_hex(&ckpt)?).map_err(io_err)?;
    Ok(())
}

fn report_for(bundle: &Bundle, examples: &[Example], ablations: Ablations, top_k: usize) -> Result<MetricReport, CliError> {
    let eval = evaluate_examples(&bundle.net, &bundle.params, &bundle.cs, examples, ablations, top_k)?;
    Ok(evaluate(&eval.batch, &DEFAULT_P_AT))
}

fn evaluate_checkpoint(
    ckpt: &Path,
    data: &Path,
    top_k: Option<usize>,
    ablations: Ablations,
) -> Result<MetricReport, CliError> {
    let bundle = Bundle::load(ckpt)?;
    let records = load_records(data, &bundle.manifest.codes)?;
    let examples = prepare(&records, &bundle.manifest.vocab, &bundle.cs)?;
    report_for(&bundle, &examples, ablations, top_k.unwrap_or(bundle.manifest.train.top_k))
}

#[derive(Deserialize)]
struct ScoredCode {
    code: CodeId,
    p: f64,
}

#[derive(Deserialize)]
struct PredictionLine {
    id: String,
    codes: Vec<ScoredCode>,
}

/// Scores a `predict` output against gold codes; codes absent from a
/// prediction line score 0. The code space is every code named in either
/// file, in sorted order.
fn evaluate_predictions(preds: &Path, data: &Path) -> Result<MetricReport, CliError> {
    let mut lines = Vec::new();
    for (i, line) in read(preds)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(line).map_err(|e| {
            CliError::Core(Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })?;
        lines.push(p);
    }
    let mut codes: Vec<CodeId> = lines.iter().flat_map(|l| l.codes.iter().map(|c| c.code.clone())).collect();
    // gold codes may be missing from truncated predictions
    let gold_text = read(data)?;
    for line in gold_text.lines().filter(|l| !l.trim().is_empty()) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(line) {
            if let Some(arr) = v.get("codes").and_then(|c| c.as_array()) {
                codes.extend(arr.iter().filter_map(|c| c.as_str()).filter_map(|c| CodeId::new(c).ok()));
            }
        }
    }
    codes.sort();
    codes.dedup();
    let records = corelation::data::parse_dataset(&gold_text, &codes)?;
    let index = |c: &CodeId| codes.binary_search(c).expect("code collected above");
    let mut scores = Vec::with_capacity(records.len() * codes.len());
    let mut labels = Vec::with_capacity(records.len() * codes.len());
    for r in &records {
        let line = lines
            .iter()
            .find(|l| l.id == r.id)
            .ok_or_else(|| CliError::Config(format!("no prediction for note `{}`", r.id)))?;
        let mut row = vec![0.0; codes.len()];
        for c in &line.codes {
            row[index(&c.code)] = c.p;
        }
        scores.extend(row);
        let mut gold = vec![false; codes.len()];
        for g in &r.gold {
            gold[index(g)] = true;
        }
        labels.extend(gold);
    }
    let batch = EvalBatch::new(records.len(), codes.len(), scores, labels)?;
    Ok(evaluate(&batch, &DEFAULT_P_AT))
}

struct Loaded {
    bundle: Bundle,
    records: Vec<NoteRecord>,
    ablations: Ablations,
    top_k: usize,
}

fn load_model(args: &ModelArgs) -> Result<Loaded, CliError> {
    let bundle = Bundle::load(&args.checkpoint)?;
    let records = load_records(&args.data, &bundle.manifest.codes)?;
    Ok(Loaded {
        top_k: args.top_k.unwrap_or(bundle.manifest.train.top_k),
        ablations: Ablations {
            no_relation: args.no_relation,
            no_context: args.no_context,
            no_saa: args.no_saa,
        },
        bundle,
        records,
    })
}

impl Loaded {
    fn predict(&self, record: &NoteRecord) -> Result<Prediction, CliError> {
        let predictor = Predictor::new(&self.bundle.net, &self.bundle.params, &self.bundle.cs)?;
        self.predict_with(&predictor, record)
    }

    fn predict_with(&self, predictor: &Predictor<'_, f64>, record: &NoteRecord) -> Result<Prediction, CliError> {
        let tokens = self.bundle.manifest.vocab.encode(&record.tokens);
        Ok(predictor.predict(&tokens, self.ablations, self.top_k)?)
    }

    fn note(&self, id: Option<&str>) -> Result<&NoteRecord, CliError> {
        match id {
            Some(id) => self
                .records
                .iter()
                .find(|r| r.id == id)
                .ok_or_else(|| CliError::Config(format!("no note with id `{id}`"))),
            None => self.records.first().ok_or(CliError::Core(Error::Empty("dataset"))),
        }
    }
}

/// Positions sorted by descending score, ties by ascending position.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn cmd_predict(args: &ModelArgs, output: Option<&Path>, top: Option<usize>, out: &mut dyn Write) -> Result<(), CliError> {
    let loaded = load_model(args)?;
    let predictor = Predictor::new(&loaded.bundle.net, &loaded.bundle.params, &loaded.bundle.cs)?;
    let mut text = String::new();
    for r in &loaded.records {
        let p = loaded.predict_with(&predictor, r)?;
        let mut order = ranked(&p.p_final);
        order.truncate(top.unwrap_or(order.len()));
        let codes: Vec<serde_json::Value> = order
            .iter()
            .map(|&i| serde_json::json!({ "code": loaded.bundle.cs.code(p.scope[i]).as_str(), "p": p.p_final[i] }))
            .collect();
        text.push_str(&serde_json::json!({ "id": r.id, "codes": codes }).to_string());
        text.push('\n');
    }
    match output {
        Some(path) => fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
        None => out.write_all(text.as_bytes()).map_err(io_err),
    }
}

fn relation_graph_of(loaded: &Loaded, p: &Prediction) -> Result<RelationGraph, CliError> {
    if p.selected.is_empty() {
        return Err(CliError::Config("the relation path is disabled".into()));
    }
    let lowers = p.selected.iter().map(|&i| p.scope[i]).collect();
    Ok(RelationGraph::from_code_space(lowers, &loaded.bundle.cs))
}

fn cmd_graph_stats(args: &ModelArgs, note: Option<&str>, out: &mut dyn Write) -> Result<(), CliError> {
    let loaded = load_model(args)?;
    let record = loaded.note(note)?;
    let p = loaded.predict(record)?;
    let graph = relation_graph_of(&loaded, &p)?;
    let cs = &loaded.bundle.cs;
    let edge_dim = loaded.bundle.net.config.edge_dim;
    let stats = graph_stats(&graph, cs.edge_table().bucket_count(), edge_dim, &PROBE_KS);
    let sentinel = cs.edge_table().sentinel_unrelated();
    let mut s = String::new();
    s += &format!("note            {}\n", record.id);
    s += &format!("majors (A)      {}\n", stats.majors);
    s += &format!("selected (K)    {}\n", stats.k);
    s += &format!("edges (A*K)     {}\n", stats.edges);
    s += "edge types:\n";
    for (t, n) in stats.histogram.iter().enumerate() {
        let label = if t == sentinel { format!("{t} (unrelated)") } else { t.to_string() };
        s += &format!("  {label:<14}{n}\n");
    }
    s += &format!("edge-embedding floats (A*K*{edge_dim}):\n");
    for (k, floats) in &stats.memory_proxy {
        s += &format!("  K={k:<12}{floats}\n");
    }
    out.write_all(s.as_bytes()).map_err(io_err)
}

fn cmd_explain(args: &ModelArgs, note: &str, code: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let loaded = load_model(args)?;
    let record = loaded.note(Some(note))?;
    let cs = &loaded.bundle.cs;
    let code_id = CodeId::new(code)?;
    let ci = cs
        .index_of(&code_id)
        .ok_or_else(|| CliError::Core(Error::UnknownCode(code.to_string())))?;
    let p = loaded.predict(record)?;
    relation_graph_of(&loaded, &p)?;
    let pos = p.scope.iter().position(|&c| c == ci).expect("scope covers every code");
    let Some(k) = p.selected.iter().position(|&s| s == pos) else {
        return Err(CliError::NotSelected(format!(
            "code {code} is not among the top {} codes of note {note}; its gate is forced to 0",
            loaded.top_k
        )));
    };
    let a = cs.num_majors();
    let row = &p.graph_attention[k * a..(k + 1) * a];
    let mut s = format!(
        "note {note}, code {code}: p_direct {:.4}, p_final {:.4}, gate {:.4}\n",
        p.p_direct[pos],
        p.p_final[pos],
        p.gamma.get(pos).copied().unwrap_or(0.0)
    );
    for (rank, &m) in ranked(row).iter().take(3).enumerate() {
        s += &format!(
            "  {}. {:<12} {:.4}  (edge type {})\n",
            rank + 1,
            cs.majors().majors()[m].as_str(),
            row[m],
            cs.edge_type(m, ci)
        );
    }
    out.write_all(s.as_bytes()).map_err(io_err)
}

fn cmd_gen_data(spec: Option<&Path>, dir: &Path, seed: Option<u64>, out: &mut dyn Write) -> Result<(), CliError> {
    let mut spec: SyntheticSpec = match spec {
        Some(path) => serde_json::from_str(&read(path)?).map_err(|e| CliError::Core(Error::Json(e)))?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpus = generate_synthetic(&spec)?;
    corpus
        .write(dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    write_json(&dir.join("spec.json"), &spec)?;
    writeln!(
        out,
        "wrote {} notes over {} codes to {}",
        corpus.records.len(),
        corpus.codes.len(),
        dir.display()
    )
    .map_err(io_err)
}

fn micro_setup(seed: u64) -> Result<(CoRelation, Params, corelation::code_space::CodeSpace, Vec<Example>), CliError> {
    let spec = SyntheticSpec {
        num_codes: 12,
        num_majors: 4,
        majors_per_chapter: 2,
        synonyms_per_code: 2,
        num_notes: 2,
        code_rate: 0.25,
        noise_len: (4, 6),
        noise_vocab: 10,
        seed,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic(&spec)?;
    let vocab: Vocabulary = build_vocabulary(&corpus.records, &corpus.descriptions);
    let table = EdgeTypeTable::default();
    let (_, cs) = build_code_space(corpus.codes, &corpus.hierarchy, &corpus.descriptions, &vocab, 2, table)?;
    let config = ModelConfig {
        encoder: EncoderConfig {
            embed_dim: 16,
            hidden_dim: 8,
            bidirectional: true,
            output_dim: 16,
            max_note_len: 64,
            max_synonym_len: 32,
        },
        attention_dim: 16,
        graph_dim: 16,
        edge_dim: 8,
        ffn_dim: 32,
        graph_layers: 1,
        top_k: 6,
        dropout: 0.1,
    };
    let (net, params) = CoRelation::init(config, vocab.len(), table.bucket_count(), seed)?;
    let examples = prepare(&corpus.records, &vocab, &cs)?;
    Ok((net, params, cs, examples))
}

fn cmd_grad_check(linear: bool, seed: u64, coords: usize, out: &mut dyn Write) -> Result<(), CliError> {
    let (report, tolerance, what) = if linear {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert("w", Array::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0)))?;
        let x = Array::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
        let r = finite_difference_check(&params, 1e-3, coords, seed, |tape: &mut Tape<'_, f64>| {
            let w = tape.param_by_name("w")?;
            let x = tape.constant(x.clone())?;
            let y = tape.matmul(x, w)?;
            tape.sum_all(y)
        })?;
        (r, 1e-10, "linear layer")
    } else {
        let (net, params, cs, examples) = micro_setup(seed)?;
        let cfg = TrainConfig {
            top_k: net.config.top_k,
            ..TrainConfig::default()
        };
        let all: Vec<usize> = (0..cs.len()).collect();
        let r = finite_difference_check(&params, 1e-3, coords, seed, |tape| {
            let bank = net.encode_bank(tape, &cs, &all, true)?;
            let mut dropout = Dropout::new(net.config.dropout, seed);
            let mut losses = Vec::new();
            for ex in &examples {
                let labels: Vec<bool> = all.iter().map(|i| ex.gold.contains(i)).collect();
                losses.push(note_loss(&net, &cs, tape, &bank, &ex.tokens, &all, &labels, &cfg, &mut dropout)?.total);
            }
            let stacked = tape.concat_rows(&losses)?;
            tape.mean_all(stacked)
        })?;
        (r, 1e-4, "micro pipeline")
    };
    let verdict = if report.max_rel_error <= tolerance { "PASS" } else { "FAIL" };
    let worst = report
        .worst
        .as_ref()
        .map_or_else(String::new, |(n, k)| format!(", worst at {n}[{k}]"));
    let line = format!(
        "{what}: max relative error {:.3e} over {} coordinates ({} skipped at kinks){worst}: {verdict} at {tolerance:e}",
        report.max_rel_error, report.coords_checked, report.coords_straddling
    );
    writeln!(out, "{line}").map_err(io_err)?;
    if verdict == "FAIL" {
        return Err(CliError::CheckFailed(line));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranked_breaks_ties_by_position() {
        assert_eq!(ranked(&[0.2, 0.9, 0.2, 0.9, 0.5]), vec![1, 3, 4, 0, 2]);
        assert!(ranked(&[]).is_empty());
    }
}
