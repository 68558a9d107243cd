//! Dataset records, JSONL loading, and a synthetic corpus generator with
//! planted co-occurrence structure.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::code_space::{codes_with_majors, CodeSpace, Descriptions};
use crate::encoder::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{stream_rng, Stream};
use crate::ontology::{CodeId, EdgeTypeTable, Ontology};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoteRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub gold: Vec<CodeId>,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    codes: Vec<String>,
}

impl NoteRecord {
    /// Gold code indices in a code space; unknown codes are an error.
    pub fn gold_indices(&self, cs: &CodeSpace) -> Result<Vec<usize>> {
        self.gold
            .iter()
            .map(|c| cs.index_of(c).ok_or_else(|| Error::UnknownCode(c.to_string())))
            .collect()
    }
}

/// Parses JSONL records, lowercasing and whitespace-splitting `text`. Every
/// code must be in `known`; all unknown codes are reported together.
pub fn parse_dataset(text: &str, known: &[CodeId]) -> Result<Vec<NoteRecord>> {
    let known: HashSet<&CodeId> = known.iter().collect();
    let mut out = Vec::new();
    let mut unknown = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            line: lineno + 1,
            msg,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
        let tokens = tokenize(&raw.text);
        if tokens.is_empty() {
            return Err(perr(format!("record {} has no tokens", raw.id)));
        }
        let mut gold: Vec<CodeId> = Vec::with_capacity(raw.codes.len());
        for c in raw.codes {
            let c = CodeId::new(c).map_err(|e| perr(e.to_string()))?;
            if !known.contains(&c) {
                unknown.insert(c.to_string());
            } else if !gold.contains(&c) {
                gold.push(c);
            }
        }
        out.push(NoteRecord {
            id: raw.id,
            tokens,
            gold,
        });
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownCodes(unknown.into_iter().collect()));
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, known: &[CodeId]) -> Result<Vec<NoteRecord>> {
    parse_dataset(&fs::read_to_string(path)?, known)
}

pub fn dataset_to_jsonl(records: &[NoteRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        let raw = RawRecord {
            id: r.id.clone(),
            text: r.tokens.join(" "),
            codes: r.gold.iter().map(|c| c.to_string()).collect(),
        };
        s.push_str(&serde_json::to_string(&raw)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_dataset(path: &Path, records: &[NoteRecord]) -> Result<()> {
    Ok(fs::write(path, dataset_to_jsonl(records)?)?)
}

/// One code per line; `#` comments and blank lines ignored.
pub fn parse_code_list(text: &str) -> Result<Vec<CodeId>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(CodeId::new)
        .collect()
}

/// Tokens of the descriptions, then of the notes, in order of appearance.
pub fn build_vocabulary(records: &[NoteRecord], descriptions: &Descriptions) -> Vocabulary {
    let mut v = Vocabulary::default();
    for t in descriptions.tokens() {
        v.add(&t);
    }
    for r in records {
        for t in &r.tokens {
            v.add(t);
        }
    }
    v
}

/// Parses the hierarchy with the targets and their majors, then builds the
/// code space.
pub fn build_code_space(
    codes: Vec<CodeId>,
    hierarchy: &str,
    descriptions: &Descriptions,
    vocab: &Vocabulary,
    m: usize,
    table: EdgeTypeTable,
) -> Result<(Ontology, CodeSpace)> {
    let ont = Ontology::parse(hierarchy, &codes_with_majors(&codes))?;
    let cs = CodeSpace::build(codes, &ont, descriptions, vocab, m, table)?;
    Ok((ont, cs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Implication {
    pub trigger: usize,
    pub implied: usize,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_codes: usize,
    pub num_majors: usize,
    /// Majors per top-level chapter in the generated ontology.
    pub majors_per_chapter: usize,
    pub keywords_per_code: usize,
    pub synonyms_per_code: usize,
    pub implications: Vec<Implication>,
    /// Codes that never appear together.
    pub exclusions: Vec<(usize, usize)>,
    pub num_notes: usize,
    /// Independent inclusion probability of each code.
    pub code_rate: f64,
    /// Inclusive range of noise tokens per note.
    pub noise_len: (usize, usize),
    pub noise_vocab: usize,
    /// Probability that a code added by an implication rule leaves its
    /// keywords out of the note.
    pub implied_keyword_drop: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_codes: 30,
            num_majors: 6,
            majors_per_chapter: 3,
            keywords_per_code: 2,
            synonyms_per_code: 2,
            implications: Vec::new(),
            exclusions: Vec::new(),
            num_notes: 64,
            code_rate: 0.08,
            noise_len: (8, 16),
            noise_vocab: 200,
            implied_keyword_drop: 0.0,
            seed: 0,
        }
    }
}

/// Generated corpus: target codes, hierarchy text, descriptions, notes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub codes: Vec<CodeId>,
    pub hierarchy: String,
    pub descriptions: Descriptions,
    pub records: Vec<NoteRecord>,
}

impl SyntheticCorpus {
    /// Writes `codes.txt`, `ontology.tsv`, `descriptions.tsv`,
    /// `notes.jsonl`, and an 80/10/10 split into `train.jsonl`,
    /// `valid.jsonl`, `test.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let codes: String = self.codes.iter().map(|c| format!("{c}\n")).collect();
        fs::write(dir.join("codes.txt"), codes)?;
        fs::write(dir.join("ontology.tsv"), &self.hierarchy)?;
        fs::write(dir.join("descriptions.tsv"), self.descriptions.to_text())?;
        write_dataset(&dir.join("notes.jsonl"), &self.records)?;
        let (train, valid, test) = split(&self.records);
        write_dataset(&dir.join("train.jsonl"), train)?;
        write_dataset(&dir.join("valid.jsonl"), valid)?;
        write_dataset(&dir.join("test.jsonl"), test)?;
        Ok(())
    }
}

/// 80/10/10 split in record order.
pub fn split(records: &[NoteRecord]) -> (&[NoteRecord], &[NoteRecord], &[NoteRecord]) {
    let n = records.len();
    let a = n * 8 / 10;
    let b = n * 9 / 10;
    (&records[..a], &records[a..b], &records[b..])
}

/// Code names: the first member of each major is the major code itself
/// (`100`), the rest are `100.1`, `100.2`, ...
fn synthetic_codes(spec: &SyntheticSpec) -> (Vec<CodeId>, Vec<usize>) {
    let mut codes = Vec::with_capacity(spec.num_codes);
    let mut major_of = Vec::with_capacity(spec.num_codes);
    for i in 0..spec.num_codes {
        let a = i * spec.num_majors / spec.num_codes;
        let first = (a * spec.num_codes).div_ceil(spec.num_majors);
        let j = i - first;
        let name = if j == 0 {
            format!("{}", 100 + a)
        } else {
            format!("{}.{}", 100 + a, j)
        };
        codes.push(CodeId::new(name).expect("generated codes are valid"));
        major_of.push(a);
    }
    (codes, major_of)
}

fn validate(spec: &SyntheticSpec) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    if spec.num_codes == 0 || spec.num_majors == 0 || spec.num_majors > spec.num_codes {
        return bad("need 1 <= num_majors <= num_codes".into());
    }
    if spec.keywords_per_code == 0 || spec.synonyms_per_code == 0 || spec.majors_per_chapter == 0 {
        return bad("keywords, synonyms and majors per chapter must be positive".into());
    }
    if spec.noise_len.0 > spec.noise_len.1 || (spec.noise_len.1 > 0 && spec.noise_vocab == 0) {
        return bad("invalid noise settings".into());
    }
    for p in [spec.code_rate, spec.implied_keyword_drop] {
        if !(0.0..=1.0).contains(&p) {
            return bad(format!("probability {p} outside [0,1]"));
        }
    }
    for r in &spec.implications {
        if r.trigger >= spec.num_codes || r.implied >= spec.num_codes || r.trigger == r.implied {
            return bad(format!("invalid implication {} -> {}", r.trigger, r.implied));
        }
        if !(0.0..=1.0).contains(&r.prob) {
            return bad(format!("implication probability {} outside [0,1]", r.prob));
        }
    }
    for &(a, b) in &spec.exclusions {
        if a >= spec.num_codes || b >= spec.num_codes || a == b {
            return bad(format!("invalid exclusion ({a}, {b})"));
        }
    }
    Ok(())
}

/// Codes forced by probability-one implications, including `c` itself.
fn forced_closure(spec: &SyntheticSpec, c: usize) -> Vec<usize> {
    let mut seen = vec![c];
    let mut i = 0;
    while i < seen.len() {
        let cur = seen[i];
        for r in &spec.implications {
            if r.trigger == cur && r.prob >= 1.0 && !seen.contains(&r.implied) {
                seen.push(r.implied);
            }
        }
        i += 1;
    }
    seen
}

fn excluded(spec: &SyntheticSpec, a: usize, b: usize) -> bool {
    spec.exclusions
        .iter()
        .any(|&(x, y)| (x == a && y == b) || (x == b && y == a))
}

fn compatible(spec: &SyntheticSpec, adding: &[usize], present: &[usize]) -> bool {
    adding
        .iter()
        .all(|&a| present.iter().chain(adding).all(|&p| !excluded(spec, a, p)))
}

struct NoteBuilder<'a> {
    spec: &'a SyntheticSpec,
    closures: &'a [Vec<usize>],
    gold: Vec<usize>,
    implied: Vec<bool>,
}

impl NoteBuilder<'_> {
    fn add(&mut self, c: usize, via_rule: bool, rng: &mut impl Rng) {
        self.gold.push(c);
        self.implied.push(via_rule);
        for r in &self.spec.implications {
            if r.trigger != c {
                continue;
            }
            let fire = rng.gen::<f64>() < r.prob || r.prob >= 1.0;
            if fire
                && !self.gold.contains(&r.implied)
                && compatible(self.spec, &self.closures[r.implied], &self.gold)
            {
                self.add(r.implied, true, rng);
            }
        }
    }
}

/// Generates a corpus. A code set is rejected as unsatisfiable when some
/// code's probability-one implications force an excluded pair.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    validate(spec)?;
    let closures: Vec<Vec<usize>> = (0..spec.num_codes).map(|c| forced_closure(spec, c)).collect();
    for (c, cl) in closures.iter().enumerate() {
        for (i, &x) in cl.iter().enumerate() {
            for &y in &cl[i + 1..] {
                if excluded(spec, x, y) {
                    return Err(Error::Unsatisfiable(format!(
                        "code {c} forces both {x} and {y}, which are mutually exclusive"
                    )));
                }
            }
        }
    }

    let (codes, major_of) = synthetic_codes(spec);
    let mut hierarchy = String::from("# synthetic two-level hierarchy under chapter roots\n");
    for a in 0..spec.num_majors {
        hierarchy.push_str(&format!("{}\tCH{}\n", 100 + a, a / spec.majors_per_chapter));
    }
    for (i, c) in codes.iter().enumerate() {
        let major = format!("{}", 100 + major_of[i]);
        if c.as_str() != major {
            hierarchy.push_str(&format!("{c}\t{major}\n"));
        }
    }

    let keywords: Vec<Vec<String>> = (0..spec.num_codes)
        .map(|i| (0..spec.keywords_per_code).map(|k| format!("k{i}x{k}")).collect())
        .collect();
    let mut descriptions = Descriptions::default();
    for (i, c) in codes.iter().enumerate() {
        let kw = &keywords[i];
        let syns = (0..spec.synonyms_per_code)
            .map(|j| {
                let mut words: Vec<&str> = kw.iter().map(String::as_str).collect();
                words.rotate_left(j % kw.len());
                words.join(" ")
            })
            .collect();
        descriptions.insert(c.clone(), syns);
    }

    let mut rng = stream_rng(spec.seed, Stream::Data);
    let mut records = Vec::with_capacity(spec.num_notes);
    for n in 0..spec.num_notes {
        let mut primary: Vec<usize> = (0..spec.num_codes)
            .filter(|_| rng.gen::<f64>() < spec.code_rate)
            .collect();
        if primary.is_empty() {
            primary.push(rng.gen_range(0..spec.num_codes));
        }
        let mut b = NoteBuilder {
            spec,
            closures: &closures,
            gold: Vec::new(),
            implied: Vec::new(),
        };
        for c in primary {
            if !b.gold.contains(&c) && compatible(spec, &closures[c], &b.gold) {
                b.add(c, false, &mut rng);
            }
        }
        let mut tokens: Vec<String> = Vec::new();
        for (&c, &via_rule) in b.gold.iter().zip(&b.implied) {
            if via_rule && rng.gen::<f64>() < spec.implied_keyword_drop {
                continue;
            }
            tokens.extend(keywords[c].iter().cloned());
        }
        let noise = rng.gen_range(spec.noise_len.0..=spec.noise_len.1);
        for _ in 0..noise {
            tokens.push(format!("n{}", rng.gen_range(0..spec.noise_vocab)));
        }
        if tokens.is_empty() {
            tokens.push(format!("n{}", rng.gen_range(0..spec.noise_vocab.max(1))));
        }
        tokens.shuffle(&mut rng);
        let mut gold_idx = b.gold.clone();
        gold_idx.sort_unstable();
        records.push(NoteRecord {
            id: format!("note{n:05}"),
            tokens,
            gold: gold_idx.into_iter().map(|i| codes[i].clone()).collect(),
        });
    }

    Ok(SyntheticCorpus {
        codes,
        hierarchy,
        descriptions,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::Distance;

    #[test]
    fn parses_records() {
        let known = parse_code_list("250.03\n401\n# c\n\n").unwrap();
        assert!(parse_dataset("", &known).unwrap().is_empty());
        let text = r#"{"id":"a","text":"Fever  AND cough","codes":["250.03","401","250.03"]}"#;
        let r = parse_dataset(text, &known).unwrap();
        assert_eq!(r[0].tokens, vec!["fever", "and", "cough"]);
        assert_eq!(r[0].gold.len(), 2);
    }

    #[test]
    fn reports_errors() {
        let known = parse_code_list("401").unwrap();
        let bad = "{\"id\":\"a\",\"text\":\"x\",\"codes\":[]}\nnot json\n";
        assert!(matches!(parse_dataset(bad, &known), Err(Error::Parse { line: 2, .. })));
        let unknown = "{\"id\":\"a\",\"text\":\"x\",\"codes\":[\"9\",\"401\",\"8\"]}\n";
        match parse_dataset(unknown, &known) {
            Err(Error::UnknownCodes(c)) => assert_eq!(c, vec!["8", "9"]),
            other => panic!("{other:?}"),
        }
        let empty = "{\"id\":\"a\",\"text\":\"  \",\"codes\":[]}\n";
        assert!(parse_dataset(empty, &known).is_err());
    }

    #[test]
    fn synthetic_roundtrip_and_determinism() {
        let spec = SyntheticSpec {
            implications: vec![Implication {
                trigger: 0,
                implied: 7,
                prob: 0.5,
            }],
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        let text = dataset_to_jsonl(&a.records).unwrap();
        assert_eq!(parse_dataset(&text, &a.codes).unwrap(), a.records);
        let other = generate_synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.records, other.records);
    }

    #[test]
    fn synthetic_hierarchy_has_varied_distances() {
        let spec = SyntheticSpec {
            num_codes: 12,
            num_majors: 4,
            majors_per_chapter: 2,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        assert_eq!(c.codes[0].as_str(), "100");
        assert_eq!(c.codes[1].as_str(), "100.1");
        assert_eq!(c.codes[3].as_str(), "101");
        let ont = Ontology::parse(&c.hierarchy, &codes_with_majors(&c.codes)).unwrap();
        let mut seen = BTreeSet::new();
        let majors: Vec<CodeId> = (100..104).map(|a| CodeId::new(a.to_string()).unwrap()).collect();
        for m in &majors {
            for code in &c.codes {
                seen.insert(match ont.hop_distance(m, code).unwrap() {
                    Distance::Hops(h) => h as i64,
                    Distance::Unrelated => -1,
                });
            }
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![-1, 0, 1, 2, 3]);
    }

    #[test]
    fn rules_are_enforced() {
        let spec = SyntheticSpec {
            num_notes: 2000,
            code_rate: 0.15,
            implications: vec![Implication {
                trigger: 2,
                implied: 9,
                prob: 1.0,
            }],
            exclusions: vec![(4, 5), (9, 11)],
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let has = |r: &NoteRecord, i: usize| r.gold.contains(&c.codes[i]);
        let mut with_trigger = 0;
        for r in &c.records {
            assert!(!(has(r, 4) && has(r, 5)));
            assert!(!(has(r, 9) && has(r, 11)));
            if has(r, 2) {
                with_trigger += 1;
                assert!(has(r, 9));
            }
        }
        assert!(with_trigger > 50);
    }

    #[test]
    fn unsatisfiable_rules_are_rejected() {
        let spec = SyntheticSpec {
            implications: vec![
                Implication {
                    trigger: 1,
                    implied: 2,
                    prob: 1.0,
                },
                Implication {
                    trigger: 2,
                    implied: 3,
                    prob: 1.0,
                },
            ],
            exclusions: vec![(3, 1)],
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Unsatisfiable(_))));
        let soft = SyntheticSpec {
            implications: vec![Implication {
                trigger: 1,
                implied: 2,
                prob: 0.9,
            }],
            exclusions: vec![(1, 2)],
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&soft).is_ok());
    }

    #[test]
    fn independent_codes_without_rules() {
        let spec = SyntheticSpec {
            num_notes: 5000,
            num_codes: 10,
            num_majors: 2,
            code_rate: 0.2,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let n = c.records.len() as f64;
        let freq: Vec<f64> = (0..10)
            .map(|i| c.records.iter().filter(|r| r.gold.contains(&c.codes[i])).count() as f64 / n)
            .collect();
        for i in 0..10 {
            for j in i + 1..10 {
                let both = c
                    .records
                    .iter()
                    .filter(|r| r.gold.contains(&c.codes[i]) && r.gold.contains(&c.codes[j]))
                    .count() as f64
                    / n;
                let expect = freq[i] * freq[j];
                let sigma = (expect * (1.0 - expect) / n).sqrt();
                assert!((both - expect).abs() <= 3.0 * sigma + 1e-3, "{i},{j}: {both} vs {expect}");
            }
        }
    }

    #[test]
    fn keywords_mark_gold_codes() {
        let c = generate_synthetic(&SyntheticSpec::default()).unwrap();
        for r in &c.records {
            for (i, code) in c.codes.iter().enumerate() {
                let kw = format!("k{i}x0");
                assert_eq!(r.tokens.contains(&kw), r.gold.contains(code));
            }
        }
    }

    #[test]
    fn writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_synthetic(&SyntheticSpec::default()).unwrap();
        c.write(dir.path()).unwrap();
        let codes = parse_code_list(&fs::read_to_string(dir.path().join("codes.txt")).unwrap()).unwrap();
        assert_eq!(codes, c.codes);
        let train = load_dataset(&dir.path().join("train.jsonl"), &codes).unwrap();
        let valid = load_dataset(&dir.path().join("valid.jsonl"), &codes).unwrap();
        let test = load_dataset(&dir.path().join("test.jsonl"), &codes).unwrap();
        assert_eq!(train.len() + valid.len() + test.len(), c.records.len());
        let desc = Descriptions::parse(&fs::read_to_string(dir.path().join("descriptions.tsv")).unwrap()).unwrap();
        assert_eq!(desc, c.descriptions);
    }
}
