//! The target code set with tokenized synonyms, major codes and the
//! precomputed major-to-code edge types.

use std::collections::HashMap;

use crate::encoder::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::ontology::{CodeId, EdgeTypeTable, MajorCodeIndex, Ontology};

/// Synonym strings per code, read from `code<TAB>syn1|syn2|...` lines.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Descriptions {
    entries: HashMap<CodeId, Vec<String>>,
    order: Vec<CodeId>,
}

impl Descriptions {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                line: lineno + 1,
                msg,
            };
            let (code, rest) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected code<TAB>synonyms".into()))?;
            let code = CodeId::new(code.trim()).map_err(|e| parse_err(e.to_string()))?;
            let synonyms: Vec<String> = rest
                .split('|')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            if synonyms.is_empty() {
                return Err(parse_err(format!("no synonyms for {code}")));
            }
            out.insert(code, synonyms);
        }
        Ok(out)
    }

    pub fn insert(&mut self, code: CodeId, synonyms: Vec<String>) {
        if !self.entries.contains_key(&code) {
            self.order.push(code.clone());
        }
        self.entries.insert(code, synonyms);
    }

    pub fn get(&self, code: &CodeId) -> Option<&[String]> {
        self.entries.get(code).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Serializes back to the line format, in insertion order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.order {
            s.push_str(c.as_str());
            s.push('\t');
            s.push_str(&self.entries[c].join("|"));
            s.push('\n');
        }
        s
    }

    /// Every whitespace token of every synonym, in file order.
    pub fn tokens(&self) -> impl Iterator<Item = String> + '_ {
        self.order
            .iter()
            .flat_map(|c| self.entries[c].iter())
            .flat_map(|s| tokenize(s))
    }
}

/// Brings a list of synonyms to exactly `m` entries: truncates, or repeats
/// the first one.
fn fit_to_m(mut synonyms: Vec<Vec<usize>>, m: usize) -> Vec<Vec<usize>> {
    synonyms.truncate(m);
    while synonyms.len() < m {
        synonyms.push(synonyms[0].clone());
    }
    synonyms
}

/// `N` target codes, each with exactly `M` tokenized synonyms, plus the
/// major codes (with their own `M` synonyms) and the `A×N` edge types.
#[derive(Clone, Debug)]
pub struct CodeSpace {
    codes: Vec<CodeId>,
    index: HashMap<CodeId, usize>,
    m: usize,
    synonyms: Vec<Vec<usize>>,
    majors: MajorCodeIndex,
    major_synonyms: Vec<Vec<usize>>,
    edge_types: Vec<usize>,
    table: EdgeTypeTable,
}

impl CodeSpace {
    /// Codes without a description use their own code text as the single
    /// synonym. Majors without a description borrow the first synonym of
    /// each member code in order.
    pub fn build(
        codes: Vec<CodeId>,
        ontology: &Ontology,
        descriptions: &Descriptions,
        vocab: &Vocabulary,
        m: usize,
        table: EdgeTypeTable,
    ) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::Empty("code space"));
        }
        if m == 0 {
            return Err(Error::Config("synonym count must be at least 1".into()));
        }
        let mut index = HashMap::new();
        for (i, c) in codes.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate target code {c}")));
            }
        }
        let encode = |text: &str| -> Vec<usize> {
            let ids = vocab.encode(&tokenize(text));
            if ids.is_empty() {
                vec![crate::encoder::UNK]
            } else {
                ids
            }
        };
        let lists_of = |c: &CodeId| -> Option<Vec<Vec<usize>>> {
            descriptions
                .get(c)
                .map(|syns| syns.iter().map(|s| encode(s)).collect())
        };

        let mut per_code = Vec::with_capacity(codes.len());
        for c in &codes {
            let lists = lists_of(c).unwrap_or_else(|| vec![encode(c.as_str())]);
            per_code.push(fit_to_m(lists, m));
        }

        let majors = MajorCodeIndex::build(&codes);
        let mut major_synonyms = Vec::with_capacity(majors.len() * m);
        for (a, major) in majors.majors().iter().enumerate() {
            let lists = lists_of(major).unwrap_or_else(|| {
                majors
                    .members(a)
                    .into_iter()
                    .map(|i| per_code[i][0].clone())
                    .collect()
            });
            major_synonyms.extend(fit_to_m(lists, m));
        }

        let mut edge_types = Vec::with_capacity(majors.len() * codes.len());
        for major in majors.majors() {
            for c in &codes {
                edge_types.push(table.edge_type(major, c, ontology)?);
            }
        }

        Ok(Self {
            codes,
            index,
            m,
            synonyms: per_code.into_iter().flatten().collect(),
            majors,
            major_synonyms,
            edge_types,
            table,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[CodeId] {
        &self.codes
    }

    pub fn code(&self, i: usize) -> &CodeId {
        &self.codes[i]
    }

    pub fn index_of(&self, c: &CodeId) -> Option<usize> {
        self.index.get(c).copied()
    }

    /// Synonyms per code.
    pub fn m(&self) -> usize {
        self.m
    }

    /// The `M` synonyms of code `i`.
    pub fn synonyms(&self, i: usize) -> &[Vec<usize>] {
        &self.synonyms[i * self.m..(i + 1) * self.m]
    }

    pub fn majors(&self) -> &MajorCodeIndex {
        &self.majors
    }

    pub fn num_majors(&self) -> usize {
        self.majors.len()
    }

    pub fn major_synonyms(&self, a: usize) -> &[Vec<usize>] {
        &self.major_synonyms[a * self.m..(a + 1) * self.m]
    }

    pub fn edge_table(&self) -> EdgeTypeTable {
        self.table
    }

    /// Edge type between major `a` and target code `i`.
    pub fn edge_type(&self, a: usize, i: usize) -> usize {
        self.edge_types[a * self.codes.len() + i]
    }
}

/// Target codes followed by any of their majors not already listed, for
/// parsing an ontology that must contain both.
pub fn codes_with_majors(codes: &[CodeId]) -> Vec<CodeId> {
    let mut out = codes.to_vec();
    for major in MajorCodeIndex::build(codes).majors() {
        if !out.contains(major) {
            out.push(major.clone());
        }
    }
    out
}
