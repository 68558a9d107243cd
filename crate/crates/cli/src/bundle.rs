//! Checkpoint with everything needed to rebuild the model: configs,
//! vocabulary, code list, hierarchy and descriptions.

use std::path::Path;

use corelation::code_space::{CodeSpace, Descriptions};
use corelation::data::build_code_space;
use corelation::encoder::Vocabulary;
use corelation::model::{CoRelation, ModelConfig};
use corelation::numerics::checkpoint::{load_checkpoint, save_checkpoint};
use corelation::ontology::{CodeId, EdgeTypeTable};
use corelation::training::TrainConfig;
use corelation::{Error, Params};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synonyms: usize,
    pub edge_cap: usize,
    pub vocab: Vocabulary,
    pub codes: Vec<CodeId>,
    pub hierarchy: String,
    pub descriptions: String,
    pub steps: usize,
    pub best_epoch: Option<usize>,
}

pub struct Bundle {
    pub manifest: Manifest,
    pub net: CoRelation,
    pub params: Params,
    pub cs: CodeSpace,
}

impl Bundle {
    /// Lays out a freshly initialized model for the manifest.
    pub fn fresh(manifest: Manifest) -> Result<Self, CliError> {
        let table = EdgeTypeTable::new(manifest.edge_cap);
        let descriptions = Descriptions::parse(&manifest.descriptions)?;
        let (_, cs) = build_code_space(
            manifest.codes.clone(),
            &manifest.hierarchy,
            &descriptions,
            &manifest.vocab,
            manifest.synonyms,
            table,
        )?;
        let (net, params) = CoRelation::init(
            manifest.model.clone(),
            manifest.vocab.len(),
            table.bucket_count(),
            manifest.train.seed,
        )?;
        Ok(Self {
            manifest,
            net,
            params,
            cs,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let (params, value): (Params, _) =
            load_checkpoint(path).map_err(|e| CliError::Core(in_file(e, path)))?;
        let manifest: Manifest = serde_json::from_value(value)
            .map_err(|e| CliError::Core(Error::Checkpoint(format!("{}: manifest: {e}", path.display()))))?;
        let mut bundle = Self::fresh(manifest)?;
        let expected: Vec<(&str, &[usize])> = bundle.params.iter().map(|(n, a)| (n, a.shape())).collect();
        let found: Vec<(&str, &[usize])> = params.iter().map(|(n, a)| (n, a.shape())).collect();
        if expected != found {
            return Err(CliError::Core(Error::Checkpoint(format!(
                "{}: parameters do not match the manifest's model layout",
                path.display()
            ))));
        }
        bundle.params = params;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let value = serde_json::to_value(&self.manifest)
            .map_err(|e| CliError::Core(Error::Checkpoint(e.to_string())))?;
        save_checkpoint(path, &self.params, &value)?;
        Ok(())
    }
}

fn in_file(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}
