//! Versioned on-disk model format. Every file is a JSON envelope with a
//! `format_version` and a tagged model payload, so older readers fail loudly
//! instead of misinterpreting fields.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ModelPayload {
    Lmm(crate::lmm::LmmModel),
    Fpca(crate::fpca::FpcaModel),
    Dtm(crate::dtm::DtmState),
}

impl ModelPayload {
    pub fn tag(&self) -> crate::analysis::ModelTag {
        match self {
            ModelPayload::Lmm(_) => crate::analysis::ModelTag::Lmm,
            ModelPayload::Fpca(_) => crate::analysis::ModelTag::Fpca,
            ModelPayload::Dtm(_) => crate::analysis::ModelTag::Dtm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub payload: ModelPayload,
}

pub fn save_model(path: &Path, payload: &ModelPayload) -> Result<()> {
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        payload: payload.clone(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelPayload> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported model format version {} (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    Ok(file.payload)
}
