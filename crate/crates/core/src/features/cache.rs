use std::path::Path;

use seld_autodiff::pack::Pack;

use super::{BranchFeatures, FeatureConfig};
use crate::error::{Result, SeldError};

/// Writes branch features with the extraction parameters as a header.
pub fn save_cache(path: impl AsRef<Path>, feats: &BranchFeatures, cfg: &FeatureConfig) -> Result<()> {
    let mut pack = Pack::new();
    for (k, v) in cfg.header() {
        pack.set_meta(k, v);
    }
    pack.insert("sed", feats.sed.clone())?;
    pack.insert("doa", feats.doa.clone())?;
    pack.insert("sde", feats.sde.clone())?;
    pack.save(path)?;
    Ok(())
}

/// Loads cached features, refusing caches built with other parameters.
pub fn load_cache(path: impl AsRef<Path>, cfg: &FeatureConfig) -> Result<BranchFeatures> {
    let path = path.as_ref();
    let pack = Pack::load(path)?;
    for (k, want) in cfg.header() {
        match pack.meta.get(&k) {
            Some(got) if *got == want => {}
            got => {
                return Err(SeldError::Invalid(format!(
                    "feature cache {}: {k} is {:?}, active config wants {want}",
                    path.display(),
                    got.map(String::as_str).unwrap_or("missing")
                )))
            }
        }
    }
    BranchFeatures::new(
        pack.require("sed")?.clone(),
        pack.require("doa")?.clone(),
        pack.require("sde")?.clone(),
    )
}
