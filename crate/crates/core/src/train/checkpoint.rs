//! Checkpoint container: one safetensors file holding model, discriminator
//! and optimiser tensors under `model/`, `disc/` and `opt/{g,d}/{m,v}/`
//! prefixes. The header metadata carries the schema version, step counter,
//! optimiser step counts, the full training config as JSON and a SHA-256
//! over all tensors.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Device;

use super::optim::AdamState;
use super::TrainConfig;
use crate::arch::TwoBranchNet;
use crate::error::{Error, Result};
use crate::nn::ParameterStore;

pub const SCHEMA_VERSION: u32 = 1;
const FORMAT: &str = "dehaze-checkpoint";

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub generator: AdamState,
    pub discriminator: AdamState,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ParameterStore,
    pub discriminator: ParameterStore,
    pub optimizer: OptimizerState,
    pub step: usize,
    pub config: TrainConfig,
}

fn integrity(path: &Path, reason: impl Into<String>) -> Error {
    Error::Integrity {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    fn flatten(&self) -> ParameterStore {
        let mut all = self.model.with_prefix("model/");
        all.extend(self.discriminator.with_prefix("disc/"));
        for (tag, st) in [("g", &self.optimizer.generator), ("d", &self.optimizer.discriminator)] {
            all.extend(st.m.with_prefix(&format!("opt/{tag}/m/")));
            all.extend(st.v.with_prefix(&format!("opt/{tag}/v/")));
        }
        all
    }

    /// Writes to a temporary sibling and renames, so an interrupted save
    /// never leaves a partial file under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let all = self.flatten();
        let meta: HashMap<String, String> = [
            ("format", FORMAT.to_string()),
            ("schema_version", SCHEMA_VERSION.to_string()),
            ("step", self.step.to_string()),
            ("opt_g_steps", self.optimizer.generator.t.to_string()),
            ("opt_d_steps", self.optimizer.discriminator.t.to_string()),
            ("config", serde_json::to_string(&self.config)?),
            ("checksum", all.checksum()?),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("safetensors.partial");
        all.save_safetensors(&tmp, meta)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            ));
        }
        let (all, meta) = ParameterStore::load_safetensors(path)?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| integrity(path, format!("metadata field `{k}` missing")))
        };
        if field("format")? != FORMAT {
            return Err(integrity(path, "not a dehaze checkpoint"));
        }
        let version: u32 = field("schema_version")?
            .parse()
            .map_err(|_| integrity(path, "unreadable schema version"))?;
        if version != SCHEMA_VERSION {
            return Err(integrity(
                path,
                format!("schema version {version} is not supported (expected {SCHEMA_VERSION})"),
            ));
        }
        if all.checksum()? != *field("checksum")? {
            return Err(integrity(path, "checksum mismatch"));
        }
        let number = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| integrity(path, format!("metadata field `{k}` is not a number")))
        };
        let config: TrainConfig = serde_json::from_str(field("config")?)?;
        let state = |tag: &str, steps: usize| AdamState {
            t: steps,
            m: all.strip_prefix(&format!("opt/{tag}/m/")),
            v: all.strip_prefix(&format!("opt/{tag}/v/")),
        };
        Ok(Checkpoint {
            model: all.strip_prefix("model/"),
            discriminator: all.strip_prefix("disc/"),
            optimizer: OptimizerState {
                generator: state("g", number("opt_g_steps")?),
                discriminator: state("d", number("opt_d_steps")?),
            },
            step: number("step")?,
            config,
        })
    }

    /// Builds the network described by the embedded config and loads the
    /// weights strictly.
    pub fn build_model(&self) -> Result<TwoBranchNet> {
        let net = TwoBranchNet::new(
            &self.config.model_config(),
            0,
            self.config.precision.dtype(),
            &Device::Cpu,
        )?;
        self.load_into(&net)?;
        Ok(net)
    }

    /// Strict load into an existing network; a different architecture fails
    /// on the first key whose shape differs.
    pub fn load_into(&self, net: &TwoBranchNet) -> Result<()> {
        net.var_store().load(&self.model, true).map(|_| ())
    }
}
