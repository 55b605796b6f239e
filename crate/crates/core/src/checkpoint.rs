//! Checkpoint directories: one MERT file per parameter plus `manifest.json`
//! holding the flat config, parameter table, epoch and optional optimizer
//! moments (stored under `optimizer/`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Merba;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{read_mert, write_mert, DType, Element, Tensor};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "merba-checkpoint";

/// Adam moments for every parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: Config,
    pub params: ParamStore<T>,
    pub epoch: Option<usize>,
    pub optimizer: Option<OptimizerState<T>>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    epoch: Option<usize>,
    config: Map<String, Value>,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerEntry>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

impl<T: Element> Checkpoint<T> {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut params = Vec::with_capacity(self.params.len());
        for id in self.params.ids() {
            let spec = self.params.spec(id);
            let file = format!("{}.mert", spec.name);
            write_mert(dir.join(&file), self.params.get(id))?;
            params.push(ParamEntry {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                kind: spec.kind,
                file,
            });
        }
        if let Some(opt) = &self.optimizer {
            let odir = dir.join("optimizer");
            fs::create_dir_all(&odir)?;
            for (entry, (m, v)) in params.iter().zip(opt.m.iter().zip(&opt.v)) {
                write_mert(odir.join(format!("{}.m.mert", entry.name)), m)?;
                write_mert(odir.join(format!("{}.v.mert", entry.name)), v)?;
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: 1,
            dtype: dtype_name(T::DTYPE).into(),
            epoch: self.epoch,
            config: self.config.to_flat(),
            params,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry { step: o.step }),
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads and checks the parameter table against the architecture the
    /// stored config describes. Tensors stored in the other precision are
    /// converted.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!(
                "not a checkpoint manifest: format `{}`",
                manifest.format
            )));
        }
        let config = Config::default().with_overrides(&manifest.config)?;
        let model = Merba::new(&config)?;
        let specs = model.specs();
        if specs.len() != manifest.params.len() {
            return Err(Error::Format(format!(
                "manifest lists {} parameters, the configured model has {}",
                manifest.params.len(),
                specs.len()
            )));
        }
        let mut values = Vec::with_capacity(specs.len());
        for (spec, entry) in specs.iter().zip(&manifest.params) {
            if spec.name != entry.name || spec.shape != entry.shape || spec.kind != entry.kind {
                return Err(Error::Format(format!(
                    "manifest entry `{}` {:?} does not match model parameter `{}` {:?}",
                    entry.name, entry.shape, spec.name, spec.shape
                )));
            }
            values.push(read_mert::<T>(dir.join(&entry.file))?);
        }
        let params = ParamStore::from_values(std::sync::Arc::clone(specs), values)?;
        let optimizer = match manifest.optimizer {
            Some(o) => {
                let odir = dir.join("optimizer");
                let mut m = Vec::with_capacity(specs.len());
                let mut v = Vec::with_capacity(specs.len());
                for entry in &manifest.params {
                    m.push(read_mert::<T>(odir.join(format!("{}.m.mert", entry.name)))?);
                    v.push(read_mert::<T>(odir.join(format!("{}.v.mert", entry.name)))?);
                }
                Some(OptimizerState { step: o.step, m, v })
            }
            None => None,
        };
        Ok(Checkpoint {
            config,
            params,
            epoch: manifest.epoch,
            optimizer,
        })
    }
}
