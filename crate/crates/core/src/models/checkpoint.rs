//! JSON checkpoint container: config plus every named parameter and buffer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Model, ModelConfig};

pub const FORMAT: &str = "kinesig-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
    pub buffers: Vec<NamedArray>,
}

fn named<T: Scalar>(name: &str, t: &Tensor<T>) -> NamedArray {
    NamedArray {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.to_f64_vec(),
    }
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        let mut params = Vec::new();
        model.visit_params(&mut |p| params.push(named(&p.name, &p.value)));
        let mut buffers = Vec::new();
        model.visit_buffers(&mut |b| buffers.push(named(&b.name, &b.value)));
        Self {
            format: FORMAT.into(),
            version: VERSION,
            scalar: T::NAME.into(),
            config: model.config(),
            params,
            buffers,
        }
    }

    /// Rebuilds the model described by the config and overwrites every
    /// tensor. Missing, extra or mis-shaped entries are errors.
    pub fn into_model<T: Scalar>(self) -> Result<Model<T>> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container {} v{}",
                self.format, self.version
            )));
        }
        let mut model = self.config.build::<T>()?;
        let mut params = index(self.params)?;
        let mut buffers = index(self.buffers)?;
        let mut failure = None;
        model.visit_params_mut(&mut |p| {
            if failure.is_none() {
                failure = restore(&mut params, &p.name, &mut p.value).err();
            }
        });
        model.visit_buffers_mut(&mut |b| {
            if failure.is_none() {
                failure = restore(&mut buffers, &b.name, &mut b.value).err();
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(name) = params.keys().chain(buffers.keys()).next() {
            return Err(Error::Checkpoint(format!("unexpected entry {name}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn index(arrays: Vec<NamedArray>) -> Result<BTreeMap<String, NamedArray>> {
    let mut map = BTreeMap::new();
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::Checkpoint(format!("{}: data does not fill shape", a.name)));
        }
        if let Some(dup) = map.insert(a.name.clone(), a) {
            return Err(Error::Checkpoint(format!("duplicate entry {}", dup.name)));
        }
    }
    Ok(map)
}

fn restore<T: Scalar>(
    map: &mut BTreeMap<String, NamedArray>,
    name: &str,
    value: &mut Tensor<T>,
) -> Result<()> {
    let a = map
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
    if a.shape != value.shape() {
        return Err(Error::Checkpoint(format!(
            "{name}: shape {:?} does not match model {:?}",
            a.shape,
            value.shape()
        )));
    }
    *value = Tensor::from_f64(a.shape, &a.data)?;
    Ok(())
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    Checkpoint::load(path)?.into_model()
}
