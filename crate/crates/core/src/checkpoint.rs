//! JSON model checkpoints. Values are stored as `f64` whatever the scalar
//! type, so an `f32` run can be resumed in `f64` and vice versa.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const FORMAT: &str = "xlkd-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<StoredParam>,
    /// Global optimization step the parameters were taken at.
    pub step: u64,
    /// Free-form run context (selection metric, resolved settings).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, step: u64, meta: serde_json::Value) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config().clone(),
            params: model
                .params()
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    values: p.value.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
            step,
            meta,
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::init(self.config.clone(), 0)?;
        let values = self
            .params
            .iter()
            .map(|p| {
                if p.values.len() != p.rows * p.cols {
                    return Err(Error::contract(format!("parameter {} has a wrong value count", p.name)));
                }
                let data = p.values.iter().map(|&v| T::of(v)).collect();
                Ok((p.name.clone(), Matrix::from_vec(p.rows, p.cols, data)))
            })
            .collect::<Result<Vec<_>>>()?;
        model.load_values(values)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::format(
                path,
                1,
                format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            ));
        }
        Ok(ck)
    }
}
