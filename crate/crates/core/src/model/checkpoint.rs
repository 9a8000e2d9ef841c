use serde::{Deserialize, Serialize};

use super::{EncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::param::Module;
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "selfaug-encoder";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameter values of `module` in its canonical order.
pub fn state_of(module: &dyn Module) -> Vec<NamedArray> {
    module
        .parameters()
        .into_iter()
        .map(|p| NamedArray {
            name: p.name().to_string(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect()
}

/// Overwrites parameter values from `state`; names and shapes must match
/// one-to-one.
pub fn load_state(module: &mut dyn Module, state: &[NamedArray]) -> Result<()> {
    let params = module.parameters_mut();
    if params.len() != state.len() {
        return Err(Error::Validation(format!(
            "checkpoint holds {} arrays, module expects {}",
            state.len(),
            params.len()
        )));
    }
    for (p, a) in params.into_iter().zip(state) {
        if p.name() != a.name || p.value.shape() != a.shape.as_slice() {
            return Err(Error::Validation(format!(
                "checkpoint array `{}` {:?} does not match parameter `{}` {:?}",
                a.name,
                a.shape,
                p.name(),
                p.value.shape()
            )));
        }
        p.value = Tensor::new(a.shape.clone(), a.data.clone())?;
    }
    Ok(())
}

/// Versioned JSON container of a model config plus its named arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
}

impl ModelCheckpoint {
    pub fn of(model: &EncoderModel) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FORMAT_VERSION,
            config: model.config().clone(),
            params: state_of(model),
        }
    }

    pub fn to_model(&self) -> Result<EncoderModel> {
        if self.format != MODEL_FORMAT || self.version != MODEL_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = EncoderModel::init(self.config.clone(), 0)?;
        load_state(&mut model, &self.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, Pooling};

    fn model(seed: u64) -> EncoderModel {
        EncoderModel::init(
            ModelConfig {
                vocab_size: 7,
                d_model: 4,
                n_heads: 2,
                n_layers: 1,
                d_ff: 8,
                max_seq_len: 5,
                dropout_rate: 0.0,
                head: HeadKind::Multilabel(3),
                pooling: Pooling::Mean,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = model(11);
        let first = serde_json::to_vec(&ModelCheckpoint::of(&m)).unwrap();
        let parsed: ModelCheckpoint = serde_json::from_slice(&first).unwrap();
        let restored = parsed.to_model().unwrap();
        let second = serde_json::to_vec(&ModelCheckpoint::of(&restored)).unwrap();
        assert_eq!(first, second);
        for (a, b) in m.parameters().iter().zip(restored.parameters()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut ck = ModelCheckpoint::of(&model(1));
        ck.params[0].name = "bogus".into();
        assert!(ck.to_model().is_err());
        let mut ck = ModelCheckpoint::of(&model(1));
        ck.version = 99;
        assert!(ck.to_model().is_err());
    }
}
