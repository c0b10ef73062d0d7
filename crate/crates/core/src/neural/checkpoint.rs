//! JSON container of named tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DiscriminatorBundle, NetworkShape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const FORMAT: &str = "ohgc-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    shape: NetworkShape,
    tensors: Vec<NamedTensor>,
}

pub fn write_checkpoint<T: Scalar>(bundle: &DiscriminatorBundle<T>) -> String {
    let tensors = bundle
        .named_tensors()
        .into_iter()
        .map(|(name, t)| NamedTensor {
            name,
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|v| v.as_f64()).collect(),
        })
        .collect();
    let c = Container {
        format: FORMAT.into(),
        version: VERSION,
        shape: bundle.shape.clone(),
        tensors,
    };
    serde_json::to_string(&c).expect("checkpoint serializes")
}

pub fn save_checkpoint<T: Scalar>(bundle: &DiscriminatorBundle<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(bundle)).map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint and checks every tensor against the declared shape.
pub fn parse_checkpoint<T: Scalar>(text: &str) -> Result<DiscriminatorBundle<T>> {
    let c: Container = serde_json::from_str(text).map_err(|e| Error::json(e, text))?;
    if c.format != FORMAT || c.version != VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint {} v{}",
            c.format, c.version
        )));
    }
    let mut bundle = DiscriminatorBundle::<T>::new(c.shape, 0)?;
    let names: Vec<(String, Vec<usize>)> = bundle
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if names.len() != c.tensors.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, the network needs {}",
            c.tensors.len(),
            names.len()
        )));
    }
    for (((name, shape), dst), src) in names.iter().zip(bundle.tensors_mut()).zip(&c.tensors) {
        if &src.name != name {
            return Err(Error::Config(format!(
                "checkpoint tensor `{}` found where `{name}` was expected",
                src.name
            )));
        }
        if &src.shape != shape || src.values.len() != dst.len() {
            return Err(Error::Shape {
                name: name.clone(),
                expected: shape.clone(),
                found: src.shape.clone(),
            });
        }
        if src.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("tensor `{name}` is not finite")));
        }
        for (d, &s) in dst.data_mut().iter_mut().zip(&src.values) {
            *d = T::lit(s);
        }
    }
    bundle.validate()?;
    Ok(bundle)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<DiscriminatorBundle<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let b = DiscriminatorBundle::<f64>::new(NetworkShape::for_input(23), 3).unwrap();
        let back: DiscriminatorBundle<f64> = parse_checkpoint(&write_checkpoint(&b)).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn f32_round_trip() {
        let b = DiscriminatorBundle::<f32>::new(NetworkShape::for_input(23), 3).unwrap();
        let back: DiscriminatorBundle<f32> = parse_checkpoint(&write_checkpoint(&b)).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let b = DiscriminatorBundle::<f64>::new(NetworkShape::for_input(23), 3).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&write_checkpoint(&b)).unwrap();
        v["tensors"][0]["shape"] = serde_json::json!([64, 45]);
        let err = parse_checkpoint::<f64>(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Shape { ref name, .. } if name == "edgeconv.0.0.weight"));
    }

    #[test]
    fn truncated_values_are_rejected() {
        let b = DiscriminatorBundle::<f64>::new(NetworkShape::for_input(23), 3).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&write_checkpoint(&b)).unwrap();
        v["tensors"][1]["values"].as_array_mut().unwrap().pop();
        assert!(parse_checkpoint::<f64>(&v.to_string()).is_err());
    }
}
