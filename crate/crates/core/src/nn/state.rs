use std::collections::{BTreeMap, HashMap};

use ndarray::IxDyn;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::{Layer, Tensor};
use crate::error::{Error, Result};

/// All parameters and buffers by name, in visit order.
pub fn state_dict(model: &dyn Layer) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    model.visit_ref("", &mut |name, p| out.push((name, p.value.clone())));
    out
}

/// Copies matching tensors into `model`. With `strict`, every model tensor
/// must be present; extra entries in `state` are ignored either way.
pub fn load_state(model: &mut dyn Layer, state: &BTreeMap<String, Tensor>, strict: bool) -> Result<usize> {
    let mut loaded = 0;
    let mut problem = None;
    model.visit("", &mut |name, p| {
        if problem.is_some() {
            return;
        }
        match state.get(&name) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value.assign(t);
                loaded += 1;
            }
            Some(t) => {
                problem = Some(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    p.value.shape(),
                    t.shape()
                ));
            }
            None if strict => problem = Some(format!("missing tensor {name}")),
            None => {}
        }
    });
    match problem {
        Some(msg) => Err(Error::Checkpoint(msg)),
        None => Ok(loaded),
    }
}

/// Serializes tensors as little-endian f32 safetensors with an optional
/// single metadata entry (one key keeps the header byte-stable).
pub fn write_safetensors(tensors: &[(String, Tensor)], metadata: Option<(&str, String)>) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let data = t.as_standard_layout().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), t.shape().to_vec(), data)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let info = metadata.map(|(k, v)| HashMap::from([(k.to_string(), v)]));
    safetensors::serialize(views, info).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Reads f32 (or f64, narrowed) tensors and the metadata map.
pub fn read_safetensors(bytes: &[u8]) -> Result<(BTreeMap<String, Tensor>, HashMap<String, String>)> {
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(bad)?;
    let metadata = header.metadata().clone().unwrap_or_default();
    let file = SafeTensors::deserialize(bytes).map_err(bad)?;
    let mut out = BTreeMap::new();
    for (name, view) in file.tensors() {
        let values: Vec<f32> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect(),
            // integer counters such as num_batches_tracked
            Dtype::I64 => view
                .data()
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect(),
            other => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {other:?}"))),
        };
        let t = Tensor::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.insert(name, t);
    }
    Ok((out, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tiny_cnn, Linear, Sequential};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_restores_predictions() {
        let a = tiny_cnn(&mut ChaCha8Rng::seed_from_u64(1));
        let mut b = tiny_cnn(&mut ChaCha8Rng::seed_from_u64(2));
        let bytes = write_safetensors(&state_dict(&a), Some(("meta", "{}".into()))).unwrap();
        let (state, meta) = read_safetensors(&bytes).unwrap();
        assert_eq!(meta["meta"], "{}");
        load_state(&mut b, &state, true).unwrap();
        let x = Tensor::from_shape_fn(IxDyn(&[1, 3, 12, 12]), |i| (i[2] * i[3]) as f32 / 100.0);
        assert_eq!(a.forward(&x), b.forward(&x));
        // same state, same bytes
        assert_eq!(
            bytes,
            write_safetensors(&state_dict(&b), Some(("meta", "{}".into()))).unwrap()
        );
    }

    #[test]
    fn strict_load_reports_missing_and_mismatched() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Sequential::new().push("fc", Linear::new(2, 1, &mut rng));
        let empty = BTreeMap::new();
        assert!(matches!(load_state(&mut m, &empty, true), Err(Error::Checkpoint(_))));
        assert_eq!(load_state(&mut m, &empty, false).unwrap(), 0);
        let wrong = BTreeMap::from([("fc.weight".to_string(), Tensor::zeros(IxDyn(&[3, 3])))]);
        assert!(load_state(&mut m, &wrong, false).is_err());
    }
}
