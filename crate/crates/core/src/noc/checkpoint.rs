use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{InitProvenance, NocLayer, NocNet};
use super::spec::parse_spec;
use super::NocError;
use crate::tensor::{read_tensor_file, write_tensor_file, ConvParams};

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    kind: String,
    weight: String,
    bias: String,
    weight_shape: Vec<usize>,
}

/// `model.json` layout. Fc weights are `out x in` with the input flattened
/// row-major from `C x m x m`.
#[derive(Serialize, Deserialize)]
struct Topology {
    spec: String,
    n_categories: usize,
    input_shape: [usize; 3],
    init: InitProvenance,
    layers: Vec<LayerEntry>,
}

/// Writes `model.json` plus one blob per weight and bias into `dir`.
pub fn save_checkpoint(net: &NocNet, dir: impl AsRef<Path>) -> Result<(), NocError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    for (i, l) in net.layers().iter().enumerate() {
        let kind = if l.is_fc() { "fc" } else { "conv" };
        let weight = format!("layer{i}_{kind}_w.noct");
        let bias = format!("layer{i}_{kind}_b.noct");
        write_tensor_file(dir.join(&weight), l.weight())?;
        write_tensor_file(dir.join(&bias), l.bias())?;
        layers.push(LayerEntry {
            kind: kind.into(),
            weight,
            bias,
            weight_shape: l.weight().shape().to_vec(),
        });
    }
    let topo = Topology {
        spec: net.spec().to_string(),
        n_categories: net.num_classes() - 1,
        input_shape: net.input_shape(),
        init: net.provenance().clone(),
        layers,
    };
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(&topo)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<NocNet, NocError> {
    let dir = dir.as_ref();
    let topo: Topology = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
    let spec = parse_spec(&topo.spec, topo.n_categories)?;
    let mut layers = Vec::with_capacity(topo.layers.len());
    for e in &topo.layers {
        let weight = read_tensor_file(dir.join(&e.weight))?;
        let bias = read_tensor_file(dir.join(&e.bias))?;
        if weight.shape() != e.weight_shape {
            return Err(NocError::Checkpoint(format!(
                "{} has shape {:?}, model.json says {:?}",
                e.weight,
                weight.shape(),
                e.weight_shape
            )));
        }
        layers.push(match e.kind.as_str() {
            "conv" => NocLayer::Conv(ConvParams::new(weight, bias, 1, 1, 1)?),
            "fc" => NocLayer::Fc { weight, bias },
            other => {
                return Err(NocError::Checkpoint(format!(
                    "unknown layer kind {other:?}"
                )))
            }
        });
    }
    NocNet::from_layers(spec, topo.input_shape, layers, topo.init)
}
