//! Dense to expert conversion and back.
//!
//! Conversion partitions every FFN, copies the pre-FFN norm gain into the
//! first sub-layer, sets later sub-layer gains to 1 and routers to 0. The
//! result is a warm start, not the same function: unless `M = K = 1` with
//! the router off, zero routers scale each expert output by 0.5 (sigmoid)
//! or `1/K` (softmax), and later sub-layers see a re-normalised input.

use std::collections::HashMap;
use std::path::Path;

use crate::block::FinedeepFfn;
use crate::error::{Error, Result};
use crate::ffn::reassemble_ffn;
use crate::model::{Arch, LmModel};
use crate::tensor::{Scalar, Tensor};

use super::checkpoint::{load_checkpoint, save_checkpoint};

fn build_from_map<T: Scalar>(
    config: &crate::model::ModelConfig,
    mut tensors: HashMap<String, Tensor<T>>,
) -> Result<LmModel<T>> {
    let model = LmModel::build(config, |name, _, _| {
        tensors.remove(name).ok_or_else(|| Error::Contract(format!("conversion produced no tensor {name}")))
    })?;
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Contract(format!("conversion left tensor {name} unused")));
    }
    Ok(model)
}

pub fn convert_dense_to_finedeep<T: Scalar>(
    dense: &LmModel<T>,
    m: usize,
    k: usize,
    router_enabled: bool,
) -> Result<LmModel<T>> {
    if dense.config().arch != Arch::Dense {
        return Err(Error::Input("conversion needs a dense model".into()));
    }
    let mut config = dense.config().clone().with_finedeep(m, k);
    config.router_enabled = router_enabled;
    config.validate()?;

    let mut tensors: HashMap<String, Tensor<T>> =
        dense.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for (l, layer) in dense.layers.iter().enumerate() {
        let crate::model::FfnBlock::Dense { norm_gain, ffn } = &layer.ffn else {
            return Err(Error::Input(format!("layer {l} is not dense")));
        };
        let p = format!("layers.{l}");
        for n in ["ffn_norm", "ffn.w_gate", "ffn.w_up", "ffn.w_down"] {
            tensors.remove(&format!("{p}.{n}"));
        }
        let f = FinedeepFfn::from_dense(ffn, m, k, config.routing_mode, router_enabled, norm_gain.clone(), config.rms_eps)?;
        for (j, s) in f.sublayers.into_iter().enumerate() {
            let sp = format!("{p}.sub.{j}");
            tensors.insert(format!("{sp}.norm"), s.norm_gain);
            if let Some(r) = s.router {
                tensors.insert(format!("{sp}.router"), r);
            }
            for (i, e) in s.experts.into_iter().enumerate() {
                let w = e.weights;
                tensors.insert(format!("{sp}.expert.{i}.w_gate"), w.w_gate);
                tensors.insert(format!("{sp}.expert.{i}.w_up"), w.w_up);
                tensors.insert(format!("{sp}.expert.{i}.w_down"), w.w_down);
            }
        }
    }
    build_from_map(&config, tensors)
}

/// Concatenates each layer's experts back into one dense FFN whose pre-norm
/// is the first sub-layer's gain. Routers and the gains of later sub-layers
/// are dropped, so this inverts [`convert_dense_to_finedeep`] exactly only
/// for `M = 1`.
pub fn reassemble_dense<T: Scalar>(model: &LmModel<T>) -> Result<LmModel<T>> {
    if model.config().arch != Arch::Finedeep {
        return Err(Error::Input("reassembly needs an expert model".into()));
    }
    let mut config = model.config().clone();
    config.arch = Arch::Dense;
    let config = config.canonical();
    let mut tensors: HashMap<String, Tensor<T>> = HashMap::new();
    for (name, t) in model.named_tensors() {
        if !name.contains(".sub.") {
            tensors.insert(name, t.clone());
        }
    }
    for (l, layer) in model.layers.iter().enumerate() {
        let crate::model::FfnBlock::Finedeep(f) = &layer.ffn else {
            return Err(Error::Input(format!("layer {l} is not an expert layer")));
        };
        let experts: Vec<_> = f.experts().map(|e| &e.weights).collect();
        let dense = reassemble_ffn(&experts)?;
        let p = format!("layers.{l}");
        tensors.insert(format!("{p}.ffn_norm"), f.sublayers[0].norm_gain.clone());
        tensors.insert(format!("{p}.ffn.w_gate"), dense.w_gate);
        tensors.insert(format!("{p}.ffn.w_up"), dense.w_up);
        tensors.insert(format!("{p}.ffn.w_down"), dense.w_down);
    }
    build_from_map(&config, tensors)
}

/// File-level [`convert_dense_to_finedeep`]. Values pass through `f32`
/// untouched, so unchanged tensors keep their exact bytes.
pub fn convert_checkpoint(input: &Path, m: usize, k: usize, router_enabled: bool, output: &Path) -> Result<LmModel<f32>> {
    let dense: LmModel<f32> = load_checkpoint(input)?;
    let converted = convert_dense_to_finedeep(&dense, m, k, router_enabled)?;
    save_checkpoint(&converted, output)?;
    Ok(converted)
}
