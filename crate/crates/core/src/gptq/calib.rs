use std::collections::BTreeMap;

use crate::model::{Model, ModelError, TokenBatch};
use crate::tensor::{Graph, Real, Tensor};

/// Per-token inputs and output gradients of one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub layer_name: String,
    /// `d_in × tokens`.
    pub x: Tensor<f64>,
    /// `d_out × tokens`, gradient of each sequence's own loss w.r.t. the projection output.
    pub g: Tensor<f64>,
}

/// Runs the reference model over `batches` and records `X` and `G` for every projection.
///
/// Columns follow batch order, then sequence, then position.
pub fn capture_calibration<T: Real>(
    model: &Model<T>,
    batches: &[TokenBatch],
) -> Result<BTreeMap<String, CalibrationRecord>, ModelError> {
    if batches.is_empty() {
        return Err(ModelError::Empty("calibration needs at least one batch".into()));
    }
    let mut xs: BTreeMap<String, Vec<Tensor<f64>>> = BTreeMap::new();
    let mut gs: BTreeMap<String, Vec<Tensor<f64>>> = BTreeMap::new();
    for batch in batches {
        model.check_batch(batch, 2)?;
        let g = Graph::new();
        let p = model.bind(&g);
        let f = model.forward(&p, batch, None)?;
        let loss = model.loss(f.logits, batch)?;
        let sites: Vec<_> = f.taps.iter().flat_map(|t| t.linears.iter()).collect();
        let outputs: Vec<_> = sites.iter().map(|s| s.output).collect();
        let grads = g.backward(loss, &outputs)?;
        let b = batch.batch() as f64;
        for (i, s) in sites.iter().enumerate() {
            xs.entry(s.name.clone())
                .or_default()
                .push(s.input.value().cast::<f64>().transpose2());
            gs.entry(s.name.clone())
                .or_default()
                .push(grads.value(i).cast::<f64>().map(|v| v * b).transpose2());
        }
    }
    let mut out = BTreeMap::new();
    for (name, x_parts) in xs {
        let g_parts = &gs[&name];
        out.insert(
            name.clone(),
            CalibrationRecord {
                layer_name: name,
                x: hcat(&x_parts),
                g: hcat(g_parts),
            },
        );
    }
    Ok(out)
}

fn hcat(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(Tensor::cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![rows, cols], data).expect("consistent row counts")
}
