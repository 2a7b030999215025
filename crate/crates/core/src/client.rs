//! Local training on one client plus the statistics the selector needs.

use crate::dataset::ClientDataset;
use crate::error::Result;
use crate::model::{evaluate, sgd_epochs, EvalDetail, ModelParams, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdateResult {
    pub client_id: usize,
    pub new_params: ModelParams,
    /// `n_k * sqrt(mean(loss_i^2))` at the received global parameters.
    pub loss_utility: f64,
    /// Mean local loss at the received global parameters.
    pub mean_loss: f64,
    /// `n_k * sqrt(mean(||grad_i||^2))` at the received parameters, when requested.
    pub grad_norm_utility: Option<f64>,
    pub n_k: usize,
    /// Mean local loss after training. Diagnostics only.
    pub post_train_loss: f64,
    /// `||new_params - global_params||_2`.
    pub weight_delta_norm: f64,
}

/// `|B| * sqrt((1/|B|) * sum(v^2))`, the aggregate-magnitude utility over a sample bin.
pub fn rms_utility(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    n * (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
}

/// Runs one client's round: measure utility at the received model, then train.
///
/// Utilities are taken before training so they rank clients against the
/// current global model regardless of the epoch count.
pub fn client_update(
    client: &ClientDataset,
    global: &ModelParams,
    cfg: &TrainConfig,
    with_grad_norms: bool,
) -> Result<ClientUpdateResult> {
    let detail = if with_grad_norms {
        EvalDetail::LossesAndGradNorms
    } else {
        EvalDetail::Losses
    };
    let before = evaluate(global, &client.data, detail)?;
    let losses = before.per_sample_losses.as_deref().unwrap_or_default();
    let loss_utility = rms_utility(losses);
    let grad_norm_utility = before.per_sample_grad_norms.as_deref().map(rms_utility);

    let new_params = sgd_epochs(global, &client.data, cfg)?;
    let post_train_loss = evaluate(&new_params, &client.data, EvalDetail::Summary)?.mean_loss;
    let weight_delta_norm = new_params.distance(global)?;

    Ok(ClientUpdateResult {
        client_id: client.client_id,
        new_params,
        loss_utility,
        mean_loss: before.mean_loss,
        grad_norm_utility,
        n_k: client.n_k(),
        post_train_loss,
        weight_delta_norm,
    })
}
