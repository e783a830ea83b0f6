//! Plain mini-batch SGD.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{batch_loss_and_gradients, Network};
use crate::error::{Error, Result};
use crate::sampler::PatchPair;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean pre-update batch loss for each epoch.
    pub loss_trace: Vec<f64>,
}

pub fn train(net: &Network, batches: &[Vec<PatchPair>], lr: f64, epochs: usize, seed: u64) -> Result<(Network, TrainReport)> {
    train_with_monitor(net, batches, lr, epochs, seed, |_, _, _| {})
}

/// Like [`train`], calling `monitor(epoch, net, epoch_loss)` after every epoch.
pub fn train_with_monitor(
    net: &Network,
    batches: &[Vec<PatchPair>],
    lr: f64,
    epochs: usize,
    seed: u64,
    mut monitor: impl FnMut(usize, &Network, f64),
) -> Result<(Network, TrainReport)> {
    if batches.is_empty() || batches.iter().any(Vec::is_empty) {
        return Err(Error::Parameter("training needs at least one non-empty batch".into()));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Parameter(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut loss_trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &b in &order {
            let params = net.params_f64();
            let (loss, grads) = batch_loss_and_gradients(&params, &net.config, &batches[b])?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            epoch_loss += loss;
            net.apply_update(&grads, lr);
        }
        epoch_loss /= batches.len() as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.6}");
        loss_trace.push(epoch_loss);
        monitor(epoch, &net, epoch_loss);
    }
    Ok((net, TrainReport { loss_trace }))
}
