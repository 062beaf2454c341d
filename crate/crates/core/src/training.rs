//! Mini-batch training loop shared by the reconstructor and the localizer.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::RegressorNet;
use crate::nn::{mse_loss, Adam, Graph, ParamStore, Tensor};
use crate::preprocess::{stack, upsample, TensorImage};
use crate::seed::{derive_seed, rng_from_seed};

/// Normalized low-resolution inputs with normalized regression targets.
#[derive(Debug, Clone, Default)]
pub struct Examples {
    pub inputs: Vec<TensorImage>,
    pub targets: Vec<Vec<f32>>,
}

impl Examples {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Optimizer settings of one run.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Upsamples `indices` of `inputs` to `hw` and stacks them.
pub fn batch_input(inputs: &[TensorImage], indices: &[usize], hw: (usize, usize)) -> Result<Tensor> {
    let images = indices
        .iter()
        .map(|&i| upsample(&inputs[i], hw.0, hw.1))
        .collect::<Result<Vec<_>>>()?;
    stack(&images)
}

fn batch_target(targets: &[Vec<f32>], indices: &[usize]) -> Result<Tensor> {
    let d = targets[indices[0]].len();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(&targets[i]);
    }
    Tensor::from_vec(&[indices.len(), d], data)
}

/// Network outputs for every input, in order.
pub fn predict(net: &RegressorNet, store: &ParamStore, inputs: &[TensorImage], batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let idx: Vec<usize> = (0..inputs.len()).collect();
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut g = Graph::inference(store);
        let x = g.input(batch_input(inputs, chunk, net.input_hw)?);
        let y = net.forward(&mut g, x)?;
        out.extend(g.value(y).data().chunks_exact(net.outputs).map(|r| r.to_vec()));
    }
    Ok(out)
}

/// Mean squared error between predictions and targets over all entries.
pub fn mean_squared_error(pred: &[Vec<f32>], targets: &[Vec<f32>]) -> f64 {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(targets) {
        for (a, b) in p.iter().zip(t) {
            sum += ((a - b) as f64).powi(2);
        }
        n += t.len();
    }
    sum / n.max(1) as f64
}

/// Trains `net` with Adam on the MSE loss. Before each epoch `before_epoch`
/// may adjust parameter trainability; after it `after_epoch` receives the
/// epoch, the mean training loss, the validation loss, and the validation
/// predictions. Batches are drawn from a per-epoch seeded shuffle. On return
/// the store holds the weights of the epoch with the lowest validation loss
/// (the earliest one on ties).
pub fn fit(
    net: &RegressorNet,
    store: &mut ParamStore,
    train: &Examples,
    val: &Examples,
    opts: FitOptions,
    mut before_epoch: impl FnMut(usize, &mut ParamStore),
    mut after_epoch: impl FnMut(usize, f64, f64, &[Vec<f32>]) -> Result<()>,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptySplit("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation set is empty".into()));
    }
    if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    let mut adam = Adam::new(store, opts.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Snapshot)> = None;
    for epoch in 0..opts.epochs {
        before_epoch(epoch, store);
        order.sort_unstable();
        order.shuffle(&mut rng_from_seed(derive_seed(opts.seed, epoch as u64)));
        let mut total = 0.0f64;
        for chunk in order.chunks(opts.batch_size) {
            let x = batch_input(&train.inputs, chunk, net.input_hw)?;
            let t = batch_target(&train.targets, chunk)?;
            store.zero_grad();
            let mut g = Graph::new(store, true);
            let xi = g.input(x);
            let y = net.forward(&mut g, xi)?;
            let (loss, grad) = mse_loss(g.value(y), &t);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            g.backward(y, grad);
            drop(g);
            adam.step(store);
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_pred = predict(net, store, &val.inputs, opts.batch_size)?;
        let val_loss = mean_squared_error(&val_pred, &val.targets);
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        log::debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
        after_epoch(epoch, train_loss, val_loss, &val_pred)?;
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, Snapshot::take(store)));
        }
    }
    if let Some((_, snap)) = best {
        snap.restore(store);
    }
    Ok(())
}

/// Parameter values and buffers at one point of training.
struct Snapshot {
    params: Vec<Tensor>,
    buffers: Vec<Tensor>,
}

impl Snapshot {
    fn take(store: &ParamStore) -> Self {
        Snapshot {
            params: store.params().iter().map(|p| p.value.clone()).collect(),
            buffers: store.buffers().iter().map(|b| b.value.clone()).collect(),
        }
    }

    fn restore(self, store: &mut ParamStore) {
        for (p, v) in store.params_mut().iter_mut().zip(self.params) {
            p.value = v;
        }
        for (b, v) in store.buffers_mut().iter_mut().zip(self.buffers) {
            b.value = v;
        }
    }
}
