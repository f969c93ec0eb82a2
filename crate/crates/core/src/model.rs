//! A denoiser, its embedding table and the schedule it was trained with.

use autodiff::Tensor;
use rand::Rng;

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::embedding::EmbeddingTable;
use crate::error::{DiffLmError, Result};
use crate::schedule::Schedule;

#[derive(Debug, Clone)]
pub struct DiffusionLm {
    pub denoiser: Denoiser,
    pub table: EmbeddingTable,
    pub sched: Schedule,
}

impl DiffusionLm {
    /// Fresh model; `sigma0` defaults to the schedule's initial std.
    pub fn init(config: DenoiserConfig, vocab: usize, sched: Schedule, sigma0: Option<f64>, rng: &mut impl Rng) -> Result<Self> {
        if sched.steps() != config.max_step {
            return Err(DiffLmError::InvalidParams(format!(
                "schedule has {} steps but the denoiser is conditioned on {}",
                sched.steps(),
                config.max_step
            )));
        }
        let sigma0 = sigma0.unwrap_or_else(|| sched.initial_std());
        let table = EmbeddingTable::init(vocab, config.latent_dim, sigma0, rng)?;
        let mut denoiser = Denoiser::new(config, rng)?;
        denoiser.set_skip(&sched, sigma0)?;
        Ok(DiffusionLm { denoiser, table, sched })
    }

    pub fn seq_len(&self) -> usize {
        self.denoiser.config.seq_len
    }

    pub fn latent_dim(&self) -> usize {
        self.denoiser.config.latent_dim
    }

    /// All trainable tensors: denoiser parameters, then the embedding matrix.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.denoiser.store.tensors().iter().collect();
        v.push(&self.table.weight);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.denoiser.store.tensors_mut().iter_mut().collect();
        v.push(&mut self.table.weight);
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}
